"""sllab: a desk-scale continual-learning laboratory.

Streams domain-tagged Q&A chunks into a tiny byte-level transformer,
trains only low-rank adapters on its attention projections, mixes in a
proportional replay buffer, and tracks perplexity, answer drift, and
judge ratings against a frozen post-chunk-0 baseline.
"""

__version__ = "0.1.0"

from .experiment import (ExperimentConfig, forgetting_delta,  # noqa: F401
                         parse_config_file, resume_run, run_stream)
from .lora import attach, merge  # noqa: F401
from .model import ModelConfig, init_model  # noqa: F401

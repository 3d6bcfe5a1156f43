import numpy as np
import pytest

from sllab import datagen
from sllab.experiment import (ExperimentConfig, LoraSettings, OptimSettings,
                              StreamSettings)
from sllab.model import ModelConfig

TINY_MODEL = dict(d_model=16, n_layers=1, n_heads=2, context_len=128, d_ff=32)


def tiny_config(data_dir, out_dir, seed=0, replay_fraction=0.25, rounds=2,
                chunk_size=4, steps=8, eval_set_size=3) -> ExperimentConfig:
    """A seconds-scale experiment config for integration tests."""
    domains = tuple(str(data_dir / f"{n}.jsonl") for n in datagen.DOMAIN_NAMES)
    return ExperimentConfig(
        model=ModelConfig(**TINY_MODEL, seed=seed),
        lora=LoraSettings(rank=2, alpha=4.0),
        stream=StreamSettings(domains=domains, rounds=rounds,
                              chunk_size=chunk_size,
                              replay_fraction=replay_fraction),
        optimizer=OptimSettings(steps_per_chunk=steps, microbatch_size=2),
        eval_set_size=eval_set_size,
        seed=seed,
        output_dir=str(out_dir),
    )


@pytest.fixture(scope="session")
def corpora_dir(tmp_path_factory):
    """Three small synthetic corpora shared across integration tests."""
    path = tmp_path_factory.mktemp("corpora")
    datagen.write_corpora(path, n_domains=3, n_records=30, seed=1234)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(0)

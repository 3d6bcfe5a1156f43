"""Seeded synthetic Q&A corpora over three disjoint pseudo-domains.

Stand-ins for real medical/genetic/legal datasets. Template words and
generated jargon are chosen so that no word type appears in more than
one domain (digits included: they only occur in the genetic domain).
Disjoint surface vocabularies guarantee measurable cross-domain
interference at toy scale.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError
from .stream import QARecord, save_corpus

DOMAIN_NAMES = ("medical", "genetic", "legal")

_MED_CONDS = [p + s
              for p in ("card", "derm", "neur", "hepat", "gastr",
                        "osteo", "pulmo", "arthr", "nephr", "cephal")
              for s in ("itis", "osis", "emia", "algia", "opathy")]
_MED_DRUGS = [p + s
              for p in ("dosa", "mexi", "vora", "telu", "zapra", "quino")
              for s in ("nol", "trin", "mab", "zide")]
_MED_TEMPLATES = [
    ("What symptoms accompany {c}?", "Patients suffering {c} report {s}."),
    ("What remedy suits {c}?", "Clinicians prescribe {d} against {c}."),
    ("What prognosis follows {c}?", "Recovery from {c} takes strict rest."),
]

_GEN_GENES = [f"{a}{b}X{i}" for a in "VKRT" for b in "MQZ" for i in range(1, 7)]
_GEN_CONDS = [p + s
              for p in ("tri", "tetra", "mono", "poly", "hexa", "octo")
              for s in ("somaty", "plasia", "trophy", "ploidy")]
_GEN_TEMPLATES = [
    ("Which gene drives {c}?", "Variants inside {g} trigger {c}."),
    ("Which chromosome carries {g}?", "Chromosome {n} carries gene {g}."),
    ("Which mutation disrupts {g}?", "Inherited copies near marker rs{m} disrupt {g}."),
]

_LAW_TERMS = [p + s
              for p in ("estop", "tortu", "lien", "fiduci", "replev",
                        "habea", "cavea", "delict")
              for s in ("pelium", "sance", "arium", "atus")]
_LAW_TEMPLATES = [
    ("Define the statutory term {t}.", "Under prevailing doctrine, {t} denotes a binding duty."),
    ("Explain when {t} applies.", "Courts construe {t} as an enforceable covenant."),
    ("Summarize the rule behind {t}.", "The codified rule treats {t} like a formal pledge."),
]


def _medical(rng: np.random.Generator) -> tuple[str, str]:
    q, a = _MED_TEMPLATES[rng.integers(len(_MED_TEMPLATES))]
    fills = {
        "c": _MED_CONDS[rng.integers(len(_MED_CONDS))],
        "s": _MED_CONDS[rng.integers(len(_MED_CONDS))],
        "d": _MED_DRUGS[rng.integers(len(_MED_DRUGS))],
    }
    return q.format(**fills), a.format(**fills)


def _genetic(rng: np.random.Generator) -> tuple[str, str]:
    q, a = _GEN_TEMPLATES[rng.integers(len(_GEN_TEMPLATES))]
    fills = {
        "c": _GEN_CONDS[rng.integers(len(_GEN_CONDS))],
        "g": _GEN_GENES[rng.integers(len(_GEN_GENES))],
        "n": int(rng.integers(1, 23)),
        "m": int(rng.integers(100, 999)),
    }
    return q.format(**fills), a.format(**fills)


def _legal(rng: np.random.Generator) -> tuple[str, str]:
    q, a = _LAW_TEMPLATES[rng.integers(len(_LAW_TEMPLATES))]
    fills = {"t": _LAW_TERMS[rng.integers(len(_LAW_TERMS))]}
    return q.format(**fills), a.format(**fills)


_GENERATORS = {"medical": _medical, "genetic": _genetic, "legal": _legal}


def generate_domain(name: str, n_records: int, seed: int) -> list[QARecord]:
    """Deterministic synthetic corpus for one named domain."""
    if name not in _GENERATORS:
        raise ConfigError(f"unknown synthetic domain {name!r}; have {DOMAIN_NAMES}")
    if n_records < 1:
        raise ConfigError(f"n_records must be >= 1, got {n_records}")
    rng = np.random.default_rng([seed, DOMAIN_NAMES.index(name)])
    gen = _GENERATORS[name]
    records = []
    for i in range(n_records):
        q, a = gen(rng)
        records.append(QARecord(name, q, a, i))
    return records


def write_corpora(out_dir: str | os.PathLike, n_domains: int, n_records: int,
                  seed: int) -> list[str]:
    """Write one JSONL file per domain into out_dir; returns the paths."""
    if not 1 <= n_domains <= len(DOMAIN_NAMES):
        raise ConfigError(
            f"n_domains must be in [1, {len(DOMAIN_NAMES)}], got {n_domains}"
        )
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for name in DOMAIN_NAMES[:n_domains]:
        records = generate_domain(name, n_records, seed)
        path = os.path.join(os.fspath(out_dir), f"{name}.jsonl")
        save_corpus(records, path)
        paths.append(path)
    return paths

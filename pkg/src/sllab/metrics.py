"""The three evaluation signals: perplexity, baseline drift, judge ratings.

Perplexity is exp of the token-weighted mean next-token loss over
formatted held-out Q&A texts. Drift is the cosine similarity between the
current greedy answer's embedding and the frozen baseline embedding,
where an answer embeds as the L2-normalized mean of the frozen base
token-embedding rows of its bytes. Ratings come from a pluggable judge;
the default is a deterministic token-overlap mock, with an HTTP client
speaking the same wire protocol for a real judge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import requests

from .errors import JudgeError
from .lora import AdaptedModel
from .model import Model, format_example, format_prompt, nll_stats
from .stream import QARecord
from .tensor import ContractError

GEN_MAX_NEW = 64  # covers the longest synthetic answer plus EOS


@dataclass(frozen=True)
class EvalSet:
    """Held-out prompts for one domain, fixed at stream start."""

    domain: str
    prompts: tuple[QARecord, ...]


@dataclass(frozen=True)
class JudgeVerdict:
    rating: int
    rationale: str | None = None


@dataclass(frozen=True)
class BaselineEntry:
    answer: bytes
    embedding: np.ndarray | None  # None when the baseline answer is empty


class BaselineSnapshot:
    """Frozen post-chunk-0 answers and embeddings, keyed (domain, prompt id)."""

    def __init__(self, entries: dict[tuple[str, int], BaselineEntry]):
        self._entries = dict(entries)

    def entry(self, domain: str, record_id: int) -> BaselineEntry:
        key = (domain, record_id)
        if key not in self._entries:
            raise ContractError(f"no baseline captured for {key}")
        return self._entries[key]

    def items(self):
        return self._entries.items()

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BaselineSnapshot):
            return NotImplemented
        if self._entries.keys() != other._entries.keys():
            return False
        for k, e in self._entries.items():
            o = other._entries[k]
            if e.answer != o.answer:
                return False
            if (e.embedding is None) != (o.embedding is None):
                return False
            if e.embedding is not None and not np.array_equal(e.embedding, o.embedding):
                return False
        return True


def _base_model(lm: Model | AdaptedModel) -> Model:
    return lm.base if isinstance(lm, AdaptedModel) else lm


def perplexity(lm: Model | AdaptedModel, eval_set: EvalSet) -> tuple[float, float]:
    """(exp(avg_loss), avg_loss) over the eval set's formatted Q&A texts.

    The mean is token-weighted across prompts, and the perplexity is the
    exponential of that mean by construction.
    """
    if not eval_set.prompts:
        raise ContractError("perplexity: empty eval set")
    total, count = 0.0, 0
    if isinstance(lm, AdaptedModel):
        overrides = lm.overrides()
        base = lm.base
    else:
        overrides, base = None, lm
    for rec in eval_set.prompts:
        s, n = nll_stats(base, format_example(rec.question, rec.answer), overrides)
        total += s
        count += n
    avg_loss = total / count
    return math.exp(avg_loss), avg_loss


def embed(text: str | bytes, lm: Model | AdaptedModel) -> np.ndarray:
    """Unit vector: mean of the frozen base embedding rows of the text bytes.

    Uses raw byte ids only (no BOS/EOS), so repeated characters do not
    shift the result, and adapter state never enters the computation.
    """
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    if not raw:
        raise ContractError("embed: empty text")
    table = _base_model(lm).embedding.data
    mean = table[np.frombuffer(raw, dtype=np.uint8)].mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        raise ContractError("embed: zero-norm embedding")
    return mean / norm


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Dot product of two unit vectors."""
    for name, vec in (("u", u), ("v", v)):
        if abs(float(np.linalg.norm(vec)) - 1.0) > 1e-6:
            raise ContractError(f"cosine_similarity: {name} is not unit-normalized")
    return float(np.dot(u, v))


def _answer_similarity(answer: bytes, entry: BaselineEntry,
                       lm: Model | AdaptedModel) -> float:
    # Empty answers carry no embedding: identical-empty pairs count as
    # unchanged, empty-vs-nonempty as fully drifted.
    if not answer and entry.embedding is None:
        return 1.0
    if not answer or entry.embedding is None:
        return 0.0
    return cosine_similarity(embed(answer, lm), entry.embedding)


def generate_answers(lm: Model | AdaptedModel, eval_set: EvalSet,
                     max_new: int = GEN_MAX_NEW) -> list[bytes]:
    """Greedy answer per prompt, in prompt order."""
    return [lm.generate_greedy(format_prompt(rec.question), max_new)
            for rec in eval_set.prompts]


def drift_from_answers(answers: list[bytes], snapshot: BaselineSnapshot,
                       eval_set: EvalSet, lm: Model | AdaptedModel) -> float:
    """Mean cosine similarity of given answers to the frozen baseline."""
    if len(answers) != len(eval_set.prompts):
        raise ContractError("drift_from_answers: answer/prompt count mismatch")
    sims = []
    for rec, answer in zip(eval_set.prompts, answers):
        entry = snapshot.entry(eval_set.domain, rec.id)
        sims.append(_answer_similarity(answer, entry, lm))
    return float(np.mean(sims))


def drift_similarity(lm: Model | AdaptedModel, snapshot: BaselineSnapshot,
                     eval_set: EvalSet, max_new: int = GEN_MAX_NEW) -> float:
    """Regenerate answers and compare them to the baseline snapshot."""
    return drift_from_answers(generate_answers(lm, eval_set, max_new),
                              snapshot, eval_set, lm)


# ---------------------------------------------------------------------------
# Judges


def _as_text(value: str | bytes) -> str:
    return value.decode("utf-8", "replace") if isinstance(value, bytes) else value


def token_jaccard(a: str, b: str) -> float:
    """Jaccard overlap of whitespace-token sets; two empty texts count as 1."""
    ta, tb = set(a.split()), set(b.split())
    if not ta and not tb:
        return 1.0
    if not ta or not tb:
        return 0.0
    return len(ta & tb) / len(ta | tb)


class MockJudge:
    """Deterministic stand-in judge: rating = clamp(1 + round(9*J), 1, 10)
    where J is the token-level Jaccard overlap with the baseline answer."""

    def rate(self, question: str, answer: str | bytes,
             baseline: str | bytes) -> JudgeVerdict:
        if not question:
            raise ContractError("judge: empty question")
        j = token_jaccard(_as_text(answer), _as_text(baseline))
        rating = min(10, max(1, 1 + int(math.floor(9 * j + 0.5))))
        return JudgeVerdict(rating=rating, rationale=f"token overlap {j:.3f}")


class HttpJudge:
    """Client for a remote judge speaking POST {base_url}/rate.

    Request: {"question": str, "answer": str, "baseline": str}.
    Response: {"rating": int 1..10, "rationale": str optional}.
    Anything else raises JudgeError with transport detail; there is never
    a silent default rating.
    """

    def __init__(self, base_url: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout

    def rate(self, question: str, answer: str | bytes,
             baseline: str | bytes) -> JudgeVerdict:
        if not question:
            raise ContractError("judge: empty question")
        payload = {
            "question": question,
            "answer": _as_text(answer),
            "baseline": _as_text(baseline),
        }
        url = f"{self.base_url}/rate"
        try:
            resp = requests.post(url, json=payload, timeout=self.timeout)
        except requests.RequestException as exc:
            raise JudgeError(f"judge unreachable at {url}: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise JudgeError(f"judge returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise JudgeError(f"judge reply is not JSON: {resp.text[:200]}") from exc
        rating = body.get("rating")
        if not isinstance(rating, int) or isinstance(rating, bool) or not 1 <= rating <= 10:
            raise JudgeError(f"judge rating out of range or missing: {rating!r}")
        rationale = body.get("rationale")
        if rationale is not None and not isinstance(rationale, str):
            raise JudgeError(f"judge rationale must be a string: {rationale!r}")
        return JudgeVerdict(rating=rating, rationale=rationale)


def judge_rate(judge, question: str, answer: str | bytes,
               baseline: str | bytes) -> JudgeVerdict:
    """Rate one answer; validates the verdict regardless of judge type."""
    verdict = judge.rate(question, answer, baseline)
    if not 1 <= verdict.rating <= 10:
        raise JudgeError(f"rating {verdict.rating} outside 1..10")
    return verdict

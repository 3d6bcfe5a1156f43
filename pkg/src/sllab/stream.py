"""Corpus loading, chunk scheduling, reservoir replay, batch composition.

The stream is round-robin over domains: chunk k trains domain k mod n,
consuming the next unseen chunk_size records of that domain in corpus
order. A per-domain reservoir (Algorithm R) holds previously streamed
records; batches mix the current chunk with a bounded sample of
other-domain replay records.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ScheduleError

CORPUS_KEYS = {"domain", "question", "answer"}


@dataclass(frozen=True)
class QARecord:
    domain: str
    question: str
    answer: str
    id: int


@dataclass(frozen=True)
class Chunk:
    index: int
    domain: str
    records: tuple[QARecord, ...]


@dataclass(frozen=True)
class Schedule:
    """Ordered (chunk index, domain) assignments."""

    assignments: tuple[tuple[int, str], ...]

    def __len__(self) -> int:
        return len(self.assignments)

    def domain_of(self, chunk: int) -> str:
        return self.assignments[chunk][1]


def load_corpus(path: str | os.PathLike) -> list[QARecord]:
    """Read a JSONL corpus; one object per line with exactly the keys
    domain/question/answer. Ids are assigned 0..n-1 in file order."""
    records: list[QARecord] = []
    with open(path, "rb") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.decode("utf-8").strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected an object")
            missing = CORPUS_KEYS - obj.keys()
            if missing:
                raise DataError(
                    f"{path}: line {lineno}: missing key {sorted(missing)[0]!r}"
                )
            unknown = obj.keys() - CORPUS_KEYS
            if unknown:
                raise DataError(
                    f"{path}: line {lineno}: unknown key {sorted(unknown)[0]!r}"
                )
            if not all(isinstance(obj[k], str) for k in CORPUS_KEYS):
                raise DataError(f"{path}: line {lineno}: all values must be strings")
            if not obj["domain"]:
                raise DataError(f"{path}: line {lineno}: empty domain")
            if not obj["question"] or not obj["answer"]:
                raise DataError(f"{path}: line {lineno}: empty question or answer")
            records.append(
                QARecord(obj["domain"], obj["question"], obj["answer"], len(records))
            )
    if not records:
        raise DataError(f"{path}: corpus contains no records")
    return records


def save_corpus(records, path: str | os.PathLike) -> None:
    """Write records as JSONL in the load_corpus format."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {"domain": rec.domain, "question": rec.question,
                     "answer": rec.answer},
                    ensure_ascii=False,
                )
                + "\n"
            )


def make_schedule(domains: list[str], rounds: int, chunk_size: int) -> Schedule:
    """Round-robin domain order: chunk k gets domains[k mod len(domains)]."""
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    if chunk_size < 1:
        raise ConfigError(f"chunk_size must be >= 1, got {chunk_size}")
    if not domains:
        raise ConfigError("need at least one domain")
    assignments = tuple(
        (k, domains[k % len(domains)]) for k in range(rounds * len(domains))
    )
    return Schedule(assignments)


def build_chunks(corpora: dict[str, list[QARecord]], schedule: Schedule,
                 chunk_size: int) -> list[Chunk]:
    """Materialize the schedule: each chunk takes the next unseen records
    of its domain, in corpus order. A domain's last scheduled chunk may be
    short; running out any earlier fails fast."""
    cursors = {d: 0 for d in corpora}
    last_chunk_of = {}
    for k, domain in schedule.assignments:
        last_chunk_of[domain] = k
    chunks: list[Chunk] = []
    for k, domain in schedule.assignments:
        if domain not in corpora:
            raise ScheduleError(f"no corpus for scheduled domain {domain!r}")
        pool = corpora[domain]
        start = cursors[domain]
        take = pool[start : start + chunk_size]
        if len(take) < chunk_size and (k != last_chunk_of[domain] or not take):
            raise ScheduleError(
                f"domain {domain!r} exhausted at chunk {k}: "
                f"needed {chunk_size} records, had {len(take)} left"
            )
        cursors[domain] = start + len(take)
        chunks.append(Chunk(k, domain, tuple(take)))
    return chunks


def capacity_for(chunk_size: int, buffer_ratio: float) -> int:
    """Per-domain reservoir capacity, proportional to the chunk size."""
    if buffer_ratio < 0:
        raise ConfigError(f"buffer_ratio must be >= 0, got {buffer_ratio}")
    return math.ceil(buffer_ratio * chunk_size)


class ReplayBuffer:
    """Per-domain reservoir sampling (Algorithm R) over streamed records.

    Every record seen so far has inclusion probability capacity/n once a
    domain's stream is longer than the capacity. Only records already
    streamed can ever be stored, so replay never leaks future data.
    """

    def __init__(self, capacity_per_domain: int, rng: np.random.Generator):
        if capacity_per_domain < 0:
            raise ConfigError("capacity_per_domain must be >= 0")
        self.capacity_per_domain = capacity_per_domain
        self.reservoirs: dict[str, list[QARecord]] = {}
        self.seen: dict[str, int] = {}
        self.rng = rng

    def update(self, chunk: Chunk) -> None:
        """Feed one already-trained chunk through the domain's reservoir."""
        res = self.reservoirs.setdefault(chunk.domain, [])
        for rec in chunk.records:
            n = self.seen.get(chunk.domain, 0) + 1
            self.seen[chunk.domain] = n
            if len(res) < self.capacity_per_domain:
                res.append(rec)
            else:
                j = int(self.rng.integers(0, n))
                if j < self.capacity_per_domain:
                    res[j] = rec

    def size(self, domain: str) -> int:
        return len(self.reservoirs.get(domain, []))

    def snapshot(self) -> dict[str, list[QARecord]]:
        return {d: list(r) for d, r in self.reservoirs.items()}


def replay_update(buffer: ReplayBuffer, chunk: Chunk) -> None:
    buffer.update(chunk)


def compose_batch(chunk: Chunk, buffer: ReplayBuffer, replay_fraction: float,
                  rng: np.random.Generator) -> list[QARecord]:
    """Current chunk plus ceil(replay_fraction * |chunk|) replay records.

    Replay is drawn uniformly without replacement from the union of
    other-domain reservoirs, falling back to the same-domain reservoir
    when the others are empty, then to no replay at all.
    """
    if not 0.0 <= replay_fraction <= 1.0:
        raise ConfigError(
            f"replay_fraction must be in [0, 1], got {replay_fraction}"
        )
    batch = list(chunk.records)
    want = math.ceil(replay_fraction * len(chunk.records))
    if want == 0:
        return batch
    pool: list[QARecord] = []
    for domain in sorted(buffer.reservoirs):
        if domain != chunk.domain:
            pool.extend(buffer.reservoirs[domain])
    if not pool:
        pool = list(buffer.reservoirs.get(chunk.domain, []))
    if not pool:
        return batch
    take = min(want, len(pool))
    picks = rng.choice(len(pool), size=take, replace=False)
    batch.extend(pool[int(i)] for i in picks)
    return batch

"""Full streaming protocol: train on mixed batches, evaluate, log, resume.

Per scheduled chunk: compose the batch (current records + replay), run
Adam over shuffled microbatches of formatted Q&A texts (adapter
parameters only), feed the chunk into the replay reservoir, then
evaluate perplexity/drift/judge for every domain. The baseline snapshot
is captured once, right after chunk 0 trains and before it is evaluated.
Every random stream is derived from (seed, chunk, purpose), so a run
resumed from a checkpoint reproduces the remaining log rows exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

from contextlib import nullcontext

import numpy as np

try:  # BLAS threading hurts at these matrix sizes; cap it when possible
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None

from . import __version__, checkpoint
from .errors import ConfigError, DataError, TrainingDiverged
from .lora import AdaptedModel, attach, params_hash
from .metrics import (GEN_MAX_NEW, BaselineEntry, BaselineSnapshot, EvalSet,
                      MockJudge, drift_from_answers, embed, generate_answers,
                      judge_rate, perplexity)
from .model import ModelConfig, format_example, init_model, sequence_loss, tokenize
from .stream import (Chunk, QARecord, ReplayBuffer, Schedule, build_chunks,
                     capacity_for, compose_batch, load_corpus, make_schedule,
                     replay_update)
from .tensor import ContractError, Graph, add, backward, scale

# rng stream tags, combined with the experiment seed
_RNG_TRAIN = 0
_RNG_COMPOSE = 1
_RNG_BUFFER = 2
_RNG_LORA = 3

LOG_COLUMNS = ("chunk", "trained_domain", "eval_domain", "perplexity",
               "avg_loss", "similarity", "judge_rating", "time_per_step_s",
               "steps")


@dataclass(frozen=True)
class LoraSettings:
    rank: int = 4
    alpha: float = 8.0
    targets: tuple[str, ...] = ("w_q", "w_v")


@dataclass(frozen=True)
class StreamSettings:
    domains: tuple[str, ...] = ()  # paths to one JSONL corpus per domain
    rounds: int = 2
    chunk_size: int = 16
    buffer_ratio: float = 1.0
    replay_fraction: float = 0.25


@dataclass(frozen=True)
class OptimSettings:
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    steps_per_chunk: int = 100
    microbatch_size: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraSettings = field(default_factory=LoraSettings)
    stream: StreamSettings = field(default_factory=StreamSettings)
    optimizer: OptimSettings = field(default_factory=OptimSettings)
    eval_set_size: int = 16
    seed: int = 0
    output_dir: str = ""

    def validate(self) -> "ExperimentConfig":
        replace(self.model, seed=self.seed).validate()
        if not self.stream.domains:
            raise ConfigError("config needs at least one domain corpus path")
        if self.stream.rounds < 1 or self.stream.chunk_size < 1:
            raise ConfigError("rounds and chunk_size must be >= 1")
        if not 0.0 <= self.stream.replay_fraction <= 1.0:
            raise ConfigError("replay_fraction must be in [0, 1]")
        if self.stream.buffer_ratio < 0:
            raise ConfigError("buffer_ratio must be >= 0")
        if self.optimizer.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.optimizer.steps_per_chunk < 1 or self.optimizer.microbatch_size < 1:
            raise ConfigError("steps_per_chunk and microbatch_size must be >= 1")
        if self.eval_set_size < 1:
            raise ConfigError("eval_set_size must be >= 1")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        return self


@dataclass
class MetricsRow:
    chunk: int
    trained_domain: str
    eval_domain: str
    perplexity: float
    avg_loss: float
    similarity: float
    judge_rating: float
    time_per_step_s: float
    steps: int


@dataclass
class ExperimentLog:
    config: dict
    rows: list[MetricsRow]
    schedule: Schedule
    version: str
    started_at: str
    wall_seconds: float


# ---------------------------------------------------------------------------
# Config file round trip


_TOP_KEYS = {"eval_set_size": int, "seed": int, "output_dir": str}
_MODEL_KEYS = {"d_model": int, "n_layers": int, "n_heads": int,
               "context_len": int, "d_ff": int}
_LORA_KEYS = {"lora_rank": int, "lora_alpha": float}
_STREAM_KEYS = {"rounds": int, "chunk_size": int, "buffer_ratio": float,
                "replay_fraction": float}
_OPTIM_KEYS = {"learning_rate": float, "beta1": float, "beta2": float,
               "epsilon": float, "steps_per_chunk": int, "microbatch_size": int}
_TARGET_ALIASES = {"q": "w_q", "v": "w_v", "w_q": "w_q", "w_v": "w_v"}


def parse_config_file(path) -> ExperimentConfig:
    """Read the flat key = value config format; unknown keys rejected."""
    model: dict = {}
    lora: dict = {}
    stream: dict = {}
    optim: dict = {}
    top: dict = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}: line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in _MODEL_KEYS:
                model[key] = _MODEL_KEYS[key](value)
            elif key in _LORA_KEYS:
                lora[key.removeprefix("lora_")] = _LORA_KEYS[key](value)
            elif key == "lora_targets":
                names = [v.strip() for v in value.split(",") if v.strip()]
                try:
                    lora["targets"] = tuple(_TARGET_ALIASES[n] for n in names)
                except KeyError as exc:
                    raise ConfigError(
                        f"{path}: line {lineno}: unknown lora target {exc.args[0]!r}"
                    ) from exc
            elif key == "domains":
                stream["domains"] = tuple(
                    v.strip() for v in value.split(",") if v.strip()
                )
            elif key in _STREAM_KEYS:
                stream[key] = _STREAM_KEYS[key](value)
            elif key in _OPTIM_KEYS:
                optim[key] = _OPTIM_KEYS[key](value)
            elif key in _TOP_KEYS:
                top[key] = _TOP_KEYS[key](value)
            else:
                raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
    try:
        cfg = ExperimentConfig(
            model=ModelConfig(**model, seed=top.get("seed", 0)),
            lora=LoraSettings(**lora),
            stream=StreamSettings(**stream),
            optimizer=OptimSettings(**optim),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["lora"]["targets"] = list(cfg.lora.targets)
    d["stream"]["domains"] = list(cfg.stream.domains)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    return ExperimentConfig(
        model=ModelConfig(**d["model"]),
        lora=LoraSettings(rank=d["lora"]["rank"], alpha=d["lora"]["alpha"],
                          targets=tuple(d["lora"]["targets"])),
        stream=StreamSettings(domains=tuple(d["stream"]["domains"]),
                              rounds=d["stream"]["rounds"],
                              chunk_size=d["stream"]["chunk_size"],
                              buffer_ratio=d["stream"]["buffer_ratio"],
                              replay_fraction=d["stream"]["replay_fraction"]),
        optimizer=OptimSettings(**d["optimizer"]),
        eval_set_size=d["eval_set_size"],
        seed=d["seed"],
        output_dir=d["output_dir"],
    )


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    """Adam with bias correction; parameters with no gradient are skipped."""

    def __init__(self, params, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# Training


def train_on_chunk(adapted: AdaptedModel, batch: list[QARecord],
                   cfg: ExperimentConfig,
                   rng: np.random.Generator) -> tuple[float, float]:
    """steps_per_chunk Adam steps over shuffled microbatches of the batch.

    Only adapter parameters move. Returns (mean training loss across
    steps, mean wall-clock seconds per step). Aborts with diagnostics on
    a non-finite loss.
    """
    if not batch:
        raise ContractError("train_on_chunk: empty batch")
    opt_cfg = cfg.optimizer
    token_ids = [tokenize(format_example(r.question, r.answer)) for r in batch]
    opt = Adam(adapted.trainable_parameters(), lr=opt_cfg.learning_rate,
               beta1=opt_cfg.beta1, beta2=opt_cfg.beta2, eps=opt_cfg.epsilon)
    order: list[int] = []
    losses: list[float] = []
    mb = min(opt_cfg.microbatch_size, len(token_ids))
    started = time.perf_counter()
    for step in range(opt_cfg.steps_per_chunk):
        picks = []
        while len(picks) < mb:
            if not order:
                order = list(rng.permutation(len(token_ids)))
            picks.append(order.pop())
        opt.zero_grad()
        with Graph() as graph:
            total = None
            count = 0
            overrides = adapted.overrides()
            for i in picks:
                part, n = sequence_loss(adapted.base, token_ids[i], overrides)
                total = part if total is None else add(total, part)
                count += n
            loss = scale(total, 1.0 / count)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(step, losses)
        backward(graph, loss)
        opt.step()
        losses.append(value)
    elapsed = time.perf_counter() - started
    return float(np.mean(losses)), elapsed / opt_cfg.steps_per_chunk


# ---------------------------------------------------------------------------
# Evaluation plumbing


def make_eval_sets(corpora: dict[str, list[QARecord]],
                   eval_set_size: int) -> dict[str, EvalSet]:
    """Hold out the last eval_set_size records of each domain corpus."""
    sets = {}
    for domain, records in corpora.items():
        if len(records) <= eval_set_size:
            raise DataError(
                f"domain {domain!r} has {len(records)} records; needs more than "
                f"eval_set_size={eval_set_size}"
            )
        sets[domain] = EvalSet(domain, tuple(records[-eval_set_size:]))
    return sets


def train_slices(corpora: dict[str, list[QARecord]],
                 eval_set_size: int) -> dict[str, list[QARecord]]:
    return {d: recs[:-eval_set_size] for d, recs in corpora.items()}


def capture_baseline(adapted: AdaptedModel, eval_sets: dict[str, EvalSet],
                     max_new: int = GEN_MAX_NEW) -> BaselineSnapshot:
    """Freeze greedy answers + embeddings for every eval prompt."""
    entries: dict[tuple[str, int], BaselineEntry] = {}
    for domain, eval_set in eval_sets.items():
        for rec, answer in zip(eval_set.prompts,
                               generate_answers(adapted, eval_set, max_new)):
            emb = embed(answer, adapted) if answer else None
            entries[(domain, rec.id)] = BaselineEntry(answer, emb)
    return BaselineSnapshot(entries)


def _evaluate_all(adapted: AdaptedModel, eval_sets: dict[str, EvalSet],
                  snapshot: BaselineSnapshot, judge, chunk: Chunk,
                  train_loss_time: tuple[float, float],
                  steps: int) -> list[MetricsRow]:
    _, per_step = train_loss_time
    before = params_hash([t for _, t in adapted.base.parameters()]
                         + adapted.trainable_parameters())
    rows = []
    for domain, eval_set in eval_sets.items():
        ppl, avg_loss = perplexity(adapted, eval_set)
        answers = generate_answers(adapted, eval_set)
        sim = drift_from_answers(answers, snapshot, eval_set, adapted)
        ratings = []
        for rec, answer in zip(eval_set.prompts, answers):
            entry = snapshot.entry(domain, rec.id)
            verdict = judge_rate(judge, rec.question, answer, entry.answer)
            ratings.append(verdict.rating)
        rows.append(MetricsRow(
            chunk=chunk.index,
            trained_domain=chunk.domain,
            eval_domain=domain,
            perplexity=ppl,
            avg_loss=avg_loss,
            similarity=sim,
            judge_rating=float(np.mean(ratings)),
            time_per_step_s=per_step,
            steps=steps,
        ))
    after = params_hash([t for _, t in adapted.base.parameters()]
                        + adapted.trainable_parameters())
    if before != after:
        raise RuntimeError("evaluation mutated model parameters")
    return rows


# ---------------------------------------------------------------------------
# Log files


def write_log(rows: list[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for r in rows:
            writer.writerow([
                r.chunk, r.trained_domain, r.eval_domain,
                repr(r.perplexity), repr(r.avg_loss), repr(r.similarity),
                repr(r.judge_rating), repr(r.time_per_step_s), r.steps,
            ])


def read_log(path) -> list[MetricsRow]:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read log {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty log") from None
        if tuple(header) != LOG_COLUMNS:
            raise DataError(f"{path}: unexpected log columns {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(LOG_COLUMNS):
                raise DataError(f"{path}: line {lineno}: wrong field count")
            try:
                rows.append(MetricsRow(
                    chunk=int(rec[0]), trained_domain=rec[1], eval_domain=rec[2],
                    perplexity=float(rec[3]), avg_loss=float(rec[4]),
                    similarity=float(rec[5]), judge_rating=float(rec[6]),
                    time_per_step_s=float(rec[7]), steps=int(rec[8]),
                ))
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return rows


def write_series(rows: list[MetricsRow], domains: list[str], out_dir) -> None:
    """One CSV per metric: a chunk column plus one column per domain."""
    by_metric = {"perplexity": lambda r: r.perplexity,
                 "similarity": lambda r: r.similarity,
                 "rating": lambda r: r.judge_rating}
    chunks = sorted({r.chunk for r in rows})
    cell = {(r.chunk, r.eval_domain): r for r in rows}
    for metric, get in by_metric.items():
        path = os.path.join(out_dir, f"series_{metric}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chunk", *domains])
            for c in chunks:
                writer.writerow([c, *(repr(get(cell[(c, d)])) for d in domains)])


# ---------------------------------------------------------------------------
# The run loop


def _load_corpora(cfg: ExperimentConfig) -> tuple[list[str], dict[str, list[QARecord]]]:
    labels: list[str] = []
    corpora: dict[str, list[QARecord]] = {}
    for path in cfg.stream.domains:
        records = load_corpus(path)
        label = records[0].domain
        if any(r.domain != label for r in records):
            raise DataError(f"{path}: mixed domains in one corpus file")
        if label in corpora:
            raise DataError(f"duplicate domain label {label!r} across corpora")
        labels.append(label)
        corpora[label] = records
    return labels, corpora


class _RunContext:
    def __init__(self, cfg: ExperimentConfig, judge):
        cfg.validate()
        self.cfg = cfg
        self.judge = judge if judge is not None else MockJudge()
        self.labels, corpora = _load_corpora(cfg)
        self.eval_sets = {d: s for d, s in
                          make_eval_sets(corpora, cfg.eval_set_size).items()}
        schedule = make_schedule(self.labels, cfg.stream.rounds,
                                 cfg.stream.chunk_size)
        self.schedule = schedule
        self.chunks = build_chunks(train_slices(corpora, cfg.eval_set_size),
                                   schedule, cfg.stream.chunk_size)
        self.out = cfg.output_dir

    def paths(self, name: str) -> str:
        return os.path.join(self.out, name)


def _single_threaded_blas():
    return threadpool_limits(1) if threadpool_limits is not None else nullcontext()


def _run_chunks(ctx: _RunContext, adapted: AdaptedModel, buffer: ReplayBuffer,
                snapshot: BaselineSnapshot | None, rows: list[MetricsRow],
                start_chunk: int, stop_after: int | None) -> tuple:
    cfg = ctx.cfg
    for chunk in ctx.chunks[start_chunk:]:
        if stop_after is not None and chunk.index >= stop_after:
            break
        compose_rng = np.random.default_rng([cfg.seed, chunk.index, _RNG_COMPOSE])
        train_rng = np.random.default_rng([cfg.seed, chunk.index, _RNG_TRAIN])
        batch = compose_batch(chunk, buffer, cfg.stream.replay_fraction,
                              compose_rng)
        with _single_threaded_blas():
            train_loss, per_step = train_on_chunk(adapted, batch, cfg, train_rng)
            replay_update(buffer, chunk)
            if snapshot is None:
                snapshot = capture_baseline(adapted, ctx.eval_sets)
                checkpoint.save_snapshot(snapshot, ctx.paths("baseline.bin"))
            rows.extend(_evaluate_all(adapted, ctx.eval_sets, snapshot,
                                      ctx.judge, chunk, (train_loss, per_step),
                                      cfg.optimizer.steps_per_chunk))
        write_log(rows, ctx.paths("log.csv"))
        checkpoint.save_run_state(ctx.paths("ckpt_last.bin"), adapted, buffer,
                                  snapshot, chunk.index + 1)
    return adapted, buffer, snapshot


def run_stream(cfg: ExperimentConfig, stop_after: int | None = None,
               judge=None) -> ExperimentLog:
    """Execute the protocol; returns the in-memory log.

    ``stop_after=k`` processes chunks [0, k) and leaves a resumable
    checkpoint, which is also how the split-run equivalence tests drive
    interruption. On any error the partial log is already on disk.
    """
    started = time.time()
    t0 = time.perf_counter()
    ctx = _RunContext(cfg, judge)
    os.makedirs(ctx.out, exist_ok=True)
    with open(ctx.paths("config.echo.json"), "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    model = init_model(replace(cfg.model, seed=cfg.seed))
    adapted = attach(model, cfg.lora.rank, cfg.lora.alpha, cfg.lora.targets,
                     seed=[cfg.seed, _RNG_LORA])
    buffer = ReplayBuffer(
        capacity_for(cfg.stream.chunk_size, cfg.stream.buffer_ratio),
        np.random.default_rng([cfg.seed, _RNG_BUFFER]))
    rows: list[MetricsRow] = []
    adapted, buffer, snapshot = _run_chunks(ctx, adapted, buffer, None, rows,
                                            0, stop_after)
    if stop_after is None or stop_after >= len(ctx.chunks):
        checkpoint.save_run_state(ctx.paths("ckpt_final.bin"), adapted, buffer,
                                  snapshot, len(ctx.chunks))
        write_series(rows, ctx.labels, ctx.out)
    return ExperimentLog(
        config=config_to_dict(cfg), rows=rows, schedule=ctx.schedule,
        version=__version__,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        wall_seconds=time.perf_counter() - t0,
    )


def resume_run(output_dir, judge=None) -> ExperimentLog:
    """Continue an interrupted run from its latest checkpoint."""
    started = time.time()
    t0 = time.perf_counter()
    echo = os.path.join(output_dir, "config.echo.json")
    try:
        with open(echo, encoding="utf-8") as fh:
            cfg = config_from_dict(json.load(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read {echo}: {exc}") from exc
    cfg = replace(cfg, output_dir=os.fspath(output_dir))
    ctx = _RunContext(cfg, judge)
    adapted, buffer, snapshot, next_chunk = checkpoint.load_run_state(
        ctx.paths("ckpt_last.bin"))
    rows = [r for r in read_log(ctx.paths("log.csv")) if r.chunk < next_chunk]
    adapted, buffer, snapshot = _run_chunks(ctx, adapted, buffer, snapshot,
                                            rows, next_chunk, None)
    checkpoint.save_run_state(ctx.paths("ckpt_final.bin"), adapted, buffer,
                              snapshot, len(ctx.chunks))
    write_series(rows, ctx.labels, ctx.out)
    return ExperimentLog(
        config=config_to_dict(cfg), rows=rows, schedule=ctx.schedule,
        version=__version__,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        wall_seconds=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Analysis


def forgetting_delta(rows: list[MetricsRow], domain: str) -> float:
    """Log-perplexity rise on a domain between first training and revisit.

    avg_loss just before the domain's second training chunk minus
    avg_loss right after its first; positive means forgetting.
    """
    trained = sorted({r.chunk for r in rows if r.trained_domain == domain})
    if len(trained) < 2:
        raise ContractError(
            f"forgetting_delta: domain {domain!r} trained in {len(trained)} "
            "chunks; needs at least 2"
        )
    first, second = trained[0], trained[1]
    after_first = _cell(rows, first, domain).avg_loss
    before_revisit = _cell(rows, second - 1, domain).avg_loss
    return before_revisit - after_first


def similarity_at(rows: list[MetricsRow], chunk: int, domain: str) -> float:
    return _cell(rows, chunk, domain).similarity


def revisit_chunk(rows: list[MetricsRow], domain: str) -> int:
    trained = sorted({r.chunk for r in rows if r.trained_domain == domain})
    if len(trained) < 2:
        raise ContractError(f"domain {domain!r} has no revisit chunk")
    return trained[1]


def _cell(rows: list[MetricsRow], chunk: int, domain: str) -> MetricsRow:
    for r in rows:
        if r.chunk == chunk and r.eval_domain == domain:
            return r
    raise ContractError(f"no log row for chunk {chunk}, domain {domain!r}")

import json
import math

import numpy as np
import pytest

from sllab import stream as S
from sllab.datagen import generate_domain
from sllab.errors import ConfigError, DataError, ScheduleError


def write_lines(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def rec(domain, i, q=None, a=None):
    return S.QARecord(domain, q or f"q{i}", a or f"a{i}", i)


def make_chunk(domain, ids, index=0):
    return S.Chunk(index, domain, tuple(rec(domain, i) for i in ids))


class TestLoadCorpus:
    def test_three_valid_lines(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, [
            json.dumps({"domain": "d", "question": f"q{i}", "answer": f"a{i}"})
            for i in range(3)
        ])
        records = S.load_corpus(p)
        assert [r.id for r in records] == [0, 1, 2]
        assert records[1].question == "q1"

    def test_missing_answer_names_line(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, [
            json.dumps({"domain": "d", "question": "q", "answer": "a"}),
            json.dumps({"domain": "d", "question": "q"}),
        ])
        with pytest.raises(DataError, match="line 2.*answer"):
            S.load_corpus(p)

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, [json.dumps(
            {"domain": "d", "question": "q", "answer": "a", "extra": 1})])
        with pytest.raises(DataError, match="unknown key 'extra'"):
            S.load_corpus(p)

    def test_invalid_json_names_line(self, tmp_path):
        p = tmp_path / "c.jsonl"
        write_lines(p, ["{not json"])
        with pytest.raises(DataError, match="line 1"):
            S.load_corpus(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text("", encoding="utf-8")
        with pytest.raises(DataError, match="no records"):
            S.load_corpus(p)

    @pytest.mark.parametrize("obj", [
        {"domain": "", "question": "q", "answer": "a"},
        {"domain": "d", "question": "", "answer": "a"},
        {"domain": "d", "question": "q", "answer": ""},
        {"domain": "d", "question": 7, "answer": "a"},
    ])
    def test_field_validation(self, tmp_path, obj):
        p = tmp_path / "c.jsonl"
        write_lines(p, [json.dumps(obj)])
        with pytest.raises(DataError):
            S.load_corpus(p)

    def test_save_load_round_trip(self, tmp_path):
        records = generate_domain("medical", 200, seed=3)
        p = tmp_path / "med.jsonl"
        S.save_corpus(records, p)
        assert S.load_corpus(p) == records


class TestSchedule:
    def test_round_robin_order(self):
        sched = S.make_schedule(["Med", "Gen", "Law"], rounds=2, chunk_size=16)
        assert [d for _, d in sched.assignments] == [
            "Med", "Gen", "Law", "Med", "Gen", "Law"]
        assert [k for k, _ in sched.assignments] == list(range(6))

    def test_single_domain_single_chunk(self):
        sched = S.make_schedule(["only"], rounds=1, chunk_size=4)
        assert sched.assignments == ((0, "only"),)

    @pytest.mark.parametrize("kwargs", [
        {"rounds": 0, "chunk_size": 1},
        {"rounds": 1, "chunk_size": 0},
    ])
    def test_validation(self, kwargs):
        with pytest.raises(ConfigError):
            S.make_schedule(["d"], **kwargs)

    def test_build_chunks_partitions_corpus(self):
        corpora = {d: [rec(d, i) for i in range(40)] for d in ("A", "B")}
        sched = S.make_schedule(["A", "B"], rounds=3, chunk_size=10)
        chunks = S.build_chunks(corpora, sched, chunk_size=10)
        for domain in ("A", "B"):
            seen = [r.id for c in chunks if c.domain == domain for r in c.records]
            assert seen == list(range(30))  # disjoint, exhaustive, in order
        assert all(len(c.records) == 10 for c in chunks)

    def test_build_chunks_exhausted_fails_fast(self):
        corpora = {"A": [rec("A", i) for i in range(15)]}
        sched = S.make_schedule(["A"], rounds=3, chunk_size=10)
        with pytest.raises(ScheduleError, match="exhausted at chunk 1"):
            S.build_chunks(corpora, sched, chunk_size=10)

    def test_build_chunks_short_final_allowed(self):
        corpora = {"A": [rec("A", i) for i in range(15)]}
        sched = S.make_schedule(["A"], rounds=2, chunk_size=10)
        chunks = S.build_chunks(corpora, sched, chunk_size=10)
        assert [len(c.records) for c in chunks] == [10, 5]

    def test_build_chunks_missing_domain(self):
        sched = S.make_schedule(["A", "B"], rounds=1, chunk_size=2)
        with pytest.raises(ScheduleError, match="no corpus"):
            S.build_chunks({"A": [rec("A", 0), rec("A", 1)]}, sched, 2)


class TestCapacity:
    @pytest.mark.parametrize("chunk_size,ratio,expected", [
        (16, 1.0, 16), (16, 0.25, 4), (17, 0.5, 9), (16, 0.0, 0), (5, 0.3, 2),
    ])
    def test_ceil_proportionality(self, chunk_size, ratio, expected):
        assert S.capacity_for(chunk_size, ratio) == expected

    def test_negative_ratio(self):
        with pytest.raises(ConfigError):
            S.capacity_for(16, -0.1)


class TestReplayBuffer:
    def test_under_capacity_stores_everything(self, rng):
        buf = S.ReplayBuffer(capacity_per_domain=16, rng=rng)
        chunk = make_chunk("d", range(10))
        buf.update(chunk)
        assert buf.reservoirs["d"] == list(chunk.records)

    def test_never_exceeds_capacity(self, rng):
        buf = S.ReplayBuffer(capacity_per_domain=8, rng=rng)
        for start in range(0, 80, 16):
            buf.update(make_chunk("d", range(start, start + 16)))
            assert buf.size("d") <= 8

    def test_only_streamed_records_stored(self, rng):
        buf = S.ReplayBuffer(capacity_per_domain=8, rng=rng)
        streamed = set()
        for start in range(0, 64, 16):
            chunk = make_chunk("d", range(start, start + 16))
            buf.update(chunk)
            streamed |= {r.id for r in chunk.records}
            assert {r.id for r in buf.reservoirs["d"]} <= streamed

    def test_inclusion_frequency_sanity(self):
        # Light version of the acceptance uniformity check: 2000 seeded
        # trials, 5 sigma band around p = 8/80.
        trials, cap, n = 2000, 8, 80
        counts = np.zeros(n)
        rng = np.random.default_rng(99)
        for _ in range(trials):
            buf = S.ReplayBuffer(capacity_per_domain=cap, rng=rng)
            for start in range(0, n, 16):
                buf.update(make_chunk("d", range(start, start + 16)))
            for r in buf.reservoirs["d"]:
                counts[r.id] += 1
        p = cap / n
        sigma = math.sqrt(p * (1 - p) / trials)
        assert np.max(np.abs(counts / trials - p)) < 5 * sigma


class TestComposeBatch:
    def setup_method(self):
        self.rng = np.random.default_rng(7)
        self.buf = S.ReplayBuffer(capacity_per_domain=16, rng=self.rng)
        self.buf.update(make_chunk("other", range(100, 116)))
        self.buf.update(make_chunk("third", range(200, 208)))

    def test_zero_fraction_returns_chunk(self):
        chunk = make_chunk("cur", range(16))
        out = S.compose_batch(chunk, self.buf, 0.0, self.rng)
        assert out == list(chunk.records)

    def test_empty_buffer_returns_chunk(self, rng):
        empty = S.ReplayBuffer(capacity_per_domain=4, rng=rng)
        chunk = make_chunk("cur", range(16))
        assert S.compose_batch(chunk, empty, 0.5, rng) == list(chunk.records)

    def test_quarter_fraction_counts(self):
        chunk = make_chunk("cur", range(16))
        out = S.compose_batch(chunk, self.buf, 0.25, self.rng)
        assert out[:16] == list(chunk.records)
        replay = out[16:]
        assert len(replay) == 4
        assert len({r.id for r in replay}) == 4  # no duplicate picks
        assert all(r.domain in ("other", "third") for r in replay)

    def test_same_domain_fallback(self, rng):
        buf = S.ReplayBuffer(capacity_per_domain=16, rng=rng)
        buf.update(make_chunk("cur", range(50, 58)))
        chunk = make_chunk("cur", range(16))
        out = S.compose_batch(chunk, buf, 0.25, rng)
        assert len(out) == 20
        assert all(r.domain == "cur" for r in out)

    def test_pool_smaller_than_request(self, rng):
        buf = S.ReplayBuffer(capacity_per_domain=16, rng=rng)
        buf.update(make_chunk("other", range(100, 102)))
        chunk = make_chunk("cur", range(16))
        out = S.compose_batch(chunk, buf, 0.5, rng)  # wants 8, pool has 2
        assert len(out) == 18

    def test_fraction_validation(self):
        chunk = make_chunk("cur", range(4))
        with pytest.raises(ConfigError):
            S.compose_batch(chunk, self.buf, 1.5, self.rng)

    def test_deterministic_under_seed(self):
        chunk = make_chunk("cur", range(16))
        a = S.compose_batch(chunk, self.buf, 0.25, np.random.default_rng(3))
        b = S.compose_batch(chunk, self.buf, 0.25, np.random.default_rng(3))
        assert a == b


class TestNoFutureLeakage:
    def test_replay_only_from_past(self, rng):
        # Stream chunks in schedule order; before each training step the
        # composed batch may only contain records already streamed.
        corpora = {d: [rec(d, i + ord(d)) for i in range(20)] for d in ("A", "B")}
        sched = S.make_schedule(["A", "B"], rounds=2, chunk_size=5)
        chunks = S.build_chunks(corpora, sched, 5)
        buf = S.ReplayBuffer(capacity_per_domain=5, rng=rng)
        streamed: set[tuple[str, int]] = set()
        for chunk in chunks:
            batch = S.compose_batch(chunk, buf, 0.5, rng)
            for r in batch[len(chunk.records):]:
                assert (r.domain, r.id) in streamed
            buf.update(chunk)
            streamed |= {(r.domain, r.id) for r in chunk.records}

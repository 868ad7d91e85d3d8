import numpy as np
import pytest
from embhist.errors import ConfigError, DataError, FormatError
from embhist.quantization import Codec, quantize
from embhist.seqstore import (
    EmbeddingRecord, SequenceStore, centroid_drift,
)

DIM = 4
CODEC = Codec("int4_uniform")


def rec(key, ts, values, soft=None):
    return EmbeddingRecord(key, ts, quantize(CODEC, np.asarray(values, float)), soft)


def fresh_store(records=()):
    store = SequenceStore(DIM, CODEC)
    for r in records:
        store.append(r)
    return store


def brute_force_sequence(records, key, t_cur, seq_len, window):
    """Oracle: filter + sort the raw record list."""
    eligible = [
        (r.timestamp, i)
        for i, r in enumerate(records)
        if r.key == key and t_cur - window <= r.timestamp < t_cur
    ]
    eligible.sort()  # ascending (timestamp, insertion counter)
    chosen = eligible[-seq_len:][::-1]
    return [i for _, i in chosen]


class TestAppend:
    def test_count_increases(self):
        store = fresh_store()
        store.append(rec(1, 0, [0.1] * DIM))
        assert len(store) == 1
        store.append(rec(1, 1, [0.2] * DIM))
        assert len(store) == 2

    def test_same_timestamp_both_kept(self):
        store = fresh_store([rec(3, 5, [0.1] * DIM), rec(3, 5, [0.9] * DIM)])
        assert len(store) == 2
        seq = store.build_sequence(3, 6, seq_len=5, window=10)
        assert seq.length == 2
        # later-inserted-first on ties
        assert seq.entries[0, 0] == pytest.approx(0.875)
        assert seq.entries[1, 0] == pytest.approx(0.125)

    def test_dim_mismatch(self):
        store = fresh_store()
        bad = EmbeddingRecord(1, 0, quantize(CODEC, np.zeros(DIM + 1)))
        with pytest.raises(FormatError):
            store.append(bad)

    def test_frozen_store_rejects_appends(self):
        store = fresh_store([rec(1, 0, [0.0] * DIM)])
        store.freeze()
        with pytest.raises(ConfigError):
            store.append(rec(1, 1, [0.0] * DIM))


class TestBuildSequence:
    def test_record_at_t_cur_excluded(self):
        store = fresh_store([rec(1, 10, [0.5] * DIM)])
        assert store.build_sequence(1, 10, 5, 100).length == 0
        assert store.build_sequence(1, 11, 5, 100).length == 1

    def test_cold_start_empty(self):
        store = fresh_store()
        seq = store.build_sequence(42, 10, 5, 100)
        assert seq.length == 0
        assert not seq.mask.any()
        assert np.all(seq.entries == 0.0)

    def test_truncates_to_most_recent(self):
        records = [rec(1, t, [t / 10.0] * DIM) for t in range(7)]
        store = fresh_store(records)
        seq = store.build_sequence(1, 100, 5, 1000)
        assert seq.length == 5
        assert list(seq.timestamps[:5]) == [6, 5, 4, 3, 2]

    def test_retention_window(self):
        records = [rec(1, t, [0.1] * DIM) for t in range(10)]
        store = fresh_store(records)
        seq = store.build_sequence(1, 10, 20, window=3)
        assert list(seq.timestamps[: seq.length]) == [9, 8, 7]

    def test_validation(self):
        store = fresh_store()
        with pytest.raises(ConfigError):
            store.build_sequence(1, 10, 0, 10)
        with pytest.raises(ConfigError):
            store.build_sequence(1, 10, 5, 0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        records = []
        for _ in range(400):
            records.append(
                rec(int(rng.integers(0, 12)), int(rng.integers(0, 50)),
                    rng.uniform(-1, 1, DIM))
            )
        store = fresh_store(records)
        for _ in range(2000):
            key = int(rng.integers(0, 14))
            t_cur = int(rng.integers(0, 55))
            seq_len = int(rng.integers(1, 9))
            window = int(rng.integers(1, 60))
            want = brute_force_sequence(records, key, t_cur, seq_len, window)
            got = store.build_sequence(key, t_cur, seq_len, window)
            assert got.length == len(want)
            for i, ridx in enumerate(want):
                assert np.array_equal(got.entries[i], stored_values(records[ridx]))
                assert got.timestamps[i] == records[ridx].timestamp


def stored_values(record):
    from embhist.quantization import dequantize

    return dequantize(CODEC, record.payload)


class TestPersistence:
    def test_empty_round_trip(self, tmp_path):
        store = fresh_store()
        path = tmp_path / "empty.lfsq"
        store.persist(path)
        loaded = SequenceStore.load(path)
        assert len(loaded) == 0
        assert loaded.dim == DIM

    def test_round_trip_preserves_queries(self, tmp_path):
        rng = np.random.default_rng(4)
        records = [
            rec(int(rng.integers(0, 6)), int(rng.integers(0, 30)),
                rng.uniform(-1, 1, DIM), soft=float(rng.uniform()))
            for _ in range(200)
        ]
        store = fresh_store(records)
        path = tmp_path / "store.lfsq"
        store.persist(path)
        loaded = SequenceStore.load(path)
        assert len(loaded) == len(store)
        for key in range(6):
            for t_cur in (0, 7, 29, 31):
                a = store.build_sequence(key, t_cur, 6, 12)
                b = loaded.build_sequence(key, t_cur, 6, 12)
                assert a.length == b.length
                assert np.array_equal(a.entries, b.entries)
                assert np.array_equal(a.timestamps, b.timestamps)

    def test_persist_load_persist_byte_identical(self, tmp_path):
        rng = np.random.default_rng(5)
        records = [
            rec(int(rng.integers(0, 4)), int(rng.integers(0, 9)),
                rng.uniform(-1, 1, DIM))
            for _ in range(60)
        ]
        store = fresh_store(records)
        p1, p2 = tmp_path / "a.lfsq", tmp_path / "b.lfsq"
        store.persist(p1)
        SequenceStore.load(p1).persist(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lfsq"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="magic"):
            SequenceStore.load(path)

    def test_truncation_reports_offset(self, tmp_path):
        store = fresh_store([rec(1, 0, [0.1] * DIM)])
        path = tmp_path / "trunc.lfsq"
        store.persist(path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="truncated|offset"):
            SequenceStore.load(path)

    def test_corrupt_payload_names_record(self, tmp_path):
        records = [rec(1, t, [0.3] * DIM) for t in range(5)]
        store = fresh_store(records)
        path = tmp_path / "corrupt.lfsq"
        store.persist(path)
        blob = bytearray(path.read_bytes())
        # header: 4 magic + 10 fixed + 8 count; record: 8+8+1+payload+4crc
        payload_len = CODEC.payload_size(DIM)
        rec_size = 8 + 8 + 1 + payload_len + 4
        header = 22
        target = header + 2 * rec_size + 17 + 1  # payload byte of record 2
        blob[target] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="record 2"):
            SequenceStore.load(path)

    def test_quantized_payloads_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        records = [rec(0, t, rng.uniform(-1, 1, DIM)) for t in range(50)]
        store = fresh_store(records)
        path = tmp_path / "payload.lfsq"
        store.persist(path)
        loaded = SequenceStore.load(path)
        for a, b in zip(store.records, loaded.records):
            assert a.payload.payload == b.payload.payload


class TestCentroidDrift:
    def test_identical_stores_zero(self):
        records = [rec(1, t, [0.2, -0.4, 0.6, 0.0]) for t in range(5)]
        assert centroid_drift(fresh_store(records), fresh_store(records)) == 0.0

    def test_constant_shift(self):
        base = [np.full(DIM, 0.1), np.full(DIM, 0.3)]
        shift = 0.25  # exactly two int4 steps
        a = fresh_store([rec(1, t, v) for t, v in enumerate(base)])
        b = fresh_store([rec(1, t, v + shift) for t, v in enumerate(base)])
        assert centroid_drift(a, b) == pytest.approx(np.sqrt(DIM) * shift, abs=1e-12)

    def test_empty_store_rejected(self):
        with pytest.raises(DataError):
            fresh_store().centroid()

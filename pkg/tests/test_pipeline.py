import logging
import tracemalloc

import numpy as np
import pytest

from embhist.errors import ConfigError, DataError
from embhist.models import FMConfig, FeatureSchema, VMConfig
from embhist.pipeline import (
    ExperimentConfig, FM_TRAIN_CHUNKS, TEST_CHUNK, VM_TRAIN_CHUNKS,
    eval_vm, ingest_event_log, load_event_log, run_ablation,
    run_streaming_experiment, theory_battery, train_vm, write_tsv,
)
from embhist.synthworld import EventLog, EventSample, WorldSpec, generate

SMALL_WORLD = WorldSpec(
    n_users=48, events_per_user=32,
    vm_cardinalities=(3, 2), vm_weights=(0.7, -0.55),
    extra_cardinalities=(2, 2), extra_weights=(1.0, -0.8),
    base_logit=-1.4, temporal_window=8, temporal_cap=4, beta_temporal=0.35,
)


def small_cfg(**kw):
    defaults = dict(
        world=SMALL_WORLD,
        fm=FMConfig(epochs=2, hidden=(16, 8, 4), embed_dim=4, history_len=4),
        vm=VMConfig(),
        seq_len=10,
        seeds=(0,),
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestConfigValidation:
    def test_unknown_arm(self):
        with pytest.raises(ConfigError):
            small_cfg(arms=("baseline", "mystery"))

    def test_active_dim_must_be_trained(self):
        with pytest.raises(ConfigError):
            small_cfg(active_dim=12)

    def test_empty_seeds(self):
        with pytest.raises(ConfigError):
            small_cfg(seeds=())

    def test_bad_codec(self):
        with pytest.raises(ConfigError):
            small_cfg(codec_kind="int2")

    def test_protocol_chunks_disjoint(self):
        assert not set(FM_TRAIN_CHUNKS) & set(VM_TRAIN_CHUNKS)
        assert TEST_CHUNK not in FM_TRAIN_CHUNKS + VM_TRAIN_CHUNKS


@pytest.fixture(scope="module")
def report():
    return run_streaming_experiment(small_cfg())


class TestStreamingExperiment:

    def test_all_arms_present(self, report):
        res = report.results[0]
        assert set(res.arm_results) == {"baseline", "kd", "emb_hist", "kd_emb_hist"}

    def test_deterministic_rerun_bit_identical(self, report):
        again = run_streaming_experiment(small_cfg())
        assert again.to_text() == report.to_text()
        assert again.config_hash == report.config_hash

    def test_seed_changes_results(self, report):
        other = run_streaming_experiment(small_cfg(seeds=(1,)))
        assert other.to_text() != report.to_text()

    def test_baseline_arm_is_plain_student(self, report):
        # arm degeneration: the baseline arm IS a branch-less, lambda=0 student
        cfg = small_cfg()
        log = generate(cfg.world, 0)
        schema = FeatureSchema.from_world(cfg.world)
        vm = train_vm(log, schema, cfg, "baseline", None, None, 0)
        direct = eval_vm(vm, log, schema, cfg, "baseline", None, None)
        assert direct == report.results[0].arm_results["baseline"]

    def test_no_test_label_leakage(self):
        # flipping chunk-7 labels must not change any student's predictions
        cfg = small_cfg(arms=("baseline", "kd"))
        log = generate(cfg.world, 0)
        schema = FeatureSchema.from_world(cfg.world)

        def flipped(log):
            samples = tuple(
                replace_sample(s, label=1 - s.label) if s.chunk == TEST_CHUNK else s
                for s in log.samples
            )
            return EventLog(spec=log.spec, samples=samples)

        from embhist.pipeline import log_teacher, train_fm

        fm = train_fm(log, schema, cfg.fm, 0)
        teacher = log_teacher(fm, log, cfg.layer, (4, 5, 6, 7))
        vm_a = train_vm(log, schema, cfg, "kd", None, teacher, 0)
        vm_b = train_vm(flipped(log), schema, cfg, "kd", None, teacher, 0)
        for name in vm_a.params.names():
            assert np.array_equal(vm_a.params[name], vm_b.params[name])

    def test_drift_reported_per_chunk_pair(self, report):
        assert len(report.results[0].drift_per_chunk_pair) == 3
        assert all(d >= 0 for d in report.results[0].drift_per_chunk_pair)

    def test_teacher_beats_coin_flip_on_held_out_chunk(self, report):
        assert report.results[0].fm_result.auc > 0.5

    def test_sequence_arm_requires_store(self):
        cfg = small_cfg()
        log = generate(cfg.world, 0)
        schema = FeatureSchema.from_world(cfg.world)
        with pytest.raises(ConfigError):
            train_vm(log, schema, cfg, "emb_hist", None, None, 0)

    def test_ae_training_leaves_teacher_parameters_bit_identical(self):
        from embhist.compression import AEConfig, ae_train
        from embhist.pipeline import log_teacher, train_fm

        cfg = small_cfg()
        log = generate(cfg.world, 0)
        schema = FeatureSchema.from_world(cfg.world)
        fm = train_fm(log, schema, cfg.fm, 0)
        snapshot = {k: v.copy() for k, v in fm.params.items()}
        teacher = log_teacher(fm, log, "hidden_0", (4,))
        ae_train(teacher.emb, AEConfig(dims=(4, 8), epochs=5), seed=0)
        for name, value in fm.params.items():
            assert np.array_equal(value, snapshot[name])

    def test_arms_share_embedding_init(self):
        # where architectures coincide, the same seed gives identical params,
        # so arm deltas isolate the transfer channel
        cfg = small_cfg()
        schema = FeatureSchema.from_world(cfg.world)
        from embhist.models import VMModel

        plain = VMModel(schema, cfg.vm, seed=3)
        from dataclasses import replace as dc_replace

        seqvm = VMModel(schema, dc_replace(cfg.vm, seq_dim=cfg.active_dim), seed=3)
        for f in schema.vm_features:
            assert np.array_equal(plain.params[f"emb.{f.name}"],
                                  seqvm.params[f"emb.{f.name}"])

    def test_embedding_dims_preserve_label_correlation_structure(self):
        # per-dimension correlations of the compressed code with the
        # teacher's soft label and with ground truth agree in ranking
        from embhist.compression import dimension_correlation_probe
        from embhist.pipeline import log_teacher, train_fm
        from embhist.compression import AEConfig, ae_train

        cfg = small_cfg()
        log = generate(cfg.world, 0)
        schema = FeatureSchema.from_world(cfg.world)
        fm = train_fm(log, schema, cfg.fm, 0)
        teacher = log_teacher(fm, log, "hidden_0", (4, 5, 6, 7))
        ae, _ = ae_train(teacher.emb[teacher.rows_in_chunk(4)],
                         AEConfig(dims=(4, 8), epochs=40), seed=0)
        z = ae.encode_batch(teacher.emb)
        _, _, rho = dimension_correlation_probe(z, teacher.soft, teacher.labels)
        assert rho > 0.0


def replace_sample(s: EventSample, **kw) -> EventSample:
    fields = dict(key=s.key, timestamp=s.timestamp, chunk=s.chunk,
                  vm_values=s.vm_values, extra_values=s.extra_values,
                  label=s.label, true_p=s.true_p)
    fields.update(kw)
    return EventSample(**fields)


class TestAblations:
    def test_unknown_axis(self):
        with pytest.raises(ConfigError):
            run_ablation(small_cfg(), "width")

    def test_layer_axis_runs_selected(self):
        rows = run_ablation(small_cfg(arms=("kd_emb_hist",)), "layer",
                            values=("hidden_1", "softlabel_only"))
        assert [r["setting"] for r in rows] == ["hidden_1", "softlabel_only"]
        assert all(0.0 < r["auc_kd_emb_hist"] < 1.0 for r in rows)

    def test_codec_axis_mse_ordering(self):
        rows = run_ablation(small_cfg(arms=("kd_emb_hist",)), "codec")
        mse = {r["setting"]: r["codec_mse"] for r in rows}
        assert mse["int8_uniform"] < mse["int4_kmeans"] <= mse["int4_uniform"]
        assert mse["fp32"] < mse["int8_uniform"]

    def test_checkpoint_axis_drift_ordering(self):
        rows = run_ablation(small_cfg(arms=("kd_emb_hist",)), "checkpoint")
        drift = {r["setting"]: r["mean_drift"] for r in rows}
        assert drift["fixed"] < drift["per_split"]

    def test_deltasweep_axis_reports_bound_and_empirical(self):
        from embhist.pipeline import run_delta_sweep

        cfg = small_cfg(fm=FMConfig(epochs=2))
        rows = run_delta_sweep(cfg, deltas=(1,))
        row = rows[0]
        assert {"tr_empirical", "tr_lb", "tr_pop"} <= set(row)
        assert row["tr_pop"] >= row["tr_lb"] - 1e-9
        assert np.isfinite(row["tr_empirical"])


class TestIngestion:
    def test_round_trip(self, tmp_path):
        log = generate(SMALL_WORLD, 3)
        path = tmp_path / "events.tsv"
        log.write_text(path)
        loaded = load_event_log(path, SMALL_WORLD)
        assert len(loaded.samples) == len(log.samples)

    def test_wrong_field_count_names_line(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t0\t0\t1,0\t0,1\t1\n1\t0\t0\t1,0\n")
        with pytest.raises(DataError, match="line 2"):
            list(ingest_event_log(path))

    def test_bad_label(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t0\t0\t1,0\t0,1\t7\n")
        with pytest.raises(DataError, match="label"):
            list(ingest_event_log(path))

    def test_chunk_range(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t0\t9\t1,0\t0,1\t1\n")
        with pytest.raises(DataError, match="chunk"):
            list(ingest_event_log(path))

    def test_nonmonotone_timestamp_warns(self, tmp_path, caplog):
        path = tmp_path / "warn.tsv"
        path.write_text("1\t5\t0\t1,0\t0,1\t1\n2\t3\t0\t1,0\t0,1\t0\n")
        with caplog.at_level(logging.WARNING):
            list(ingest_event_log(path))
        assert any("non-monotone" in r.message for r in caplog.records)

    def test_streaming_bounded_memory(self, tmp_path):
        path = tmp_path / "big.tsv"
        with open(path, "w") as fh:
            for i in range(200_000):
                fh.write(f"{i % 97}\t{i // 97}\t{min(i * 8 // 200_000, 7)}\t1,0\t0,1\t{i % 2}\n")
        tracemalloc.start()
        count = 0
        for _ in ingest_event_log(path):
            count += 1
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        assert count == 200_000
        assert peak < 30 * 1024 * 1024  # streaming, not materialized

    def test_feature_count_validated(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("1\t0\t0\t1,0,0\t0,1\t1\n")
        with pytest.raises(DataError, match="feature count"):
            load_event_log(path, SMALL_WORLD)


class TestTheoryBattery:
    def test_small_battery_all_pass(self):
        result = theory_battery(n_worlds=4, seed=11)
        assert result.all_passed, [c.name for c in result.failures()]

    def test_rows_exportable(self, tmp_path):
        result = theory_battery(n_worlds=1, seed=0)
        write_tsv(tmp_path / "rows.tsv", result.to_rows())
        text = (tmp_path / "rows.tsv").read_text()
        assert text.startswith("check\tworld\tvalue\tthreshold\tpassed")

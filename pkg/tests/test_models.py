import math

import numpy as np
import pytest

from embhist import nncore as nn
from embhist.errors import ConfigError, SchemaError
from embhist.models import (
    Feature, FeatureSchema, FMConfig, FMModel, VMConfig, VMModel,
    extract_embedding, fm_forward, joint_loss, make_fm_batch, make_vm_batch,
    read_checkpoint, seq_encode, vm_forward, write_checkpoint,
)
from embhist.seqstore import SequenceFeature
from embhist.synthworld import WorldSpec, generate

WORLD = WorldSpec(
    n_users=24, events_per_user=16,
    vm_cardinalities=(3, 2), vm_weights=(0.8, -0.6),
    extra_cardinalities=(2, 2), extra_weights=(0.9, -0.7),
    temporal_window=4, temporal_cap=2, beta_temporal=0.5,
)


def schema():
    return FeatureSchema.from_world(WORLD)


def sample_log():
    return generate(WORLD, seed=2)


def histories_for(log, n, history_len=6):
    by_user = {}
    hists, chosen = [], []
    for s in log.samples:
        past = by_user.setdefault(s.key, [])
        if len(chosen) < n:
            chosen.append(s)
            hists.append(list(past[-history_len:]))
        past.append(s)
    return chosen, hists


def make_seq(entries, seq_len):
    n, d = entries.shape
    out = SequenceFeature(
        entries=np.zeros((seq_len, d)), mask=np.zeros(seq_len, bool),
        timestamps=np.full(seq_len, -1, np.int64), length=n,
    )
    out.entries[:n] = entries
    out.mask[:n] = True
    out.timestamps[:n] = np.arange(n)[::-1]
    return out


class TestSchema:
    def test_counts(self):
        s = schema()
        assert s.m_s == 2 and s.m_k == 4

    def test_teacher_needs_extra_features(self):
        with pytest.raises(SchemaError):
            FeatureSchema((Feature("a", 2, "vm_visible"),))

    def test_duplicate_names(self):
        with pytest.raises(SchemaError):
            FeatureSchema((
                Feature("a", 2, "vm_visible"), Feature("a", 2, "fm_extra"),
            ))

    def test_hash_stable_and_sensitive(self):
        a, b = schema(), schema()
        assert a.hash64() == b.hash64()
        other = FeatureSchema(a.features[:-1] + (Feature("zz", 5, "fm_extra"),))
        assert other.hash64() != a.hash64()


class TestFMForward:
    def test_untrained_predicts_half(self):
        fm = FMModel(schema(), FMConfig(), seed=0)
        s = sample_log().samples[0]
        p, _ = fm_forward(fm, s, history=())
        assert p == 0.5

    def test_emb_layer_width(self):
        fm = FMModel(schema(), FMConfig(embed_dim=8), seed=0)
        s = sample_log().samples[0]
        _, bundle = fm_forward(fm, s)
        assert bundle.values["emb_layer"].shape == (1, 4 * 8)

    def test_activations_all_named(self):
        fm = FMModel(schema(), FMConfig(), seed=0)
        s = sample_log().samples[0]
        _, bundle = fm_forward(fm, s)
        for name in ("emb_layer", "hidden_0", "hidden_1", "deep", "softlabel"):
            assert name in bundle.values

    def test_out_of_range_id_rejected(self):
        fm = FMModel(schema(), FMConfig(), seed=0)
        s = sample_log().samples[0]
        bad = type(s)(key=s.key, timestamp=s.timestamp, chunk=s.chunk,
                      vm_values=(99, 0), extra_values=s.extra_values,
                      label=s.label, true_p=s.true_p)
        with pytest.raises(SchemaError):
            fm_forward(fm, bad)


@pytest.fixture(scope="module")
def bundle():
    fm = FMModel(schema(), FMConfig(embed_dim=8, hidden=(32, 16, 8)), seed=1)
    log = sample_log()
    chosen, hists = histories_for(log, 5)
    batch = make_fm_batch(fm.schema, chosen, hists, 6)
    _, acts = fm.predict_batch(batch)
    return fm, acts


class TestExtraction:

    def test_selector_widths(self, bundle):
        fm, b = bundle
        expected = {
            "emb_layer": 32, "hidden_0": 32, "hidden_1": 16, "deep": 8,
            "all_joint": 32 + 32 + 16 + 8, "softlabel_only": 1,
            "item_only": 8 * len(fm.schema.item_features),
        }
        for sel, width in expected.items():
            assert extract_embedding(b, sel).shape == (5, width)
            assert fm.layer_width(sel) == width

    def test_softlabel_only_is_probability(self, bundle):
        _, b = bundle
        e = extract_embedding(b, "softlabel_only")
        assert np.all((e > 0) & (e < 1))
        assert np.array_equal(e, b.values["softlabel"])

    def test_unknown_selector(self, bundle):
        _, b = bundle
        with pytest.raises(ConfigError):
            extract_embedding(b, "penultimate")


class TestSeqEncode:
    def test_mean_pool(self):
        seq = make_seq(np.array([[1.0, 1.0], [3.0, 3.0]]), seq_len=4)
        assert np.allclose(seq_encode("mean_pool", seq), [2.0, 2.0])

    def test_sum_pool_empty_is_zero(self):
        seq = make_seq(np.zeros((0, 3)), seq_len=4)
        assert np.array_equal(seq_encode("sum_pool", seq), np.zeros(3))

    def test_attention_uniform_on_identical_entries(self):
        entries = np.tile(np.array([[0.3, -0.2, 0.5]]), (4, 1))
        seq = make_seq(entries, seq_len=6)
        pooled = seq_encode("din_attention", seq, query=np.array([0.1, 0.9, -0.3]))
        assert np.allclose(pooled, entries[0], atol=1e-12)

    def test_attention_needs_matching_query(self):
        seq = make_seq(np.zeros((2, 3)), seq_len=4)
        with pytest.raises(nn.DimensionError):
            seq_encode("din_attention", seq, query=np.zeros(5))

    def test_pool_permutation_invariant(self):
        rng = np.random.default_rng(3)
        entries = rng.uniform(-1, 1, (5, 4))
        perm = entries[rng.permutation(5)]
        for kind in ("mean_pool", "sum_pool"):
            a = seq_encode(kind, make_seq(entries, 8))
            b = seq_encode(kind, make_seq(perm, 8))
            assert np.allclose(a, b, atol=1e-12)

    def test_attention_pool_permutation_invariant(self):
        rng = np.random.default_rng(4)
        entries = rng.uniform(-1, 1, (5, 4))
        query = rng.uniform(-1, 1, 4)
        perm = entries[rng.permutation(5)]
        a = seq_encode("din_attention", make_seq(entries, 8), query)
        b = seq_encode("din_attention", make_seq(perm, 8), query)
        assert np.allclose(a, b, atol=1e-12)


class TestVMForward:
    def test_branchless_zero_head_is_half(self):
        vm = VMModel(schema(), VMConfig(), seed=0)
        assert vm_forward(vm, sample_log().samples[0]) == 0.5

    def test_seq_to_branchless_rejected(self):
        vm = VMModel(schema(), VMConfig(), seed=0)
        seq = make_seq(np.zeros((1, 4)), 4)
        with pytest.raises(ConfigError):
            vm_forward(vm, sample_log().samples[0], seq)

    def test_branch_requires_seq(self):
        vm = VMModel(schema(), VMConfig(seq_dim=4), seed=0)
        with pytest.raises(ConfigError):
            vm_forward(vm, sample_log().samples[0])

    def test_empty_history_matches_branchless_at_init(self):
        # branch block weights start at zero, so first-step predictions of
        # the two architectures coincide on any input
        s = sample_log().samples[0]
        plain = VMModel(schema(), VMConfig(), seed=7)
        seqvm = VMModel(schema(), VMConfig(seq_dim=4), seed=7)
        rng = np.random.default_rng(0)
        seq = make_seq(rng.uniform(-1, 1, (3, 4)), 5)
        assert vm_forward(seqvm, s, seq) == vm_forward(plain, s)

    def test_never_reads_extra_features(self):
        vm = VMModel(schema(), VMConfig(hidden=(8, 4)), seed=3)
        # train a step so the head is nonzero
        log = sample_log()
        batch = make_vm_batch(vm.schema, list(log.samples[:16]))
        loss, nodes = vm.loss_fn(batch)(vm.params)
        nn.backward(loss)
        nn.adam_step(vm.params, nn.collect_grads(vm.params, nodes),
                     nn.AdamState.for_params(vm.params, lr=0.05))
        s = log.samples[0]
        perturbed = type(s)(key=s.key, timestamp=s.timestamp, chunk=s.chunk,
                            vm_values=s.vm_values,
                            extra_values=tuple((v + 1) % 2 for v in s.extra_values),
                            label=s.label, true_p=s.true_p)
        assert vm_forward(vm, s) == vm_forward(vm, perturbed)


class TestJointLoss:
    def test_lambda_zero_is_task_loss(self):
        assert joint_loss(0.3, 0.9, 1, 0.0) == pytest.approx(nn.bce_loss(0.3, 1))

    def test_hard_teacher_collapses(self):
        got = joint_loss(0.3, 1.0, 1, 2.0)
        # clamped teacher target differs from the exact label only at 1e-7
        assert got == pytest.approx(3.0 * nn.bce_loss(0.3, 1), rel=1e-5)

    def test_hand_case(self):
        got = joint_loss(0.5, 0.8, 1, 1.0)
        assert got == pytest.approx(2 * math.log(2), rel=1e-9)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            joint_loss(0.5, 0.5, 1, -0.1)


class TestGradChecks:
    """Finite differences through every model variant."""

    def _fm(self, use_history):
        fm = FMModel(schema(), FMConfig(use_history=use_history), seed=5)
        fm.params.set_("out.w", nn.glorot_uniform(*fm.params["out.w"].shape, 9, "probe"))
        log = sample_log()
        chosen, hists = histories_for(log, 10)
        batch = make_fm_batch(fm.schema, chosen, hists, fm.config.history_len)
        return nn.grad_check(fm.loss_fn(batch), fm.params, n_probes=40, h=1e-5)

    def test_fm_with_attention(self):
        assert self._fm(True) < 1e-3

    def test_fm_without_attention(self):
        assert self._fm(False) < 1e-3

    @pytest.mark.parametrize("encoder", ["mean_pool", "sum_pool", "din_attention"])
    def test_vm_with_kd_and_sequences(self, encoder):
        vm = VMModel(schema(), VMConfig(seq_encoder=encoder, seq_dim=5), seed=6)
        vm.params.set_("out.w", nn.glorot_uniform(*vm.params["out.w"].shape, 5, "probe"))
        # branch block is zero-initialized; nudge it so gradients flow
        w0 = vm.params["mlp0.w"].copy()
        w0[vm.emb_width:] = nn.glorot_uniform(
            w0.shape[0] - vm.emb_width, w0.shape[1], 4, "probe.block")
        vm.params.set_("mlp0.w", w0)
        log = sample_log()
        rng = np.random.default_rng(1)
        samples = list(log.samples[:12])
        seqs = [make_seq(rng.uniform(-1, 1, (int(rng.integers(0, 4)), 5)), 4)
                for _ in samples]
        batch = make_vm_batch(vm.schema, samples, seqs,
                              soft_labels=rng.uniform(0.05, 0.95, 12),
                              seq_len=4, seq_dim=5)
        err = nn.grad_check(vm.loss_fn(batch, kd_weight=1.0), vm.params,
                            n_probes=40, h=1e-5)
        assert err < 1e-3


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        fm = FMModel(schema(), FMConfig(), seed=8)
        path = tmp_path / "fm.lfmm"
        write_checkpoint(path, fm.params, fm.schema.hash64())
        params, schema_hash, extra = read_checkpoint(path)
        assert schema_hash == fm.schema.hash64()
        assert extra == ()
        assert params.names() == fm.params.names()
        for name in params.names():
            assert np.array_equal(params[name], fm.params[name])

    def test_blob_layout_lexicographic(self, tmp_path):
        store = nn.ParamStore()
        store.add("b.w", np.array([[2.0]]))
        store.add("a.w", np.array([[1.0]]))
        path = tmp_path / "p.lfmm"
        write_checkpoint(path, store, schema_hash=7, extra_dims=(4, 8))
        blob = path.read_bytes()
        assert blob[:4] == b"LFMM"
        assert blob.find(b"a.w") < blob.find(b"b.w")
        _, _, extra = read_checkpoint(path)
        assert extra == (4, 8)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.lfmm"
        path.write_bytes(b"XXXX" + b"\x00" * 20)
        from embhist.errors import FormatError

        with pytest.raises(FormatError):
            read_checkpoint(path)

    def test_forward_pure_and_deterministic(self):
        fm1 = FMModel(schema(), FMConfig(), seed=11)
        fm2 = FMModel(schema(), FMConfig(), seed=11)
        log = sample_log()
        chosen, hists = histories_for(log, 8)
        batch = make_fm_batch(fm1.schema, chosen, hists, 6)
        p1, _ = fm1.predict_batch(batch)
        p2, _ = fm2.predict_batch(batch)
        assert np.array_equal(p1, p2)

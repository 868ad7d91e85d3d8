"""Experiment orchestration: the temporal streaming protocol, the
four-arm comparison, ablations, the theory verification battery, and
event-log ingestion.

Protocol: the teacher trains on chunks 0-3 and logs soft labels plus
extracted embeddings on chunks 4-7; the compressor trains on chunk-4
embeddings; students train one pass, in time order and without shuffling,
on chunks 4-6; chunk 7 is held out for evaluation. Arms share data order
and (where architectures coincide) parameter initialization, so deltas
isolate the transfer channel.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from . import nncore as nn
from .compression import AEConfig, MatryoshkaAE, ae_train
from .errors import ConfigError, DataError, VerificationError
from .infotheory import (
    TablePipeline, TRBoundParams, eval_tr_lower_bound, fixed_point_quantizer,
    grid_ae, identity_stage, posterior_embedding, random_table_pipeline,
    tr_delta_sweep, uniform_quantizer, verify_gain_decomposition,
    verify_gain_sandwich, verify_monotone_L, verify_pipeline,
    verify_tr_bound_population,
)
from .metrics import EvalResult, evaluate
from .models import (
    FeatureSchema, FMConfig, FMModel, VMConfig, VMModel, extract_embedding,
    make_fm_batch, make_vm_batch,
)
from .prng import derive_seed
from .quantization import Codec, fit_kmeans_int4, quantize, reconstruction_mse
from .seqstore import EmbeddingRecord, SequenceStore, centroid_drift
from .synthworld import (
    EventLog, EventSample, WorldSpec, enumerate_world, generate,
    random_enumerable_spec,
)

log = logging.getLogger(__name__)

FM_TRAIN_CHUNKS = (0, 1, 2, 3)
LOG_CHUNKS = (4, 5, 6, 7)
VM_TRAIN_CHUNKS = (4, 5, 6)
TEST_CHUNK = 7
ARMS = ("baseline", "kd", "emb_hist", "kd_emb_hist")
_KD_ARMS = ("kd", "kd_emb_hist")
_SEQ_ARMS = ("emb_hist", "kd_emb_hist")

ABLATION_AXES = ("layer", "seqlen", "dim", "checkpoint", "codec", "deltasweep")
SEQLEN_VALUES = (10, 25, 50, 75, 100)
DIM_VALUES = (8, 16, 32, 64, 128)
DELTA_VALUES = (1, 2, 4, 8)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    event_log_path: str | None = None
    fm: FMConfig = field(default_factory=FMConfig)
    vm: VMConfig = field(default_factory=VMConfig)
    ae: AEConfig = field(default_factory=AEConfig)
    layer: str = "hidden_0"
    active_dim: int = 32
    codec_kind: str = "int4_kmeans"
    seq_len: int = 50
    # 30 synthetic days at the default world's 12-step day; exceeds the
    # horizon, so retention only binds when configured tighter
    window: int = 360
    kd_weight: float = 1.0
    checkpoint_policy: str = "fixed"
    arms: tuple[str, ...] = ARMS
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("need at least one seed")
        for arm in self.arms:
            if arm not in ARMS:
                raise ConfigError(f"unknown arm {arm!r}")
        if self.checkpoint_policy not in ("fixed", "per_split"):
            raise ConfigError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        if self.active_dim not in self.ae.dims:
            raise ConfigError(
                f"active dim {self.active_dim} not in trained dims {self.ae.dims}"
            )
        if self.codec_kind not in ("fp32", "int8_uniform", "int4_uniform", "int4_kmeans"):
            raise ConfigError(f"unknown codec {self.codec_kind!r}")
        if set(FM_TRAIN_CHUNKS) & set(VM_TRAIN_CHUNKS):
            raise ConfigError("teacher and student training chunks must be disjoint")
        if self.seq_len < 1 or self.window < 1:
            raise ConfigError("seq_len and window must be >= 1")

    def hash(self) -> str:
        return hashlib.sha256(repr(self).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# training helpers
# ---------------------------------------------------------------------------


def _histories(samples, history_len: int):
    """Per-sample list of the same user's most recent past events."""
    by_user: dict[int, list[EventSample]] = {}
    out = []
    for s in samples:
        past = by_user.setdefault(s.key, [])
        out.append(past[-history_len:])
        past.append(s)
    return out


def _batches(indices, size):
    for start in range(0, len(indices), size):
        yield indices[start : start + size]


def train_fm(log_: EventLog, schema: FeatureSchema, cfg: FMConfig, seed: int,
             train_chunks=FM_TRAIN_CHUNKS) -> FMModel:
    samples = list(log_.samples)
    hists = _histories(samples, cfg.history_len)
    idx = [i for i, s in enumerate(samples) if s.chunk in train_chunks]
    fm = FMModel(schema, cfg, seed)
    state = nn.AdamState.for_params(fm.params, lr=cfg.lr)
    for _ in range(cfg.epochs):
        for chunk_idx in _batches(idx, cfg.batch_size):
            batch = make_fm_batch(
                schema, [samples[i] for i in chunk_idx],
                [hists[i] for i in chunk_idx], cfg.history_len,
            )
            loss, nodes = fm.loss_fn(batch)(fm.params)
            nn.backward(loss)
            nn.adam_step(fm.params, nn.collect_grads(fm.params, nodes), state)
    return fm


@dataclass
class TeacherLog:
    """Per-event teacher outputs over the logging chunks, in log order."""

    keys: np.ndarray
    timestamps: np.ndarray
    chunks: np.ndarray
    labels: np.ndarray
    soft: np.ndarray
    emb: np.ndarray

    def __post_init__(self):
        self.index = {
            (int(k), int(t)): i
            for i, (k, t) in enumerate(zip(self.keys, self.timestamps))
        }

    def rows_in_chunk(self, chunk: int) -> np.ndarray:
        return np.flatnonzero(self.chunks == chunk)


def log_teacher(fm: FMModel, log_: EventLog, layer: str, chunks,
                batch_size: int = 256) -> TeacherLog:
    samples = list(log_.samples)
    hists = _histories(samples, fm.config.history_len)
    idx = [i for i, s in enumerate(samples) if s.chunk in chunks]
    soft_parts, emb_parts = [], []
    for chunk_idx in _batches(idx, batch_size):
        batch = make_fm_batch(
            fm.schema, [samples[i] for i in chunk_idx],
            [hists[i] for i in chunk_idx], fm.config.history_len,
        )
        probs, bundle = fm.predict_batch(batch)
        soft_parts.append(probs)
        emb_parts.append(extract_embedding(bundle, layer))
    chosen = [samples[i] for i in idx]
    return TeacherLog(
        keys=np.array([s.key for s in chosen], dtype=np.int64),
        timestamps=np.array([s.timestamp for s in chosen], dtype=np.int64),
        chunks=np.array([s.chunk for s in chosen], dtype=np.int64),
        labels=np.array([s.label for s in chosen], dtype=np.int64),
        soft=np.concatenate(soft_parts) if soft_parts else np.zeros(0),
        emb=np.vstack(emb_parts) if emb_parts else np.zeros((0, fm.layer_width(layer))),
    )


def fit_codec(kind: str, z_pool: np.ndarray, seed: int) -> Codec:
    if kind == "int4_kmeans":
        codec, _ = fit_kmeans_int4(z_pool.ravel(), iters=40, seed=seed)
        return codec
    return Codec(kind)


def build_store(teacher: TeacherLog, ae: MatryoshkaAE, codec: Codec,
                d_prime: int, rows=None) -> SequenceStore:
    store = SequenceStore(d_prime, codec)
    append_store(store, teacher, ae, codec, d_prime, rows)
    return store


def append_store(store: SequenceStore, teacher: TeacherLog, ae: MatryoshkaAE,
                 codec: Codec, d_prime: int, rows=None) -> None:
    rows = range(len(teacher.keys)) if rows is None else rows
    rows = list(rows)
    if not rows:
        return
    z = ae.encode_batch(teacher.emb[rows])[:, :d_prime]
    for j, i in enumerate(rows):
        store.append(
            EmbeddingRecord(
                key=int(teacher.keys[i]), timestamp=int(teacher.timestamps[i]),
                payload=quantize(codec, z[j]), soft_label=float(teacher.soft[i]),
            )
        )


def _arm_settings(arm: str, cfg: ExperimentConfig):
    lam = cfg.kd_weight if arm in _KD_ARMS else 0.0
    seq_dim = cfg.active_dim if arm in _SEQ_ARMS else 0
    return lam, seq_dim


def train_vm(log_: EventLog, schema: FeatureSchema, cfg: ExperimentConfig,
             arm: str, store: SequenceStore | None, teacher: TeacherLog | None,
             seed: int) -> VMModel:
    lam, seq_dim = _arm_settings(arm, cfg)
    if seq_dim and store is None:
        raise ConfigError(f"arm {arm!r} needs a populated sequence store")
    if lam > 0 and teacher is None:
        raise ConfigError(f"arm {arm!r} needs teacher soft labels")
    vm = VMModel(schema, replace(cfg.vm, seq_dim=seq_dim), seed)
    state = nn.AdamState.for_params(vm.params, lr=cfg.vm.lr)
    samples = [s for s in log_.samples if s.chunk in VM_TRAIN_CHUNKS]
    for group in _batches(list(range(len(samples))), cfg.vm.batch_size):
        chosen = [samples[i] for i in group]
        batch = _vm_batch(chosen, schema, cfg, seq_dim, lam, store, teacher)
        loss, nodes = vm.loss_fn(batch, kd_weight=lam)(vm.params)
        nn.backward(loss)
        nn.adam_step(vm.params, nn.collect_grads(vm.params, nodes), state)
    return vm


def _vm_batch(chosen, schema, cfg, seq_dim, lam, store, teacher):
    seqs = None
    if seq_dim:
        seqs = [
            store.build_sequence(s.key, s.timestamp, cfg.seq_len, cfg.window)
            for s in chosen
        ]
    soft = None
    if lam > 0:
        soft = [teacher.soft[teacher.index[(s.key, s.timestamp)]] for s in chosen]
    return make_vm_batch(schema, chosen, seqs, soft,
                         seq_len=cfg.seq_len, seq_dim=seq_dim)


def eval_vm(vm: VMModel, log_: EventLog, schema: FeatureSchema,
            cfg: ExperimentConfig, arm: str, store, teacher,
            chunk: int = TEST_CHUNK) -> EvalResult:
    lam, seq_dim = _arm_settings(arm, cfg)
    samples = [s for s in log_.samples if s.chunk == chunk]
    scores = []
    for group in _batches(list(range(len(samples))), 512):
        chosen = [samples[i] for i in group]
        batch = _vm_batch(chosen, schema, cfg, seq_dim, 0.0, store, teacher)
        scores.append(vm.predict_batch(batch))
    return evaluate(np.concatenate(scores), [s.label for s in samples])


# ---------------------------------------------------------------------------
# streaming experiment
# ---------------------------------------------------------------------------


@dataclass
class SeedResult:
    arm_results: dict[str, EvalResult]
    fm_result: EvalResult
    drift_per_chunk_pair: tuple[float, ...]
    codec_mse: float


@dataclass
class RunReport:
    config_hash: str
    code_version: str
    seeds: tuple[int, ...]
    results: dict[int, SeedResult]

    def mean_auc(self, arm: str) -> float:
        return float(np.mean([self.results[s].arm_results[arm].auc for s in self.seeds]))

    def to_text(self) -> str:
        lines = [
            f"config_hash\t{self.config_hash}",
            f"code_version\t{self.code_version}",
            "seed\tarm\tauc\tlogloss\tne\tn\tbase_rate",
        ]
        for seed in self.seeds:
            res = self.results[seed]
            for arm in sorted(res.arm_results):
                r = res.arm_results[arm]
                lines.append(
                    f"{seed}\t{arm}\t{r.auc!r}\t{r.logloss!r}\t{r.ne!r}\t"
                    f"{r.n_samples}\t{r.base_rate!r}"
                )
            fr = res.fm_result
            lines.append(
                f"{seed}\tteacher\t{fr.auc!r}\t{fr.logloss!r}\t{fr.ne!r}\t"
                f"{fr.n_samples}\t{fr.base_rate!r}"
            )
            lines.append(
                f"{seed}\tdrift\t" + ",".join(repr(d) for d in res.drift_per_chunk_pair)
            )
            lines.append(f"{seed}\tcodec_mse\t{res.codec_mse!r}")
        return "\n".join(lines) + "\n"


def _load_log(cfg: ExperimentConfig, seed: int) -> EventLog:
    if cfg.event_log_path:
        return load_event_log(cfg.event_log_path, cfg.world)
    return generate(cfg.world, seed)


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    log_ = _load_log(cfg, seed)
    schema = FeatureSchema.from_world(cfg.world)

    if cfg.checkpoint_policy == "fixed":
        fm = train_fm(log_, schema, cfg.fm, seed)
        teacher = log_teacher(fm, log_, cfg.layer, LOG_CHUNKS)
        ae, _ = ae_train(teacher.emb[teacher.rows_in_chunk(4)], cfg.ae,
                         derive_seed(seed, "ae"))
        per_chunk_ae = {c: ae for c in LOG_CHUNKS}
        teacher_parts = {c: teacher for c in LOG_CHUNKS}
    else:
        # fresh teacher per split, trained on everything before the split;
        # the compressor is retrained per checkpoint as well
        teacher_parts, per_chunk_ae = {}, {}
        merged = None
        for c in LOG_CHUNKS:
            fm_c = train_fm(log_, schema, cfg.fm, derive_seed(seed, "split", c),
                            train_chunks=tuple(range(c)))
            part = log_teacher(fm_c, log_, cfg.layer, (c,))
            teacher_parts[c] = part
            ae_c, _ = ae_train(part.emb, cfg.ae, derive_seed(seed, "ae", c))
            per_chunk_ae[c] = ae_c
            merged = part if merged is None else _concat_teacher(merged, part)
        teacher = merged

    # codec fit on chunk-4 codes; per_split reuses the chunk-4 compressor's
    # codebook so the store stays self-describing under one codec
    chunk4 = teacher_parts[4]
    rows4 = chunk4.rows_in_chunk(4)
    z4 = per_chunk_ae[4].encode_batch(chunk4.emb[rows4])[:, : cfg.active_dim]
    codec = fit_codec(cfg.codec_kind, z4, derive_seed(seed, "codec"))
    codec_mse = reconstruction_mse(codec, z4)

    store = SequenceStore(cfg.active_dim, codec)
    chunk_stores = []
    for c in LOG_CHUNKS:
        part = teacher_parts[c]
        chunk_store = SequenceStore(cfg.active_dim, codec)
        append_store(chunk_store, part, per_chunk_ae[c], codec, cfg.active_dim,
                     rows=part.rows_in_chunk(c))
        chunk_stores.append(chunk_store)
        append_store(store, part, per_chunk_ae[c], codec, cfg.active_dim,
                     rows=part.rows_in_chunk(c))
    drift = tuple(
        centroid_drift(chunk_stores[i], chunk_stores[i + 1])
        for i in range(len(chunk_stores) - 1)
    )
    store.freeze()

    arm_results = {}
    for arm in cfg.arms:
        vm = train_vm(log_, schema, cfg, arm, store, teacher, seed)
        arm_results[arm] = eval_vm(vm, log_, schema, cfg, arm, store, teacher)

    test_rows = teacher.rows_in_chunk(TEST_CHUNK)
    fm_result = evaluate(teacher.soft[test_rows], teacher.labels[test_rows])
    return SeedResult(arm_results, fm_result, drift, codec_mse)


def _concat_teacher(a: TeacherLog, b: TeacherLog) -> TeacherLog:
    return TeacherLog(
        keys=np.concatenate([a.keys, b.keys]),
        timestamps=np.concatenate([a.timestamps, b.timestamps]),
        chunks=np.concatenate([a.chunks, b.chunks]),
        labels=np.concatenate([a.labels, b.labels]),
        soft=np.concatenate([a.soft, b.soft]),
        emb=np.vstack([a.emb, b.emb]),
    )


def run_streaming_experiment(cfg: ExperimentConfig) -> RunReport:
    results = {seed: run_seed(cfg, seed) for seed in cfg.seeds}
    return RunReport(
        config_hash=cfg.hash(), code_version=__version__,
        seeds=tuple(cfg.seeds), results=results,
    )


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------


def run_ablation(cfg: ExperimentConfig, axis: str, values=None) -> list[dict]:
    """One row per axis setting; every row reruns the full protocol."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}")
    rows = []
    if axis == "layer":
        from .models import SELECTORS

        for sel in values or SELECTORS:
            report = run_streaming_experiment(replace(cfg, layer=sel))
            rows.append(_axis_row("layer", sel, report))
    elif axis == "seqlen":
        for seq_len in values or SEQLEN_VALUES:
            report = run_streaming_experiment(replace(cfg, seq_len=seq_len))
            rows.append(_axis_row("seqlen", seq_len, report))
    elif axis == "dim":
        dims = tuple(values or DIM_VALUES)
        for d in dims:
            ae_cfg = replace(cfg.ae, dims=dims)
            report = run_streaming_experiment(replace(cfg, ae=ae_cfg, active_dim=d))
            rows.append(_axis_row("dim", d, report))
    elif axis == "checkpoint":
        for policy in values or ("fixed", "per_split"):
            report = run_streaming_experiment(replace(cfg, checkpoint_policy=policy))
            row = _axis_row("checkpoint", policy, report)
            row["mean_drift"] = float(
                np.mean([np.mean(report.results[s].drift_per_chunk_pair)
                         for s in report.seeds])
            )
            rows.append(row)
    elif axis == "codec":
        for kind in values or ("fp32", "int8_uniform", "int4_uniform", "int4_kmeans"):
            report = run_streaming_experiment(replace(cfg, codec_kind=kind))
            row = _axis_row("codec", kind, report)
            row["codec_mse"] = float(
                np.mean([report.results[s].codec_mse for s in report.seeds])
            )
            rows.append(row)
    else:
        rows = run_delta_sweep(cfg, values or DELTA_VALUES)
    return rows


def _axis_row(axis: str, setting, report: RunReport) -> dict:
    row = {"axis": axis, "setting": setting}
    arms = report.results[report.seeds[0]].arm_results
    for arm in sorted(arms):
        row[f"auc_{arm}"] = report.mean_auc(arm)
        row[f"ne_{arm}"] = float(
            np.mean([report.results[s].arm_results[arm].ne for s in report.seeds])
        )
    return row


def delta_sweep_world(seed: int = 0) -> WorldSpec:
    """World for teacher-generation comparisons: one always-visible extra
    plus eight sweepable ones, all binary, every weight bounded away from 0."""
    weights = (0.9, -0.75, 0.7, -0.65, 0.6, -0.55, 0.5, -0.5, 0.45)
    return WorldSpec(
        n_users=192,
        events_per_user=64,
        vm_cardinalities=(2,),
        extra_cardinalities=(2,) * 9,
        vm_weights=(0.8,),
        extra_weights=weights,
        base_logit=-0.9,
        temporal_window=8,
        temporal_cap=3,
        beta_temporal=0.6,
        seed=seed,
    )


def old_generation_pipe(world, n_visible: int) -> TablePipeline:
    """The incumbent teacher's coarse stack: grid compressor plus 2-bit
    codes, so it genuinely loses part of the cross channel. The upgrade
    story assumes the new stack is at least as good (A3)."""
    return TablePipeline(
        n_extras_visible=n_visible,
        emb_fn=posterior_embedding(world, n_visible),
        ae_fn=grid_ae(2),
        quant_fn=uniform_quantizer(2),
    )


def new_generation_pipe(world, n_visible: int) -> TablePipeline:
    """The upgraded stack: exact posterior embedding kept at full
    resolution. The per-event posterior is a sufficient statistic for the
    event's label under this world, so every stage loss is exactly zero
    and the bound's numerator condition is met by construction."""
    return TablePipeline(
        n_extras_visible=n_visible,
        emb_fn=posterior_embedding(world, n_visible),
        ae_fn=identity_stage,
        quant_fn=fixed_point_quantizer(),
    )


def _subschema(world: WorldSpec, n_extras: int) -> FeatureSchema:
    spec = replace(
        world,
        extra_cardinalities=world.extra_cardinalities[:n_extras],
        extra_weights=world.extra_weights[:n_extras],
    )
    return FeatureSchema.from_world(spec)


def run_delta_sweep(cfg: ExperimentConfig, deltas=DELTA_VALUES, m1: int = 1,
                    seed: int | None = None) -> list[dict]:
    """Empirical transfer ratio for teacher pairs with growing feature gap,
    next to the population-level lower bound for the same world."""
    seed = cfg.seeds[0] if seed is None else seed
    world = delta_sweep_world(seed)
    log_ = generate(world, seed)
    enum_world = enumerate_world(world, n_hist=1)

    def teacher_stack(n_extras, teacher_seed):
        schema = _subschema(world, n_extras)
        view_log = EventLog(spec=world, samples=log_.samples)
        fm = train_fm(view_log, schema, cfg.fm, teacher_seed)
        teacher = log_teacher(fm, view_log, cfg.layer, LOG_CHUNKS)
        ae, _ = ae_train(teacher.emb[teacher.rows_in_chunk(4)], cfg.ae,
                         derive_seed(teacher_seed, "ae"))
        z4 = ae.encode_batch(teacher.emb[teacher.rows_in_chunk(4)])[:, : cfg.active_dim]
        codec = fit_codec(cfg.codec_kind, z4, derive_seed(teacher_seed, "codec"))
        store = build_store(teacher, ae, codec, cfg.active_dim)
        store.freeze()
        vm = train_vm(view_log, schema, cfg, "kd_emb_hist", store, teacher, seed)
        res = eval_vm(vm, view_log, schema, cfg, "kd_emb_hist", store, teacher)
        rows = teacher.rows_in_chunk(TEST_CHUNK)
        fm_res = evaluate(teacher.soft[rows], teacher.labels[rows])
        return res, fm_res

    base_vm, base_fm = teacher_stack(m1, derive_seed(seed, "teacher", m1))
    pops = tr_delta_sweep(
        enum_world, old_generation_pipe(enum_world, m1),
        lambda m2: new_generation_pipe(enum_world, m2), tuple(deltas),
    )
    rows = []
    for delta, pop in zip(deltas, pops):
        new_vm, new_fm = teacher_stack(m1 + delta, derive_seed(seed, "teacher", m1 + delta))
        d_fm = base_fm.ne - new_fm.ne
        tr_emp = (base_vm.ne - new_vm.ne) / d_fm if d_fm != 0 else float("nan")
        rows.append({
            "axis": "deltasweep", "setting": delta,
            "tr_empirical": tr_emp, "tr_lb": pop.tr_lb, "tr_pop": pop.tr_pop,
            "ne_fm_old": base_fm.ne, "ne_fm_new": new_fm.ne,
            "ne_vm_old": base_vm.ne, "ne_vm_new": new_vm.ne,
        })
    return rows


# ---------------------------------------------------------------------------
# theory suite
# ---------------------------------------------------------------------------


@dataclass
class TheoryCheck:
    name: str
    world: str
    value: float
    threshold: float
    passed: bool


@dataclass
class TheorySuiteResult:
    checks: list[TheoryCheck]

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[TheoryCheck]:
        return [c for c in self.checks if not c.passed]

    def to_rows(self) -> list[dict]:
        return [
            {"check": c.name, "world": c.world, "value": c.value,
             "threshold": c.threshold, "passed": c.passed}
            for c in self.checks
        ]


def _hist_cells(spec: WorldSpec, n_hist: int) -> int:
    per_step = spec.vm_card * spec.extra_card * 2
    return per_step ** (n_hist + 1)


def theory_battery(n_worlds: int = 20, seed: int = 0) -> TheorySuiteResult:
    """Randomized identity/inequality battery over enumerable worlds."""
    checks: list[TheoryCheck] = []

    def add(name, world_id, value, threshold, passed):
        checks.append(TheoryCheck(name, world_id, float(value), threshold, passed))

    for k in range(n_worlds):
        spec = random_enumerable_spec(derive_seed(seed, "battery", k))
        n_hist = 2 if _hist_cells(spec, 2) <= 300_000 else 1
        world = enumerate_world(spec, n_hist)
        wid = f"w{k}"
        pipe = random_table_pipeline(world, derive_seed(seed, "pipe", k))

        gain = verify_gain_decomposition(world, pipe)
        add("gain_identity_residual", wid, gain.identity_residual, 1e-10,
            gain.identity_residual < 1e-10)
        add("dpi_cross_le_raw", wid, gain.i_feature_raw - gain.i_cross, -1e-9,
            gain.i_cross <= gain.i_feature_raw + 1e-9)

        rep = verify_pipeline(world, pipe)
        add("cross_identity_residual", wid, rep.cross_identity_residual, 1e-10,
            rep.cross_identity_residual < 1e-10)
        add("pipeline_bound_slack", wid, rep.pipeline_bound_slack, -1e-9,
            rep.pipeline_bound_slack >= -1e-9)
        add("eta_in_unit_interval", wid, rep.eta, 1.0 + 1e-9,
            -1e-12 <= rep.eta <= 1.0 + 1e-9)

        sand = verify_gain_sandwich(gain, rep)
        add("gain_sandwich", wid, min(sand.lower_slack, sand.upper_slack), -1e-9,
            sand.holds)

        gains_by_len = verify_monotone_L(world, pipe)
        diffs = np.diff(gains_by_len)
        add("monotone_history_gain", wid, float(diffs.min(initial=0.0)), -1e-10,
            bool((diffs >= -1e-10).all()))
        cap = world.table.cond_entropy(("Y",), ("V",))
        add("gain_capped_by_label_entropy", wid, cap - gains_by_len[-1], -1e-10,
            gains_by_len[-1] <= cap + 1e-10)

        # conditioning reduces entropy along growing conditioning sets
        hv = world.hist_vm_vars()
        h_prev = world.table.cond_entropy(("Y",), ("V",))
        ok, worst = True, 0.0
        cond = ["V"]
        for v in hv + world.hist_extra_vars():
            cond.append(v)
            h_next = world.table.cond_entropy(("Y",), tuple(cond))
            worst = min(worst, h_prev - h_next)
            ok = ok and (h_next <= h_prev + 1e-10)
            h_prev = h_next
        add("conditioning_reduces_entropy", wid, worst, -1e-10, ok)

        # finer quantization cannot worsen the pipeline (A3-style pair)
        fine = TablePipeline(pipe.n_extras_visible, pipe.emb_fn, pipe.ae_fn,
                             uniform_quantizer(4))
        rep_fine = verify_pipeline(world, fine)
        cross_fine = rep_fine.l_repr_cross + rep_fine.l_ae_cross + rep_fine.l_q_cross
        cross_coarse = rep.l_repr_cross + rep.l_ae_cross + rep.l_q_cross
        if cross_fine <= cross_coarse + 1e-12 and rep.i_feature_raw > 1e-12:
            add("a3_implies_eta_ordering", wid, rep.eta - rep_fine.eta, -1e-9,
                rep_fine.eta <= rep.eta + 1e-9)
    return TheorySuiteResult(checks)


def tr_sweep_suite(seed: int = 0, deltas=DELTA_VALUES) -> TheorySuiteResult:
    """Population transfer-ratio bound across the feature-gap sweep, plus
    the monotone bound grid, initial launch, and negative transfer."""
    checks: list[TheoryCheck] = []

    def add(name, wid, value, threshold, passed):
        checks.append(TheoryCheck(name, wid, float(value), threshold, passed))

    world = enumerate_world(delta_sweep_world(seed), n_hist=1)
    m1 = 1
    pops = tr_delta_sweep(world, old_generation_pipe(world, m1),
                          lambda m2: new_generation_pipe(world, m2), tuple(deltas))
    prev_lb = -math.inf
    for delta, pop in zip(deltas, pops):
        wid = f"delta{delta}"
        add("a3_holds_on_sweep", wid, 1.0 if pop.a3_holds else 0.0, 1.0, pop.a3_holds)
        add("tr_bound_applicable", wid, 1.0 if pop.bound_applicable else 0.0, 1.0,
            pop.bound_applicable)
        add("tr_pop_ge_lb", wid, pop.tr_pop - pop.tr_lb, -1e-9,
            pop.tr_pop >= pop.tr_lb - 1e-9)
        add("tr_lb_nondecreasing_in_delta", wid, pop.tr_lb - prev_lb, 0.0,
            pop.tr_lb >= prev_lb - 1e-12)
        prev_lb = pop.tr_lb

    # closed-form bound is monotone on a dense grid under valid constants
    params0 = TRBoundParams(
        tau2=0.05, eta1=0.3, kappa_gap_hist_lo=0.01, kappa_gap_hi=0.05,
        i_temporal=0.2, delta=1.0, kappa_over_hi=0.2, kappa_over_lo=0.1,
        xi1=0.3, xi2=0.2,
    )
    grid = [
        eval_tr_lower_bound(replace(params0, delta=float(d)))
        for d in range(1, 65)
    ]
    diffs = np.diff(grid)
    add("tr_lb_grid_monotone", "grid64", float(diffs.min()), 0.0,
        bool((diffs >= -1e-12).all()))
    limit = (1.0 - params0.eta1) * params0.kappa_gap_hist_lo / params0.kappa_gap_hi
    add("tr_lb_grid_below_limit", "grid64", limit - grid[-1], 0.0,
        grid[-1] <= limit + 1e-12)

    # initial launch: no prior sequence feature, gain can only help
    launch = verify_tr_bound_population(
        world, None, new_generation_pipe(world, m1 + 2), m1_features=m1
    )
    add("initial_launch_tr_nonneg", "launch", launch.tr_pop, 0.0,
        launch.tr_pop >= -1e-12)
    add("initial_launch_bound_holds", "launch", launch.tr_pop - launch.tr_lb, -1e-9,
        launch.holds)

    # crafted neg-transfer: new teacher sees more but ships a coarser pipeline
    neg = negative_transfer_example(seed)
    add("negative_transfer_a3_violated", "crafted", 0.0 if neg.a3_holds else 1.0,
        1.0, not neg.a3_holds)
    add("negative_transfer_tr_negative", "crafted", neg.tr_pop, 0.0,
        neg.tr_pop < 0.0)
    return TheorySuiteResult(checks)


def negative_transfer_example(seed: int = 0):
    """Teacher upgrade whose pipeline is strictly coarser: the old stack
    is lossless, the new one crushes the posterior to its sign."""
    world = enumerate_world(delta_sweep_world(seed), n_hist=1)
    pipe1 = new_generation_pipe(world, 2)
    pipe2 = TablePipeline(
        n_extras_visible=3,
        emb_fn=posterior_embedding(world, 3),
        ae_fn=grid_ae(2),
        quant_fn=uniform_quantizer(1),
    )
    return verify_tr_bound_population(world, pipe1, pipe2)


def run_theory_suite(n_worlds: int = 20, seed: int = 0) -> TheorySuiteResult:
    battery = theory_battery(n_worlds, seed)
    sweep = tr_sweep_suite(seed)
    return TheorySuiteResult(battery.checks + sweep.checks)


# ---------------------------------------------------------------------------
# event-log ingestion
# ---------------------------------------------------------------------------


def ingest_event_log(path):
    """Stream EventSamples from the delimited text format.

    Validates field counts and value ranges line by line (bounded memory);
    warns on non-monotone timestamps within a chunk.
    """
    last = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise DataError(
                    f"line {line_no}: expected 6 tab-separated fields, got {len(parts)}"
                )
            try:
                key, ts, chunk = int(parts[0]), int(parts[1]), int(parts[2])
                vm = tuple(int(x) for x in parts[3].split(","))
                extras = tuple(int(x) for x in parts[4].split(",")) if parts[4] else ()
                label = int(parts[5])
            except ValueError as exc:
                raise DataError(f"line {line_no}: {exc}") from exc
            if label not in (0, 1):
                raise DataError(f"line {line_no}: label must be 0 or 1")
            if not 0 <= chunk < 8:
                raise DataError(f"line {line_no}: chunk {chunk} outside 0..7")
            if chunk in last and ts < last[chunk]:
                log.warning("line %d: non-monotone timestamp within chunk %d",
                            line_no, chunk)
            last[chunk] = max(ts, last.get(chunk, ts))
            yield EventSample(key=key, timestamp=ts, chunk=chunk, vm_values=vm,
                              extra_values=extras, label=label, true_p=None)


def load_event_log(path, spec: WorldSpec) -> EventLog:
    samples = []
    for s in ingest_event_log(path):
        if len(s.vm_values) != len(spec.vm_cardinalities):
            raise DataError(f"event at t={s.timestamp}: wrong visible feature count")
        if len(s.extra_values) != len(spec.extra_cardinalities):
            raise DataError(f"event at t={s.timestamp}: wrong extra feature count")
        samples.append(s)
    if not samples:
        raise DataError("event log is empty")
    return EventLog(spec=spec, samples=tuple(samples))


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------


def write_tsv(path, rows: list[dict]) -> None:
    if not rows:
        raise DataError("no rows to write")
    cols = list(rows[0].keys())
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in cols) + "\n")


def render_theory_summary(result: TheorySuiteResult) -> str:
    lines = []
    for c in result.checks:
        status = "PASS" if c.passed else "FAIL"
        lines.append(f"[{status}] {c.name} ({c.world}): value={c.value:.3e} "
                     f"threshold={c.threshold:.3e}")
    verdict = "ALL CHECKS PASSED" if result.all_passed else \
        f"{len(result.failures())} CHECK(S) FAILED"
    lines.append(verdict)
    return "\n".join(lines) + "\n"


def require_all_passed(result: TheorySuiteResult) -> None:
    if not result.all_passed:
        names = ", ".join(c.name for c in result.failures())
        raise VerificationError(f"theory checks failed: {names}")

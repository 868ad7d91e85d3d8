"""Teacher and student models, embedding extraction, sequence encoders,
and the combined task + distillation loss.

The teacher sees every feature plus an attention block over the user's
raw past events; the student sees only the student-visible features and,
when enabled, a pooled sequence of dequantized historical teacher
embeddings (plus a presence flag for cold-start users). Checkpoints go
into a versioned "LFMM" binary container.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from . import nncore as nn
from .errors import ConfigError, FormatError, SchemaError
from .nncore import Node, ParamStore
from .synthworld import EventSample, WorldSpec

VM_OWNER = "vm_visible"
EXTRA_OWNER = "fm_extra"
SELECTORS = (
    "emb_layer", "hidden_0", "hidden_1", "deep",
    "all_joint", "softlabel_only", "item_only",
)
SEQ_ENCODERS = ("mean_pool", "sum_pool", "din_attention")


@dataclass(frozen=True)
class Feature:
    name: str
    cardinality: int
    owner: str
    item_side: bool = False

    def __post_init__(self):
        if self.cardinality < 2:
            raise SchemaError(f"feature {self.name!r} cardinality must be >= 2")
        if self.owner not in (VM_OWNER, EXTRA_OWNER):
            raise SchemaError(f"unknown owner {self.owner!r}")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(names) != len(set(names)):
            raise SchemaError("feature names must be unique")
        if not self.vm_features:
            raise SchemaError("need at least one student-visible feature")
        if self.m_s >= self.m_k:
            raise SchemaError("teacher must observe a strict feature superset")

    @property
    def vm_features(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.owner == VM_OWNER)

    @property
    def extra_features(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.owner == EXTRA_OWNER)

    @property
    def m_s(self) -> int:
        return len(self.vm_features)

    @property
    def m_k(self) -> int:
        return len(self.features)

    @property
    def item_features(self) -> tuple[Feature, ...]:
        return tuple(f for f in self.features if f.item_side)

    def canonical_string(self) -> str:
        return ";".join(
            f"{f.name}:{f.cardinality}:{f.owner}:{int(f.item_side)}"
            for f in self.features
        )

    def hash64(self) -> int:
        digest = hashlib.sha256(self.canonical_string().encode()).digest()
        return int.from_bytes(digest[:8], "little")

    @classmethod
    def from_world(cls, spec: WorldSpec) -> "FeatureSchema":
        """Feature 0 is user context; remaining visible features are
        item-side; extras are cross-domain (not item-side)."""
        feats = [
            Feature(f"vm{j}", c, VM_OWNER, item_side=j > 0)
            for j, c in enumerate(spec.vm_cardinalities)
        ]
        feats += [
            Feature(f"ex{j}", c, EXTRA_OWNER)
            for j, c in enumerate(spec.extra_cardinalities)
        ]
        return cls(tuple(feats))


def values_of(schema: FeatureSchema, sample: EventSample) -> dict[str, int]:
    out = {}
    for j, f in enumerate(schema.vm_features):
        out[f.name] = sample.vm_values[j]
    for j, f in enumerate(schema.extra_features):
        out[f.name] = sample.extra_values[j]
    return out


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class FMBatch:
    ids: dict[str, np.ndarray]        # (B,) per feature
    hist_ids: dict[str, np.ndarray]   # (B, Lh) per feature, 0-padded
    hist_mask: np.ndarray             # (B, Lh) bool
    labels: np.ndarray                # (B, 1)

    @property
    def size(self) -> int:
        return len(self.labels)


@dataclass
class VMBatch:
    ids: dict[str, np.ndarray]
    labels: np.ndarray
    soft_labels: np.ndarray | None = None
    seq_entries: np.ndarray | None = None  # (B, L, d)
    seq_mask: np.ndarray | None = None     # (B, L)

    @property
    def size(self) -> int:
        return len(self.labels)


def _check_ids(feature: Feature, ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= feature.cardinality):
        raise SchemaError(
            f"feature {feature.name!r} id outside [0, {feature.cardinality})"
        )
    return ids


def make_fm_batch(schema: FeatureSchema, samples, histories, history_len: int) -> FMBatch:
    """histories[i] is the list of the sample's past events (any order)."""
    b = len(samples)
    ids = {}
    for f in schema.features:
        ids[f.name] = _check_ids(
            f, np.array([values_of(schema, s)[f.name] for s in samples])
        )
    hist_ids = {f.name: np.zeros((b, history_len), dtype=np.int64) for f in schema.features}
    mask = np.zeros((b, history_len), dtype=bool)
    for i, hist in enumerate(histories):
        recent = list(hist)[-history_len:]
        for t, ev in enumerate(recent):
            vals = values_of(schema, ev)
            for f in schema.features:
                hist_ids[f.name][i, t] = vals[f.name]
            mask[i, t] = True
    for f in schema.features:
        _check_ids(f, hist_ids[f.name].ravel())
    labels = np.array([[float(s.label)] for s in samples])
    return FMBatch(ids=ids, hist_ids=hist_ids, hist_mask=mask, labels=labels)


def make_vm_batch(schema: FeatureSchema, samples, sequences=None,
                  soft_labels=None, seq_len: int = 0, seq_dim: int = 0) -> VMBatch:
    """sequences[i] is a seqstore.SequenceFeature or None."""
    b = len(samples)
    ids = {}
    for f in schema.vm_features:
        ids[f.name] = _check_ids(
            f, np.array([values_of(schema, s)[f.name] for s in samples])
        )
    labels = np.array([[float(s.label)] for s in samples])
    soft = None
    if soft_labels is not None:
        soft = np.asarray(soft_labels, dtype=np.float64).reshape(b, 1)
    entries = mask = None
    if sequences is not None:
        entries = np.zeros((b, seq_len, seq_dim))
        mask = np.zeros((b, seq_len), dtype=bool)
        for i, seq in enumerate(sequences):
            if seq is None or seq.length == 0:
                continue
            n = seq.length
            entries[i, :n] = seq.entries[:n]
            mask[i, :n] = True
    return VMBatch(ids=ids, labels=labels, soft_labels=soft,
                   seq_entries=entries, seq_mask=mask)


# ---------------------------------------------------------------------------
# sequence encoders
# ---------------------------------------------------------------------------


def make_attention_params(dim: int, hidden: int, seed: int, prefix: str,
                          params: ParamStore) -> None:
    params.add(f"{prefix}.s0.w", nn.glorot_uniform(4 * dim, hidden, seed, f"{prefix}.s0.w"))
    params.add(f"{prefix}.s0.b", np.zeros((1, hidden)))
    params.add(f"{prefix}.s1.w", nn.glorot_uniform(hidden, 1, seed, f"{prefix}.s1.w"))
    params.add(f"{prefix}.s1.b", np.zeros((1, 1)))


def _pool(kind: str, entries: Node, mask: np.ndarray, query: Node | None,
          nodes: dict[str, Node] | None, prefix: str) -> Node:
    """entries (B*L, d), mask (B, L); returns (B, d).

    mean/sum are masked and permutation-invariant; attention scores each
    entry with an MLP on [z; q; z*q; z-q] then softmax-pools. Empty
    sequences pool to the zero vector.
    """
    b, l = mask.shape
    if kind == "mean_pool":
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        weights = nn.constant(mask / counts)
        return nn.attn_pool(weights, entries, l)
    if kind == "sum_pool":
        return nn.attn_pool(nn.constant(mask.astype(float)), entries, l)
    if kind == "din_attention":
        if query is None or nodes is None:
            raise ConfigError("din_attention needs a query and score parameters")
        if query.value.shape[1] != entries.value.shape[1]:
            raise nn.DimensionError("attention query dim must match entry dim")
        qrep = nn.repeat_rows(query, l)
        feats = nn.concat_cols(
            [entries, qrep, nn.mul(entries, qrep), nn.sub(entries, qrep)]
        )
        h = nn.relu(nn.affine(feats, nodes[f"{prefix}.s0.w"], nodes[f"{prefix}.s0.b"]))
        scores = nn.affine(h, nodes[f"{prefix}.s1.w"], nodes[f"{prefix}.s1.b"])
        weights = nn.masked_softmax(nn.reshape(scores, b, l), mask)
        return nn.attn_pool(weights, entries, l)
    raise ConfigError(f"unknown sequence encoder {kind!r}")


def seq_encode(kind: str, seq, query=None, params: ParamStore | None = None,
               prefix: str = "attn") -> np.ndarray:
    """Pool one SequenceFeature into a d-vector (non-training path)."""
    if kind not in SEQ_ENCODERS:
        raise ConfigError(f"unknown sequence encoder {kind!r}")
    d = seq.entries.shape[1]
    length = max(seq.entries.shape[0], 1)
    entries = np.zeros((length, d))
    mask = np.zeros((1, length), dtype=bool)
    entries[: seq.length] = seq.entries[: seq.length]
    mask[0, : seq.length] = True
    q_node = None
    nodes = None
    if kind == "din_attention":
        if query is None:
            raise ConfigError("din_attention needs a query vector")
        q = np.asarray(query, dtype=np.float64).reshape(1, -1)
        if q.shape[1] != d:
            raise nn.DimensionError("query dim must match entry dim")
        q_node = nn.constant(q)
        nodes = (params or _default_attention(d, prefix)).as_nodes()
    pooled = _pool(kind, nn.constant(entries), mask, q_node, nodes, prefix)
    return pooled.value[0]


def _default_attention(dim: int, prefix: str) -> ParamStore:
    store = ParamStore()
    make_attention_params(dim, 16, seed=0, prefix=prefix, params=store)
    return store


# ---------------------------------------------------------------------------
# teacher (attention over raw past events + 3-layer MLP)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FMConfig:
    embed_dim: int = 8
    hidden: tuple[int, int, int] = (32, 16, 8)
    attn_hidden: int = 16
    history_len: int = 8
    use_history: bool = True
    lr: float = 0.03
    epochs: int = 4
    batch_size: int = 64


@dataclass
class ActivationBundle:
    """Named activations of one forward pass plus the embedding layout."""

    values: dict[str, np.ndarray]
    emb_slices: dict[str, tuple[int, int]]
    item_features: tuple[str, ...]


class FMModel:
    """Wide teacher: per-feature embeddings, optional attention over the
    raw ids of the user's recent events, then hidden_0/hidden_1/deep."""

    def __init__(self, schema: FeatureSchema, config: FMConfig, seed: int):
        self.schema = schema
        self.config = config
        self.seed = seed
        d = config.embed_dim
        self.emb_width = d * schema.m_k
        self.emb_slices = {
            f.name: (i * d, (i + 1) * d) for i, f in enumerate(schema.features)
        }
        p = ParamStore()
        for f in schema.features:
            p.add(f"emb.{f.name}", nn.glorot_uniform(f.cardinality, d, seed, f"emb.{f.name}"))
        if config.use_history:
            make_attention_params(self.emb_width, config.attn_hidden, seed, "attn", p)
        widths = [self.emb_width * (2 if config.use_history else 1), *config.hidden]
        for i in range(3):
            p.add(f"mlp{i}.w", nn.glorot_uniform(widths[i], widths[i + 1], seed, f"fm.mlp{i}.w"))
            p.add(f"mlp{i}.b", np.zeros((1, widths[i + 1])))
        p.add("out.w", np.zeros((config.hidden[2], 1)))  # zero head: untrained -> 0.5
        p.add("out.b", np.zeros((1, 1)))
        self.params = p

    def _forward(self, nodes: dict[str, Node], batch: FMBatch):
        embs = [
            nn.gather_rows(nodes[f"emb.{f.name}"], batch.ids[f.name])
            for f in self.schema.features
        ]
        emb_layer = nn.concat_cols(embs)
        x = emb_layer
        if self.config.use_history:
            b, lh = batch.hist_mask.shape
            hist_embs = [
                nn.gather_rows(nodes[f"emb.{f.name}"], batch.hist_ids[f.name].reshape(-1))
                for f in self.schema.features
            ]
            hist_emb = nn.concat_cols(hist_embs)
            pooled = _pool("din_attention", hist_emb, batch.hist_mask,
                           emb_layer, nodes, "attn")
            x = nn.concat_cols([emb_layer, pooled])
        h0 = nn.relu(nn.affine(x, nodes["mlp0.w"], nodes["mlp0.b"]))
        h1 = nn.relu(nn.affine(h0, nodes["mlp1.w"], nodes["mlp1.b"]))
        h2 = nn.relu(nn.affine(h1, nodes["mlp2.w"], nodes["mlp2.b"]))
        p = nn.sigmoid(nn.affine(h2, nodes["out.w"], nodes["out.b"]))
        acts = {"emb_layer": emb_layer, "hidden_0": h0, "hidden_1": h1,
                "deep": h2, "softlabel": p}
        return p, acts

    def predict_batch(self, batch: FMBatch):
        p, acts = self._forward(self.params.as_nodes(), batch)
        bundle = ActivationBundle(
            values={k: v.value for k, v in acts.items()},
            emb_slices=dict(self.emb_slices),
            item_features=tuple(f.name for f in self.schema.item_features),
        )
        return p.value[:, 0].copy(), bundle

    def loss_fn(self, batch: FMBatch):
        def fn(store: ParamStore):
            nodes = store.as_nodes()
            p, _ = self._forward(nodes, batch)
            return nn.mean_all(nn.bce(p, batch.labels)), nodes

        return fn

    def layer_width(self, selector: str) -> int:
        d = self.config.embed_dim
        widths = {
            "emb_layer": self.emb_width,
            "hidden_0": self.config.hidden[0],
            "hidden_1": self.config.hidden[1],
            "deep": self.config.hidden[2],
            "all_joint": self.emb_width + sum(self.config.hidden),
            "softlabel_only": 1,
            "item_only": d * len(self.schema.item_features),
        }
        if selector not in widths:
            raise ConfigError(f"unknown layer selector {selector!r}")
        return widths[selector]


def fm_forward(fm: FMModel, sample: EventSample, history=()):
    """Single-event forward: (probability, named activations)."""
    batch = make_fm_batch(fm.schema, [sample], [list(history)],
                          fm.config.history_len)
    probs, bundle = fm.predict_batch(batch)
    return float(probs[0]), bundle


def extract_embedding(bundle: ActivationBundle, selector: str) -> np.ndarray:
    """Concatenate the selected activations into the raw embedding."""
    if selector not in SELECTORS:
        raise ConfigError(f"unknown layer selector {selector!r}")
    v = bundle.values
    if selector == "all_joint":
        return np.concatenate(
            [v["emb_layer"], v["hidden_0"], v["hidden_1"], v["deep"]], axis=1
        )
    if selector == "softlabel_only":
        return v["softlabel"].copy()
    if selector == "item_only":
        if not bundle.item_features:
            raise ConfigError("schema has no item-side features")
        cols = [v["emb_layer"][:, slice(*bundle.emb_slices[n])] for n in bundle.item_features]
        return np.concatenate(cols, axis=1)
    return v[selector].copy()


# ---------------------------------------------------------------------------
# student (visible features only, optional embedding-history branch)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VMConfig:
    embed_dim: int = 4
    hidden: tuple[int, int] = (16, 8)
    seq_encoder: str = "mean_pool"
    seq_dim: int = 0            # d' of consumed sequence entries; 0 = no branch
    attn_hidden: int = 16
    lr: float = 0.045
    batch_size: int = 32

    @property
    def use_sequence(self) -> bool:
        return self.seq_dim > 0


class VMModel:
    """Compact student over the visible features; never reads extras."""

    def __init__(self, schema: FeatureSchema, config: VMConfig, seed: int):
        if config.seq_encoder not in SEQ_ENCODERS:
            raise ConfigError(f"unknown sequence encoder {config.seq_encoder!r}")
        self.schema = schema
        self.config = config
        self.seed = seed
        d = config.embed_dim
        self.emb_width = d * schema.m_s
        p = ParamStore()
        for f in schema.vm_features:
            p.add(f"emb.{f.name}", nn.glorot_uniform(f.cardinality, d, seed, f"vm.emb.{f.name}"))
        in_width = self.emb_width
        if config.use_sequence:
            p.add("seqq.w", nn.glorot_uniform(self.emb_width, config.seq_dim, seed, "vm.seqq.w"))
            p.add("seqq.b", np.zeros((1, config.seq_dim)))
            if config.seq_encoder == "din_attention":
                make_attention_params(config.seq_dim, config.attn_hidden, seed, "attn", p)
            in_width += config.seq_dim + 1  # pooled vector + presence flag
        widths = [in_width, *config.hidden]
        for i in range(2):
            w = nn.glorot_uniform(widths[i], widths[i + 1], seed, f"vm.mlp{i}.w")
            if i == 0 and config.use_sequence:
                # the pooled-sequence block starts as a no-op: first-step
                # predictions match the branch-less student, and the branch
                # fades in through training instead of injecting cold noise
                w[self.emb_width :, :] = 0.0
            p.add(f"mlp{i}.w", w)
            p.add(f"mlp{i}.b", np.zeros((1, widths[i + 1])))
        p.add("out.w", np.zeros((config.hidden[1], 1)))
        p.add("out.b", np.zeros((1, 1)))
        self.params = p

    def _forward(self, nodes: dict[str, Node], batch: VMBatch) -> Node:
        has_seq = batch.seq_entries is not None
        if has_seq != self.config.use_sequence:
            raise ConfigError("sequence input must match the configured branch")
        embs = [
            nn.gather_rows(nodes[f"emb.{f.name}"], batch.ids[f.name])
            for f in self.schema.vm_features
        ]
        emb = nn.concat_cols(embs)
        x = emb
        if self.config.use_sequence:
            b, l, d = batch.seq_entries.shape
            if d != self.config.seq_dim:
                raise nn.DimensionError(
                    f"sequence dim {d} != configured {self.config.seq_dim}"
                )
            entries = nn.constant(batch.seq_entries.reshape(b * l, d))
            query = nn.affine(emb, nodes["seqq.w"], nodes["seqq.b"])
            pooled = _pool(self.config.seq_encoder, entries, batch.seq_mask,
                           query, nodes, "attn")
            presence = nn.constant(
                batch.seq_mask.any(axis=1, keepdims=True).astype(float)
            )
            x = nn.concat_cols([emb, pooled, presence])
        h0 = nn.relu(nn.affine(x, nodes["mlp0.w"], nodes["mlp0.b"]))
        h1 = nn.relu(nn.affine(h0, nodes["mlp1.w"], nodes["mlp1.b"]))
        return nn.sigmoid(nn.affine(h1, nodes["out.w"], nodes["out.b"]))

    def predict_batch(self, batch: VMBatch) -> np.ndarray:
        return self._forward(self.params.as_nodes(), batch).value[:, 0].copy()

    def loss_fn(self, batch: VMBatch, kd_weight: float = 0.0):
        if kd_weight < 0:
            raise ConfigError("distillation weight must be >= 0")
        if kd_weight > 0 and batch.soft_labels is None:
            raise ConfigError("distillation needs teacher soft labels")

        def fn(store: ParamStore):
            nodes = store.as_nodes()
            p = self._forward(nodes, batch)
            per = nn.bce(p, batch.labels)
            if kd_weight > 0:
                per = nn.add(per, nn.scale(nn.bce(p, batch.soft_labels), kd_weight))
            return nn.mean_all(per), nodes

        return fn


def vm_forward(vm: VMModel, sample: EventSample, seq=None) -> float:
    """Single-event student forward; `seq` is a SequenceFeature or None."""
    cfg = vm.config
    sequences = None
    if cfg.use_sequence:
        if seq is None:
            raise ConfigError("sequence branch enabled but no sequence given")
        sequences = [seq]
        batch = make_vm_batch(vm.schema, [sample], sequences,
                              seq_len=max(seq.entries.shape[0], 1),
                              seq_dim=cfg.seq_dim)
    else:
        if seq is not None:
            raise ConfigError("sequence given to a branch-less student")
        batch = make_vm_batch(vm.schema, [sample])
    return float(vm.predict_batch(batch)[0])


def joint_loss(p_v: float, p_f: float, y: float, lam: float) -> float:
    """Task cross-entropy plus lam-weighted soft-target cross-entropy."""
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    return nn.bce_loss(p_v, y) + lam * nn.bce_loss(p_v, p_f)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

_MAGIC = b"LFMM"
_VERSION = 1


def write_checkpoint(path, params: ParamStore, schema_hash: int,
                     extra_dims=()) -> None:
    """magic, version, schema hash, optional dim list, then the named
    parameter blobs in lexicographic order as little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _VERSION, schema_hash & (2**64 - 1)))
        fh.write(struct.pack("<H", len(extra_dims)))
        for dim in extra_dims:
            fh.write(struct.pack("<I", dim))
        names = params.names()
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            raw = name.encode("utf-8")
            value = params[name]
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", value.shape[0], value.shape[1]))
            fh.write(value.astype("<f8").tobytes())


def read_checkpoint(path):
    """Returns (params, schema_hash, extra_dims)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    off = 4
    version, schema_hash = struct.unpack_from("<IQ", blob, off)
    off += 12
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (n_extra,) = struct.unpack_from("<H", blob, off)
    off += 2
    extra_dims = struct.unpack_from(f"<{n_extra}I", blob, off) if n_extra else ()
    off += 4 * n_extra
    (n_params,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = ParamStore()
    for _ in range(n_params):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        size = rows * cols * 8
        if off + size > len(blob):
            raise FormatError(f"truncated parameter blob for {name!r} at offset {off}")
        value = np.frombuffer(blob[off : off + size], dtype="<f8").reshape(rows, cols)
        off += size
        params.add(name, value)
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after parameters")
    return params, schema_hash, tuple(extra_dims)

"""Prefix-nested (Matryoshka-style) autoencoder over frozen teacher
embeddings.

The encoder ends in tanh so every coordinate lands strictly inside
(-1, 1), which is what the 4-bit codecs assume. Each target dimension d'
gets its own decoder; training sums the per-prefix reconstruction losses,
so any prefix of the code is a usable representation. Training happens
post hoc on logged embeddings: no gradient can reach the teacher because
the teacher is not even part of the graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import nncore as nn
from .errors import ConfigError, DataError, DimensionError
from .nncore import ParamStore


@dataclass(frozen=True)
class AEConfig:
    dims: tuple[int, ...] = (8, 16, 32)
    hidden_scale: int = 2          # hidden width = scale * max(dims)
    use_hidden: bool = True
    encoder_activation: str = "tanh"   # "linear" exists for identity sanity checks
    lr: float = 0.01
    epochs: int = 60
    batch_size: int = 128

    def __post_init__(self):
        if not self.dims:
            raise ConfigError("dimension set must be nonempty")
        if tuple(sorted(set(self.dims))) != tuple(self.dims):
            raise ConfigError("dims must be strictly ascending")
        if self.encoder_activation not in ("tanh", "linear"):
            raise ConfigError(f"unknown encoder activation {self.encoder_activation!r}")

    @property
    def d_max(self) -> int:
        return self.dims[-1]


class MatryoshkaAE:
    def __init__(self, in_dim: int, config: AEConfig, seed: int):
        self.in_dim = in_dim
        self.config = config
        self.seed = seed
        d_max = config.d_max
        hidden = config.hidden_scale * d_max
        p = ParamStore()
        if config.use_hidden:
            p.add("enc.h.w", nn.glorot_uniform(in_dim, hidden, seed, "ae.enc.h.w"))
            p.add("enc.h.b", np.zeros((1, hidden)))
            enc_in = hidden
        else:
            enc_in = in_dim
        p.add("enc.out.w", nn.glorot_uniform(enc_in, d_max, seed, "ae.enc.out.w"))
        p.add("enc.out.b", np.zeros((1, d_max)))
        for d in config.dims:
            if config.use_hidden:
                p.add(f"dec{d}.h.w", nn.glorot_uniform(d, hidden, seed, f"ae.dec{d}.h.w"))
                p.add(f"dec{d}.h.b", np.zeros((1, hidden)))
                dec_in = hidden
            else:
                dec_in = d
            p.add(f"dec{d}.out.w", nn.glorot_uniform(dec_in, in_dim, seed, f"ae.dec{d}.out.w"))
            p.add(f"dec{d}.out.b", np.zeros((1, in_dim)))
        self.params = p

    # -- graph builders ---------------------------------------------------

    def _encode_node(self, nodes, x: nn.Node) -> nn.Node:
        h = x
        if self.config.use_hidden:
            h = nn.relu(nn.affine(h, nodes["enc.h.w"], nodes["enc.h.b"]))
        out = nn.affine(h, nodes["enc.out.w"], nodes["enc.out.b"])
        return nn.tanh_(out) if self.config.encoder_activation == "tanh" else out

    def _decode_node(self, nodes, z_prefix: nn.Node, d: int) -> nn.Node:
        h = z_prefix
        if self.config.use_hidden:
            h = nn.relu(nn.affine(h, nodes[f"dec{d}.h.w"], nodes[f"dec{d}.h.b"]))
        return nn.affine(h, nodes[f"dec{d}.out.w"], nodes[f"dec{d}.out.b"])

    def loss_fn(self, batch: np.ndarray):
        """Mean over the batch of the summed per-prefix squared errors."""
        target = nn.constant(batch)

        def fn(store: ParamStore):
            nodes = store.as_nodes()
            z = self._encode_node(nodes, target)
            total = None
            for d in self.config.dims:
                recon = self._decode_node(nodes, nn.slice_cols(z, 0, d), d)
                diff = nn.sub(recon, target)
                term = nn.sum_all(nn.mul(diff, diff))
                total = term if total is None else nn.add(total, term)
            return nn.scale(total, 1.0 / len(batch)), nodes

        return fn

    # -- numpy API ----------------------------------------------------------

    def encode_batch(self, e: np.ndarray) -> np.ndarray:
        e = np.atleast_2d(np.asarray(e, dtype=np.float64))
        if e.shape[1] != self.in_dim:
            raise DimensionError(f"expected dim {self.in_dim}, got {e.shape[1]}")
        nodes = self.params.as_nodes()
        return self._encode_node(nodes, nn.constant(e)).value

    def decode_prefix_batch(self, z_prefix: np.ndarray, d: int) -> np.ndarray:
        if d not in self.config.dims:
            raise ConfigError(f"{d} is not one of the trained prefix dims {self.config.dims}")
        z_prefix = np.atleast_2d(np.asarray(z_prefix, dtype=np.float64))
        if z_prefix.shape[1] != d:
            raise DimensionError(f"prefix width {z_prefix.shape[1]} != {d}")
        nodes = self.params.as_nodes()
        return self._decode_node(nodes, nn.constant(z_prefix), d).value


def encode(ae: MatryoshkaAE, e) -> np.ndarray:
    return ae.encode_batch(np.asarray(e).reshape(1, -1))[0]


def decode_prefix(ae: MatryoshkaAE, z_prefix, d: int) -> np.ndarray:
    return ae.decode_prefix_batch(np.asarray(z_prefix).reshape(1, -1), d)[0]


def ae_train(embeddings: np.ndarray, config: AEConfig, seed: int = 0):
    """Fit the autoencoder on a frozen embedding set.

    Returns (ae, per-epoch mean losses); epoch 0 is the pre-training loss,
    so history[-1] < history[0] on any non-degenerate run.
    """
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    if e.size == 0:
        raise DataError("empty embedding training set")
    ae = MatryoshkaAE(e.shape[1], config, seed)
    state = nn.AdamState.for_params(ae.params, lr=config.lr)
    history = [float(ae.loss_fn(e)(ae.params)[0].value[0, 0])]
    n = len(e)
    bs = min(config.batch_size, n)
    for _ in range(config.epochs):
        epoch_loss = 0.0
        for start in range(0, n, bs):
            batch = e[start : start + bs]
            loss, nodes = ae.loss_fn(batch)(ae.params)
            nn.backward(loss)
            nn.adam_step(ae.params, nn.collect_grads(ae.params, nodes), state)
            epoch_loss += float(loss.value[0, 0]) * len(batch)
        history.append(epoch_loss / n)
    return ae, history


def prefix_mse(ae: MatryoshkaAE, embeddings: np.ndarray) -> dict[int, float]:
    """Reconstruction MSE per prefix dimension (non-increasing in d' on a
    converged model)."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    z = ae.encode_batch(e)
    out = {}
    for d in ae.config.dims:
        recon = ae.decode_prefix_batch(z[:, :d], d)
        out[d] = float(np.mean((e - recon) ** 2))
    return out


def save_ae(path, ae: MatryoshkaAE) -> None:
    """Same container as model checkpoints; the dim set rides in the header."""
    from .models import write_checkpoint

    if ae.config.encoder_activation != "tanh" or not ae.config.use_hidden:
        raise ConfigError("only the default tanh architecture is persistable")
    write_checkpoint(path, ae.params, schema_hash=ae.in_dim, extra_dims=ae.config.dims)


def load_ae(path, config: AEConfig | None = None) -> MatryoshkaAE:
    from .models import read_checkpoint

    params, in_dim, dims = read_checkpoint(path)
    config = config or AEConfig(dims=tuple(int(d) for d in dims))
    if tuple(config.dims) != tuple(int(d) for d in dims):
        raise ConfigError("checkpoint dim set does not match the requested config")
    ae = MatryoshkaAE(int(in_dim), config, seed=0)
    for name in ae.params.names():
        ae.params.set_(name, params[name])
    return ae


def dimension_correlation_probe(z: np.ndarray, soft_labels, labels):
    """Per-dimension Pearson correlations of the code with the teacher's
    soft label and with the ground truth, plus the Spearman rank agreement
    between the two correlation profiles."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    soft = np.asarray(soft_labels, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()

    def corr_with(target):
        centered = z - z.mean(axis=0)
        t = target - target.mean()
        denom = np.sqrt((centered**2).sum(axis=0) * (t**2).sum())
        with np.errstate(invalid="ignore"):
            c = (centered * t[:, None]).sum(axis=0) / denom
        return np.nan_to_num(c)

    corr_soft = corr_with(soft)
    corr_true = corr_with(y)
    rho = float(stats.spearmanr(corr_soft, corr_true).statistic)
    return corr_soft, corr_true, rho

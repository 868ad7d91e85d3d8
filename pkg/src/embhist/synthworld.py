"""Seeded discrete recommendation worlds with known ground truth.

A world has student-visible categorical features, extra teacher-only
features, and a temporal channel: the label's logit gets a bump from the
count of the user's positive labels within the last `temporal_window`
events, capped at `temporal_cap`. Label noise (if any) mixes the
conditional law toward a fair coin. Worlds support both event-log
sampling (per-user splitmix64 substreams) and exact enumeration of the
joint law of the first few events of one user, which feeds every
information-theoretic verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SizeError
from .infotheory import JointTable, VerificationWorld, hist_var
from .prng import Stream, derive_seed

N_CHUNKS = 8
_ENUM_BUDGET = 30_000_000


def feature_effect(value: int, cardinality: int) -> float:
    """Map a categorical value onto a centered score in [-1, 1]."""
    return (2.0 * value - (cardinality - 1)) / (cardinality - 1)


@dataclass(frozen=True)
class WorldSpec:
    n_users: int = 256
    events_per_user: int = 96
    vm_cardinalities: tuple[int, ...] = (4, 3, 2, 2)
    extra_cardinalities: tuple[int, ...] = (3, 2, 2, 2)
    vm_weights: tuple[float, ...] = (0.7, -0.55, 0.5, -0.45)
    extra_weights: tuple[float, ...] = (1.1, -0.9, 0.8, -0.65)
    base_logit: float = -1.9
    temporal_window: int = 12
    temporal_cap: int = 6
    beta_temporal: float = 0.3
    label_noise: float = 0.0
    vm_feature_probs: tuple[tuple[float, ...], ...] | None = None
    extra_feature_probs: tuple[tuple[float, ...], ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_users < 1 or self.events_per_user < N_CHUNKS:
            raise ConfigError("need >= 1 user and >= 8 events per user")
        if self.events_per_user % N_CHUNKS:
            raise ConfigError("events_per_user must be divisible by 8 chunks")
        for c in self.vm_cardinalities + self.extra_cardinalities:
            if c < 2:
                raise ConfigError("cardinalities must be >= 2")
        if len(self.vm_weights) != len(self.vm_cardinalities):
            raise ConfigError("vm weight/cardinality length mismatch")
        if len(self.extra_weights) != len(self.extra_cardinalities):
            raise ConfigError("extra weight/cardinality length mismatch")
        if self.temporal_window < 1 or self.temporal_cap < 0:
            raise ConfigError("temporal window must be >= 1 and cap >= 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("label noise must be in [0, 1)")
        for probs, cards in (
            (self.vm_feature_probs, self.vm_cardinalities),
            (self.extra_feature_probs, self.extra_cardinalities),
        ):
            if probs is None:
                continue
            if len(probs) != len(cards):
                raise ConfigError("feature prob/cardinality length mismatch")
            for p, c in zip(probs, cards):
                if len(p) != c or abs(sum(p) - 1.0) > 1e-9 or min(p) < 0:
                    raise ConfigError("invalid feature distribution")
        # full joint over (features, history summary, y) stays enumerable
        cells = (
            math.prod(self.vm_cardinalities)
            * math.prod(self.extra_cardinalities)
            * (self.temporal_cap + 1) * 2
        )
        if cells > 1_000_000:
            raise ConfigError(f"summary joint of {cells} cells is not enumerable")

    @property
    def vm_card(self) -> int:
        return math.prod(self.vm_cardinalities)

    @property
    def extra_card(self) -> int:
        return math.prod(self.extra_cardinalities)

    def chunk_of(self, timestamp: int) -> int:
        return timestamp * N_CHUNKS // self.events_per_user


@dataclass(frozen=True)
class EventSample:
    """One labeled interaction; true_p is known only for generated worlds."""

    key: int
    timestamp: int
    chunk: int
    vm_values: tuple[int, ...]
    extra_values: tuple[int, ...]
    label: int
    true_p: float | None = None

    def __post_init__(self):
        if self.true_p is not None and not 0.0 < self.true_p < 1.0:
            raise ConfigError(f"true_p {self.true_p} outside (0, 1)")


@dataclass(frozen=True)
class EventLog:
    spec: WorldSpec
    samples: tuple[EventSample, ...]

    def chunk_samples(self, chunks) -> list[EventSample]:
        wanted = set(chunks)
        return [s for s in self.samples if s.chunk in wanted]

    def write_text(self, path) -> None:
        """One record per line: key, timestamp, chunk, vm ids, extra ids, label.

        Fields are tab-separated; the id lists are comma-joined.
        """
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.samples:
                fh.write(
                    f"{s.key}\t{s.timestamp}\t{s.chunk}\t"
                    f"{','.join(map(str, s.vm_values))}\t"
                    f"{','.join(map(str, s.extra_values))}\t{s.label}\n"
                )


def _feature_probs(spec: WorldSpec, extras: bool) -> list[np.ndarray]:
    cards = spec.extra_cardinalities if extras else spec.vm_cardinalities
    given = spec.extra_feature_probs if extras else spec.vm_feature_probs
    if given is None:
        return [np.full(c, 1.0 / c) for c in cards]
    return [np.asarray(p, dtype=np.float64) for p in given]


def _score_table(cards, weights) -> np.ndarray:
    """Weighted feature-effect score for every composite feature index."""
    total = math.prod(cards)
    scores = np.zeros(total)
    idx = np.arange(total)
    for card, weight in zip(reversed(cards), reversed(list(weights))):
        digit = idx % card
        scores += weight * (2.0 * digit - (card - 1)) / (card - 1)
        idx = idx // card
    return scores


def _composite_probs(per_feature: list[np.ndarray]) -> np.ndarray:
    out = np.ones(1)
    for p in per_feature:
        out = np.multiply.outer(out, p).ravel()
    return out


def true_probability(spec: WorldSpec, vm_values, extra_values, pos_count: int) -> float:
    """The generative law: sigmoid logit with a capped temporal bump."""
    logit = spec.base_logit
    for v, c, w in zip(vm_values, spec.vm_cardinalities, spec.vm_weights):
        logit += w * feature_effect(v, c)
    for v, c, w in zip(extra_values, spec.extra_cardinalities, spec.extra_weights):
        logit += w * feature_effect(v, c)
    logit += spec.beta_temporal * min(pos_count, spec.temporal_cap)
    p = 1.0 / (1.0 + math.exp(-logit))
    return (1.0 - spec.label_noise) * p + 0.5 * spec.label_noise


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def generate(spec: WorldSpec, seed: int | None = None) -> EventLog:
    """Chronologically ordered event log, 8 temporal chunks, bit-reproducible.

    Users draw from independent substreams keyed by (seed, user id), so
    the log is identical under any generation schedule.
    """
    seed = spec.seed if seed is None else seed
    vm_probs = _feature_probs(spec, extras=False)
    ex_probs = _feature_probs(spec, extras=True)
    vm_cums = [np.cumsum(p) for p in vm_probs]
    ex_cums = [np.cumsum(p) for p in ex_probs]
    t_count = spec.events_per_user
    per_user: list[list[EventSample]] = []
    for user in range(spec.n_users):
        stream = Stream(derive_seed(seed, "user", user))
        u_feat = stream.uniforms(t_count * (len(vm_cums) + len(ex_cums)))
        u_label = stream.uniforms(t_count)
        u_feat = u_feat.reshape(t_count, -1)
        labels_hist: list[int] = []
        events = []
        for t in range(t_count):
            vm_values = tuple(
                int(np.searchsorted(vm_cums[j], u_feat[t, j], side="right"))
                for j in range(len(vm_cums))
            )
            extra_values = tuple(
                int(np.searchsorted(ex_cums[j], u_feat[t, len(vm_cums) + j], side="right"))
                for j in range(len(ex_cums))
            )
            pos = sum(labels_hist[-spec.temporal_window:])
            p = true_probability(spec, vm_values, extra_values, pos)
            label = int(u_label[t] < p)
            labels_hist.append(label)
            events.append(
                EventSample(
                    key=user, timestamp=t, chunk=spec.chunk_of(t),
                    vm_values=vm_values, extra_values=extra_values,
                    label=label, true_p=p,
                )
            )
        per_user.append(events)
    ordered = []
    for t in range(t_count):
        for user in range(spec.n_users):
            ordered.append(per_user[user][t])
    return EventLog(spec=spec, samples=tuple(ordered))


# ---------------------------------------------------------------------------
# exact enumeration
# ---------------------------------------------------------------------------


def _axis_grid(values: np.ndarray, axis: int, naxes: int) -> np.ndarray:
    shape = [1] * naxes
    shape[axis] = len(values)
    return values.reshape(shape)


def enumerate_world(spec: WorldSpec, n_hist: int) -> VerificationWorld:
    """Exact joint law of one user's first n_hist+1 events.

    Variables (most recent history step is index n_hist):
    V1,E1,Y1 ... Vn,En,Yn, V,E,Y -- composite feature indices and labels.
    """
    cv, ce = spec.vm_card, spec.extra_card
    cells = (cv * ce * 2) ** (n_hist + 1)
    if cells > _ENUM_BUDGET:
        raise SizeError(f"enumeration of {cells} cells exceeds budget")

    pv = _composite_probs(_feature_probs(spec, extras=False))
    pe = _composite_probs(_feature_probs(spec, extras=True))
    sv = _score_table(spec.vm_cardinalities, spec.vm_weights)
    se = _score_table(spec.extra_cardinalities, spec.extra_weights)

    naxes = 3 * (n_hist + 1)
    names, cards = [], []
    for i in range(1, n_hist + 1):
        names += [hist_var("V", i), hist_var("E", i), hist_var("Y", i)]
        cards += [cv, ce, 2]
    names += ["V", "E", "Y"]
    cards += [cv, ce, 2]

    table = np.ones(cards)
    y_axes: list[int] = []
    for step in range(n_hist + 1):
        av, ae_, ay = 3 * step, 3 * step + 1, 3 * step + 2
        table *= _axis_grid(pv, av, naxes)
        table *= _axis_grid(pe, ae_, naxes)
        window_axes = [a for a in y_axes if a >= ay - 3 * spec.temporal_window]
        count = np.zeros((1,) * naxes)
        for a in window_axes:
            count = count + _axis_grid(np.arange(2.0), a, naxes)
        capped = np.minimum(count, spec.temporal_cap)
        logit = (
            spec.base_logit
            + _axis_grid(sv, av, naxes)
            + _axis_grid(se, ae_, naxes)
            + spec.beta_temporal * capped
        )
        p1 = 1.0 / (1.0 + np.exp(-logit))
        p1 = (1.0 - spec.label_noise) * p1 + 0.5 * spec.label_noise
        y_grid = _axis_grid(np.arange(2.0), ay, naxes)
        table *= y_grid * p1 + (1.0 - y_grid) * (1.0 - p1)
        y_axes.append(ay)
    table /= table.sum()  # remove accumulated rounding at the 1e-16 level
    return VerificationWorld(
        table=JointTable(names, cards, table),
        n_hist=n_hist,
        vm_feature_cards=tuple(spec.vm_cardinalities),
        extra_feature_cards=tuple(spec.extra_cardinalities),
    )


def joint_table(spec: WorldSpec, variables, n_hist: int = 2) -> JointTable:
    """Exact marginal over the requested enumerated-world variables."""
    world = enumerate_world(spec, n_hist)
    return world.table.remap(list(variables))


def true_conditional(spec: WorldSpec, cond_vars, n_hist: int = 2):
    """Exact P(y=1 | conditioning assignment) by enumeration.

    Returns (p1, support): p1 has one axis per conditioning variable;
    support marks assignments with positive probability (p1 is 0.5
    placeholder elsewhere).
    """
    world = enumerate_world(spec, n_hist)
    t = world.table.remap([*cond_vars, "Y"])
    joint = t.probs
    denom = joint.sum(axis=-1)
    support = denom > 0.0
    p1 = np.divide(joint[..., 1], denom, out=np.full_like(denom, 0.5), where=support)
    return p1, support


# ---------------------------------------------------------------------------
# randomized worlds for the verification battery
# ---------------------------------------------------------------------------


def default_verification_spec() -> WorldSpec:
    """Canonical small world for exact checks: binary features, live
    temporal window of two events. Enumerable up to five history steps."""
    return WorldSpec(
        n_users=8, events_per_user=8,
        vm_cardinalities=(2,), vm_weights=(0.8,),
        extra_cardinalities=(2,), extra_weights=(0.9,),
        base_logit=-0.4, temporal_window=2, temporal_cap=2, beta_temporal=0.7,
    )


def random_enumerable_spec(seed: int) -> WorldSpec:
    """Small random world for the identity/inequality battery.

    Feature weights stay bounded away from zero so every extra feature
    carries strictly positive conditional information.
    """
    stream = Stream(derive_seed(seed, "battery-world"))
    n_vm = 1 + stream.randint(2)
    n_ex = 1 + stream.randint(2)
    vm_cards = tuple(2 + stream.randint(2) for _ in range(n_vm))
    ex_cards = tuple(2 + stream.randint(2) for _ in range(n_ex))

    def weight():
        sign = 1.0 if stream.uniform() < 0.5 else -1.0
        return sign * (0.3 + 0.9 * stream.uniform())

    def dist(card):
        raw = np.array([0.2 + stream.uniform() for _ in range(card)])
        raw /= raw.sum()
        return tuple(float(x) for x in raw)

    return WorldSpec(
        n_users=8,
        events_per_user=8,
        vm_cardinalities=vm_cards,
        extra_cardinalities=ex_cards,
        vm_weights=tuple(weight() for _ in range(n_vm)),
        extra_weights=tuple(weight() for _ in range(n_ex)),
        base_logit=-0.6 + 1.2 * stream.uniform(),
        temporal_window=1 + stream.randint(2),
        temporal_cap=1 + stream.randint(2),
        beta_temporal=0.3 + 0.9 * stream.uniform(),
        vm_feature_probs=tuple(dist(c) for c in vm_cards),
        extra_feature_probs=tuple(dist(c) for c in ex_cards),
        seed=seed,
    )

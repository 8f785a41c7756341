"""Choosing weight and activation value sets, and the supply-voltage power model.

Weights are picked by a power threshold on the per-weight profile. Weights and
activations are then pruned against a delay threshold: repeatedly take the
surviving ``(weight, a_from, a_to)`` combination with the largest delay and, if
it violates the threshold, drop one of its three values at random. Restarts
with independent seeds and keeping the best run counter the greedy's myopia.
"""
from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InfeasibleError

ALL_WEIGHTS = np.arange(-127, 128)
ALL_ACTS = np.arange(256)


@dataclass
class Selection:
    weights: np.ndarray
    acts: np.ndarray
    power_threshold: float | None = None
    delay_threshold: float | None = None
    achieved_max_delay: float | None = None
    removed: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.unique(np.asarray(self.weights, dtype=np.int64))
        self.acts = np.unique(np.asarray(self.acts, dtype=np.int64))

    @classmethod
    def full(cls) -> "Selection":
        return cls(ALL_WEIGHTS, ALL_ACTS)

    @property
    def objective(self) -> int:
        return len(self.weights) * len(self.acts)

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "acts": self.acts.tolist(),
            "power_threshold": self.power_threshold,
            "delay_threshold": self.delay_threshold,
            "achieved_max_delay": self.achieved_max_delay,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Selection":
        return cls(
            d["weights"],
            d["acts"],
            d.get("power_threshold"),
            d.get("delay_threshold"),
            d.get("achieved_max_delay"),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)


def select_weights_by_power(profile, threshold: float, protected: Iterable[int] = (0,)) -> np.ndarray:
    """Weights whose average dynamic power is at or below ``threshold`` µW, plus the protected set.

    ``profile`` is a PowerProfile or a plain ``{weight: µW}`` mapping.
    """
    if not threshold > 0:
        raise ConfigError(f"power threshold must be positive, got {threshold}")
    powers = getattr(profile, "powers", profile)
    chosen = {int(w) for w, p in powers.items() if p <= threshold}
    chosen.update(int(w) for w in protected)
    if not chosen:
        raise InfeasibleError(f"no weight value has power <= {threshold} µW")
    return np.array(sorted(chosen), dtype=np.int64)


@dataclass
class DelayTable:
    """Combined MAC delays for candidate weights x activation transitions.

    ``delays[i, f, t]`` is the delay of weight ``weights[i]`` when the
    activation moves from ``acts[f]`` to ``acts[t]``.
    """

    weights: np.ndarray
    acts: np.ndarray
    delays: np.ndarray
    psum_bound: float

    @classmethod
    def from_profile(cls, profile, weights: Sequence[int] | None = None, acts: Sequence[int] | None = None) -> "DelayTable":
        weights = np.asarray(profile.weights if weights is None else weights, dtype=np.int64)
        acts = np.asarray(ALL_ACTS if acts is None else acts, dtype=np.int64)
        delays = np.stack([profile.matrix(int(w))[np.ix_(acts, acts)] for w in weights])
        return cls(weights, acts, delays, profile.psum_bound)

    def max_delay(self, keep_w: np.ndarray | None = None, keep_a: np.ndarray | None = None) -> float:
        d = self.delays
        if keep_w is not None:
            d = d[keep_w]
        if keep_a is not None:
            d = d[:, keep_a][:, :, keep_a]
        return float(d.max()) if d.size else float(self.psum_bound)


class _Violations:
    """Violating combinations sorted by decreasing delay, shared by all restarts."""

    def __init__(self, table: DelayTable, threshold: float):
        flat = table.delays.reshape(-1)
        idx = np.flatnonzero(flat > threshold)
        order = idx[np.argsort(-flat[idx], kind="stable")]
        n_a = len(table.acts)
        self.delay = flat[order]
        self.w = order // (n_a * n_a)
        self.f = (order // n_a) % n_a
        self.t = order % n_a


def prune_for_delay(
    table: DelayTable,
    threshold: float,
    seed: int = 0,
    protected_weights: Iterable[int] = (0,),
    protected_acts: Iterable[int] = (0,),
    _violations: _Violations | None = None,
) -> Selection:
    """One randomized greedy removal run; see the module docstring."""
    if threshold < table.psum_bound:
        raise InfeasibleError(
            f"delay threshold {threshold} ps is below the partial-sum adder path {table.psum_bound} ps"
        )
    v = _violations or _Violations(table, threshold)
    rng = np.random.default_rng(seed)
    prot_w = np.isin(table.weights, list(protected_weights))
    prot_a = np.isin(table.acts, list(protected_acts))
    gone_w = np.zeros(len(table.weights), dtype=bool)
    gone_a = np.zeros(len(table.acts), dtype=bool)
    removed = []
    pos, chunk = 0, 4096
    while pos < len(v.delay):
        sl = slice(pos, pos + chunk)
        dead = gone_w[v.w[sl]] | gone_a[v.f[sl]] | gone_a[v.t[sl]]
        if dead.all():
            pos += chunk
            continue
        pos += int(np.argmin(dead))
        wi, fi, ti = int(v.w[pos]), int(v.f[pos]), int(v.t[pos])
        options = [] if prot_w[wi] else [("weight", wi)]
        options += [("act", ai) for ai in sorted({fi, ti}) if not prot_a[ai]]
        if not options:
            raise InfeasibleError(
                f"combination (w={table.weights[wi]}, {table.acts[fi]}->{table.acts[ti]}) with delay "
                f"{v.delay[pos]} ps exceeds {threshold} ps and contains only protected values"
            )
        kind, i = options[int(rng.integers(len(options)))]
        if kind == "weight":
            gone_w[i] = True
            value = int(table.weights[i])
        else:
            gone_a[i] = True
            value = int(table.acts[i])
        combo = (int(table.weights[wi]), int(table.acts[fi]), int(table.acts[ti]))
        removed.append((kind, value, combo, float(v.delay[pos])))

    keep_w, keep_a = ~gone_w, ~gone_a
    return Selection(
        table.weights[keep_w],
        table.acts[keep_a],
        delay_threshold=float(threshold),
        achieved_max_delay=table.max_delay(keep_w, keep_a),
        removed=removed,
    )


def _restart_seeds(seed: int, restarts: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(restarts)]


_POOL_STATE: dict = {}


def _pool_init(table, threshold, pw, pa):
    _POOL_STATE.update(table=table, threshold=threshold, pw=pw, pa=pa, v=_Violations(table, threshold))


def _pool_run(seed):
    s = _POOL_STATE
    try:
        return prune_for_delay(s["table"], s["threshold"], seed, s["pw"], s["pa"], s["v"])
    except InfeasibleError:
        return None


def select_for_delay(
    table: DelayTable,
    threshold: float,
    restarts: int = 20,
    seed: int = 0,
    protected_weights: Iterable[int] = (0,),
    protected_acts: Iterable[int] = (0,),
    jobs: int = 1,
) -> Selection:
    """Best of ``restarts`` independent :func:`prune_for_delay` runs.

    Runs are ranked by ``|weights| * |acts|``, then by ``|acts|``, then by
    restart index. Restart ``k`` uses the ``k``-th child of ``SeedSequence(seed)``.
    """
    if restarts < 1:
        raise ConfigError("restarts must be >= 1")
    if threshold < table.psum_bound:
        raise InfeasibleError(
            f"delay threshold {threshold} ps is below the partial-sum adder path {table.psum_bound} ps"
        )
    pw, pa = tuple(protected_weights), tuple(protected_acts)
    seeds = _restart_seeds(seed, restarts)
    if jobs > 1 and restarts > 1:
        with ProcessPoolExecutor(jobs, initializer=_pool_init, initargs=(table, threshold, pw, pa)) as ex:
            runs = list(ex.map(_pool_run, seeds))
    else:
        _pool_init(table, threshold, pw, pa)
        runs = [_pool_run(s) for s in seeds]
        _POOL_STATE.clear()

    best, best_key = None, None
    for k, run in enumerate(runs):
        if run is None:
            continue
        key = (run.objective, len(run.acts), -k)
        if best_key is None or key > best_key:
            best, best_key = run, key
    if best is None:
        raise InfeasibleError(f"all {restarts} restarts infeasible at {threshold} ps")
    return best


# ---------------------------------------------------------------------------
# voltage scaling

# Delay reduction (fraction of the unrestricted maximum delay) -> supply voltage ratio.
DEFAULT_ANCHORS = ((0.0, 1.0), (20 / 180, 0.75 / 0.8), (30 / 180, 0.73 / 0.8), (40 / 180, 0.71 / 0.8))


@dataclass(frozen=True)
class VoltageModel:
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    dynamic_exponent: float = 2.0
    leakage_exponent: float = 1.0

    def __post_init__(self):
        xs = [a[0] for a in self.anchors]
        ys = [a[1] for a in self.anchors]
        if xs[0] != 0.0 or ys[0] != 1.0:
            raise ConfigError("voltage model must start at (0, 1.0)")
        if any(b <= a for a, b in zip(xs, xs[1:])) or any(b > a for a, b in zip(ys, ys[1:])):
            raise ConfigError("voltage anchors must have increasing reduction and non-increasing ratio")

    def to_json(self) -> dict:
        return {
            "anchors": [list(a) for a in self.anchors],
            "dynamic_exponent": self.dynamic_exponent,
            "leakage_exponent": self.leakage_exponent,
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "VoltageModel":
        return cls(tuple(tuple(a) for a in d["anchors"]), d.get("dynamic_exponent", 2.0), d.get("leakage_exponent", 1.0))


def voltage_factor(model: VoltageModel, delay_reduction: float, extrapolate: bool = False) -> float:
    """Supply-voltage ratio for a fractional max-delay reduction, piecewise linear in the anchors."""
    xs = np.array([a[0] for a in model.anchors])
    ys = np.array([a[1] for a in model.anchors])
    if delay_reduction < 0:
        raise ConfigError(f"delay reduction must be >= 0, got {delay_reduction}")
    if delay_reduction > xs[-1]:
        if not extrapolate:
            raise ConfigError(
                f"delay reduction {delay_reduction:.4f} beyond last anchor {xs[-1]:.4f}; pass extrapolate=True"
            )
        slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        return float(ys[-1] + slope * (delay_reduction - xs[-1]))
    return float(np.interp(delay_reduction, xs, ys))


def scale_power(estimate, ratio: float, model: VoltageModel = VoltageModel()):
    """Scale dynamic power by ``ratio**dynamic_exponent`` and leakage by ``ratio**leakage_exponent``."""
    if not 0 < ratio <= 1:
        raise ConfigError(f"voltage ratio must be in (0, 1], got {ratio}")
    dyn = estimate.dynamic * ratio**model.dynamic_exponent
    leak = estimate.leakage * ratio**model.leakage_exponent
    return replace(estimate, dynamic=dyn, leakage=leak, total=dyn + leak)

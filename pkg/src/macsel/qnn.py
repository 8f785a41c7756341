"""Quantization-aware training of a small MLP restricted to selected weight/activation codes.

Forward pass (per dense layer): weights are quantized symmetrically to codes
in -127..127 (scale ``max|w| / 127``), optionally magnitude-pruned, and
projected onto the allowed weight codes; the integer matmul plus an
accumulator-domain bias gives the pre-activation; hidden layers rectify,
requantize to 0..255 with a running-max scale and project onto the allowed
activation codes. The last layer emits raw scores.

Backward pass treats quantize-and-project as the identity (straight-through
estimator): gradients land on the latent float weights, which persist between
steps.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import ConfigError, InfeasibleError, ScheduleError, TrainingError
from .select import ALL_ACTS, ALL_WEIGHTS, DelayTable, Selection, select_for_delay, select_weights_by_power

log = logging.getLogger(__name__)

WMAX = 127
AMAX = 255


def project_to_set(v, allowed) -> np.ndarray | int:
    """Nearest allowed value; ties go to the smaller magnitude, then to the negative one."""
    allowed = np.asarray(allowed, dtype=np.int64)
    if allowed.size == 0:
        raise ConfigError("cannot project onto an empty set")
    allowed = np.unique(allowed)
    scalar = np.ndim(v) == 0
    v = np.asarray(v, dtype=np.int64)
    hi_i = np.clip(np.searchsorted(allowed, v), 0, len(allowed) - 1)
    lo_i = np.clip(hi_i - 1, 0, len(allowed) - 1)
    lo, hi = allowed[lo_i], allowed[hi_i]
    dlo, dhi = np.abs(v - lo), np.abs(hi - v)
    pick_lo = (dlo < dhi) | ((dlo == dhi) & ((np.abs(lo) < np.abs(hi)) | ((np.abs(lo) == np.abs(hi)) & (lo <= hi))))
    out = np.where(pick_lo, lo, hi)
    return int(out) if scalar else out


@dataclass
class Layer:
    w: np.ndarray  # latent weights, (in, out)
    b: np.ndarray  # latent bias, (out,)
    act_max: float = 0.0  # running max of the rectified output; unused on the last layer


@dataclass
class QuantizedNet:
    layers: list[Layer]
    input_max: float = 1.0
    prune_threshold: int = 0

    @classmethod
    def init(cls, sizes: Sequence[int], seed: int = 0) -> "QuantizedNet":
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes, sizes[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            layers.append(Layer(w, np.zeros(fan_out)))
        return cls(layers)

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].w.shape[0]] + [l.w.shape[1] for l in self.layers]

    def weight_scale(self, i: int) -> float:
        m = float(np.abs(self.layers[i].w).max())
        return m / WMAX if m > 0 else 1.0

    def input_scale(self, i: int) -> float:
        m = self.input_max if i == 0 else self.layers[i - 1].act_max
        return m / AMAX if m > 0 else 1.0 / AMAX

    def act_scale(self, i: int) -> float:
        m = self.layers[i].act_max
        return m / AMAX if m > 0 else 1.0 / AMAX

    def weight_codes(self, i: int, allowed=ALL_WEIGHTS) -> np.ndarray:
        codes = np.clip(np.rint(self.layers[i].w / self.weight_scale(i)), -WMAX, WMAX).astype(np.int64)
        if self.prune_threshold > 0:
            codes[np.abs(codes) <= self.prune_threshold] = 0
        return project_to_set(codes, allowed)

    def bias_codes(self, i: int) -> np.ndarray:
        return np.rint(self.layers[i].b / (self.weight_scale(i) * self.input_scale(i))).astype(np.int64)

    def integer_layers(self, sel: Selection | None = None) -> list[dict]:
        """Integer view used by the array simulator: weight codes (in, out), bias codes, scales."""
        sel = sel or Selection.full()
        return [
            {
                "weights": self.weight_codes(i, sel.weights),
                "bias": self.bias_codes(i),
                "weight_scale": self.weight_scale(i),
                "input_scale": self.input_scale(i),
                "act_scale": self.act_scale(i),
            }
            for i in range(len(self.layers))
        ]

    def to_json(self, sel: Selection | None = None) -> dict:
        sel = sel or Selection.full()
        return {
            "input_max": self.input_max,
            "prune_threshold": self.prune_threshold,
            "selection": sel.to_json(),
            "layers": [
                {
                    "w": l.w.tolist(),
                    "b": l.b.tolist(),
                    "act_max": l.act_max,
                    "weight_codes": self.weight_codes(i, sel.weights).tolist(),
                    "bias_codes": self.bias_codes(i).tolist(),
                    "weight_scale": self.weight_scale(i),
                    "act_scale": self.act_scale(i),
                }
                for i, l in enumerate(self.layers)
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> tuple["QuantizedNet", Selection]:
        layers = [Layer(np.array(l["w"], dtype=np.float64), np.array(l["b"], dtype=np.float64), l["act_max"]) for l in d["layers"]]
        net = cls(layers, d.get("input_max", 1.0), d.get("prune_threshold", 0))
        return net, Selection.from_json(d["selection"]) if "selection" in d else Selection.full()

    def dumps(self, sel: Selection | None = None) -> str:
        return json.dumps(self.to_json(sel), sort_keys=True)


def quantize_input(net: QuantizedNet, x: np.ndarray, acts=ALL_ACTS) -> np.ndarray:
    codes = np.clip(np.rint(x / net.input_scale(0)), 0, AMAX).astype(np.int64)
    return project_to_set(codes, acts)


def requantize(acc: np.ndarray, weight_scale: float, input_scale: float, act_scale: float, acts=ALL_ACTS) -> np.ndarray:
    """Accumulator -> rectified 8-bit activation code, projected onto ``acts``."""
    z = acc * (weight_scale * input_scale)
    codes = np.clip(np.rint(np.maximum(z, 0.0) / act_scale), 0, AMAX).astype(np.int64)
    return project_to_set(codes, acts)


@dataclass
class Cache:
    inputs: list[np.ndarray] = field(default_factory=list)  # dequantized layer inputs
    pre: list[np.ndarray] = field(default_factory=list)  # real pre-activations
    weights: list[np.ndarray] = field(default_factory=list)  # dequantized weights used
    weight_codes: list[np.ndarray] = field(default_factory=list)
    act_codes: list[np.ndarray] = field(default_factory=list)  # codes entering each layer
    accumulators: list[np.ndarray] = field(default_factory=list)


def forward(net: QuantizedNet, x: np.ndarray, sel: Selection | None = None, train: bool = False,
            momentum: float = 0.9) -> tuple[np.ndarray, Cache]:
    """Class scores for a batch, plus the tensors the backward pass needs.

    With ``train=True`` each hidden layer's running activation max is updated
    from the batch before it is used.
    """
    sel = sel or Selection.full()
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.layers[0].w.shape[0]:
        raise ConfigError(f"batch shape {x.shape} does not match input width {net.layers[0].w.shape[0]}")
    cache = Cache()
    codes = quantize_input(net, x, sel.acts)
    scores = None
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        s_in, s_w = net.input_scale(i), net.weight_scale(i)
        wc = net.weight_codes(i, sel.weights)
        # float64 matmul of integer-valued operands is exact well past 784*255*127
        acc = codes.astype(np.float64) @ wc.astype(np.float64) + net.bias_codes(i)
        z = acc * (s_w * s_in)
        cache.inputs.append(codes * s_in)
        cache.act_codes.append(codes)
        cache.weights.append(wc * s_w)
        cache.weight_codes.append(wc)
        cache.accumulators.append(acc.astype(np.int64))
        cache.pre.append(z)
        if i == last:
            scores = z
            break
        if train:
            batch_max = float(np.maximum(z, 0).max())
            layer.act_max = batch_max if layer.act_max == 0 else momentum * layer.act_max + (1 - momentum) * batch_max
        codes = requantize(acc, s_w, s_in, net.act_scale(i), sel.acts)
    return scores, cache


def cross_entropy(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the scores."""
    z = scores - scores.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = float(-np.log(p[np.arange(n), labels] + 1e-300).mean())
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def backward(cache: Cache, dscores: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Straight-through gradients ``(dW, db)`` per layer w.r.t. the latent parameters."""
    grads = []
    dz = dscores
    for i in range(len(cache.pre) - 1, -1, -1):
        grads.append((cache.inputs[i].T @ dz, dz.sum(axis=0)))
        if i:
            dz = (dz @ cache.weights[i].T) * (cache.pre[i - 1] > 0)
    return grads[::-1]


def loss_and_grads(net: QuantizedNet, x, y, sel: Selection | None = None):
    scores, cache = forward(net, x, sel)
    loss, d = cross_entropy(scores, np.asarray(y))
    return loss, backward(cache, d)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    retrain_epochs: int = 3
    power_start: float = 900.0
    power_step: float = 25.0
    power_floor: float = 0.0
    delay_start: float | None = None  # None: one step below the unrestricted max delay
    delay_step: float = 10.0
    delay_floor: float = 0.0
    power_stop: float = 0.01
    delay_stop: float = 0.05
    restarts: int = 20
    jobs: int = 1

    def __post_init__(self):
        if self.power_step <= 0 or self.delay_step <= 0:
            raise ConfigError("threshold steps must be positive")
        if self.power_start < self.power_floor:
            raise ConfigError("power_start must be >= power_floor")
        if self.delay_start is not None and self.delay_start < self.delay_floor:
            raise ConfigError("delay_start must be >= delay_floor")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("invalid epochs/batch_size/lr")


def evaluate(net: QuantizedNet, data: Dataset, sel: Selection | None = None, batch: int = 4096) -> float:
    """Top-1 accuracy under the restricted forward pass."""
    if len(data) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    hits = 0
    for s in range(0, len(data), batch):
        scores, _ = forward(net, data.features[s : s + batch], sel)
        hits += int((scores.argmax(axis=1) == data.labels[s : s + batch]).sum())
    return hits / len(data)


def train(net: QuantizedNet, data: Dataset, cfg: TrainConfig, sel: Selection | None = None,
          epochs: int | None = None, eval_data: Dataset | None = None) -> tuple[QuantizedNet, list[dict]]:
    """Minibatch Adam on cross-entropy with straight-through gradients. Returns a new net."""
    net = copy.deepcopy(net)
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(cfg.seed)
    params = [p for l in net.layers for p in (l.w, l.b)]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    x, y = data.features, data.labels
    for epoch in range(epochs):
        order = rng.permutation(len(y))
        total = 0.0
        for s in range(0, len(y), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            # the integer path would silently cast NaN/inf latent values, so check them directly
            if not all(np.isfinite(p).all() for p in params):
                raise TrainingError(f"latent parameters became non-finite at epoch {epoch}")
            with np.errstate(invalid="ignore", over="ignore"):
                scores, cache = forward(net, x[idx], sel, train=True)
            loss, d = cross_entropy(scores, y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            total += loss * len(idx)
            grads = [g for pair in backward(cache, d) for g in pair]
            step += 1
            for p, g, mi, vi in zip(params, grads, m, v):
                mi *= b1
                mi += (1 - b1) * g
                vi *= b2
                vi += (1 - b2) * g * g
                p -= cfg.lr * (mi / (1 - b1**step)) / (np.sqrt(vi / (1 - b2**step)) + eps)
        rec = {"epoch": epoch, "loss": total / max(len(y), 1)}
        if eval_data is not None:
            rec["accuracy"] = evaluate(net, eval_data, sel)
        history.append(rec)
        log.debug("epoch %d loss %.4f", epoch, rec["loss"])
    return net, history


@dataclass
class SchedulePoint:
    phase: str
    threshold: float
    n_weights: int
    n_acts: int
    accuracy: float
    selection: Selection = field(repr=False)
    net: QuantizedNet = field(repr=False)
    passed: bool = True


def _drop(baseline: float, acc: float) -> float:
    return (baseline - acc) / baseline if baseline > 0 else 0.0


def _thresholds(start: float, step: float, floor: float):
    k = 0
    while start - k * step >= floor - 1e-9:
        yield round(start - k * step, 9)
        k += 1


def schedule_power_thresholds(
    net: QuantizedNet,
    data: Dataset,
    cfg: TrainConfig,
    profile,
    baseline: float,
    retrain: Callable | None = None,
    score: Callable | None = None,
) -> tuple[float, Selection, QuantizedNet, list[SchedulePoint]]:
    """Lower the power threshold step by step, retraining at each point, until accuracy drops.

    Stops at the first point whose relative drop from ``baseline`` exceeds
    ``cfg.power_stop`` and returns the last passing point. ``retrain`` and
    ``score`` default to :func:`train` and test-split :func:`evaluate`.
    """
    retrain = retrain or (lambda n, sel: train(n, data.train, cfg, sel, epochs=cfg.retrain_epochs)[0])
    score = score or (lambda n, sel: evaluate(n, data.test, sel))
    points: list[SchedulePoint] = []
    best = None
    prev_weights = None
    current = net
    for thr in _thresholds(cfg.power_start, cfg.power_step, cfg.power_floor):
        try:
            weights = select_weights_by_power(profile, thr)
        except InfeasibleError:
            break
        sel = Selection(weights, ALL_ACTS, power_threshold=thr)
        if prev_weights is not None and np.array_equal(weights, prev_weights):
            # same value set as the previous point: no retraining needed
            if best is not None:
                best = replace(best, threshold=thr, selection=sel)
            continue
        prev_weights = weights
        candidate = retrain(current, sel)
        acc = score(candidate, sel)
        ok = _drop(baseline, acc) <= cfg.power_stop
        points.append(SchedulePoint("power", thr, len(weights), len(ALL_ACTS), acc, sel, candidate, ok))
        log.info("power %.1f uW: %d weights, accuracy %.4f%s", thr, len(weights), acc, "" if ok else " (stop)")
        if not ok:
            break
        best = points[-1]
        current = candidate
    if best is None:
        raise ScheduleError(f"accuracy already drops more than {cfg.power_stop:.1%} at the first power threshold")
    return best.threshold, best.selection, best.net, points


def schedule_delay_thresholds(
    net: QuantizedNet,
    data: Dataset,
    cfg: TrainConfig,
    table: DelayTable,
    baseline: float,
    power_threshold: float | None = None,
    retrain: Callable | None = None,
    score: Callable | None = None,
) -> tuple[float | None, Selection, QuantizedNet, list[SchedulePoint]]:
    """Lower the delay threshold by ``cfg.delay_step`` per point with value selection and retraining.

    ``table`` holds the weights that survived the power phase. The schedule
    ends when the relative accuracy drop exceeds ``cfg.delay_stop`` or the
    threshold becomes infeasible; the lowest passing threshold wins. With no
    passing point the input net is returned with threshold None.
    """
    retrain = retrain or (lambda n, sel: train(n, data.train, cfg, sel, epochs=cfg.retrain_epochs)[0])
    score = score or (lambda n, sel: evaluate(n, data.test, sel))
    start = cfg.delay_start if cfg.delay_start is not None else table.max_delay() - cfg.delay_step
    points: list[SchedulePoint] = []
    best = None
    current = net
    for k, thr in enumerate(_thresholds(start, cfg.delay_step, max(cfg.delay_floor, table.psum_bound))):
        try:
            sel = select_for_delay(table, thr, cfg.restarts, seed=cfg.seed + k, jobs=cfg.jobs)
        except InfeasibleError:
            break
        sel.power_threshold = power_threshold
        candidate = retrain(current, sel)
        acc = score(candidate, sel)
        ok = _drop(baseline, acc) <= cfg.delay_stop
        points.append(SchedulePoint("delay", thr, len(sel.weights), len(sel.acts), acc, sel, candidate, ok))
        log.info("delay %.1f ps: %d weights, %d acts, accuracy %.4f%s", thr, len(sel.weights), len(sel.acts), acc,
                 "" if ok else " (stop)")
        if not ok:
            break
        best = points[-1]
        current = candidate
    if best is None:
        full = Selection(table.weights, ALL_ACTS, power_threshold=power_threshold)
        return None, full, net, points
    return best.threshold, best.selection, best.net, points


def config_json(cfg: TrainConfig) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)

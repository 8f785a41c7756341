"""Weight-stationary systolic-array execution of quantized dense layers, and array power.

A layer ``x @ W`` (``W`` of shape ``(in, out)``) is cut into tiles of
``rows x cols``: tile rows take input features, tile columns take output
features, and PE ``(r, c)`` holds one weight for the whole tile. Samples
stream through in order. Every PE in row ``r`` sees the same activation
sequence, and PE ``(r, c)`` receives the partial sum of rows ``0..r-1`` from
above, wrapped to ``psum_bits``. Column outputs of successive input tiles are
accumulated outside the array at full width.

Partial-sum values and transitions are kept in bottom-k reservoirs: each item
gets a hash key from ``(seed, global index)`` and the ``cap`` smallest keys
survive. The result does not depend on how the stream is chunked.
"""
from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, MappingError, ProfileError
from .netlist import PRODUCT_BITS
from .qnn import QuantizedNet, quantize_input, requantize
from .select import Selection

def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 8
    cols: int = 8
    psum_bits: int = 22
    clock_period: float = 200.0  # ps
    max_tiles: int = 1 << 20

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError("array needs at least one row and column")
        need = PRODUCT_BITS + math.ceil(math.log2(self.rows)) if self.rows > 1 else PRODUCT_BITS
        if self.psum_bits < need:
            raise ConfigError(f"psum_bits={self.psum_bits} too narrow for {self.rows} rows (need {need})")


class Reservoir:
    """Bottom-k sample of a stream of integer records keyed by a seeded hash of their index."""

    def __init__(self, cap: int, seed: int, width: int = 1):
        self.cap = cap
        self.width = width
        self._salt = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
        self._keys = [np.empty(0, dtype=np.uint64)]
        self._items = [np.empty((0, width), dtype=np.int64)]
        self._size = 0
        self._cut = None  # largest kept key once the reservoir is full

    def offer(self, first_index: int, items: np.ndarray) -> None:
        items = items.reshape(len(items), self.width)
        idx = np.arange(first_index, first_index + len(items), dtype=np.uint64)
        keys = _splitmix64(idx ^ self._salt)
        if self._cut is not None:
            keep = keys < self._cut
            keys, items = keys[keep], items[keep]
        self._keys.append(keys)
        self._items.append(items)
        self._size += len(keys)
        if self._size > 2 * self.cap:
            self._compact()

    def merge(self, other: "Reservoir") -> None:
        other._compact()
        self._keys.extend(other._keys)
        self._items.extend(other._items)
        self._size += other._size
        self._compact()

    def _compact(self) -> None:
        keys = np.concatenate(self._keys)
        items = np.concatenate(self._items)
        if len(keys) > self.cap:
            part = np.argpartition(keys, self.cap - 1)[: self.cap]
            keys, items = keys[part], items[part]
            self._cut = keys.max()
        self._keys, self._items, self._size = [keys], [items], len(keys)

    def values(self) -> np.ndarray:
        self._compact()
        order = np.argsort(self._keys[0], kind="stable")
        return self._items[0][order]


@dataclass
class Tile:
    layer: int
    row0: int  # first input feature
    col0: int  # first output feature
    weights: np.ndarray  # (mapped rows, mapped cols) weight codes
    cycles: int


@dataclass
class WorkloadStats:
    act_transition_counts: np.ndarray  # (256, 256) int64, [from, to]
    psum_values: np.ndarray  # reservoir of partial-sum inputs, unsigned psum_bits patterns
    psum_transitions: np.ndarray  # reservoir of (from, to) pairs
    tiles: list[Tile]
    rows: int
    cols: int
    psum_bits: int = 22
    caps: tuple[int, int] = (1 << 20, 1 << 20)

    @property
    def occupancy(self) -> np.ndarray:
        c = np.array([t.cycles for t in self.tiles], dtype=np.float64)
        return c / c.sum() if c.sum() else c

    @property
    def zero_weight_fraction(self) -> float:
        n = sum(t.weights.size for t in self.tiles)
        z = sum(int((t.weights == 0).sum()) for t in self.tiles)
        return z / n if n else 0.0

    def to_json(self) -> dict:
        counts = np.ascontiguousarray(self.act_transition_counts, dtype="<i8")
        return {
            "rows": self.rows,
            "cols": self.cols,
            "psum_bits": self.psum_bits,
            "caps": list(self.caps),
            "act_transition_counts": {
                "encoding": "base64-int64-le",
                "shape": list(counts.shape),
                "data": base64.b64encode(counts.tobytes()).decode("ascii"),
            },
            "psum_values": self.psum_values.tolist(),
            "psum_transitions": self.psum_transitions.tolist(),
            "zero_weight_fraction": self.zero_weight_fraction,
            "tiles": [
                {"layer": t.layer, "row0": t.row0, "col0": t.col0, "cycles": t.cycles, "weights": t.weights.tolist()}
                for t in self.tiles
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "WorkloadStats":
        c = d["act_transition_counts"]
        counts = np.frombuffer(base64.b64decode(c["data"]), dtype="<i8").reshape(c["shape"]).astype(np.int64)
        tiles = [Tile(t["layer"], t["row0"], t["col0"], np.array(t["weights"], dtype=np.int64).reshape(len(t["weights"]), -1), t["cycles"]) for t in d["tiles"]]
        return cls(
            act_transition_counts=counts,
            psum_values=np.array(d["psum_values"], dtype=np.int64),
            psum_transitions=np.array(d["psum_transitions"], dtype=np.int64).reshape(-1, 2),
            tiles=tiles,
            rows=d["rows"],
            cols=d["cols"],
            psum_bits=d.get("psum_bits", 22),
            caps=tuple(d.get("caps", (1 << 20, 1 << 20))),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def systolic_matmul(x: np.ndarray, w: np.ndarray, cfg: ArrayConfig, layer: int = 0, collector=None) -> np.ndarray:
    """``x @ w`` for integer codes on the array, tile by tile.

    ``x`` is ``(samples, in)`` activation codes, ``w`` is ``(in, out)`` weight
    codes. ``collector`` (a :class:`_Collector`) receives per-tile statistics.
    """
    n, d_in = x.shape
    d_out = w.shape[1]
    n_tiles = math.ceil(d_in / cfg.rows) * math.ceil(d_out / cfg.cols)
    if n_tiles > cfg.max_tiles:
        raise MappingError(f"layer {layer} ({d_in}x{d_out}) needs {n_tiles} tiles, limit is {cfg.max_tiles}")
    mod = 1 << cfg.psum_bits
    out = np.zeros((n, d_out), dtype=np.int64)
    for r0 in range(0, d_in, cfg.rows):
        xs = x[:, r0 : r0 + cfg.rows]
        for c0 in range(0, d_out, cfg.cols):
            wt = w[r0 : r0 + cfg.rows, c0 : c0 + cfg.cols]
            prod = xs[:, :, None] * wt[None, :, :]  # (n, R, C)
            inclusive = np.cumsum(prod, axis=1)
            psum_in = (inclusive - prod) % mod  # what each PE receives from above
            col = inclusive[:, -1, :] % mod
            out[:, c0 : c0 + wt.shape[1]] += col - ((col >> (cfg.psum_bits - 1)) << cfg.psum_bits)
            if collector is not None:
                collector.add_tile(layer, r0, c0, xs, wt, psum_in)
    return out


class _Collector:
    def __init__(self, cfg: ArrayConfig, seed: int, value_cap: int, transition_cap: int):
        self.cfg = cfg
        self.counts = np.zeros(256 * 256, dtype=np.int64)
        self.values = Reservoir(value_cap, seed, 1)
        self.pairs = Reservoir(transition_cap, seed + 1, 2)
        self.tiles: list[Tile] = []
        self.n_values = 0
        self.n_pairs = 0

    def add_tile(self, layer, r0, c0, xs, wt, psum_in):
        n, rows = xs.shape
        cols = wt.shape[1]
        if n >= 2:
            codes = xs[:-1] * 256 + xs[1:]  # (n-1, R): one transition per row, seen by every mapped PE
            self.counts += np.bincount(codes.reshape(-1), minlength=256 * 256) * cols
        # order items PE-major so the global index is fixed by (tile, pe, sample)
        per_pe = psum_in.transpose(1, 2, 0).reshape(rows * cols, n)
        self.values.offer(self.n_values, per_pe.reshape(-1))
        self.n_values += per_pe.size
        if n >= 2:
            pairs = np.stack([per_pe[:, :-1], per_pe[:, 1:]], axis=-1).reshape(-1, 2)
            self.pairs.offer(self.n_pairs, pairs)
            self.n_pairs += len(pairs)
        # pipeline fill and drain add rows + cols - 2 cycles to the n streamed samples
        self.tiles.append(Tile(layer, r0, c0, wt.copy(), n + self.cfg.rows + self.cfg.cols - 2))

    def stats(self) -> WorkloadStats:
        return WorkloadStats(
            act_transition_counts=self.counts.reshape(256, 256),
            psum_values=self.values.values().reshape(-1),
            psum_transitions=self.pairs.values(),
            tiles=self.tiles,
            rows=self.cfg.rows,
            cols=self.cfg.cols,
            psum_bits=self.cfg.psum_bits,
            caps=(self.values.cap, self.pairs.cap),
        )


def run_systolic(
    net: QuantizedNet,
    features: np.ndarray,
    cfg: ArrayConfig = ArrayConfig(),
    sel: Selection | None = None,
    seed: int = 0,
    value_cap: int = 1 << 20,
    transition_cap: int = 1 << 20,
) -> tuple[np.ndarray, WorkloadStats]:
    """Run the quantized net on the array. Returns final-layer accumulators and workload statistics.

    Hidden activations are requantized between layers exactly as in
    :func:`macsel.qnn.forward`, so the returned accumulators equal that
    pass's integer accumulators.
    """
    sel = sel or Selection.full()
    collector = _Collector(cfg, seed, value_cap, transition_cap)
    codes = quantize_input(net, np.asarray(features, dtype=np.float64), sel.acts)
    layers = net.integer_layers(sel)
    acc = None
    for i, p in enumerate(layers):
        acc = systolic_matmul(codes, p["weights"], cfg, layer=i, collector=collector) + p["bias"]
        if i < len(layers) - 1:
            codes = requantize(acc, p["weight_scale"], p["input_scale"], p["act_scale"], sel.acts)
    return acc, collector.stats()


@dataclass
class PowerEstimate:
    dynamic: float  # µW
    leakage: float  # µW
    total: float  # µW
    hw_mode: str
    per_tile: list[dict] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"dynamic_uW": self.dynamic, "leakage_uW": self.leakage, "total_uW": self.total, "hw_mode": self.hw_mode}


def estimate_array_power(stats: WorkloadStats, profile, leakage_per_mac: float | None = None,
                         mode: str = "standard") -> PowerEstimate:
    """Occupancy-weighted average array power.

    ``standard``: every mapped PE burns its weight's dynamic power, and all
    ``rows * cols`` PEs leak. ``optimized``: zero-weight PEs are clock gated
    (leakage only) and columns without any mapped PE are power gated.
    ``profile`` is a PowerProfile or a ``{weight: µW}`` mapping; the per-MAC
    leakage defaults to the profile's.
    """
    if mode not in ("standard", "optimized"):
        raise ConfigError(f"unknown hardware mode {mode!r}")
    powers = getattr(profile, "powers", profile)
    leak = getattr(profile, "leakage", None) if leakage_per_mac is None else leakage_per_mac
    if leak is None:
        raise ConfigError("per-MAC leakage not given and not in the profile")
    lut = np.full(255, np.nan)
    for w, p in powers.items():
        if -127 <= int(w) <= 127:
            lut[int(w) + 127] = p
    occ = stats.occupancy
    dyn = lk = 0.0
    per_tile = []
    for t, o in zip(stats.tiles, occ):
        p = lut[t.weights + 127]
        if np.isnan(p).any():
            missing = sorted(set(t.weights[np.isnan(p)].tolist()))
            raise ProfileError(f"power profile has no entry for weight(s) {missing[:8]}")
        if mode == "standard":
            td = float(p.sum())
            tl = stats.rows * stats.cols * leak
        else:
            td = float(p[t.weights != 0].sum())
            tl = stats.rows * t.weights.shape[1] * leak  # every tile column holds at least one weight
        dyn += o * td
        lk += o * tl
        per_tile.append({"layer": t.layer, "row0": t.row0, "col0": t.col0, "dynamic_uW": td, "leakage_uW": tl})
    return PowerEstimate(dynamic=dyn, leakage=lk, total=dyn + lk, hw_mode=mode, per_tile=per_tile)

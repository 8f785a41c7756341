"""Transition distributions, partial-sum bins, and per-weight power/delay profiles.

The flow:

1. :func:`build_act_dist` normalizes the 256x256 activation transition counts
   of a workload.
2. :func:`build_bins` partitions sampled 22-bit partial sums into ``K`` bins by
   mean Hamming distance; :func:`build_bin_dist` turns sampled partial-sum
   transitions into a ``K x K`` bin transition matrix.
3. :func:`sample_combined` draws ``(a1, p1) -> (a2, p2)`` MAC stimuli from the
   two distributions (independently).
4. :func:`power_profile_all` simulates the MAC for every weight on one shared
   stimulus list; :func:`delay_profile` enumerates all 65,536 activation
   transitions on the multiplier for one weight.
"""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .engine import WaveformSimulator, adder_bounds
from .errors import EmptyWorkloadError, ParseError, PartitionError, ProfileError
from .netlist import PSUM_BITS, CellLibrary, Netlist, gen_adder, gen_multiplier

log = logging.getLogger(__name__)

ALL_WEIGHTS = tuple(range(-127, 128))


# ---------------------------------------------------------------------------
# activation transitions


@dataclass
class ActDist:
    probs: np.ndarray  # (256, 256), [a_from, a_to]

    def band_mass(self, width: int = 16) -> float:
        """Probability that ``|a_to - a_from| <= width``."""
        i, j = np.indices(self.probs.shape)
        return float(self.probs[np.abs(i - j) <= width].sum())


def uniform_band_mass(width: int = 16, levels: int = 256) -> float:
    i, j = np.indices((levels, levels))
    return float((np.abs(i - j) <= width).mean())


def build_act_dist(stats_or_counts) -> ActDist:
    """Normalize activation transition counts (a WorkloadStats or a 256x256 array)."""
    counts = np.asarray(getattr(stats_or_counts, "act_transition_counts", stats_or_counts), dtype=np.float64)
    total = counts.sum()
    if not total > 0:
        raise EmptyWorkloadError("workload recorded no activation transitions")
    return ActDist(counts / total)


# ---------------------------------------------------------------------------
# partial-sum bins


def _bits(values: np.ndarray, width: int = PSUM_BITS) -> np.ndarray:
    v = np.asarray(values, dtype=np.int64)
    return ((v[..., None] >> np.arange(width)) & 1).astype(np.int64)


@dataclass
class BinPartition:
    """``K`` bins of partial-sum values.

    ``members[k]`` holds at most ``cap`` stored values of bin ``k``.
    ``values``/``labels`` record the build-time bin of every distinct sample,
    including values that fell out of a capped member list.
    """

    members: list[np.ndarray]
    seed: int
    cap: int = 4096
    values: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64), repr=False)
    width: int = PSUM_BITS

    def __post_init__(self):
        self.members = [np.asarray(m, dtype=np.int64) for m in self.members]
        if not self.members:
            raise PartitionError("a bin partition needs at least one bin")
        order = np.argsort(self.values, kind="stable")
        self.values = np.asarray(self.values, dtype=np.int64)[order]
        self.labels = np.asarray(self.labels, dtype=np.int64)[order]
        ones = [_bits(m, self.width).sum(axis=0) if len(m) else np.zeros(self.width, dtype=np.int64) for m in self.members]
        self._ones = np.array(ones, dtype=np.int64)  # (K, width)
        self._m = np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def K(self) -> int:
        return len(self.members)

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "cap": self.cap,
            "width": self.width,
            "members": [m.tolist() for m in self.members],
            "values": self.values.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "BinPartition":
        return cls(d["members"], d["seed"], d.get("cap", 4096), d.get("values", []), d.get("labels", []), d.get("width", PSUM_BITS))


class _BinBuilder:
    """Incremental per-bin bit counts with an Algorithm-R capped member list."""

    def __init__(self, K: int, cap: int, width: int, rng: np.random.Generator):
        self.cap, self.width, self.rng = cap, width, rng
        self.members = [[] for _ in range(K)]
        self.seen = np.zeros(K, dtype=np.int64)
        self.m = np.zeros(K, dtype=np.int64)
        self.ones = np.zeros((K, width), dtype=np.int64)
        self.pop = np.zeros(K, dtype=np.int64)  # sum of member popcounts

    def add(self, k: int, v: int, vb: np.ndarray) -> None:
        self.seen[k] += 1
        if self.m[k] < self.cap:
            self.members[k].append(v)
            self.m[k] += 1
        else:
            j = int(self.rng.integers(self.seen[k]))
            if j >= self.cap:
                return
            old = self.members[k][j]
            ob = (old >> np.arange(self.width)) & 1
            self.ones[k] -= ob
            self.pop[k] -= int(ob.sum())
            self.members[k][j] = v
        self.ones[k] += vb
        self.pop[k] += int(vb.sum())

    def nearest(self, vb: np.ndarray) -> tuple[int, float]:
        dist = (self.pop + self.m * int(vb.sum()) - 2 * (self.ones @ vb)) / self.m
        k = int(np.argmin(dist))
        return k, float(dist[k])


def build_bins(samples, K: int = 50, seed: int = 0, cap: int = 4096, seeds: Sequence[int] | None = None,
               width: int = PSUM_BITS) -> BinPartition:
    """Partition the distinct values of ``samples`` into ``K`` bins.

    ``K`` seed values are drawn at random (or given via ``seeds``), one per bin.
    The other distinct values are visited in a seeded random order and each
    joins the bin whose current members have the lowest mean Hamming
    distance to it; ties go to the lowest bin index.
    """
    distinct = np.unique(np.asarray(samples, dtype=np.int64))
    if K < 1:
        raise PartitionError(f"bin count must be >= 1, got {K}")
    if len(distinct) < K:
        raise PartitionError(f"{len(distinct)} distinct partial-sum samples, need at least K={K}")
    rng = np.random.default_rng(seed)
    if seeds is None:
        seed_vals = rng.choice(distinct, size=K, replace=False)
    else:
        seed_vals = np.asarray(seeds, dtype=np.int64)
        if len(seed_vals) != K or len(np.unique(seed_vals)) != K:
            raise PartitionError(f"need {K} distinct seed values, got {list(seed_vals)}")
    rest = np.setdiff1d(distinct, seed_vals)
    rest = rest[rng.permutation(len(rest))]

    b = _BinBuilder(K, cap, width, rng)
    shifts = np.arange(width)
    for k, v in enumerate(seed_vals):
        b.add(k, int(v), (int(v) >> shifts) & 1)
    labels = np.empty(len(rest), dtype=np.int64)
    for i, v in enumerate(rest.tolist()):
        vb = (v >> shifts) & 1
        k, _ = b.nearest(vb)
        b.add(k, v, vb)
        labels[i] = k
    return BinPartition(
        [np.array(m, dtype=np.int64) for m in b.members],
        seed,
        cap,
        np.concatenate([seed_vals, rest]),
        np.concatenate([np.arange(K), labels]),
        width,
    )


def assign_bins(p: BinPartition, values) -> np.ndarray:
    """Vectorized :func:`assign_bin`."""
    v = np.atleast_1d(np.asarray(values, dtype=np.int64))
    out = np.empty(v.shape, dtype=np.int64)
    known = np.zeros(v.shape, dtype=bool)
    if len(p.values):
        pos = np.clip(np.searchsorted(p.values, v), 0, len(p.values) - 1)
        known = p.values[pos] == v
        out[known] = p.labels[pos[known]]
    if (~known).any():
        u = v[~known]
        vb = _bits(u, p.width)  # (n, width)
        pop = p._ones.sum(axis=1)
        m = p._m
        with np.errstate(divide="ignore", invalid="ignore"):
            num = pop[None, :] + m[None, :] * vb.sum(axis=1)[:, None] - 2 * (vb @ p._ones.T)
            dist = np.where(m[None, :] > 0, num / np.maximum(m, 1)[None, :], np.inf)
        out[~known] = np.argmin(dist, axis=1)
    return out


def assign_bin(p: BinPartition, v: int) -> int:
    """Bin of ``v``: its recorded bin if it was part of the build, else the bin with
    the lowest mean Hamming distance to its stored members (ties → lowest index)."""
    return int(assign_bins(p, [v])[0])


@dataclass
class BinDist:
    probs: np.ndarray  # (K, K), [bin_from, bin_to]


def build_bin_dist(stats_or_pairs, p: BinPartition) -> BinDist:
    """Bin transition probabilities from sampled partial-sum transitions."""
    pairs = np.asarray(getattr(stats_or_pairs, "psum_transitions", stats_or_pairs), dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise EmptyWorkloadError("no partial-sum transitions sampled")
    b = assign_bins(p, pairs.reshape(-1)).reshape(-1, 2)
    counts = np.bincount(b[:, 0] * p.K + b[:, 1], minlength=p.K * p.K).reshape(p.K, p.K)
    return BinDist(counts / counts.sum())


# ---------------------------------------------------------------------------
# combined stimuli


@dataclass
class CombinedSamples:
    """MAC stimuli ``(a1, p1) -> (a2, p2)``; partial sums are unsigned bit patterns."""

    a1: np.ndarray
    a2: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.a1)

    def __iter__(self) -> Iterator[tuple[tuple[int, int], tuple[int, int]]]:
        for a1, p1, a2, p2 in zip(self.a1.tolist(), self.p1.tolist(), self.a2.tolist(), self.p2.tolist()):
            yield (a1, p1), (a2, p2)

    @classmethod
    def from_pairs(cls, items: Iterable) -> "CombinedSamples":
        rows = np.array([[a1, p1, a2, p2] for (a1, p1), (a2, p2) in items], dtype=np.int64).reshape(-1, 4)
        return cls(rows[:, 0], rows[:, 2], rows[:, 1], rows[:, 3])


def sample_combined(ad: ActDist, bd: BinDist, p: BinPartition, n: int = 10000, seed: int = 0) -> CombinedSamples:
    """Draw ``n`` stimuli; activation and bin transitions are independent draws,
    and concrete partial sums are uniform picks from the bins' member lists."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    pa = ad.probs.reshape(-1)
    pb = bd.probs.reshape(-1)
    act = rng.choice(pa.size, size=n, p=pa / pa.sum())
    bins = rng.choice(pb.size, size=n, p=pb / pb.sum())
    b1, b2 = bins // p.K, bins % p.K

    def pick(b):
        out = np.empty(n, dtype=np.int64)
        for k in np.unique(b):
            idx = np.flatnonzero(b == k)
            m = p.members[k]
            if len(m) == 0:
                raise PartitionError(f"bin {k} has no members to sample from")
            out[idx] = m[rng.integers(len(m), size=len(idx))]
        return out

    p1 = pick(b1)
    p2 = pick(b2)
    return CombinedSamples(act // 256, act % 256, p1, p2, seed)


# ---------------------------------------------------------------------------
# power profile


@dataclass
class PowerProfile:
    powers: dict[int, float]  # weight -> average dynamic power, µW
    leakage: float  # per-MAC leakage, µW
    n_samples: int = 0
    seed: int | None = None

    @property
    def weights(self) -> np.ndarray:
        return np.array(sorted(self.powers), dtype=np.int64)

    def __getitem__(self, w: int) -> float:
        return self.powers[int(w)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["weight", "power_uW"])
            for w in sorted(self.powers):
                wr.writerow([w, f"{self.powers[w]:.6f}"])

    def to_json(self) -> dict:
        return {
            "leakage_uW": self.leakage,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "powers_uW": {str(w): self.powers[w] for w in sorted(self.powers)},
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "PowerProfile":
        return cls({int(w): float(p) for w, p in d["powers_uW"].items()}, float(d["leakage_uW"]), d.get("n_samples", 0), d.get("seed"))

    @classmethod
    def from_csv(cls, path, leakage: float = 0.0) -> "PowerProfile":
        powers = {}
        with open(path, newline="") as fh:
            rd = csv.reader(fh)
            header = next(rd, None)
            if header != ["weight", "power_uW"]:
                raise ParseError(f"{path}: line 1: expected header weight,power_uW, got {header}")
            for lineno, row in enumerate(rd, start=2):
                try:
                    powers[int(row[0])] = float(row[1])
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"{path}: line {lineno}: {exc}") from None
        return cls(powers, leakage)


def mac_leakage(mac: Netlist, lib: CellLibrary) -> float:
    """Sum of gate leakage, µW (the library gives nW)."""
    return sum(lib.leakage(g.kind) for g in mac.gates) / 1000.0


_WORKER: dict = {}


def _init_power_worker(mac, lib, samples, chunk):
    _WORKER.clear()
    _WORKER.update(sim=WaveformSimulator(mac, lib), samples=samples, chunk=chunk, clock=lib.clock_period)


def _power_one(w: int) -> float:
    sim, s, chunk = _WORKER["sim"], _WORKER["samples"], _WORKER["chunk"]
    # integer toggle counts summed over chunks keep the result independent of chunking
    toggles = np.zeros(sim.netlist.n_nets, dtype=np.int64)
    for lo in range(0, len(s), chunk):
        hi = lo + chunk
        v1 = {"weight": w, "activation": s.a1[lo:hi], "partial_sum": s.p1[lo:hi]}
        v2 = {"weight": w, "activation": s.a2[lo:hi], "partial_sum": s.p2[lo:hi]}
        toggles += sim.run(v1, v2).toggles
    outs = np.array([g.output for g in sim.netlist.gates], dtype=np.int64)
    energy = float(np.dot(toggles[outs], sim.energies))
    # fJ / ps = mW
    return energy / (len(s) * _WORKER["clock"]) * 1000.0


def _pool_map(fn, items, jobs, initializer, initargs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs, initializer=initializer, initargs=initargs) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))
    initializer(*initargs)
    try:
        return [fn(x) for x in items]
    finally:
        _WORKER.clear()


def power_profile_all(mac: Netlist, lib: CellLibrary, samples: CombinedSamples,
                      weights: Sequence[int] = ALL_WEIGHTS, jobs: int = 1, chunk: int = 8192) -> PowerProfile:
    """Average dynamic power of the MAC per weight over one shared stimulus list.

    The weight input holds the same value in both vectors of every transition.
    """
    if len(samples) == 0:
        raise EmptyWorkloadError("power characterization needs at least one stimulus")
    weights = [int(w) for w in weights]
    powers = _pool_map(_power_one, weights, jobs, _init_power_worker, (mac, lib, samples, chunk))
    return PowerProfile(dict(zip(weights, powers)), mac_leakage(mac, lib), len(samples), samples.seed)


# ---------------------------------------------------------------------------
# delay profile


def _last_set_row(acc: np.ndarray, n: int) -> np.ndarray:
    """Per sample, the highest row of the packed ``acc`` with its bit set; -1 if none."""
    last = np.full(n, -1, dtype=np.int64)
    for r in range(acc.shape[0] - 1, -1, -1):
        if not acc[r].any():
            continue
        bits = np.unpackbits(acc[r].view(np.uint8), bitorder="little")[:n].astype(bool)
        new = bits & (last < 0)
        last[new] = r
    return last


def _delay_matrix(sim: WaveformSimulator, w: int, bounds: np.ndarray, psum_bound: float) -> np.ndarray:
    n = sim.netlist
    a1 = np.repeat(np.arange(256), 256)
    a2 = np.tile(np.arange(256), 256)
    product = n.outputs["product"]
    tr = sim.run({"weight": w, "activation": a1}, {"weight": w, "activation": a2}, watch=product, count_toggles=False)
    # an event at time t on product bit i reaches the sum at t + bound_i; shift each
    # bit's event rows by its bound and OR them together, then find the last row
    shifts = np.rint(np.asarray(bounds)).astype(np.int64)
    horizon = tr.horizon
    words = next(iter(tr.changes.values())).shape[1]
    acc = np.zeros((horizon + 1 + int(shifts.max()), words), dtype=np.uint64)
    for net, s in zip(product, shifts):
        ch = tr.changes[net]
        ch = ch.copy()
        ch[0] = 0  # time-0 events are input toggles, not product arrivals
        acc[s : s + ch.shape[0]] |= ch
    last = _last_set_row(acc, tr.n_samples)
    delay = np.maximum(last, int(np.ceil(psum_bound)))
    return delay.reshape(256, 256)


def _init_delay_worker(mult, lib, bounds, psum_bound):
    _WORKER.clear()
    _WORKER.update(sim=WaveformSimulator(mult, lib), bounds=bounds, psum_bound=psum_bound)


def _delay_one(w: int) -> np.ndarray:
    return _delay_matrix(_WORKER["sim"], w, _WORKER["bounds"], _WORKER["psum_bound"]).astype(np.uint16)


def delay_profile(mult: Netlist, lib: CellLibrary, bounds: Sequence[float], psum_bound: float, w: int,
                  sim: WaveformSimulator | None = None) -> np.ndarray:
    """Combined MAC delay (ps, integer) for all 65,536 activation transitions of weight ``w``.

    ``[a_from, a_to]`` holds the largest ``t_i + bound_i`` over product bits
    ``i`` whose last event is at ``t_i > 0``, floored at ``psum_bound``.
    """
    sim = sim or WaveformSimulator(mult, lib)
    return _delay_matrix(sim, int(w), np.asarray(bounds), psum_bound)


@dataclass
class DelayProfile:
    weights: np.ndarray  # (n_w,)
    delays: np.ndarray  # (n_w, 256, 256) uint16, [weight, a_from, a_to]
    psum_bound: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int64)
        self._index = {int(w): i for i, w in enumerate(self.weights)}

    def __contains__(self, w) -> bool:
        return int(w) in self._index

    def matrix(self, w: int) -> np.ndarray:
        try:
            return self.delays[self._index[int(w)]]
        except KeyError:
            raise ProfileError(f"delay profile has no weight {w}") from None

    @property
    def global_max(self) -> int:
        return int(self.delays.max()) if self.delays.size else int(self.psum_bound)

    def per_weight_max(self) -> dict[int, int]:
        return {int(w): int(self.delays[i].max()) for i, w in enumerate(self.weights)}

    def histogram_rows(self) -> list[tuple[int, int, int]]:
        rows = []
        for i, w in enumerate(self.weights):
            vals, counts = np.unique(self.delays[i], return_counts=True)
            rows += [(int(w), int(v), int(c)) for v, c in zip(vals, counts)]
        return rows

    def write_histogram(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["weight", "delay_ps", "count"])
            wr.writerows(self.histogram_rows())

    def save(self, path) -> None:
        """Write ``<path>.bin`` (little-endian uint16, weight-major) and ``<path>.json``."""
        path = Path(path)
        path.with_suffix(".bin").write_bytes(np.ascontiguousarray(self.delays, dtype="<u2").tobytes())
        meta = {
            "weights": self.weights.tolist(),
            "shape": list(self.delays.shape),
            "dtype": "uint16-le",
            "index": "[weight, a_from, a_to]",
            "psum_bound_ps": self.psum_bound,
            "global_max_ps": self.global_max,
            "per_weight_max_ps": {str(w): m for w, m in self.per_weight_max().items()},
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DelayProfile":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        raw = path.with_suffix(".bin").read_bytes()
        shape = tuple(meta["shape"])
        if len(raw) != 2 * int(np.prod(shape)):
            raise ParseError(f"{path.with_suffix('.bin')}: expected {2 * int(np.prod(shape))} bytes, found {len(raw)}")
        delays = np.frombuffer(raw, dtype="<u2").reshape(shape).astype(np.uint16)
        return cls(meta["weights"], delays, meta["psum_bound_ps"])


def delay_profile_all(lib: CellLibrary, weights: Sequence[int] = ALL_WEIGHTS, arch: str = "booth",
                      jobs: int = 1) -> DelayProfile:
    """Delay profile of every weight in ``weights`` on the generated multiplier and adder."""
    mult = gen_multiplier(arch)
    bounds, psum_bound = adder_bounds(gen_adder(), lib)
    weights = [int(w) for w in weights]
    mats = _pool_map(_delay_one, weights, jobs, _init_delay_worker, (mult, lib, bounds, psum_bound))
    delays = np.stack(mats) if mats else np.zeros((0, 256, 256), dtype=np.uint16)
    return DelayProfile(np.array(weights), delays, psum_bound)

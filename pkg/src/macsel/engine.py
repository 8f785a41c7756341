"""Logic simulation and timing analysis over :class:`~macsel.netlist.Netlist`.

Two transition simulators share one semantics (transport delay, one delay per
gate, all events at the same instant applied before any gate re-evaluates):

* :func:`simulate_transition` - a scalar event-queue simulator, ordered by
  ``(time, net id)``. Slow, obvious, used as the reference.
* :class:`WaveformSimulator` - a bit-parallel simulator. Every net holds a
  sampled waveform ``(horizon + 2, words)`` of packed ``uint64``; row 0 is the
  value settled under ``v1`` and row ``k + 1`` the value at time ``k``. Under
  transport delay a gate output is its function of the inputs shifted by the
  gate delay, so a whole batch of transitions costs a handful of array ops per
  gate. Delays must be whole picoseconds.
"""
from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, StructuralError
from .netlist import CellLibrary, Netlist

_FUNCS = {
    "INV": lambda a: ~a,
    "BUF": lambda a: a.copy(),
    "AND2": lambda a, b: a & b,
    "OR2": lambda a, b: a | b,
    "NAND2": lambda a, b: ~(a & b),
    "NOR2": lambda a, b: ~(a | b),
    "XOR2": lambda a, b: a ^ b,
    "XNOR2": lambda a, b: ~(a ^ b),
}

_SCALAR = {
    "INV": lambda a: 1 - a,
    "BUF": lambda a: a,
    "AND2": lambda a, b: a & b,
    "OR2": lambda a, b: a | b,
    "NAND2": lambda a, b: 1 - (a & b),
    "NOR2": lambda a, b: 1 - (a | b),
    "XOR2": lambda a, b: a ^ b,
    "XNOR2": lambda a, b: 1 - (a ^ b),
}


def _input_bits(n: Netlist, values: Mapping[str, object]) -> tuple[dict[int, np.ndarray], int]:
    """Expand bus values into one bool array per primary-input net."""
    missing = [name for name in n.inputs if name not in values]
    if missing:
        raise InputError(f"missing input bus(es): {', '.join(missing)}")
    arrays = {name: np.atleast_1d(np.asarray(values[name], dtype=np.int64)) for name in n.inputs}
    size = max(a.size for a in arrays.values())
    bits = {}
    for name, bus in n.inputs.items():
        v = np.broadcast_to(arrays[name], (size,))
        for k, net in enumerate(bus):
            bits[net] = ((v >> k) & 1).astype(bool)
    return bits, size


def _collect(buses: Mapping[str, Sequence[int]], vals: Mapping[int, np.ndarray], scalar: bool) -> dict:
    out = {}
    for name, bus in buses.items():
        acc = np.zeros_like(vals[bus[0]], dtype=np.int64)
        for k, net in enumerate(bus):
            acc |= vals[net].astype(np.int64) << k
        out[name] = int(acc[0]) if scalar else acc
    return out


def settle(n: Netlist, inputs: Mapping[str, object]) -> dict:
    """Zero-delay evaluation. Returns unsigned bit patterns for every output and monitored bus.

    Bus values may be Python ints or integer arrays (evaluated element-wise).
    Negative ints are taken as two's complement of the bus width.
    """
    scalar = all(np.ndim(inputs.get(name, 0)) == 0 for name in n.inputs)
    vals, _ = _input_bits(n, inputs)
    for gi in n.order:
        g = n.gates[gi]
        vals[g.output] = _FUNCS[g.kind](*(vals[i] for i in g.inputs))
    return _collect({**n.outputs, **n.monitored}, vals, scalar)


@dataclass
class TransitionTrace:
    last_event_time: np.ndarray  # per net, ps; 0 if the net never toggled
    event_count: np.ndarray  # per net
    total_switch_energy: float  # fJ
    final: dict = field(default_factory=dict)  # output/monitored bus values after the transition

    def to_json(self) -> dict:
        return {
            "last_event_time": self.last_event_time.tolist(),
            "event_count": self.event_count.tolist(),
            "total_switch_energy": self.total_switch_energy,
            "final": {k: int(v) for k, v in self.final.items()},
        }


def simulate_transition(n: Netlist, lib: CellLibrary, v1: Mapping[str, int], v2: Mapping[str, int]) -> TransitionTrace:
    """Event-driven simulation of one input transition ``v1 -> v2`` applied at t=0."""
    bits1, _ = _input_bits(n, v1)
    bits2, _ = _input_bits(n, v2)
    value = [0] * n.n_nets
    for net, b in bits1.items():
        value[net] = int(b[0])
    for gi in n.order:
        g = n.gates[gi]
        value[g.output] = _SCALAR[g.kind](*(value[i] for i in g.inputs))

    driver = n.driver()
    fanout = n.fanout()
    scheduled = list(value)  # last value scheduled onto each net
    last = np.zeros(n.n_nets)
    count = np.zeros(n.n_nets, dtype=np.int64)
    queue: list[tuple[float, int, int]] = []
    for net, b in bits2.items():
        if int(b[0]) != value[net]:
            heapq.heappush(queue, (0.0, net, int(b[0])))
            scheduled[net] = int(b[0])

    while queue:
        t = queue[0][0]
        touched = set()
        while queue and queue[0][0] == t:
            _, net, v = heapq.heappop(queue)
            value[net] = v
            count[net] += 1
            last[net] = t
            touched.update(fanout[net])
        for gi in sorted(touched):
            g = n.gates[gi]
            new = _SCALAR[g.kind](*(value[i] for i in g.inputs))
            if new != scheduled[g.output]:
                scheduled[g.output] = new
                heapq.heappush(queue, (t + lib.delay(g.kind), g.output, new))

    energy = sum(float(count[g.output]) * lib.energy(g.kind) for gi, g in enumerate(n.gates) if driver[g.output] == gi)
    final = {}
    for name, bus in {**n.outputs, **n.monitored}.items():
        final[name] = sum(value[net] << k for k, net in enumerate(bus))
    return TransitionTrace(last_event_time=last, event_count=count, total_switch_energy=energy, final=final)


# ---------------------------------------------------------------------------
# static timing


@dataclass
class DelayBound:
    """Longest structural path (ps) from every input bit to every output/monitored bit.

    ``matrix[i, j]`` is NaN when no path connects input bit ``i`` to output bit ``j``.
    """

    in_bits: list[tuple[str, int]]
    out_bits: list[tuple[str, int]]
    matrix: np.ndarray
    net_arrival: np.ndarray  # latest arrival at each net from any input, NaN if unreachable

    def get(self, in_name: str, in_bit: int, out_name: str, out_bit: int) -> float | None:
        v = self.matrix[self.in_bits.index((in_name, in_bit)), self.out_bits.index((out_name, out_bit))]
        return None if np.isnan(v) else float(v)

    def _rows(self, name):
        return [i for i, (bus, _) in enumerate(self.in_bits) if bus == name]

    def _cols(self, name):
        return [j for j, (bus, _) in enumerate(self.out_bits) if bus == name]

    def from_bits_to_any(self, in_name: str) -> np.ndarray:
        """Per bit of ``in_name``: the largest bound to any output bit (NaN if none)."""
        sub = self.matrix[self._rows(in_name)]
        out = np.full(len(sub), np.nan)
        reach = ~np.isnan(sub).all(axis=1)
        out[reach] = np.nanmax(sub[reach], axis=1)
        return out

    def to_bits_from(self, in_name: str, out_name: str) -> np.ndarray:
        """Per bit of ``out_name``: the largest bound from any bit of ``in_name``."""
        sub = self.matrix[np.ix_(self._rows(in_name), self._cols(out_name))]
        out = np.full(sub.shape[1], np.nan)
        reach = ~np.isnan(sub).all(axis=0)
        out[reach] = np.nanmax(sub[:, reach], axis=0)
        return out

    def max_delay(self) -> float:
        return float(np.nanmax(self.matrix)) if not np.isnan(self.matrix).all() else 0.0

    def to_json(self) -> dict:
        return {
            "in_bits": [list(b) for b in self.in_bits],
            "out_bits": [list(b) for b in self.out_bits],
            "matrix": [[None if np.isnan(x) else float(x) for x in row] for row in self.matrix],
        }


def sta(n: Netlist, lib: CellLibrary) -> DelayBound:
    """Longest-path delays by dynamic programming over the topological gate order."""
    try:
        order = n.order
    except StructuralError:
        raise StructuralError("cannot time a netlist with a combinational cycle") from None
    in_bits = [(name, k) for name, bus in n.inputs.items() for k in range(len(bus))]
    arr = np.full((n.n_nets, len(in_bits)), -np.inf)
    col = 0
    for bus in n.inputs.values():
        for net in bus:
            arr[net, col] = 0.0
            col += 1
    for gi in order:
        g = n.gates[gi]
        a = arr[g.inputs[0]]
        for i in g.inputs[1:]:
            a = np.maximum(a, arr[i])
        arr[g.output] = a + lib.delay(g.kind)

    out_bits = [(name, k) for name, bus in {**n.outputs, **n.monitored}.items() for k in range(len(bus))]
    out_nets = [net for bus in {**n.outputs, **n.monitored}.values() for net in bus]
    matrix = arr[out_nets].T.copy()
    matrix[np.isneginf(matrix)] = np.nan
    net_arrival = arr.max(axis=1)
    net_arrival[np.isneginf(net_arrival)] = np.nan
    return DelayBound(in_bits=in_bits, out_bits=out_bits, matrix=matrix, net_arrival=net_arrival)


def adder_bounds(adder: Netlist, lib: CellLibrary) -> tuple[np.ndarray, float]:
    """Per product bit, the longest path to any sum bit; and the longest partial-sum path."""
    bound = sta(adder, lib)
    per_bit = bound.from_bits_to_any("product")
    psum_bound = float(np.nanmax(bound.from_bits_to_any("partial_sum")))
    return per_bit, psum_bound


def combine_mac_delay(product_arrivals: Sequence[float], adder_bounds: Sequence[float], psum_bound: float) -> float:
    """MAC delay from multiplier arrivals plus adder bounds, floored by the partial-sum path.

    Product bits that never toggled (arrival 0) contribute nothing.
    """
    best = float(psum_bound)
    for arrival, b in zip(product_arrivals, adder_bounds):
        if arrival > 0:
            best = max(best, float(arrival) + float(b))
    return best


# ---------------------------------------------------------------------------
# bit-parallel waveform simulation


def _pack(bits: np.ndarray, words: int) -> np.ndarray:
    packed = np.packbits(bits.astype(np.uint8), bitorder="little")
    buf = np.zeros(words * 8, dtype=np.uint8)
    buf[: packed.size] = packed
    return buf.view(np.uint64)


def unpack_last_event(changes: np.ndarray, n_samples: int) -> np.ndarray:
    """Last row index holding a set bit, per sample; 0 where no row does."""
    rows = np.unpackbits(changes.view(np.uint8), axis=1, bitorder="little")[:, :n_samples]
    hit = rows.any(axis=0)
    last = rows.shape[0] - 1 - np.argmax(rows[::-1], axis=0)
    return np.where(hit, last, 0).astype(np.int64)


@dataclass
class BatchTrace:
    n_samples: int
    horizon: int
    toggles: np.ndarray  # events per net, summed over the batch
    energy: float  # fJ, summed over the batch
    changes: dict[int, np.ndarray]  # watched net -> packed event rows, row k = events at time k

    def last_event(self, net: int) -> np.ndarray:
        return unpack_last_event(self.changes[net], self.n_samples)


class WaveformSimulator:
    """Bit-parallel transport-delay simulator compiled for one (netlist, library) pair."""

    def __init__(self, n: Netlist, lib: CellLibrary):
        self.netlist = n
        self.lib = lib
        self.order = n.order
        self.delays = []
        for g in n.gates:
            d = lib.delay(g.kind)
            if float(d) != int(d):
                raise ConfigError(f"bit-parallel simulation needs whole-ps delays; {g.kind} has {d}")
            self.delays.append(int(d))
        self.energies = np.array([lib.energy(g.kind) for g in n.gates])
        arrival = sta(n, lib).net_arrival
        self.horizon = int(np.nanmax(arrival)) if not np.isnan(arrival).all() else 0
        keep = {net for bus in {**n.outputs, **n.monitored}.values() for net in bus}
        last_use = {}
        for pos, gi in enumerate(self.order):
            for i in n.gates[gi].inputs:
                last_use[i] = pos
        self._free_after: dict[int, list[int]] = {}
        for net, pos in last_use.items():
            if net not in keep:
                self._free_after.setdefault(pos, []).append(net)

    def run(
        self,
        v1: Mapping[str, object],
        v2: Mapping[str, object],
        watch: Sequence[int] = (),
        count_toggles: bool = True,
    ) -> BatchTrace:
        n = self.netlist
        bits1, size1 = _input_bits(n, v1)
        bits2, size2 = _input_bits(n, v2)
        size = max(size1, size2)
        words = (size + 63) // 64
        rows = self.horizon + 2
        wave: dict[int, np.ndarray] = {}
        for net in bits1:
            w = np.empty((rows, words), dtype=np.uint64)
            w[0] = _pack(np.broadcast_to(bits1[net], (size,)), words)
            w[1:] = _pack(np.broadcast_to(bits2[net], (size,)), words)
            wave[net] = w

        watch = set(watch)
        toggles = np.zeros(n.n_nets, dtype=np.int64)
        changes = {}
        for net, w in wave.items():
            ch = w[1:] ^ w[:-1]
            if count_toggles:
                toggles[net] += int(np.bitwise_count(ch).sum())
            if net in watch:
                changes[net] = ch
        for pos, gi in enumerate(self.order):
            g = n.gates[gi]
            d = self.delays[gi]
            f = _FUNCS[g.kind](*(wave[i] for i in g.inputs))
            out = np.empty_like(f)
            out[: d + 1] = f[0]
            out[d + 1 :] = f[1 : rows - d]
            wave[g.output] = out
            if count_toggles or g.output in watch:
                ch = out[1:] ^ out[:-1]
                if count_toggles:
                    toggles[g.output] += int(np.bitwise_count(ch).sum())
                if g.output in watch:
                    changes[g.output] = ch
            for net in self._free_after.get(pos, ()):
                del wave[net]

        energy = 0.0
        if count_toggles:
            outs = np.array([g.output for g in n.gates], dtype=np.int64)
            energy = float(np.dot(toggles[outs], self.energies))
        return BatchTrace(n_samples=size, horizon=self.horizon, toggles=toggles, energy=energy, changes=changes)


def mac_delay_bounds(mac: Netlist, lib: CellLibrary) -> float:
    """Whole-MAC structural bound: longest path from any input to any sum bit."""
    b = sta(mac, lib)
    return float(np.nanmax(b.matrix[:, [j for j, (bus, _) in enumerate(b.out_bits) if bus == "sum"]]))


def trace_json(trace: TransitionTrace) -> str:
    return json.dumps(trace.to_json(), sort_keys=True)


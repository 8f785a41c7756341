"""Gate-level netlists for the MAC datapath and the cell library they are timed against.

Nets are integers ``0 .. n_nets-1``. Every net is driven either by a primary
input bit or by exactly one gate. Buses are stored LSB first.

The generators build through :class:`NetlistBuilder`, which folds constant
operands away so the finished netlists contain no tie cells: a constant that
reaches a gate input simplifies that gate (``AND(x, 1) -> x``, ``XOR(x, 1) ->
INV(x)`` ...).
"""
from __future__ import annotations

import heapq
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import ConfigError, StructuralError

GATE_KINDS = ("INV", "BUF", "AND2", "OR2", "NAND2", "NOR2", "XOR2", "XNOR2")
ARITY = {"INV": 1, "BUF": 1, "AND2": 2, "OR2": 2, "NAND2": 2, "NOR2": 2, "XOR2": 2, "XNOR2": 2}

WEIGHT_BITS = 8
ACT_BITS = 8
PRODUCT_BITS = 16
PSUM_BITS = 22

_DEFAULT_CELLS = {
    "INV": (5.0, 0.4),
    "BUF": (6.0, 0.5),
    "NAND2": (8.0, 0.6),
    "NOR2": (8.0, 0.6),
    "AND2": (10.0, 0.8),
    "OR2": (10.0, 0.8),
    "XOR2": (12.0, 1.0),
    "XNOR2": (12.0, 1.0),
}
_DEFAULT_LEAKAGE_NW = 2.0
_DEFAULT_CLOCK_PS = 200.0
_CELL_FIELDS = ("delay", "energy", "leakage")


@dataclass(frozen=True)
class Cell:
    delay: float  # ps
    energy: float  # fJ per output transition
    leakage: float  # nW


@dataclass(frozen=True)
class CellLibrary:
    cells: Mapping[str, Cell]
    clock_period: float = _DEFAULT_CLOCK_PS

    def delay(self, kind: str) -> float:
        return self.cells[kind].delay

    def energy(self, kind: str) -> float:
        return self.cells[kind].energy

    def leakage(self, kind: str) -> float:
        return self.cells[kind].leakage

    def to_dict(self) -> dict:
        """Flat parameter map, the inverse of :func:`build_cell_library`."""
        out = {}
        for kind in GATE_KINDS:
            c = self.cells[kind]
            out[f"{kind}.delay"] = c.delay
            out[f"{kind}.energy"] = c.energy
            out[f"{kind}.leakage"] = c.leakage
        out["clock_period"] = self.clock_period
        return out


def build_cell_library(config: Mapping[str, float] | None = None) -> CellLibrary:
    """Build a library from a flat ``{"KIND.field": value, "clock_period": value}`` map.

    Anything the map does not mention keeps its default. Delays and the clock
    period must be positive; energies and leakages non-negative.
    """
    params = {k: {"delay": d, "energy": e, "leakage": _DEFAULT_LEAKAGE_NW} for k, (d, e) in _DEFAULT_CELLS.items()}
    clock = _DEFAULT_CLOCK_PS
    for key, value in (config or {}).items():
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"cell library entry {key!r}: not a number: {value!r}") from None
        if key == "clock_period":
            clock = value
            continue
        kind, _, attr = key.partition(".")
        if kind not in params or attr not in _CELL_FIELDS:
            raise ConfigError(f"unknown cell library parameter {key!r}")
        params[kind][attr] = value

    if not clock > 0:
        raise ConfigError(f"clock_period must be positive, got {clock}")
    for kind, p in params.items():
        if not p["delay"] > 0:
            raise ConfigError(f"{kind}.delay must be positive, got {p['delay']}")
        for attr in ("energy", "leakage"):
            if p[attr] < 0:
                raise ConfigError(f"{kind}.{attr} must be non-negative, got {p[attr]}")
    cells = {k: Cell(p["delay"], p["energy"], p["leakage"]) for k, p in params.items()}
    return CellLibrary(cells=cells, clock_period=clock)


def load_cell_library(path) -> CellLibrary:
    with open(path) as fh:
        try:
            config = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError(f"{path}: expected a flat JSON object")
    return build_cell_library(config)


@dataclass(frozen=True)
class Gate:
    kind: str
    inputs: tuple[int, ...]
    output: int


@dataclass(eq=False)
class Netlist:
    """A combinational gate network with named input, output and monitored buses."""

    n_nets: int
    inputs: dict[str, tuple[int, ...]]
    outputs: dict[str, tuple[int, ...]]
    gates: tuple[Gate, ...]
    monitored: dict[str, tuple[int, ...]] = field(default_factory=dict)
    _order: tuple[int, ...] | None = field(default=None, repr=False)

    @property
    def order(self) -> tuple[int, ...]:
        """Gate indices in topological order. Raises StructuralError on a cycle."""
        if self._order is None:
            order = _topological_order(self)
            if order is None:
                raise StructuralError("netlist contains a combinational cycle")
            self._order = tuple(order)
        return self._order

    def input_nets(self) -> list[int]:
        return [n for bus in self.inputs.values() for n in bus]

    def driver(self) -> list[int]:
        """Gate index driving each net, -1 for primary inputs (first driver wins)."""
        drv = [-2] * self.n_nets
        for n in self.input_nets():
            drv[n] = -1
        for gi, g in enumerate(self.gates):
            if drv[g.output] == -2:
                drv[g.output] = gi
        return drv

    def fanout(self) -> list[list[int]]:
        fo: list[list[int]] = [[] for _ in range(self.n_nets)]
        for gi, g in enumerate(self.gates):
            for n in g.inputs:
                fo[n].append(gi)
        return fo

    def kind_counts(self) -> Counter:
        return Counter(g.kind for g in self.gates)

    def to_json(self) -> dict:
        def ports(d):
            return [{"name": k, "width": len(v), "nets": list(v)} for k, v in d.items()]

        return {
            "n_nets": self.n_nets,
            "inputs": ports(self.inputs),
            "outputs": ports(self.outputs),
            "monitored": ports(self.monitored),
            "gates": [{"id": i, "kind": g.kind, "in": list(g.inputs), "out": g.output} for i, g in enumerate(self.gates)],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Netlist":
        def ports(items):
            return {p["name"]: tuple(p["nets"]) for p in items}

        gates = tuple(Gate(g["kind"], tuple(g["in"]), g["out"]) for g in sorted(data["gates"], key=lambda g: g["id"]))
        return cls(
            n_nets=data["n_nets"],
            inputs=ports(data["inputs"]),
            outputs=ports(data["outputs"]),
            gates=gates,
            monitored=ports(data.get("monitored", [])),
        )


def _topological_order(n: Netlist) -> list[int] | None:
    drv = n.driver()
    fo = n.fanout()
    pending = []
    for g in n.gates:
        pending.append(sum(1 for i in g.inputs if 0 <= i < n.n_nets and drv[i] >= 0))
    ready = sorted(gi for gi, c in enumerate(pending) if c == 0)
    order = []
    # Kahn's algorithm with a min-heap frontier keeps the order reproducible.
    heapq.heapify(ready)
    while ready:
        gi = heapq.heappop(ready)
        order.append(gi)
        out = n.gates[gi].output
        if drv[out] != gi:
            continue
        for succ in fo[out]:
            pending[succ] -= 1
            if pending[succ] == 0:
                heapq.heappush(ready, succ)
    return order if len(order) == len(n.gates) else None


def validate(n: Netlist) -> list[str]:
    """Return a list of structural violations; empty iff the netlist is well formed."""
    problems = []
    drivers: dict[int, list[str]] = {}
    for name, bus in n.inputs.items():
        for bit, net in enumerate(bus):
            drivers.setdefault(net, []).append(f"input {name}[{bit}]")
    for gi, g in enumerate(n.gates):
        if g.kind not in ARITY:
            problems.append(f"gate {gi}: unknown kind {g.kind!r}")
        elif len(g.inputs) != ARITY[g.kind]:
            problems.append(f"gate {gi}: {g.kind} expects {ARITY[g.kind]} inputs, has {len(g.inputs)}")
        drivers.setdefault(g.output, []).append(f"gate {gi}")
        for net in (*g.inputs, g.output):
            if not 0 <= net < n.n_nets:
                problems.append(f"gate {gi}: net {net} out of range")

    for net, who in sorted(drivers.items()):
        if len(who) > 1:
            problems.append(f"net {net}: multiple drivers ({', '.join(who)})")
    used = {i for g in n.gates for i in g.inputs}
    for buses in (n.outputs, n.monitored):
        for bus in buses.values():
            used.update(bus)
    for net in sorted(used):
        if 0 <= net < n.n_nets and net not in drivers:
            problems.append(f"net {net}: dangling (read but never driven)")
    for gi, g in enumerate(n.gates):
        if g.output not in used:
            problems.append(f"gate {gi}: output net {g.output} dangling (drives nothing)")

    if _topological_order(n) is None:
        problems.append("combinational cycle detected")
    return problems


class Const:
    """A constant bit seen during generation; never materialized as a net."""

    __slots__ = ("value",)

    def __init__(self, value: int):
        self.value = value

    def __repr__(self):
        return f"Const({self.value})"


C0 = Const(0)
C1 = Const(1)


def _is_const(x) -> bool:
    return isinstance(x, Const)


class NetlistBuilder:
    def __init__(self):
        self.n_nets = 0
        self.gates: list[Gate] = []
        self.inputs: dict[str, tuple[int, ...]] = {}
        self.outputs: dict[str, tuple[int, ...]] = {}
        self.monitored: dict[str, tuple[int, ...]] = {}

    def _net(self) -> int:
        self.n_nets += 1
        return self.n_nets - 1

    def add_input(self, name: str, width: int) -> list[int]:
        bus = [self._net() for _ in range(width)]
        self.inputs[name] = tuple(bus)
        return bus

    def _bus(self, bits, what: str) -> tuple[int, ...]:
        for i, b in enumerate(bits):
            if _is_const(b):
                raise StructuralError(f"{what}[{i}] folded to a constant")
        return tuple(bits)

    def add_output(self, name: str, bits) -> None:
        self.outputs[name] = self._bus(bits, name)

    def add_monitor(self, name: str, bits) -> None:
        self.monitored[name] = self._bus(bits, name)

    def gate(self, kind: str, *ins: int) -> int:
        out = self._net()
        self.gates.append(Gate(kind, tuple(ins), out))
        return out

    # constant-folding primitives

    def inv(self, x):
        if _is_const(x):
            return C1 if x.value == 0 else C0
        return self.gate("INV", x)

    def and_(self, x, y):
        if _is_const(x):
            x, y = y, x
        if _is_const(y):
            return x if y.value else C0
        return self.gate("AND2", x, y)

    def or_(self, x, y):
        if _is_const(x):
            x, y = y, x
        if _is_const(y):
            return C1 if y.value else x
        return self.gate("OR2", x, y)

    def nand(self, x, y):
        if _is_const(x):
            x, y = y, x
        if _is_const(y):
            return self.inv(x) if y.value else C1
        return self.gate("NAND2", x, y)

    def nor(self, x, y):
        if _is_const(x):
            x, y = y, x
        if _is_const(y):
            return C0 if y.value else self.inv(x)
        return self.gate("NOR2", x, y)

    def xor(self, x, y):
        if _is_const(x):
            x, y = y, x
        if _is_const(y):
            return self.inv(x) if y.value else x
        return self.gate("XOR2", x, y)

    def full_add(self, a, b, c):
        """(sum, carry) of three bits; degenerates to a half adder for constant c."""
        t = self.xor(a, b)
        s = self.xor(t, c)
        carry = self.or_(self.and_(a, b), self.and_(t, c))
        return s, carry

    def build(self) -> Netlist:
        """Sweep gates that drive nothing observable, renumber nets densely, and freeze."""
        live = {net for bus in (*self.outputs.values(), *self.monitored.values()) for net in bus}
        kept = []
        for g in reversed(self.gates):  # gates are appended in dependency order
            if g.output in live:
                kept.append(g)
                live.update(g.inputs)
        kept.reverse()

        remap: dict[int, int] = {}
        for bus in self.inputs.values():
            for net in bus:
                remap[net] = len(remap)
        for g in kept:
            remap[g.output] = len(remap)

        def bus(d):
            return {k: tuple(remap[x] for x in v) for k, v in d.items()}

        n = Netlist(
            n_nets=len(remap),
            inputs=bus(self.inputs),
            outputs=bus(self.outputs),
            gates=tuple(Gate(g.kind, tuple(remap[i] for i in g.inputs), remap[g.output]) for g in kept),
            monitored=bus(self.monitored),
        )
        n.order  # noqa: B018 - fail fast on cycles
        return n


def _add_bits(b: NetlistBuilder, bits: list):
    if len(bits) == 1:
        return bits[0], None
    if len(bits) == 2:
        return b.full_add(bits[0], bits[1], C0)
    return b.full_add(*bits)


def _ripple(b: NetlistBuilder, xs, ys, width: int, cin=C0) -> list:
    out = []
    carry = cin
    for k in range(width):
        s, carry = b.full_add(xs[k], ys[k], carry)
        out.append(s)
    return out


def _carry_save_array(b: NetlistBuilder, rows: list[dict[int, object]], width: int) -> list:
    """Sum partial-product rows with a row-by-row carry-save array and a final ripple adder.

    Each row maps column -> bit. Carries out of the top column are dropped, so the
    result is the sum modulo ``2**width``.
    """
    acc_s = dict(rows[0])
    acc_c: dict[int, object] = {}
    for row in rows[1:]:
        new_s, new_c = {}, {}
        for col in range(width):
            bits = [x for x in (acc_s.get(col), acc_c.get(col), row.get(col)) if x is not None]
            if not bits:
                continue
            s, c = _add_bits(b, bits)
            new_s[col] = s
            if c is not None and col + 1 < width and not (_is_const(c) and c.value == 0):
                new_c[col + 1] = c
        acc_s, acc_c = new_s, new_c
    xs = [acc_s.get(k, C0) for k in range(width)]
    ys = [acc_c.get(k, C0) for k in range(width)]
    return _ripple(b, xs, ys, width)


def _booth_rows(b: NetlistBuilder, w, a) -> list[dict[int, object]]:
    # Radix-4 Booth recoding of the signed weight; digits d_i in {-2..2}, i = 0..3.
    wb = [C0] + list(w)  # wb[k + 1] is weight bit k, wb[0] the implicit bit -1
    a_ext = list(a) + [C0]  # 9 bits so that 2*a fits
    rows = []
    corrections = []
    for i in range(WEIGHT_BITS // 2):
        x, y, z = wb[2 * i], wb[2 * i + 1], wb[2 * i + 2]
        one = b.xor(y, x)
        two = b.or_(b.and_(z, b.nor(y, x)), b.and_(b.inv(z), b.and_(y, x)))
        neg = b.and_(z, b.nand(y, x))
        row: dict[int, object] = {}
        for j in range(ACT_BITS + 1):
            lo = a_ext[j - 1] if j > 0 else C0
            m = b.or_(b.and_(one, a_ext[j]), b.and_(two, lo))
            if 2 * i + j < PRODUCT_BITS:
                row[2 * i + j] = b.xor(m, neg)
        for col in range(2 * i + ACT_BITS + 1, PRODUCT_BITS):
            row[col] = neg
        rows.append(row)
        corrections.append((2 * i, neg))
    # the "+1" of each negated row goes into a free low column of the next row
    for i, (col, neg) in enumerate(corrections):
        if i + 1 < len(rows):
            rows[i + 1][col] = neg
        else:
            rows.append({col: neg})
    return rows


def _baugh_wooley_rows(b: NetlistBuilder, w, a) -> list[dict[int, object]]:
    rows = []
    for i in range(WEIGHT_BITS - 1):
        rows.append({i + j: b.and_(w[i], a[j]) for j in range(ACT_BITS) if i + j < PRODUCT_BITS})
    sign = WEIGHT_BITS - 1
    rows.append({sign + j: b.nand(w[sign], a[j]) for j in range(ACT_BITS) if sign + j < PRODUCT_BITS})
    # -w7*a*2^7 == sum(~(w7 a_j) 2^(7+j)) - 2^7 (2^8 - 1) == ... + 2^15 + 2^7 (mod 2^16)
    rows.append({sign: C1, PRODUCT_BITS - 1: C1})
    return rows


ARCHITECTURES = {"booth": _booth_rows, "baugh_wooley": _baugh_wooley_rows}


def _multiplier(b: NetlistBuilder, w, a, arch: str) -> list:
    try:
        gen_rows = ARCHITECTURES[arch]
    except KeyError:
        raise ConfigError(f"unknown multiplier architecture {arch!r}; choose from {sorted(ARCHITECTURES)}") from None
    return _carry_save_array(b, gen_rows(b, w, a), PRODUCT_BITS)


def _adder(b: NetlistBuilder, p, ps) -> list:
    p_ext = list(p) + [p[-1]] * (PSUM_BITS - PRODUCT_BITS)
    return _ripple(b, p_ext, ps, PSUM_BITS)


def gen_multiplier(arch: str = "booth") -> Netlist:
    """Signed 8-bit weight x unsigned 8-bit activation -> 16-bit two's-complement product.

    ``arch="booth"`` recodes the weight into radix-4 Booth digits; ``"baugh_wooley"``
    uses a plain AND array with a complemented sign row. Both reduce their
    partial products with the same carry-save array and final ripple adder.
    """
    b = NetlistBuilder()
    w = b.add_input("weight", WEIGHT_BITS)
    a = b.add_input("activation", ACT_BITS)
    b.add_output("product", _multiplier(b, w, a, arch))
    return b.build()


def gen_adder() -> Netlist:
    """22-bit ripple-carry adder: sign-extended 16-bit product + partial sum, wrapping."""
    b = NetlistBuilder()
    p = b.add_input("product", PRODUCT_BITS)
    ps = b.add_input("partial_sum", PSUM_BITS)
    b.add_output("sum", _adder(b, p, ps))
    return b.build()


def gen_mac(arch: str = "booth") -> Netlist:
    """Multiplier feeding the adder; the product bus is exposed as a monitored bus."""
    b = NetlistBuilder()
    w = b.add_input("weight", WEIGHT_BITS)
    a = b.add_input("activation", ACT_BITS)
    ps = b.add_input("partial_sum", PSUM_BITS)
    p = _multiplier(b, w, a, arch)
    b.add_monitor("product", p)
    b.add_output("sum", _adder(b, p, ps))
    return b.build()


def to_bits(value: int, width: int) -> list[int]:
    value &= (1 << width) - 1
    return [(value >> k) & 1 for k in range(width)]


def to_signed(value, width: int):
    """Reinterpret an unsigned ``width``-bit pattern (int or integer array) as two's complement."""
    value = value & ((1 << width) - 1)
    return value - ((value >> (width - 1)) << width)


def iter_bits(buses: Mapping[str, Iterable[int]]):
    for name, bus in buses.items():
        for k, net in enumerate(bus):
            yield name, k, net

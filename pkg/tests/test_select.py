import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macsel.errors import ConfigError, InfeasibleError
from macsel.select import (
    DelayTable,
    Selection,
    VoltageModel,
    prune_for_delay,
    scale_power,
    select_for_delay,
    select_weights_by_power,
    voltage_factor,
)
from macsel.workload import PowerEstimate

from selection_oracle import PSUM, brute_force_best, tiny_instance


def test_power_selection_examples():
    prof = {-105: 1066.0, -2: 596.0, 0: 10.0}
    s = select_weights_by_power(prof, 900)
    assert -2 in s and -105 not in s
    full = {w: float(abs(w)) + 1 for w in range(-127, 128)}
    assert len(select_weights_by_power(full, max(full.values()))) == 255
    assert select_weights_by_power(full, 1.5).tolist() == [0]
    with pytest.raises(ConfigError):
        select_weights_by_power(full, 0)
    with pytest.raises(InfeasibleError):
        select_weights_by_power({1: 5.0}, 1.0, protected=())


def fig5_table():
    d = np.full((2, 9, 9), 40.0)
    d[1, 5, 8] = 99.0
    return DelayTable(np.array([0, 1]), np.arange(9), d, 40.0)


def test_single_violation_removes_exactly_one():
    t = fig5_table()
    for seed in range(10):
        sel = prune_for_delay(t, 90, seed)
        assert len(sel.removed) == 1
        kind, value, combo, delay = sel.removed[0]
        assert combo == (1, 5, 8) and delay == 99.0
        assert (kind, value) in {("weight", 1), ("act", 5), ("act", 8)}
        assert sel.achieved_max_delay <= 90


def test_nothing_to_remove():
    t = tiny_instance(0)
    sel = prune_for_delay(t, 100, 0)
    assert sel.removed == [] and len(sel.weights) == 4 and len(sel.acts) == 6


def test_threshold_below_psum_bound():
    with pytest.raises(InfeasibleError):
        prune_for_delay(tiny_instance(0), PSUM - 1, 0)
    with pytest.raises(InfeasibleError):
        select_for_delay(tiny_instance(0), PSUM - 1)


def test_protected_only_violation_is_infeasible():
    d = np.full((1, 2, 2), 50.0)
    d[0, 0, 0] = 80.0
    with pytest.raises(InfeasibleError):
        prune_for_delay(DelayTable(np.array([0]), np.array([0, 1]), d, 50.0), 60, 0)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(50, 100))
def test_prune_postconditions(inst, seed, thr):
    t = tiny_instance(inst)
    sel = prune_for_delay(t, thr, seed)
    assert sel.achieved_max_delay <= thr
    assert 0 in sel.weights and 0 in sel.acts
    gone_w, gone_a = set(), set()
    for kind, value, (w, f, a), delay in sel.removed:
        # justified: the combination violated and was still alive when chosen
        assert delay > thr and t.delays[w, f, a] == delay
        assert w not in gone_w and f not in gone_a and a not in gone_a
        assert value in ((w,) if kind == "weight" else (f, a))
        (gone_w if kind == "weight" else gone_a).add(value)


def test_restarts_one_equals_prune():
    t = tiny_instance(3)
    seed = 11
    from macsel.select import _restart_seeds
    one = select_for_delay(t, 85, restarts=1, seed=seed)
    ref = prune_for_delay(t, 85, _restart_seeds(seed, 1)[0])
    assert one.weights.tolist() == ref.weights.tolist() and one.acts.tolist() == ref.acts.tolist()


def test_restarts_dominate_single_runs():
    from macsel.select import _restart_seeds
    t = tiny_instance(5)
    best = select_for_delay(t, 80, restarts=20, seed=2)
    for s in _restart_seeds(2, 20):
        assert best.objective >= prune_for_delay(t, 80, s).objective


def test_select_deterministic_and_jobs_invariant():
    t = tiny_instance(9, n_w=6, n_a=10)
    a = select_for_delay(t, 80, restarts=8, seed=4)
    b = select_for_delay(t, 80, restarts=8, seed=4, jobs=2)
    assert a.dumps() == b.dumps()


def test_greedy_close_to_optimum():
    hits = sum(select_for_delay(tiny_instance(i), 90, restarts=20, seed=i).objective == brute_force_best(tiny_instance(i), 90)
               for i in range(30))
    assert hits >= 24


def test_oracle_monotone_in_threshold():
    for i in range(5):
        t = tiny_instance(100 + i)
        vals = [brute_force_best(t, thr) for thr in (100, 90, 80, 70, 60, 50)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_selection_json_roundtrip():
    s = Selection([3, 0, 3, -1], [0, 255], 900.0, 170.0, 165.0)
    back = Selection.from_json(s.to_json())
    assert back.weights.tolist() == [-1, 0, 3] and back.dumps() == s.dumps()


def test_voltage_factor_examples():
    m = VoltageModel()
    assert voltage_factor(m, 0) == 1.0
    assert voltage_factor(m, 40 / 180) == pytest.approx(0.8875, abs=1e-12)
    assert voltage_factor(m, 25 / 180) == pytest.approx(0.925, abs=1e-12)
    with pytest.raises(ConfigError):
        voltage_factor(m, 0.5)
    assert voltage_factor(m, 0.5, extrapolate=True) < 0.8875
    xs = np.linspace(0, 40 / 180, 101)
    ys = [voltage_factor(m, x) for x in xs]
    assert all(a >= b for a, b in zip(ys, ys[1:]))


def test_voltage_model_validation():
    with pytest.raises(ConfigError):
        VoltageModel(((0.0, 1.0), (0.1, 1.1)))
    with pytest.raises(ConfigError):
        VoltageModel(((0.1, 1.0),))
    assert VoltageModel.from_json(VoltageModel().to_json()) == VoltageModel()


def test_scale_power():
    e = PowerEstimate(100.0, 10.0, 110.0, "optimized")
    assert scale_power(e, 1.0) == e
    s = scale_power(e, 0.8875)
    assert s.dynamic == pytest.approx(78.765625) and s.leakage == pytest.approx(8.875)
    assert s.total == pytest.approx(s.dynamic + s.leakage)
    with pytest.raises(ConfigError):
        scale_power(e, 1.2)


def test_voltage_reduction_dynamic_dominated():
    # with dynamic power dominating, a 0.8875 ratio cuts total power by roughly 1 - 0.8875^2
    e = PowerEstimate(95.0, 5.0, 100.0, "optimized")
    cut = 1 - scale_power(e, 0.8875).total / e.total
    assert 0.2 < cut < 0.22

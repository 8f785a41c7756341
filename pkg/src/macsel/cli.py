"""``macsel`` command line: characterize, select, train, estimate, report, pipeline.

Every command writes into ``--out`` (default ``$MACSEL_OUT`` or ``./macsel_out``).
Artifacts are deterministic given ``--seed``; wall-clock data goes only to
``run_meta.json``.

Exit codes: 0 success, 2 I/O or configuration error, 3 infeasible threshold,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .characterize import (
    DelayProfile,
    PowerProfile,
    CombinedSamples,
    build_act_dist,
    build_bin_dist,
    build_bins,
    delay_profile_all,
    power_profile_all,
    sample_combined,
    uniform_band_mass,
)
from .data import Dataset, default_data_dir, load_dataset, make_digits, save_idx_dataset
from .errors import ConfigError, MacselError
from .netlist import ARCHITECTURES, PSUM_BITS, build_cell_library, gen_mac, load_cell_library
from .qnn import (
    QuantizedNet,
    TrainConfig,
    evaluate,
    schedule_delay_thresholds,
    schedule_power_thresholds,
    train,
)
from .select import (
    ALL_ACTS,
    DelayTable,
    Selection,
    VoltageModel,
    scale_power,
    select_for_delay,
    select_weights_by_power,
    voltage_factor,
)
from .workload import ArrayConfig, WorkloadStats, estimate_array_power, run_systolic

log = logging.getLogger("macsel")

TRADEOFF_COLUMNS = [
    "phase",
    "threshold",
    "n_weights",
    "n_acts",
    "accuracy",
    "std_power_uW",
    "opt_power_uW",
    "voltage_ratio",
    "scaled_power_uW",
]


# ---------------------------------------------------------------------------
# helpers


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("MACSEL_OUT", "macsel_out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing artifact: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _library(args):
    if args.library:
        path = Path(args.library)
        if not path.exists():
            raise FileNotFoundError(f"cell library not found: {path}")
        return load_cell_library(path)
    return build_cell_library()


def _dataset(args) -> Dataset:
    """Load ``--data``; without it, use (and on first use generate) the default digit set."""
    if args.data:
        ds = load_dataset(args.data)
    else:
        d = default_data_dir()
        if not any(d.glob("train-images*")):
            log.info("generating digit dataset in %s", d)
            save_idx_dataset(make_digits(10000, seed=0), d)
        ds = load_dataset(d)
    if not len(ds.test):
        ds = ds.with_holdout(0.2, seed=args.seed)
    return ds


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6f}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([v if isinstance(v, str) else _fmt(v) for v in r])


def _load_profiles(prof_dir: Path):
    pp = PowerProfile.from_json(_read_json(prof_dir / "power_profile.json"))
    dp = None
    if (prof_dir / "delay_profile.json").exists():
        dp = DelayProfile.load(prof_dir / "delay_profile")
    return pp, dp


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        retrain_epochs=args.retrain_epochs,
        power_start=args.power_start,
        power_step=args.power_step,
        delay_start=args.delay_start,
        delay_step=args.delay_step,
        power_stop=args.power_stop,
        delay_stop=args.delay_stop,
        restarts=args.restarts,
        jobs=args.jobs,
    )


def _parse_weights(spec: str | None):
    if spec is None:
        return tuple(range(-127, 128))
    out = []
    for part in spec.split(","):
        part = part.strip()
        if ":" in part:
            lo, hi = part.split(":")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if any(not -127 <= w <= 127 for w in out):
        raise ConfigError(f"weights must lie in -127..127: {spec}")
    return tuple(sorted(set(out)))


# ---------------------------------------------------------------------------
# characterize


def characterize(args, out: Path, model: QuantizedNet | None = None, sel: Selection | None = None) -> dict:
    lib = _library(args)
    mac = gen_mac(args.arch)
    weights = _parse_weights(args.weights)
    summary: dict = {"arch": args.arch, "samples": args.samples, "bins": args.bins}

    if args.uniform:
        rng = np.random.default_rng(args.seed)
        n = args.samples
        samples = CombinedSamples(
            rng.integers(256, size=n), rng.integers(256, size=n),
            rng.integers(1 << PSUM_BITS, size=n), rng.integers(1 << PSUM_BITS, size=n), args.seed,
        )
        summary["stimulus"] = "uniform"
    else:
        if args.stats:
            stats = WorkloadStats.from_json(_read_json(args.stats))
        else:
            if model is None:
                if not args.model:
                    raise ConfigError("characterize needs --model, --stats, or --uniform")
                model, sel = QuantizedNet.from_json(_read_json(args.model))
            ds = _dataset(args)
            x = ds.test.features[: args.workload_samples]
            _, stats = run_systolic(model, x, ArrayConfig(rows=args.rows, cols=args.cols), sel, seed=args.seed)
            (out / "workload_stats.json").write_text(stats.dumps() + "\n")
        ad = build_act_dist(stats)
        distinct = np.unique(stats.psum_values)
        if len(distinct) > args.bin_samples:
            distinct = np.random.default_rng(args.seed).choice(distinct, args.bin_samples, replace=False)
        bins = build_bins(distinct, args.bins, seed=args.seed)
        bd = build_bin_dist(stats, bins)
        _write_json(out / "bins.json", bins.to_json())
        _write_csv(out / "act_band.csv", ["width", "workload_mass", "uniform_mass"],
                   [(w, ad.band_mass(w), uniform_band_mass(w)) for w in (0, 4, 16, 64)])
        samples = sample_combined(ad, bd, bins, args.samples, seed=args.seed)
        summary.update(stimulus="workload", zero_weight_fraction=stats.zero_weight_fraction,
                       band16_mass=ad.band_mass(16))

    t0 = time.perf_counter()
    pp = power_profile_all(mac, lib, samples, weights, jobs=args.jobs)
    summary["power_seconds"] = time.perf_counter() - t0
    pp.to_csv(out / "power_profile.csv")
    _write_json(out / "power_profile.json", pp.to_json())

    if not args.no_delay:
        dw = _parse_weights(args.delay_weights) if args.delay_weights else weights
        t0 = time.perf_counter()
        dp = delay_profile_all(lib, dw, args.arch, jobs=args.jobs)
        summary["delay_seconds"] = time.perf_counter() - t0
        dp.save(out / "delay_profile")
        dp.write_histogram(out / "delay_hist.csv")
        summary["global_max_delay_ps"] = dp.global_max
        summary["psum_bound_ps"] = dp.psum_bound
    log.info("characterization written to %s", out)
    return summary


def cmd_characterize(args) -> int:
    out = _out_dir(args)
    summary = characterize(args, out)
    _meta(out, "characterize", args, {k: v for k, v in summary.items() if k.endswith("seconds")})
    return 0


# ---------------------------------------------------------------------------
# select


def select(args, prof_dir: Path) -> Selection:
    pp, dp = _load_profiles(prof_dir)
    weights = select_weights_by_power(pp, args.power_threshold)
    thr = args.delay_threshold
    if dp is not None:
        missing = [int(w) for w in weights if w not in dp]
        if missing:
            raise ConfigError(f"delay profile lacks weights {missing[:8]}")
    if thr is None or np.isinf(thr):
        achieved = DelayTable.from_profile(dp, weights).max_delay() if dp is not None else None
        return Selection(weights, ALL_ACTS, args.power_threshold, thr, achieved)
    if dp is None:
        raise ConfigError(f"a delay threshold needs {prof_dir / 'delay_profile.json'}")
    table = DelayTable.from_profile(dp, weights)
    sel = select_for_delay(table, thr, args.restarts, seed=args.seed, jobs=args.jobs)
    sel.power_threshold = args.power_threshold
    return sel


def cmd_select(args) -> int:
    out = _out_dir(args)
    sel = select(args, Path(args.profiles or out))
    (out / "selection.json").write_text(sel.dumps() + "\n")
    print(f"{len(sel.weights)} weights, {len(sel.acts)} activations, max delay {sel.achieved_max_delay}")
    _meta(out, "select", args)
    return 0


# ---------------------------------------------------------------------------
# train


def _log_rows(phase, threshold, history):
    return [(phase, threshold, h["epoch"], h["loss"], h.get("accuracy")) for h in history]


def baseline_model(args, ds: Dataset, cfg: TrainConfig, log_rows: list) -> QuantizedNet:
    net = QuantizedNet.init([ds.features.shape[1], args.hidden, max(ds.n_classes, 2)], seed=args.seed)
    net.prune_threshold = args.prune_threshold
    net, hist = train(net, ds.train, cfg, None, eval_data=ds.test)
    log_rows += _log_rows("baseline", None, hist)
    return net


def run_schedules(args, ds: Dataset, cfg: TrainConfig, net: QuantizedNet, pp: PowerProfile,
                  dp: DelayProfile | None, out: Path, log_rows: list) -> tuple[Selection, QuantizedNet, list]:
    baseline = evaluate(net, ds.test)

    def retrain_for(phase):
        def fn(n, sel):
            thr = sel.power_threshold if phase == "power" else sel.delay_threshold
            n2, hist = train(n, ds.train, cfg, sel, epochs=cfg.retrain_epochs, eval_data=ds.test)
            log_rows.extend(_log_rows(phase, thr, hist))
            return n2
        return fn

    _, psel, pnet, ppoints = schedule_power_thresholds(net, ds, cfg, pp, baseline, retrain=retrain_for("power"))
    points = [("baseline", None, Selection.full(), net, baseline)]
    points += [(p.phase, p.threshold, p.selection, p.net, p.accuracy) for p in ppoints]
    sel, final = psel, pnet
    if dp is not None:
        table = DelayTable.from_profile(dp, psel.weights)
        _, dsel, dnet, dpoints = schedule_delay_thresholds(
            pnet, ds, cfg, table, baseline, psel.power_threshold, retrain=retrain_for("delay"))
        points += [(p.phase, p.threshold, p.selection, p.net, p.accuracy) for p in dpoints]
        sel, final = dsel, dnet

    pdir = out / "points"
    pdir.mkdir(exist_ok=True)
    index = []
    for k, (phase, thr, s, n, acc) in enumerate(points):
        name = f"{k:03d}_{phase}.json"
        (pdir / name).write_text(n.dumps(s) + "\n")
        index.append({"phase": phase, "threshold": thr, "n_weights": len(s.weights), "n_acts": len(s.acts),
                      "accuracy": acc, "checkpoint": f"points/{name}"})
    _write_json(out / "schedule.json", {"baseline_accuracy": baseline, "points": index})
    return sel, final, index


def cmd_train(args) -> int:
    out = _out_dir(args)
    ds = _dataset(args)
    cfg = _train_config(args)
    rows: list = []
    if args.model:
        net, sel = QuantizedNet.from_json(_read_json(args.model))
    else:
        net = baseline_model(args, ds, cfg, rows)
        sel = None
    if args.schedule:
        pp, dp = _load_profiles(Path(args.profiles or out))
        sel, net, _ = run_schedules(args, ds, cfg, net, pp, dp, out, rows)
    elif args.selection:
        sel = Selection.from_json(_read_json(args.selection))
        net, hist = train(net, ds.train, cfg, sel, eval_data=ds.test)
        rows += _log_rows("restricted", sel.delay_threshold or sel.power_threshold, hist)
    (out / "model.json").write_text(net.dumps(sel) + "\n")
    if sel is not None:
        (out / "selection.json").write_text(sel.dumps() + "\n")
    _write_csv(out / "train_log.csv", ["phase", "threshold", "epoch", "loss", "accuracy"], rows)
    print(f"test accuracy {evaluate(net, ds.test, sel):.4f}")
    _meta(out, "train", args)
    return 0


# ---------------------------------------------------------------------------
# estimate / report


def _voltage_ratio(sel: Selection, dp: DelayProfile | None, model: VoltageModel) -> float:
    """Supply ratio from the fractional cut of the worst sensitized delay.

    Cuts beyond the model's last anchor are clamped to it.
    """
    if dp is None or sel.achieved_max_delay is None or sel.delay_threshold is None:
        return 1.0
    reduction = max(0.0, (dp.global_max - sel.achieved_max_delay) / dp.global_max)
    reduction = min(reduction, model.anchors[-1][0])
    return voltage_factor(model, reduction)


def estimate(args, ds: Dataset, net: QuantizedNet, sel: Selection | None, pp: PowerProfile,
             dp: DelayProfile | None) -> dict:
    sel = sel or Selection.full()
    cfg = ArrayConfig(rows=args.rows, cols=args.cols)
    _, stats = run_systolic(net, ds.test.features[: args.workload_samples], cfg, sel, seed=args.seed)
    std = estimate_array_power(stats, pp, mode="standard")
    opt = estimate_array_power(stats, pp, mode="optimized")
    ratio = _voltage_ratio(sel, dp, VoltageModel())
    scaled = scale_power(opt, ratio)
    return {
        "standard": std.to_json(),
        "optimized": opt.to_json(),
        "voltage_ratio": ratio,
        "scaled_optimized": scaled.to_json(),
        "zero_weight_fraction": stats.zero_weight_fraction,
        "n_weights": len(sel.weights),
        "n_acts": len(sel.acts),
    }


def cmd_estimate(args) -> int:
    out = _out_dir(args)
    if not args.model:
        raise ConfigError("estimate needs --model")
    net, sel = QuantizedNet.from_json(_read_json(args.model))
    if args.selection:
        sel = Selection.from_json(_read_json(args.selection))
    pp, dp = _load_profiles(Path(args.profiles or out))
    est = estimate(args, _dataset(args), net, sel, pp, dp)
    _write_json(out / "estimate.json", est)
    print(f"standard {est['standard']['total_uW']:.1f} uW, optimized {est['optimized']['total_uW']:.1f} uW, "
          f"scaled {est['scaled_optimized']['total_uW']:.1f} uW")
    _meta(out, "estimate", args)
    return 0


def report(args, out: Path, ds: Dataset, pp: PowerProfile, dp: DelayProfile | None) -> dict:
    sched = _read_json(Path(args.schedule_file) if getattr(args, "schedule_file", None) else out / "schedule.json")
    rows = []
    for p in sched["points"]:
        net, sel = QuantizedNet.from_json(_read_json(out / p["checkpoint"]))
        e = estimate(args, ds, net, sel, pp, dp)
        rows.append((p["phase"], p["threshold"], p["n_weights"], p["n_acts"], p["accuracy"],
                     e["standard"]["total_uW"], e["optimized"]["total_uW"], e["voltage_ratio"],
                     e["scaled_optimized"]["total_uW"]))
    _write_csv(out / "tradeoff.csv", TRADEOFF_COLUMNS, rows)
    base = rows[0]
    passing = [r for r, p in zip(rows, sched["points"]) if r[0] != "baseline"]
    summary = {"baseline_std_power_uW": base[5], "baseline_accuracy": base[4]}
    if passing:
        final = _final_row(rows, sched, args)
        summary.update(final_phase=final[0], final_threshold=final[1], final_accuracy=final[4],
                       final_scaled_power_uW=final[8],
                       total_power_reduction=1.0 - final[8] / base[5] if base[5] else 0.0)
    _write_json(out / "summary.json", summary)
    return summary


def _final_row(rows, sched, args):
    """The returned schedule result: lowest passing threshold of the last phase that has one."""
    base_acc = sched["baseline_accuracy"]
    stop = {"power": args.power_stop, "delay": args.delay_stop}
    ok = [r for r in rows if r[0] in stop and base_acc > 0 and (base_acc - r[4]) / base_acc <= stop[r[0]]]
    if not ok:
        return rows[0]
    delay_ok = [r for r in ok if r[0] == "delay"]
    return (delay_ok or ok)[-1]


def cmd_report(args) -> int:
    out = _out_dir(args)
    pp, dp = _load_profiles(Path(args.profiles or out))
    summary = report(args, out, _dataset(args), pp, dp)
    print(json.dumps(summary, indent=1, sort_keys=True))
    _meta(out, "report", args)
    return 0


# ---------------------------------------------------------------------------
# pipeline


def cmd_pipeline(args) -> int:
    out = _out_dir(args)
    ds = _dataset(args)
    cfg = _train_config(args)
    rows: list = []
    t = {}
    t0 = time.perf_counter()
    net = baseline_model(args, ds, cfg, rows)
    t["train_baseline"] = time.perf_counter() - t0
    (out / "baseline_model.json").write_text(net.dumps() + "\n")

    if args.profiles:
        # reuse an earlier characterization instead of re-simulating
        summary = {"profiles": str(args.profiles)}
        pp, dp = _load_profiles(Path(args.profiles))
    else:
        t0 = time.perf_counter()
        summary = characterize(args, out, model=net, sel=None)
        t["characterize"] = time.perf_counter() - t0
        t.update({k: v for k, v in summary.items() if k.endswith("seconds")})
        pp, dp = _load_profiles(out)

    t0 = time.perf_counter()
    sel, final, _ = run_schedules(args, ds, cfg, net, pp, dp, out, rows)
    t["schedules"] = time.perf_counter() - t0
    (out / "model.json").write_text(final.dumps(sel) + "\n")
    (out / "selection.json").write_text(sel.dumps() + "\n")
    _write_csv(out / "train_log.csv", ["phase", "threshold", "epoch", "loss", "accuracy"], rows)

    t0 = time.perf_counter()
    rep = report(args, out, ds, pp, dp)
    t["report"] = time.perf_counter() - t0
    _write_json(out / "characterize_summary.json", {k: v for k, v in summary.items() if not k.endswith("seconds")})
    print(json.dumps(rep, indent=1, sort_keys=True))
    _meta(out, "pipeline", args, t)
    return 0


def _meta(out: Path, command: str, args, timings: dict | None = None) -> None:
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "timings_s": timings or {},
    }
    _write_json(out / "run_meta.json", meta)


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default $MACSEL_OUT or ./macsel_out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for characterization and selection")
    p.add_argument("--data", help="dataset: IDX directory/file or CSV (default: generated digits)")
    p.add_argument("--profiles", help="directory holding power/delay profiles (default --out; "
                   "the pipeline reuses them instead of characterizing)")
    p.add_argument("--rows", type=int, default=8, help="systolic array rows")
    p.add_argument("--cols", type=int, default=8, help="systolic array columns")
    p.add_argument("--workload-samples", type=int, default=100, help="test samples streamed through the array")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _char_args(p):
    p.add_argument("--library", help="cell library JSON (default: built-in)")
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="booth")
    p.add_argument("--samples", type=int, default=10000, help="stimulus transitions per weight")
    p.add_argument("--bins", type=int, default=50)
    p.add_argument("--bin-samples", type=int, default=32768, help="distinct partial sums used to build bins")
    p.add_argument("--weights", help="weights to profile, e.g. '0' or '-8:8,64' (default all)")
    p.add_argument("--delay-weights", help="weights for the delay profile (default: same as --weights)")
    p.add_argument("--no-delay", action="store_true", help="skip the delay profile")
    p.add_argument("--uniform", action="store_true", help="uniform random stimulus instead of a workload")
    p.add_argument("--stats", help="workload_stats.json to characterize from")
    p.add_argument("--model", help="model checkpoint whose workload drives characterization")


def _train_args(p):
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--retrain-epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--prune-threshold", type=int, default=0, help="snap weight codes with |w| <= this to 0")
    p.add_argument("--power-start", type=float, default=900.0)
    p.add_argument("--power-step", type=float, default=25.0)
    p.add_argument("--power-stop", type=float, default=0.01, help="relative accuracy drop ending the power phase")
    p.add_argument("--delay-start", type=float, default=None, help="default: one step below the max delay")
    p.add_argument("--delay-step", type=float, default=10.0)
    p.add_argument("--delay-stop", type=float, default=0.05, help="relative accuracy drop ending the delay phase")
    p.add_argument("--restarts", type=int, default=20)


def _float_or_inf(s: str) -> float:
    return float("inf") if s.lower() in ("inf", "infinity") else float(s)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="macsel", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("characterize", help="per-weight power and delay profiles")
    _common(p)
    _char_args(p)
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("select", help="weight/activation selection from the profiles")
    _common(p)
    p.add_argument("--power-threshold", type=_float_or_inf, default=900.0)
    p.add_argument("--delay-threshold", type=_float_or_inf, default=None)
    p.add_argument("--restarts", type=int, default=20)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="train a baseline, retrain on a selection, or run the threshold schedules")
    _common(p)
    _train_args(p)
    p.add_argument("--model", help="start from this checkpoint instead of training a baseline")
    p.add_argument("--selection", help="selection.json to restrict training to")
    p.add_argument("--schedule", action="store_true", help="run the power then delay threshold schedules")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="array power of a model on its workload")
    _common(p)
    p.add_argument("--model", help="model checkpoint")
    p.add_argument("--selection", help="override the checkpoint's selection")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="tradeoff.csv and summary.json from schedule results")
    _common(p)
    p.add_argument("--schedule-file", help="schedule.json (default <out>/schedule.json)")
    p.add_argument("--power-stop", type=float, default=0.01)
    p.add_argument("--delay-stop", type=float, default=0.05)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="train, characterize, select, retrain, estimate and report")
    _common(p)
    _char_args(p)
    _train_args(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MacselError as exc:
        print(f"macsel: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"macsel: error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"macsel: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``lssm {run,ensemble,audit,bound-sweep,spectrum-dump}``.

Artifacts land under ``<root>/<config_hash>/seed-<seed>/``; the root comes
from ``--root``, then ``output.root`` in the config, then the
``LSSM_ARTIFACT_ROOT`` environment variable, then ``./artifacts``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (
    check_budget,
    check_envelope,
    check_pointwise_inequalities,
    martingale_summary,
)
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import build_setup, config_echo, config_hash, parse_config, validate_config
from .dynamics import forcing_field
from .ensemble import (
    EnsembleConfig,
    EnsemblePartial,
    _clean,
    build_report,
    merge,
    run_partial,
)
from .errors import EnsembleFailure, LSSMError
from .field import energy_spectrum
from .integrate import SimState, read_records_csv, run_trajectory, write_records_csv
from .stats import FiniteHorizon, bound_check, finalize

log = logging.getLogger("lssm")

ENV_ROOT = "LSSM_ARTIFACT_ROOT"


def artifact_root(args, cfg) -> Path:
    if getattr(args, "root", None):
        return Path(args.root)
    if cfg.output.root:
        return Path(cfg.output.root)
    return Path(os.environ.get(ENV_ROOT, "artifacts"))


def run_dir(root, cfg) -> Path:
    return Path(root) / config_hash(cfg) / f"seed-{cfg.seed}"


def _meta(cfg):
    return {"config_hash": config_hash(cfg), "code_version": __version__}


def _dump(path, obj):
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n")


def _load_cfg(args):
    return parse_config(args.config, args.set or ())


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    out = run_dir(artifact_root(args, cfg), cfg) / f"traj-{args.index}"
    out.mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg)
    (out / "config.json").write_text(config_echo(cfg) + "\n")

    start = None
    if args.restart:
        ck = load_checkpoint(args.restart)
        if ck.grid != setup.grid:
            raise LSSMError("restart checkpoint grid does not match the configuration")
        start = SimState(ck.u, ck.t, ck.step, ck.rng)

    def on_ck(s):
        save_checkpoint(out / f"step-{s.step_index:09d}.ckpt", Checkpoint(s.u, s.t, s.step_index, s.rng, meta))

    rep = run_trajectory(setup, cfg.seed, args.index, start=start, checkpoint_every=cfg.output.checkpoint_every,
                         on_checkpoint=on_ck)
    final = rep.final
    save_checkpoint(out / "final.ckpt", Checkpoint(final.u, final.t, final.step_index, final.rng, meta))
    rows = rep.records[:: cfg.output.cadence]
    write_records_csv(out / "records.csv", rows, meta)

    summary = {**meta, "index": args.index, "seed": cfg.seed, "valid": rep.valid, "error": rep.error,
               "t_final": final.t, "steps": final.step_index, "initial_ke": rep.initial_ke,
               "final_ke": float(rep.records[-1].ke_post) if rep.records else rep.initial_ke,
               "max_div_residual": rep.max_div_residual, "cadence": cfg.output.cadence}
    ok = rep.valid and rep.max_div_residual <= 1e-12
    if rep.records:
        budget = check_budget(rep.records, setup.params)
        summary["budget"] = budget.to_dict()
        ok = ok and budget.passed
    if rep.acc.elapsed > 0:
        st = finalize(rep.acc, setup.params, setup.noise, setup.grid)
        summary["statistics"] = st.to_dict()
        summary["statistics_raw"] = finalize(rep.acc_raw, setup.params, setup.noise, setup.grid).to_dict()
        try:
            summary["bound"] = bound_check(st, setup.params, FiniteHorizon.from_accumulators([rep.acc], setup.grid),
                                           tol_B1=1e-8, tol_B2=1e-8).to_dict()
        except LSSMError as exc:
            summary["bound"] = {"error": str(exc)}
    summary["passed"] = ok
    _dump(out / "summary.json", summary)
    print(json.dumps(_clean({k: summary.get(k) for k in ("config_hash", "valid", "passed", "statistics")}),
                     indent=2, sort_keys=True))
    return 0 if ok else 1


def _ensemble_cfg(args, cfg, setup, indices=None):
    width = cfg.ensemble.parallel_width
    if args.threads:
        width = min(width, args.threads)
    M = args.M or cfg.ensemble.M
    return EnsembleConfig(setup, M, cfg.seed, width, config_hash(cfg), indices)


def _parse_indices(spec, M):
    if not spec:
        return None
    a, _, b = spec.partition(":")
    return tuple(range(int(a or 0), int(b) if b else M))


def cmd_ensemble(args) -> int:
    cfg = _load_cfg(args)
    setup = build_setup(cfg)
    out = run_dir(artifact_root(args, cfg), cfg)
    out.mkdir(parents=True, exist_ok=True)
    if args.from_partials:
        partial = EnsemblePartial(config_hash(cfg), cfg.seed)
        for path in args.from_partials:
            partial = merge(partial, EnsemblePartial.from_dict(json.loads(Path(path).read_text())))
    else:
        ecfg = _ensemble_cfg(args, cfg, setup)
        ecfg = replace(ecfg, indices=_parse_indices(args.indices, ecfg.M))
        partial = run_partial(ecfg)
    if args.partial:
        _dump(args.partial, {**partial.to_dict(), "code_version": __version__})
        return 0 if all(r.valid for r in partial.results.values()) else 1
    _dump(out / "partial.json", {**partial.to_dict(), "code_version": __version__})
    (out / "config.json").write_text(config_echo(cfg) + "\n")
    try:
        report = build_report(partial, setup)
    except EnsembleFailure as exc:
        _dump(out / "ensemble.json", {**_meta(cfg), "failed": True, "error": str(exc)})
        print(f"ensemble failed: {exc}", file=sys.stderr)
        return 2
    text = report.to_json()
    (out / "ensemble.json").write_text(text + "\n")
    print(text)
    return 0 if report.passed and not report.failed else 1


def _iter_traj_dirs(root: Path):
    return sorted(p for p in root.rglob("traj-*") if (p / "summary.json").exists())


def cmd_audit(args) -> int:
    root = Path(args.path)
    if not root.exists():
        print(f"no artifacts at {root}", file=sys.stderr)
        return 2
    report = {"trajectories": [], "ensembles": [], "code_version": __version__}
    ok = True
    series = {}
    for d in _iter_traj_dirs(root):
        summary = json.loads((d / "summary.json").read_text())
        cfg = validate_config(json.loads((d / "config.json").read_text()))
        setup = build_setup(cfg)
        entry = {"path": str(d), "config_hash": summary.get("config_hash"), "valid": summary.get("valid")}
        recs = read_records_csv(d / "records.csv", summary.get("final_ke"))
        if recs and summary.get("cadence", 1) == 1:
            b = check_budget(recs, setup.params)
            entry["budget"] = b.to_dict()
            ok = ok and b.passed
            t = [recs[0].t] + [r.t + r.dt for r in recs]
            ke = [recs[0].ke_pre] + [r.ke_post for r in recs]
            series.setdefault(summary.get("config_hash"), []).append((setup, t, ke))
        div = max([summary.get("max_div_residual", 0.0)] + [r.div_residual for r in recs])
        entry["incompressibility"] = {"max_div_residual": div, "passed": div <= 1e-12}
        ok = ok and div <= 1e-12 and bool(summary.get("valid"))
        if (d / "final.ckpt").exists():
            ck = load_checkpoint(d / "final.ckpt")
            f = forcing_field(setup.params.forcing, setup.grid)
            pw = check_pointwise_inequalities([ck.u], f, setup.params)
            entry["pointwise"] = pw.to_dict()
            ok = ok and pw.passed
        report["trajectories"].append(entry)
    for h, items in sorted(series.items()):
        times = items[0][1]
        if len(items) >= 2 and all(np.array_equal(it[1], times) for it in items):
            setup = items[0][0]
            try:
                env = check_envelope(times, [it[2] for it in items], setup.params, setup.noise, setup.grid)
                report.setdefault("envelope", {})[h] = {"passed": env.passed, "max_excess": float(
                    np.max(env.empirical - env.envelope - 3 * env.mc_stderr))}
                ok = ok and env.passed
            except LSSMError as exc:
                report.setdefault("envelope", {})[h] = {"passed": False, "error": str(exc)}
                ok = False
    for p in sorted(root.rglob("partial.json")):
        partial = EnsemblePartial.from_dict(json.loads(p.read_text()))
        accs = [r.acc for r in partial.results.values() if r.valid]
        mart = martingale_summary(accs)
        report["ensembles"].append({"path": str(p), "martingale": mart})
        ok = ok and mart.get("passed", True)
    report["passed"] = ok
    text = json.dumps(_clean(report), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0 if ok else 1


SWEEP_COLUMNS = ("nu", "Re_nu", "eps", "ratio_B3", "residual_B1", "residual_B2")


def cmd_bound_sweep(args) -> int:
    rows, plot, ok = [], [], True
    for nu in args.nu:
        cfg = parse_config(args.config, list(args.set or ()) + [f"flow.nu={nu!r}"])
        setup = build_setup(cfg)
        ecfg = _ensemble_cfg(args, cfg, setup)
        out = run_dir(artifact_root(args, cfg), cfg)
        out.mkdir(parents=True, exist_ok=True)
        try:
            report = build_report(run_partial(ecfg), setup, args.ratio_cap)
        except EnsembleFailure as exc:
            print(f"nu={nu}: {exc}", file=sys.stderr)
            rows.append((nu, math.nan, math.nan, math.nan, math.nan, math.nan))
            ok = False
            continue
        (out / "ensemble.json").write_text(report.to_json() + "\n")
        st, b = report.pooled, report.bound or {}
        if st is None or "ratio_B3" not in b:
            ok = False
            rows.append((nu, math.nan, math.nan, math.nan, math.nan, math.nan))
            continue
        rows.append((nu, st["Re_nu"], st["eps"], b["ratio_B3"], b["residual_B1"], b["residual_B2"]))
        plot.append((nu, 1.0 / st["Re_nu"], st["eps"] * st["L"] / st["U"] ** 3, b["ratio_B3"], b["tol_B1"],
                     b["tol_B2"]))
        ok = ok and b["passed"] and not report.failed
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    plot_path = out_csv.with_name(out_csv.stem + "_plot.csv")
    with open(plot_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("nu", "inv_Re_nu", "eps_L_over_U3", "ratio_B3", "tol_B1", "tol_B2"))
        w.writerows([[repr(float(v)) for v in r] for r in plot])
    print(out_csv.read_text(), end="")
    return 0 if ok else 1


def cmd_spectrum_dump(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    shells, power = energy_spectrum(ck.u)
    lines = ["shell,energy"] + [f"{int(k)},{float(e)!r}" for k, e in zip(shells, power)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lssm", description="Stochastic Ladyzhenskaya-Smagorinsky flows on a periodic box.")
    ap.add_argument("--version", action="version", version=f"lssm {__version__}")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker processes")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="YAML or JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")
        p.add_argument("--root", help="artifact root directory")

    p = sub.add_parser("run", help="integrate one trajectory")
    with_config(p)
    p.add_argument("--index", type=int, default=0, help="trajectory (stream) index")
    p.add_argument("--restart", help="checkpoint to resume from")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ensemble", help="run an ensemble and pool its statistics")
    with_config(p)
    p.add_argument("--M", type=int, help="number of trajectories (overrides ensemble.M)")
    p.add_argument("--indices", help="run only indices a:b and write a partial")
    p.add_argument("--partial", help="write the partial result here instead of a report")
    p.add_argument("--from-partials", nargs="+", help="merge partial files and report")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("audit", help="audit stored artifacts")
    p.add_argument("path", help="artifact directory")
    p.add_argument("--out", help="write the audit JSON here")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bound-sweep", help="dissipation bounds over a list of viscosities")
    with_config(p)
    p.add_argument("--nu", type=float, nargs="+", required=True)
    p.add_argument("--M", type=int)
    p.add_argument("--ratio-cap", type=float, default=4.0)
    p.add_argument("--out", default="bound_sweep.csv")
    p.set_defaults(func=cmd_bound_sweep)

    p = sub.add_parser("spectrum-dump", help="shell-binned |u_hat|^2 of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_spectrum_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except LSSMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

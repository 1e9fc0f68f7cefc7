"""Command line: ``ldr-expand <command> [flags] <instance>``.

Every command writes CSV tables and a ``manifest.json`` into ``--out``.  Failures
exit nonzero with one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conic import SolverSettings
from .deterministic import PlanningError, solve_deterministic
from .duality import NEGATIVE_GAP, gap_sweep
from .evaluate import DISTRIBUTIONS, build_report, sample_xi, simulate
from .instances import InstanceError, instance_to_dict, load_instance
from .ldr import (
    INVESTMENTS,
    LdrPolicy,
    VarianceConfig,
    plan_values,
    policy_from_dict,
    policy_from_values,
    policy_to_dict,
    solve_primal_ldr,
)
from .model import ModelError, baseline_parameters
from .plotdata import CLASS_LABELS, capacity_bands, plot_bands, plot_emissions, plot_sensitivity, sensitivity_rows
from .structure import build_structure
from .worstcase import UnsupportedUncertainty, box_from_samples, solve_saa, worst_case_search

EXIT_USAGE, EXIT_INSTANCE, EXIT_SOLVER, EXIT_UNSUPPORTED, EXIT_NOTHING, EXIT_GAP = 2, 3, 4, 5, 6, 7


class CliError(Exception):
    def __init__(self, code: str, message: str, exit_code: int, details=None):
        super().__init__(message)
        self.code, self.exit_code, self.details = code, exit_code, details or []


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("USAGE", message, EXIT_USAGE)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def _settings(args) -> SolverSettings:
    base = SolverSettings.from_env()
    if args.tol is None:
        return base
    return SolverSettings(args.tol, args.tol, base.max_iter, base.verbose)


def _instance(args):
    inst = load_instance(args.instance)
    if getattr(args, "sigma2", None) is not None and args.command != "gap":
        cov = np.eye(inst.uncertainty.size) * args.sigma2
        cov[0, 0] = 0.0
        inst = inst.with_covariance(cov)
    return inst


def _instance_digest(inst) -> str:
    text = json.dumps(instance_to_dict(inst), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()


def _write_manifest(out: Path, args, inst, outputs, extra=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    doc = {
        "tool": "ldr-expand",
        "version": __version__,
        "command": args.command,
        "config": config,
        "seed": getattr(args, "seed", None),
        "instance": inst.system.name if inst is not None else None,
        "instance_sha256": _instance_digest(inst) if inst is not None else None,
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _seed(args):
    if getattr(args, "seed", None) is None:
        args.seed = secrets.randbits(32)
    return args.seed


def _risk_overrides(args) -> dict:
    out = {}
    for name in ("flow", "generation", "ramping", "storage", "emission", "investment"):
        v = getattr(args, f"eps_{name}", None)
        if v is not None:
            out[name] = v
    if getattr(args, "mode", None):
        out["mode"] = args.mode
    return out


def _variance(args) -> VarianceConfig | None:
    vals = {"generation": args.alpha_gen, "energy": args.alpha_energy, "power": args.alpha_power}
    if args.alpha is not None:
        vals = {k: (args.alpha if v is None else v) for k, v in vals.items()}
    if all(v is None for v in vals.values()):
        return None
    return VarianceConfig(**{k: (np.inf if v is None else v) for k, v in vals.items()})


def _investment_rows(policy: LdrPolicy):
    std = policy.investment_std()
    nominal = policy.investments()
    rows = []
    for name, _ in INVESTMENTS:
        for t in range(policy.stages):
            for i in range(nominal[name].shape[1]):
                rows.append((CLASS_LABELS[name], i, t, float(nominal[name][t, i]), float(std[name][t, i])))
    return rows


def _save_policy(out: Path, policy: LdrPolicy, name="policy.json") -> Path:
    path = out / name
    path.write_text(json.dumps(policy_to_dict(policy), sort_keys=True) + "\n")
    return path


def cmd_plan(args):
    out = Path(args.out)
    inst = _instance(args)
    out.mkdir(parents=True, exist_ok=True)
    settings = _settings(args)
    st = build_structure(inst.system, inst.uncertainty)
    if args.kind == "det":
        plan = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty), settings)
        policy = policy_from_values(st, plan_values(st, plan), plan.objective)
        costs = {"investment": plan.investment_cost, "om": plan.om_cost, "fuel": plan.fuel_cost}
        objective = plan.objective
    else:
        inst = inst.with_risk(**_risk_overrides(args))
        policy = solve_primal_ldr(inst, _variance(args), not args.no_budget, settings, st)
        costs = policy.expected_costs()
        objective = policy.objective
    outputs = [
        _save_policy(out, policy),
        write_csv(
            out / "cost.csv",
            ["plan", "investment", "om", "fuel", "total", "objective"],
            [(args.kind, costs["investment"], costs["om"], costs["fuel"], sum(costs.values()), objective)],
        ),
        write_csv(out / "investments.csv", ["class", "unit", "stage", "mean", "std"], _investment_rows(policy)),
        write_csv(out / "sensitivity.csv", ["stage", "decision", "coordinate", "value"], sensitivity_rows(policy)),
    ]
    _write_manifest(out, args, inst, outputs, {"plan": args.kind})
    print(f"{args.kind} plan objective {objective:.6f} -> {out}")
    return 0


def cmd_gap(args):
    out = Path(args.out)
    inst = load_instance(args.instance)
    out.mkdir(parents=True, exist_ok=True)
    cells = gap_sweep(inst.system, inst.uncertainty, args.sigma2, args.eps, args.modes, _settings(args))
    cells = sorted(cells, key=lambda c: (c.mode, c.sigma2, -c.eps))
    header = ["quantity"] + [f"{c.mode}|sigma2={c.sigma2:g}|eps={c.eps:g}" for c in cells]
    rows = [
        ["primal"] + [c.report.primal for c in cells],
        ["dual"] + [c.report.dual for c in cells],
        ["absolute"] + [c.report.absolute for c in cells],
        ["percent"] + [c.report.percent for c in cells],
    ]
    outputs = [
        write_csv(out / "gap.csv", header, rows),
        write_csv(
            out / "gap_cells.csv",
            ["mode", "sigma2", "eps", "primal", "dual", "absolute", "percent", "flag"],
            [(c.mode, c.sigma2, c.eps, c.report.primal, c.report.dual, c.report.absolute, c.report.percent, c.report.flag) for c in cells],
        ),
    ]
    _write_manifest(out, args, inst, outputs)
    bad = [c for c in cells if c.report.flag == NEGATIVE_GAP]
    if bad:
        raise CliError(NEGATIVE_GAP, "dual bound exceeds primal bound beyond tolerance", EXIT_GAP,
                       [f"{c.mode} sigma2={c.sigma2} eps={c.eps}: {c.report.absolute}" for c in bad])
    for c in cells:
        print(f"{c.mode} sigma2={c.sigma2:g} eps={c.eps:g}: P={c.report.primal:.4f} D={c.report.dual:.4f} gap={c.report.percent:.4f}%")
    return 0


def _plans(args, inst, settings):
    st = build_structure(inst.system, inst.uncertainty)
    plans = {}
    for item in args.policy or []:
        name, _, path = item.partition("=")
        if not path:
            raise CliError("USAGE", f"--policy expects NAME=PATH, got {item!r}", EXIT_USAGE)
        plans[name] = policy_from_dict(json.loads(Path(path).read_text()), st)
    for name in args.plans:
        if name == "det":
            plan = solve_deterministic(inst.system, baseline_parameters(inst.uncertainty), settings)
            plans["det"] = policy_from_values(st, plan_values(st, plan), plan.objective)
        elif name in ("normal", "dro"):
            plans[name] = solve_primal_ldr(inst.with_risk(mode=name), None, True, settings, st)
        else:
            raise CliError("USAGE", f"unknown plan {name!r}; expected det, normal or dro", EXIT_USAGE)
    if not plans:
        raise CliError("USAGE", "no plans to evaluate", EXIT_USAGE)
    return plans


def cmd_evaluate(args):
    out = Path(args.out)
    inst = _instance(args)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    settings = _settings(args)
    plans = _plans(args, inst, settings)
    samples = []
    for k, dist in enumerate(args.dist):
        scenarios = sample_xi(dist, inst.uncertainty, args.samples, seed + k)
        for name, policy in plans.items():
            samples.append(simulate(name, policy, scenarios, dist, args.penalty, not args.baseline_prices, settings))
    report = build_report(plans, samples, seed, reference=args.reference if args.reference in plans else None, bins=args.bins)
    header = ["plan", "dist", "scenarios", "seed", "mean_cost", "shed_frequency_pct", "shed_magnitude_gwh",
              "gen_dissimilarity_gw", "storage_dissimilarity_gwh", "std_generation", "std_energy", "std_power", "clip_rate"]
    rows = [
        (r.plan, r.dist, r.scenarios, r.seed, r.mean_cost, r.shed_frequency, r.shed_magnitude, r.gen_dissimilarity,
         r.storage_dissimilarity, r.std_generation, r.std_energy, r.std_power, r.clip_rate)
        for r in report.rows
    ]
    outputs = [
        write_csv(out / "report.csv", header, rows),
        write_csv(out / "emissions.csv", ["plan", "dist", "stage", "bin_lo", "bin_hi", "count"], report.histograms),
    ]
    for name, policy in plans.items():
        outputs.append(_save_policy(out, policy, f"policy_{name}.json"))
    _write_manifest(out, args, inst, outputs)
    for r in report.rows:
        print(f"{r.plan} {r.dist}: cost {r.mean_cost:.4f} shed {r.shed_frequency:.1f}% ({r.shed_magnitude:.4f} GWh)")
    return 0


def cmd_worstcase(args):
    out = Path(args.out)
    inst = _instance(args)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    settings = _settings(args)
    s, u = inst.system, inst.uncertainty
    st = build_structure(s, u)
    scenarios = sample_xi("normal", u, args.scenarios, seed)
    saa = solve_saa(s, u, scenarios, settings, st)
    policy = solve_primal_ldr(inst.with_risk(mode=args.mode), None, True, settings, st)
    lower, upper = box_from_samples(u, args.box_samples, seed + 1)
    res = worst_case_search(policy, saa.x1, lower, upper, args.budget, args.ldr_cost, args.restarts, seed, args.penalty, settings)
    std = np.sqrt(np.diag(u.covariance))
    rows = []
    for j in range(1, u.size):
        rows.append((j, std[j], lower[j], upper[j], res.xi[j], bool(res.at_lower[j]), bool(res.at_upper[j])))
    outputs = [
        write_csv(out / "worstcase.csv", ["coordinate", "std", "min", "max", "scenario", "at_min", "at_max"], rows),
        write_csv(
            out / "worstcase_summary.csv",
            ["loss", "method", "is_vertex", "vertex_loss", "certificate_loss", "anchor_loss", "evaluations", "budget_exhausted", "saa_objective", "ldr_objective"],
            [(res.loss, res.method, res.is_vertex, res.vertex_loss, res.certificate_loss, res.anchor_loss, res.evaluations,
              res.budget_exhausted, saa.objective, policy.objective)],
        ),
    ]
    _write_manifest(out, args, inst, outputs)
    print(f"worst-case loss {res.loss:.6f} ({res.method}, vertex={res.is_vertex})")
    return 0


def _runs(paths):
    found = []
    for p in paths:
        p = Path(p)
        if p.is_file() and p.name == "manifest.json":
            found.append(p.parent)
        elif p.is_dir():
            found.extend(sorted(m.parent for m in p.rglob("manifest.json")))
    return sorted(set(found))


def cmd_report(args):
    out = Path(args.out)
    runs = [r for r in _runs(args.runs) if r.resolve() != out.resolve()]
    policies, hist = {}, []
    inst = None
    for run in runs:
        man = json.loads((run / "manifest.json").read_text())
        if man.get("command") not in ("plan", "evaluate"):
            continue
        if inst is None:
            inst = load_instance(man["config"]["instance"])
        st = build_structure(inst.system, inst.uncertainty)
        for pfile in sorted(run.glob("policy*.json")):
            label = pfile.stem.replace("policy_", "") if pfile.stem != "policy" else man.get("plan", run.name)
            key = f"{run.name}:{label}" if len(runs) > 1 else label
            policies[key] = policy_from_dict(json.loads(pfile.read_text()), st)
        em = run / "emissions.csv"
        if em.exists():
            with open(em) as fh:
                for r in csv.DictReader(fh):
                    hist.append((r["plan"], r["dist"], int(r["stage"]), float(r["bin_lo"]), float(r["bin_hi"]), int(r["count"])))
    if not policies and not hist:
        raise CliError("NOTHING_TO_REPORT", "nothing to report: no plan or evaluate runs found", EXIT_NOTHING, [str(p) for p in args.runs])
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args)
    outputs = []
    if policies:
        scenarios = sample_xi("normal", inst.uncertainty, args.samples, seed)
        bands = {name: capacity_bands(p, scenarios) for name, p in policies.items()}
        outputs.append(write_csv(
            out / "bands.csv",
            ["plan", "class", "stage", "mean", "std", "lower", "upper", "q05", "q50", "q95"],
            [(name,) + r for name, rows in sorted(bands.items()) for r in rows],
        ))
        outputs.append(write_csv(
            out / "sensitivity.csv",
            ["plan", "stage", "decision", "coordinate", "value"],
            [(name,) + r for name, p in sorted(policies.items()) for r in sensitivity_rows(p)],
        ))
        plot_bands(bands, out / "capacity_bands.png")
        outputs.append(out / "capacity_bands.png")
        for name, p in sorted(policies.items()):
            fig = out / f"sensitivity_{name.replace(':', '_')}.png"
            plot_sensitivity(p, fig)
            outputs.append(fig)
    if hist:
        outputs.append(write_csv(out / "emissions.csv", ["plan", "dist", "stage", "bin_lo", "bin_hi", "count"], hist))
        plot_emissions(hist, out / "emissions.png")
        outputs.append(out / "emissions.png")
    _write_manifest(out, args, inst, outputs, {"runs": [str(r) for r in runs]})
    print(f"report with {len(policies)} policies and {len(hist)} histogram rows -> {out}")
    return 0


def _add_common(p, seed=False):
    p.add_argument("instance", help="instance JSON path or bundled name (desk4, desk4_reduced, micro3)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--tol", type=float, default=None, help="solver feasibility and gap tolerance")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def _add_risk(p):
    p.add_argument("--mode", choices=("dro", "normal"), default=None)
    for name in ("flow", "generation", "ramping", "storage", "emission", "investment"):
        p.add_argument(f"--eps-{name}", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ldr-expand", description="Chance-constrained expansion planning with linear decision rules")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    plan = sub.add_parser("plan", help="deterministic plan or rule-based policy")
    plan.add_argument("kind", choices=("det", "ldr"))
    _add_common(plan)
    _add_risk(plan)
    plan.add_argument("--sigma2", type=float, default=None, help="replace the covariance by sigma2 * I")
    plan.add_argument("--alpha", type=float, default=None, help="investment variance cap for every class")
    plan.add_argument("--alpha-gen", type=float, default=None)
    plan.add_argument("--alpha-energy", type=float, default=None)
    plan.add_argument("--alpha-power", type=float, default=None)
    plan.add_argument("--no-budget", action="store_true")
    plan.set_defaults(func=cmd_plan)

    gap = sub.add_parser("gap", help="primal/dual rule bounds on a variance and probability grid")
    _add_common(gap)
    gap.add_argument("--eps", type=float, nargs="+", default=[0.10, 0.05, 0.025])
    gap.add_argument("--sigma2", type=float, nargs="+", default=[0.05, 0.10, 0.15, 0.20, 0.25])
    gap.add_argument("--modes", nargs="+", choices=("normal", "dro"), default=["normal", "dro"])
    gap.set_defaults(func=cmd_gap)

    ev = sub.add_parser("evaluate", help="out-of-sample simulation with load shedding")
    _add_common(ev, seed=True)
    ev.add_argument("--plans", nargs="*", default=["det", "normal", "dro"])
    ev.add_argument("--policy", action="append", help="extra policy as NAME=PATH")
    ev.add_argument("--dist", nargs="+", choices=DISTRIBUTIONS, default=["normal"])
    ev.add_argument("--samples", type=int, default=1000)
    ev.add_argument("--penalty", type=float, default=None, help="shed penalty per GWh (instance default)")
    ev.add_argument("--baseline-prices", action="store_true", help="price investments at the baseline scenario")
    ev.add_argument("--reference", default="det")
    ev.add_argument("--bins", type=int, default=20)
    ev.add_argument("--sigma2", type=float, default=None)
    ev.set_defaults(func=cmd_evaluate)

    wc = sub.add_parser("worstcase", help="worst-case loss against a two-stage scenario program")
    _add_common(wc, seed=True)
    wc.add_argument("--mode", choices=("dro", "normal"), default="dro")
    wc.add_argument("--scenarios", type=int, default=50)
    wc.add_argument("--box-samples", type=int, default=1000)
    wc.add_argument("--budget", type=int, default=2000)
    wc.add_argument("--restarts", type=int, default=3)
    wc.add_argument("--ldr-cost", choices=("rule", "reoptimize"), default="rule")
    wc.add_argument("--penalty", type=float, default=None)
    wc.add_argument("--sigma2", type=float, default=None)
    wc.set_defaults(func=cmd_worstcase)

    rep = sub.add_parser("report", help="plot data and figures from earlier runs")
    rep.add_argument("runs", nargs="+", help="run directories (searched for manifest.json)")
    rep.add_argument("--out", default="report")
    rep.add_argument("--seed", type=int, default=None)
    rep.add_argument("--samples", type=int, default=1000)
    rep.set_defaults(func=cmd_report)
    return parser


def _fail(code: str, message: str, exit_code: int, details=None) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message, "details": details or []}) + "\n")
    return exit_code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        return _fail(exc.code, str(exc), exc.exit_code, exc.details)
    except InstanceError as exc:
        return _fail("INVALID_INSTANCE", "instance failed validation", EXIT_INSTANCE, exc.errors)
    except UnsupportedUncertainty as exc:
        return _fail("UNSUPPORTED_UNCERTAINTY", str(exc), EXIT_UNSUPPORTED)
    except ModelError as exc:
        return _fail("INVALID_INPUT", str(exc), EXIT_INSTANCE)
    except PlanningError as exc:
        status = exc.solution.status.value if exc.solution is not None else "FAILED"
        return _fail(f"SOLVER_{status}", str(exc), EXIT_SOLVER)
    except FileNotFoundError as exc:
        return _fail("NOT_FOUND", str(exc), EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())

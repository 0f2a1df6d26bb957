"""Experiment harness: scenario generation, solves, and the three studies.

Subcommands: scenario, solve, sweep-runtime, sweep-savings, sparsity,
maxmin. All outputs are CSV/JSON artifacts for offline plotting; every CSV
carries a header row and a "# config-hash" comment binding it to its inputs.
Runs are reproducible: the same spec and seeds give byte-identical outputs
except for wall-time columns. The CFPA_OUTPUT_DIR environment variable
overrides the output directory and nothing else.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .scenario import (ScenarioConfig, generate_geometry, build_covariances,
                       save_scenario, load_scenario, ETA_CLASS_B)
from .statistics import build_statistics, save_statistics, load_statistics
from .problem import assemble, relative_saving
from .solver import SolverOptions, penalty_minimize
from .oracle import max_min_sinr

log = logging.getLogger("cfpa")

OFF_AP_POWER_FRACTION = 1e-6


class CliError(Exception):
    """Input problem the user can fix; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# Spec plumbing
# ---------------------------------------------------------------------------

_SCENARIO_FIELDS = ("L", "K", "N", "area_side", "ap_height", "tau_p",
                    "pilot_power", "noise_ul", "noise_dl", "p_max", "eta_max",
                    "eta", "angular_spread", "service_set_size",
                    "mc_realizations", "seed")

_SOLVER_FIELDS = ("lambda0", "zeta", "mu_s", "tau", "epsilon", "eps_feas",
                  "max_penalty_iters", "max_apg_iters", "alpha_init",
                  "backtrack_factor", "max_backtracks", "model", "init_seed")


def make_config(args, **overrides):
    kw = {}
    for name in _SCENARIO_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    kw.update(overrides)
    try:
        return ScenarioConfig(**kw)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def make_options(args, **overrides):
    kw = {}
    for name in _SOLVER_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    kw.update(overrides)
    try:
        return SolverOptions(**kw)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def config_hash(payload):
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _hash_payload(args, command, **extra):
    payload = {"command": command, "version": __version__}
    for name in _SCENARIO_FIELDS + _SOLVER_FIELDS:
        payload[name] = getattr(args, name, None)
    payload.update(extra)
    return payload


def write_csv(path, header, rows, conf_hash, trailing_comments=()):
    lines = [f"# config-hash: {conf_hash}", ",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    lines.extend(trailing_comments)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    return str(value)


def statistics_for_config(config):
    scenario = build_covariances(generate_geometry(config))
    return build_statistics(scenario)


def load_input_statistics(args):
    """Statistics from --stats, from --scenario-file, or from config flags."""
    if getattr(args, "stats", None):
        if not os.path.exists(args.stats):
            raise CliError(f"stats file not found: {args.stats}")
        return load_statistics(args.stats)
    if getattr(args, "scenario_file", None):
        if not os.path.exists(args.scenario_file):
            raise CliError(f"scenario file not found: {args.scenario_file}")
        scenario = load_scenario(args.scenario_file)
        return build_statistics(scenario)
    return statistics_for_config(make_config(args))


def _out_dir(args):
    out = os.environ.get("CFPA_OUTPUT_DIR") or args.out_dir
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _parse_int_list(text, field_name):
    try:
        return [int(tok) for tok in str(text).split(",") if tok != ""]
    except ValueError as exc:
        raise CliError(f"invalid {field_name}: {text!r}") from exc


def _parse_float_list(text, field_name):
    try:
        return [float(tok) for tok in str(text).split(",") if tok != ""]
    except ValueError as exc:
        raise CliError(f"invalid {field_name}: {text!r}") from exc


def _seed_list(args):
    if getattr(args, "seeds", None):
        return _parse_int_list(args.seeds, "seeds")
    return list(range(getattr(args, "seed_count", 1) or 1))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_scenario(args):
    out = _out_dir(args)
    config = make_config(args)
    scenario = build_covariances(generate_geometry(config))
    save_scenario(scenario, out / "scenario.json")
    stats = build_statistics(scenario)
    save_statistics(stats, out / "statistics.json")
    log.info("wrote %s and %s", out / "scenario.json", out / "statistics.json")
    return 0


def _targets_from_args(args):
    se = getattr(args, "se_target", None)
    sinr_t = getattr(args, "sinr_target", None)
    if se is None and sinr_t is None:
        raise CliError("missing field: se_target (or sinr_target)")
    if se is not None and sinr_t is not None:
        raise CliError("conflicting fields: se_target and sinr_target")
    if se is not None:
        return {"se_targets": _parse_float_list(se, "se_target")}
    return {"sinr_targets": _parse_float_list(sinr_t, "sinr_target")}


def run_solve(args):
    stats = load_input_statistics(args)
    targets = _targets_from_args(args)
    for key, vals in targets.items():
        if len(vals) == 1:
            targets[key] = vals[0]
        elif len(vals) != stats.K:
            raise CliError(f"{key} must have 1 or K={stats.K} entries")
    data = assemble(stats, p_max=args.p_max if args.p_max is not None else 1.0,
                    eta_max=args.eta_max if args.eta_max is not None else ETA_CLASS_B,
                    eta=args.eta, **targets)
    options = make_options(args)
    result = penalty_minimize(data, options)
    return result, data


def cmd_solve(args):
    out = _out_dir(args)
    result, _ = run_solve(args)
    conf = config_hash(_hash_payload(args, "solve",
                                     se_target=getattr(args, "se_target", None),
                                     sinr_target=getattr(args, "sinr_target", None)))
    doc = result.to_dict()
    doc["config_hash"] = conf
    with open(out / "result.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    result.save_trace_csv(out / "trace.csv", config_hash=conf)
    log.info("solve %s: feasible=%s consumed_nl=%.6g W",
             conf, result.feasible, result.consumed_nonlinear)
    return 0 if result.feasible else 2


def run_runtime_sweep(args):
    L_list = _parse_int_list(args.L_list, "L_list")
    if not L_list:
        raise CliError("empty field: L_list")
    if L_list != sorted(L_list):
        raise CliError("L_list must be ascending")
    seeds = _seed_list(args)
    se_target = args.se_target_value if args.se_target_value is not None else 2.0
    options_model = args.model or "non-linear"
    rows = []
    for L in L_list:
        for seed in seeds:
            config = make_config(args, L=L, seed=seed)
            stats = statistics_for_config(config)
            data = assemble(stats, se_targets=se_target, p_max=config.p_max,
                            eta_max=config.eta_max, eta=config.eta)
            options = make_options(args, model=options_model, init_seed=seed)
            result = penalty_minimize(data, options)
            obj = (result.consumed_nonlinear if options.model == "non-linear"
                   else result.consumed_ideal)
            rows.append([L, seed, result.wall_time * 1e3, result.penalty_iterations,
                         result.apg_iterations_total, obj, result.feasible])
    slope = _loglog_slope(rows)
    return {"rows": rows, "slope": slope, "L_list": L_list, "seeds": seeds,
            "se_target": se_target}


def _loglog_slope(rows):
    medians = {}
    for L in sorted({r[0] for r in rows}):
        walls = [r[2] for r in rows if r[0] == L and r[6]]
        if walls:
            medians[L] = float(np.median(walls))
    if len(medians) < 2:
        return float("nan")
    xs = np.log(np.array(sorted(medians)))
    ys = np.log(np.array([medians[L] for L in sorted(medians)]))
    return float(np.polyfit(xs, ys, 1)[0])


def cmd_sweep_runtime(args):
    out = _out_dir(args)
    sweep = run_runtime_sweep(args)
    conf = config_hash(_hash_payload(args, "sweep-runtime", L_list=sweep["L_list"],
                                     seeds=sweep["seeds"], se_target=sweep["se_target"]))
    write_csv(out / "runtime.csv",
              ["L", "seed", "wall_ms", "I_penalty", "I_APG_total", "objective_W",
               "feasible"],
              sweep["rows"], conf,
              trailing_comments=[f"# loglog-slope-median-wall-ms-vs-L: {sweep['slope']!r}"])
    log.info("runtime sweep: slope=%.3f", sweep["slope"])
    return 0


def run_savings_sweep(args):
    L_list = _parse_int_list(args.L_list, "L_list")
    fractions = _parse_float_list(args.fractions, "fractions")
    if not L_list:
        raise CliError("empty field: L_list")
    if not fractions:
        raise CliError("empty field: fractions")
    if any(not 0.0 < f <= 1.0 for f in fractions):
        raise CliError("fractions must lie in (0, 1]")
    seeds = _seed_list(args)
    tol = args.bisection_tol if args.bisection_tol is not None else 0.01
    rows = []
    for L in L_list:
        for seed in seeds:
            config = make_config(args, L=L, seed=seed)
            stats = statistics_for_config(config)
            data = assemble(stats, sinr_targets=1.0, p_max=config.p_max,
                            eta_max=config.eta_max, eta=config.eta)
            base_opts = make_options(args, init_seed=seed)
            mm = max_min_sinr(data, bisection_tol=tol, options=base_opts)
            if mm.se_mm <= 0.0:
                log.warning("savings: max-min probe found no feasible rate for "
                            "L=%d seed=%d, skipping group", L, seed)
                continue
            for frac in fractions:
                se_t = frac * mm.se_mm
                trial = data.with_targets(se_targets=se_t)
                res_i = penalty_minimize(trial, replace(base_opts, model="ideal"))
                res_n = penalty_minimize(trial, replace(base_opts, model="non-linear"))
                if not (res_i.feasible and res_n.feasible):
                    log.warning("savings: infeasible solve at L=%d seed=%d frac=%.3g",
                                L, seed, frac)
                    continue
                p_ref = res_i.consumed_nonlinear
                p_opt = res_n.consumed_nonlinear
                saving = relative_saving(res_i.x_star, res_n.x_star, trial)
                rows.append([L, seed, frac, se_t, p_ref, p_opt, saving, tol])
    return {"rows": rows, "L_list": L_list, "fractions": fractions,
            "seeds": seeds, "bisection_tol": tol}


def cmd_sweep_savings(args):
    out = _out_dir(args)
    sweep = run_savings_sweep(args)
    conf = config_hash(_hash_payload(args, "sweep-savings", L_list=sweep["L_list"],
                                     fractions=sweep["fractions"], seeds=sweep["seeds"],
                                     bisection_tol=sweep["bisection_tol"]))
    write_csv(out / "savings.csv",
              ["L", "seed", "fraction", "se_target", "P_nl_of_ideal_opt",
               "P_nl_of_nl_opt", "saving", "bisection_tol"],
              sweep["rows"], conf)
    return 0


def run_sparsity(args):
    seeds = _seed_list(args)
    se_target = args.se_target_value if args.se_target_value is not None else 6.0
    rows = []
    counts = []
    for seed in seeds:
        config = make_config(args, seed=seed)
        stats = statistics_for_config(config)
        data = assemble(stats, se_targets=se_target, p_max=config.p_max,
                        eta_max=config.eta_max, eta=config.eta)
        res_i = penalty_minimize(data, make_options(args, model="ideal", init_seed=seed))
        res_n = penalty_minimize(data, make_options(args, model="non-linear",
                                                    init_seed=seed))
        if not (res_i.feasible and res_n.feasible):
            log.warning("sparsity: infeasible seed %d skipped", seed)
            continue
        threshold = OFF_AP_POWER_FRACTION * config.p_max
        rank = np.argsort(-res_n.per_ap_tx, kind="stable")
        for ap in rank:
            rows.append([seed, int(ap), float(res_i.per_ap_tx[ap]),
                         float(res_n.per_ap_tx[ap])])
        counts.append([seed, int(np.sum(res_i.per_ap_tx < threshold)),
                       int(np.sum(res_n.per_ap_tx < threshold))])
    return {"rows": rows, "counts": counts, "seeds": seeds, "se_target": se_target}


def cmd_sparsity(args):
    out = _out_dir(args)
    study = run_sparsity(args)
    conf = config_hash(_hash_payload(args, "sparsity", seeds=study["seeds"],
                                     se_target=study["se_target"]))
    write_csv(out / "sparsity.csv",
              ["seed", "ap_index", "ptx_ideal_W", "ptx_nl_W"], study["rows"], conf)
    write_csv(out / "sparsity_counts.csv",
              ["seed", "off_count_ideal", "off_count_nl"], study["counts"], conf)
    return 0


def cmd_maxmin(args):
    out = _out_dir(args)
    stats = load_input_statistics(args)
    data = assemble(stats, sinr_targets=1.0,
                    p_max=args.p_max if args.p_max is not None else 1.0,
                    eta_max=args.eta_max if args.eta_max is not None else ETA_CLASS_B,
                    eta=args.eta)
    tol = args.bisection_tol if args.bisection_tol is not None else 0.01
    report = max_min_sinr(data, bisection_tol=tol, options=make_options(args))
    conf = config_hash(_hash_payload(args, "maxmin", bisection_tol=tol))
    doc = {"gamma_mm": report.gamma_mm, "se_mm": report.se_mm,
           "bracket": list(report.bracket), "probes": report.probes,
           "bisection_tol": report.bisection_tol, "config_hash": conf}
    with open(out / "maxmin.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
    log.info("max-min SE: %.4f bits/s/Hz (%d probes)", report.se_mm, report.probes)
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_scenario_flags(p):
    p.add_argument("--L", type=int, help="number of APs")
    p.add_argument("--K", type=int, help="number of users")
    p.add_argument("--N", type=int, help="antennas per AP")
    p.add_argument("--area-side", dest="area_side", type=float)
    p.add_argument("--ap-height", dest="ap_height", type=float)
    p.add_argument("--tau-p", dest="tau_p", type=int)
    p.add_argument("--pilot-power", dest="pilot_power", type=float)
    p.add_argument("--noise-ul", dest="noise_ul", type=float)
    p.add_argument("--noise-dl", dest="noise_dl", type=float)
    p.add_argument("--p-max", dest="p_max", type=float)
    p.add_argument("--eta-max", dest="eta_max", type=float)
    p.add_argument("--eta", dest="eta", type=float)
    p.add_argument("--angular-spread", dest="angular_spread", type=float)
    p.add_argument("--service-set-size", dest="service_set_size", type=int)
    p.add_argument("--M", dest="mc_realizations", type=int,
                   help="Monte-Carlo realizations for the statistics")
    p.add_argument("--seed", type=int)


def _add_solver_flags(p):
    p.add_argument("--model", choices=["ideal", "non-linear"])
    p.add_argument("--lambda0", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--mu-s", dest="mu_s", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--eps-feas", dest="eps_feas", type=float)
    p.add_argument("--max-penalty-iters", dest="max_penalty_iters", type=int)
    p.add_argument("--max-apg-iters", dest="max_apg_iters", type=int)
    p.add_argument("--alpha-init", dest="alpha_init", type=float)
    p.add_argument("--init-seed", dest="init_seed", type=int)


def _add_common(p):
    p.add_argument("--out-dir", dest="out_dir", default=".",
                   help="output directory (CFPA_OUTPUT_DIR overrides)")
    p.add_argument("--spec", help="JSON file with defaults for any flag")


def build_parser():
    parser = _Parser(prog="cfpa", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenario", help="generate scenario.json and statistics.json")
    _add_scenario_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("solve", help="solve one allocation problem")
    _add_scenario_flags(p)
    _add_solver_flags(p)
    _add_common(p)
    p.add_argument("--stats", help="statistics JSON (skips the channel pipeline)")
    p.add_argument("--scenario-file", dest="scenario_file", help="scenario JSON")
    p.add_argument("--se-target", dest="se_target",
                   help="per-user SE targets, bits/s/Hz (scalar or comma list)")
    p.add_argument("--sinr-target", dest="sinr_target",
                   help="per-user linear SINR targets (scalar or comma list)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("sweep-runtime", help="solve-time scaling vs network size")
    _add_scenario_flags(p)
    _add_solver_flags(p)
    _add_common(p)
    p.add_argument("--L-list", dest="L_list", default="25,50,100")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--seed-count", dest="seed_count", type=int, default=5)
    p.add_argument("--se-target", dest="se_target_value", type=float,
                   help="common SE target (default 2.0)")
    p.set_defaults(func=cmd_sweep_runtime, K=15)

    p = sub.add_parser("sweep-savings", help="relative savings vs load fraction")
    _add_scenario_flags(p)
    _add_solver_flags(p)
    _add_common(p)
    p.add_argument("--L-list", dest="L_list", default="10,25")
    p.add_argument("--fractions", default="0.1,0.5,0.9")
    p.add_argument("--seeds")
    p.add_argument("--seed-count", dest="seed_count", type=int, default=20)
    p.add_argument("--bisection-tol", dest="bisection_tol", type=float)
    p.set_defaults(func=cmd_sweep_savings)

    p = sub.add_parser("sparsity", help="per-AP power split under both models")
    _add_scenario_flags(p)
    _add_solver_flags(p)
    _add_common(p)
    p.add_argument("--seeds")
    p.add_argument("--seed-count", dest="seed_count", type=int, default=20)
    p.add_argument("--se-target", dest="se_target_value", type=float,
                   help="common SE target (default 6.0)")
    p.set_defaults(func=cmd_sparsity, K=5, L=15)

    p = sub.add_parser("maxmin", help="max-min achievable SE by bisection")
    _add_scenario_flags(p)
    _add_solver_flags(p)
    _add_common(p)
    p.add_argument("--stats")
    p.add_argument("--scenario-file", dest="scenario_file")
    p.add_argument("--bisection-tol", dest="bisection_tol", type=float)
    p.set_defaults(func=cmd_maxmin)

    return parser


def _apply_spec_file(parser, argv):
    if "--spec" not in argv:
        return argv
    idx = argv.index("--spec")
    if idx + 1 >= len(argv):
        raise CliError("missing value for --spec")
    path = argv[idx + 1]
    if not os.path.exists(path):
        raise CliError(f"spec file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        spec = json.load(fh)
    if not isinstance(spec, dict):
        raise CliError("spec file must hold a JSON object")
    parser.set_defaults(**spec)
    return argv


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_spec_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()

"""Command-line interface.

Subcommands: ``stepsize-sim``, ``run``, ``counterexample`` and ``verify``.
Exit codes: 0 when every enabled check passes, 1 on a check failure, 2 on a
usage or configuration error. Options may also come from a ``key=value``
file given with ``--config``; flags on the command line win.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys

import numpy as np

from . import analysis
from .bcd_sim import bcd_run
from .dataio import (
    LABEL_RULES,
    ensure_parent,
    load_libsvm,
    partition_batches,
    read_trace_csv,
    synth_logreg,
    write_trace_csv,
)
from .delay import DelayModel, parse_delay_spec
from .errors import DelayAdaptError
from .numkit import LogisticProblem, quadratic_problem, random_quadratic, reference_solution
from .piag_sim import piag_run
from .runtime import audit_delays, audit_principle, run_parameter_server, run_shared_memory
from .stepsize import POLICY_KINDS, PolicyConfig, make_policy, step_size_sequence

log = logging.getLogger("delayadapt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(DelayAdaptError):
    pass


def _read_config_file(path):
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    raise UsageError(f"{path}:{lineno}: expected key=value")
                values[key.strip().replace("-", "_")] = value.strip()
    except OSError as err:
        raise UsageError(f"cannot read config {path}: {err}") from err
    return values


def _apply_config(parser, sub, argv):
    """Feed ``--config`` values in as defaults, converting with each action's type."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = _read_config_file(known.config)
    for name, subparser in sub.choices.items():
        actions = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in values.items():
            action = actions.get(key)
            if action is None:
                continue
            if action.nargs in ("*", "+"):
                defaults[key] = [action.type(v) if action.type else v for v in raw.split()]
            elif isinstance(action, argparse._StoreTrueAction):
                defaults[key] = raw.lower() in ("1", "true", "yes")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        unknown = set(values) - set(actions)
        if unknown and name == argv_command(argv, sub.choices):
            raise UsageError(f"unknown config keys for {name}: {', '.join(sorted(unknown))}")
        subparser.set_defaults(**defaults)


def argv_command(argv, commands):
    for token in argv:
        if token in commands:
            return token
    return None


# --------------------------------------------------------------------------
# problem construction


def build_problem(args, algo):
    """Problem described by ``--problem`` plus its reference solution."""
    source = args.problem
    if source == "quadratic1d":
        problem = quadratic_problem()
    elif source == "quadratic":
        problem = random_quadratic(args.dim, args.workers if algo == "piag" else 1, args.data_seed, lam1=args.lam1)
    elif source == "synthetic" or source.startswith("libsvm:"):
        if source == "synthetic":
            data = synth_logreg(args.n_samples, args.dim, args.data_seed, args.separability)
        else:
            data = load_libsvm(source[len("libsvm:"):], label_rule=args.label_rule, scale=args.scale)
        n = args.workers if algo == "piag" else 1
        problem = LogisticProblem(data, partition_batches(data, n), lam1=args.lam1, lam2=args.lam2)
    else:
        raise UsageError(f"unknown problem {source!r}; use synthetic, quadratic, quadratic1d or libsvm:<path>")
    if args.blocks > problem.dim:
        raise UsageError(f"--blocks {args.blocks} exceeds the dimension {problem.dim}")
    problem.set_blocks(args.blocks)
    if problem.p_star is None:
        reference_solution(problem)
    return problem


def _policy(args, problem, algo, tau_bound):
    return make_policy(
        args.policy,
        problem,
        algo=algo,
        h=args.h,
        alpha=args.alpha,
        tau_bound=tau_bound,
        c=args.c,
        b=args.b,
    )


def _pick_case(args, problem):
    if args.case != "auto":
        return args.case
    return "pl" if problem.sigma is not None else "nonconvex"


# --------------------------------------------------------------------------
# run


def _check_lines(checks):
    return "".join(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}\n" for name, ok, detail in checks)


def _piag_checks(args, trace, problem, policy):
    checks = []
    if trace.final.get("diverged"):
        checks.append(("divergence", False, "objective exceeded 1e6 x its initial value"))
    else:
        checks.append(("divergence", True, "objective stayed bounded"))
        case = _pick_case(args, problem)
        report = analysis.verify_sequence(analysis.bundle_from_piag(trace, case))
        checks.append((f"Lyapunov sequence ({case})", report.passed, f"worst slack {report.worst_slack:.3g}"))
        partial, bound = analysis.stationarity_sum_bound(trace)
        ok = bool(np.all(partial <= bound + 1e-9))
        checks.append(("weighted stationarity sum", ok, f"{partial[-1]:.6g} <= {bound:.6g}"))
        if case == "pl":
            gaps, env = analysis.linear_rate_envelope(trace)
            ok = bool(np.all(gaps <= env + 1e-9))
            checks.append(("linear-rate envelope", ok, f"final gap {gaps[-1]:.3g} vs {env[-1]:.3g}"))
    checks += _integral_checks(trace, policy)
    return checks


def _integral_checks(trace, policy):
    if policy.kind not in ("adaptive1", "adaptive2") or len(trace) == 0:
        return []
    tau = int(trace.tau.max())
    rep = analysis.check_integral_bound(trace.gamma, tau, policy.alpha, policy.gamma_prime, policy.kind)
    return [("step-size integral lower bound", rep.passed, f"worst margin {rep.worst_margin:.3g} (tau={tau})")]


def cmd_run(args):
    algo = args.algo
    if args.backend == "threads" and args.delay is not None:
        raise UsageError("--delay is not allowed with --backend threads (delays are measured)")
    if args.backend == "sim" and args.delay is None:
        raise UsageError("--backend sim needs --delay")
    problem = build_problem(args, algo)
    delay = parse_delay_spec(args.delay, seed=args.delay_seed) if args.delay else None
    tau_bound = args.tau_bound
    if tau_bound is None and delay is not None:
        tau_bound = delay.bound
    policy = _policy(args, problem, algo, tau_bound)
    out = args.out
    ensure_parent(out)
    checks = []
    if args.backend == "threads":
        if algo == "piag":
            trace, events = run_parameter_server(problem, policy, args.workers, args.kmax)
        else:
            trace, events = run_shared_memory(problem, policy, args.workers, args.kmax, seed=args.seed)
        events.dump(out + ".events.tsv")
        bad = audit_delays(trace, events)
        checks.append(("delay audit", not bad, f"{len(bad)} mismatches"))
        if policy.respects_principle and policy.kind != "fixed":
            bad = audit_principle(trace, policy.gamma_prime)
            checks.append(("step-size principle", not bad, f"{len(bad)} violations"))
        fin, ini = trace.final["objective"], trace.objective[0]
        checks.append(("objective decrease", fin < ini, f"{ini:.6g} -> {fin:.6g}"))
        write_trace_csv(trace, out)
    elif algo == "piag":
        trace = piag_run(problem, delay, policy, args.kmax)
        write_trace_csv(trace, out)
        checks += _piag_checks(args, trace, problem, policy)
    else:
        traces = []
        for s in range(args.seeds):
            traces.append(
                bcd_run(
                    problem,
                    delay,
                    policy,
                    args.kmax,
                    seed=args.seed + s,
                    consistent=args.read == "consistent",
                    p=args.p_include,
                )
            )
        root, ext = os.path.splitext(out)
        for s, t in enumerate(traces):
            write_trace_csv(t, out if s == 0 else f"{root}.seed{args.seed + s}{ext or '.csv'}")
        report = analysis.verify_sequence(analysis.bundle_from_bcd(traces))
        label = "Lyapunov sequence (expectation)" if len(traces) > 1 else "Lyapunov sequence (single seed)"
        checks.append((label, report.passed, f"worst slack {report.worst_slack:.3g}"))
        lhs, rhs = analysis.mapping_sum_bound(traces)
        checks.append(("mapping-norm sum", lhs <= rhs, f"{lhs:.6g} <= {rhs:.6g}"))
        checks += _integral_checks(traces[0], policy)
        trace = traces[0]
    text = _check_lines(checks)
    report_path = args.report or out + ".report.txt"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    sys.stdout.write(text)
    passed = all(ok for _, ok, _ in checks)
    print(f"trace: {out}\nreport: {report_path}")
    return EXIT_OK if passed else EXIT_FAIL


# --------------------------------------------------------------------------
# stepsize-sim


def cmd_stepsize_sim(args):
    os.makedirs(args.out, exist_ok=True)
    for spec in args.delay:
        model = parse_delay_spec(spec, seed=args.delay_seed)
        taus = np.array([model.delay(k) for k in range(args.kmax)], dtype=np.int64)
        fixed_integral = None
        summary = []
        for kind in args.policies:
            cfg = PolicyConfig(
                kind=kind,
                gamma_prime=args.gamma_prime,
                alpha=args.alpha,
                h=args.h,
                tau_bound=model.bound,
                c=args.c,
                b=args.b,
                L=args.h / args.gamma_prime,
                L_hat=args.h / args.gamma_prime,
                m=1,
            )
            gammas = step_size_sequence(cfg, taus)
            integral = np.cumsum(gammas)
            name = spec.replace(":", "").replace("@", "at").replace("/", "_")
            path = os.path.join(args.out, f"{kind}_{name}.csv")
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for key, value in {**cfg.describe(), **model.describe()}.items():
                    fh.write(f"#{key}={value}\n")
                fh.write("k,tau,gamma,integral\n")
                for k in range(len(taus)):
                    fh.write(f"{k},{taus[k]},{gammas[k]:.17g},{integral[k]:.17g}\n")
            if kind == "fixed":
                fixed_integral = integral[-1]
            summary.append((kind, gammas[-1], integral[-1], path))
        print(f"delay model {spec}:")
        for kind, last, total, path in summary:
            ratio = f"  ratio vs fixed {total / fixed_integral:.4f}" if fixed_integral else ""
            print(f"  {kind:12s} final gamma {last:.6g}  integral {total:.6g}{ratio}  -> {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# counterexample


def cmd_counterexample(args):
    T, c, b = args.period, args.c, args.b
    problem = quadratic_problem()
    model = DelayModel("cyclic", tau=T)
    threshold = b * (math.exp(2.0 / c) - 1.0)
    ok = True
    naive_cfg = PolicyConfig("naive", gamma_prime=args.h / problem.L, c=c, b=b)
    period_sum = math.fsum(c / (t + b) for t in range(T))
    print(f"period T={T}: naive period sum {period_sum:.6f} ({'>' if period_sum > 2 else '<='} 2)")
    print(f"sufficient divergence condition T > b(e^(2/c) - 1) = {threshold:.4f}: {'met' if T > threshold else 'not met'}")
    trace = piag_run(problem, model, naive_cfg, args.periods * T)
    x = np.sqrt(2.0 * trace.objectives_with_final())  # |x_k| for f = x^2/2
    growth = x[T::T] / x[:-T:T][: len(x[T::T])]
    print(f"naive: |x_{len(x) - 1}|/|x_0| = {x[-1] / x[0]:.6g}, per-period growth {growth[-1]:.6f}")
    if T > threshold:
        diverged = x[-1] / x[0] > 1e6
        print(f"  divergence confirmed: {diverged}")
        ok &= diverged
    for kind in ("adaptive1", "adaptive2"):
        cfg = make_policy(kind, problem, h=args.h, alpha=args.alpha)
        trace = piag_run(problem, model, cfg, args.kmax)
        x = np.sqrt(2.0 * trace.objectives_with_final())
        hit = np.flatnonzero(x < 1e-8)
        first = int(hit[0]) if hit.size else None
        print(f"{kind}: |x_K| = {x[-1]:.3g}; first |x_k| < 1e-8 at k = {first}")
        ok &= first is not None
    return EXIT_OK if ok else EXIT_FAIL


# --------------------------------------------------------------------------
# verify


def cmd_verify(args):
    traces = [read_trace_csv(p) for p in args.traces]
    algo = traces[0].config.get("algo")
    if algo == "piag":
        if len(traces) != 1:
            raise UsageError("verify takes one PIAG trace")
        case = args.case if args.case != "auto" else ("pl" if "sigma" in traces[0].config else "nonconvex")
        bundle = analysis.bundle_from_piag(traces[0], case)
    else:
        bundle = analysis.bundle_from_bcd(traces)
    report = analysis.verify_sequence(bundle)
    sys.stdout.write(report.text())
    if args.report:
        report.to_csv(args.report)
    return EXIT_OK if report.passed else EXIT_FAIL


# --------------------------------------------------------------------------


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _unit_interval(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text}")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="delayadapt", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def policy_flags(p, default_policy="adaptive2"):
        p.add_argument("--h", type=_unit_interval, default=0.99, help="step-size cap factor in (0, 1)")
        p.add_argument("--alpha", type=float, default=0.9, help="Adaptive 1 factor in (0, 1]")
        p.add_argument("--c", type=float, default=1.0, help="naive policy numerator")
        p.add_argument("--b", type=float, default=1.0, help="naive policy offset")

    p = sub.add_parser("stepsize-sim", help="step-size sequences of each policy under delay models")
    p.add_argument("--delay", nargs="+", default=["burst:5", "constant:5", "uniform:5"])
    p.add_argument("--policies", nargs="+", default=["adaptive1", "adaptive2", "fixed"], choices=POLICY_KINDS)
    p.add_argument("--gamma-prime", type=float, default=1.0)
    p.add_argument("--kmax", type=_positive_int, default=100)
    p.add_argument("--delay-seed", type=int, default=0)
    p.add_argument("--out", default="stepsize_out", help="output directory")
    policy_flags(p)
    p.set_defaults(func=cmd_stepsize_sim)

    p = sub.add_parser("run", help="run PIAG or Async-BCD and check the run")
    p.add_argument("--algo", choices=("piag", "bcd"), default="piag")
    p.add_argument("--backend", choices=("sim", "threads"), default="sim")
    p.add_argument("--problem", default="synthetic", help="synthetic | quadratic | quadratic1d | libsvm:<path>")
    p.add_argument("--policy", choices=POLICY_KINDS, default="adaptive2")
    p.add_argument("--delay", help="zero | constant:T | uniform:T | burst:T[@k] | cyclic:T | trace:<file>")
    p.add_argument("--delay-seed", type=int, default=0)
    p.add_argument("--tau-bound", type=int, help="delay bound for fixed baselines (default: the delay model's)")
    p.add_argument("--kmax", type=_positive_int, default=1000)
    p.add_argument("--workers", type=_positive_int, default=10, help="PIAG components / threads")
    p.add_argument("--blocks", type=_positive_int, default=1, help="Async-BCD blocks")
    p.add_argument("--seed", type=int, default=0, help="block-selection seed (Async-BCD)")
    p.add_argument("--seeds", type=_positive_int, default=1, help="Async-BCD simulator seeds to average")
    p.add_argument("--read", choices=("consistent", "inconsistent"), default="inconsistent")
    p.add_argument("--p-include", type=float, default=0.5)
    p.add_argument("--n-samples", type=_positive_int, default=200)
    p.add_argument("--dim", type=_positive_int, default=50)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--separability", type=float, default=math.inf)
    p.add_argument("--lam1", type=float, default=1e-5)
    p.add_argument("--lam2", type=float, default=1e-4)
    p.add_argument("--label-rule", choices=LABEL_RULES, default="sign")
    p.add_argument("--scale", action="store_true", help="max-abs scale libsvm features")
    p.add_argument("--case", choices=("auto",) + analysis.CASES, default="auto")
    p.add_argument("--out", default="run.csv")
    p.add_argument("--report")
    policy_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("counterexample", help="naive delay-dependent step-size vs adaptive ones on x^2/2")
    p.add_argument("--period", type=_positive_int, default=7)
    p.add_argument("--periods", type=_positive_int, default=100)
    p.add_argument("--kmax", type=_positive_int, default=5000)
    policy_flags(p)
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("verify", help="check a saved trace (several for an Async-BCD ensemble)")
    p.add_argument("traces", nargs="+")
    p.add_argument("--case", choices=("auto",) + analysis.CASES, default="auto")
    p.add_argument("--report", help="write per-iteration slacks as CSV")
    p.set_defaults(func=cmd_verify)
    for p in sub.choices.values():
        p.add_argument("--config", help="key=value file of defaults; flags win")
    return parser, sub


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("DELAYADAPT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser, sub = build_parser()
    try:
        _apply_config(parser, sub, argv)
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except DelayAdaptError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (DelayAdaptError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

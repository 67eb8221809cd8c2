"""Command-line front end.

Subcommands: ``train`` (adversarial map training), ``baseline`` (discrete
solvers and the Lipschitz-critic GANs), ``analyze`` (closed-form descent,
geodesic, deviation and flow experiments), ``experiment`` (the full
method-by-seed comparison grid).

Configuration comes from an optional JSON file (``--config``) holding up
to three sections — ``train``, ``experiment``, ``geometry`` — whose keys
mirror the corresponding dataclasses exactly; unknown keys are rejected.
Command-line flags win over file values.

Exit codes: 0 success, 2 usage or validation error, 3 numerical failure
(NaN/divergence), 4 solver non-convergence.  The output root defaults to
``out`` and can be overridden by ``--out`` or, globally, the
``MONGE_LAB_OUT`` environment variable (the variable wins).

Every command honors ``--seed``; repeating an invocation with the same
seed reproduces its CSV outputs byte for byte.
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np

from .datasets import (
    DATASET_PAIRS,
    EmpiricalMeasure,
    Geometry2D,
    MeasureStream,
    dataset_pair,
    gaussian_monge_map,
    gaussian_spec,
    gaussian_w2,
)
from .discrete_ot import (
    TransportPlan,
    cost_matrix,
    exact_assignment,
    fit_barycentric_net,
    sinkhorn,
)
from .errors import NonConvergenceError, NumericalError
from .evaluation import (
    ExperimentConfig,
    evaluate_map,
    run_experiment,
    target_cluster_centers,
    write_quiver_svg,
)
from .geodesic import (
    GeodesicTrace,
    TraceStep,
    deviation_experiment,
    deviation_trial_trace,
    gaussian_geodesic_point,
    gradient_flow_point,
    simulate_ideal_descent,
)
from .w2gan import TrainingConfig, default_generator, train, train_wgan_baseline

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_NONCONVERGENCE = 4

# the synthetic pairs plus a Gaussian translation pair for oracle checks
CLI_DATASETS = tuple(sorted(DATASET_PAIRS)) + ("gaussian_shift",)

BASELINE_METHODS = ("hungarian", "sinkhorn", "barycentric",
                    "wgan-gp", "wgan-lp")


class UsageError(Exception):
    """Bad flag/config combination detected after parsing."""


# ---------------------------------------------------------------------------
# config file handling
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {f.name for f in dataclass_fields(TrainingConfig)}
_EXPERIMENT_KEYS = {f.name for f in dataclass_fields(ExperimentConfig)} - \
    {"train", "geometry"}
_GEOMETRY_KEYS = {f.name for f in dataclass_fields(Geometry2D)}
_SECTIONS = {"train": _TRAIN_KEYS, "experiment": _EXPERIMENT_KEYS,
             "geometry": _GEOMETRY_KEYS}


def load_config(path: str) -> dict:
    """Parse and validate the JSON config document."""
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: top level must be an object")
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise UsageError(f"{path}: unknown section {section!r} "
                             f"(expected {sorted(_SECTIONS)})")
        if not isinstance(body, dict):
            raise UsageError(f"{path}: section {section!r} must be an object")
        unknown = set(body) - _SECTIONS[section]
        if unknown:
            raise UsageError(f"{path}: unknown keys in {section!r}: "
                             f"{sorted(unknown)}")
    return doc


def _geometry_from(doc: dict) -> Geometry2D:
    geo = dict(doc.get("geometry", {}))
    for key in ("checkerboard_src_centers", "checkerboard_tgt_centers"):
        if key in geo:
            geo[key] = tuple(tuple(c) for c in geo[key])
    try:
        return Geometry2D(**geo)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad geometry config: {exc}") from exc


def build_training_config(doc: dict, overrides: dict) -> TrainingConfig:
    """File section + flag overrides (flags win), validated together."""
    merged = dict(doc.get("train", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "adam_betas" in merged:
        merged["adam_betas"] = tuple(merged["adam_betas"])
    try:
        return TrainingConfig(**merged)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from exc


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def _out_root(args) -> str:
    return os.environ.get("MONGE_LAB_OUT", args.out)


def _pair_specs(dataset: str, seed: int, geometry: Geometry2D):
    if dataset == "gaussian_shift":
        d = np.eye(2)
        return (gaussian_spec([0.0, 0.0], d, seed=2 * seed),
                gaussian_spec([2.0, 0.0], d, seed=2 * seed + 1))
    return dataset_pair(dataset, seed=seed, geometry=geometry)


def _draw_clouds(dataset: str, seed: int, geometry: Geometry2D,
                 n_train: int, n_eval: int):
    src_spec, tgt_spec = _pair_specs(dataset, seed, geometry)
    src_pts = MeasureStream(src_spec).draw(n_train + n_eval)
    tgt_pts = MeasureStream(tgt_spec).draw(n_train + n_eval)
    return (EmpiricalMeasure.uniform(src_pts[:n_train]),
            EmpiricalMeasure.uniform(tgt_pts[:n_train]),
            EmpiricalMeasure.uniform(src_pts[n_train:]),
            EmpiricalMeasure.uniform(tgt_pts[n_train:]))


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _analysis_pair(args):
    d = int(args.dim)
    cov = np.eye(d) * float(args.spread) ** 2
    tgt_mean = np.zeros(d)
    tgt_mean[0] = float(args.shift)
    return (gaussian_spec(np.zeros(d), np.eye(d), seed=2 * args.seed),
            gaussian_spec(tgt_mean, cov, seed=2 * args.seed + 1))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    doc = load_config(args.config) if args.config else {}
    geometry = _geometry_from(doc)
    overrides = {"seed": args.seed, "iterations": args.iterations,
                 "n_critic": args.n_critic, "batch": args.batch,
                 "alpha_gen": args.alpha_gen, "alpha_disc": args.alpha_disc,
                 "gen_optimizer": args.gen_optimizer,
                 "disc_optimizer": args.disc_optimizer,
                 "critic_warmup": args.critic_warmup}
    if args.interpolated_sampling:
        overrides["interpolated_sampling"] = True
    cfg = build_training_config(doc, overrides)

    src_train, tgt_train, src_eval, tgt_eval = _draw_clouds(
        args.dataset, cfg.seed, geometry, args.n_train, args.n_eval)
    out_dir = os.path.join(_out_root(args), "train", args.dataset,
                           f"seed{cfg.seed}")
    os.makedirs(out_dir, exist_ok=True)
    gen = default_generator(src_train.dim, seed=cfg.seed,
                            batch_norm=args.batch_norm)
    result = train(cfg, src_train, tgt_train, out_dir=out_dir, generator=gen)
    if result.trace.diverged:
        raise NumericalError("training diverged; see trace.csv in " + out_dir)

    report = evaluate_map(result.best_generator(), src_eval, tgt_eval,
                          method="w2gan",
                          cluster_centers=None if args.dataset == "gaussian_shift"
                          else target_cluster_centers(args.dataset, geometry))
    payload = dict(report.to_dict(), dataset=args.dataset, seed=cfg.seed,
                   iterations=cfg.iterations)
    series = result.trace.w2_series()
    if series:
        payload["w2_initial"] = series[0][1]
        payload["w2_final"] = series[-1][1]
    _write_json(os.path.join(out_dir, "report.json"), payload)
    write_quiver_svg(os.path.join(out_dir, "quiver.svg"), src_eval.points,
                     result.best_generator()(src_eval.points), tgt_eval.points)
    print(f"trained {cfg.iterations} iterations on {args.dataset} "
          f"(seed {cfg.seed})")
    print(f"held-out transport cost {report.transport_cost:.6f}, "
          f"marginal W2 {report.marginal_w2:.6f}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# baseline
# ---------------------------------------------------------------------------

def _brute_force_plan(a: EmpiricalMeasure, b: EmpiricalMeasure) -> TransportPlan:
    """Exhaustive assignment search; the oracle the fast solver is
    checked against."""
    if a.n > 8:
        raise UsageError("--brute-force supports n <= 8 "
                         f"(got {a.n}); lower --n")
    C = cost_matrix(a.points, b.points)
    rows = np.arange(a.n)
    best_cost, best_perm = np.inf, None
    for perm in itertools.permutations(range(a.n)):
        cost = float(C[rows, perm].mean())
        if cost < best_cost:
            best_cost, best_perm = cost, np.array(perm)
    coupling = np.zeros((a.n, a.n))
    coupling[rows, best_perm] = 1.0 / a.n
    return TransportPlan(coupling, a, b, best_cost, matching=best_perm)


def cmd_baseline(args) -> int:
    doc = load_config(args.config) if args.config else {}
    geometry = _geometry_from(doc)
    out_dir = os.path.join(_out_root(args), "baseline",
                           args.dataset, args.method.replace("-", "_"),
                           f"seed{args.seed}")
    os.makedirs(out_dir, exist_ok=True)

    if args.method in ("hungarian", "sinkhorn"):
        src_spec, tgt_spec = _pair_specs(args.dataset, args.seed, geometry)
        a = EmpiricalMeasure.uniform(MeasureStream(src_spec).draw(args.n))
        b = EmpiricalMeasure.uniform(MeasureStream(tgt_spec).draw(args.n))
        if args.method == "hungarian":
            plan = _brute_force_plan(a, b) if args.brute_force \
                else exact_assignment(a, b)
            extra = {"solver": "brute_force" if args.brute_force
                     else "assignment"}
        else:
            if args.epsilon <= 0:
                raise UsageError("sinkhorn needs --epsilon > 0")
            plan, pots = sinkhorn(a, b, epsilon=args.epsilon, tol=args.tol)
            extra = {"solver": "sinkhorn", "epsilon": args.epsilon,
                     "dual_value": pots.dual_value(a, b),
                     "marginal_violation": plan.marginal_violation()}
        plan.to_csv(os.path.join(out_dir, "plan.csv"))
        _write_json(os.path.join(out_dir, "report.json"),
                    dict(extra, method=args.method, dataset=args.dataset,
                         seed=args.seed, n=args.n,
                         cost_value=plan.cost_value))
        print(f"{args.method} cost on {args.dataset} (n={args.n}): "
              f"{plan.cost_value:.9f}")
        print(f"artifacts in {out_dir}")
        return EXIT_OK

    src_train, tgt_train, src_eval, tgt_eval = _draw_clouds(
        args.dataset, args.seed, geometry, args.n_train, args.n_eval)
    centers = None if args.dataset == "gaussian_shift" else \
        target_cluster_centers(args.dataset, geometry)

    if args.method == "barycentric":
        if args.epsilon <= 0:
            raise UsageError("barycentric needs --epsilon > 0")
        plan, _ = sinkhorn(src_train, tgt_train, epsilon=args.epsilon,
                           tol=args.tol)
        map_fn = fit_barycentric_net(plan, seed=args.seed)
        payload = {}
    else:  # wgan-gp / wgan-lp
        cfg = build_training_config(doc, {"seed": args.seed,
                                          "iterations": args.iterations})
        result = train_wgan_baseline(cfg, src_train, tgt_train,
                                     variant=args.method.split("-")[1],
                                     out_dir=out_dir)
        map_fn = result.generator
        payload = {"diverged": result.trace.diverged}

    report = evaluate_map(map_fn, src_eval, tgt_eval, method=args.method,
                          cluster_centers=centers)
    payload.update(report.to_dict())
    payload.update(dataset=args.dataset, seed=args.seed)
    if args.dataset == "gaussian_shift":
        # closed-form oracle: compare the fitted map against the exact one
        src_spec, tgt_spec = _pair_specs(args.dataset, args.seed, geometry)
        oracle = gaussian_monge_map(src_spec, tgt_spec)
        err = np.linalg.norm(map_fn(src_eval.points) - oracle(src_eval.points),
                             axis=1).mean()
        payload["map_error_vs_closed_form"] = float(err)
    _write_json(os.path.join(out_dir, "report.json"), payload)
    write_quiver_svg(os.path.join(out_dir, "quiver.svg"), src_eval.points,
                     map_fn(src_eval.points), tgt_eval.points)
    print(f"{args.method} on {args.dataset}: displacement error "
          f"{report.displacement_error:.6f}, marginal W2 "
          f"{report.marginal_w2:.6f}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _maybe_write_trace(args, trace: GeodesicTrace, name: str) -> None:
    out_dir = os.path.join(_out_root(args), "analyze")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    trace.to_csv(path)
    print(f"trace written to {path}")


def cmd_analyze(args) -> int:
    src, tgt = _analysis_pair(args)
    if args.experiment == "decay":
        trace = simulate_ideal_descent(src, tgt, args.alpha, args.steps)
        print("t,w2,f_t,ratio")
        prev = None
        for step in trace.steps:
            ratio = "" if prev in (None, 0.0) else repr(step.w2 / prev)
            print(f"{step.t},{step.w2!r},{step.f_t!r},{ratio}")
            prev = step.w2
        _maybe_write_trace(args, trace, f"decay_alpha{args.alpha}.csv")
    elif args.experiment == "geodesic":
        w2_full = gaussian_w2(src, tgt)
        trace = GeodesicTrace()
        print("t,w2_to_target,f_t")
        for k in range(args.steps + 1):
            t = k / args.steps
            mid = gaussian_geodesic_point(src, tgt, t)
            w2_t = gaussian_w2(mid, tgt)
            f_t = w2_t / w2_full if w2_full > 0 else 0.0
            trace.steps.append(TraceStep(t=k, w2=w2_t, f_t=f_t))
            print(f"{t!r},{w2_t!r},{f_t!r}")
        _maybe_write_trace(args, trace, "geodesic.csv")
    elif args.experiment == "deviation":
        reports = [
            deviation_experiment(src, tgt, args.eps, args.alpha,
                                 epsilon_prime=args.eps_prime, n=args.n,
                                 seed=args.seed + trial)
            for trial in range(args.trials)
        ]
        print("trial,measured,bound,bootstrap_sigma,within")
        for i, rep in enumerate(reports):
            print(f"{i},{float(rep.measured_w2_deviation)!r},"
                  f"{float(rep.bound)!r},{float(rep.bootstrap_sigma)!r},"
                  f"{rep.within_bound()}")
        _maybe_write_trace(args, deviation_trial_trace(reports),
                           "deviation.csv")
        if not all(r.within_bound() for r in reports):
            raise NumericalError("a deviation trial exceeded its bound")
    else:  # flow
        w2_0 = gaussian_w2(src, tgt)
        _, w2_t = gradient_flow_point(src, tgt, args.t)
        ratio = w2_t / w2_0 if w2_0 > 0 else 0.0
        print(f"t={args.t!r} w2={w2_t!r} w2_ratio={ratio!r}")
        trace = GeodesicTrace(steps=[TraceStep(t=0, w2=w2_t, f_t=ratio)])
        _maybe_write_trace(args, trace, f"flow_t{args.t}.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    doc = load_config(args.config) if args.config else {}
    geometry = _geometry_from(doc)
    section = dict(doc.get("experiment", {}))
    section["dataset"] = args.dataset
    if args.methods:
        section["methods"] = tuple(args.methods.split(","))
    if args.seeds:
        section["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if args.n_train is not None:
        section["n_train"] = args.n_train
    if args.n_eval is not None:
        section["n_eval"] = args.n_eval
    section["jobs"] = args.jobs
    section["out_dir"] = os.path.join(_out_root(args), "experiment")
    train_cfg = build_training_config(doc, {})
    if "train" in doc:
        section["train"] = train_cfg
    try:
        cfg = ExperimentConfig(geometry=geometry, **section)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad experiment config: {exc}") from exc
    records = run_experiment(cfg)
    failures = [r for r in records if r["status"] != "ok"]
    for method in cfg.methods:
        vals = [r["cost_ratio_vs_hungarian"] for r in records
                if r["method"] == method and r["status"] == "ok"]
        if vals:
            print(f"{method}: mean cost ratio {np.mean(vals):.4f} "
                  f"over {len(vals)} seed(s)")
    print(f"summary written to {os.path.join(cfg.out_dir, 'summary.csv')}")
    if failures:
        for rec in failures:
            print(f"cell failed: {rec['method']} seed {rec['seed']}: "
                  f"{rec['error']}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monge-lab",
        description="Optimal-transport map training and analysis toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0,
                       help="master seed (default: %(default)s)")
        p.add_argument("--out", default="out",
                       help="output root; MONGE_LAB_OUT overrides "
                            "(default: %(default)s)")
        p.add_argument("--config", default=None,
                       help="JSON config file (default: none)")

    p_train = sub.add_parser("train", help="adversarial transport training")
    p_train.add_argument("--dataset", required=True, choices=CLI_DATASETS)
    common(p_train)
    p_train.add_argument("--iterations", type=int, default=None,
                         help="outer iterations (default: config file or "
                              "2000)")
    p_train.add_argument("--n-critic", type=int, default=None,
                         help="critic steps per iteration (default: config "
                              "file or 10)")
    p_train.add_argument("--batch", type=int, default=None,
                         help="minibatch size (default: config file or 256)")
    p_train.add_argument("--alpha-gen", type=float, default=None,
                         help="generator learning rate (default: config "
                              "file or 5e-5)")
    p_train.add_argument("--alpha-disc", type=float, default=None,
                         help="critic learning rate (default: config file "
                              "or 5e-5)")
    p_train.add_argument("--gen-optimizer", choices=("sgd", "adam"),
                         default=None, help="generator optimizer (default: "
                                            "config file or sgd)")
    p_train.add_argument("--disc-optimizer", choices=("sgd", "adam"),
                         default=None, help="critic optimizer (default: "
                                            "config file or sgd)")
    p_train.add_argument("--critic-warmup", type=int, default=None,
                         help="critic-only steps before alternation "
                              "(default: config file or 0)")
    p_train.add_argument("--interpolated-sampling", action="store_true",
                         help="sample the constraint penalty at "
                              "interpolated pairs (default: off)")
    p_train.add_argument("--batch-norm", action="store_true",
                         help="batch-normalize generator hiddens "
                              "(default: off)")
    p_train.add_argument("--n-train", type=int, default=1024,
                         help="training cloud size (default: %(default)s)")
    p_train.add_argument("--n-eval", type=int, default=200,
                         help="held-out cloud size (default: %(default)s)")
    p_train.set_defaults(func=cmd_train)

    p_base = sub.add_parser("baseline", help="reference solvers and GANs")
    p_base.add_argument("--method", required=True, choices=BASELINE_METHODS)
    p_base.add_argument("--dataset", required=True, choices=CLI_DATASETS)
    common(p_base)
    p_base.add_argument("--n", type=int, default=256,
                        help="cloud size for plan solvers "
                             "(default: %(default)s)")
    p_base.add_argument("--n-train", type=int, default=1024,
                        help="training cloud size for map methods "
                             "(default: %(default)s)")
    p_base.add_argument("--n-eval", type=int, default=200,
                        help="held-out cloud size (default: %(default)s)")
    p_base.add_argument("--epsilon", type=float, default=0.05,
                        help="entropic regularization (default: %(default)s)")
    p_base.add_argument("--tol", type=float, default=1e-6,
                        help="marginal tolerance (default: %(default)s)")
    p_base.add_argument("--iterations", type=int, default=None,
                        help="GAN iterations (default: config file or 2000)")
    p_base.add_argument("--brute-force", action="store_true",
                        help="exhaustive assignment oracle, n <= 8 "
                             "(default: off)")
    p_base.set_defaults(func=cmd_baseline)

    p_an = sub.add_parser("analyze", help="closed-form Gaussian experiments")
    p_an.add_argument("experiment",
                      choices=("decay", "geodesic", "deviation", "flow"))
    common(p_an)
    p_an.add_argument("--alpha", type=float, default=0.5,
                      help="damping factor (default: %(default)s)")
    p_an.add_argument("--steps", type=int, default=5,
                      help="descent/geodesic steps (default: %(default)s)")
    p_an.add_argument("--t", type=float, default=1.0,
                      help="flow time (default: %(default)s)")
    p_an.add_argument("--eps", type=float, default=0.1,
                      help="gradient error sup norm (default: %(default)s)")
    p_an.add_argument("--eps-prime", type=float, default=0.0,
                      help="update error sup norm (default: %(default)s)")
    p_an.add_argument("--trials", type=int, default=1,
                      help="deviation trials (default: %(default)s)")
    p_an.add_argument("--n", type=int, default=2000,
                      help="points per deviation measurement "
                           "(default: %(default)s)")
    p_an.add_argument("--dim", type=int, default=2,
                      help="Gaussian dimension (default: %(default)s)")
    p_an.add_argument("--shift", type=float, default=2.0,
                      help="target mean offset (default: %(default)s)")
    p_an.add_argument("--spread", type=float, default=1.0,
                      help="target covariance scale (default: %(default)s)")
    p_an.set_defaults(func=cmd_analyze)

    p_exp = sub.add_parser("experiment", help="method-by-seed grid")
    p_exp.add_argument("--dataset", required=True,
                       choices=tuple(sorted(DATASET_PAIRS)))
    common(p_exp)
    p_exp.add_argument("--methods", default=None,
                       help="comma-separated method list (default: "
                            "w2gan,discrete_ot)")
    p_exp.add_argument("--seeds", default=None,
                       help="comma-separated seeds (default: 0,1,2)")
    p_exp.add_argument("--n-train", type=int, default=None,
                       help="training cloud size (default: 1024)")
    p_exp.add_argument("--n-eval", type=int, default=None,
                       help="held-out cloud size (default: 200)")
    p_exp.add_argument("--jobs", type=int, default=1,
                       help="parallel worker processes (default: %(default)s)")
    p_exp.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NonConvergenceError as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())

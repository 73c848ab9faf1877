"""Command-line experiment runner.

``gradwidth <subcommand> [--config FILE] [--set section.key=value]... [--out DIR]``

Every run writes ``result.json`` plus one data table per metric (CSV, or
JSON when ``output.format`` is ``json``).  Exit codes: 0 success, 2 invalid
configuration, 3 runtime failure, 4 a verification check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .canonical import (
    BOUND_CONVENTION,
    Ellipsoid,
    FiniteCloud,
    KSupportBall,
    L2Ball,
    MinkowskiSum,
    Union,
    analytic_width_bound,
    exact_width,
    mc_width,
    set_to_record,
)
from .config import ConfigError, ExperimentConfig, apply_overrides, config_to_dict, load_config, parse_config
from .geometry import (
    GradientSetSpec,
    InnerBudget,
    featurizer_sparsity,
    featurizer_width_estimate,
    lggw_estimate,
    nerc_estimate,
    sorted_gradient_profile,
)
from .networks import (
    EuclideanBall,
    LinearConfig,
    NetworkConfig,
    SpectralBall,
    init_network,
    init_spectral_check,
    project_to_ball,
    weighted_gradient,
)
from .numerics import RngStream
from .optim import (
    TRACE_COLUMNS,
    PopulationOracle,
    TeacherDistribution,
    estimate_tau,
    gd_ratio_trace,
    gd_with_reuse,
    loglog_slope,
    population_convergence_experiment,
    quadratic_1d,
    reuse_scaling_experiment,
)
from .theory import layer_lemma_check, sic_tail_check, width_vs_bound_check

SCHEMA_VERSION = 1
OUT_ENV = "GRADWIDTH_OUT"

# Column order of every table, per subcommand.  Changing any entry requires
# bumping SCHEMA_VERSION.
CSV_HEADERS = {
    "width": ("quantity", "value", "std_error"),
    "nerc": ("quantity", "value", "std_error"),
    "khintchine": ("n", "nerc", "std_error", "exact"),
    "canonical": ("name", "dim", "mc_width", "std_error", "exact", "analytic_bound"),
    "lemmas": ("arch", "width", "check", "layer", "frequency", "stated_probability", "std_error", "passed"),
    "sic": ("n", "family", "mu_hat", "u", "empirical_tail", "bound", "passed"),
    "gd_ratio_summary": ("run", "alpha", "max_ratio", "mean_ratio", "undefined_steps", "all_finite"),
    "trace": TRACE_COLUMNS,
    "profile": ("rank", "abs_grad_init", "abs_grad_final"),
    "featurizer": ("sample", "l0", "l1"),
    "reuse_n": ("n", "T", "max_delta", "std_error"),
    "reuse_T": ("n", "T", "max_delta"),
    "converge_T": ("T", "n", "metric", "std_error"),
    "converge_n": ("T", "n", "metric", "std_error"),
}


class VerificationFailure(RuntimeError):
    pass


class Table:
    def __init__(self, kind: str, rows: list[dict]):
        self.kind = kind
        self.columns = CSV_HEADERS[kind]
        for r in rows:
            if tuple(r) != self.columns:
                raise AssertionError(f"row keys {tuple(r)} differ from the {kind} header")
        self.rows = rows


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else repr(v)
    return x


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# shared setup


def _network(cfg: ExperimentConfig) -> NetworkConfig:
    n = cfg.network
    return NetworkConfig(n.arch, n.depth, tuple(n.widths), cfg.data.d, n.sigma1, n.activation)


def _teacher(cfg: ExperimentConfig) -> TeacherDistribution:
    net = _network(cfg)
    teacher = init_network(net, RngStream(cfg.data.teacher_seed).child("teacher"))
    return TeacherDistribution(net, teacher, cfg.data.noise_std)


def _budget(cfg: ExperimentConfig) -> InnerBudget:
    w = cfg.width
    return InnerBudget(w.restarts, w.steps, w.step_size)


def _gradient_spec(cfg: ExperimentConfig, rng: RngStream, n: int | None = None) -> GradientSetSpec:
    dist = _teacher(cfg)
    center = init_network(dist.cfg, rng.child("init"))
    X, y = dist.sample(rng.child("data"), n or cfg.data.n)
    return GradientSetSpec(dist.cfg, SpectralBall(center, cfg.ball.rho, cfg.ball.rho1), X, y)


def _tau_eta(oracle: PopulationOracle, theta0, rng: RngStream) -> float:
    return 1.0 / (4.0 * estimate_tau(oracle, theta0, rng))


# ---------------------------------------------------------------------------
# subcommands; each returns (metrics, tables, verification_passed or None)


def cmd_width(cfg: ExperimentConfig, rng: RngStream):
    spec = _gradient_spec(cfg, rng)
    budget = _budget(cfg)
    est = lggw_estimate(spec, rng.child("lggw"), cfg.width.outer, budget)
    single = GradientSetSpec(spec.cfg, spec.ball, spec.X[:1], spec.y[:1])
    feat = featurizer_width_estimate(single, rng.child("featurizer"), cfg.width.outer, budget)
    check = width_vs_bound_check(single, rng.child("bound"), cfg.width.outer, budget)
    metrics = {
        "lggw": est.to_record(),
        "featurizer_width": feat.to_record(),
        "width_vs_bound": check,
    }
    rows = [
        {"quantity": "lggw", "value": est.value, "std_error": est.std_error},
        {"quantity": "featurizer_width", "value": feat.value, "std_error": feat.std_error},
        {"quantity": "single_sample_lggw", "value": check["estimated_lggw_single_sample"], "std_error": check["lggw_std_error"]},
        {"quantity": "bound", "value": check["bound"]["bound_value"], "std_error": 0.0},
        {"quantity": "c_star", "value": check["satisfied_up_to_constant"], "std_error": 0.0},
    ]
    return metrics, {"width": Table("width", rows)}, None


def khintchine_sweep(sizes, outer: int, rng: RngStream) -> dict:
    """NERC of ``n`` identical unit gradients at a single parameter point.

    A linear model at ``theta = 0`` with labels ``-1`` has gradient ``x`` for
    every sample; all samples share ``x = e_1``.  The exact value is
    ``E|eps_1 + ... + eps_n| / n``.
    """
    from scipy.stats import binom

    rows = []
    for n in sizes:
        X = np.zeros((n, 2))
        X[:, 0] = 1.0
        spec = GradientSetSpec(LinearConfig(2), EuclideanBall(np.zeros(2), 0.0), X, -np.ones(n))
        est = nerc_estimate(spec, rng.child(f"n={n}"), outer, InnerBudget(1, 0))
        k = np.arange(n + 1)
        exact = float(np.sum(binom.pmf(k, n, 0.5) * np.abs(2 * k - n))) / n
        rows.append({"n": n, "nerc": est.value, "std_error": est.std_error, "exact": exact})
    slope = loglog_slope([r["n"] for r in rows], [r["nerc"] for r in rows])
    return {"rows": rows, "slope": slope}


def cmd_nerc(cfg: ExperimentConfig, rng: RngStream):
    spec = _gradient_spec(cfg, rng)
    est = nerc_estimate(spec, rng.child("nerc"), cfg.width.outer, _budget(cfg))
    sweep = khintchine_sweep(cfg.width.khintchine_n, cfg.width.khintchine_outer, rng.child("khintchine"))
    metrics = {"nerc": est.to_record(), "khintchine_slope": sweep["slope"], "khintchine": sweep["rows"]}
    tables = {
        "nerc": Table("nerc", [{"quantity": "nerc", "value": est.value, "std_error": est.std_error}]),
        "khintchine": Table("khintchine", sweep["rows"]),
    }
    return metrics, tables, None


def _canonical_suite(rng: RngStream):
    suite = [(f"l2_ball_d{d}", L2Ball(d)) for d in (1, 2, 8, 64)]
    for d in (1, 2, 8, 64):
        axes = 0.5 + rng.child(f"axes{d}").uniform(d)
        suite.append((f"ellipsoid_d{d}", Ellipsoid(axes)))
    suite.append(("k_support_d6_k2", KSupportBall(6, 2)))
    suite.append(("antipodal_cloud", FiniteCloud(np.array([[1.0, 0.0], [-1.0, 0.0]]))))
    suite.append(("singleton_cloud", FiniteCloud(np.array([[5.0, 5.0]]))))
    clouds = [FiniteCloud(rng.child(f"cloud{j}").normal((8, 16))) for j in range(4)]
    suite.append(("union_of_clouds", Union(tuple(clouds))))
    suite.append(("ball_plus_ellipsoid", MinkowskiSum((L2Ball(8), Ellipsoid(np.linspace(0.1, 1.0, 8))))))
    return suite


def cmd_canonical(cfg: ExperimentConfig, rng: RngStream, samples: int = 100_000):
    rows, checks = [], {}
    for name, s in _canonical_suite(rng.child("sets")):
        est = mc_width(s, rng.child(name), samples)
        try:
            exact = exact_width(s)
        except TypeError:
            exact = float("nan")
        try:
            bound = analytic_width_bound(s)
        except TypeError:
            bound = float("nan")
        if math.isfinite(exact):
            checks[name] = abs(est.value - exact) <= 3 * est.std_error + 1e-12
        rows.append(
            {"name": name, "dim": s.dim, "mc_width": est.value, "std_error": est.std_error, "exact": exact, "analytic_bound": bound}
        )
    metrics = {
        "samples": samples,
        "convention": BOUND_CONVENTION,
        "closed_form_agreement": checks,
        "sets": {name: set_to_record(s) for name, s in _canonical_suite(rng.child("sets"))},
    }
    return metrics, {"canonical": Table("canonical", rows)}, None


def _random_family(rng: RngStream, n: int, dim: int = 3) -> np.ndarray:
    V = rng.normal((n, dim)) * rng.uniform((n, 1))
    return V * math.sqrt(n / float((V**2).sum()))


def cmd_verify_lemmas(cfg: ExperimentConfig, rng: RngStream):
    lem = cfg.lemmas
    lemma_rows, summary, all_ok = [], {}, True
    for arch in ("ffn", "resnet"):
        for m in lem.widths:
            net = NetworkConfig(arch, lem.depth, (m,) * lem.depth, m, lem.sigma1, cfg.network.activation)
            sub = rng.child(f"{arch}-{m}")
            init = init_spectral_check(net, lem.rho, lem.trials, sub.child("init-spectral"))
            rep = layer_lemma_check(net, lem.rho, cfg.ball.rho1, lem.trials, sub.child("layers"))
            for l, (f, p, se) in enumerate(zip(init["frequency"], init["stated_probability"], init["std_error"])):
                ok = f >= p - 3 * se
                lemma_rows.append(
                    {"arch": arch, "width": m, "check": "init_spectral", "layer": l + 1, "frequency": f,
                     "stated_probability": p, "std_error": se, "passed": bool(ok)}
                )
            for check, rows in rep["checks"].items():
                for r in rows:
                    lemma_rows.append(
                        {"arch": arch, "width": m, "check": check, "layer": r["layer"], "frequency": r["frequency"],
                         "stated_probability": r["stated_probability"], "std_error": r["std_error"], "passed": r["passed"]}
                    )
            ok = bool(init["passed"] and rep["passed"])
            summary[f"{arch}_m{m}"] = ok
            all_ok &= ok
    sic_rows, sic_ok = [], True
    for n in lem.sic_n:
        for j in range(lem.sic_families):
            rep = sic_tail_check(_random_family(rng.child(f"sic-{n}").child(j), n))
            sic_ok &= rep.passed
            for u, f, b in zip(rep.u_grid, rep.empirical_tail, rep.bound):
                sic_rows.append(
                    {"n": n, "family": j, "mu_hat": rep.mu_hat, "u": float(u), "empirical_tail": float(f),
                     "bound": float(b), "passed": rep.passed}
                )
    metrics = {"trials": lem.trials, "lemmas": summary, "sic_passed": bool(sic_ok), "all_passed": bool(all_ok and sic_ok)}
    tables = {"lemmas": Table("lemmas", lemma_rows), "sic": Table("sic", sic_rows)}
    return metrics, tables, bool(all_ok and sic_ok)


def _ratio_summary(run: str, trace) -> list[dict]:
    out = []
    for alpha in (1, 2):
        r = gd_ratio_trace(trace, alpha)
        out.append(
            {"run": run, "alpha": alpha, "max_ratio": r["max"], "mean_ratio": r["mean"],
             "undefined_steps": int(r["undefined"].sum()), "all_finite": r["all_finite"]}
        )
    return out


def _trace_rows(trace) -> list[dict]:
    return [dict(zip(TRACE_COLUMNS, (r[c] for c in TRACE_COLUMNS))) for r in trace.rows()]


def cmd_gd_ratio(cfg: ExperimentConfig, rng: RngStream):
    g = cfg.gd_ratio
    quad = quadratic_1d(g.quad_mu, 1.0)
    qtrace = gd_with_reuse(quad, np.array([g.quad_mu + 2.0]), 0.25, g.T, g.quad_n, rng.child("quadratic"))
    summary = _ratio_summary("quadratic", qtrace)
    tables = {"trace_quadratic": Table("trace", _trace_rows(qtrace))}
    dist = _teacher(cfg)
    finite = True
    running_max = {}
    for k in range(g.seeds):
        sub = rng.child("seed").child(k)
        theta0 = init_network(dist.cfg, sub.child("init")).flatten()
        X, y = dist.sample(sub.child("data"), cfg.data.n)
        oracle = PopulationOracle.fresh(dist, 64 * cfg.data.n, sub.child("oracle"))
        eta = _tau_eta(oracle, theta0, sub.child("tau"))
        tr = gd_with_reuse(dist, theta0, eta, g.T, cfg.data.n, sub, oracle, samples=(X, y))
        rows = _ratio_summary(f"network_seed{k}", tr)
        finite &= rows[0]["all_finite"]
        running_max[f"seed{k}"] = rows[0]["max_ratio"]
        summary.extend(rows)
        tables[f"trace_network_seed{k}"] = Table("trace", _trace_rows(tr))
    tables["gd_ratio_summary"] = Table("gd_ratio_summary", summary)
    metrics = {
        "quadratic_alpha2_ratios_constant": bool(np.allclose(gd_ratio_trace(qtrace, 2)["ratios"], 0.5, rtol=0, atol=1e-12)),
        "network_alpha1_all_finite": bool(finite),
        "network_alpha1_max_ratio": running_max,
        "summary": summary,
    }
    return metrics, tables, None


def cmd_profile(cfg: ExperimentConfig, rng: RngStream):
    spec = _gradient_spec(cfg, rng)
    theta0 = spec.center()
    oracle = PopulationOracle(TeacherDistribution(spec.cfg, theta0), "fresh_mc", spec.X, spec.y)
    eta = _tau_eta(oracle, theta0, rng.child("tau"))
    theta = theta0.copy()
    for _ in range(cfg.profile.T):
        theta = project_to_ball(theta - eta * weighted_gradient(spec.cfg, theta, spec.X, spec.y)[1], spec.ball)
    init_prof = sorted_gradient_profile(spec, theta0)
    final_prof = sorted_gradient_profile(spec, theta)
    sparsity = featurizer_sparsity(spec, theta, cfg.profile.l0_threshold)
    prof_rows = [
        {"rank": i, "abs_grad_init": float(a), "abs_grad_final": float(b)}
        for i, (a, b) in enumerate(zip(init_prof, final_prof))
    ]
    feat_rows = [{"sample": i, "l0": int(a), "l1": float(b)} for i, (a, b) in enumerate(zip(sparsity["l0"], sparsity["l1"]))]
    metrics = {
        "eta": eta,
        "final_loss": weighted_gradient(spec.cfg, theta, spec.X, spec.y)[0],
        "profile_max_init": float(init_prof[-1]),
        "profile_max_final": float(final_prof[-1]),
        "featurizer": {k: v for k, v in sparsity.items() if k not in ("l0", "l1")},
    }
    return metrics, {"profile": Table("profile", prof_rows), "featurizer": Table("featurizer", feat_rows)}, None


def _linear_teacher(cfg: ExperimentConfig) -> TeacherDistribution:
    d = cfg.reuse.d
    w = RngStream(cfg.data.teacher_seed).child("linear-teacher").normal(d)
    return TeacherDistribution(LinearConfig(d), w / np.linalg.norm(w), cfg.reuse.noise_std, "gaussian")


def cmd_reuse(cfg: ExperimentConfig, rng: RngStream):
    r = cfg.reuse
    res = reuse_scaling_experiment(_linear_teacher(cfg), r.eta, r.T, r.n_grid, r.trials, rng, T_grid=r.T_grid)
    metrics = {
        "slope_vs_n": res["slope_vs_n"],
        "exponent_vs_T": res["exponent_vs_T"],
        "sqrt_log_T_fit": res["sqrt_log_T_fit"],
    }
    return metrics, {"reuse_n": Table("reuse_n", res["n_rows"]), "reuse_T": Table("reuse_T", res["T_rows"])}, None


def cmd_converge(cfg: ExperimentConfig, rng: RngStream):
    c = cfg.converge
    dist = _teacher(cfg)
    t_rows, n_rows = [], []
    for T in c.T_grid:
        res = population_convergence_experiment(dist, T, c.n, c.trials, rng.child("T-sweep"), oracle="shared")
        t_rows.append({"T": T, "n": c.n, "metric": res["metric"], "std_error": res["std_error"]})
    for n in c.n_grid:
        res = population_convergence_experiment(dist, c.T, n, c.trials, rng.child("n-sweep"), oracle="fresh_mc")
        n_rows.append({"T": c.T, "n": n, "metric": res["metric"], "std_error": res["std_error"]})
    metrics = {
        "slope_vs_T": loglog_slope([r["T"] for r in t_rows], [r["metric"] for r in t_rows]),
        "slope_vs_n": loglog_slope([r["n"] for r in n_rows], [r["metric"] for r in n_rows]),
        "halving_ratios": [t_rows[i + 1]["metric"] / t_rows[i]["metric"] for i in range(len(t_rows) - 1)],
    }
    return metrics, {"converge_T": Table("converge_T", t_rows), "converge_n": Table("converge_n", n_rows)}, None


COMMANDS = {
    "width": cmd_width,
    "nerc": cmd_nerc,
    "canonical": cmd_canonical,
    "verify-lemmas": cmd_verify_lemmas,
    "gd-ratio": cmd_gd_ratio,
    "profile": cmd_profile,
    "reuse": cmd_reuse,
    "converge": cmd_converge,
}


# ---------------------------------------------------------------------------
# entry point


def _write_tables(out: Path, tables: dict, fmt: str) -> list[str]:
    written = []
    for name, table in tables.items():
        if fmt == "csv":
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(table.columns)
                for row in table.rows:
                    w.writerow([_cell(row[c]) for c in table.columns])
        else:
            path = out / f"{name}.json"
            payload = {"columns": list(table.columns), "rows": [[row[c] for c in table.columns] for row in table.rows]}
            path.write_text(json.dumps(_jsonable(payload), indent=2) + "\n")
        written.append(path.name)
    return written


def run(subcommand: str, config: ExperimentConfig, out_dir: Path) -> tuple[int, dict]:
    """Run one subcommand, write its outputs and return ``(exit_code, record)``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rng = RngStream(config.seed).child(subcommand)
    record = {
        "schema_version": SCHEMA_VERSION,
        "subcommand": subcommand,
        "config": config_to_dict(config),
        "provenance": {"toolkit_version": __version__, "seed": config.seed, "numpy_version": np.__version__},
    }
    try:
        metrics, tables, verified = COMMANDS[subcommand](config, rng)
    except Exception as exc:  # runtime failures become a diagnostic record
        record["error"] = {"type": type(exc).__name__, "message": str(exc)}
        record["wall_clock_seconds"] = time.perf_counter() - start
        (out_dir / "result.json").write_text(json.dumps(_jsonable(record), indent=2) + "\n")
        return 3, record
    record["metrics"] = metrics
    record["files"] = _write_tables(out_dir, tables, config.output.format)
    if verified is not None:
        record["verification_passed"] = verified
    record["wall_clock_seconds"] = time.perf_counter() - start
    (out_dir / "result.json").write_text(json.dumps(_jsonable(record), indent=2) + "\n")
    return (4 if verified is False else 0), record


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradwidth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file (defaults apply to omitted keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. ball.rho=0.5")
        p.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else output.path)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        cfg = apply_overrides(cfg, args.set)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out or os.environ.get(OUT_ENV) or cfg.output.path)
    code, record = run(args.subcommand, cfg, out)
    if code == 3:
        print(f"runtime failure: {record['error']['type']}: {record['error']['message']}", file=sys.stderr)
    elif code == 4:
        print("verification failed; see result.json", file=sys.stderr)
    else:
        print(f"wrote {out / 'result.json'}")
    return code


if __name__ == "__main__":
    sys.exit(main())

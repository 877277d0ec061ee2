"""Experiment driver: config parsing, pipelines, machine-readable outputs.

Subcommands: flow, operator, spectrum, kernel-norm, convergence, sampler-check.
Each run writes a manifest echoing the fully resolved configuration plus CSV
and JSON-style result files with 17-significant-digit formatting, so repeated
runs with the same config and seed are bit-identical.  Exit codes: 0 on pass,
2 on certificate failure, 1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import ModelPair, gaussian_potential, anharmonic_potential
from .dynamics import FlowSpec, PhaseState, default_flow_spec, flow_batch, total_energy
from .kernel_spectral import assemble_kernel, certify_rate, eigen_spectrum, hs_norm
from .operator import (
    assemble_adjoint,
    assemble_transfer,
    build_grid,
    iterate,
    mass,
    random_density,
    weighted_inner,
    weighted_norm,
    weighted_symmetry_residual,
)
from .tangent import determinant_bounds, tangent_batch

OPERATOR_KINDS = ("operator", "spectrum", "kernel-norm", "convergence")
ALL_KINDS = ("flow",) + OPERATOR_KINDS + ("sampler-check",)


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class ExperimentConfig:
    kind: str
    model: ModelPair
    spec: FlowSpec
    n_per_axis: int
    momentum_nodes: int
    momentum_rule: str | None
    seed: int
    output: str | None
    samples: int
    draws: int
    bins: int
    n_max: int
    tol: float
    top_k: int
    h0_center: float
    h0_sigma: float
    kernel_momentum_nodes: int
    resolved: dict


def _parse_matrix(text: str, name: str) -> np.ndarray:
    try:
        rows = [[float(v) for v in row.split(",")] for row in text.split(";")]
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse matrix {text!r}") from exc
    if len(rows) == 1 and len(rows[0]) == 1:
        return np.array([[rows[0][0]]])
    if len(rows) == 1:
        return np.diag(rows[0])
    return np.array(rows)


def _build_model(cfg: configparser.ConfigParser) -> ModelPair:
    sec = cfg["model"]
    family = sec.get("family", "gaussian").strip()
    halfwidth = sec.getfloat("halfwidth", 8.0)
    if halfwidth <= 0:
        raise ConfigError("model.halfwidth: must be positive")
    if family == "gaussian":
        mean = np.array([float(v) for v in sec.get("mean", "0.0").split(",")])
        precision = _parse_matrix(sec.get("precision", "1.0"), "model.precision")
        if precision.shape[0] != mean.shape[0]:
            raise ConfigError("model.precision: shape incompatible with model.mean")
        target = gaussian_potential(mean, precision)
    elif family == "anharmonic":
        target = anharmonic_potential(
            sec.getfloat("a", 1.0), sec.getfloat("b", 0.0), halfwidth
        )
    else:
        raise ConfigError(f"model.family: unknown family {family!r}")
    aux_prec = _parse_matrix(sec.get("auxiliary_precision", "1.0"), "model.auxiliary_precision")
    if aux_prec.shape == (1, 1) and target.dim > 1:
        aux_prec = aux_prec[0, 0] * np.eye(target.dim)
    auxiliary = gaussian_potential(np.zeros(target.dim), aux_prec)
    try:
        return ModelPair(
            target=target,
            auxiliary=auxiliary,
            domain_halfwidth=halfwidth,
            auxiliary_even=True,
        )
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def load_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    if "experiment" not in parser or "kind" not in parser["experiment"]:
        raise ConfigError("experiment.kind: missing")
    kind = parser["experiment"]["kind"].strip()
    if kind not in ALL_KINDS:
        raise ConfigError(f"experiment.kind: unknown kind {kind!r}, expected one of {ALL_KINDS}")
    if "model" not in parser:
        raise ConfigError("model: section missing")
    model = _build_model(parser)

    fsec = parser["flow"] if "flow" in parser else {}
    time = float(fsec.get("time", "0.7"))
    if time <= 0:
        raise ConfigError("flow.time: must be positive")
    method = str(fsec.get("method", "auto")).strip()
    steps = str(fsec.get("steps", "auto")).strip()
    if method == "auto":
        spec = default_flow_spec(model, time)
    elif method in ("exact_gaussian", "leapfrog"):
        if steps == "auto":
            spec = default_flow_spec(model, time, method=method)
        else:
            try:
                spec = FlowSpec(time=time, steps=int(steps), method=method)
            except ValueError as exc:
                raise ConfigError(f"flow: {exc}") from exc
    else:
        raise ConfigError(f"flow.method: unknown method {method!r}")
    if spec.method == "exact_gaussian" and not model.is_gaussian:
        raise ConfigError("flow.method: exact_gaussian requires a Gaussian model pair")

    # operator-building experiments must stay below the conjugate-point bound
    if kind in OPERATOR_KINDS and time * model.lambda_max >= math.pi:
        raise ConfigError(
            f"flow.time: t * lambda_max = {time * model.lambda_max:.4f} "
            f"must be < pi for {kind} experiments"
        )

    gsec = parser["grid"] if "grid" in parser else {}
    esec = parser["experiment"]
    rule = str(gsec.get("momentum_rule", "auto")).strip()
    config = ExperimentConfig(
        kind=kind,
        model=model,
        spec=spec,
        n_per_axis=int(gsec.get("n_per_axis", "401")),
        momentum_nodes=int(gsec.get("momentum_nodes", "257")),
        momentum_rule=None if rule == "auto" else rule,
        seed=esec.getint("seed", 0),
        output=esec.get("output", None),
        samples=esec.getint("samples", 100),
        draws=esec.getint("draws", 100000),
        bins=esec.getint("bins", 100),
        n_max=esec.getint("n_max", 400),
        tol=esec.getfloat("tol", 1e-10),
        top_k=esec.getint("top_k", 8),
        h0_center=esec.getfloat("h0_center", 1.3),
        h0_sigma=esec.getfloat("h0_sigma", 0.7),
        kernel_momentum_nodes=esec.getint("kernel_momentum_nodes", 1025),
        resolved={},
    )
    if config.seed < 0:
        raise ConfigError("experiment.seed: must be non-negative")
    if config.n_per_axis < 16:
        raise ConfigError("grid.n_per_axis: need at least 16")
    if config.momentum_nodes < 2:
        raise ConfigError("grid.momentum_nodes: need at least 2")

    target = model.target
    config.resolved = {
        "experiment.kind": kind,
        "experiment.seed": config.seed,
        "model.family": target.kind,
        "model.dim": model.dim,
        "model.halfwidth": model.domain_halfwidth,
        "model.lambda_min": model.lambda_min,
        "model.lambda_max": model.lambda_max,
        "model.params": {
            k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in target.params.items()
        },
        "flow.time": spec.time,
        "flow.method": spec.method,
        "flow.steps": spec.steps,
        "grid.n_per_axis": config.n_per_axis,
        "grid.momentum_nodes": config.momentum_nodes,
        "grid.momentum_rule": rule,
        "experiment.samples": config.samples,
        "experiment.draws": config.draws,
        "experiment.bins": config.bins,
        "experiment.n_max": config.n_max,
        "experiment.tol": config.tol,
        "experiment.top_k": config.top_k,
        "experiment.h0_center": config.h0_center,
        "experiment.h0_sigma": config.h0_sigma,
        "experiment.kernel_momentum_nodes": config.kernel_momentum_nodes,
        "version": __version__,
    }
    return config


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def write_manifest(outdir: Path, config: ExperimentConfig, extra: dict | None = None):
    lines = []
    items = dict(config.resolved)
    if extra:
        items.update(extra)
    for key in sorted(items):
        lines.append(f"{key} = {_fmt(items[key])}")
    (outdir / "manifest.txt").write_text("\n".join(lines) + "\n")


def write_csv(path: Path, header: list, columns: list):
    rows = ["" + ",".join(header)]
    n = len(columns[0])
    for i in range(n):
        rows.append(",".join(_fmt(col[i]) for col in columns))
    path.write_text("\n".join(rows) + "\n")


def write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_fmt) + "\n")


def _h0(config: ExperimentConfig, grid):
    """Shifted Gaussian bump used as the iteration's initial density."""
    sq = np.sum((grid.nodes - config.h0_center) ** 2, axis=-1)
    return np.exp(-0.5 * sq / config.h0_sigma**2)


def run_flow(config: ExperimentConfig, outdir: Path) -> int:
    model, spec = config.model, config.spec
    rng = np.random.default_rng(config.seed)
    q0 = rng.uniform(-0.5, 0.5, size=model.dim) + 1.0 if model.dim == 1 else rng.normal(size=model.dim)
    state = PhaseState(q=q0, p=np.zeros(model.dim))

    d = model.dim
    times, qs, ps, energies, dets = [0.0], [state.q], [state.p], [total_energy(state, model)], [1.0]
    n_check = max(1, config.samples)
    if spec.method == "exact_gaussian":
        for s in np.linspace(spec.time / n_check, spec.time, n_check):
            seg = FlowSpec(time=s, steps=1, method="exact_gaussian")
            Q, P, blocks, _, _ = tangent_batch(state.q[None], state.p[None], model, seg)
            times.append(s)
            qs.append(Q[0])
            ps.append(P[0])
            energies.append(float(model.target.value(Q[0]) + model.auxiliary.value(P[0])))
            top = np.hstack([blocks[0][0], blocks[1][0]])
            bot = np.hstack([blocks[2][0], blocks[3][0]])
            dets.append(float(np.linalg.det(np.vstack([top, bot]))))
    else:
        per = max(1, spec.steps // n_check)
        jac = np.eye(2 * d)
        q, p = state.q.copy(), state.p.copy()
        done = 0
        while done < spec.steps:
            take = min(per, spec.steps - done)
            seg = FlowSpec(time=take * spec.time / spec.steps, steps=take, method="leapfrog")
            Q, P, blocks, _, _ = tangent_batch(q[None], p[None], model, seg)
            q, p = Q[0], P[0]
            top = np.hstack([blocks[0][0], blocks[1][0]])
            bot = np.hstack([blocks[2][0], blocks[3][0]])
            jac = np.vstack([top, bot]) @ jac
            done += take
            times.append(done * spec.time / spec.steps)
            qs.append(q)
            ps.append(p)
            energies.append(float(model.target.value(q) + model.auxiliary.value(p)))
            dets.append(float(np.linalg.det(jac)))

    cols = [times]
    header = ["s"]
    for axis in range(d):
        header.append(f"q{axis}")
        cols.append([v[axis] for v in qs])
    for axis in range(d):
        header.append(f"p{axis}")
        cols.append([v[axis] for v in ps])
    header += ["energy", "det_jacobian"]
    cols += [energies, dets]
    write_csv(outdir / "flow.csv", header, cols)

    drift = max(energies) - min(energies)
    det_dev = max(abs(v - 1.0) for v in dets)
    write_json(outdir / "conservation.json", {
        "energy_drift": drift,
        "det_jacobian_max_deviation": det_dev,
        "closure_distance": float(
            max(np.max(np.abs(qs[-1] - qs[0])), np.max(np.abs(ps[-1] - ps[0])))
        ),
    })
    write_manifest(outdir, config, {"result.energy_drift": drift, "result.det_dev": det_dev})
    return 0


def _operator_stack(config: ExperimentConfig):
    grid = build_grid(config.model, config.n_per_axis)
    T = assemble_transfer(
        grid, config.model, config.spec, config.momentum_nodes, momentum_kind=config.momentum_rule
    )
    return grid, T


def run_operator(config: ExperimentConfig, outdir: Path) -> int:
    grid, T = _operator_stack(config)
    model = config.model
    f = grid.target_values
    rng = np.random.default_rng(config.seed)

    fp = weighted_norm(T.apply(f) - f, grid) / weighted_norm(f, grid)
    worst_mass = 0.0
    worst_contr = 0.0
    for _ in range(100):
        h = random_density(grid, rng)
        m0 = mass(h, grid)
        worst_mass = max(worst_mass, abs(mass(T.apply(h), grid) - m0) / m0)
        worst_contr = max(worst_contr, weighted_norm(T.apply(h), grid) / weighted_norm(h, grid))
    T_adj = assemble_adjoint(
        grid, model, config.spec, config.momentum_nodes, momentum_kind=config.momentum_rule
    )
    worst_dual = 0.0
    for _ in range(20):
        h = random_density(grid, rng)
        k = random_density(grid, rng)
        lhs = weighted_inner(T.apply(h), k, grid)
        rhs = weighted_inner(h, T_adj.apply(k), grid)
        worst_dual = max(worst_dual, abs(lhs - rhs) / (weighted_norm(h, grid) * weighted_norm(k, grid)))

    trace = iterate(T, _h0(config, grid), config.n_max, config.tol)
    write_csv(outdir / "trace.csv", ["n", "norm", "error"], [trace.steps, trace.norms, trace.errors])
    report = {
        "fixed_point_residual": fp,
        "mass_error_max": worst_mass,
        "contraction_factor_max": worst_contr,
        "self_adjointness_residual": weighted_symmetry_residual(T),
        "duality_residual_max": worst_dual,
        "leaked_mass": T.meta["leaked_mass"],
        "iteration_converged": trace.converged,
        "iteration_anomaly": trace.anomaly,
        "limit_mass_ratio": trace.alpha,
    }
    write_json(outdir / "operator_report.json", report)
    write_manifest(outdir, config, {f"result.{k}": v for k, v in report.items()})
    return 0


def run_spectrum(config: ExperimentConfig, outdir: Path) -> int:
    grid, T = _operator_stack(config)
    report = eigen_spectrum(T, grid, config.top_k)
    ks = np.arange(len(report.eigenvalues))
    write_csv(outdir / "spectrum.csv", ["k", "mu"], [ks, report.eigenvalues])
    payload = {
        "gap": report.gap,
        "rate_bound": report.rate_bound,
        "multiplicity_check": report.multiplicity_check,
        "second_mass": report.second_mass,
        "symmetry_residual": report.symmetry_residual,
        "asymmetry_diagnostic": report.asymmetry_diagnostic,
        "symmetrized_fallback": report.symmetrized_fallback,
        "gap_caveat": report.gap_caveat,
    }
    write_json(outdir / "spectral_report.json", payload)
    write_manifest(outdir, config, {f"result.{k}": v for k, v in payload.items()})
    return 0


def run_kernel_norm(config: ExperimentConfig, outdir: Path) -> int:
    grid, T = _operator_stack(config)
    field = assemble_kernel(grid, config.model, config.spec, config.kernel_momentum_nodes)
    value = hs_norm(field, grid)
    report = eigen_spectrum(T, grid, min(grid.n - 1, 64))
    payload = {
        "hs_norm_sq": value,
        "hs_norm_sq_momentum": field.hs_norm_sq_momentum,
        "sum_mu_sq": report.sum_squares,
    }
    if config.spec.time * config.model.lambda_max < math.pi / 2:
        lo, hi = determinant_bounds(config.model, config.spec.time)
        payload["hs_bound_from_determinants"] = hi
    write_json(outdir / "kernel_report.json", payload)
    write_manifest(outdir, config, {f"result.{k}": v for k, v in payload.items()})
    return 0


def run_convergence(config: ExperimentConfig, outdir: Path) -> int:
    grid, T = _operator_stack(config)
    report = eigen_spectrum(T, grid, config.top_k)
    trace = iterate(T, _h0(config, grid), config.n_max, config.tol)
    cert = certify_rate(report, trace)
    write_csv(outdir / "trace.csv", ["n", "norm", "error"], [trace.steps, trace.norms, trace.errors])
    ks = np.arange(len(report.eigenvalues))
    write_csv(outdir / "spectrum.csv", ["k", "mu"], [ks, report.eigenvalues])
    write_json(outdir / "certificate.json", cert.to_dict())
    write_manifest(outdir, config, {
        "result.rho_emp": cert.rho_emp,
        "result.rho_spec": cert.rho_spec,
        "result.passed": cert.passed,
    })
    return 0 if cert.passed else 2


def hmc_chain(model: ModelPair, spec: FlowSpec, draws: int, rng: np.random.Generator):
    """Plain HMC chain: momentum refresh, flow, Metropolis correction.

    Returns (positions, acceptance_rate).  The exact Gaussian flow conserves
    energy exactly, so every proposal is accepted and the 1-d chain reduces to
    a linear recursion solved in one vectorized pass.
    """
    d = model.dim
    if draws == 0:
        return np.zeros((0, d)), float("nan")
    momenta_scale = np.linalg.cholesky(np.linalg.inv(model.auxiliary.params["precision"]))
    if spec.method == "exact_gaussian" and d == 1:
        from scipy.signal import lfilter

        from .dynamics import exact_gaussian_matrix

        mat = exact_gaussian_matrix(model, spec.time)
        mu = float(model.target.params["mean"][0])
        p = rng.standard_normal(draws) * momenta_scale[0, 0]
        centered = lfilter([mat[0, 1]], [1.0, -mat[0, 0]], p)
        return (centered + mu)[:, None], 1.0
    q = np.zeros(d) + model.target.params.get("mean", np.zeros(d)) if model.target.is_gaussian else np.zeros(d)
    out = np.empty((draws, d))
    accepted = 0
    for i in range(draws):
        p = momenta_scale @ rng.standard_normal(d)
        e0 = float(model.target.value(q) + model.auxiliary.value(p))
        Q, P = flow_batch(q, p, model, spec)
        e1 = float(model.target.value(Q) + model.auxiliary.value(P))
        if math.log(rng.uniform()) < e0 - e1:
            q = Q
            accepted += 1
        out[i] = q
    return out, accepted / draws


def run_sampler_check(config: ExperimentConfig, outdir: Path) -> int:
    model = config.model
    if model.dim != 1:
        raise ConfigError("sampler-check: only 1-d models are supported")
    rng = np.random.default_rng(config.seed)
    samples, acceptance = hmc_chain(model, config.spec, config.draws, rng)
    if config.draws == 0:
        write_json(outdir / "sampler_report.json", {"draws": 0, "sup_distance": float("nan")})
        write_manifest(outdir, config, {"result.draws": 0})
        return 0

    grid, T = _operator_stack(config)
    report = eigen_spectrum(T, grid, 2)
    fixed = report.leading_vector / mass(report.leading_vector, grid)

    L = model.domain_halfwidth
    edges = np.linspace(-L, L, config.bins + 1)
    counts, _ = np.histogram(samples[:, 0], bins=edges)
    width = edges[1] - edges[0]
    empirical = counts / (config.draws * width)
    from scipy.interpolate import CubicSpline

    dens = CubicSpline(grid.axes[0], fixed)
    reference = np.array([dens.integrate(a, b) for a, b in zip(edges[:-1], edges[1:])]) / width
    sup = float(np.max(np.abs(empirical - reference)))
    centers = 0.5 * (edges[:-1] + edges[1:])
    write_csv(outdir / "histogram.csv", ["center", "empirical", "reference"],
              [centers, empirical, reference])
    payload = {"draws": config.draws, "acceptance_rate": acceptance, "sup_distance": sup}
    if acceptance < 0.5:
        payload["warning"] = "acceptance below 0.5, reduce the leapfrog substep"
    write_json(outdir / "sampler_report.json", payload)
    write_manifest(outdir, config, {f"result.{k}": v for k, v in payload.items()})
    return 0


RUNNERS = {
    "flow": run_flow,
    "operator": run_operator,
    "spectrum": run_spectrum,
    "kernel-norm": run_kernel_norm,
    "convergence": run_convergence,
    "sampler-check": run_sampler_check,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hmctransfer",
        description="Transfer-operator experiments for Hamiltonian Monte Carlo",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="INI experiment configuration")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
        if config.kind != args.command:
            # the subcommand wins; the config's kind is a default
            config.kind = args.command
            config.resolved["experiment.kind"] = args.command
        if args.seed is not None:
            config.seed = args.seed
            config.resolved["experiment.seed"] = args.seed
        outdir = Path(args.out or config.output or f"out-{config.kind}")
        outdir.mkdir(parents=True, exist_ok=True)
        config.resolved["experiment.threads"] = args.threads if args.threads else "default"
        runner = RUNNERS[config.kind]
        if args.threads:
            try:
                from threadpoolctl import threadpool_limits

                with threadpool_limits(limits=args.threads):
                    return runner(config, outdir)
            except ImportError:
                config.resolved["experiment.threads"] = "default (threadpoolctl unavailable)"
        return runner(config, outdir)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures also map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

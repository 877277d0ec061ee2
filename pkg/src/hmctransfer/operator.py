"""Discretized density space and the transfer operator.

The position domain [-L, L]^d carries a trapezoid tensor grid; densities are
vectors of node values and the Hilbert structure is the f-weighted inner
product sum w a b / f.  One operator application spreads a density over
momenta with the auxiliary density, flows every phase point, and integrates
the momenta back out:

    (T h)(q) = int h(Q(q, p)) g(P(q, p)) dp,   g normalized to unit mass.

The matrix is assembled by momentum quadrature per position node, with the
value h(Q) obtained by cubic-spline interpolation on the grid (linear in
d >= 2).  Two algebraically equivalent forms are kept: ``direct`` deposits
g(P) evaluated along the flow, ``likelihood`` transports the ratio h/f and
re-weights by f, which avoids the division at deposit time.  For the exact
flow they differ only by interpolation error; under leapfrog the difference
measures the energy-conservation error.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .distributions import ModelPair, density_value
from .dynamics import FlowSpec, flow_batch

__all__ = [
    "DensityGrid",
    "MomentumRule",
    "TransferMatrix",
    "IterationTrace",
    "build_grid",
    "mass",
    "weighted_inner",
    "weighted_norm",
    "build_momentum_rule",
    "assemble_transfer",
    "assemble_adjoint",
    "weighted_symmetry_residual",
    "to_weighted_symmetric",
    "symmetrize",
    "iterate",
    "random_density",
]


@dataclass(frozen=True)
class DensityGrid:
    """Quadrature nodes, weights and target values on the truncated domain."""

    axes: tuple
    nodes: np.ndarray
    weights: np.ndarray
    target_values: np.ndarray
    floor: float
    warnings: tuple = ()

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    @property
    def shape(self) -> tuple:
        return tuple(len(ax) for ax in self.axes)

    @property
    def halfwidth(self) -> float:
        return float(self.axes[0][-1])

    @property
    def retained(self) -> np.ndarray:
        """Mask of nodes kept in weighted norms: target density above floor."""
        return self.target_values > self.floor

    def inside(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points lying in the closed box."""
        ok = np.ones(points.shape[:-1], dtype=bool)
        for axis, ax in enumerate(self.axes):
            ok &= (points[..., axis] >= ax[0]) & (points[..., axis] <= ax[-1])
        return ok


def _trapezoid_axis(halfwidth: float, n: int):
    x = np.linspace(-halfwidth, halfwidth, n)
    w = np.full(n, x[1] - x[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    return x, w


def _tensor_grid(axes, axis_weights):
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=-1)
    w = axis_weights[0]
    for extra in axis_weights[1:]:
        w = np.multiply.outer(w, extra)
    return nodes, w.ravel()


def build_grid(model: ModelPair, n_per_axis: int) -> DensityGrid:
    """Trapezoid tensor grid over [-L, L]^d with the target tabulated on it."""
    if n_per_axis < 16:
        raise ValueError(f"need at least 16 nodes per axis, got {n_per_axis}")
    L = model.domain_halfwidth
    d = model.dim
    pairs = [_trapezoid_axis(L, n_per_axis) for _ in range(d)]
    axes = tuple(p[0] for p in pairs)
    nodes, w = _tensor_grid(axes, [p[1] for p in pairs])
    f = density_value(model.target, nodes)

    notes = []
    fine_pairs = [_trapezoid_axis(L, 2 * n_per_axis - 1) for _ in range(d)]
    fine_nodes, fine_w = _tensor_grid(
        tuple(p[0] for p in fine_pairs), [p[1] for p in fine_pairs]
    )
    ref = float(fine_w @ density_value(model.target, fine_nodes))
    got = float(w @ f)
    if abs(got - ref) > 1e-3 * abs(ref):
        msg = (
            f"grid too coarse: integral of f deviates from refined reference by "
            f"{abs(got - ref) / abs(ref):.2e} relative"
        )
        warnings.warn(msg)
        notes.append(msg)
    return DensityGrid(
        axes=axes,
        nodes=nodes,
        weights=w,
        target_values=f,
        floor=1e-12 * float(np.max(f)),
        warnings=tuple(notes),
    )


def mass(h, grid: DensityGrid) -> float:
    """Total mass sum w h over all nodes."""
    return float(grid.weights @ np.asarray(h, dtype=float))


def weighted_inner(a, b, grid: DensityGrid) -> float:
    """f-weighted inner product sum w a b / f over retained nodes."""
    m = grid.retained
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.sum(grid.weights[m] * a[m] * b[m] / grid.target_values[m]))


def weighted_norm(h, grid: DensityGrid) -> float:
    return math.sqrt(max(weighted_inner(h, h, grid), 0.0))


@dataclass(frozen=True)
class MomentumRule:
    """Quadrature nodes p_k and weights for integrals against the normalized
    auxiliary density; weights sum to one, so the constant likelihood is
    reproduced exactly."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str


def _auxiliary_halfwidth(model: ModelPair, tail: float = 1e-12) -> float:
    """Half-width covering all but ``tail`` of the auxiliary mass (1-d)."""
    probe = np.linspace(0.0, 14.0 / math.sqrt(model.auxiliary.lambda_lo), 8193)
    g = np.exp(-model.auxiliary.value(probe[:, None]))
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(probe))])
    total = cum[-1]
    idx = int(np.searchsorted(cum, (1.0 - 0.5 * tail) * total))
    return float(probe[min(idx + 1, len(probe) - 1)])


def build_momentum_rule(model: ModelPair, m: int, kind: str | None = None) -> MomentumRule:
    """Momentum quadrature matched to the auxiliary density.

    Default is a trapezoid rule on a box covering 1 - 1e-12 of the auxiliary
    mass: its evenly spaced nodes resolve every deposit cell, which keeps the
    matrix entries (not just smooth functionals) accurate.  Gauss-Hermite
    nodes matched to a Gaussian auxiliary are available as an option; they
    integrate smooth observables superbly but undersample the deposit at
    desk-scale node counts.
    """
    if m < 2:
        raise ValueError("need at least 2 momentum nodes")
    d = model.dim
    if kind is None:
        kind = "trapezoid" if d == 1 else "gauss_hermite"
    if kind == "gauss_hermite":
        if not model.auxiliary.is_gaussian:
            raise ValueError("gauss_hermite rule requires a Gaussian auxiliary density")
        x, w = np.polynomial.hermite.hermgauss(m)
        z = math.sqrt(2.0) * x
        w = w / math.sqrt(math.pi)
        prec = model.auxiliary.params["precision"]
        vals, vecs = np.linalg.eigh(prec)
        # map standard-normal nodes through the covariance square root
        transform = (vecs / np.sqrt(vals)) @ vecs.T
        axes = [z] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=-1) @ transform.T
        wt = w
        for _ in range(d - 1):
            wt = np.multiply.outer(wt, w)
        wt = wt.ravel()
    elif kind == "trapezoid":
        if d != 1:
            raise ValueError("trapezoid momentum rule is 1-d only")
        half = _auxiliary_halfwidth(model)
        pts, wt = _trapezoid_axis(half, m)
        pts = pts[:, None]
        wt = wt * np.exp(-model.auxiliary.value(pts))
    else:
        raise ValueError(f"unknown momentum rule {kind!r}")
    wt = wt / wt.sum()
    return MomentumRule(nodes=pts, weights=wt, kind=kind)


@dataclass
class TransferMatrix:
    """Dense matrix realization of the transfer operator on a grid."""

    entries: np.ndarray
    grid: DensityGrid
    meta: dict = field(default_factory=dict)

    def apply(self, h) -> np.ndarray:
        return self.entries @ np.asarray(h, dtype=float)


def _deposit_matrix_cubic(grid: DensityGrid, flat_q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Accumulate T_ij = sum_k G[i, k] c_j(Q[i, k]) with cubic-spline cardinals.

    Basis vectors are interpolated in column chunks; points outside the grid
    contribute nothing (truncated mass).
    """
    x = grid.axes[0]
    n = grid.n
    n_rows, m = G.shape
    out = np.zeros((n_rows, n))
    chunk = 64
    eye = np.eye(n)
    for j0 in range(0, n, chunk):
        block = eye[:, j0:j0 + chunk]
        spline = CubicSpline(x, block, axis=0, extrapolate=False)
        vals = spline(flat_q)
        np.nan_to_num(vals, copy=False, nan=0.0)
        out[:, j0:j0 + chunk] = np.einsum(
            "im,imb->ib", G, vals.reshape(n_rows, m, block.shape[1])
        )
    return out


def _deposit_matrix_linear(grid: DensityGrid, points: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Multilinear scatter deposit for d >= 2 grids."""
    n_rows, m = G.shape
    d = grid.dim
    shape = grid.shape
    flat = points.reshape(-1, d)
    inside = grid.inside(flat)
    idx = np.zeros((flat.shape[0], d), dtype=int)
    frac = np.zeros((flat.shape[0], d))
    for axis, ax in enumerate(grid.axes):
        pos = np.clip(np.searchsorted(ax, flat[:, axis]) - 1, 0, len(ax) - 2)
        idx[:, axis] = pos
        frac[:, axis] = (flat[:, axis] - ax[pos]) / (ax[pos + 1] - ax[pos])
    out = np.zeros((n_rows, grid.n))
    rows = np.repeat(np.arange(n_rows), m)
    weights_flat = G.reshape(-1)
    strides = np.array([int(np.prod(shape[a + 1:])) for a in range(d)])
    for corner in range(2 ** d):
        bits = np.array([(corner >> a) & 1 for a in range(d)])
        w = weights_flat * inside
        col = np.zeros(flat.shape[0], dtype=int)
        for axis in range(d):
            take = frac[:, axis] if bits[axis] else (1.0 - frac[:, axis])
            w = w * take
            col += (idx[:, axis] + bits[axis]) * strides[axis]
        np.add.at(out, (rows, col), w)
    return out


def _flow_factor_grid(grid, model, spec, rule, inverse):
    """Flow all (node, momentum) pairs; return Q (n,m,d), weights G (n,m)."""
    n = grid.n
    m = rule.nodes.shape[0]
    d = grid.dim
    q_rep = np.repeat(grid.nodes, m, axis=0)
    p_rep = np.tile(rule.nodes, (n, 1))
    Q, P = flow_batch(q_rep, p_rep, model, spec, inverse=inverse)
    Q = Q.reshape(n, m, d)
    P = P.reshape(n, m, d)
    return Q, P


def _assemble(grid, model, spec, momentum_nodes, form, momentum_kind, inverse):
    if form not in ("direct", "likelihood"):
        raise ValueError(f"unknown assembly form {form!r}")
    # conjugate points first appear at t * sqrt(lambda_max) >= pi for constant
    # curvature; the operator itself stays well defined up to there
    t_lam = spec.time * model.lambda_max
    if t_lam >= math.pi:
        raise ValueError(
            f"t * lambda_max = {t_lam:.6f} beyond the conjugate-point bound (< pi)"
        )
    rule = build_momentum_rule(model, momentum_nodes, momentum_kind)
    Q, P = _flow_factor_grid(grid, model, spec, rule, inverse)
    n, m, d = Q.shape

    log_w = np.log(rule.weights)[None, :]
    if form == "direct":
        v_at_nodes = model.auxiliary.value(rule.nodes)
        v_at_images = model.auxiliary.value(P.reshape(-1, d)).reshape(n, m)
        G = np.exp(log_w + v_at_nodes[None, :] - v_at_images)
    else:
        G = np.exp(np.broadcast_to(log_w, (n, m)).copy())

    inside = grid.inside(Q)
    frac_outside = 1.0 - float(np.count_nonzero(inside)) / inside.size
    f = grid.target_values
    total_f = float(grid.weights @ f)
    leak_w = G * ~inside
    leaked = float((grid.weights * f) @ leak_w.sum(axis=1)) / total_f
    notes = []
    if frac_outside > 1e-3:
        msg = (
            f"domain truncation: {100 * frac_outside:.3f}% of flow images leave the box, "
            f"leaked relative mass {leaked:.3e}"
        )
        warnings.warn(msg)
        notes.append(msg)

    if d == 1:
        T = _deposit_matrix_cubic(grid, Q.reshape(-1), G)
    else:
        T = _deposit_matrix_linear(grid, Q, G)
    if form == "likelihood":
        T = (f[:, None] / f[None, :]) * T

    meta = {
        "form": form,
        "inverse": inverse,
        "gaussian_model": model.is_gaussian,
        "method": spec.method,
        "time": spec.time,
        "steps": spec.steps,
        "momentum_kind": rule.kind,
        "momentum_nodes": momentum_nodes,
        "frac_outside": frac_outside,
        "leaked_mass": leaked,
        "notes": tuple(notes),
        "deposit": "cubic_spline" if d == 1 else "multilinear",
    }
    return TransferMatrix(entries=T, grid=grid, meta=meta)


def assemble_transfer(
    grid: DensityGrid,
    model: ModelPair,
    spec: FlowSpec,
    momentum_nodes: int,
    form: str = "direct",
    momentum_kind: str | None = None,
) -> TransferMatrix:
    """Assemble the transfer operator by momentum quadrature of the flow."""
    return _assemble(grid, model, spec, momentum_nodes, form, momentum_kind, inverse=False)


def assemble_adjoint(
    grid: DensityGrid,
    model: ModelPair,
    spec: FlowSpec,
    momentum_nodes: int,
    form: str = "direct",
    momentum_kind: str | None = None,
) -> TransferMatrix:
    """Assemble the adjoint operator: same construction through the inverse flow."""
    return _assemble(grid, model, spec, momentum_nodes, form, momentum_kind, inverse=True)


def to_weighted_symmetric(T: TransferMatrix):
    """Similarity transform to the ordinary-symmetric form.

    Conjugation by diag(sqrt(w/f)) turns self-adjointness in the f-weighted
    inner product into matrix symmetry.  Nodes below the density floor are
    dropped.  Returns (symmetric matrix, retained-node mask, scaling vector).
    """
    grid = T.grid
    m = grid.retained
    scale = np.sqrt(grid.weights[m] / grid.target_values[m])
    sub = T.entries[np.ix_(m, m)]
    return (scale[:, None] / scale[None, :]) * sub, m, scale


def matrix_asymmetry(T: TransferMatrix) -> float:
    """Spectral-norm asymmetry of the weighted-similarity matrix.

    Diagnostic only: per-entry interpolation noise near the domain boundary is
    amplified by 1/sqrt(f), so this floors orders of magnitude above the
    operator-level residual below.
    """
    A, _, _ = to_weighted_symmetric(T)
    return float(np.linalg.norm(A - A.T, 2) / np.linalg.norm(A, 2))


def _probe_densities(grid: DensityGrid, count: int = 8):
    """Fixed family of smooth unit-mass bumps spanning the resolved domain."""
    L = grid.halfwidth
    centers = np.linspace(-0.3 * L, 0.3 * L, count)
    sigma = 0.1 * L
    probes = []
    for c in centers:
        sq = np.sum((grid.nodes - c) ** 2, axis=-1)
        h = np.exp(-0.5 * sq / sigma**2)
        probes.append(h / mass(h, grid))
    return probes


def weighted_symmetry_residual(T: TransferMatrix) -> float:
    """Self-adjointness residual of the operator in the weighted inner product.

    Measured functionally, max over smooth probe pairs of
    |<T a, b> - <a, T b>| / (||a|| ||b||), the deviation the Hilbert-space
    argument actually uses.
    """
    grid = T.grid
    probes = _probe_densities(grid)
    norms = [weighted_norm(p, grid) for p in probes]
    images = [T.apply(p) for p in probes]
    worst = 0.0
    for i in range(len(probes)):
        for j in range(i + 1, len(probes)):
            lhs = weighted_inner(images[i], probes[j], grid)
            rhs = weighted_inner(probes[i], images[j], grid)
            worst = max(worst, abs(lhs - rhs) / (norms[i] * norms[j]))
    return worst


def symmetrize(T: TransferMatrix, T_adj: TransferMatrix) -> TransferMatrix:
    """Self-adjoint composition T_adj . T."""
    if T.grid is not T_adj.grid and not (
        T.grid.shape == T_adj.grid.shape and np.array_equal(T.grid.nodes, T_adj.grid.nodes)
    ):
        raise ValueError("transfer and adjoint matrices live on different grids")
    meta = dict(T.meta)
    meta["form"] = "symmetrized"
    return TransferMatrix(entries=T_adj.entries @ T.entries, grid=T.grid, meta=meta)


@dataclass(frozen=True)
class IterationTrace:
    """Per-step norms and errors of the fixed-point iteration h -> T h."""

    steps: np.ndarray
    norms: np.ndarray
    errors: np.ndarray
    alpha: float
    tol: float
    converged: bool
    anomaly: bool
    final: np.ndarray


def iterate(T: TransferMatrix, h0, n_max: int, tol: float) -> IterationTrace:
    """Iterate the operator, tracking ||T^n h|| and the error to alpha f.

    alpha = mass(h0) / mass(f) identifies the limit density.  The norm column
    realizes the monotone limit V(h) = lim ||T^n h||^2.  Ten consecutive error
    increases are flagged as an anomaly (broken discretization) and stop the
    run.
    """
    grid = T.grid
    h = np.asarray(h0, dtype=float).copy()
    alpha = mass(h, grid) / mass(grid.target_values, grid)
    limit = alpha * grid.target_values
    ns = [0]
    norms = [weighted_norm(h, grid)]
    errors = [weighted_norm(h - limit, grid)]
    anomaly = False
    rising = 0
    n = 0
    while errors[-1] >= tol and n < n_max:
        h = T.entries @ h
        n += 1
        ns.append(n)
        norms.append(weighted_norm(h, grid))
        errors.append(weighted_norm(h - limit, grid))
        rising = rising + 1 if errors[-1] > errors[-2] else 0
        # wobble at the discretization floor is expected; sustained growth
        # well above the best error seen means a broken discretization
        if rising >= 10 and errors[-1] > 3.0 * min(errors):
            anomaly = True
            break
    return IterationTrace(
        steps=np.array(ns),
        norms=np.array(norms),
        errors=np.array(errors),
        alpha=alpha,
        tol=tol,
        converged=bool(errors[-1] < tol),
        anomaly=anomaly,
        final=h,
    )


def random_density(grid: DensityGrid, rng: np.random.Generator, components: int | None = None):
    """Smooth random density: a small Gaussian mixture well inside the box.

    Centers stay within a quarter of the half-width and widths are a few grid
    cells wide, so tails vanish long before the domain boundary and the
    interpolated deposit stays positive.
    """
    L = grid.halfwidth
    d = grid.dim
    if components is None:
        components = int(rng.integers(3, 7))
    centers = rng.uniform(-0.25 * L, 0.25 * L, size=(components, d))
    sigmas = rng.uniform(0.0625 * L, 0.1125 * L, size=components)
    weights = rng.uniform(0.2, 1.0, size=components)
    vals = np.zeros(grid.n)
    for c, s, w in zip(centers, sigmas, weights):
        sq = np.sum((grid.nodes - c) ** 2, axis=-1)
        vals += w * np.exp(-0.5 * sq / s**2)
    return vals

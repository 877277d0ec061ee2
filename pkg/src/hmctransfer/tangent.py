"""Variational flow of the derivative blocks d(Q,P)/d(q,p).

The blocks evolve under the generator [[0, V''], [-U'', 0]] with identity
initial condition.  Two backends are kept deliberately:

* chain rule through the leapfrog substeps, the exact derivative of the
  discrete map actually used for kernel assembly, and
* the closed-form block exponential in cos/sinc of sqrt(VU), sqrt(UV) built
  from running-average Hessians, exact when the Hessians are constant
  (Gaussian models) and a diagnostic approximation otherwise.

Also provides the Jacobian factors D_q = 1/|det dQ/dp|, D_p = 1/|det dP/dq|
and the regime bounds on their product valid for t * lambda_max < pi/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .distributions import ModelPair
from .dynamics import FlowSpec, PhaseState, exact_gaussian_matrix

__all__ = [
    "TangentBlocks",
    "RunningAverages",
    "SingularJacobianError",
    "sinc",
    "integrate_tangent",
    "tangent_batch",
    "spd_sqrt",
    "sqrt_product",
    "block_exponential",
    "jacobian_determinants",
    "determinant_bounds",
]


class SingularJacobianError(ValueError):
    """A derivative block is numerically singular (conjugate point reached)."""


def sinc(x):
    """sin(x)/x with a 3-term series below |x| < 1e-4 to avoid cancellation."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    out = np.where(small, 1.0 - x**2 / 6.0 + x**4 / 120.0, np.sin(safe) / safe)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class TangentBlocks:
    """The four d x d blocks of the flow derivative."""

    dQdq: np.ndarray
    dQdp: np.ndarray
    dPdq: np.ndarray
    dPdp: np.ndarray

    def matrix(self) -> np.ndarray:
        """Full 2d x 2d Jacobian."""
        top = np.hstack([self.dQdq, self.dQdp])
        bot = np.hstack([self.dPdq, self.dPdp])
        return np.vstack([top, bot])

    def det(self) -> float:
        """Determinant of the full Jacobian; 1 for a symplectic map."""
        return float(np.linalg.det(self.matrix()))


@dataclass(frozen=True)
class RunningAverages:
    """Time averages (1/t) int_0^t of the Hessians along a trajectory."""

    Ubar: np.ndarray
    Vbar: np.ndarray
    time: float


def _identity_blocks(n, d):
    eye = np.broadcast_to(np.eye(d), (n, d, d)).copy()
    zero = np.zeros((n, d, d))
    return eye, zero.copy(), zero.copy(), eye.copy()


def tangent_batch(qs, ps, model: ModelPair, spec: FlowSpec):
    """Co-integrate flow and variational equation for a batch of states.

    Returns (Q, P, (dQdq, dQdp, dPdq, dPdp), Ubar, Vbar) with leading batch
    axis.  For leapfrog the blocks are the exact chain-rule derivatives of the
    discrete map; the averages use the trapezoid rule over substep Hessians,
    matching the integrator's order.
    """
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    ps = np.atleast_2d(np.asarray(ps, dtype=float))
    n, d = qs.shape

    if spec.method == "exact_gaussian":
        mat = exact_gaussian_matrix(model, spec.time)
        mu = model.target.params["mean"]
        Q = (qs - mu) @ mat[:d, :d].T + ps @ mat[:d, d:].T + mu
        P = (qs - mu) @ mat[d:, :d].T + ps @ mat[d:, d:].T
        blocks = tuple(
            np.broadcast_to(mat[i * d:(i + 1) * d, j * d:(j + 1) * d], (n, d, d)).copy()
            for i, j in ((0, 0), (0, 1), (1, 0), (1, 1))
        )
        Ubar = np.broadcast_to(model.target.params["precision"], (n, d, d)).copy()
        Vbar = np.broadcast_to(model.auxiliary.params["precision"], (n, d, d)).copy()
        return Q, P, blocks, Ubar, Vbar

    tau = spec.time / spec.steps
    q = qs.copy()
    p = ps.copy()
    dQdq, dQdp, dPdq, dPdp = _identity_blocks(n, d)
    u_sum = 0.5 * model.target.hess(q)
    v_sum = 0.5 * model.auxiliary.hess(p)
    for step in range(spec.steps):
        hq = model.target.hess(q)
        p = p - 0.5 * tau * model.target.grad(q)
        dPdq = dPdq - 0.5 * tau * hq @ dQdq
        dPdp = dPdp - 0.5 * tau * hq @ dQdp

        hp = model.auxiliary.hess(p)
        q = q + tau * model.auxiliary.grad(p)
        dQdq = dQdq + tau * hp @ dPdq
        dQdp = dQdp + tau * hp @ dPdp

        hq = model.target.hess(q)
        p = p - 0.5 * tau * model.target.grad(q)
        dPdq = dPdq - 0.5 * tau * hq @ dQdq
        dPdp = dPdp - 0.5 * tau * hq @ dQdp

        last = step == spec.steps - 1
        u_sum = u_sum + (0.5 if last else 1.0) * hq
        v_sum = v_sum + (0.5 if last else 1.0) * model.auxiliary.hess(p)
    return q, p, (dQdq, dQdp, dPdq, dPdp), u_sum / spec.steps, v_sum / spec.steps


def integrate_tangent(state: PhaseState, model: ModelPair, spec: FlowSpec):
    """Flow one state together with its tangent blocks and running averages."""
    Q, P, blocks, Ubar, Vbar = tangent_batch(state.q[None, :], state.p[None, :], model, spec)
    out_state = PhaseState(q=Q[0], p=P[0])
    out_blocks = TangentBlocks(*(b[0] for b in blocks))
    return out_state, out_blocks, RunningAverages(Ubar=Ubar[0], Vbar=Vbar[0], time=spec.time)


def spd_sqrt(mat) -> np.ndarray:
    """Symmetric positive definite square root via spectral decomposition."""
    mat = np.asarray(mat, dtype=float)
    scale = max(1.0, float(np.max(np.abs(mat))))
    if np.max(np.abs(mat - mat.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(mat)
    if vals[0] <= 0:
        raise ValueError(f"matrix not positive definite, offending eigenvalue {vals[0]:.6e}")
    root = (vecs * np.sqrt(vals)) @ vecs.T
    return 0.5 * (root + root.T)


def sqrt_product(v, u) -> np.ndarray:
    """A with A A = V U, positive real spectrum, for spd V and U.

    Uses the similarity sqrt(VU) = sqrt(U)^-1 sqrt(sqrt(U) V sqrt(U)) sqrt(U),
    which reduces the problem to a symmetric one.
    """
    v = np.asarray(v, dtype=float)
    u = np.asarray(u, dtype=float)
    su = spd_sqrt(u)
    inner = spd_sqrt(su @ v @ su)
    return np.linalg.solve(su, inner) @ su


def block_exponential(averages: RunningAverages) -> TangentBlocks:
    """Closed-form solution blocks from the running-average Hessians.

    With A = sqrt(Vbar Ubar), B = sqrt(Ubar Vbar) and t the averaging time:
    [[cos(tA), t Vbar sinc(tB)], [-t Ubar sinc(tA), cos(tB)]].
    All matrix functions are evaluated spectrally through the symmetric
    similarity transform, so only one eigendecomposition is needed.
    """
    u = np.asarray(averages.Ubar, dtype=float)
    v = np.asarray(averages.Vbar, dtype=float)
    t = averages.time
    su = spd_sqrt(u)
    su_inv = np.linalg.inv(su)
    vals, vecs = np.linalg.eigh(su @ v @ su)
    if vals[0] <= 0:
        raise ValueError(f"Vbar not positive definite through the transform: {vals[0]:.6e}")
    w = np.sqrt(vals)
    cos_w = (vecs * np.cos(t * w)) @ vecs.T
    sinc_w = (vecs * sinc(t * w)) @ vecs.T
    return TangentBlocks(
        dQdq=su_inv @ cos_w @ su,
        dQdp=t * v @ su @ sinc_w @ su_inv,
        dPdq=-t * su @ sinc_w @ su,
        dPdp=su @ cos_w @ su_inv,
    )


def jacobian_determinants(blocks: TangentBlocks):
    """(D_q, D_p) = (1/|det dQ/dp|, 1/|det dP/dq|).

    Raises SingularJacobianError when a block determinant vanishes, which
    signals an integration time at or beyond a conjugate point.
    """
    det_qp = float(np.linalg.det(blocks.dQdp))
    det_pq = float(np.linalg.det(blocks.dPdq))
    if abs(det_qp) < 1e-14:
        raise SingularJacobianError(f"dQdp block singular, |det| = {abs(det_qp):.3e}")
    if abs(det_pq) < 1e-14:
        raise SingularJacobianError(f"dPdq block singular, |det| = {abs(det_pq):.3e}")
    return 1.0 / abs(det_qp), 1.0 / abs(det_pq)


def determinant_bounds(model: ModelPair, time: float):
    """Regime bounds (lower, upper) on the product D_q * D_p.

    Valid for 0 < t * lambda_max < pi/2:
    lower = (t lambda_max)^(-2d), upper = (t sinc(t lambda_min))^(-2d).
    """
    lam = model.lambda_min
    big = model.lambda_max
    if time <= 0:
        raise ValueError("time must be positive")
    if time * big >= math.pi / 2:
        raise ValueError(
            f"t * lambda_max = {time * big:.6f} outside the regime (need < pi/2 = {math.pi / 2:.6f})"
        )
    d = model.dim
    lower = (time * big) ** (-2 * d)
    upper = (time * float(sinc(time * lam))) ** (-2 * d)
    return lower, upper

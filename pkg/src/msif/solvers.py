"""Inverse-Hessian-vector products by conjugate gradient on the squared system.

``solve_ihvp`` minimizes ``1/2 x^T (H^2 + lam I) x - (H b)^T x``. For
invertible symmetric ``H`` and ``lam = 0`` the minimizer is ``H^{-1} b`` and
the system matrix ``H^2`` is positive definite even when ``H`` is indefinite.
``H`` is only ever touched through a matrix-free product.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import SolverError

DENSE_CAP = 512


@dataclass(frozen=True)
class SolverConfig:
    damping_lambda: float = 0.0
    cg_tol: float = 1e-6
    cg_max_iters: int = 200
    hessian_subsample: int | None = None
    subsample_seed: int = 0

    def __post_init__(self):
        if self.damping_lambda < 0:
            raise ValueError("damping_lambda must be non-negative")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be at least 1")
        if self.hessian_subsample is not None and self.hessian_subsample < 1:
            raise ValueError("hessian_subsample must be positive or None")


@dataclass(frozen=True)
class SolveReport:
    """``residual`` is ``|Hx - b| / |b|`` recomputed at the returned ``x``.

    ``system_residual`` is the relative residual of the damped system CG
    actually solves. Convergence is judged on ``residual`` when undamped and on
    ``system_residual`` when ``lam > 0`` (the damped solution is not meant to
    satisfy ``Hx = b``).
    """

    iterations: int
    residual: float
    system_residual: float
    converged: bool
    hvp_calls: int = 0


def _checked(hvp_oracle, counter):
    def call(v):
        counter[0] += 1
        out = np.asarray(hvp_oracle(v), dtype=np.float64)
        if not np.all(np.isfinite(out)):
            raise SolverError("non-finite Hessian-vector product")
        return out

    return call


def solve_ihvp(hvp_oracle, b, cfg=SolverConfig()):
    """Solve ``(H^2 + lam I) x = H b`` by CG; returns ``(x, SolveReport)``.

    Each iteration costs two oracle calls: ``Hp`` and ``H(Hp)``. ``Hp`` is also
    used to keep ``Hx`` current, so the undamped stopping test on ``|Hx - b|``
    is free. Non-convergence returns the best iterate seen with
    ``converged=False``.
    """
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise SolverError("non-finite right-hand side")
    counter = [0]
    H = _checked(hvp_oracle, counter)
    lam = cfg.damping_lambda
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), SolveReport(0, 0.0, 0.0, True, 0)

    c = H(b)
    cnorm = np.linalg.norm(c)
    x = np.zeros_like(b)
    Hx = np.zeros_like(b)
    if cnorm == 0.0:
        return x, SolveReport(0, 1.0, 0.0 if lam else 1.0, False, counter[0])
    r = c.copy()
    p = r.copy()
    rs = r @ r

    def monitor():
        return np.linalg.norm(r) / cnorm if lam else np.linalg.norm(Hx - b) / bnorm

    best_x, best_res, iters = x.copy(), monitor(), 0
    for k in range(1, cfg.cg_max_iters + 1):
        Hp = H(p)
        Ap = H(Hp) + lam * p
        curv = p @ Ap
        if curv <= 0.0:
            break
        step = rs / curv
        x = x + step * p
        Hx = Hx + step * Hp
        r = r - step * Ap
        iters = k
        res = monitor()
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= cfg.cg_tol:
            break
        rs_new = r @ r
        p = r + (rs_new / rs) * p
        rs = rs_new

    x = best_x
    Hx = H(x)
    residual = float(np.linalg.norm(Hx - b) / bnorm)
    system = float(np.linalg.norm(H(Hx) + lam * x - c) / cnorm)
    converged = (system if lam else residual) <= cfg.cg_tol
    return x, SolveReport(iters, residual, system, bool(converged), counter[0])


def identity_solve(b):
    """Stand-in for an inverse Hessian in the identity-Hessian ablation."""
    b = np.asarray(b, dtype=np.float64)
    return b.copy(), SolveReport(0, 0.0, 0.0, True, 0)


def dense_solve_reference(H, b, damping_lambda=0.0):
    """Dense oracle for ``(H^2 + lam I) x = H b`` (plain ``H^{-1} b`` at lam = 0)."""
    H = np.asarray(H, dtype=np.float64)
    if damping_lambda == 0.0:
        return np.linalg.solve(H, b)
    return np.linalg.solve(H @ H + damping_lambda * np.eye(len(b)), H @ b)


def dense_hessian(loss, params, batch, wrt, cap=DENSE_CAP):
    """Exact Hessian over ``wrt`` assembled column by column from HVPs."""
    n = params.length(params.ordered(wrt))
    if n > cap:
        raise SolverError(f"dense Hessian of size {n} exceeds cap {cap}")
    op = ad.CurvatureOperator(loss, params, batch, wrt)
    H = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        H[:, j] = op(e)
    return H


def subsample_indices(n, cfg):
    if n == 0:
        raise SolverError("cannot build a Hessian oracle on an empty dataset")
    k = n if cfg.hessian_subsample is None else cfg.hessian_subsample
    if k > n:
        raise SolverError(f"subsample of {k} exceeds dataset size {n}")
    if k == n:
        return np.arange(n)
    return np.sort(np.random.default_rng(cfg.subsample_seed).choice(n, size=k, replace=False))


def subsampled_hvp_oracle(loss, params, dataset, cfg, wrt=("W", "U")):
    """``v -> Hv`` averaged over a subsample fixed once per oracle.

    ``loss`` must average over its batch (as the training objectives do).
    """
    idx = subsample_indices(len(dataset), cfg)
    batch = dataset if idx.size == len(dataset) else dataset.subset(idx)
    op = ad.CurvatureOperator(loss, params, batch, wrt)
    op.indices = idx
    return op

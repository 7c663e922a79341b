"""Multi-stage influence of pretraining examples on finetuned test losses.

Sign convention: a positive score means that up-weighting ``z`` in the
pretraining objective increases the test loss. Removing ``z`` corresponds to
``eps = -1/m``, so the first-order predicted loss change on removal is
``-score / m`` (see :func:`predicted_removal_change`).

Fixed embedding (W frozen during finetuning). With ``H_G`` the (W, U) Hessian of
the pretrain objective and ``H_TT``, ``H_WT`` blocks of the finetune objective::

    v1    = H_TT^{-1} df/dTheta
    r_W   = H_WT v1 - df/dW
    v2    = H_G^{-1} [r_W; 0]
    score = <v2, dg(z)/d(W, U)>

Updated embedding with a proximal tether ``alpha |W - W_bar|^2``; ``K`` is the
(W, Theta) Hessian of the tethered finetune objective (so it carries ``2 alpha``
on the W diagonal)::

    v1    = K^{-1} df/d(W, Theta)
    v2    = H_G^{-1} [-2 alpha (v1)_W; 0]
    score = <v2, dg(z)/d(W, U)>

Both forms put every inverse on the test side, so each test point (or test
group) needs two IHVPs and each pretraining example one gradient.
"""

from __future__ import annotations

import hashlib
import json
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InfluenceError
from .solvers import SolveReport, SolverConfig, identity_solve, solve_ihvp, subsampled_hvp_oracle

PRETRAIN_SEGS = ("W", "U")


@dataclass(frozen=True)
class InfluenceConfig:
    pretrain_solver: SolverConfig = field(default_factory=lambda: SolverConfig(damping_lambda=1e-2))
    finetune_solver: SolverConfig = field(default_factory=lambda: SolverConfig(damping_lambda=1e-8))
    proximal_alpha: float = 0.01
    identity_hessian: bool = False

    def digest(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class InfluenceRecord:
    z_id: object
    x_id: object
    score: float
    mode: str
    reports: tuple = ()

    @property
    def converged(self):
        return all(r.converged for r in self.reports)


def predicted_removal_change(score, m):
    """First-order change of the test loss when the example is dropped (eps = -1/m)."""
    return -np.asarray(score, dtype=np.float64) / m


def aggregate(scores, how="sum"):
    scores = np.asarray(scores, dtype=np.float64)
    if how == "sum":
        return float(scores.sum())
    if how == "mean_abs":
        return float(np.abs(scores).mean()) if scores.size else 0.0
    raise ValueError(f"unknown aggregation {how!r}")


class MultiStageInfluence:
    """Influence engine bound to one (pretrain, finetune) checkpoint pair.

    Per-test vectors are cached, keyed by the test batch and the configuration,
    so sweeping every pretraining example costs one gradient per example after
    the first call.
    """

    def __init__(self, model, pretrain_ckpt, finetune_ckpt, Z, X, cfg=None, jobs=1):
        self.model = model
        self.pre = pretrain_ckpt
        self.fine = finetune_ckpt
        self.Z = Z
        self.X = X
        self.cfg = cfg or InfluenceConfig()
        self.jobs = max(1, int(jobs))
        self.mode = finetune_ckpt.mode
        if self.mode not in ("fixed_W", "update_W"):
            raise InfluenceError(f"finetune checkpoint has no usable mode ({self.mode!r})")
        if self.mode == "update_W":
            if not self.cfg.proximal_alpha > 0:
                raise InfluenceError("updated-embedding influence needs proximal_alpha > 0")
            if finetune_ckpt.proximal_alpha != self.cfg.proximal_alpha:
                warnings.warn(
                    f"finetune checkpoint trained with alpha={finetune_ckpt.proximal_alpha}, "
                    f"scoring with alpha={self.cfg.proximal_alpha}; the tethered model only "
                    "approximates this training run", stacklevel=2)
        if not pretrain_ckpt.converged:
            warnings.warn(f"pretrain checkpoint not converged (grad norm {pretrain_ckpt.grad_norm:.2e})",
                          stacklevel=2)
        self.anchor = pretrain_ckpt.params["W"].copy()
        self._lock = threading.Lock()
        self._test_cache = {}
        self._zgrad_cache = {}
        self._pre_op = None
        self._fine_ops = None

    # -- operators ---------------------------------------------------------

    def _pretrain_op(self):
        with self._lock:
            if self._pre_op is None:
                self._pre_op = subsampled_hvp_oracle(
                    self.model.pretrain_objective(), self.pre.params, self.Z,
                    self.cfg.pretrain_solver, PRETRAIN_SEGS)
            return self._pre_op

    def finetune_objective(self):
        if self.mode == "fixed_W":
            return self.model.finetune_objective()
        return self.model.finetune_objective(self.anchor, self.cfg.proximal_alpha)

    def _finetune_ops(self):
        with self._lock:
            if self._fine_ops is None:
                loss = self.finetune_objective()
                if self.mode == "fixed_W":
                    hess = subsampled_hvp_oracle(loss, self.fine.params, self.X, self.cfg.finetune_solver, ("Theta",))
                    cross = ad.CurvatureOperator(loss, self.fine.params, self.X, ("W",), ("Theta",))
                else:
                    hess = subsampled_hvp_oracle(loss, self.fine.params, self.X, self.cfg.finetune_solver,
                                                 ("W", "Theta"))
                    cross = None
                self._fine_ops = (hess, cross)
            return self._fine_ops

    def pretrain_ihvp(self, vec):
        """``H_G^{-1} vec`` over (W, U) at the pretrain optimum."""
        if self.cfg.identity_hessian:
            return identity_solve(vec)
        return solve_ihvp(self._pretrain_op(), vec, self.cfg.pretrain_solver)

    def finetune_ihvp(self, vec):
        """Inverse of the finetune Hessian block (Theta, or (W, Theta) when updated)."""
        if self.cfg.identity_hessian:
            return identity_solve(vec)
        return solve_ihvp(self._finetune_ops()[0], vec, self.cfg.finetune_solver)

    # -- gradients -----------------------------------------------------------

    def z_gradient(self, pos):
        pos = int(pos)
        with self._lock:
            hit = self._zgrad_cache.get(pos)
        if hit is not None:
            return hit
        g = ad.grad(self.model.pretrain_example_loss(), self.pre.params, self.Z.subset([pos]), PRETRAIN_SEGS)
        with self._lock:
            self._zgrad_cache[pos] = g
        return g

    def z_gradients(self, positions):
        positions = [int(p) for p in positions]
        if not positions:
            return np.zeros((0, self.pre.params.length(PRETRAIN_SEGS)))
        if self.jobs > 1 and len(positions) > 1:
            with ThreadPoolExecutor(self.jobs) as pool:
                rows = list(pool.map(self.z_gradient, positions))
        else:
            rows = [self.z_gradient(p) for p in positions]
        return np.vstack(rows)

    def test_gradient(self, x_batch):
        """``df/d(W, Theta)`` of the summed test loss at the finetuned parameters."""
        return ad.grad(self.model.finetune_example_loss(), self.fine.params, x_batch, ("W", "Theta"))

    # -- per-test vectors ------------------------------------------------------

    def vector_from_test_gradient(self, grad_W, grad_Theta):
        """Map a test-loss gradient to the (W, U) vector that scores pretraining examples."""
        grad_W = np.asarray(grad_W, dtype=np.float64)
        grad_Theta = np.asarray(grad_Theta, dtype=np.float64)
        if self.mode == "fixed_W":
            v1, rep1 = self.finetune_ihvp(grad_Theta)
            cross = self._finetune_ops()[1] if not self.cfg.identity_hessian else \
                ad.CurvatureOperator(self.finetune_objective(), self.fine.params, self.X, ("W",), ("Theta",))
            r_W = cross(v1) - grad_W
        else:
            v1, rep1 = self.finetune_ihvp(np.concatenate([grad_W, grad_Theta]))
            r_W = -2.0 * self.cfg.proximal_alpha * v1[:grad_W.size]
        rhs = np.concatenate([r_W, np.zeros(self.pre.params.length("U"))])
        v2, rep2 = self.pretrain_ihvp(rhs)
        return v2, (rep1, rep2)

    def test_vector(self, x_batch, x_id=None):
        key = (x_id, x_batch.digest())
        with self._lock:
            hit = self._test_cache.get(key)
        if hit is not None:
            return hit
        split = self.fine.params.split(("W", "Theta"), self.test_gradient(x_batch))
        out = self.vector_from_test_gradient(split["W"], split["Theta"])
        with self._lock:
            self._test_cache[key] = out
        return out

    # -- scores ------------------------------------------------------------------

    def scores(self, z_positions, x_batch, x_id="ALL"):
        """One :class:`InfluenceRecord` per pretraining example against one test batch."""
        v2, reports = self.test_vector(x_batch, x_id)
        grads = self.z_gradients(z_positions)
        values = grads @ v2 if len(grads) else np.zeros(0)
        return [InfluenceRecord(int(self.Z.ids[int(p)]), x_id, float(s), self.mode, reports)
                for p, s in zip(z_positions, values)]

    def score_array(self, z_positions, x_batch, x_id="ALL"):
        return np.array([r.score for r in self.scores(z_positions, x_batch, x_id)])

    def influence_z_w(self, pos):
        """``I_{z,W}`` and the full (W, U) vector ``-H_G^{-1} dg(z)/d(W, U)``."""
        s, rep = self.pretrain_ihvp(self.z_gradient(pos))
        full = -s
        return full, full[:self.pre.params.length("W")], rep

    def updated_score_per_example(self, pos, x_batch):
        """Case-2 score assembled example-first (one pretrain and one block solve per z).

        Mathematically equal to :meth:`scores` in ``update_W`` mode; kept as a
        cross-check of the amortized ordering.
        """
        if self.mode != "update_W":
            raise InfluenceError("per-example block solve applies to update_W checkpoints")
        s, rep1 = self.pretrain_ihvp(self.z_gradient(pos))
        nW = self.pre.params.length("W")
        rhs = np.concatenate([-2.0 * self.cfg.proximal_alpha * s[:nW],
                              np.zeros(self.fine.params.length("Theta"))])
        delta, rep2 = self.finetune_ihvp(rhs)
        return float(self.test_gradient(x_batch) @ delta), (rep1, rep2)

    def group(self, z_positions, x_batches):
        """Sum of pairwise scores over pretraining examples x test items.

        ``x_batches`` is a sequence of ``(x_id, batch)`` pairs.
        """
        grads = self.z_gradients(z_positions)
        total = 0.0
        for x_id, batch in x_batches:
            v2, _ = self.test_vector(batch, x_id)
            total += float((grads @ v2).sum())
        return total


def _engine(model, ckpts, Z, X, cfg, jobs=1):
    pre, fine = ckpts
    return MultiStageInfluence(model, pre, fine, Z, X, cfg, jobs)


def influence_z_w(z, pretrain_ckpt, model, Z, cfg=None):
    """``(full (W,U) vector, W part, SolveReport)`` for pretraining example position ``z``."""
    cfg = cfg or InfluenceConfig()
    if cfg.identity_hessian:
        s, rep = identity_solve(ad.grad(model.pretrain_example_loss(), pretrain_ckpt.params,
                                        Z.subset([z]), PRETRAIN_SEGS))
    else:
        if not pretrain_ckpt.converged:
            warnings.warn("pretrain checkpoint not converged", stacklevel=2)
        op = subsampled_hvp_oracle(model.pretrain_objective(), pretrain_ckpt.params, Z,
                                   cfg.pretrain_solver, PRETRAIN_SEGS)
        g = ad.grad(model.pretrain_example_loss(), pretrain_ckpt.params, Z.subset([z]), PRETRAIN_SEGS)
        s, rep = solve_ihvp(op, g, cfg.pretrain_solver)
    full = -s
    return full, full[:pretrain_ckpt.params.length("W")], rep


def influence_fixed(x_t, z_positions, ckpts, model, Z, X, cfg=None, x_id="ALL", jobs=1):
    """Fixed-embedding scores of each pretraining example on test batch ``x_t``."""
    if ckpts[1].mode != "fixed_W":
        raise InfluenceError(f"finetune checkpoint was trained with mode {ckpts[1].mode!r}, not fixed_W")
    return _engine(model, ckpts, Z, X, cfg, jobs).scores(z_positions, x_t, x_id)


def influence_updated(x_t, z_positions, ckpts, model, Z, X, cfg=None, x_id="ALL", jobs=1):
    """Updated-embedding (proximal) scores of each pretraining example on ``x_t``."""
    if ckpts[1].mode != "update_W":
        raise InfluenceError(f"finetune checkpoint was trained with mode {ckpts[1].mode!r}, not update_W")
    cfg = cfg or InfluenceConfig()
    if ckpts[1].proximal_alpha == 0:
        warnings.warn("finetune checkpoint trained without the proximal term", stacklevel=2)
    return _engine(model, ckpts, Z, X, cfg, jobs).scores(z_positions, x_t, x_id)


def group_influence(engine, z_positions, x_batches):
    return engine.group(z_positions, x_batches)

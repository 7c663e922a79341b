"""Deterministic training of the pretrain stage and both finetuning regimes."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.sparse import linalg as sla

from . import autodiff as ad
from .autodiff import ParamVector
from .errors import DifferentiationError, TrainingDivergedError
from .models import WeightedBatch

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "newton")
FINETUNE_MODES = ("fixed_W", "update_W")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``newton`` is a full-batch trust-region Newton-CG driven by exact
    Hessian-vector products; it is what the validation scenarios use because
    first-order influence theory is only as good as the optimality of the
    checkpoints it is evaluated at. ``batch_size`` applies to sgd/adam only.
    """

    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 512
    max_steps: int = 1000
    grad_tol: float = 1e-4
    seed: int = 0
    proximal_alpha: float = 0.0
    check_every: int = 10

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.batch_size < 1 or self.max_steps < 0 or self.check_every < 1:
            raise ValueError("batch_size/check_every must be >= 1 and max_steps >= 0")
        if self.proximal_alpha < 0:
            raise ValueError("proximal_alpha must be non-negative")

    def digest(self, *extra):
        blob = json.dumps([asdict(self), *extra], sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: ParamVector
    objective_value: float
    grad_norm: float
    config_hash: str
    stage: str
    mode: str = ""
    proximal_alpha: float = 0.0
    converged: bool = False
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")


def _objective_setup(model, stage, data, weights, anchor, alpha, mode):
    if stage == "pretrain":
        loss = model.pretrain_objective()
        batch = data if weights is None else WeightedBatch(data, weights)
        wrt = ("W", "U")
    else:
        loss = model.finetune_objective(anchor if alpha else None, alpha)
        batch = data
        wrt = ("Theta",) if mode == "fixed_W" else ("W", "Theta")
    return loss, batch, wrt


def _subbatch(batch, idx):
    if isinstance(batch, WeightedBatch):
        return WeightedBatch(batch.data.subset(idx), np.asarray(batch.weights)[idx])
    return batch.subset(idx)


def _batch_len(batch):
    return len(batch.data) if isinstance(batch, WeightedBatch) else len(batch)


def _run(loss, batch, params, wrt, cfg, stage):
    """Minimize ``loss`` over ``wrt`` starting from ``params``; returns (params, value, gnorm, steps)."""

    def full(p):
        try:
            return ad.value_and_grad(loss, p, batch, wrt)
        except DifferentiationError as exc:
            raise TrainingDivergedError(stage, steps, float("nan")) from exc

    steps = 0
    value, g = full(params)
    if cfg.optimizer == "newton":
        return _newton(loss, batch, params, wrt, cfg, stage, value, g)

    n = _batch_len(batch)
    rng = np.random.default_rng(cfg.seed)
    x = params.gather(wrt)
    m1 = np.zeros_like(x)
    m2 = np.zeros_like(x)
    b1, b2, eps = 0.9, 0.999, 1e-8
    order = np.zeros(0, dtype=np.int64)
    while steps < cfg.max_steps and np.linalg.norm(g) > cfg.grad_tol:
        if n > cfg.batch_size:
            if order.size < cfg.batch_size:
                order = rng.permutation(n)
            idx, order = np.sort(order[:cfg.batch_size]), order[cfg.batch_size:]
            _, step_grad = ad.value_and_grad(loss, params, _subbatch(batch, idx), wrt)
        else:
            step_grad = g
        steps += 1
        if cfg.optimizer == "sgd":
            x = x - cfg.lr * step_grad
        else:
            m1 = b1 * m1 + (1 - b1) * step_grad
            m2 = b2 * m2 + (1 - b2) * step_grad ** 2
            x = x - cfg.lr * (m1 / (1 - b1 ** steps)) / (np.sqrt(m2 / (1 - b2 ** steps)) + eps)
        params = params.replace(wrt, x)
        if n <= cfg.batch_size or steps % cfg.check_every == 0 or steps == cfg.max_steps:
            value, g = full(params)
    return params, value, float(np.linalg.norm(g)), steps


def _newton(loss, batch, params, wrt, cfg, stage, value0, g0):
    base = params
    cache = {}

    def fun(x):
        key = x.tobytes()
        if key not in cache:
            cache.clear()
            try:
                cache[key] = ad.value_and_grad(loss, base.replace(wrt, x), batch, wrt)
            except DifferentiationError as exc:
                raise TrainingDivergedError(stage, -1, float("nan")) from exc
        return cache[key]

    ops = {}

    def hessp(x, v):
        key = x.tobytes()
        if key not in ops:
            ops.clear()
            ops[key] = ad.CurvatureOperator(loss, base.replace(wrt, x), batch, wrt)
        return ops[key](v)

    x0 = params.gather(wrt)
    if x0.size == 0 or np.linalg.norm(g0) <= cfg.grad_tol or cfg.max_steps == 0:
        return params, value0, float(np.linalg.norm(g0)), 0
    res = optimize.minimize(
        lambda x: fun(x)[0], x0, jac=lambda x: fun(x)[1], hessp=hessp, method="trust-ncg",
        options={"gtol": cfg.grad_tol, "maxiter": cfg.max_steps},
    )
    x, steps = res.x, int(res.nit)
    value, g = fun(x)
    # trust-ncg can stall a little above gtol once its model radius collapses;
    # finish with plain Newton steps, each kept only if the gradient shrinks
    while np.linalg.norm(g) > cfg.grad_tol and steps < cfg.max_steps:
        H = sla.LinearOperator((x.size, x.size), matvec=lambda v, x=x: hessp(x, v), dtype=np.float64)
        d, _ = sla.cg(H, -g, rtol=1e-12, atol=0.0, maxiter=10 * x.size)
        cand = x + d
        if not np.linalg.norm(fun(cand)[1]) < np.linalg.norm(g):
            break
        x, steps = cand, steps + 1
        value, g = fun(x)
    return base.replace(wrt, x), value, float(np.linalg.norm(g)), steps


def train_pretrain(model, Z, cfg, weights=None, init=None):
    """Minimize ``(1/m) sum_i w_i g(z_i) + ridge`` over (W, U).

    ``w_i = 0`` removes example i; ``w_i = 1 + m*eps`` is the eps-perturbed
    objective ``G + eps * g(z_i)``. ``init`` warm-starts from an existing
    parameter vector (otherwise the model's seeded initialization).
    """
    if not len(Z):
        raise ValueError("pretraining set is empty")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(Z),):
            raise ValueError(f"need {len(Z)} weights, got {weights.shape}")
    params = model.init_params(cfg.seed) if init is None else init.copy()
    loss, batch, wrt = _objective_setup(model, "pretrain", Z, weights, None, 0.0, None)
    out, value, gnorm, steps = _run(loss, batch, params, wrt, cfg, "pretrain")
    wdigest = "uniform" if weights is None else hashlib.sha256(weights.tobytes()).hexdigest()[:16]
    ckpt = Checkpoint(out, value, gnorm, cfg.digest("pretrain", model.arch, Z.digest(), wdigest),
                      "pretrain", converged=gnorm <= cfg.grad_tol, steps=steps)
    if not ckpt.converged:
        log.info("pretrain stopped after %d steps with grad norm %.3e > %.1e", steps, gnorm, cfg.grad_tol)
    return ckpt


def train_finetune(model, X, start, mode, cfg, init=None):
    """Finetune from a pretrain checkpoint.

    ``fixed_W`` optimizes Theta with W held at the pretrained value.
    ``update_W`` optimizes (W, Theta) from W = start's W; with
    ``cfg.proximal_alpha > 0`` the objective gains ``alpha |W - W_bar|^2``
    where ``W_bar`` is the pretrained embedding. ``init`` supplies warm-start
    values for the trained segments (Theta, and W in ``update_W``).
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"mode must be one of {FINETUNE_MODES}")
    anchor = start.params["W"].copy()
    alpha = cfg.proximal_alpha if mode == "update_W" else 0.0
    params = start.params.copy()
    if init is not None:
        trained = ("Theta",) if mode == "fixed_W" else ("W", "Theta")
        params = params.replace(trained, init.gather(trained))
    loss, batch, wrt = _objective_setup(model, "finetune", X, None, anchor, alpha, mode)
    out, value, gnorm, steps = _run(loss, batch, params, wrt, cfg, "finetune")
    digest = cfg.digest("finetune", mode, model.arch, X.digest(), start.config_hash,
                        hashlib.sha256(anchor.tobytes()).hexdigest()[:16])
    return Checkpoint(out, value, gnorm, digest, "finetune", mode=mode, proximal_alpha=alpha,
                      converged=gnorm <= cfg.grad_tol, steps=steps,
                      meta={"anchor_hash": start.config_hash})


def with_steps(cfg, steps):
    return replace(cfg, max_steps=int(steps))

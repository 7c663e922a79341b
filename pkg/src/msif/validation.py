"""Retraining oracles, correlation statistics and the desk-scale studies.

``loo_truth`` and ``epsilon_truth`` retrain both stages from the original
checkpoints (warm start) with one pretraining example reweighted, and report
the change of the summed finetune test loss. ``run_scenario`` chains data
generation, training, scoring and retraining for the named studies.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import SyntheticSpec, load_idx, make_synthetic
from .errors import ScenarioError
from .influence import MultiStageInfluence, aggregate, predicted_removal_change
from .models import TwoStageModel
from .trainer import train_finetune, train_pretrain, with_steps

log = logging.getLogger(__name__)

SCENARIOS = ("correlation", "ablation", "cleansing", "similarity", "datasize")


def pearson_r(xs, ys):
    """Sample Pearson correlation."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson_r needs two 1-D sequences of equal length")
    if x.size < 2:
        raise ValueError("pearson_r needs at least two pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson_r is undefined for zero-variance input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


# ---------------------------------------------------------------------------
# pipelines


@dataclass
class Pipeline:
    """Datasets, model and both trained checkpoints for one configuration."""

    config: object
    model: TwoStageModel
    Z: object
    X: object
    T: object
    pre: object = None
    fine: object = None

    @property
    def ckpts(self):
        return self.pre, self.fine

    @property
    def datasets(self):
        return self.Z, self.X, self.T

    @property
    def train_configs(self):
        return self.config.train_config("pretrain"), self.config.train_config("finetune")

    def train(self):
        pre_cfg, fine_cfg = self.train_configs
        self.pre = train_pretrain(self.model, self.Z, pre_cfg)
        self.fine = train_finetune(self.model, self.X, self.pre, self.config.finetune.mode, fine_cfg)
        return self

    def engine(self, identity=None):
        return MultiStageInfluence(self.model, self.pre, self.fine, self.Z, self.X,
                                   self.config.influence_config(identity), self.config.influence.jobs)

    def test_losses(self, fine=None):
        return self.model.per_example_loss((fine or self.fine).params, self.T, "finetune")


def build_datasets(config, finetune_classes=None, finetune_per_class=None):
    d = config.dataset
    pre_cls = config.pretrain_classes
    fine_cls = tuple(finetune_classes or config.finetune_classes)
    if d.source == "idx":
        Z = load_idx(d.idx_train_images, d.idx_train_labels, pre_cls, d.pretrain_limit or None, "pretrain")
        X = load_idx(d.idx_train_images, d.idx_train_labels, fine_cls, d.finetune_limit or None,
                     "finetune-train")
        T = load_idx(d.idx_test_images, d.idx_test_labels, fine_cls, d.test_limit or None, "finetune-test")
        return Z, X, T

    def spec(per_class, offset):
        return SyntheticSpec(d.num_classes, d.dim, per_class, d.class_means_seed, d.noise_sigma,
                             d.mean_scale, 3 * d.sample_seed + offset)

    Z = make_synthetic(spec(d.pretrain_per_class, 0), "pretrain", pre_cls)
    X = make_synthetic(spec(finetune_per_class or d.finetune_per_class, 1), "finetune-train", fine_cls)
    T = make_synthetic(spec(d.test_per_class, 2), "finetune-test", fine_cls)
    return Z, X, T


def build_pipeline(config, train=True, finetune_classes=None, finetune_per_class=None):
    Z, X, T = build_datasets(config, finetune_classes, finetune_per_class)
    model = TwoStageModel(config.architecture(Z.dim, finetune_classes))
    pipe = Pipeline(config, model, Z, X, T)
    return pipe.train() if train else pipe


# ---------------------------------------------------------------------------
# retraining oracles


def retrain(model, ckpts, datasets, cfgs, weights, mode=None, budget=None):
    """Warm-started retraining of both stages with pretraining weights ``weights``."""
    pre, fine = ckpts
    Z, X, _ = datasets
    pre_cfg, fine_cfg = cfgs
    if budget is not None:
        pre_cfg, fine_cfg = with_steps(pre_cfg, budget), with_steps(fine_cfg, budget)
    new_pre = train_pretrain(model, Z, pre_cfg, weights=weights, init=pre.params)
    new_fine = train_finetune(model, X, new_pre, mode or fine.mode, fine_cfg, init=fine.params)
    return new_pre, new_fine


def _test_loss(model, fine, T):
    return model.per_example_loss(fine.params, T, "finetune")


def loo_losses(z, ckpts, model, datasets, cfgs, budget=None):
    """Per-test-example loss differences after removing pretraining example position ``z``."""
    Z, _, T = datasets
    w = np.ones(len(Z))
    w[int(z)] = 0.0
    _, new_fine = retrain(model, ckpts, datasets, cfgs, w, budget=budget)
    return _test_loss(model, new_fine, T) - _test_loss(model, ckpts[1], T)


def loo_truth(z, ckpts, model, datasets, cfgs, budget=None):
    """Summed finetune test-loss change after removing ``z`` and retraining both stages."""
    return float(loo_losses(z, ckpts, model, datasets, cfgs, budget).sum())


def epsilon_truth(z, eps, ckpts, model, datasets, cfgs, budget=None, signs=(1.0, -1.0)):
    """Central difference ``[L(+eps) - L(-eps)] / (2 eps)`` of the summed test loss.

    The pretraining weight of ``z`` becomes ``1 + m*eps`` for each sign.
    """
    Z, _, T = datasets
    m = len(Z)
    losses = []
    for sign in signs:
        w = np.ones(m)
        w[int(z)] = 1.0 + m * sign * eps
        _, new_fine = retrain(model, ckpts, datasets, cfgs, w, budget=budget)
        losses.append(float(_test_loss(model, new_fine, T).sum()))
    return (losses[0] - losses[1]) / (2.0 * eps * signs[0])


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


class _LooTask:
    def __init__(self, pipe, budget):
        self.args = (pipe.ckpts, pipe.model, pipe.datasets, pipe.train_configs, budget)

    def __call__(self, z):
        ckpts, model, datasets, cfgs, budget = self.args
        return loo_losses(z, ckpts, model, datasets, cfgs, budget)


# ---------------------------------------------------------------------------
# reports


@dataclass
class CorrelationReport:
    """Predicted vs retrained loss change on removal of each pretraining example.

    ``pairs`` holds ``(predicted, actual)`` where ``predicted = -score / m`` is
    the first-order removal estimate and ``actual`` the summed test-loss change
    after leave-one-out retraining. ``pair_r`` is the same statistic over every
    (pretraining example, test example) pair.
    """

    pairs: list
    pearson_r: float
    scenario: dict
    z_ids: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    pair_r: float | None = None

    def rows(self):
        return [{"z_id": z, "score": s, "predicted": p, "actual": a}
                for z, s, (p, a) in zip(self.z_ids, self.scores, self.pairs)]

    @property
    def summary(self):
        out = {"pearson_r": self.pearson_r, "n": len(self.pairs)}
        if self.pair_r is not None:
            out["pair_r"] = self.pair_r
        return out


@dataclass
class StudyReport:
    name: str
    rows_: list
    summary: dict
    scenario: dict

    def rows(self):
        return self.rows_


def _descriptor(config, name, **extra):
    return {"scenario": name, "mode": config.finetune.mode, "config_hash": config.digest(), **extra}


def _z_positions(config, m):
    count = config.scenario.count
    return list(range(m if count <= 0 else min(count, m)))


def correlation_study(config, pipe=None, identities=(False,)):
    """Full-method (and optionally identity-Hessian) correlation reports sharing one LOO sweep."""
    pipe = pipe or build_pipeline(config)
    m = len(pipe.Z)
    zs = _z_positions(config, m)
    truth = np.array(_map(_LooTask(pipe, config.influence.retrain_steps), zs, config.influence.jobs))
    summed = truth.sum(axis=1)
    reports = []
    for identity in identities:
        engine = pipe.engine(identity)
        scores = engine.score_array(zs, pipe.T, "ALL")
        predicted = predicted_removal_change(scores, m)
        pair_r = None
        if config.scenario.per_pair:
            per_x = np.column_stack([engine.score_array(zs, pipe.T.subset([j]), int(pipe.T.ids[j]))
                                     for j in range(len(pipe.T))])
            pair_r = pearson_r(predicted_removal_change(per_x, m).ravel(), truth.ravel())
        reports.append(CorrelationReport(
            pairs=[(float(p), float(a)) for p, a in zip(predicted, summed)],
            pearson_r=pearson_r(predicted, summed),
            scenario=_descriptor(config, "correlation", identity_hessian=bool(identity),
                                 dataset=pipe.Z.digest()),
            z_ids=[int(pipe.Z.ids[z]) for z in zs],
            scores=[float(s) for s in scores],
            pair_r=pair_r,
        ))
    return reports


def cleansing_study(config):
    """Remove the top positive-score fraction vs a random fraction, per seed."""
    rows = []
    frac = config.scenario.top_fraction
    for seed in config.seeds:
        cfg = seeded(config, seed)
        pipe = build_pipeline(cfg)
        m = len(pipe.Z)
        base_loss = float(pipe.test_losses().sum())
        base_acc = pipe.model.accuracy(pipe.fine.params, pipe.T, "finetune")
        k = int(round(frac * m))
        scores = pipe.engine().score_array(range(m), pipe.T, "ALL")
        order = np.argsort(-scores, kind="stable")
        top = [int(i) for i in order[:k] if scores[i] > 0]
        rand = sorted(np.random.default_rng(seed).choice(m, size=len(top), replace=False).tolist())
        row = {"seed": seed, "removed": len(top), "baseline_loss": base_loss, "baseline_acc": base_acc}
        for label, drop in (("influence", top), ("random", rand)):
            if drop:
                loss, acc = _retrain_without(pipe, drop)
            else:
                loss, acc = base_loss, base_acc
            row[f"{label}_loss"], row[f"{label}_acc"] = loss, acc
        rows.append(row)
    summary = {
        "mean_influence_loss": float(np.mean([r["influence_loss"] for r in rows])),
        "mean_random_loss": float(np.mean([r["random_loss"] for r in rows])),
        "mean_baseline_loss": float(np.mean([r["baseline_loss"] for r in rows])),
        "influence_wins": int(sum(r["influence_loss"] <= r["random_loss"] for r in rows)),
    }
    return StudyReport("cleansing", rows, summary, _descriptor(config, "cleansing", top_fraction=frac))


def _retrain_without(pipe, drop):
    pre_cfg, fine_cfg = pipe.train_configs
    Z = pipe.Z.without(drop)
    new_pre = train_pretrain(pipe.model, Z, pre_cfg, init=pipe.pre.params)
    new_fine = train_finetune(pipe.model, pipe.X, new_pre, pipe.fine.mode, fine_cfg, init=pipe.fine.params)
    loss = float(pipe.test_losses(new_fine).sum())
    return loss, pipe.model.accuracy(new_fine.params, pipe.T, "finetune")


def seeded(config, seed):
    return config.override(dataset={"sample_seed": str(seed)}, pretrain={"seed": str(seed)},
                           finetune={"seed": str(seed)})


def _mean_abs_scores(pipe):
    scores = pipe.engine().score_array(range(len(pipe.Z)), pipe.T, "ALL")
    return aggregate(scores, "mean_abs"), scores


def similarity_study(config):
    """Mean |score| when the finetune task equals the pretrain task vs a different task."""
    same = config.pretrain_classes
    diff = config.finetune_classes
    if len(same) != len(diff):
        raise ScenarioError("similarity needs equally many pretrain and finetune classes")
    rows = []
    for seed in config.seeds:
        cfg = seeded(config, seed)
        a = build_pipeline(cfg, finetune_classes=same)
        b = Pipeline(cfg, a.model, a.Z, *build_datasets(cfg, diff)[1:], pre=a.pre)
        b.fine = train_finetune(b.model, b.X, b.pre, cfg.finetune.mode, cfg.train_config("finetune"))
        ma, _ = _mean_abs_scores(a)
        mb, _ = _mean_abs_scores(b)
        rows.append({"seed": seed, "same_task": ma, "different_task": mb, "ratio": ma / mb})
    summary = {
        "mean_same_task": float(np.mean([r["same_task"] for r in rows])),
        "mean_different_task": float(np.mean([r["different_task"] for r in rows])),
        "same_wins": int(sum(r["same_task"] > r["different_task"] for r in rows)),
    }
    summary["ratio"] = summary["mean_same_task"] / summary["mean_different_task"]
    return StudyReport("similarity", rows, summary, _descriptor(config, "similarity"))


def datasize_study(config):
    """Mean |score| with the base finetune set vs ``datasize_factor`` x examples and steps."""
    factor = config.scenario.datasize_factor
    rows = []
    for seed in config.seeds:
        cfg = seeded(config, seed)
        small = build_pipeline(cfg)
        big_cfg = cfg.override(finetune={"max_steps": str(cfg.finetune.max_steps * factor)})
        Z, X, T = build_datasets(big_cfg, finetune_per_class=cfg.dataset.finetune_per_class * factor)
        big = Pipeline(big_cfg, small.model, small.Z, X, small.T, pre=small.pre)
        big.fine = train_finetune(big.model, X, big.pre, big_cfg.finetune.mode, big_cfg.train_config("finetune"))
        ms, _ = _mean_abs_scores(small)
        mb, _ = _mean_abs_scores(big)
        rows.append({"seed": seed, "base": ms, "scaled": mb, "ratio": mb / ms})
    summary = {
        "mean_base": float(np.mean([r["base"] for r in rows])),
        "mean_scaled": float(np.mean([r["scaled"] for r in rows])),
        "scaled_wins": int(sum(r["scaled"] < r["base"] for r in rows)),
        "factor": factor,
    }
    return StudyReport("datasize", rows, summary, _descriptor(config, "datasize", factor=factor))


def run_scenario(name, config):
    """Run a named study; returns a CorrelationReport (correlation) or StudyReport."""
    if name == "correlation":
        return correlation_study(config)[0]
    if name == "ablation":
        full, ident = correlation_study(config, identities=(False, True))
        rows = [dict(r, identity_predicted=q) for r, (q, _) in zip(full.rows(), ident.pairs)]
        summary = {"pearson_r": full.pearson_r, "identity_pearson_r": ident.pearson_r}
        return StudyReport("ablation", rows, summary, _descriptor(config, "ablation"))
    if name == "cleansing":
        return cleansing_study(config)
    if name == "similarity":
        return similarity_study(config)
    if name == "datasize":
        return datasize_study(config)
    raise ScenarioError(f"unknown scenario {name!r}; choose from {SCENARIOS}")

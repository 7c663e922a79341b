"""Two-stage classifiers sharing an embedding.

Parameter segments:

* ``W``     embedding layers (shared between the two tasks)
* ``U``     pretrain head
* ``Theta`` finetune head

Pretraining minimizes ``G(W, U) = (1/m) sum_i w_i g(z_i; W, U) + l2/2 |(W, U)|^2``
and finetuning minimizes ``F(W, Theta) = (1/n) sum_j f(x_j; W, Theta) + l2/2 |Theta|^2``
(plus ``alpha |W - W_bar|^2`` when the embedding is updated with a proximal
tether). ``g`` and ``f`` are plain per-example cross-entropies; the ridge term
is part of the objective, not of the per-example loss, so reweighting or
removing an example never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import LossFunction, ParamVector

ACTIVATIONS = ("tanh", "linear")


class WeightedBatch(NamedTuple):
    data: object
    weights: np.ndarray


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    embed_dims: tuple = (16,)
    num_pretrain_classes: int = 4
    num_finetune_classes: int = 6
    activation: str = "tanh"
    pretrain_head: str = "linear"
    l2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "embed_dims", tuple(int(d) for d in self.embed_dims))
        if self.input_dim <= 0 or any(d <= 0 for d in self.embed_dims):
            raise ValueError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.pretrain_head not in ("linear", "identity"):
            raise ValueError("pretrain_head must be 'linear' or 'identity'")
        if self.pretrain_head == "identity" and self.feature_dim != self.num_pretrain_classes:
            raise ValueError("identity pretrain head needs feature width == num_pretrain_classes")
        if self.num_pretrain_classes < 2 or self.num_finetune_classes < 2:
            raise ValueError("each task needs at least two classes")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")

    @property
    def feature_dim(self):
        return self.embed_dims[-1] if self.embed_dims else self.input_dim


def _cross_entropy(logits, targets):
    onehot = np.zeros(logits.shape)
    onehot[np.arange(targets.size), targets] = 1.0
    return ad.logsumexp(logits, axis=1) - (logits * onehot).sum(axis=1)


def _sq(t):
    return ad.dot(t, t)


@dataclass(frozen=True)
class TwoStageModel:
    arch: Architecture
    layers: tuple = field(init=False)

    def __post_init__(self):
        a = self.arch
        dims = (a.input_dim,) + a.embed_dims
        embed = tuple((dims[i], dims[i + 1]) for i in range(len(a.embed_dims)))
        object.__setattr__(self, "layers", embed)

    @property
    def segment_sizes(self):
        a = self.arch
        w = sum(i * o + o for i, o in self.layers)
        u = 0 if a.pretrain_head == "identity" else a.feature_dim * a.num_pretrain_classes + a.num_pretrain_classes
        t = a.feature_dim * a.num_finetune_classes + a.num_finetune_classes
        return (("W", w), ("U", u), ("Theta", t))

    def init_params(self, seed=0):
        rng = np.random.default_rng(seed)
        a = self.arch
        blocks = []
        for fan_in, fan_out in self.layers:
            blocks += [rng.normal(size=fan_in * fan_out) / np.sqrt(fan_in), np.zeros(fan_out)]
        if a.pretrain_head == "linear":
            blocks += [rng.normal(size=a.feature_dim * a.num_pretrain_classes) / np.sqrt(a.feature_dim),
                       np.zeros(a.num_pretrain_classes)]
        blocks += [rng.normal(size=a.feature_dim * a.num_finetune_classes) / np.sqrt(a.feature_dim),
                   np.zeros(a.num_finetune_classes)]
        return ParamVector.from_sizes(self.segment_sizes, np.concatenate(blocks))

    # -- forward ----------------------------------------------------------

    def embed(self, W, X):
        h = ad.as_tensor(np.asarray(X, dtype=np.float64))
        pos = 0
        for fan_in, fan_out in self.layers:
            A = W[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = W[pos:pos + fan_out].reshape(1, fan_out)
            pos += fan_out
            h = h @ A + b
            if self.arch.activation == "tanh":
                h = ad.tanh(h)
        return h

    def _head(self, P, h, n_out):
        d = self.arch.feature_dim
        return h @ P[:d * n_out].reshape(d, n_out) + P[d * n_out:].reshape(1, n_out)

    def pretrain_logits(self, segs, X):
        h = self.embed(segs["W"], X)
        if self.arch.pretrain_head == "identity":
            return h
        return self._head(segs["U"], h, self.arch.num_pretrain_classes)

    def finetune_logits(self, segs, X):
        return self._head(segs["Theta"], self.embed(segs["W"], X), self.arch.num_finetune_classes)

    # -- losses -------------------------------------------------------------

    def pretrain_objective(self, weights=None):
        """``G``; ``weights`` (aligned with the rows of the batch) rescales each example."""
        l2 = self.arch.l2

        def fn(segs, batch):
            data, w = (batch.data, batch.weights) if isinstance(batch, WeightedBatch) else (batch, weights)
            total = ad.Tensor(0.0)
            if len(data):
                ce = _cross_entropy(self.pretrain_logits(segs, data.features), data.targets)
                total = (ce.sum() if w is None else (ce * np.asarray(w, dtype=np.float64)).sum()) / len(data)
            if l2:
                total = total + 0.5 * l2 * (_sq(segs["W"]) + _sq(segs["U"]))
            return total

        return LossFunction(fn, ("W", "U"), "G")

    def finetune_objective(self, anchor=None, alpha=0.0):
        """``F``, optionally with the proximal tether ``alpha |W - anchor|^2``."""
        l2 = self.arch.l2
        if alpha and anchor is None:
            raise ValueError("proximal term needs an anchor embedding")
        anchor = None if anchor is None else np.array(anchor, dtype=np.float64)

        def fn(segs, batch):
            total = ad.Tensor(0.0)
            if len(batch):
                total = _cross_entropy(self.finetune_logits(segs, batch.features), batch.targets).sum() / len(batch)
            if l2:
                total = total + 0.5 * l2 * _sq(segs["Theta"])
            if alpha:
                total = total + alpha * _sq(segs["W"] - anchor)
            return total

        return LossFunction(fn, ("W", "Theta"), "F")

    def pretrain_example_loss(self):
        """``g`` summed over the batch (no ridge term)."""

        def fn(segs, batch):
            return _cross_entropy(self.pretrain_logits(segs, batch.features), batch.targets).sum()

        return LossFunction(fn, ("W", "U"), "g")

    def finetune_example_loss(self):
        """``f`` summed over the batch (no ridge term): the test loss."""

        def fn(segs, batch):
            return _cross_entropy(self.finetune_logits(segs, batch.features), batch.targets).sum()

        return LossFunction(fn, ("W", "Theta"), "f")

    # -- evaluation ---------------------------------------------------------

    def _logits(self, params, X, stage):
        segs = {n: ad.Tensor(params[n]) for n in params.names}
        with ad.no_grad():
            out = self.pretrain_logits(segs, X) if stage == "pretrain" else self.finetune_logits(segs, X)
        return out.data

    def accuracy(self, params, data, stage):
        if not len(data):
            return float("nan")
        pred = self._logits(params, data.features, stage).argmax(axis=1)
        return float(np.mean(pred == data.targets))

    def per_example_loss(self, params, data, stage):
        logits = self._logits(params, data.features, stage)
        shift = logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(logits - shift).sum(axis=1)) + shift[:, 0]
        return lse - logits[np.arange(len(data)), data.targets]


def build_model(arch, seed=0):
    """Model plus a deterministic initial :class:`ParamVector`."""
    model = TwoStageModel(arch)
    return model, model.init_params(seed)

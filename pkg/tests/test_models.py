import numpy as np
import pytest

from msif import autodiff as ad
from msif.data import SyntheticSpec, make_synthetic
from msif.models import Architecture, TwoStageModel, WeightedBatch, build_model
from msif.solvers import dense_hessian
from msif.trainer import TrainConfig, train_pretrain

from conftest import tiny_model, tiny_sets


def model_losses(model, params):
    anchor = params["W"] + 0.1
    return {
        "G": (model.pretrain_objective(), ("W", "U")),
        "F": (model.finetune_objective(), ("W", "Theta")),
        "F_prox": (model.finetune_objective(anchor, 0.05), ("W", "Theta")),
        "g": (model.pretrain_example_loss(), ("W", "U")),
        "f": (model.finetune_example_loss(), ("W", "Theta")),
    }


def batch_for(name, Z, X):
    return Z if name in ("G", "g") else X


def fd_grad(loss, params, batch, wrt, h=1e-5):
    x0 = params.gather(wrt)
    out = np.zeros_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = h
        out[i] = (loss(params.replace(wrt, x0 + e), batch) - loss(params.replace(wrt, x0 - e), batch)) / (2 * h)
    return out


@pytest.mark.parametrize("activation,head", [("tanh", "linear"), ("linear", "linear"), ("tanh", "identity")])
def test_every_loss_gradient_matches_finite_differences(activation, head):
    Z, X, _ = tiny_sets()
    model = tiny_model(activation, head, embed=(3,) if head == "identity" else (4,))
    params = model.init_params(3)
    for name, (loss, wrt) in model_losses(model, params).items():
        batch = batch_for(name, Z, X)
        got = ad.grad(loss, params, batch, wrt)
        want = fd_grad(loss, params, batch, wrt)
        err = np.linalg.norm(got - want) / np.linalg.norm(want)
        assert err <= 1e-6, (name, err)


def test_segment_layout_and_seeded_init():
    model, p1 = build_model(Architecture(5, (4, 3), 3, 2, "tanh", "linear"), seed=11)
    _, p2 = build_model(model.arch, seed=11)
    _, p3 = build_model(model.arch, seed=12)
    assert p1.names == ("W", "U", "Theta")
    assert p1.length("W") == 5 * 4 + 4 + 4 * 3 + 3
    assert p1.length("U") == 3 * 3 + 3 and p1.length("Theta") == 3 * 2 + 2
    assert p1 == p2 and p1 != p3


def test_heads_read_only_their_segments(rng):
    Z, X, _ = tiny_sets()
    model = tiny_model()
    params = model.init_params(0)
    g = ad.grad(model.pretrain_example_loss(), params, Z, ("Theta",))
    f = ad.grad(model.finetune_example_loss(), params, X, ("U",))
    assert not g.any() and not f.any()
    bumped = params.replace(("Theta",), rng.normal(size=params.length("Theta")))
    assert model.pretrain_example_loss()(bumped, Z) == model.pretrain_example_loss()(params, Z)


def test_objectives_are_averages_plus_ridge():
    Z, X, _ = tiny_sets()
    model = tiny_model(l2=0.3)
    params = model.init_params(4)
    per = model.per_example_loss(params, Z, "pretrain")
    ridge = 0.15 * (params["W"] @ params["W"] + params["U"] @ params["U"])
    assert model.pretrain_objective()(params, Z) == pytest.approx(per.mean() + ridge, rel=1e-13)
    assert model.pretrain_example_loss()(params, Z) == pytest.approx(per.sum(), rel=1e-13)
    per_f = model.per_example_loss(params, X, "finetune")
    ridge_f = 0.15 * params["Theta"] @ params["Theta"]
    assert model.finetune_objective()(params, X) == pytest.approx(per_f.mean() + ridge_f, rel=1e-13)


def test_weighted_objective():
    Z, _, _ = tiny_sets()
    model = tiny_model(l2=0.0)
    params = model.init_params(1)
    w = np.linspace(0.0, 2.0, len(Z))
    per = model.per_example_loss(params, Z, "pretrain")
    G = model.pretrain_objective()
    assert G(params, WeightedBatch(Z, w)) == pytest.approx((w * per).sum() / len(Z), rel=1e-13)
    assert G(params, WeightedBatch(Z, np.zeros(len(Z)))) == 0.0


def test_identity_input_transform_is_bit_identical():
    Z, X, _ = tiny_sets()
    model = tiny_model()
    params = model.init_params(2)
    Z1 = type(Z)(Z.features * 1.0, Z.labels, Z.role, Z.class_set, Z.ids)
    assert model.pretrain_objective()(params, Z1) == model.pretrain_objective()(params, Z)


def test_no_embedding_layers_means_empty_w():
    model = TwoStageModel(Architecture(3, (), 3, 2, "linear", "linear"))
    Z, X, _ = tiny_sets()
    params = model.init_params(0)
    assert params.length("W") == 0
    v = np.ones(params.length("Theta"))
    assert ad.cross_hvp(model.finetune_objective(), params, X, "W", "Theta", v).size == 0


def test_convex_configuration_has_psd_pretrain_hessian(rng):
    Z, _, _ = tiny_sets()
    model = TwoStageModel(Architecture(3, (3,), 3, 2, "linear", "identity", 0.0))
    for seed in range(3):
        params = model.init_params(seed)
        params = params.replace(("W",), rng.normal(size=params.length("W")) * 2)
        H = dense_hessian(model.pretrain_objective(), params, Z, ("W", "U"))
        assert np.linalg.eigvalsh(H).min() >= -1e-8


def test_tanh_model_fits_four_gaussian_classes():
    # recorded: 2-layer tanh (16, 16) reaches 100% train accuracy with trainer defaults
    Z = make_synthetic(SyntheticSpec(4, 10, 50, class_means_seed=1, noise_sigma=1.0))
    model = TwoStageModel(Architecture(10, (16, 16), 4, 2, "tanh", "linear", 0.0))
    ckpt = train_pretrain(model, Z, TrainConfig())
    acc = model.accuracy(ckpt.params, Z, "pretrain")
    assert acc >= 0.9
    assert acc == 1.0


@pytest.mark.parametrize("bad", [dict(embed_dims=(0,)), dict(activation="relu"),
                                 dict(pretrain_head="identity"), dict(num_finetune_classes=1)])
def test_architecture_validation(bad):
    kw = dict(input_dim=3, embed_dims=(4,), num_pretrain_classes=3, num_finetune_classes=2)
    kw.update(bad)
    with pytest.raises(ValueError):
        Architecture(**kw)

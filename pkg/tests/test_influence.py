import numpy as np
import pytest

from msif import autodiff as ad
from msif.errors import InfluenceError
from msif.influence import (InfluenceConfig, MultiStageInfluence, aggregate, group_influence, influence_fixed,
                            influence_updated, influence_z_w, predicted_removal_change)
from msif.solvers import dense_hessian
from msif.trainer import train_finetune
from msif.validation import epsilon_truth

WU, WT = ("W", "U"), ("W", "Theta")


def dense_parts(pipe, z, x_batch, alpha=0.0):
    """Independent dense-linear-algebra evaluation of the influence formulas."""
    model, pre, fine = pipe.model, pipe.pre, pipe.fine
    nW = pre.params.length("W")
    H_G = dense_hessian(model.pretrain_objective(), pre.params, pipe.Z, WU)
    gz = ad.grad(model.pretrain_example_loss(), pre.params, pipe.Z.subset([z]), WU)
    I_zW = -np.linalg.solve(H_G, gz)[:nW]
    F = model.finetune_objective(pre.params["W"], alpha) if alpha else model.finetune_objective()
    K = dense_hessian(F, fine.params, pipe.X, WT)
    gf = ad.grad(model.finetune_example_loss(), fine.params, x_batch, WT)
    return I_zW, K, gf, nW


def dense_fixed_score(pipe, z, x_batch):
    I_zW, K, gf, nW = dense_parts(pipe, z, x_batch)
    H_TT, H_TW = K[nW:, nW:], K[nW:, :nW]
    return (gf[:nW] - gf[nW:] @ np.linalg.solve(H_TT, H_TW)) @ I_zW


def dense_updated_score(pipe, z, x_batch, alpha):
    I_zW, K, gf, nW = dense_parts(pipe, z, x_batch, alpha)
    rhs = np.concatenate([2 * alpha * I_zW, np.zeros(K.shape[0] - nW)])
    return gf @ np.linalg.solve(K, rhs)


def test_influence_z_w_matches_dense_solve(convex_small):
    pipe = convex_small
    cfg = pipe.config.influence_config()
    for z in (0, 5, 17):
        full, w_part, rep = influence_z_w(z, pipe.pre, pipe.model, pipe.Z, cfg)
        H = dense_hessian(pipe.model.pretrain_objective(), pipe.pre.params, pipe.Z, WU)
        g = ad.grad(pipe.model.pretrain_example_loss(), pipe.pre.params, pipe.Z.subset([z]), WU)
        want = -np.linalg.solve(H, g)
        assert np.linalg.norm(full - want) / np.linalg.norm(want) <= 1e-5
        np.testing.assert_array_equal(w_part, full[:pipe.pre.params.length("W")])
        assert rep.converged


@pytest.mark.parametrize("x", [0, 3, "ALL"])
def test_fixed_scores_match_dense_closed_form(convex_small, x):
    pipe = convex_small
    batch = pipe.T if x == "ALL" else pipe.T.subset([x])
    recs = influence_fixed(batch, range(6), pipe.ckpts, pipe.model, pipe.Z, pipe.X,
                           pipe.config.influence_config(), x_id=x)
    for z, rec in enumerate(recs):
        want = dense_fixed_score(pipe, z, batch)
        assert rec.score == pytest.approx(want, rel=1e-6, abs=1e-9)
        assert rec.mode == "fixed_W" and rec.x_id == x and rec.converged


def test_updated_scores_match_dense_block_system(convex_update_small):
    pipe = convex_update_small
    alpha = pipe.config.finetune.proximal_alpha
    recs = influence_updated(pipe.T, range(6), pipe.ckpts, pipe.model, pipe.Z, pipe.X,
                             pipe.config.influence_config())
    for z, rec in enumerate(recs):
        assert rec.score == pytest.approx(dense_updated_score(pipe, z, pipe.T, alpha), rel=1e-6, abs=1e-9)


def test_updated_example_first_ordering_agrees(convex_update_small):
    pipe = convex_update_small
    engine = pipe.engine()
    amortized = engine.score_array(range(4), pipe.T)
    for z in range(4):
        score, _ = engine.updated_score_per_example(z, pipe.T)
        assert score == pytest.approx(amortized[z], rel=1e-7)


def test_amortized_equals_independent_per_z(convex_small):
    pipe = convex_small
    batch = pipe.engine().score_array(range(len(pipe.Z)), pipe.T)
    for z in (0, 7, len(pipe.Z) - 1):
        alone = pipe.engine().score_array([z], pipe.T)[0]
        assert abs(alone - batch[z]) <= 1e-12 * max(1.0, abs(batch[z]))


def test_threaded_scoring_is_identical(convex_small):
    pipe = convex_small
    serial = MultiStageInfluence(pipe.model, pipe.pre, pipe.fine, pipe.Z, pipe.X,
                                 pipe.config.influence_config(), jobs=1).score_array(range(len(pipe.Z)), pipe.T)
    threaded = MultiStageInfluence(pipe.model, pipe.pre, pipe.fine, pipe.Z, pipe.X,
                                   pipe.config.influence_config(), jobs=4).score_array(range(len(pipe.Z)), pipe.T)
    np.testing.assert_array_equal(serial, threaded)


def test_opposite_test_gradients_negate_scores(convex_small, rng):
    engine = convex_small.engine()
    gW = rng.normal(size=convex_small.pre.params.length("W"))
    gT = rng.normal(size=convex_small.pre.params.length("Theta"))
    v_pos, _ = engine.vector_from_test_gradient(gW, gT)
    v_neg, _ = engine.vector_from_test_gradient(-gW, -gT)
    np.testing.assert_array_equal(v_pos, -v_neg)


def test_duplicated_example_has_identical_influence(convex_small):
    pipe = convex_small
    Zd = type(pipe.Z)(np.vstack([pipe.Z.features, pipe.Z.features[:1]]), np.append(pipe.Z.labels, pipe.Z.labels[0]),
                      "pretrain", pipe.Z.class_set)
    engine = MultiStageInfluence(pipe.model, pipe.pre, pipe.fine, Zd, pipe.X, pipe.config.influence_config())
    a, b = engine.z_gradient(0), engine.z_gradient(len(Zd) - 1)
    np.testing.assert_array_equal(a, b)
    s = engine.score_array([0, len(Zd) - 1], pipe.T)
    assert s[0] == s[1]
    assert engine.group([0, len(Zd) - 1], [("ALL", pipe.T)]) == pytest.approx(2 * s[0], rel=1e-14)


def test_group_singleton_and_additivity(convex_small):
    pipe = convex_small
    engine = pipe.engine()
    xs = [(j, pipe.T.subset([j])) for j in range(4)]
    single = engine.scores([2], xs[1][1], 1)[0].score
    assert group_influence(engine, [2], [xs[1]]) == single
    left = group_influence(engine, [0, 1, 2], xs)
    right = group_influence(engine, [3, 4], xs)
    both = group_influence(engine, [0, 1, 2, 3, 4], xs)
    assert both == pytest.approx(left + right, rel=1e-13)


def test_case1_score_matches_epsilon_oracle(convex_small):
    pipe = convex_small
    engine = pipe.engine()
    x = pipe.T.subset([2])
    pre_cfg, fine_cfg = pipe.train_configs
    for z in (0, 9):
        score = engine.score_array([z], x, 2)[0]
        T_only = (pipe.Z, pipe.X, x)
        truth = epsilon_truth(z, 1e-3, pipe.ckpts, pipe.model, T_only, (pre_cfg, fine_cfg))
        assert score == pytest.approx(truth, rel=0.05)


def test_case2_score_matches_epsilon_oracle(convex_update_small):
    pipe = convex_update_small
    engine = pipe.engine()
    for z in (0, 9):
        score = engine.score_array([z], pipe.T)[0]
        truth = epsilon_truth(z, 1e-3, pipe.ckpts, pipe.model, pipe.datasets, pipe.train_configs)
        assert score == pytest.approx(truth, rel=0.10)


def test_case2_magnitude_vanishes_with_alpha(convex_update_small):
    pipe = convex_update_small
    mags = []
    for alpha in (1e-2, 1e-3, 1e-4):
        cfg = pipe.config.override(finetune={"proximal_alpha": str(alpha)})
        fine = train_finetune(pipe.model, pipe.X, pipe.pre, "update_W", cfg.train_config("finetune"))
        engine = MultiStageInfluence(pipe.model, pipe.pre, fine, pipe.Z, pipe.X, cfg.influence_config())
        mags.append(np.abs(engine.score_array(range(len(pipe.Z)), pipe.T)).mean())
    assert mags[0] > mags[1] > mags[2] > 0


def test_mode_mismatch_rejected(convex_small, convex_update_small):
    with pytest.raises(InfluenceError):
        influence_fixed(convex_update_small.T, [0], convex_update_small.ckpts, convex_update_small.model,
                        convex_update_small.Z, convex_update_small.X)
    with pytest.raises(InfluenceError):
        influence_updated(convex_small.T, [0], convex_small.ckpts, convex_small.model, convex_small.Z, convex_small.X)


def test_zero_alpha_rejected(convex_update_small):
    pipe = convex_update_small
    with pytest.raises(InfluenceError):
        MultiStageInfluence(pipe.model, pipe.pre, pipe.fine, pipe.Z, pipe.X, InfluenceConfig(proximal_alpha=0.0))


def test_alpha_mismatch_warns(convex_update_small):
    pipe = convex_update_small
    with pytest.warns(UserWarning, match="alpha"):
        MultiStageInfluence(pipe.model, pipe.pre, pipe.fine, pipe.Z, pipe.X, InfluenceConfig(proximal_alpha=0.5))


def test_identity_hessian_ablation_formula(convex_small):
    pipe = convex_small
    engine = pipe.engine(identity=True)
    model, fine = pipe.model, pipe.fine
    nW = fine.params.length("W")
    gf = ad.grad(model.finetune_example_loss(), fine.params, pipe.T, WT)
    cross = ad.cross_hvp(model.finetune_objective(), fine.params, pipe.X, "W", "Theta", gf[nW:])
    v2 = np.concatenate([cross - gf[:nW], np.zeros(fine.params.length("U"))])
    gz = ad.grad(model.pretrain_example_loss(), pipe.pre.params, pipe.Z.subset([3]), WU)
    assert engine.score_array([3], pipe.T)[0] == pytest.approx(gz @ v2, rel=1e-12)
    recs = engine.scores([3], pipe.T)
    assert all(r.iterations == 0 for r in recs[0].reports)


def test_test_vector_cache_keyed_by_batch(convex_small):
    engine = convex_small.engine()
    a = engine.test_vector(convex_small.T.subset([0]), 0)
    b = engine.test_vector(convex_small.T.subset([0]), 0)
    c = engine.test_vector(convex_small.T.subset([1]), 0)
    assert a is b and a is not c


def test_removal_prediction_and_aggregation():
    np.testing.assert_allclose(predicted_removal_change([2.0, -4.0], 4), [-0.5, 1.0])
    assert aggregate([1.0, -3.0], "sum") == -2.0
    assert aggregate([1.0, -3.0], "mean_abs") == 2.0
    with pytest.raises(ValueError):
        aggregate([1.0], "median")

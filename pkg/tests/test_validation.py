import numpy as np
import pytest

from msif.config import RunConfig
from msif.errors import ScenarioError
from msif.validation import (CorrelationReport, StudyReport, build_pipeline, correlation_study, epsilon_truth, loo_truth,
                             pearson_r, retrain, run_scenario)

SMALL = {"pretrain_per_class": "8", "finetune_per_class": "6", "test_per_class": "3"}


def test_pearson_r_examples():
    assert pearson_r([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson_r([1, 2, 3], [3, 2, 1]) == -1.0
    assert pearson_r([1, 2, 3, 4], [2, 1, 4, 3]) == pytest.approx(0.6, abs=1e-12)


@pytest.mark.parametrize("xs,ys", [([1, 1, 1], [1, 2, 3]), ([1], [2]), ([1, 2], [1, 2, 3])])
def test_pearson_r_rejects_degenerate_input(xs, ys):
    with pytest.raises(ValueError):
        pearson_r(xs, ys)


def test_retraining_with_unit_weights_changes_nothing(convex_small):
    pipe = convex_small
    _, fine = retrain(pipe.model, pipe.ckpts, pipe.datasets, pipe.train_configs, np.ones(len(pipe.Z)))
    diff = pipe.test_losses(fine) - pipe.test_losses()
    assert np.abs(diff).max() <= 1e-9


def test_epsilon_truth_is_sign_symmetric_and_stable(convex_small):
    pipe = convex_small
    args = (pipe.ckpts, pipe.model, pipe.datasets, pipe.train_configs)
    a = epsilon_truth(4, 1e-3, *args)
    assert epsilon_truth(4, 1e-3, *args, signs=(-1.0, 1.0)) == a
    half = epsilon_truth(4, 5e-4, *args)
    assert half == pytest.approx(a, rel=0.02)


def test_loo_with_step_budget_tracks_full_retraining(convex_small):
    pipe = convex_small
    args = (pipe.ckpts, pipe.model, pipe.datasets, pipe.train_configs)
    for z in (1, 11):
        full = loo_truth(z, *args)
        budget = loo_truth(z, *args, budget=pipe.config.influence.retrain_steps)
        assert budget == pytest.approx(full, rel=0.05)


def test_correlation_study_shape_and_determinism(convex_small):
    cfg = convex_small.config.override(scenario={"count": "6", "per_pair": "false"})
    a, = correlation_study(cfg, convex_small)
    b, = correlation_study(cfg, convex_small)
    assert isinstance(a, CorrelationReport)
    assert len(a.pairs) == len(a.rows()) == 6 and a.pair_r is None
    assert a.pairs == b.pairs and a.pearson_r == b.pearson_r
    for row in a.rows():
        assert row["predicted"] == pytest.approx(-row["score"] / len(convex_small.Z), rel=1e-15)


def test_ablation_reports_both_methods(convex_small):
    cfg = convex_small.config.override(scenario={"count": "5", "per_pair": "true"})
    full, ident = correlation_study(cfg, convex_small, identities=(False, True))
    assert [p[1] for p in full.pairs] == [p[1] for p in ident.pairs]
    assert full.scenario["identity_hessian"] is False and ident.scenario["identity_hessian"] is True
    assert full.pair_r is not None


def test_cleansing_with_zero_fraction_equals_baseline():
    cfg = RunConfig.preset("convex").override(dataset=SMALL, scenario={"top_fraction": "0", "seeds": "0,1"})
    rep = run_scenario("cleansing", cfg)
    assert isinstance(rep, StudyReport) and len(rep.rows()) == 2
    for row in rep.rows():
        assert row["removed"] == 0
        assert row["influence_loss"] == row["random_loss"] == row["baseline_loss"]


def test_similarity_needs_matching_class_counts():
    cfg = RunConfig.preset("mlp-similarity").override(dataset={"pretrain_classes": "0,1,2"})
    with pytest.raises(ScenarioError):
        run_scenario("similarity", cfg)


def test_datasize_rows_per_seed():
    cfg = RunConfig.preset("convex-update").override(dataset=SMALL, scenario={"seeds": "3", "datasize_factor": "2"})
    rep = run_scenario("datasize", cfg)
    row, = rep.rows()
    assert row["seed"] == 3 and rep.summary["factor"] == 2
    assert row["ratio"] == pytest.approx(row["scaled"] / row["base"])


def test_unknown_scenario():
    with pytest.raises(ScenarioError):
        run_scenario("bogus", RunConfig.preset("convex"))


def test_removal_matches_minus_one_over_m_reweighting():
    pipe = build_pipeline(RunConfig.preset("convex"))
    args = (pipe.ckpts, pipe.model, pipe.datasets, pipe.train_configs)
    m = len(pipe.Z)
    zs = range(0, m, 4)
    loo = [loo_truth(z, *args) for z in zs]
    eps = [-epsilon_truth(z, 1e-3, *args) / m for z in zs]
    assert pearson_r(eps, loo) >= 0.95

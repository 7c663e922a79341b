import warnings

import numpy as np
import pytest

from msif.config import RunConfig
from msif.data import SyntheticSpec, make_synthetic
from msif.models import Architecture, TwoStageModel
from msif.validation import build_pipeline

ACCEPTANCE = {}


def record(number, passed, detail):
    ACCEPTANCE[number] = (passed, detail)
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture(autouse=True)
def _quiet_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield


def tiny_sets(seed=0, dim=3, classes=(0, 1, 2), fine=(3, 4), per=6):
    spec = SyntheticSpec(num_classes=6, dim=dim, per_class=per, class_means_seed=7, sample_seed=seed)
    Z = make_synthetic(spec, "pretrain", classes)
    X = make_synthetic(SyntheticSpec(6, dim, per, 7, sample_seed=seed + 1), "finetune-train", fine)
    T = make_synthetic(SyntheticSpec(6, dim, 3, 7, sample_seed=seed + 2), "finetune-test", fine)
    return Z, X, T


def tiny_model(activation="tanh", head="linear", embed=(4,), l2=1e-2, dim=3, npre=3, nfine=2):
    return TwoStageModel(Architecture(dim, embed, npre, nfine, activation, head, l2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def convex_small():
    """A quickly trained convex pipeline with 12 pretraining examples per class."""
    cfg = RunConfig.preset("convex").override(
        dataset={"pretrain_per_class": "12", "finetune_per_class": "8", "test_per_class": "4"})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_pipeline(cfg)


@pytest.fixture(scope="session")
def convex_update_small():
    cfg = RunConfig.preset("convex-update").override(
        dataset={"pretrain_per_class": "12", "finetune_per_class": "8", "test_per_class": "4"})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_pipeline(cfg)


@pytest.fixture(scope="session")
def mlp_small():
    cfg = RunConfig.preset("mlp").override(
        dataset={"pretrain_per_class": "10", "finetune_per_class": "8", "test_per_class": "4"},
        model={"embed_dims": "5"})
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_pipeline(cfg)

import numpy as np
import pytest

from oodgate.backbone import FeatureFrame
from oodgate.calibration import CalibrationPack, VimSubspace, WeibullTails
from oodgate.stream_io import StateKind, TrueState


def make_frame(start_s, logits, features, state=None):
    return FeatureFrame(
        start_s=start_s,
        logits=np.asarray(logits, dtype=np.float64),
        features=np.asarray(features, dtype=np.float64),
        true_state=state,
    )


def make_pack(
    class_means,
    inv_cov,
    id_memory,
    score_stats,
    tau,
    gate_threshold=0.5,
    head_weights=None,
    head_bias=None,
):
    """Calibration pack with inert baseline auxiliaries, for engine-level tests."""
    d = inv_cov.shape[0]
    k = head_weights.shape[0] if head_weights is not None else 2
    if head_weights is None:
        head_weights = np.zeros((k, d))
    if head_bias is None:
        head_bias = np.zeros(k)
    return CalibrationPack(
        class_means=[np.asarray(m, dtype=np.float64) for m in class_means],
        inv_cov=np.asarray(inv_cov, dtype=np.float64),
        id_memory=np.asarray(id_memory, dtype=np.float64),
        score_stats=dict(score_stats),
        tau=tau,
        gate_threshold=gate_threshold,
        head_weights=np.asarray(head_weights, dtype=np.float64),
        head_bias=np.asarray(head_bias, dtype=np.float64),
        react_clamp=1e9,
        dice_mask=np.ones_like(head_weights, dtype=np.float64),
        vim_subspace=VimSubspace(
            origin=np.zeros(d), residual_basis=np.eye(d)[:, :1], scale=1.0
        ),
        openmax_weibull=WeibullTails(
            mean_activations=np.zeros((k, k)),
            shapes=np.full(k, 2.0),
            scales=np.ones(k),
        ),
        score_params={},
    )


ID0 = TrueState(StateKind.ID, "class_a", 0)
ID1 = TrueState(StateKind.ID, "class_b", 1)
OOD = TrueState(StateKind.OOD, "outlier")
REST = TrueState(StateKind.REST)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def trained_workspace(tmp_path_factory):
    """A small synthetic dataset with models and packs already built."""
    from oodgate import pipeline
    from oodgate.config import RunConfig
    from oodgate.synthetic import make_synthetic_dataset

    root = tmp_path_factory.mktemp("workspace")
    make_synthetic_dataset(
        root / "data",
        n_subjects=2,
        seed=7,
        train_trials_per_class=8,
        test_trials_per_class=6,
    )
    config = RunConfig(data_root=str(root / "data"), out=str(root / "out"), seed=3)
    pipeline.cmd_train(config)
    pipeline.cmd_calibrate(config)
    return root, config

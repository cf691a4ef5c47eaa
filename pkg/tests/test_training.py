import math

import numpy as np
import pytest

from mscaps.capsnet import LossConfig, param_shapes
from mscaps.preprocessing import DifferenceImage
from mscaps.pseudo_label import TrainingSet
from mscaps.training import (
    MAGIC,
    Checkpoint,
    CheckpointFormatError,
    OptimizerState,
    TrainConfig,
    adam_step,
    init_params,
    train,
)


def _adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (math.sqrt(vh) + eps)
    return p


def test_adam_three_steps_match_scalar_oracle():
    p0 = np.array([0.5, -1.0, 2.0])
    gs = [np.array([0.1, -0.2, 0.3]), np.array([0.05, 0.4, -0.3]), np.array([-0.2, 0.1, 0.0])]
    params = {"w": p0.copy()}
    state = OptimizerState.like(params)
    for g in gs:
        adam_step(params, {"w": g}, state, 1e-2)
    ref = [_adam_scalar(p0[i], [g[i] for g in gs], 1e-2) for i in range(3)]
    np.testing.assert_allclose(params["w"], ref, atol=1e-15, rtol=0)
    assert state.step == 3


def test_adam_first_step_moves_by_lr():
    params = {"w": np.zeros(4)}
    adam_step(params, {"w": np.array([3.0, -0.01, 1e3, -7.0])}, OptimizerState.like(params), 1e-3)
    np.testing.assert_allclose(params["w"], [-1e-3, 1e-3, -1e-3, 1e-3], rtol=1e-6)


def test_adam_shape_mismatch():
    params = {"w": np.zeros(3)}
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(2)}, OptimizerState.like(params), 1e-3)
    with pytest.raises(ValueError):
        adam_step(params, {"x": np.zeros(3)}, OptimizerState.like(params), 1e-3)


def test_init_params_glorot_and_seeded():
    a = init_params(0, TrainConfig())
    b = init_params(0, TrainConfig())
    c = init_params(1, TrainConfig())
    assert list(dict(a.items())) == list(param_shapes(9))
    for (k, ta), (_, tb), (_, tc) in zip(a.items(), b.items(), c.items()):
        assert ta.data.tobytes() == tb.data.tobytes()
        assert ta.data.tobytes() != tc.data.tobytes()
    w = a["primary1"].data
    bound = math.sqrt(6 / (9 * 64 + 9 * 64))
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.9 * bound


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(r=8)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


@pytest.fixture(scope="module")
def toy():
    rng = np.random.default_rng(0)
    v = rng.uniform(0, 0.3, size=(24, 24))
    v[6:14, 6:14] += 0.6
    di = DifferenceImage(np.clip(v, 0, 1))
    centers = np.array([[r, c] for r in range(0, 24, 3) for c in range(0, 24, 3)])
    labels = (v[centers[:, 0], centers[:, 1]] > 0.5).astype(np.int64)
    tset = TrainingSet(centers, labels, 9, 0)
    cfg = TrainConfig(epochs=2, n_samples=len(labels), batch_size=16, seed=3)
    return di, tset, cfg


def test_train_is_byte_deterministic(toy):
    di, tset, cfg = toy
    a = train(di, tset, cfg).to_bytes()
    b = train(di, tset, cfg).to_bytes()
    assert a == b


def test_train_zero_lr_leaves_params(toy):
    di, tset, cfg = toy
    cfg0 = TrainConfig(lr=0.0, epochs=1, n_samples=cfg.n_samples, batch_size=16, seed=3)
    ck = train(di, tset, cfg0)
    ref = init_params(3, cfg0)
    for (_, a), (_, b) in zip(ck.params.items(), ref.items()):
        np.testing.assert_array_equal(a.data, b.data)


def test_train_reduces_loss(toy):
    di, tset, _ = toy
    ck = train(di, tset, TrainConfig(epochs=4, n_samples=len(tset), batch_size=16, seed=3))
    assert len(ck.losses) == 4 and ck.losses[-1] < ck.losses[0]


def test_train_rejects_bad_sets(toy):
    di, tset, cfg = toy
    with pytest.raises(ValueError):
        train(di, TrainingSet(tset.centers, tset.labels, 11, 0), cfg)
    with pytest.raises(ValueError):
        train(di, TrainingSet(np.zeros((0, 2), int), np.zeros(0, int), 9, 0), cfg)


def test_checkpoint_roundtrip(tmp_path):
    cfg = TrainConfig(lr=2.5e-4, epochs=7, seed=11, r=11, n_samples=400, loss=LossConfig(0.85, 0.15, 0.4))
    ck = Checkpoint(init_params(5, cfg), cfg, [0.5, 0.25, 0.125])
    path = tmp_path / "m.ckpt"
    ck.save(path)
    back = Checkpoint.load(path)
    assert back.config == cfg and back.losses == ck.losses and back.params.r == 11
    for (ka, a), (kb, b) in zip(ck.params.items(), back.params.items()):
        assert ka == kb and a.data.tobytes() == b.data.tobytes()
    assert back.to_bytes() == ck.to_bytes()
    assert path.read_bytes()[:8] == MAGIC


def test_checkpoint_corruption_detected():
    buf = Checkpoint(init_params(0, TrainConfig()), TrainConfig(), []).to_bytes()
    for bad in (b"NOTCKPT0" + buf[8:], buf[:-8], buf + b"\x00", buf[:10], buf[:12] + b"\xff" * 8 + buf[20:]):
        with pytest.raises(CheckpointFormatError):
            Checkpoint.from_bytes(bad)

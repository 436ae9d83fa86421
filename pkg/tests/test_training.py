import math

import numpy as np
import pytest

from mfbfuse.data import Dataset, SyntheticSpec, VideoRecord, batches, generate_synthetic
from mfbfuse.gradcheck import check_bce, numeric_grad, rel_error
from mfbfuse.metrics import gap_at_k
from mfbfuse.model import ModelConfig, VideoNet
from mfbfuse.numerics import Rng
from mfbfuse.training import (Adam, CheckpointError, TrainConfig, bce_loss, evaluate, load_checkpoint,
                              save_checkpoint, train)

TINY = dict(visual_dim=4, audio_dim=4, num_classes=3, k=2, o=8, frames=5, clusters=2, dbof_dim=6)


@pytest.fixture(scope="module")
def small_data():
    data = generate_synthetic(SyntheticSpec(video_count=60, seed=3))
    return data.subset(range(40)), data.subset(range(40, 60))


def small_model(fusion="mfb", aggregator="avg", seed=0, **kw):
    cfg = dict(visual_dim=32, audio_dim=8, num_classes=10, o=64, frames=8, dbof_dim=64)
    cfg.update(kw)
    return VideoNet(ModelConfig(fusion=fusion, aggregator=aggregator, **cfg), seed=seed)


# -- loss

def test_bce_perfect_prediction():
    y = np.array([[1.0, 0.0, 1.0]])
    loss, _ = bce_loss(y, y)
    assert loss == pytest.approx(0.0, abs=1e-6)


def test_bce_half_everywhere():
    loss, _ = bce_loss(np.full((4, 5), 0.5), np.zeros((4, 5)))
    assert loss == pytest.approx(5 * math.log(2), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_bce_finite_differences(seed):
    assert check_bce(Rng(seed)) < 1e-6


def test_bce_rejects_soft_labels():
    with pytest.raises(ValueError):
        bce_loss(np.full((1, 2), 0.5), np.array([[0.5, 1.0]]))


# -- optimizer

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([[1.0, -2.0]])}
    opt = Adam()
    for _ in range(10):
        opt.step(p, {"w": np.zeros((1, 2))})
    np.testing.assert_array_equal(p["w"], [[1.0, -2.0]])
    assert opt.t == 10


def test_adam_first_step_is_signed_lr():
    g = np.array([[0.3, -5.0, 1e-3]])
    p = {"w": np.zeros((1, 3))}
    Adam(lr=2e-4).step(p, {"w": g})
    # m_hat = g, v_hat = g^2  ->  update = -lr * g / (|g| + eps)
    np.testing.assert_allclose(p["w"], -2e-4 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    np.testing.assert_allclose(p["w"], -2e-4 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_drifts_monotonically():
    p = {"w": np.array([[0.0, 0.0]])}
    opt = Adam(lr=0.01)
    trace = []
    for _ in range(100):
        opt.step(p, {"w": np.array([[2.0, -0.5]])})
        trace.append(p["w"].copy())
    trace = np.concatenate(trace)
    assert np.all(np.diff(trace[:, 0]) < 0) and np.all(np.diff(trace[:, 1]) > 0)


# -- end-to-end gradient

@pytest.mark.parametrize("aggregator", ["avg", "dbof", "netvlad"])
@pytest.mark.parametrize("fusion", ["mfb", "fc_concat", "concat"])
def test_composed_model_finite_differences(aggregator, fusion):
    rng = Rng(21)
    model = VideoNet(ModelConfig(fusion=fusion, aggregator=aggregator, l2=1e-2, **TINY), seed=2)
    visual, audio = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
    y = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])

    def loss():
        d, _ = model.forward(visual, audio, train_mode=True, rng=Rng(5))
        return bce_loss(d, y)[0] + model.penalty()

    d, cache = model.forward(visual, audio, train_mode=True, rng=Rng(5))
    grads = model.backward(bce_loss(d, y)[1], cache)
    params = model.parameters()
    assert set(grads) == set(params)
    for name, arr in params.items():
        assert rel_error(grads[name], numeric_grad(loss, arr)) < 1e-4, name


# -- training loop

def test_training_is_deterministic(small_data, tmp_path):
    tr, va = small_data
    logs = []
    for run in range(2):
        model = small_model(seed=4)
        rows = train(model, tr, va, TrainConfig(batch_size=8, max_steps=30, eval_every=10, seed=4),
                     log_path=tmp_path / f"{run}.log")
        save_checkpoint(tmp_path / f"{run}.ckpt", model)
        logs.append(rows)
    assert logs[0] == logs[1]
    assert (tmp_path / "0.log").read_bytes() == (tmp_path / "1.log").read_bytes()
    assert (tmp_path / "0.ckpt").read_bytes() == (tmp_path / "1.ckpt").read_bytes()


@pytest.mark.parametrize("steps,every", [(30, 7), (20, 20), (5, 10)])
def test_log_row_count(small_data, steps, every):
    tr, va = small_data
    rows = train(small_model(), tr, va, TrainConfig(batch_size=8, max_steps=steps, eval_every=every))
    assert len(rows) == steps // every
    assert [r.step for r in rows] == [every * (i + 1) for i in range(steps // every)]


def test_log_line_format(small_data, tmp_path):
    tr, va = small_data
    train(small_model(), tr, va, TrainConfig(batch_size=8, max_steps=4, eval_every=2), log_path=tmp_path / "l")
    lines = (tmp_path / "l").read_text().splitlines()
    assert len(lines) == 2
    step, train_loss, val_loss, val_gap = lines[0].split("\t")
    assert step == "2" and float(train_loss) > 0 and float(val_loss) > 0 and 0 <= float(val_gap) <= 1


def test_fixed_batch_loss_decreases_at_default_lr(small_data):
    tr, _ = small_data
    model = small_model(dropout=0.0)
    visual, audio, y = next(batches(tr.records, 16, Rng(0), 8, 10))
    params, opt = model.parameters(), Adam(lr=2e-4)
    losses = []
    for _ in range(50):
        d, cache = model.forward(visual, audio, train_mode=True, rng=Rng(0))
        loss, grad = bce_loss(d, y)
        losses.append(loss)
        opt.step(params, model.backward(grad, cache))
    assert losses[-1] < losses[0]


def test_nonfinite_loss_aborts(small_data):
    tr, va = small_data
    model = small_model()
    model.moe.W_expert[...] = np.nan
    with pytest.raises(RuntimeError, match="non-finite"):
        train(model, tr, va, TrainConfig(max_steps=3, eval_every=1))


def test_empty_training_set():
    with pytest.raises(ValueError):
        train(small_model(), Dataset([], 32, 8, 10), None, TrainConfig())


# -- evaluation and checkpoints

def test_evaluate_is_deterministic(small_data):
    _, va = small_data
    model = small_model()
    assert evaluate(model, va) == evaluate(model, va)


def test_perfect_knowledge_model_scores_one():
    rng = Rng(0)
    records = []
    for i in range(30):
        y = (rng.uniform(size=3) < 0.4).astype(float)
        y[i % 3] = 1.0
        sign = np.tile(2 * y - 1, (4, 1))
        records.append(VideoRecord(str(i).encode(), sign, np.zeros((4, 1)), tuple(np.flatnonzero(y))))
    data = Dataset(records, 3, 1, 3)
    model = VideoNet(ModelConfig(fusion="video_only", visual_dim=3, audio_dim=1, num_classes=3,
                                 frames=4, mixtures=2), seed=0)
    model.moe.W_gate[...] = 0.0
    # expert logits are +-20 copies of the labels
    model.moe.W_expert[...] = np.repeat(20.0 * np.eye(3), 2, axis=1)
    gap, _ = evaluate(model, data)
    assert gap == 1.0


def test_random_scores_gap_near_prevalence():
    rng = np.random.default_rng(0)
    truth = (rng.uniform(size=(3000, 4)) < 0.5).astype(int)
    gaps = [gap_at_k(rng.uniform(size=truth.shape), truth) for _ in range(5)]
    assert abs(np.mean(gaps) - truth.mean()) < 0.02


@pytest.mark.parametrize("aggregator", ["avg", "dbof", "netvlad"])
def test_checkpoint_round_trip_is_bit_exact(small_data, tmp_path, aggregator):
    tr, va = small_data
    model = small_model(aggregator=aggregator)
    train(model, tr, va, TrainConfig(batch_size=8, max_steps=6, eval_every=3))
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert evaluate(loaded, va) == evaluate(model, va)
    assert tmp_path.joinpath("m.ckpt").read_bytes()[:4] == b"MMCK"


def test_checkpoint_errors(small_data, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, small_model())
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_state_shape_mismatch_is_reported():
    a, b = small_model(o=64), small_model(o=32)
    with pytest.raises(ValueError, match="mfb.U"):
        b.load_state(a.state())


def test_evaluate_rejects_mismatched_dataset(small_data):
    _, va = small_data
    model = VideoNet(ModelConfig(visual_dim=16, audio_dim=8, num_classes=10, o=8, frames=4))
    with pytest.raises(ValueError, match="dims"):
        evaluate(model, va)

import math

import numpy as np
import pytest

from projsynth import autodiff as ad
from projsynth.errors import NumericalError, ParameterError
from projsynth.generators import UNetConfig, build_unet
from projsynth.objectives import LossConfig
from projsynth.projector import ProjectionImage
from projsynth.training import (
    AdamState,
    DatasetPair,
    TrainConfig,
    adam_step,
    load_checkpoint_model,
    split_dataset,
    train,
)


def adam_reference_trace(grad_fn, theta0, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    """Independent scalar ADAM recurrence, straight from the update rule."""
    theta, m, v = theta0, 0.0, 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def make_pairs(n, res=8, seed=0):
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        mr = rng.random((res, res)) * 2 - 1
        xray = np.roll(mr, 1, axis=0) * 0.5
        pairs.append(
            DatasetPair(
                mr=ProjectionImage(dims=(res, res), spacing=(1, 1), data=mr, modality="MR"),
                xray=ProjectionImage(dims=(res, res), spacing=(1, 1), data=xray, modality="XRAY"),
                view_id=f"view_{i:04d}",
            )
        )
    return pairs


TINY_UNET = UNetConfig(depth=2, base_channels=4, dropout_levels=1)


class TestSplitDataset:
    def test_paper_scale_sizes(self):
        pairs = list(range(3200))
        train_set, test_set = split_dataset(pairs, 3000, 200, seed=1)
        assert len(train_set) == 3000 and len(test_set) == 200

    def test_disjoint(self):
        pairs = make_pairs(20)
        train_set, test_set = split_dataset(pairs, 12, 8, seed=2)
        assert {p.view_id for p in train_set}.isdisjoint({p.view_id for p in test_set})

    def test_same_seed_same_split(self):
        pairs = make_pairs(16)
        a = split_dataset(pairs, 10, 6, seed=3)
        b = split_dataset(pairs, 10, 6, seed=3)
        assert [p.view_id for p in a[0]] == [p.view_id for p in b[0]]
        assert [p.view_id for p in a[1]] == [p.view_id for p in b[1]]

    def test_insufficient_pairs(self):
        with pytest.raises(ParameterError):
            split_dataset(make_pairs(5), 4, 2)


class TestAdam:
    def test_first_step_magnitude(self):
        theta = {"w": ad.tensor(np.array([1.0]), requires_grad=True)}
        state = AdamState(learning_rate=0.004)
        adam_step(theta, {"w": np.array([1.0], dtype=np.float32)}, state)
        delta = float(theta["w"].data[0]) - 1.0
        assert delta == pytest.approx(-0.004, rel=1e-5)

    def test_zero_gradient_fresh_state_no_move(self):
        theta = {"w": ad.tensor(np.array([2.0]), requires_grad=True)}
        adam_step(theta, {"w": np.zeros(1, dtype=np.float32)}, AdamState())
        assert float(theta["w"].data[0]) == 2.0

    def test_five_step_quadratic_matches_reference(self):
        # f(theta) = theta^2, grad 2*theta, from theta=1
        want = adam_reference_trace(lambda t: 2 * t, 1.0, lr=0.1, steps=5)
        theta = {"w": ad.tensor(np.array([1.0]), dtype=np.float64, requires_grad=True)}
        state = AdamState(learning_rate=0.1)
        got = []
        for _ in range(5):
            g = np.array([2.0 * float(theta["w"].data[0])])
            adam_step(theta, {"w": g}, state)
            got.append(float(theta["w"].data[0]))
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_nan_gradient_aborts_with_name(self):
        theta = {"w": ad.tensor(np.array([1.0]), requires_grad=True)}
        with pytest.raises(NumericalError, match="'w'"):
            adam_step(theta, {"w": np.array([np.nan], dtype=np.float32)}, AdamState())

    def test_step_size_bound(self):
        # |delta| <= 2*lr after the first step on well-scaled gradients.
        rng = np.random.default_rng(4)
        lr = 0.01
        theta = {"w": ad.tensor(rng.standard_normal(32), requires_grad=True)}
        state = AdamState(learning_rate=lr)
        prev = theta["w"].data.copy()
        for t in range(60):
            g = rng.standard_normal(32).astype(np.float32)
            adam_step(theta, {"w": g}, state)
            step = np.abs(theta["w"].data - prev)
            if t >= 1:
                assert step.max() <= 2 * lr
            prev = theta["w"].data.copy()


class TestTrainLoop:
    def test_zero_epochs_keeps_parameters(self):
        model = build_unet(TINY_UNET, 0)
        before = {k: v.copy() for k, v in model.state_dict().items()}
        _, history = train(model, make_pairs(4), TrainConfig(epochs=0))
        assert history == []
        after = model.state_dict()
        for name in before:
            assert np.array_equal(before[name], after[name])

    def test_history_length_and_loss_drops(self):
        model = build_unet(TINY_UNET, 1)
        cfg = TrainConfig(epochs=8, learning_rate=0.004, seed=5)
        _, history = train(model, make_pairs(8, seed=6), cfg)
        assert len(history) == cfg.epochs
        assert history[-1] < history[0]

    def test_full_determinism(self):
        cfg = TrainConfig(epochs=3, seed=7)
        runs = []
        for _ in range(2):
            model = build_unet(TINY_UNET, 2)
            _, history = train(model, make_pairs(6, seed=8), cfg, LossConfig())
            runs.append((history, model.state_dict()))
        assert runs[0][0] == runs[1][0]  # bit-identical history
        for name in runs[0][1]:
            assert np.array_equal(runs[0][1][name], runs[1][1][name])

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        pairs = make_pairs(6, seed=9)
        cfg = TrainConfig(epochs=6, seed=10, checkpoint_every=3)

        straight_dir = tmp_path / "straight"
        model_a = build_unet(TINY_UNET, 3)
        _, hist_a = train(model_a, pairs, cfg, out_dir=straight_dir)

        model_b = build_unet(TINY_UNET, 99)  # different init, overwritten by resume
        _, hist_b = train(
            model_b, pairs, cfg, out_dir=tmp_path / "resumed",
            resume_from=straight_dir / "ckpt_ep0003",
        )
        assert hist_a == hist_b
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        for name in state_a:
            assert np.array_equal(state_a[name], state_b[name])

    def test_checkpoint_model_reload(self, tmp_path):
        model = build_unet(TINY_UNET, 4)
        train(model, make_pairs(4, seed=11), TrainConfig(epochs=1, seed=1), out_dir=tmp_path)
        back, state = load_checkpoint_model(tmp_path / "ckpt_final")
        assert back.arch == "unet" and state["epoch"] == 1
        for name in model.params:
            assert np.array_equal(back.params[name].data, model.params[name].data)

    def test_empty_train_set_rejected(self):
        with pytest.raises(ParameterError):
            train(build_unet(TINY_UNET, 0), [], TrainConfig(epochs=1))

    def test_perceptual_needs_eval_net(self):
        with pytest.raises(ParameterError):
            train(
                build_unet(TINY_UNET, 0), make_pairs(2),
                TrainConfig(epochs=1), LossConfig(kind="perceptual"),
            )

    def test_batched_training_runs(self):
        model = build_unet(TINY_UNET, 5)
        _, history = train(model, make_pairs(8, seed=12), TrainConfig(epochs=2, batch_size=4))
        assert len(history) == 2

import math

import numpy as np
import pytest

from conftest import make_window
from gradcheck import check_gradients
from mixcast.autodiff import GraphError, Tape, Tensor, backward, constant
from mixcast.dist import BaseKind, MixtureSample, SufficientStats, mixture_log_pdf
from mixcast.model import ModelConfig, ModelParams
from mixcast.train import (
    AdamState, TrainConfig, adam_step, clip_gradients, imm_nll, mse_loss, train,
)


def tensor_draws(means, log_scales):
    return [(Tensor(np.asarray(m, dtype=float)), Tensor(np.asarray(s, dtype=float)))
            for m, s in zip(means, log_scales)]


class TestImmNll:
    def test_single_draw_is_negative_gaussian_density(self):
        y = np.array([0.3, -0.7])
        mu = np.array([0.1, 0.2])
        ls = np.array([0.5, -0.4])
        loss = imm_nll(tensor_draws([mu], [ls]), y).item()
        expected = -np.sum(-0.5 * (math.log(2 * math.pi) + ls)
                           - 0.5 * (y - mu) ** 2 * np.exp(-ls))
        assert loss == pytest.approx(expected, abs=1e-14)

    def test_duplicate_draws_unchanged(self):
        y = np.array([1.0])
        one = imm_nll(tensor_draws([[0.5]], [[0.1]]), y).item()
        two = imm_nll(tensor_draws([[0.5], [0.5]], [[0.1], [0.1]]), y).item()
        assert two == pytest.approx(one, abs=1e-14)

    def test_matches_negative_mixture_log_pdf(self):
        # dual route: tape-op loss vs plain-numpy density
        rng = np.random.default_rng(0)
        for kind in (BaseKind.GAUSSIAN, BaseKind.LAPLACE):
            for _ in range(20):
                k = int(rng.integers(1, 6))
                t = int(rng.integers(1, 5))
                means = rng.normal(size=(k, t))
                log_scales = rng.uniform(-1, 1, size=(k, t))
                y = rng.normal(size=t)
                loss = imm_nll(tensor_draws(means, log_scales), y, kind).item()
                sample = MixtureSample([SufficientStats(m, s)
                                        for m, s in zip(means, log_scales)])
                assert loss == pytest.approx(-mixture_log_pdf(sample, y, kind), abs=1e-12)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(1)
        means = rng.normal(size=(4, 3))
        log_scales = rng.uniform(-1, 1, size=(4, 3))
        y = rng.normal(size=3)
        base = imm_nll(tensor_draws(means, log_scales), y).item()
        perm = rng.permutation(4)
        shuffled = imm_nll(tensor_draws(means[perm], log_scales[perm]), y).item()
        assert shuffled == pytest.approx(base, abs=1e-12)

    def test_stationary_at_shared_mean(self):
        # equal draws with mean == y: gradient w.r.t. every mu is zero
        y = np.array([0.4, -0.2])
        mu = Tensor(y.copy(), requires_grad=True)
        ls = Tensor(np.array([0.3, 0.3]), requires_grad=True)
        with Tape() as tape:
            tape.register("mu", mu)
            tape.register("ls", ls)
            backward(tape, imm_nll([(mu, ls), (mu, ls)], y))
        np.testing.assert_allclose(mu.grad, np.zeros(2), atol=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        mu1, mu2 = rng.normal(size=(2, 3))
        ls1, ls2 = rng.uniform(-0.5, 0.5, size=(2, 3))
        y = rng.normal(size=3)

        for kind in (BaseKind.GAUSSIAN, BaseKind.LAPLACE):
            def loss(ts, kind=kind):
                return imm_nll([(ts[0], ts[1]), (ts[2], ts[3])], y, kind)

            check_gradients(loss, [mu1, ls1, mu2, ls2])


class TestMseLoss:
    def test_perfect_prediction(self):
        y = np.array([1.0, 2.0])
        assert mse_loss(Tensor(y.copy()), y).item() == 0.0

    def test_unit_residuals(self):
        assert mse_loss(Tensor(np.array([1.0, -1.0])), np.zeros(2)).item() == 1.0

    def test_gradient_closed_form(self):
        rng = np.random.default_rng(3)
        mu = rng.normal(size=4)
        y = rng.normal(size=4)
        t = Tensor(mu.copy(), requires_grad=True)
        with Tape() as tape:
            tape.register("mu", t)
            backward(tape, mse_loss(t, y))
        np.testing.assert_allclose(t.grad, 2.0 * (mu - y) / 4.0, atol=1e-14)
        check_gradients(lambda ts: mse_loss(ts[0], y), [mu])

    def test_mu_gradient_proportional_to_single_draw_nll(self):
        # fixed variance, one draw: mixture NLL and MSE give parallel mu-gradients
        rng = np.random.default_rng(4)
        mu = rng.normal(size=5)
        y = rng.normal(size=5)
        ls = np.zeros(5)

        g_nll = np.zeros(5)
        t = Tensor(mu.copy(), requires_grad=True)
        with Tape() as tape:
            tape.register("mu", t)
            backward(tape, imm_nll([(t, constant(ls))], y))
        g_nll = t.grad.copy()

        t2 = Tensor(mu.copy(), requires_grad=True)
        with Tape() as tape:
            tape.register("mu", t2)
            backward(tape, mse_loss(t2, y))
        g_mse = t2.grad.copy()

        cos = g_nll @ g_mse / (np.linalg.norm(g_nll) * np.linalg.norm(g_mse))
        assert cos == pytest.approx(1.0, abs=1e-9)


class TestTrainConfig:
    def test_imm_requires_multiple_draws(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="imm", k_train=1)

    def test_positive_learning_rate(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)

    def test_unknown_loss(self):
        with pytest.raises(ValueError):
            TrainConfig(loss_kind="huber")


def small_params():
    cfg = ModelConfig(d=8, heads=2, d_k=4, d_v=4, ff=16, t_enc=4, t_pred=2,
                      dropout_p=0.0)
    return ModelParams(cfg, seed=20), cfg


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        params, _ = small_params()
        before = {n: t.data.copy() for n, t in params.tensors.items()}
        for t in params.tensors.values():
            t.grad = np.zeros_like(t.data)
        adam_step(params, AdamState.for_params(params), lr=0.1, beta_a=0.0,
                  beta_b=0.9, eps=1e-8)
        for name, t in params.tensors.items():
            np.testing.assert_array_equal(t.data, before[name])

    def test_first_step_is_signed_learning_rate(self):
        params, _ = small_params()
        before = {n: t.data.copy() for n, t in params.tensors.items()}
        rng = np.random.default_rng(5)
        for t in params.tensors.values():
            t.grad = rng.choice([-2.0, 3.0], size=t.data.shape)
        adam_step(params, AdamState.for_params(params), lr=0.01, beta_a=0.0,
                  beta_b=0.9, eps=1e-8)
        for name, t in params.tensors.items():
            g = t.data - before[name]
            expected = -0.01 * np.sign(t.grad)
            np.testing.assert_allclose(g, expected, atol=1e-6)

    def test_missing_gradient_rejected(self):
        params, _ = small_params()
        with pytest.raises(GraphError):
            adam_step(params, AdamState.for_params(params), lr=0.01, beta_a=0.0,
                      beta_b=0.9, eps=1e-8)

    def test_clip_rescales_to_max_norm(self):
        params, _ = small_params()
        for t in params.tensors.values():
            t.grad = np.ones_like(t.data)
        norm = clip_gradients(params, 1.0)
        assert norm > 1.0
        total = sum(float(np.sum(t.grad ** 2)) for t in params.tensors.values())
        assert math.sqrt(total) == pytest.approx(1.0, rel=1e-9)


def toy_windows(n=8, t_enc=4, t_pred=2, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = rng.normal(scale=0.1, size=t_enc) + 0.5
        y = np.full(t_pred, 0.5)
        out.append(make_window(t_enc, t_pred, seed=100 + i))
        out[-1].x = x
        out[-1].y = y
        out[-1].y_raw = y.copy()
    return out


class TestTrainLoop:
    def test_zero_epochs_returns_initial_params(self):
        params, cfg = small_params()
        before = {n: t.data.copy() for n, t in params.tensors.items()}
        tcfg = TrainConfig(loss_kind="mse", epochs=0, batch_size=4, lr=1e-3, seed=1,
                           k_eval=2)
        result = train(params, cfg, toy_windows(), [], tcfg)
        for name, t in result.params.tensors.items():
            np.testing.assert_array_equal(t.data, before[name])

    def test_mse_decreases_on_constant_toy(self):
        # full batch, deterministic model, constant targets: smooth descent
        params, cfg = small_params()
        windows = toy_windows(n=8)
        tcfg = TrainConfig(loss_kind="mse", epochs=10, batch_size=8, lr=2e-3,
                           seed=2, k_eval=1, patience=0)
        result = train(params, cfg, windows, [], tcfg)
        losses = [rec.train_loss for rec in result.history]
        assert len(losses) == 10
        assert all(b < a + 1e-12 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_fixed_seed_reproducible(self):
        histories = []
        finals = []
        for _ in range(2):
            cfg = ModelConfig(d=8, heads=2, d_k=4, d_v=4, ff=16, t_enc=4, t_pred=2,
                              dropout_p=0.3)
            params = ModelParams(cfg, seed=30)
            tcfg = TrainConfig(loss_kind="imm", k_train=2, epochs=2, batch_size=4,
                               lr=1e-3, seed=3, k_eval=2, patience=0)
            windows = toy_windows(n=6)
            val = toy_windows(n=2, seed=50)
            result = train(params, cfg, windows, val, tcfg)
            histories.append([(r.epoch, r.train_loss, r.val_nll) for r in result.history])
            finals.append({n: t.data.copy() for n, t in result.params.tensors.items()})
        assert histories[0] == histories[1]
        for name in finals[0]:
            np.testing.assert_array_equal(finals[0][name], finals[1][name])

    def test_mse_leaves_log_scale_head_untouched(self):
        cfg = ModelConfig(d=8, heads=2, d_k=4, d_v=4, ff=16, t_enc=4, t_pred=2,
                          dropout_p=0.3)
        params = ModelParams(cfg, seed=31)
        head_w_before = params["head.w"].data.copy()
        head_b_before = params["head.b"].data.copy()
        tcfg = TrainConfig(loss_kind="mse", epochs=3, batch_size=4, lr=1e-3, seed=4,
                           k_eval=2, patience=0)
        result = train(params, cfg, toy_windows(n=6), [], tcfg)
        np.testing.assert_array_equal(result.params["head.w"].data[:, 1],
                                      head_w_before[:, 1])
        assert result.params["head.b"].data[1] == head_b_before[1]
        assert not np.array_equal(result.params["head.w"].data[:, 0],
                                  head_w_before[:, 0])

    def test_best_validation_epoch_selected(self):
        cfg = ModelConfig(d=8, heads=2, d_k=4, d_v=4, ff=16, t_enc=4, t_pred=2,
                          dropout_p=0.0)
        params = ModelParams(cfg, seed=32)
        tcfg = TrainConfig(loss_kind="mse", epochs=4, batch_size=8, lr=5e-3, seed=5,
                           k_eval=1, patience=0)
        result = train(params, cfg, toy_windows(n=8), toy_windows(n=3, seed=60), tcfg)
        vals = [r.val_nll for r in result.history]
        assert result.best_epoch == int(np.argmin(vals))

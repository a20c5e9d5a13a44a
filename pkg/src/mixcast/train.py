"""Losses, Adam, and the training loop.

The mixture negative log-likelihood keeps all constants so training and test
likelihoods live on the same scale; it is assembled from tape ops and checked
against the plain-numpy mixture density elsewhere.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    GraphError, Tape, Tensor, absval, add, backward, constant, exp, logsumexp,
    mean_all, mul, neg, scale, stack, sub, sum_all,
)
from .dist import LOG2PI, BaseKind, MixtureSample, SufficientStats, mixture_log_pdf
from .model import ModelConfig, ModelParams, NumericError, forward_stats

IMM = "imm"
MSE = "mse"


@dataclass
class TrainConfig:
    loss_kind: str = IMM
    k_train: int = 5
    k_eval: int = 100
    epochs: int = 100
    batch_size: int = 64
    lr: float = 2e-4
    beta_a: float = 0.0
    beta_b: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    patience: int = 10
    clip_norm: float = 5.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss_kind not in (IMM, MSE):
            raise ValueError(f"loss_kind must be '{IMM}' or '{MSE}', got {self.loss_kind!r}")
        if self.loss_kind == IMM and self.k_train < 2:
            raise ValueError("k_train must be >= 2 for the mixture loss")
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.k_eval < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("k_eval and batch_size must be >= 1, epochs >= 0")


def imm_nll(draws, y, kind: BaseKind = BaseKind.GAUSSIAN) -> Tensor:
    """Mixture negative log-likelihood over k draws, LogSumExp-stabilized.

    ``draws`` is a list of (mean, log_scale) tensor pairs.  Returns
    -[logsumexp_j(log p(y; draw_j)) - log k] with full constants, i.e. exactly
    the negative mixture log-density.
    """
    y_c = constant(np.asarray(y, dtype=np.float64))
    horizons = y_c.data.shape[0]
    lls = []
    for mean, log_scale in draws:
        diff = sub(mean, y_c)
        if kind is BaseKind.GAUSSIAN:
            quad = mul(mul(diff, diff), exp(neg(log_scale)))
            nll2 = add(add(sum_all(log_scale), sum_all(quad)),
                       constant(horizons * LOG2PI))
            lls.append(scale(nll2, -0.5))
        else:
            dev = mul(absval(diff), exp(neg(log_scale)))
            total = add(add(sum_all(log_scale), sum_all(dev)),
                        constant(horizons * math.log(2.0)))
            lls.append(neg(total))
    mix = sub(logsumexp(stack(lls)), constant(math.log(len(lls))))
    return neg(mix)


def mse_loss(mean: Tensor, y) -> Tensor:
    """Mean squared error over the prediction window; the log-scale head
    receives no gradient under this loss."""
    diff = sub(mean, constant(np.asarray(y, dtype=np.float64)))
    return mean_all(mul(diff, diff))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        state = cls()
        for name, t in params.tensors.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for t in params.tensors.values():
        if t.grad is not None:
            total += float(np.sum(t.grad ** 2))
    norm = math.sqrt(total)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for t in params.tensors.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def adam_step(params: ModelParams, state: AdamState, lr: float,
              beta_a: float, beta_b: float, eps: float):
    """Standard bias-corrected update; every registered parameter must have a
    populated gradient."""
    state.step += 1
    t = state.step
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            raise GraphError(f"missing gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta_a
        m += (1.0 - beta_a) * g
        v *= beta_b
        v += (1.0 - beta_b) * g * g
        m_hat = m / (1.0 - beta_a ** t)
        v_hat = v / (1.0 - beta_b ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_nll: float
    wall_seconds: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    best_epoch: int


def _forward_seed(seed: int, *parts) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(p) for p in parts]))


def _sample_loss(params, mcfg, tcfg, window, epoch, index):
    if tcfg.loss_kind == IMM:
        draws = []
        for j in range(tcfg.k_train):
            rng = _forward_seed(tcfg.seed, 2, epoch, index, j) if mcfg.dropout_p > 0 else None
            draws.append(forward_stats(params, mcfg, window, rng))
        return imm_nll(draws, window.y, mcfg.base)
    rng = _forward_seed(tcfg.seed, 2, epoch, index, 0) if mcfg.dropout_p > 0 else None
    mean, _ = forward_stats(params, mcfg, window, rng)
    return mse_loss(mean, window.y)


def validation_nll(params, mcfg, windows, k: int, seed: int) -> float:
    """Mean mixture negative log-likelihood over windows, k draws each.

    Draw seeds depend only on the window position so epoch-to-epoch scores
    are comparable.
    """
    if not windows:
        return math.nan
    total = 0.0
    for idx, w in enumerate(windows):
        draws = []
        for j in range(k):
            rng = _forward_seed(seed, 3, idx, j) if mcfg.dropout_p > 0 else None
            mean, log_scale = forward_stats(params, mcfg, w, rng)
            draws.append(SufficientStats(mean.data.copy(), log_scale.data.copy()))
        total -= mixture_log_pdf(MixtureSample(draws), w.y, mcfg.base)
    return total / len(windows)


def train(params: ModelParams, mcfg: ModelConfig, train_windows, val_windows,
          tcfg: TrainConfig, log=None) -> TrainResult:
    """Minimize the batch-mean loss; returns parameters from the epoch with
    the best validation NLL.  ``params`` is updated in place during training;
    the returned copy is the selected snapshot."""
    state = AdamState.for_params(params)
    shuffle_rng = _forward_seed(tcfg.seed, 1)
    best = params.copy()
    best_val = math.inf
    best_epoch = 0
    bad_epochs = 0
    history = []
    n = len(train_windows)
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, tcfg.batch_size):
            batch = order[b0:b0 + tcfg.batch_size]
            params.zero_grads()
            for index in batch:
                window = train_windows[int(index)]
                with Tape() as tape:
                    tape.watch(params.tensors)
                    loss = _sample_loss(params, mcfg, tcfg, window, epoch, int(index))
                    if not math.isfinite(loss.item()):
                        raise NumericError(
                            f"non-finite loss at epoch {epoch}, batch {b0 // tcfg.batch_size}, "
                            f"window {window.window_id}")
                    backward(tape, scale(loss, 1.0 / len(batch)))
                epoch_loss += loss.item()
            clip_gradients(params, tcfg.clip_norm)
            adam_step(params, state, tcfg.lr, tcfg.beta_a, tcfg.beta_b, tcfg.eps)
        train_loss = epoch_loss / n if n else math.nan
        val_nll = validation_nll(params, mcfg, val_windows, tcfg.k_eval, tcfg.seed)
        wall = time.perf_counter() - t0
        history.append(EpochRecord(epoch, train_loss, val_nll, wall))
        if log is not None:
            log(f"epoch {epoch}: train_loss={train_loss:.4f} val_nll={val_nll:.4f} "
                f"({wall:.1f}s)")
        if math.isnan(val_nll) or val_nll < best_val:
            best_val = val_nll if not math.isnan(val_nll) else best_val
            best = params.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if tcfg.patience > 0 and bad_epochs >= tcfg.patience:
                break
    return TrainResult(params=best, history=history, best_epoch=best_epoch)

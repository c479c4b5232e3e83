"""Recurrent decoder with location-wise soft / hard attention.

At every frame ``t`` an MLP scores each location feature ``a_i`` against the
previous hidden state, a softmax turns the scores into weights ``alpha_t``,
and a context vector is formed either as the weighted mean of all locations
(soft) or as one location drawn from ``alpha_t`` (hard).  A GRU cell
consumes the contexts frame by frame; the class distribution is read from
the last hidden state.

Hard attention is trained with the score-function (REINFORCE) estimator;
see :func:`hard_surrogate`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .encoder import Linear, Module, glorot, zeros
from .numcore import Tensor

MODES = ("soft", "hard", "mean")
LOG_FLOOR = 1e-12


class AttentionMLP(Module):
    """``e_i = w . tanh(U a_i + V h + bias)``."""

    def __init__(self, rng, feat_dim: int, hidden: int, att_dim: int):
        self.params = {
            "U": glorot(rng, (feat_dim, att_dim), feat_dim, att_dim),
            "V": glorot(rng, (hidden, att_dim), hidden, att_dim),
            "w": glorot(rng, (att_dim, 1), att_dim, 1),
            "bias": zeros((att_dim,)),
        }

    def project(self, grid: Tensor) -> Tensor:
        """``U a_i`` for every location; can be shared across time steps."""
        return nc.matmul(grid, self.params["U"])

    def scores(self, proj: Tensor, h_prev: Tensor) -> Tensor:
        b, l, a = proj.shape
        hv = nc.reshape(nc.matmul(h_prev, self.params["V"]), (b, 1, a))
        act = nc.tanh(proj + hv + self.params["bias"])
        return nc.reshape(nc.matmul(act, self.params["w"]), (b, l))


class GRUCell(Module):
    def __init__(self, rng, n_in: int, hidden: int):
        self.params = {}
        for g in ("z", "r", "n"):
            self.params[f"W_{g}"] = glorot(rng, (n_in, hidden), n_in, hidden)
            self.params[f"U_{g}"] = glorot(rng, (hidden, hidden), hidden, hidden)
            self.params[f"b_{g}"] = zeros((hidden,))
        self.hidden = hidden

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        p = self.params
        z = nc.sigmoid(nc.matmul(x, p["W_z"]) + nc.matmul(h, p["U_z"]) + p["b_z"])
        r = nc.sigmoid(nc.matmul(x, p["W_r"]) + nc.matmul(h, p["U_r"]) + p["b_r"])
        n = nc.tanh(nc.matmul(x, p["W_n"]) + nc.matmul(r * h, p["U_n"]) + p["b_n"])
        return (1.0 - z) * n + z * h


# --------------------------------------------------------------- functional pieces

def attention_scores(mlp: AttentionMLP, grid: Tensor, h_prev: Tensor) -> Tensor:
    """Raw scores ``(B, L)`` for a batch of grids ``(B, L, D)``."""
    return mlp.scores(mlp.project(grid), h_prev)


def attention_weights(scores: Tensor) -> Tensor:
    return nc.softmax(scores, axis=-1)


def soft_context(grid: Tensor, alpha: Tensor) -> Tensor:
    b, l, d = grid.shape
    return nc.sum(grid * nc.reshape(alpha, (b, l, 1)), axis=1)


def hard_context(grid: Tensor, alpha, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """One location per batch row, drawn from the categorical ``alpha``."""
    b, l, d = grid.shape
    probs = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    idx = sample_categorical(probs, rng)
    flat = nc.reshape(grid, (b * l, d))
    return nc.index_select(flat, np.arange(b) * l + idx, axis=0), idx


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of ``probs`` (rows sum to 1)."""
    probs = np.atleast_2d(probs)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (cdf <= u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


# --------------------------------------------------------------- decoder

@dataclass
class DecodeResult:
    """Differentiable outputs of one batched decode."""
    probs: Tensor                      # (B, K)
    alphas: list[Tensor]               # T tensors of (B, L)
    mode: str
    sampled: np.ndarray | None = None  # (B, T) location indices, hard mode
    sampled_log_alpha: list[Tensor] = field(default_factory=list)  # T tensors (B,)

    def alpha_array(self) -> np.ndarray:
        """``(B, T, L)`` numpy copy of the attention weights."""
        return np.stack([a.data for a in self.alphas], axis=1)


@dataclass
class AttentionRecord:
    alphas: np.ndarray      # (T, L)
    maps: np.ndarray        # (T, R, R)
    prediction: np.ndarray  # (K,)
    sampled: np.ndarray | None = None

    @property
    def label(self) -> int:
        return int(np.argmax(self.prediction))


class AttentionDecoder(Module):
    def __init__(self, rng, feat_dim: int = 32, hidden: int = 64, att_dim: int = 64, classes: int = 4):
        self.att = AttentionMLP(rng, feat_dim, hidden, att_dim)
        self.gru = GRUCell(rng, feat_dim, hidden)
        self.out = Linear(rng, hidden, classes)
        self.feat_dim, self.hidden, self.att_dim, self.classes = feat_dim, hidden, att_dim, classes
        self.params = {**self.att.named_parameters("att."), **self.gru.named_parameters("gru."),
                       **self.out.named_parameters("out.")}

    def __call__(self, grids: Tensor, mode: str = "soft", rng: np.random.Generator | None = None) -> DecodeResult:
        """Decode ``(B, T, L, D)`` location features.

        ``mode='mean'`` replaces attention by a plain average over locations
        (the no-attention ablation); its recorded weights are uniform.
        """
        if mode not in MODES:
            raise ValueError(f"unknown attention mode {mode!r}")
        if grids.ndim != 4 or grids.shape[1] < 1:
            raise nc.ShapeError(f"decode: expected (B, T, L, D) with T >= 1, got {grids.shape}")
        b, t_len, l, d = grids.shape
        if d != self.feat_dim:
            raise nc.ShapeError(f"decode: feature dim {d} != {self.feat_dim}")
        if mode == "hard" and rng is None:
            raise ValueError("hard attention needs an rng")
        h = Tensor(np.zeros((b, self.hidden)))
        proj = self.att.project(grids) if mode != "mean" else None
        alphas, logs, picks = [], [], []
        for t in range(t_len):
            grid = nc.reshape(nc.index_select(grids, [t], axis=1), (b, l, d))
            if mode == "mean":
                alpha = Tensor(np.full((b, l), 1.0 / l))
                z = nc.mean(grid, axis=1)
            else:
                pt = nc.reshape(nc.index_select(proj, [t], axis=1), (b, l, self.att_dim))
                alpha = attention_weights(self.att.scores(pt, h))
                if mode == "soft":
                    z = soft_context(grid, alpha)
                else:
                    z, idx = hard_context(grid, alpha, rng)
                    picks.append(idx)
                    onehot = np.zeros((b, l))
                    onehot[np.arange(b), idx] = 1.0
                    logs.append(nc.sum(nc.log(alpha, floor=LOG_FLOOR) * onehot, axis=1))
            alphas.append(alpha)
            h = self.gru(z, h)
        probs = nc.softmax(self.out(h), axis=-1)
        sampled = np.stack(picks, axis=1) if picks else None
        return DecodeResult(probs, alphas, mode, sampled, logs)


def decode(decoder: AttentionDecoder, grids, mode: str = "soft", rng=None, resolution: int = 32) -> AttentionRecord:
    """Single-sequence decode ``(T, L, D)`` -> :class:`AttentionRecord`."""
    g = np.asarray(grids.data if isinstance(grids, Tensor) else grids)
    if g.ndim != 3 or g.shape[0] == 0:
        raise ValueError(f"decode: expected a non-empty (T, L, D) sequence, got shape {g.shape}")
    with nc.no_grad():
        res = decoder(Tensor(g[None]), mode, rng)
    alphas = res.alpha_array()[0]
    return AttentionRecord(alphas, attention_maps(alphas, resolution), res.probs.data[0],
                           None if res.sampled is None else res.sampled[0])


def attention_maps(alphas: np.ndarray, resolution: int) -> np.ndarray:
    """Nearest-neighbour upsampling of ``(..., L)`` weights to ``(..., R, R)``."""
    l = alphas.shape[-1]
    side = int(round(np.sqrt(l)))
    if side * side != l or resolution % side:
        raise ValueError(f"cannot map {l} locations onto a {resolution}x{resolution} image")
    k = resolution // side
    grid = alphas.reshape(*alphas.shape[:-1], side, side)
    return np.repeat(np.repeat(grid, k, axis=-2), k, axis=-1)


# --------------------------------------------------------------- losses

def nll(probs: Tensor, labels) -> Tensor:
    """Per-sample ``-log p_label`` with the probability floored at 1e-12."""
    labels = np.asarray(labels).reshape(-1)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -nc.sum(nc.log(probs, floor=LOG_FLOOR) * onehot, axis=1)


def coverage_penalty(alphas: list[Tensor]) -> Tensor:
    """Per-sample ``sum_i (1 - sum_t alpha_ti)^2``."""
    total = alphas[0]
    for a in alphas[1:]:
        total = total + a
    gap = 1.0 - total
    return nc.sum(gap * gap, axis=1)


def soft_loss(result: DecodeResult, labels, lambda_ds: float = 0.01) -> Tensor:
    """Batch mean of ``-log p(y|x) + lambda_ds * coverage_penalty``."""
    per = nll(result.probs, labels)
    if lambda_ds:
        per = per + lambda_ds * coverage_penalty(result.alphas)
    return nc.mean(per)


class EMABaseline:
    """Exponential moving average of the reward, updated after each use."""

    def __init__(self, decay: float = 0.9, value: float = 0.0):
        self.decay = decay
        self.value = value

    def update(self, rewards) -> None:
        self.value = self.decay * self.value + (1 - self.decay) * float(np.mean(rewards))


def hard_surrogate(result: DecodeResult, labels, baseline: EMABaseline) -> Tensor:
    """Surrogate loss whose gradient is the REINFORCE estimate.

    Reward per sample is ``log p_label``.  The gradient of the returned
    scalar equals the batch mean of ``d(-log p_label) - (R - b) d(sum_t log
    alpha_{t, s_t})``: exact on the classifier path, score-function on the
    sampling path.  The baseline is updated with the batch rewards after
    they have been used.
    """
    if result.sampled is None or not result.sampled_log_alpha:
        raise ValueError("hard_surrogate: record has no sampled locations (not a hard-mode decode)")
    per = nll(result.probs, labels)
    reward = -per.data.astype(np.float64)
    adv = reward - baseline.value
    logp = result.sampled_log_alpha[0]
    for lt in result.sampled_log_alpha[1:]:
        logp = logp + lt
    surrogate = per - logp * adv
    baseline.update(reward)
    return nc.mean(surrogate)


def hard_step_grads(decoder_params: dict[str, Tensor], result: DecodeResult, labels,
                    baseline: EMABaseline) -> dict[str, np.ndarray]:
    """REINFORCE gradient of ``-log p_label`` w.r.t. the given parameters."""
    for p in decoder_params.values():
        p.grad = None
    loss = hard_surrogate(result, labels, baseline)
    nc.backward(loss)
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in decoder_params.items()}
    for p in decoder_params.values():
        p.grad = None
    return grads

"""Adversarial + manifold-regularised transfer of the conv encoder.

Joint objective for the encoder and class head::

    -log p_label + alpha * L_adver + beta * R(v)

``L_adver`` is the discriminator's cross entropy against the uniform domain
distribution (the encoder tries to make source and target features
indistinguishable) and ``R(v)`` is the graph regulariser
``1/2 sum_ij |v_i - v_j|^2 W_ij`` over a cosine p-nearest-neighbour graph
built from the raw inputs of the target batch.

Training alternates two steps: (A) update the discriminator alone to tell
the domains apart, (B) update encoder and head alone on the joint objective.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from . import numcore as nc
from .attnrnn import LOG_FLOOR, nll
from .encoder import Classifier, ConvEncoder, Discriminator, embed
from .numcore import Tensor

SOURCE, TARGET = 0, 1


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TransferConfig:
    alpha: float = 0.1
    beta: float = 0.01
    p: int = 5
    steps_per_phase: int = 1
    learning_rate: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")
        if self.p < 1:
            raise ValueError("p must be >= 1")


# --------------------------------------------------------------- loss terms

def joint_loss(probs, labels, adver, reg, cfg: TransferConfig) -> Tensor:
    """Mean ``-log p_label`` plus the weighted adversarial and manifold terms."""
    probs = nc.as_tensor(probs)
    if probs.ndim == 1:
        probs = nc.reshape(probs, (1, -1))
    ce = nc.mean(nll(probs, labels))
    return ce + cfg.alpha * nc.as_tensor(adver) + cfg.beta * nc.as_tensor(reg)


def domain_cross_entropy(q: Tensor, domains) -> Tensor:
    return nc.mean(nll(q, domains))


def confusion_loss(q: Tensor) -> Tensor:
    """Cross entropy of domain predictions against (1/2, 1/2)."""
    k = q.shape[-1]
    return nc.mean(nc.sum(nc.log(q, floor=LOG_FLOOR), axis=-1)) * (-1.0 / k)


def cosine_similarity(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    norm = np.linalg.norm(x, axis=1)
    safe = np.where(norm > 0, norm, 1.0)
    u = x / safe[:, None]
    s = u @ u.T
    zero = norm == 0
    s[zero, :] = 0.0
    s[:, zero] = 0.0
    return s


def build_knn_graph(x: np.ndarray, p: int) -> np.ndarray:
    """Symmetric weight matrix linking each row to its ``p`` most similar rows.

    Edges are the union over both directions; weights are cosine
    similarities clamped at zero.  Ties go to the lower index.
    """
    n = len(x)
    if n < p + 1:
        raise ValueError(f"need at least p+1={p + 1} samples, got {n}")
    s = cosine_similarity(x)
    cand = s.copy()
    np.fill_diagonal(cand, -np.inf)
    nbr = np.argsort(-cand, axis=1, kind="stable")[:, :p]
    adj = np.zeros((n, n), dtype=bool)
    adj[np.repeat(np.arange(n), p), nbr.ravel()] = True
    adj |= adj.T
    w = np.where(adj, np.maximum(s, 0.0), 0.0)
    np.fill_diagonal(w, 0.0)
    return w


def manifold_reg(v: Tensor, w: np.ndarray) -> Tensor:
    """``1/2 sum_ij |v_i - v_j|^2 W_ij``."""
    v = nc.as_tensor(v)
    n, d = v.shape
    diff = nc.reshape(v, (n, 1, d)) - nc.reshape(v, (1, n, d))
    dist = nc.sum(diff * diff, axis=2)
    return 0.5 * nc.sum(dist * np.asarray(w))


# --------------------------------------------------------------- source domain

def texture_to_input(img: np.ndarray) -> np.ndarray:
    """Central-difference gradient pair ``(d/dcol, d/drow)`` of ``(..., R, R)``."""
    img = np.asarray(img, dtype=np.float64)
    p = np.pad(img, [(0, 0)] * (img.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    return np.stack([gx, gy], axis=-1)


def random_texture(rng: np.random.Generator, r: int) -> np.ndarray:
    """One of: smoothed noise, linear ramp, soft ellipse; values in [0, 1]."""
    kind = rng.integers(3)
    rr, cc = np.mgrid[0:r, 0:r].astype(np.float64)
    if kind == 0:
        img = gaussian_filter(rng.normal(size=(r, r)), sigma=rng.uniform(1.0, 4.0), mode="wrap")
    elif kind == 1:
        th = rng.uniform(0, 2 * np.pi)
        img = np.cos(th) * cc + np.sin(th) * rr
    else:
        cy, cx = rng.uniform(0.25 * r, 0.75 * r, size=2)
        ay, ax = rng.uniform(0.1 * r, 0.35 * r, size=2)
        d = ((rr - cy) / ay) ** 2 + ((cc - cx) / ax) ** 2
        img = 1 / (1 + np.exp(4 * (d - 1)))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def source_batch(rng: np.random.Generator, n: int, r: int) -> np.ndarray:
    """``n`` procedural textures as ``(n, R, R, 2)`` gradient-pair inputs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    imgs = np.stack([random_texture(rng, r) for _ in range(n)])
    return texture_to_input(imgs).astype(np.float32)


def source_stream(seed: int, n: int, r: int) -> Iterator[np.ndarray]:
    rng = np.random.default_rng(seed)
    while True:
        yield source_batch(rng, n, r)


# --------------------------------------------------------------- two-step schedule

def _check(name: str, t: Tensor) -> None:
    if not np.isfinite(t.data).all():
        raise NonFiniteLoss(f"non-finite {name} term: {t.data}")


def _check_grads(name: str, params) -> None:
    # a clamped log can hide NaN inputs from the loss value, so guard the update itself
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NonFiniteLoss(f"non-finite {name} gradient")


def domain_accuracy(q: np.ndarray, domains: np.ndarray) -> float:
    return float(np.mean(np.argmax(q, axis=1) == domains))


def discriminator_step(disc: Discriminator, opt, v_src: np.ndarray, v_tgt: np.ndarray) -> tuple[float, float]:
    """Step A: one update of the discriminator on detached features."""
    v = Tensor(np.concatenate([v_src, v_tgt]))
    dom = np.r_[np.full(len(v_src), SOURCE), np.full(len(v_tgt), TARGET)]
    opt.zero_grad()
    q = disc(v)
    loss = domain_cross_entropy(q, dom)
    _check("discriminator", loss)
    nc.backward(loss)
    _check_grads("discriminator", disc.parameters())
    opt.step()
    opt.zero_grad()
    return loss.item(), domain_accuracy(q.data, dom)


@dataclass
class TransferTerms:
    total: Tensor
    ce: float
    adver: float
    reg: float


def encoder_objective(disc: Discriminator, head: Classifier, v_src: Tensor, v_tgt: Tensor,
                      labels, w: np.ndarray, cfg: TransferConfig) -> TransferTerms:
    """Step B objective: joint loss with domain confusion over both domains."""
    probs = head(v_tgt)
    ce = nc.mean(nll(probs, labels))
    adver = confusion_loss(disc(nc.concat([v_src, v_tgt], axis=0))) if cfg.alpha else Tensor(0.0)
    reg = manifold_reg(v_tgt, w) if cfg.beta else Tensor(0.0)
    for name, t in (("cross-entropy", ce), ("adversarial", adver), ("manifold", reg)):
        _check(name, t)
    total = ce + cfg.alpha * adver + cfg.beta * reg
    return TransferTerms(total, ce.item(), adver.item(), reg.item())


def trial_embedding(encoder: ConvEncoder, flows: Tensor) -> tuple[Tensor, Tensor]:
    """Grids ``(B, T, L, D)`` and embeddings ``(B, D)`` of flow sequences."""
    b, t = flows.shape[:2]
    feats = encoder(nc.reshape(flows, (b * t,) + flows.shape[2:]))
    grids = nc.reshape(feats, (b, t) + feats.shape[1:])
    return grids, embed(grids, axis=(1, 2))


@dataclass
class TwoStepTrace:
    rows: list[dict] = field(default_factory=list)


def make_optimizer(kind: str, params, lr: float):
    if kind == "sgd":
        return nc.SGD(params, lr)
    if kind == "adam":
        return nc.Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def train_two_step(encoder: ConvEncoder, head: Classifier, disc: Discriminator,
                   sources: Iterator[np.ndarray], flows: np.ndarray, labels: np.ndarray,
                   cfg: TransferConfig, epochs: int = 1, batch_size: int = 16, seed: int = 0,
                   extra: Callable | None = None, extra_params=(),
                   optimizer: str = "sgd", lr: float | None = None,
                   on_epoch: Callable | None = None) -> TwoStepTrace:
    """Alternate Step A / Step B over ``epochs`` passes of the target data.

    Step A updates only the discriminator (plain SGD at ``cfg.learning_rate``);
    Step B updates only the encoder, the class head and ``extra_params``.
    ``extra(grids, labels)`` adds a further term to the Step B loss, which is
    how the harness trains the attention decoder jointly.  ``on_epoch(epoch,
    rows)`` is called after every pass.
    """
    rng = np.random.default_rng(seed)
    opt_a = nc.SGD(disc.parameters(), cfg.learning_rate)
    opt_b = make_optimizer(optimizer, encoder.parameters() + head.parameters() + list(extra_params),
                           cfg.learning_rate if lr is None else lr)
    trace = TwoStepTrace()
    n = len(labels)
    if n < batch_size:
        raise ValueError(f"batch size {batch_size} exceeds {n} training samples")
    for epoch in range(epochs):
        order = rng.permutation(n)
        rows = []
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            x = Tensor(flows[idx])
            src = Tensor(next(sources))
            y = labels[idx]
            row = {"epoch": epoch}
            # Step A leaves the encoder untouched, so its features are shared with Step B
            grids, v_tgt = trial_embedding(encoder, x)
            v_src = embed(encoder(src))
            for _ in range(cfg.steps_per_phase):
                row["loss_a"], row["domain_acc"] = discriminator_step(disc, opt_a, v_src.data, v_tgt.data)
            w = build_knn_graph(flows[idx].reshape(len(idx), -1), min(cfg.p, len(idx) - 1))
            for step in range(cfg.steps_per_phase):
                if step:
                    grids, v_tgt = trial_embedding(encoder, x)
                    v_src = embed(encoder(src))
                terms = encoder_objective(disc, head, v_src, v_tgt, y, w, cfg)
                loss = terms.total
                if extra is not None:
                    loss = loss + extra(grids, y)
                _check("step B", loss)
                opt_b.zero_grad()
                nc.backward(loss)
                _check_grads("step B", opt_b.params)
                opt_b.step()
                opt_b.zero_grad()
                nc.parameters_zero_grad(disc.parameters())
                row.update(loss_b=loss.item(), ce=terms.ce, adver=terms.adver, reg=terms.reg)
            rows.append(row)
        trace.rows.extend(rows)
        if on_epoch is not None:
            on_epoch(epoch, rows)
    return trace

"""Finite-difference checks of every trainable component on toy shapes.

All checks run in float64 so that central differences at ``eps=1e-3``
resolve relative errors well below the 1e-3 tolerance.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .attnrnn import AttentionDecoder, soft_loss
from .encoder import Classifier, ConvEncoder, Discriminator, embed
from .numcore import Tensor
from .transfer import TransferConfig, build_knn_graph, confusion_loss, joint_loss, manifold_reg

TOLERANCE = 1e-3


def _encoder(rng):
    enc = ConvEncoder(rng, in_channels=2)
    x = Tensor(rng.normal(size=(2, 8, 8, 2)))

    def f():
        return nc.sum(nc.tanh(enc(x)))

    return f, enc.parameters()


def _soft_attention(rng):
    dec = AttentionDecoder(rng, feat_dim=4, hidden=5, att_dim=6, classes=3)
    grids = Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    w = rng.normal(size=(2, 3))

    def f():
        return nc.sum(dec(grids, "soft").probs * w)

    return f, dec.parameters() + [grids]


def _decoder_loss(rng):
    dec = AttentionDecoder(rng, feat_dim=4, hidden=5, att_dim=6, classes=3)
    grids = Tensor(rng.normal(size=(3, 3, 4, 4)), requires_grad=True)
    labels = np.array([0, 2, 1])

    def f():
        return soft_loss(dec(grids, "soft"), labels, lambda_ds=0.5)

    return f, dec.parameters() + [grids]


def _transfer_loss(rng):
    enc = ConvEncoder(rng, in_channels=2)
    head = Classifier(rng, enc.dim, 3)
    disc = Discriminator(rng, enc.dim, hidden=6)
    src = Tensor(rng.normal(size=(2, 8, 8, 2)))
    tgt = Tensor(rng.normal(size=(3, 8, 8, 2)))
    labels = np.array([1, 0, 2])
    cfg = TransferConfig(alpha=0.7, beta=0.3, p=1)
    w = build_knn_graph(tgt.data.reshape(3, -1), cfg.p)

    def f():
        v_s, v_t = embed(enc(src)), embed(enc(tgt))
        adver = confusion_loss(disc(nc.concat([v_s, v_t], axis=0)))
        return joint_loss(head(v_t), labels, adver, manifold_reg(v_t, w), cfg)

    return f, enc.parameters() + head.parameters() + disc.parameters()


def _manifold_term(rng):
    v = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = build_knn_graph(rng.normal(size=(6, 10)), 2)
    return (lambda: manifold_reg(v, w)), [v]


COMPONENTS = {
    "encoder": _encoder,
    "soft_attention": _soft_attention,
    "decoder_loss": _decoder_loss,
    "transfer_loss": _transfer_loss,
    "manifold_reg": _manifold_term,
}


def run_suite(seed: int = 0, eps: float = 1e-6, max_coords: int = 20) -> dict[str, float]:
    """Max relative error per component."""
    out = {}
    with nc.precision(np.float64):
        for i, (name, build) in enumerate(COMPONENTS.items()):
            rng = np.random.default_rng([seed, i])
            f, params = build(rng)
            out[name] = nc.grad_check(f, params, eps=eps, max_coords=max_coords, rng=rng,
                                       kink_retries=3, floor=1e-6)
    return out

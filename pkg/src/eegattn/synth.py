"""Synthetic multi-channel trials with a planted, moving active region.

Every class owns one scalp quadrant.  In a trial of class ``k`` the
electrodes of quadrant ``k % 4`` carry an oscillation whose spatial
envelope (a Gaussian bump on the projected scalp) drifts outward from the
vertex over the trial, so the topographic video moves inside that quadrant
and nowhere else.  All channels get white Gaussian noise on top.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .representation import ElectrodeLayout, Trial, project_layout

QUADRANT_NAMES = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class SynthConfig:
    classes: int = 4
    trials_per_class: int = 120
    channels: int = 64
    samples: int = 1664
    sample_rate: float = 128.0
    noise_std: float = 0.05
    seed: int = 0
    resolution: int = 32
    frequency: float = 10.0
    bump_width: float = 2.5      # pixels
    start_radius: float = 6.0    # pixels from the vertex
    end_radius: float = 12.0
    angle_jitter: float = 0.25   # radians around the quadrant diagonal
    distractors: int = 0         # weaker look-alike sources in other quadrants
    distractor_gain: float = 0.6

    def __post_init__(self):
        if self.trials_per_class < 10:
            raise ValueError("trials_per_class must be >= 10")
        if self.classes < 2:
            raise ValueError("need at least two classes")


def class_quadrant(label: int) -> int:
    return label % 4


def fibonacci_cap(n: int, z_min: float = 0.05) -> ElectrodeLayout:
    """``n`` roughly evenly spaced points on the cap ``z >= z_min``."""
    golden = np.pi * (3 - np.sqrt(5))
    i = np.arange(n)
    z = 1 - (i + 0.5) / n * (1 - z_min)
    r = np.sqrt(1 - z * z)
    phi = i * golden
    xyz = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    xyz /= np.linalg.norm(xyz, axis=1, keepdims=True)
    return ElectrodeLayout([f"E{j + 1:02d}" for j in range(n)], xyz)


def pixel_quadrant(rows: np.ndarray, cols: np.ndarray, resolution: int) -> np.ndarray:
    c = (resolution - 1) / 2
    return (np.asarray(rows) > c).astype(int) * 2 + (np.asarray(cols) > c).astype(int)


def quadrant_locations(quadrant: int, side: int = 8) -> np.ndarray:
    """Flat indices of the grid locations (``side x side``) in a quadrant."""
    rr, cc = np.mgrid[0:side, 0:side]
    q = (rr >= side // 2).astype(int) * 2 + (cc >= side // 2).astype(int)
    return np.flatnonzero(q.ravel() == quadrant)


def synth_dataset(cfg: SynthConfig):
    """Layout, trials (class-major order) and the planted quadrant per class."""
    layout = fibonacci_cap(cfg.channels)
    coords = project_layout(layout, cfg.resolution)
    elec_q = pixel_quadrant(coords[:, 0], coords[:, 1], cfg.resolution)
    centre = (cfg.resolution - 1) / 2
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(cfg.samples) / cfg.sample_rate
    trials = []
    for label in range(cfg.classes):
        q = class_quadrant(label)
        for _ in range(cfg.trials_per_class):
            env = _moving_bump(rng, cfg, coords, centre, q) * (elec_q == q)[:, None]
            others = rng.permutation([j for j in range(4) if j != q])[:cfg.distractors]
            for j in others:
                env = env + cfg.distractor_gain * _moving_bump(rng, cfg, coords, centre, j) * (elec_q == j)[:, None]
            phase = rng.uniform(0, 2 * np.pi, size=(cfg.channels, 1))
            x = env * np.sin(2 * np.pi * cfg.frequency * t + phase)
            if cfg.noise_std > 0:
                x = x + rng.normal(0.0, cfg.noise_std, size=x.shape)
            trials.append(Trial(x.astype(np.float32), label, cfg.sample_rate))
    regions = {k: class_quadrant(k) for k in range(cfg.classes)}
    return layout, trials, regions


def _moving_bump(rng, cfg: SynthConfig, coords: np.ndarray, centre: float, quadrant: int) -> np.ndarray:
    """Envelope ``(E, samples)`` of a bump drifting outward along a quadrant diagonal."""
    sr = 1.0 if quadrant >= 2 else -1.0
    sc = 1.0 if quadrant % 2 else -1.0
    ang = np.arctan2(sr, sc) + rng.uniform(-cfg.angle_jitter, cfg.angle_jitter)
    r0 = cfg.start_radius + rng.uniform(-1, 1)
    r1 = cfg.end_radius + rng.uniform(-1, 1)
    rad = r0 + (r1 - r0) * np.linspace(0.0, 1.0, cfg.samples)
    cr = centre + rad * np.sin(ang)
    cc = centre + rad * np.cos(ang)
    d2 = (coords[:, 0:1] - cr) ** 2 + (coords[:, 1:2] - cc) ** 2
    return np.exp(-d2 / (2 * cfg.bump_width ** 2))

"""Multi-channel trials -> topographic frames -> optical-flow sequences.

A trial is cut into ``F`` equal windows; each window gives one scalar per
electrode (mean absolute amplitude).  Electrodes are flattened onto the
image plane with an azimuthal equidistant projection from the vertex, the
scalars are spread over an ``R x R`` grid by inverse distance weighting, and
Horn-Schunck flow between consecutive frames yields ``F - 1`` two-channel
flow images.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRIAL_MAGIC = b"NFTR"
FLOW_MAGIC = b"NFFL"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """A data file is malformed or has an unsupported version."""


@dataclass
class ElectrodeLayout:
    names: list[str]
    xyz: np.ndarray  # (E, 3), unit sphere

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if len(self.names) != len(self.xyz):
            raise ValueError(f"layout has {len(self.names)} names but {len(self.xyz)} positions")
        if len(set(self.names)) != len(self.names):
            raise ValueError("electrode names must be unique")
        r = np.linalg.norm(self.xyz, axis=1)
        bad = np.flatnonzero(np.abs(r - 1) > 1e-6)
        if bad.size:
            raise ValueError(f"electrode {self.names[bad[0]]!r} is not on the unit sphere (|r|={r[bad[0]]:.6f})")

    @property
    def count(self) -> int:
        return len(self.names)


@dataclass
class Trial:
    samples: np.ndarray  # (channels, n_samples)
    label: int
    sample_rate: float = 128.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise ValueError(f"trial samples must be (channels, samples), got {self.samples.shape}")


@dataclass
class ReprConfig:
    frames: int = 13
    resolution: int = 32
    idw_power: float = 2.0
    smoothness: float = 0.1
    iterations: int = 100


@dataclass
class FlowSet:
    """A batch of flow sequences with labels, as stored in the flow cache."""
    flows: np.ndarray  # (N, T, R, R, 2) float32
    labels: np.ndarray  # (N,) int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


# --------------------------------------------------------------- geometry

def project_layout(layout: ElectrodeLayout, resolution: int) -> np.ndarray:
    """Pixel coordinates ``(row, col)`` of every electrode.

    Azimuthal equidistant projection centred on the vertex ``(0, 0, 1)``:
    the planar radius equals the great-circle angle from the vertex.  +x
    points to larger columns, +y to smaller rows.  The farthest electrode
    lands one pixel inside the border.
    """
    if resolution < 8:
        raise ValueError(f"resolution must be >= 8, got {resolution}")
    xyz = layout.xyz
    z = np.clip(xyz[:, 2], -1.0, 1.0)
    antipodal = np.flatnonzero(z <= -1 + 1e-9)
    if antipodal.size:
        raise ValueError(f"electrode {layout.names[antipodal[0]]!r} sits at the antipode; projection is singular")
    rho = np.arccos(z)
    phi = np.arctan2(xyz[:, 1], xyz[:, 0])
    rmax = rho.max()
    centre = (resolution - 1) / 2
    scale = (centre - 1) / rmax if rmax > 0 else 1.0
    col = centre + scale * rho * np.cos(phi)
    row = centre - scale * rho * np.sin(phi)
    return np.stack([row, col], axis=1)


# --------------------------------------------------------------- frames

def segment_trial(trial: Trial, frames: int) -> np.ndarray:
    """Per-window mean |amplitude|, min-max scaled over the trial.

    Returns ``(frames, channels)``.  Trailing samples that do not fill a
    window are dropped; a zero range maps to 0.5 everywhere.
    """
    x = trial.samples
    n = x.shape[1] // frames
    if n < 1:
        raise ValueError(f"trial has {x.shape[1]} samples, need at least {frames}")
    act = np.abs(x[:, :frames * n].astype(np.float64)).reshape(x.shape[0], frames, n).mean(axis=2).T
    lo, hi = act.min(), act.max()
    if hi - lo <= 0:
        return np.full_like(act, 0.5)
    return (act - lo) / (hi - lo)


def idw_weights(pixel_coords: np.ndarray, resolution: int, power: float = 2.0) -> np.ndarray:
    """Row-normalised IDW matrix of shape ``(R*R, E)``.

    A pixel within 1e-6 of an electrode copies that electrode exactly.
    """
    rr, cc = np.mgrid[0:resolution, 0:resolution]
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.float64)
    d = np.linalg.norm(grid[:, None, :] - pixel_coords[None, :, :], axis=2)
    hit = d < 1e-6
    w = np.zeros_like(d)
    exact = hit.any(axis=1)
    w[~exact] = 1.0 / d[~exact] ** power
    first_hit = hit.argmax(axis=1)
    w[exact, first_hit[exact]] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def interpolate_frame(activations: np.ndarray, pixel_coords: np.ndarray, resolution: int,
                      power: float = 2.0, weights: np.ndarray | None = None,
                      clamp: bool = True) -> np.ndarray:
    """Inverse-distance-weighted image of per-electrode scalars.

    ``activations`` may carry leading batch axes: ``(..., E)`` gives
    ``(..., R, R)``.
    """
    a = np.asarray(activations, dtype=np.float64)
    if a.shape[-1] != len(pixel_coords):
        raise ValueError(f"{a.shape[-1]} activations for {len(pixel_coords)} electrodes")
    if weights is None:
        weights = idw_weights(pixel_coords, resolution, power)
    img = (a @ weights.T).reshape(*a.shape[:-1], resolution, resolution)
    return np.clip(img, 0.0, 1.0) if clamp else img


# --------------------------------------------------------------- flow

_AVG = np.array([[1 / 12, 1 / 6, 1 / 12],
                 [1 / 6, 0.0, 1 / 6],
                 [1 / 12, 1 / 6, 1 / 12]])


def _neighbour_mean(f: np.ndarray) -> np.ndarray:
    p = np.pad(f, [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    h, w = f.shape[-2:]
    out = np.zeros_like(f)
    for i in range(3):
        for j in range(3):
            if _AVG[i, j]:
                out += _AVG[i, j] * p[..., i:i + h, j:j + w]
    return out


def _central_gradients(f: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(f, [(0, 0)] * (f.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    gx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / 2
    gy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / 2
    return gx, gy


def optical_flow(frame_a: np.ndarray, frame_b: np.ndarray, smoothness: float = 0.1,
                 iterations: int = 100) -> np.ndarray:
    """Horn-Schunck flow from ``frame_a`` to ``frame_b``.

    Returns ``(..., R, R, 2)`` with channel 0 = u (columns) and 1 = v (rows),
    in pixels per frame.  Leading batch axes are allowed.  ``smoothness``
    weights the squared flow gradient in the energy.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim < 2:
        raise ValueError(f"optical_flow: frame shapes differ: {a.shape} vs {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("optical_flow: non-finite input")
    ix, iy = _central_gradients((a + b) / 2)
    it = b - a
    denom = smoothness + ix * ix + iy * iy
    u = np.zeros_like(a)
    v = np.zeros_like(a)
    for _ in range(iterations):
        ub = _neighbour_mean(u)
        vb = _neighbour_mean(v)
        k = (ix * ub + iy * vb + it) / denom
        u = ub - ix * k
        v = vb - iy * k
    return np.stack([u, v], axis=-1)


def block_match(frame_a: np.ndarray, frame_b: np.ndarray, radius: int = 3,
                search: int = 3) -> np.ndarray:
    """Exhaustive integer block matching, ``(R, R, 2)`` displacements.

    Each pixel takes the shift ``(du, dv)`` that minimises the SSD between
    the ``(2*radius+1)^2`` patch around it in ``frame_a`` and the shifted
    patch in ``frame_b``.  Used as an independent reference for the
    Horn-Schunck solver.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    h, w = a.shape
    pad = radius + search
    ap = np.pad(a, pad, mode="edge")
    bp = np.pad(b, pad, mode="edge")
    best = np.full((h, w), np.inf)
    out = np.zeros((h, w, 2))
    k = 2 * radius + 1
    for dv in range(-search, search + 1):
        for du in range(-search, search + 1):
            diff = (bp[pad + dv - radius: pad + dv + radius + h, pad + du - radius: pad + du + radius + w]
                    - ap[pad - radius: pad + radius + h, pad - radius: pad + radius + w]) ** 2
            # box-sum of the squared difference over each patch
            c = np.cumsum(np.cumsum(np.pad(diff, ((1, 0), (1, 0))), 0), 1)
            ssd = c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
            better = ssd < best - 1e-12
            best = np.where(better, ssd, best)
            out[better] = (du, dv)
    return out


# --------------------------------------------------------------- pipeline

def trial_frames(trial: Trial, pixel_coords: np.ndarray, cfg: ReprConfig,
                 weights: np.ndarray | None = None) -> np.ndarray:
    act = segment_trial(trial, cfg.frames)
    return interpolate_frame(act, pixel_coords, cfg.resolution, cfg.idw_power, weights)


def build_sequence(trial: Trial, layout: ElectrodeLayout, cfg: ReprConfig | None = None,
                   pixel_coords: np.ndarray | None = None,
                   weights: np.ndarray | None = None) -> np.ndarray:
    """Flow sequence ``(F-1, R, R, 2)`` float32 for one trial."""
    cfg = cfg or ReprConfig()
    if trial.samples.shape[0] != layout.count:
        raise ValueError(f"trial has {trial.samples.shape[0]} channels, layout has {layout.count}")
    if pixel_coords is None:
        pixel_coords = project_layout(layout, cfg.resolution)
    video = trial_frames(trial, pixel_coords, cfg, weights)
    flow = optical_flow(video[:-1], video[1:], cfg.smoothness, cfg.iterations)
    return flow.astype(np.float32)


def build_flowset(trials: list[Trial], layout: ElectrodeLayout, cfg: ReprConfig | None = None) -> FlowSet:
    cfg = cfg or ReprConfig()
    coords = project_layout(layout, cfg.resolution)
    weights = idw_weights(coords, cfg.resolution, cfg.idw_power)
    flows = np.stack([build_sequence(t, layout, cfg, coords, weights) for t in trials])
    labels = np.array([t.label for t in trials], dtype=np.int64)
    return FlowSet(flows, labels)


# --------------------------------------------------------------- files

def read_layout(path) -> ElectrodeLayout:
    names, xyz = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected name,x,y,z")
        names.append(parts[0])
        xyz.append([float(v) for v in parts[1:]])
    return ElectrodeLayout(names, np.array(xyz))


def write_layout(layout: ElectrodeLayout, path) -> None:
    with open(path, "w") as fh:
        fh.write("# name,x,y,z (unit sphere, vertex at +z)\n")
        for name, (x, y, z) in zip(layout.names, layout.xyz):
            fh.write(f"{name},{float(x)!r},{float(y)!r},{float(z)!r}\n")


def write_trials(trials: list[Trial], path, classes: int) -> None:
    if not trials:
        raise ValueError("no trials to write")
    ch, ns = trials[0].samples.shape
    rate = int(round(trials[0].sample_rate))
    with open(path, "wb") as fh:
        fh.write(TRIAL_MAGIC)
        fh.write(struct.pack("<6I", FORMAT_VERSION, len(trials), ch, ns, classes, rate))
        for t in trials:
            if t.samples.shape != (ch, ns):
                raise ValueError(f"trial shape {t.samples.shape} differs from {(ch, ns)}")
            fh.write(struct.pack("<I", t.label))
            fh.write(np.ascontiguousarray(t.samples, dtype="<f4").tobytes())


def read_trials(path) -> tuple[list[Trial], int]:
    """Trials and the declared class count."""
    raw = Path(path).read_bytes()
    if raw[:4] != TRIAL_MAGIC:
        raise FormatError(f"{path}: not a trial dataset (bad magic)")
    version, count, ch, ns, classes, rate = struct.unpack_from("<6I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported trial format version {version}")
    rec = 4 + 4 * ch * ns
    if len(raw) != 28 + count * rec:
        raise FormatError(f"{path}: expected {28 + count * rec} bytes, found {len(raw)}")
    buf = io.BytesIO(raw[28:])
    trials = []
    for _ in range(count):
        (label,) = struct.unpack("<I", buf.read(4))
        if label >= classes:
            raise FormatError(f"{path}: label {label} >= class count {classes}")
        x = np.frombuffer(buf.read(4 * ch * ns), dtype="<f4").reshape(ch, ns).astype(np.float32)
        trials.append(Trial(x, int(label), float(rate)))
    return trials, classes


def write_flows(fs: FlowSet, path) -> None:
    n, t, r, r2, two = fs.flows.shape
    if r != r2 or two != 2:
        raise ValueError(f"flow array must be (N, T, R, R, 2), got {fs.flows.shape}")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<4I", FORMAT_VERSION, n, t, r))
        for label, f in zip(fs.labels, fs.flows):
            fh.write(struct.pack("<I", int(label)))
            fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_flows(path) -> FlowSet:
    raw = Path(path).read_bytes()
    if raw[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: not a flow cache (bad magic)")
    version, n, t, r = struct.unpack_from("<4I", raw, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported flow format version {version}")
    per = t * r * r * 2
    rec = 4 + 4 * per
    if len(raw) != 20 + n * rec:
        raise FormatError(f"{path}: expected {20 + n * rec} bytes, found {len(raw)}")
    rows = np.frombuffer(raw, dtype=np.uint8, offset=20).reshape(n, rec)
    labels = rows[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    flows = rows[:, 4:].copy().view("<f4").reshape(n, t, r, r, 2).astype(np.float32)
    return FlowSet(flows, labels)

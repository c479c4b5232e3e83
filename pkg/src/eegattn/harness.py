"""End-to-end training, evaluation and checkpoint persistence."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .attnrnn import AttentionDecoder, AttentionRecord, EMABaseline, attention_maps, hard_surrogate, soft_loss
from .encoder import Classifier, ConvEncoder, Discriminator, embed
from .numcore import Tensor
from .representation import FlowSet
from .synth import class_quadrant, quadrant_locations
from .transfer import (NonFiniteLoss, TransferConfig, domain_accuracy, source_batch, source_stream,
                       train_two_step, trial_embedding)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "train_loss", "test_acc", "domain_acc", "attn_quadrant_mass")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelDims:
    resolution: int = 32
    frames: int = 12
    classes: int = 4
    feat_dim: int = 32
    hidden: int = 64
    att_dim: int = 64
    disc_hidden: int = 32

    @property
    def locations(self) -> int:
        return (self.resolution // 4) ** 2


@dataclass
class RunConfig:
    mode: str = "soft"
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 0.002
    optimizer: str = "adam"
    alpha: float = 0.1
    beta: float = 0.01
    lambda_ds: float = 0.01
    p: int = 5
    transfer_lr: float = 0.01
    split: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.split < 1:
            raise ValueError(f"split fraction must be in (0, 1), got {self.split}")
        if self.mode not in ("soft", "hard", "mean"):
            raise ValueError(f"mode must be soft, hard or mean, got {self.mode!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def transfer(self) -> TransferConfig:
        return TransferConfig(self.alpha, self.beta, self.p, 1, self.transfer_lr)


class Model:
    """Encoder, class head, discriminator and attention decoder."""

    def __init__(self, dims: ModelDims, seed: int = 0):
        self.dims = dims
        rng = np.random.default_rng(seed)
        self.encoder = ConvEncoder(rng)
        self.head = Classifier(rng, self.encoder.dim, dims.classes)
        self.disc = Discriminator(rng, self.encoder.dim, dims.disc_hidden)
        self.decoder = AttentionDecoder(rng, self.encoder.dim, dims.hidden, dims.att_dim, dims.classes)

    def named_parameters(self) -> dict[str, Tensor]:
        return {
            **self.encoder.named_parameters("encoder."),
            **self.head.named_parameters("encoder.head."),
            **self.disc.named_parameters("encoder.discriminator."),
            **self.decoder.named_parameters("decoder."),
        }

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]

    def decode(self, flows: np.ndarray, mode: str, rng=None):
        grids, v = trial_embedding(self.encoder, Tensor(flows))
        return self.decoder(grids, mode, rng), v


@dataclass
class Checkpoint:
    model: Model
    manifest: dict = field(default_factory=dict)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]
    final: Checkpoint
    aborted: str | None = None


# --------------------------------------------------------------- data

def split(labels: np.ndarray, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded stratified shuffle; the last ``round(n * fraction)`` go to test.

    Each class is permuted on its own and the classes are interleaved by
    jittered rank, so any suffix of the order holds every class within one
    trial of its proportional share.
    """
    if not 0 < fraction < 1:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    key = np.empty(n)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        key[idx] = (np.arange(len(idx)) + rng.random(len(idx))) / len(idx)
    order = np.argsort(key, kind="stable")
    n_test = int(round(n * fraction))
    train, test = order[:n - n_test], order[n - n_test:]
    missing = set(np.unique(labels)) - set(np.unique(labels[train]))
    if missing:
        raise ValueError(f"class(es) {sorted(missing)} have no training samples")
    return train, test


def _subset(fs: FlowSet, idx) -> FlowSet:
    return FlowSet(fs.flows[idx], fs.labels[idx])


# --------------------------------------------------------------- evaluation

def predict(model: Model, flows: np.ndarray, mode: str, seed: int = 0, chunk: int = 32):
    """Class probabilities ``(N, K)``, attention ``(N, T, L)`` and embeddings."""
    rng = np.random.default_rng([seed, 1]) if mode == "hard" else None
    probs, alphas, embs = [], [], []
    with nc.no_grad():
        for s in range(0, len(flows), chunk):
            res, v = model.decode(flows[s:s + chunk], mode, rng)
            probs.append(res.probs.data)
            alphas.append(res.alpha_array())
            embs.append(v.data)
    return np.concatenate(probs), np.concatenate(alphas), np.concatenate(embs)


def quadrant_mass(alphas: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-trial mean (over frames) attention mass inside the planted quadrant."""
    side = int(round(np.sqrt(alphas.shape[-1])))
    out = np.empty(len(labels))
    for i, y in enumerate(labels):
        out[i] = alphas[i][:, quadrant_locations(class_quadrant(int(y)), side)].sum(axis=1).mean()
    return out


def per_class_quadrant_mass(alphas: np.ndarray, labels: np.ndarray, classes: int) -> np.ndarray:
    m = quadrant_mass(alphas, labels)
    return np.array([m[labels == k].mean() if np.any(labels == k) else np.nan for k in range(classes)])


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    probs: np.ndarray
    alphas: np.ndarray
    embeddings: np.ndarray


def evaluate(ckpt: Checkpoint | Model, fs: FlowSet, mode: str | None = None, seed: int | None = None) -> Evaluation:
    model = ckpt.model if isinstance(ckpt, Checkpoint) else ckpt
    manifest = ckpt.manifest if isinstance(ckpt, Checkpoint) else {}
    mode = mode or manifest.get("mode", "soft")
    seed = int(manifest.get("seed", 0)) if seed is None else seed
    d = model.dims
    _, t, r, _, _ = fs.flows.shape
    if (t, r) != (d.frames, d.resolution):
        raise ValueError(f"data has {t} frames at {r}x{r}, model expects {d.frames} at {d.resolution}x{d.resolution}")
    if len(fs) and fs.labels.max() >= d.classes:
        raise ValueError(f"data label {fs.labels.max()} exceeds model class count {d.classes}")
    probs, alphas, embs = predict(model, fs.flows, mode, seed)
    pred = probs.argmax(axis=1)
    conf = np.zeros((d.classes, d.classes), dtype=np.int64)
    np.add.at(conf, (fs.labels, pred), 1)
    acc = float(np.mean(pred == fs.labels)) if len(fs) else float("nan")
    return Evaluation(acc, conf, probs, alphas, embs)


def attention_record(model: Model, flows: np.ndarray, mode: str, seed: int = 0) -> AttentionRecord:
    rng = np.random.default_rng([seed, 2]) if mode == "hard" else None
    with nc.no_grad():
        res, _ = model.decode(flows[None], mode, rng)
    alphas = res.alpha_array()[0]
    return AttentionRecord(alphas, attention_maps(alphas, model.dims.resolution), res.probs.data[0],
                           None if res.sampled is None else res.sampled[0])


# --------------------------------------------------------------- training

def _manifest(dims: ModelDims, run: RunConfig) -> dict:
    m = {"format_version": CHECKPOINT_VERSION, "conv_widths": "16,16,32"}
    m.update(asdict(dims))
    m.update(asdict(run))
    return m


def train(run: RunConfig, fs: FlowSet, classes: int | None = None) -> TrainResult:
    """Train on a 1-``split`` shuffle of ``fs``; keep the best-test checkpoint."""
    _, t, r, _, _ = fs.flows.shape
    classes = classes or int(fs.labels.max()) + 1
    dims = ModelDims(resolution=r, frames=t, classes=classes)
    model = Model(dims, run.seed)
    manifest = _manifest(dims, run)
    tr_idx, te_idx = split(fs.labels, run.split, run.seed)
    train_fs, test_fs = _subset(fs, tr_idx), _subset(fs, te_idx)
    probe_src = source_batch(np.random.default_rng([run.seed, 3]), max(len(test_fs), 1), r)

    best = {"acc": -1.0, "state": model.state()}
    metrics: list[dict] = []
    episode_rng = np.random.default_rng([run.seed, 4])
    baseline = EMABaseline(0.9)

    def decoder_loss(grids, y):
        if run.mode == "hard":
            return hard_surrogate(model.decoder(grids, "hard", episode_rng), y, baseline)
        lam = run.lambda_ds if run.mode == "soft" else 0.0
        return soft_loss(model.decoder(grids, run.mode), y, lam)

    def on_epoch(epoch, rows):
        ev = evaluate(model, test_fs, run.mode, run.seed)
        with nc.no_grad():
            v_src = embed(model.encoder(Tensor(probe_src))).data
            q = model.disc(Tensor(np.concatenate([v_src, ev.embeddings]))).data
        dom = np.r_[np.zeros(len(v_src), int), np.ones(len(ev.embeddings), int)]
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean([x["loss_b"] for x in rows])),
            "test_acc": ev.accuracy,
            "domain_acc": domain_accuracy(q, dom),
            "attn_quadrant_mass": float(quadrant_mass(ev.alphas, test_fs.labels).mean()),
        }
        metrics.append(row)
        log.info("epoch %d loss %.4f test_acc %.3f domain_acc %.3f mass %.3f", row["epoch"], row["train_loss"],
                 row["test_acc"], row["domain_acc"], row["attn_quadrant_mass"])
        if ev.accuracy > best["acc"]:
            best["acc"] = ev.accuracy
            best["state"] = model.state()

    aborted = None
    if run.epochs:
        try:
            train_two_step(model.encoder, model.head, model.disc,
                           source_stream(int(np.random.default_rng([run.seed, 5]).integers(2**31)), run.batch_size, r),
                           train_fs.flows, train_fs.labels, run.transfer(), epochs=run.epochs,
                           batch_size=run.batch_size, seed=run.seed, extra=decoder_loss,
                           extra_params=model.decoder.parameters(), optimizer=run.optimizer,
                           lr=run.learning_rate, on_epoch=on_epoch)
        except NonFiniteLoss as exc:
            aborted = str(exc)
            log.error("training aborted: %s", exc)
    final = Checkpoint(model, dict(manifest))
    best_model = Model(dims, run.seed)
    best_model.load_state(best["state"])
    return TrainResult(Checkpoint(best_model, dict(manifest)), metrics, final, aborted)


def split_flowset(fs: FlowSet, run: RunConfig) -> tuple[FlowSet, FlowSet]:
    tr, te = split(fs.labels, run.split, run.seed)
    return _subset(fs, tr), _subset(fs, te)


# --------------------------------------------------------------- persistence

def write_metrics(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        for row in rows:
            vals = [str(int(row["epoch"]))] + [f"{row[k]:.6g}" for k in METRICS_HEADER[1:]]
            fh.write(",".join(vals) + "\n")


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, map(float, ln.split(",")))) for ln in lines[1:] if ln]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={v}" for k, v in ckpt.manifest.items()]
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    for name, p in ckpt.model.named_parameters().items():
        (path / f"{name}.bin").write_bytes(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _parse_manifest(path: Path) -> dict:
    out = {}
    for ln in path.read_text().splitlines():
        if ln.strip() and not ln.startswith("#"):
            k, _, v = ln.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.txt"
    if not mpath.is_file():
        raise CheckpointError(f"{mpath}: manifest not found")
    raw = _parse_manifest(mpath)
    version = raw.get("format_version")
    if version != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{mpath}: unsupported format_version {version!r}")
    dims = ModelDims(**{f.name: int(raw[f.name]) for f in fields(ModelDims)})
    manifest = {"format_version": CHECKPOINT_VERSION, **raw}
    model = Model(dims, int(raw.get("seed", 0)))
    for name, p in model.named_parameters().items():
        f = path / f"{name}.bin"
        if not f.is_file():
            raise CheckpointError(f"{f}: missing tensor file")
        data = f.read_bytes()
        want = 4 * p.size
        if len(data) != want:
            raise CheckpointError(f"{f}: expected {want} bytes for shape {p.shape}, found {len(data)}")
        p.data[...] = np.frombuffer(data, dtype="<f4").reshape(p.shape)
    return Checkpoint(model, manifest)


def initial_checkpoint(run: RunConfig, fs: FlowSet, classes: int | None = None) -> Checkpoint:
    _, t, r, _, _ = fs.flows.shape
    dims = ModelDims(resolution=r, frames=t, classes=classes or int(fs.labels.max()) + 1)
    return Checkpoint(Model(dims, run.seed), _manifest(dims, run))


def copy_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    return copy.deepcopy(ckpt)

"""``eegattn`` command line: synth, build-repr, train, eval, attend, gradcheck.

Exit status is 0 on success, 1 on a usage error and 2 when the command
itself fails (missing or malformed files, non-finite training loss, a
failed gradient check).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .representation import (FormatError, ReprConfig, build_flowset, read_flows, read_layout, read_trials,
                             write_flows, write_layout, write_trials)

TRIALS_FILE = "trials.nftr"
LAYOUT_FILE = "layout.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="eegattn", description="Attention over EEG optical-flow sequences.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic planted-quadrant dataset")
    p.add_argument("--out", required=True, help=f"output directory ({TRIALS_FILE} + {LAYOUT_FILE})")
    p.add_argument("--classes", type=int, default=4, help="number of classes K (default 4)")
    p.add_argument("--trials-per-class", type=int, default=120, help="trials per class (default 120)")
    p.add_argument("--noise-std", type=float, default=0.05, help="Gaussian channel noise (default 0.05)")
    _add_seed(p)

    p = sub.add_parser("build-repr", help="turn a dataset directory into an optical-flow cache")
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--out", required=True, help="flow cache file to write")
    p.add_argument("--frames", type=int, default=13, help="topographic frames per trial (default 13)")
    p.add_argument("--resolution", type=int, default=32, help="frame side in pixels (default 32)")
    _add_seed(p)

    p = sub.add_parser("train", help="train a model on a flow cache")
    p.add_argument("--data", required=True, help="flow cache file")
    p.add_argument("--mode", choices=("soft", "hard", "mean"), default="soft",
                   help="attention mode; 'mean' is the no-attention ablation (default soft)")
    p.add_argument("--out", required=True, help="checkpoint directory (best test accuracy)")
    p.add_argument("--metrics", required=True, help="per-epoch metrics CSV")
    p.add_argument("--epochs", type=int, default=20, help="training epochs (default 20)")
    p.add_argument("--batch-size", type=int, default=16, help="batch size (default 16)")
    p.add_argument("--lr", type=float, default=0.002, help="encoder/decoder learning rate (default 0.002)")
    p.add_argument("--alpha", type=float, default=0.1, help="weight of the adversarial term (default 0.1)")
    p.add_argument("--beta", type=float, default=0.01, help="weight of the manifold term (default 0.01)")
    p.add_argument("--lambda-ds", type=float, default=0.01, help="coverage penalty weight (default 0.01)")
    p.add_argument("--p", type=int, default=5, help="neighbours in the manifold graph (default 5)")
    p.add_argument("--split", type=float, default=0.1, help="held-out fraction (default 0.1)")
    p.add_argument("--plot", help="optional PNG of the training curves")
    _add_seed(p)

    p = sub.add_parser("eval", help="print held-out accuracy of a checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="flow cache file")
    p.add_argument("--all", action="store_true", help="score every trial, not just the held-out split")
    _add_seed(p)

    p = sub.add_parser("attend", help="export attention maps of one trial")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="flow cache file")
    p.add_argument("--trial", type=int, required=True, help="trial index in the cache")
    p.add_argument("--out", required=True, help="output directory for PGMs and alphas.csv")
    p.add_argument("--png", action="store_true", help="also render attention.png")
    _add_seed(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every component")
    _add_seed(p)
    return ap


# --------------------------------------------------------------- commands

def cmd_synth(a) -> int:
    from .synth import SynthConfig, synth_dataset

    cfg = SynthConfig(classes=a.classes, trials_per_class=a.trials_per_class, noise_std=a.noise_std, seed=a.seed)
    layout, trials, _ = synth_dataset(cfg)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trials(trials, out / TRIALS_FILE, cfg.classes)
    write_layout(layout, out / LAYOUT_FILE)
    print(f"wrote {len(trials)} trials, {cfg.classes} classes to {out}")
    return 0


def cmd_build_repr(a) -> int:
    data = Path(a.data)
    trials, _ = read_trials(data / TRIALS_FILE)
    layout = read_layout(data / LAYOUT_FILE)
    fs = build_flowset(trials, layout, ReprConfig(frames=a.frames, resolution=a.resolution))
    write_flows(fs, a.out)
    print(f"wrote {len(fs)} flow sequences of shape {fs.flows.shape[1:]} to {a.out}")
    return 0


def cmd_train(a) -> int:
    fs = read_flows(a.data)
    run = harness.RunConfig(mode=a.mode, epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr,
                            alpha=a.alpha, beta=a.beta, lambda_ds=a.lambda_ds, p=a.p, split=a.split, seed=a.seed)
    res = harness.train(run, fs)
    harness.save_checkpoint(res.checkpoint, a.out)
    harness.write_metrics(res.metrics, a.metrics)
    if a.plot:
        from .plotting import plot_metrics

        plot_metrics(res.metrics, a.plot)
    if res.aborted:
        print(f"training aborted: {res.aborted}", file=sys.stderr)
        return 2
    best = max((r["test_acc"] for r in res.metrics), default=float("nan"))
    print(f"best test accuracy {best:.4f}; checkpoint {a.out}")
    return 0


def cmd_eval(a) -> int:
    ckpt = harness.load_checkpoint(a.ckpt)
    fs = read_flows(a.data)
    if not a.all:
        run = harness.RunConfig(split=float(ckpt.manifest.get("split", 0.1)),
                                seed=int(ckpt.manifest.get("seed", 0)))
        _, fs = harness.split_flowset(fs, run)
    ev = harness.evaluate(ckpt, fs, seed=a.seed)
    print(f"accuracy {ev.accuracy:.4f} ({len(fs)} trials)")
    for k, row in enumerate(ev.confusion):
        print(f"class {k}: " + " ".join(str(int(v)) for v in row))
    return 0


def cmd_attend(a) -> int:
    ckpt = harness.load_checkpoint(a.ckpt)
    fs = read_flows(a.data)
    if not 0 <= a.trial < len(fs):
        raise IndexError(f"{a.data}: trial {a.trial} out of range (0..{len(fs) - 1})")
    mode = ckpt.manifest.get("mode", "soft")
    rec = harness.attention_record(ckpt.model, fs.flows[a.trial], mode, a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(rec.maps):
        write_pgm(out / f"attention_t{t + 1:02d}.pgm", m)
    with open(out / "alphas.csv", "w") as fh:
        fh.write("t,i,alpha\n")
        for t, row in enumerate(rec.alphas):
            for i, v in enumerate(row):
                fh.write(f"{t + 1},{i},{float(v)!r}\n")
    if a.png:
        from .plotting import plot_attention

        plot_attention(rec.maps, out / "attention.png",
                       f"trial {a.trial}: label {fs.labels[a.trial]}, predicted {rec.label}", fs.flows[a.trial])
    print(f"trial {a.trial}: label {fs.labels[a.trial]}, predicted {rec.label}; {len(rec.maps)} maps in {out}")
    return 0


def write_pgm(path, img: np.ndarray) -> None:
    """Binary PGM, grey level ``round(255 * x / max(x))``."""
    img = np.asarray(img, dtype=np.float64)
    top = img.max()
    g = np.zeros(img.shape, np.uint8) if top <= 0 else np.round(255 * img / top).astype(np.uint8)
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(g.tobytes())


def cmd_gradcheck(a) -> int:
    from .gradcheck import TOLERANCE, run_suite

    errors = run_suite(a.seed)
    for name, err in errors.items():
        print(f"{name:16s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    return 0 if all(e < TOLERANCE for e in errors.values()) else 2


COMMANDS = {
    "synth": cmd_synth,
    "build-repr": cmd_build_repr,
    "train": cmd_train,
    "eval": cmd_eval,
    "attend": cmd_attend,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (OSError, FormatError, harness.CheckpointError, ValueError, IndexError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

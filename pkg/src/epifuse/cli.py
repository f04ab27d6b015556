"""Command-line driver: ``epifuse {gen-data,train,eval,compare}``.

Failures exit nonzero and print one JSON object ``{"error": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointMissing, ConfigInvalid, DatasetMissing, EpifuseError
from .experiment import (
    dataset_spec,
    eval_indices,
    evaluate,
    load_config,
    train_indices,
    train_weights,
    validate_config,
)
from .metrics import buckets_to_csv, reports_to_csv
from .synthdata import DatasetReader, write_dataset
from .weightnet import WeightNetParams

EXIT_CODES = {"ConfigInvalid": 2, "DatasetMissing": 3, "CheckpointMissing": 4}


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def loss_curve_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("step", "loss"))
    for i, v in enumerate(losses):
        w.writerow((i, repr(float(v))))
    return buf.getvalue()


# ------------------------------------------------------------------ plots


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        raise ConfigInvalid("plots=true needs matplotlib (pip install 'artifact[plots]')") from None
    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "epifuse"
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curve(losses, path: Path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(np.arange(len(losses)), losses)
    ax.set_xlabel("step")
    ax.set_ylabel("minibatch loss")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_buckets(reports, path: Path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in reports:
        ks = sorted(r.buckets)
        ax.plot(ks, [r.buckets[k]["mpjpe"] for k in ks], marker="o", label=r.method)
    ax.set_xlabel("occluded views")
    ax.set_ylabel("MPJPE (mm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------------- commands


def _out_dir(cfg: dict) -> Path:
    return Path(cfg["output_dir"])


def _open_dataset(path: Path) -> DatasetReader:
    if not (path / "manifest.json").is_file():
        raise DatasetMissing(f"no dataset at {path}")
    return DatasetReader(path)


def _load_checkpoint(path: Path) -> WeightNetParams:
    if not (path / "weights.json").is_file():
        raise CheckpointMissing(f"no checkpoint at {path}")
    return WeightNetParams.load(path)


def cmd_gen_data(cfg: dict) -> Path:
    """Write the configured dataset to ``<output_dir>/dataset``."""
    out = _out_dir(cfg) / "dataset"
    write_dataset(out, dataset_spec(cfg))
    return out


def cmd_train(cfg: dict, dataset: Path) -> Path:
    """Train on the first ``train.num_samples`` training samples; writes checkpoint and loss curve."""
    reader = _open_dataset(dataset)
    out = _out_dir(cfg)
    idx = reader.split()[0][: cfg["train"]["num_samples"]]
    if len(idx) == 0:
        raise ConfigInvalid("the dataset has no training samples")
    params, losses = train_weights(cfg, reader.spec, reader.iter_samples(idx))
    params.save(out / "checkpoint")
    _write(out / "loss_curve.csv", loss_curve_csv(losses))
    if cfg["plots"]:
        plot_loss_curve(losses, out / "loss_curve.svg")
    return out / "checkpoint"


def cmd_eval(cfg: dict, dataset: Path, checkpoint: Optional[Path]) -> list[Path]:
    """Evaluate every configured method on the validation split; one report per method."""
    reader = _open_dataset(dataset)
    params = None
    if "adafuse" in cfg["methods"]:
        if checkpoint is None:
            raise CheckpointMissing("evaluating adafuse needs a checkpoint")
        params = _load_checkpoint(checkpoint)
    idx = eval_indices(cfg, reader.spec)
    if len(idx) == 0:
        raise ConfigInvalid("the dataset has no validation samples")
    ev = evaluate(cfg, reader.spec, reader.iter_samples(idx), params)
    out = _out_dir(cfg) / "reports"
    paths = []
    for m, r in ev.reports.items():
        _write(out / f"{m}.json", r.to_json())
        _write(out / f"{m}.csv", reports_to_csv([r]))
        paths += [out / f"{m}.json", out / f"{m}.csv"]
    _write(out / "weights.json", _dumps(ev.weight_stats))
    return paths


def cmd_compare(cfg: dict) -> Path:
    """Generate, train and evaluate in one streaming pass; writes the consolidated tables."""
    spec = dataset_spec(cfg)
    out = _out_dir(cfg)
    params, losses = None, None
    if "adafuse" in cfg["methods"]:
        params, losses = train_weights(cfg, spec, spec.iter_samples(train_indices(cfg, spec)))
        _write(out / "loss_curve.csv", loss_curve_csv(losses))
    ev = evaluate(cfg, spec, spec.iter_samples(eval_indices(cfg, spec)), params)
    reports = list(ev.reports.values())
    _write(out / "compare.csv", reports_to_csv(reports))
    _write(out / "compare_buckets.csv", buckets_to_csv(reports))
    doc = ev.to_dict()
    doc["config"] = cfg
    if losses is not None:
        doc["training"] = {"initial_loss": float(losses[0]), "final_loss": float(losses[-1]), "steps": len(losses)} if len(losses) else {"steps": 0}
    _write(out / "compare.json", _dumps(doc))
    if cfg["plots"]:
        if losses is not None and len(losses):
            plot_loss_curve(losses, out / "loss_curve.svg")
        plot_buckets(reports, out / "buckets.svg")
    return out / "compare.csv"


# -------------------------------------------------------------------- main


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="epifuse", description="Multiview epipolar heatmap fusion experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval", "compare"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON experiment config (defaults apply to missing keys)")
        s.add_argument("--out", help="output directory (overrides output_dir)")
        s.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
        s.add_argument("--methods", help="comma-separated subset of nofuse,heuristic,score,ransac,adafuse")
        s.add_argument("--ransac-threshold", type=float, help="RANSAC inlier threshold in image pixels")
        if name in ("train", "eval"):
            s.add_argument("--dataset", help="dataset directory (default <out>/dataset)")
        if name == "eval":
            s.add_argument("--checkpoint", help="weight-network checkpoint (default <out>/checkpoint)")
    return p


def _apply_overrides(cfg: dict, args) -> dict:
    cfg = dict(cfg)
    if args.out is not None:
        cfg["output_dir"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.methods is not None:
        cfg["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.ransac_threshold is not None:
        cfg["ransac"] = dict(cfg["ransac"], threshold=args.ransac_threshold)
    return validate_config(cfg)


def _set_threads():
    raw = os.environ.get("EPIFUSE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigInvalid(f"EPIFUSE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigInvalid("EPIFUSE_THREADS must be non-negative")
    if n > 0:
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        _set_threads()
        cfg = _apply_overrides(load_config(args.config), args)
        out = _out_dir(cfg)
        if args.command == "gen-data":
            result = [cmd_gen_data(cfg)]
        elif args.command == "train":
            result = [cmd_train(cfg, Path(args.dataset) if args.dataset else out / "dataset")]
        elif args.command == "eval":
            ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint"
            result = cmd_eval(cfg, Path(args.dataset) if args.dataset else out / "dataset", ckpt)
        else:
            result = [cmd_compare(cfg)]
    except EpifuseError as e:
        sys.stderr.write(json.dumps({"error": e.code, "message": str(e)}) + "\n")
        return EXIT_CODES.get(e.code, 1)
    for path in result:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())

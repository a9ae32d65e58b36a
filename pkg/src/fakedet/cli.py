"""Command-line pipeline: synth, split, train, evaluate, predict, report.

Exit codes: 0 success, 2 usage or configuration error, 3 training
divergence (non-finite loss), 4 checkpoint error.

Every command is deterministic under its ``--seed``: one master seed is
expanded into the named sub-seeds (split, init, shuffle, augment,
dropout) via numpy's SeedSequence, so artifacts (manifests, curves CSVs,
checkpoints, SVG plots) are byte-identical across reruns. The seconds
column of curves.csv is written as 0.000 for the same reason; measured
epoch times go to stdout only.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import metrics as X
from . import models as M
from . import optim as O
from . import tensor as tt

SUB_SEED_NAMES = ("split", "init", "shuffle", "augment", "dropout")

_AUGMENT_KINDS = ("none", "basic", "rand_augment", "auto_lite", "combined")

_TRAIN_DEFAULTS = {
    "model": "dfcnet",
    "scale": "desk",
    "data": None,
    "manifest": None,
    "out": None,
    "epochs": 20,
    "batch_size": 16,
    "lr": 1e-3,
    "augment": "none",
    "seed": 0,
}
_TRAIN_TYPES = {"epochs": int, "batch_size": int, "lr": float, "seed": int}


class UsageError(Exception):
    pass


def sub_seeds(master: int) -> dict[str, int]:
    state = np.random.SeedSequence(master).generate_state(len(SUB_SEED_NAMES))
    return {name: int(v) for name, v in zip(SUB_SEED_NAMES, state)}


def read_config_file(path) -> dict[str, str]:
    """Flat `key = value` lines; blank lines and # comments ignored."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    for i, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{i}: expected `key = value`, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _TRAIN_DEFAULTS:
            raise UsageError(f"{path}:{i}: unknown key {key!r}")
        values[key] = value
    return values


# ---- synth ---------------------------------------------------------------


def cmd_synth(args) -> int:
    index = D.synth_dataset(args.out, n_per_class=args.n, size=args.size,
                            noise_level=args.noise, seed=args.seed)
    for name, label in sorted(D.LABEL_NAMES.items(), key=lambda kv: kv[1]):
        count = sum(1 for r in index.records if r.label == label)
        print(f"{name}: {count} images")
    print(f"wrote {len(index.records)} images under {args.out}")
    return 0


# ---- split ---------------------------------------------------------------


def _parse_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(v) for v in text.split(","))
    except ValueError as e:
        raise UsageError(f"bad fractions {text!r}: {e}") from e
    if len(parts) != 3:
        raise UsageError(f"fractions need three comma-separated values, got {text!r}")
    return parts


def cmd_split(args) -> int:
    fractions = _parse_fractions(args.fractions)
    index = D.scan_directory(args.data)
    split = D.split_dataset(index, fractions, seed=sub_seeds(args.seed)["split"])
    out = Path(args.out) if args.out else Path(args.data) / "manifest.tsv"
    D.write_manifest(split, out)
    for split_name in D.SPLIT_NAMES:
        per_class = {name: sum(1 for r in split.subset(split_name) if r.label == label)
                     for name, label in D.LABEL_NAMES.items()}
        total = sum(per_class.values())
        detail = ", ".join(f"{name}={n}" for name, n in sorted(per_class.items()))
        print(f"{split_name}: {total} ({detail})")
    print(f"wrote manifest {out}")
    return 0


# ---- train ---------------------------------------------------------------


def _merge_train_config(args) -> dict:
    merged = dict(_TRAIN_DEFAULTS)
    if args.config:
        for key, raw in read_config_file(args.config).items():
            caster = _TRAIN_TYPES.get(key, str)
            try:
                merged[key] = caster(raw)
            except ValueError as e:
                raise UsageError(f"config key {key}: {e}") from e
    for key in _TRAIN_DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    if merged["data"] is None:
        raise UsageError("--data is required (flag or config file)")
    if merged["out"] is None:
        raise UsageError("--out is required (flag or config file)")
    if merged["model"] not in M._KINDS:
        raise UsageError(f"unknown model {merged['model']!r}")
    if merged["scale"] not in M._SCALES:
        raise UsageError(f"unknown scale {merged['scale']!r}")
    if merged["augment"] not in _AUGMENT_KINDS:
        raise UsageError(f"unknown augment policy {merged['augment']!r}")
    if merged["epochs"] < 0 or merged["batch_size"] < 1 or merged["lr"] <= 0:
        raise UsageError("epochs must be >= 0, batch size >= 1, lr > 0")
    data_root = Path(merged["data"])
    if not data_root.is_dir():
        raise UsageError(f"dataset root {data_root} is not a directory")
    merged["manifest"] = Path(merged["manifest"]) if merged["manifest"] \
        else data_root / "manifest.tsv"
    if not Path(merged["manifest"]).is_file():
        raise UsageError(f"manifest {merged['manifest']} not found; run `split` first")
    return merged


def cmd_train(args) -> int:
    cfg = _merge_train_config(args)
    seeds = sub_seeds(cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)

    model_cfg = M.ModelConfig.default(cfg["model"], cfg["scale"])
    target = model_cfg.input_size[:2]
    index = D.read_manifest(cfg["manifest"], cfg["data"])
    model = M.build_model(model_cfg, seed=seeds["init"])
    adam = O.AdamState.init(model.parameters(), lr=cfg["lr"])
    policy = None if cfg["augment"] == "none" else D.AugmentPolicy(kind=cfg["augment"])

    def train_stream(epoch):
        batches = D.load_batch(index, "train", cfg["batch_size"], target,
                               shuffle_seed=seeds["shuffle"] + epoch)
        if policy is None:
            return batches
        epoch_policy = replace(policy, seed=seeds["augment"] + epoch)
        return (D.augment(b, epoch_policy) for b in batches)

    def val_stream():
        return D.load_batch(index, "val", cfg["batch_size"], target)

    def hook(r: O.TrainRecord):
        print(f"epoch {r.epoch}/{cfg['epochs']}  "
              f"train_acc={100 * r.train_acc:.2f}% loss={r.train_loss:.4f}  "
              f"val_acc={100 * r.val_acc:.2f}% loss={r.val_loss:.4f}  "
              f"({r.seconds:.1f}s)")

    start = time.perf_counter()
    records, best = O.fit(model, train_stream, val_stream, cfg["epochs"], adam,
                          dropout_seed=seeds["dropout"], hook=hook)
    # zeroed wall time keeps reruns byte-identical; real times were printed
    O.write_curves(out / "curves.csv", [replace(r, seconds=0.0) for r in records])

    final_state = M.snapshot_state(model)
    if best is not None:
        M.restore_state(model, best)
    M.save_checkpoint(model, out / "best.ckpt")
    M.restore_state(model, final_state)
    M.save_checkpoint(model, out / "final.ckpt")

    if records:
        last = records[-1]
        print(f"{cfg['model']}  train_acc={100 * last.train_acc:.2f}% "
              f"train_loss={last.train_loss:.4f}  val_acc={100 * last.val_acc:.2f}% "
              f"val_loss={last.val_loss:.4f}  (best epoch {best['epoch']})")
    else:
        print(f"{cfg['model']}  0 epochs requested; wrote the initialized model")
    print(f"artifacts in {out}  ({time.perf_counter() - start:.1f}s)")
    return 0


# ---- evaluate ------------------------------------------------------------


def cmd_evaluate(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    index = D.read_manifest(args.manifest or Path(args.data) / "manifest.tsv", args.data)
    target = model.config.input_size[:2]
    probs, labels = [], []
    with tt.no_grad():
        for batch in D.load_batch(index, args.split, args.batch_size, target):
            probs.append(model.forward(batch.images).data[:, 0])
            labels.append(batch.labels.data)
    cm = X.confusion(np.concatenate(probs), np.concatenate(labels))
    rep = X.report(cm)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    X.write_metrics_csv(out / "metrics.csv", [(model.config.kind, rep)])
    X.write_confusion_csv(out / "confusion.csv", cm)

    print(f"{model.config.kind} on split {args.split!r} ({cm.total} images)")
    print(f"accuracy={100 * rep.accuracy:.2f}%  precision={100 * rep.precision:.2f}%  "
          f"recall={100 * rep.recall:.2f}%  f1={100 * rep.f1:.2f}%")
    if rep.degenerate:
        print(f"degenerate (reported as 0): {', '.join(sorted(rep.degenerate))}")
    print(X.format_confusion(cm))
    print(f"wrote {out / 'metrics.csv'} and {out / 'confusion.csv'}")
    return 0


# ---- predict -------------------------------------------------------------


def cmd_predict(args) -> int:
    model = M.load_checkpoint(args.checkpoint)
    target = model.config.input_size[:2]
    succeeded = 0
    for path in args.images:
        try:
            image = D.load_image(path, target)
        except D.DataError as e:
            print(f"{path}: {e}", file=sys.stderr)
            continue
        with tt.no_grad():
            p_fake = float(model.forward(tt.Tensor(image[None])).data[0, 0])
        verdict = "fake" if p_fake >= 0.5 else "real"
        print(f"{path}, {verdict}, {100 * p_fake:.2f}%, {100 * (1 - p_fake):.2f}%")
        succeeded += 1
    return 0 if succeeded else 2


# ---- report --------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _svg_plot(path, title: str, ylabel: str, series: list[tuple[str, list, list]]) -> None:
    """Minimal deterministic line plot; fixed 640x440 canvas, no
    timestamps or external references."""
    width, height = 640, 440
    ml, mr, mt, mb = 60, 20, 40, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    x_lo, x_hi = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    y_lo, y_hi = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x):
        return ml + pw * (x - x_lo) / (x_hi - x_lo)

    def py(y):
        return mt + ph * (1.0 - (y - y_lo) / (y_hi - y_lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{title}</text>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {mt + ph / 2:.1f})">{ylabel}</text>',
        f'<text x="{ml + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">epoch</text>',
    ]
    for k in range(5):
        frac = k / 4.0
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<line x1="{px(xv):.2f}" y1="{mt + ph}" x2="{px(xv):.2f}" '
                     f'y2="{mt + ph + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(xv):.2f}" y="{mt + ph + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{xv:.4g}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{py(yv):.2f}" x2="{ml}" '
                     f'y2="{py(yv):.2f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(yv) + 4:.2f}" text-anchor="end" '
                     f'font-family="sans-serif" font-size="11">{yv:.4g}</text>')
    for i, (name, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        if xs:
            points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
            parts.append(f'<polyline points="{points}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 14 + 16 * i
        parts.append(f'<rect x="{ml + pw - 130}" y="{ly - 9}" width="10" height="10" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{ml + pw - 115}" y="{ly}" font-family="sans-serif" '
                     f'font-size="12">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in args.curves or []:
        if "=" not in entry:
            raise UsageError(f"--curves needs NAME=PATH, got {entry!r}")
        name, path = entry.split("=", 1)
        try:
            records = O.read_curves(path)
        except (OSError, ValueError) as e:
            raise UsageError(str(e)) from e
        if not records:
            print(f"warning: {path} has no data rows; plotting empty axes",
                  file=sys.stderr)
        epochs = [r.epoch for r in records]
        _svg_plot(out / f"{name}_accuracy.svg", f"{name} accuracy", "accuracy",
                  [("train", epochs, [r.train_acc for r in records]),
                   ("validation", epochs, [r.val_acc for r in records])])
        _svg_plot(out / f"{name}_loss.svg", f"{name} loss", "loss",
                  [("train", epochs, [r.train_loss for r in records]),
                   ("validation", epochs, [r.val_loss for r in records])])
        print(f"wrote {name}_accuracy.svg and {name}_loss.svg")

    rows = []
    for path in args.metrics or []:
        try:
            with open(path, "r", encoding="utf-8") as f:
                reader = csv.reader(f)
                header = tuple(next(reader, ()))
                if header != X.METRICS_HEADER:
                    raise UsageError(f"{path}: expected header {','.join(X.METRICS_HEADER)}")
                for row in reader:
                    if len(row) != len(X.METRICS_HEADER):
                        raise UsageError(f"{path}: malformed row {row!r}")
                    rows.append(row)
        except OSError as e:
            raise UsageError(str(e)) from e
    if rows:
        widths = [max(len(X.METRICS_HEADER[i]), max(len(r[i]) for r in rows))
                  for i in range(len(X.METRICS_HEADER))]
        lines = ["  ".join(h.ljust(w) for h, w in zip(X.METRICS_HEADER, widths))]
        for r in rows:
            lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
        table = "\n".join(lines) + "\n"
        (out / "summary.txt").write_text(table, encoding="utf-8")
        print(table, end="")
        print(f"wrote {out / 'summary.txt'}")
    return 0


# ---- argument parsing ----------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fakedet",
        description="Train and evaluate fake-image classifiers on image folders.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic real/fake dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=200, help="images per class")
    p.add_argument("--size", type=int, default=32, help="square image size in pixels")
    p.add_argument("--noise", type=float, default=0.05, help="Gaussian noise level")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a stratified train/val/test manifest")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--fractions", default="0.70,0.15,0.15")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="manifest path (default <data>/manifest.tsv)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model from a split manifest")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data")
    p.add_argument("--manifest")
    p.add_argument("--out")
    p.add_argument("--model", choices=M._KINDS)
    p.add_argument("--scale", choices=M._SCALES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--augment", choices=_AUGMENT_KINDS)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics for a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--split", choices=D.SPLIT_NAMES, default="test")
    p.add_argument("--batch-size", type=int, dest="batch_size", default=16)
    p.add_argument("--out", help="default: checkpoint's directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify individual images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+", help="image files to classify")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="render curve SVGs and a metrics summary")
    p.add_argument("--curves", action="append", metavar="NAME=PATH",
                   help="curves CSV to plot, repeatable")
    p.add_argument("--metrics", action="append", metavar="PATH",
                   help="metrics CSV to summarize, repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (UsageError, D.DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except O.TrainingDivergence as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except M.CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

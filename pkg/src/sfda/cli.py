"""Command-line entry points: gen-data, pretrain, adapt, eval, plot.

Exit codes: 0 success, 1 training gate not met, 2 usage or input error,
3 numerical abort. Default output locations live under ``$SFDA_OUTPUT_ROOT``
(``./sfda_out`` when unset).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_GATE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
ENV_ROOT = "SFDA_OUTPUT_ROOT"
RUN_RECORD = "run_record.json"

log = logging.getLogger("sfda")


class InputError(Exception):
    """Bad or missing user input; reported with exit code 2."""


def output_root() -> Path:
    return Path(os.environ.get(ENV_ROOT, "sfda_out"))


def _manifest(path: str | os.PathLike):
    from .dataset import DatasetManifest

    path = Path(path)
    if not (path / "manifest.json").exists() and not (path.is_file() and path.name == "manifest.json"):
        raise InputError(f"no dataset manifest at {path}")
    return DatasetManifest.load(path)


def _checkpoint(path: str | os.PathLike):
    from .models import load_checkpoint

    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


# --- gen-data -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .dataset import SHIFT_PRESETS, build_domain_pair

    if args.classes < 2 or args.size <= 0 or args.n_train < 0 or args.n_test < 0:
        raise InputError("need --classes >= 2, --size > 0 and non-negative split sizes")
    out = Path(args.out) if args.out else output_root() / "data"
    try:
        mans = build_domain_pair(
            out, args.classes, args.size, args.n_train, args.n_test, args.seed,
            SHIFT_PRESETS[args.shift], force=args.force,
        )
    except FileExistsError as exc:
        raise InputError(f"{exc}") from exc
    for name, man in mans.items():
        print(f"{name}: {man.split_dir / 'manifest.json'} ({man.count} samples)")
    return EXIT_OK


# --- pretrain -------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .adapt import GateError, PretrainConfig, pretrain_source

    data = Path(args.data)
    train, test = _manifest(data / "source_train"), _manifest(data / "source_test")
    cfg = PretrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed, min_miou=args.min_miou
    )
    out = Path(args.out) if args.out else output_root() / "source_model"
    try:
        _, scores = pretrain_source(train, test, cfg, out)
    except GateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    print(f"source-test mIoU {scores.miou:.4f}")
    print(f"checkpoint: {out}")
    return EXIT_OK


# --- adapt ----------------------------------------------------------------

_FLAG_FIELDS = {
    "no_ipsm": ("use_ipsm", False),
    "no_bns": ("use_bns", False),
    "no_dad": ("use_dad", False),
    "transfer_only": ("transfer_only", True),
}
_VALUE_FIELDS = (
    "alpha", "beta", "tau", "gamma", "K", "batch_size", "fake_batch", "epochs", "iters_per_epoch",
    "seg_lr", "gen_lr", "disc_lr", "seed",
)


def build_adapt_config(args):
    from .adapt import AdaptConfig

    base = AdaptConfig.load(args.config) if args.config else AdaptConfig()
    updates = {}
    for name in _VALUE_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            updates[name] = value
    for flag, (name, value) in _FLAG_FIELDS.items():
        if getattr(args, flag):
            updates[name] = value
    for item in args.set or []:
        if "=" not in item:
            raise InputError(f"--set expects key=value, got {item!r}")
        text = base.to_text() + item + "\n"
        base = AdaptConfig.from_text(text)
    return dataclasses.replace(base, **updates)


def cmd_adapt(args) -> int:
    from .adapt import NumericalAbort, run_adaptation
    from .dataset import SOURCE

    if args.source_data:
        raise InputError("source-free mode forbids source data")
    target_train = _manifest(args.target_train)
    target_test = _manifest(args.target_test) if args.target_test else None
    for man in (target_train, target_test):
        if man is not None and man.spec.domain_id == SOURCE:
            raise InputError(f"source-free mode forbids source data ({man.split_dir} is a source split)")
    try:
        config = build_adapt_config(args)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    source, _ = _checkpoint(args.source_ckpt)

    run_id = args.run_id or time.strftime("run-%Y%m%d-%H%M%S")
    out = Path(args.out) if args.out else output_root() / "runs" / run_id
    if (out / RUN_RECORD).exists() and not (args.force or args.resume):
        raise InputError(f"{out} already holds a finished run; pass --force or --resume")
    try:
        result = run_adaptation(config, source, target_train, target_test, out, resume=args.resume)
    except NumericalAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    record = {
        "run_id": run_id,
        "config": dataclasses.asdict(config),
        "source_checkpoint": str(Path(args.source_ckpt).resolve()),
        "target_train": str(target_train.split_dir.resolve()),
        "target_test": str(target_test.split_dir.resolve()) if target_test else None,
        "history": "history.csv",
        "checkpoints": {
            name: name for name in ("last", "best", "generator", "discriminator") if (out / name).exists()
        },
        "config_file": "config.txt",
        "best_miou": result.best_miou,
    }
    (out / RUN_RECORD).write_text(json.dumps(record, indent=2))
    final = [r["miou"] for r in result.history if "miou" in r]
    if final:
        print(f"final target mIoU {final[-1]:.4f} (best {result.best_miou:.4f})")
    print(f"run record: {out / RUN_RECORD}")
    return EXIT_OK


# --- eval -----------------------------------------------------------------


def cmd_eval(args) -> int:
    from .adapt import evaluate
    from .dataset import load_split
    from .metrics import write_iou_table

    models = [(Path(p), _checkpoint(p)[0]) for p in args.ckpt]
    names = args.name or [p.name if p.name not in ("best", "last") else f"{p.parent.name}/{p.name}" for p, _ in models]
    if len(names) != len(models):
        raise InputError("--name must be given once per --ckpt")
    man = _manifest(args.data)
    x, y = load_split(man)
    if len(x) == 0:
        raise InputError(f"{man.split_dir} is empty")
    C = man.spec.num_classes
    rows = {}
    for name, (_, model) in zip(names, models):
        if model.num_classes != C:
            raise InputError(f"{name} predicts {model.num_classes} classes, dataset has {C}")
        rows[name] = evaluate(model, x, y, C)
    out = Path(args.out) if args.out else output_root() / "eval" / "iou.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_iou_table(out, rows, [f"class{c}" for c in range(C)])
    print(out.read_text(), end="")
    print(f"table: {out}")
    return EXIT_OK


# --- plot -----------------------------------------------------------------


def find_runs(paths) -> list[Path]:
    runs = []
    for p in map(Path, paths):
        if (p / RUN_RECORD).exists():
            runs.append(p)
        elif p.is_dir():
            runs.extend(sorted(q.parent for q in p.glob(f"*/{RUN_RECORD}")))
    return runs


def _label_colors(num_classes: int) -> np.ndarray:
    from .dataset import class_palette

    return class_palette(num_classes)


def plot_loss_curves(runs: list[tuple[str, list[dict]]], path: Path) -> None:
    import matplotlib.pyplot as plt

    from .adapt import LOSS_COLUMNS

    cols = [c for c in LOSS_COLUMNS if any(c in r for _, h in runs for r in h)]
    n = len(cols)
    ncol = min(4, n)
    nrow = -(-n // ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.2 * ncol, 2.6 * nrow), squeeze=False)
    for ax, col in zip(axes.flat, cols):
        for name, hist in runs:
            pts = [(r["iteration"], r[col]) for r in hist if col in r]
            if pts:
                ax.plot(*zip(*pts), label=name, lw=1)
        ax.set_title(col, fontsize=9)
        ax.set_xlabel("iteration", fontsize=8)
        ax.tick_params(labelsize=7)
    for ax in list(axes.flat)[n:]:
        ax.axis("off")
    if len(runs) > 1:
        axes.flat[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_k_sweep(final: dict[int, list[float]], path: Path) -> None:
    import matplotlib.pyplot as plt

    ks = sorted(final)
    means = [np.mean(final[k]) for k in ks]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar([str(k) for k in ks], means, color="tab:blue")
    for i, k in enumerate(ks):
        ax.scatter([i] * len(final[k]), final[k], color="k", s=8, zorder=3)
    ax.set_xlabel("K (patches per side)")
    ax.set_ylabel("target mIoU")
    lo = min(min(v) for v in final.values())
    ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(means) + 0.05))
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_samples(run_dir: Path, record: dict, path: Path, n: int = 8, seed: int = 0) -> None:
    """Generator samples (top) and the source model's predicted maps (bottom)."""
    import matplotlib.pyplot as plt
    import torch

    gen, _ = _checkpoint(run_dir / "generator")
    source, _ = _checkpoint(record["source_checkpoint"])
    gen.eval()
    source.eval()
    z = torch.randn(n, gen.latent_dim, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        fake = gen(z)
        pred = source(fake).argmax(dim=1).numpy()
    colors = _label_colors(source.num_classes)
    fig, axes = plt.subplots(2, n, figsize=(1.3 * n, 2.8), squeeze=False)
    for i in range(n):
        axes[0, i].imshow(fake[i].permute(1, 2, 0).numpy())
        axes[1, i].imshow(colors[pred[i]])
        axes[0, i].axis("off")
        axes[1, i].axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    from .adapt import read_history

    runs = find_runs(args.runs)
    if not runs:
        raise InputError("no runs found (looked for run_record.json)")
    out = Path(args.out) if args.out else output_root() / "figures"
    out.mkdir(parents=True, exist_ok=True)

    histories, final = [], {}
    for run in runs:
        record = json.loads((run / RUN_RECORD).read_text())
        hist_path = run / record["history"]
        hist = read_history(hist_path) if hist_path.exists() else []
        if not any(r["iteration"] > 0 for r in hist):
            raise InputError(f"empty history in {run}")
        histories.append((record["run_id"], hist))
        miou = [r["miou"] for r in hist if "miou" in r]
        if miou:
            final.setdefault(int(record["config"]["K"]), []).append(miou[-1])

    written = [out / "loss_curves.png"]
    plot_loss_curves(histories, written[0])
    if len(final) >= 2:
        written.append(out / "k_sweep.png")
        plot_k_sweep(final, written[-1])
    first = runs[0]
    written.append(out / "samples.png")
    plot_samples(first, json.loads((first / RUN_RECORD).read_text()), written[-1], seed=args.seed)
    for p in written:
        print(p)
    return EXIT_OK


# --- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    from .dataset import SHIFT_PRESETS

    parser = argparse.ArgumentParser(prog="sfda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build source/target train/test splits")
    p.add_argument("--out", help="dataset root (default $SFDA_OUTPUT_ROOT/data)")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift", choices=sorted(SHIFT_PRESETS), default="default")
    p.add_argument("--force", action="store_true", help="overwrite existing splits")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="supervised training on the labelled source splits")
    p.add_argument("--data", required=True, help="dataset root holding source_train/ and source_test/")
    p.add_argument("--out", help="checkpoint directory (default $SFDA_OUTPUT_ROOT/source_model)")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-miou", type=float, default=0.80)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="source-free adaptation of a source checkpoint")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--target-train", required=True, help="unlabelled target split directory")
    p.add_argument("--target-test", help="labelled target split for per-epoch evaluation")
    p.add_argument("--source-data", help=argparse.SUPPRESS)
    p.add_argument("--out", help="run directory (default $SFDA_OUTPUT_ROOT/runs/<run-id>)")
    p.add_argument("--run-id")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    for name in _VALUE_FIELDS:
        typ = int if name in ("K", "batch_size", "fake_batch", "epochs", "iters_per_epoch", "seed") else float
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--no-ipsm", action="store_true")
    p.add_argument("--no-bns", action="store_true")
    p.add_argument("--no-dad", action="store_true")
    p.add_argument("--transfer-only", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="per-class IoU table for one or more checkpoints")
    p.add_argument("--ckpt", action="append", required=True)
    p.add_argument("--name", action="append", help="row label, once per --ckpt")
    p.add_argument("--data", required=True, help="labelled split directory")
    p.add_argument("--out", help="CSV path (default $SFDA_OUTPUT_ROOT/eval/iou.csv)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="loss curves, mIoU-vs-K chart, generator sample grid")
    p.add_argument("runs", nargs="+", help="run directories, or directories containing runs")
    p.add_argument("--out", help="figure directory (default $SFDA_OUTPUT_ROOT/figures)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

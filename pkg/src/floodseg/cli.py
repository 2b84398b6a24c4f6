"""floodseg command-line interface.

Subcommands: synth, stats, train, eval, predict, ablate, report.

Settings resolve as dataclass defaults < ``--config`` JSON < explicit flags;
train/ablate echo the resolved config into their output directory.

Exit status: 0 ok, 2 usage or malformed config, 3 data, 4 training
divergence, 5 I/O (including checkpoint integrity/manifest errors).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .backbones import BackboneSpec
from .catalog import ClassCatalog
from .config import TrainingConfig, load_config, save_config
from .data import SPLITS, class_pixel_counts, scan_dataset
from .errors import CheckpointError, ContractError, DataError, DivergenceError, FloodSegError, InvalidOffsetError
from .losses import AlphaDerivationConfig, LossConfig, compute_alpha
from .models import VARIANTS

log = logging.getLogger("floodseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4, 5

_T = TrainingConfig()
_L = LossConfig()
_B = BackboneSpec()


class UsageError(FloodSegError):
    pass


def _catalog(n_classes: int) -> ClassCatalog:
    default = ClassCatalog.default()
    if n_classes == default.num_classes:
        return default
    return ClassCatalog.from_names([default.names[0]] + [f"class_{i}" for i in range(1, n_classes)])


def _add_training_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("training (flags override --config)")
    g.add_argument("--config", help="pipeline config JSON")
    g.add_argument("--data-root", help="dataset root directory")
    g.add_argument("--model", choices=VARIANTS, help=f"model variant (default: {_T.model.variant})")
    g.add_argument("--backbone", choices=("pretrained", "stub"),
                   help="patch-feature backbone for fused variants (default: pretrained)")
    g.add_argument("--weights", help=f"pretrained backbone locator (default: {_B.weights_locator})")
    g.add_argument("--patch-size", type=int, help=f"backbone patch size p (default: {_B.patch_size})")
    g.add_argument("--embed-dim", type=int, help=f"patch embedding width E (default: {_B.embed_dim})")
    g.add_argument("--input-size", type=int, help=f"square input side H = W (default: {_T.model.input_size})")
    g.add_argument("--num-classes", type=int, help=f"number of classes (default: {_T.model.num_classes})")
    g.add_argument("--lr", type=float, help=f"initial learning rate (default: {_T.lr0:g})")
    g.add_argument("--plateau-factor", type=float, help=f"LR reduction factor (default: {_T.plateau_factor})")
    g.add_argument("--patience", type=int, help=f"plateau patience in epochs (default: {_T.plateau_patience})")
    g.add_argument("--epochs", type=int, help=f"training epochs (default: {_T.epochs})")
    g.add_argument("--batch-size", type=int, help=f"training batch size (default: {_T.train_batch})")
    g.add_argument("--eval-batch-size", type=int, help=f"validation/test batch size (default: {_T.eval_batch})")
    g.add_argument("--w", type=float, help=f"dice weight in the total loss (default: {_L.w})")
    g.add_argument("--gamma", type=float, help=f"focal focusing parameter (default: {_L.gamma})")
    g.add_argument("--epsilon", type=float, help=f"dice stabilizer (default: {_L.epsilon:g})")
    g.add_argument("--seed", type=int, help=f"random seed (default: {_T.seed})")
    g.add_argument("--no-augment", action="store_true", help="disable flip/zoom augmentation")
    g.add_argument("--workers", type=int, help="data-loading worker processes (default: min(4, CPUs - 1))")


def resolve_config(args) -> TrainingConfig:
    """Defaults < config file < explicit flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainingConfig()
    top, model, loss, bb = {}, {}, {}, {}
    pairs = [
        ("data_root", top, "data_root"), ("lr", top, "lr0"), ("plateau_factor", top, "plateau_factor"),
        ("patience", top, "plateau_patience"), ("epochs", top, "epochs"), ("batch_size", top, "train_batch"),
        ("eval_batch_size", top, "eval_batch"), ("seed", top, "seed"), ("workers", top, "workers"),
        ("model", model, "variant"), ("input_size", model, "input_size"), ("num_classes", model, "num_classes"),
        ("w", loss, "w"), ("gamma", loss, "gamma"), ("epsilon", loss, "epsilon"),
        ("weights", bb, "weights_locator"), ("patch_size", bb, "patch_size"), ("embed_dim", bb, "embed_dim"),
    ]
    for flag, target, key in pairs:
        v = getattr(args, flag, None)
        if v is not None:
            target[key] = v
    if getattr(args, "backbone", None):
        bb["kind"] = "deterministic_stub" if args.backbone == "stub" else "pretrained_vit_s14"
        if args.backbone == "stub" and "weights_locator" not in bb:
            bb["weights_locator"] = None
    if getattr(args, "no_augment", False):
        top["augment"] = False
    if getattr(args, "workers", None) is None and not getattr(args, "config", None):
        top["workers"] = max(0, min(4, (os.cpu_count() or 1) - 1))
    if getattr(args, "out", None):
        top["checkpoint_dir"] = str(args.out)

    backbone = dataclasses.replace(cfg.model.backbone, **bb)
    mcfg = dataclasses.replace(cfg.model, backbone=backbone, **model)
    lcfg = dataclasses.replace(cfg.loss, **loss)
    if lcfg.alpha == _L.alpha and mcfg.num_classes != len(_L.alpha):
        # the published alphas only fit the 10-class catalog
        lcfg = dataclasses.replace(lcfg, alpha=tuple(_catalog(mcfg.num_classes).alphas))
    return dataclasses.replace(cfg, model=mcfg, loss=lcfg, **top)


def _require_root(cfg: TrainingConfig) -> Path:
    if not cfg.data_root:
        raise UsageError("a dataset root is required (--data-root or data_root in --config)")
    return Path(cfg.data_root)


def _write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    from .synthetic import make_synthetic_dataset
    for split, n in zip(("train", "val", "test"), (args.n_train, args.n_val, args.n_test)):
        if n > 0:
            idx = make_synthetic_dataset(n, args.size, args.n_classes, args.seed, args.out, split)
            print(f"{split}: {len(idx)} samples -> {Path(args.out) / split}")


def cmd_stats(args):
    root = Path(args.data_root)
    index = scan_dataset(root, args.split)
    catalog = _catalog(args.num_classes)
    counts = class_pixel_counts(index, catalog, args.target or None)
    beta = None
    if args.beta_file:
        beta = json.loads(Path(args.beta_file).read_text())
        beta = beta["beta"] if isinstance(beta, dict) else beta
    alpha = compute_alpha(counts, AlphaDerivationConfig(beta))
    out = {
        "split": args.split,
        "images": len(index),
        "pixels": counts.pixels,
        "class_names": catalog.names,
        "counts": counts.tolist(),
        "beta": list(beta) if beta is not None else [0.0] * catalog.num_classes,
        "alpha": alpha.tolist(),
    }
    _write(args.out, json.dumps(out, indent=2) + "\n")
    print(f"{len(index)} images, {counts.pixels} pixels -> {args.out}")


def _indices(cfg: TrainingConfig, root: Path):
    train = scan_dataset(root, "train", cfg.layout)
    try:
        val = scan_dataset(root, "val", cfg.layout)
    except DataError:
        log.warning("no validation split under %s; validating on the training split", root)
        val = None
    return train, val


def cmd_train(args):
    from .training import fit
    cfg = resolve_config(args)
    root = _require_root(cfg)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.json")
    train, val = _indices(cfg, root)
    result = fit(cfg, train, val, resume=args.resume)
    if not result.backbone_frozen:
        raise DivergenceError("backbone parameters changed during training")
    print(f"trained {len(result.history)} epoch(s); best checkpoint: {result.best_checkpoint}; "
          f"history: {out / 'history.csv'}")


def _write_report(report, out: Path):
    from .evaluation import render_report
    _write(out / "report.json", render_report(report, "structured-text"))
    _write(out / "report.csv", render_report(report, "delimited"))
    _write(out / "report.txt", render_report(report, "human-readable"))


def cmd_eval(args):
    from .evaluation import evaluate
    from .training import load_model
    mcfg = None
    if args.config or args.model:
        mcfg = resolve_config(args).model
    model, state = load_model(args.checkpoint, mcfg)
    catalog = _catalog(model.cfg.num_classes)
    index = scan_dataset(args.data_root, args.split)
    report = evaluate(model, index, catalog, args.eval_batch_size or _T.eval_batch,
                      model_name=args.name or model.cfg.variant, checkpoint=str(args.checkpoint))
    report.metadata["checkpoint_epoch"] = state.epoch
    out = Path(args.out)
    _write_report(report, out)
    print(f"mIoU {100 * report.miou:.2f} on {args.split} ({len(index)} images) -> {out / 'report.json'}")


def cmd_predict(args):
    from .evaluation import ColorMap, predict_and_colorize
    from .training import load_model
    model, _ = load_model(args.checkpoint)
    labels = predict_and_colorize(model, args.image, args.out, ColorMap(), args.mask)
    if args.labels_out:
        import numpy as np
        np.save(args.labels_out, labels)
    print(f"wrote {args.out}")


def cmd_ablate(args):
    from .evaluation import chart_data
    from .training import run_ablation
    cfg = resolve_config(args)
    root = _require_root(cfg)
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "resolved_config.json")
    train, val = _indices(cfg, root)
    reports, table = run_ablation(cfg, train, val, tuple(args.variants), out,
                                  _catalog(cfg.model.num_classes))
    _write(out / "ablation_chart.csv", chart_data(table))
    for r in reports:
        print(f"{r.name:<24} mIoU {100 * r.miou:.2f}")


def cmd_report(args):
    from .evaluation import chart_data, comparison_report, load_report, render_report
    reports = [load_report(p) for p in args.inputs]
    baseline = args.baseline
    names = [r.name for r in reports]
    if baseline not in names:
        # allow naming the baseline by its input path
        paths = [str(p) for p in args.inputs]
        if baseline in paths:
            baseline = names[paths.index(baseline)]
    table = comparison_report(reports, baseline)
    out = Path(args.out)
    _write(out / "comparison.json", render_report(table, "structured-text"))
    _write(out / "comparison.csv", render_report(table, "delimited"))
    _write(out / "comparison.txt", render_report(table, "human-readable"))
    _write(out / "chart_data.csv", chart_data(table))
    print(render_report(table, "human-readable"), end="")


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="floodseg", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=8)
    s.add_argument("--n-val", type=int, default=4)
    s.add_argument("--n-test", type=int, default=4)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--n-classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("stats", help="per-class pixel counts and derived alphas")
    s.add_argument("--data-root", required=True)
    s.add_argument("--split", choices=SPLITS, default="train")
    s.add_argument("--beta-file", help="JSON list (or {'beta': [...]}) of per-class offsets")
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--target", type=int, default=448, help="count on masks resized to this side; 0 = native")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train a model")
    _add_training_flags(s)
    s.add_argument("--out", help="checkpoint/output directory")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last.pt")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-root", required=True)
    s.add_argument("--split", choices=SPLITS, default="test")
    s.add_argument("--config", help="expected model config; mismatching checkpoints are rejected")
    s.add_argument("--model", choices=VARIANTS, help="expected model variant")
    s.add_argument("--eval-batch-size", type=int)
    s.add_argument("--name", help="method name recorded in the report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="colorized prediction for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--mask", help="ground truth, rendered side by side")
    s.add_argument("--out", required=True)
    s.add_argument("--labels-out", help="also save the argmax label map (.npy)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("ablate", help="loss-function ablation")
    _add_training_flags(s)
    s.add_argument("--variants", nargs="+", default=["dice", "focal", "modified_focal", "dice_modified_focal"])
    s.add_argument("--out", help="output directory")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="compare metrics reports")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--baseline", required=True, help="method name (or input path) to compare against")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ContractError, InvalidOffsetError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (CheckpointError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

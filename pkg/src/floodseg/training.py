"""Training loop, plateau learning-rate schedule, checkpoints and the loss ablation."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader

from .backbones import assert_frozen
from .catalog import ClassCatalog
from .config import TrainingConfig, to_dict
from .data import DatasetIndex, SegmentationDataset, class_pixel_counts
from .errors import CheckpointError, ContractError, DivergenceError
from .losses import AlphaDerivationConfig, LossConfig, compute_alpha, one_hot, total_loss
from .metrics import ConfusionMatrix, MetricsReport, mean_iou, per_class_iou
from .models import ModelConfig, SegmentationModel, build_model

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "floodseg.checkpoint/1"


# ---------------------------------------------------------------------------
# learning-rate schedule

@dataclass
class SchedulerState:
    current_lr: float
    best_val_loss: float = math.inf
    epochs_since_improvement: int = 0


def lr_on_plateau(state: SchedulerState, val_loss: float, cfg) -> SchedulerState:
    """One schedule step after an epoch's validation loss.

    A strict decrease resets the counter; otherwise the counter grows, and on
    reaching ``cfg.plateau_patience`` the rate is multiplied by
    ``cfg.plateau_factor`` and the counter restarts.
    """
    if val_loss is None or math.isnan(val_loss):
        raise DivergenceError("validation loss is NaN")
    if val_loss < state.best_val_loss:
        return SchedulerState(state.current_lr, val_loss, 0)
    waited = state.epochs_since_improvement + 1
    if waited >= cfg.plateau_patience:
        return SchedulerState(state.current_lr * cfg.plateau_factor, state.best_val_loss, 0)
    return SchedulerState(state.current_lr, state.best_val_loss, waited)


def replay_lr(val_losses, cfg) -> list[float]:
    """Learning rate in force after each epoch's schedule step."""
    state = SchedulerState(cfg.lr0)
    out = []
    for v in val_losses:
        state = lr_on_plateau(state, v, cfg)
        out.append(state.current_lr)
    return out


# ---------------------------------------------------------------------------
# history

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_miou: float
    lr: float  # rate used while training this epoch
    batches: list = field(default_factory=list)  # sample ids per batch, in order


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def to_list(self) -> list[dict]:
        return [dataclasses.asdict(r) for r in self.records]

    @classmethod
    def from_list(cls, rows) -> "TrainingHistory":
        return cls([EpochRecord(**r) for r in rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_loss", "val_loss", "val_miou", "lr"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_miou), repr(r.lr)])


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointState:
    model_state: dict
    epoch: int
    manifest: dict
    optimizer_state: dict | None = None
    scheduler: dict | None = None
    history: list | None = None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, model: SegmentationModel, cfg: TrainingConfig, epoch: int,
                    optimizer=None, scheduler: SchedulerState | None = None,
                    history: TrainingHistory | None = None, val_metrics: dict | None = None) -> Path:
    """Write ``path`` (torch blob) and ``path.json`` (manifest with the blob digest).

    Backbone weights are not stored; they come from the backbone spec.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "model": model.state_dict_without_backbone(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "scheduler": dataclasses.asdict(scheduler) if scheduler is not None else None,
        "history": history.to_list() if history is not None else None,
        "epoch": epoch,
    }
    torch.save(blob, path)
    mcfg = cfg.model
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "variant": mcfg.variant,
        "num_classes": mcfg.num_classes,
        "input_size": mcfg.input_size,
        "seed": cfg.seed,
        "epoch": epoch,
        "val_metrics": val_metrics or {},
        "sha256": _sha256(path),
        "config": to_dict(cfg),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    mpath = manifest_path(path)
    try:
        return json.loads(mpath.read_text())
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint manifest missing: {mpath}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint manifest {mpath}: {e}") from e


def check_compatible(manifest: dict, mcfg: ModelConfig):
    for key in ("variant", "num_classes", "input_size"):
        if manifest.get(key) != getattr(mcfg, key):
            raise CheckpointError(f"checkpoint {key}={manifest.get(key)!r} does not match "
                                  f"model config {key}={getattr(mcfg, key)!r}")


def load_checkpoint(path, model_cfg: ModelConfig | None = None) -> CheckpointState:
    """Verify the blob digest (and model compatibility) and load it."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    if not path.is_file():
        raise CheckpointError(f"checkpoint blob missing: {path}")
    if _sha256(path) != manifest.get("sha256"):
        raise CheckpointError(f"checkpoint {path} failed its integrity check (digest mismatch)")
    if model_cfg is not None:
        check_compatible(manifest, model_cfg)
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return CheckpointState(blob["model"], blob["epoch"], manifest, blob.get("optimizer"),
                           blob.get("scheduler"), blob.get("history"))


def restore_model(model: SegmentationModel, state: CheckpointState):
    missing, unexpected = model.load_state_dict(state.model_state, strict=False)
    missing = [k for k in missing if not k.startswith("backbone.")]
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not fit the model (missing {missing[:5]}, "
                              f"unexpected {unexpected[:5]})")
    return model


def model_config_from_manifest(manifest: dict) -> ModelConfig:
    from .config import from_dict
    return from_dict(ModelConfig, manifest["config"]["model"])


def load_model(path, model_cfg: ModelConfig | None = None) -> tuple[SegmentationModel, CheckpointState]:
    """Rebuild a model from a checkpoint, using the manifest's config when none is given."""
    state = load_checkpoint(path, model_cfg)
    model_cfg = model_cfg or model_config_from_manifest(state.manifest)
    model = build_model(model_cfg, seed=state.manifest.get("seed", 0))
    restore_model(model, state)
    model.eval()
    return model, state


# ---------------------------------------------------------------------------
# loops

def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


def train_epoch(model: SegmentationModel, optimizer, dataset: SegmentationDataset,
                cfg: TrainingConfig, epoch: int, loss_cfg: LossConfig | None = None):
    """One optimizer pass over shuffled batches.

    Returns:
        (mean training loss, list of sample-id batches in the order seen)
    """
    if len(dataset) == 0:
        raise ContractError("empty training data")
    loss_cfg = loss_cfg or cfg.loss
    num_classes = cfg.model.num_classes
    dataset.epoch = epoch
    batches = epoch_batches(len(dataset), cfg.train_batch, cfg.seed, epoch)
    loader = DataLoader(dataset, batch_sampler=batches, num_workers=cfg.workers)
    model.train()
    total, seen, batch_log = 0.0, 0, []
    for b, (images, masks, idx) in enumerate(loader):
        probs = model(images)
        loss = total_loss(probs, one_hot(masks, num_classes, probs.dtype), loss_cfg)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {b}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        total += loss.item() * len(idx)
        seen += len(idx)
        batch_log.append([dataset.index[i].sample_id for i in idx.tolist()])
    return total / seen, batch_log


def validate(model: SegmentationModel, dataset: SegmentationDataset, cfg: TrainingConfig,
             loss_cfg: LossConfig | None = None) -> tuple[float, ConfusionMatrix]:
    loss_cfg = loss_cfg or cfg.loss
    num_classes = cfg.model.num_classes
    loader = DataLoader(dataset, batch_size=cfg.eval_batch, shuffle=False, num_workers=cfg.workers)
    conf = ConfusionMatrix(num_classes)
    model.eval()
    total, seen = 0.0, 0
    with torch.no_grad():
        for images, masks, idx in loader:
            probs = model(images)
            total += total_loss(probs, one_hot(masks, num_classes, probs.dtype), loss_cfg).item() * len(idx)
            seen += len(idx)
            conf.update(probs.argmax(-1).numpy(), masks.numpy())
    return total / seen, conf


def _miou(conf: ConfusionMatrix) -> float:
    try:
        return mean_iou(per_class_iou(conf))
    except ContractError:
        return float("nan")


def resolve_loss(cfg: TrainingConfig, train_index: DatasetIndex) -> LossConfig:
    """Fill in ``alpha="auto"`` from training pixel counts and check its length."""
    loss = cfg.loss
    n = cfg.model.num_classes
    if loss.alpha == "auto":
        catalog = ClassCatalog.from_names([str(i) for i in range(n)])
        counts = class_pixel_counts(train_index, catalog, cfg.model.input_size)
        alpha = compute_alpha(counts, AlphaDerivationConfig(loss.beta))
        loss = dataclasses.replace(loss, alpha=tuple(alpha.tolist()))
    if len(loss.alpha) != n:
        raise ContractError(f"loss alpha has {len(loss.alpha)} entries for {n} classes")
    return loss


@dataclass
class FitResult:
    model: SegmentationModel
    history: TrainingHistory
    best_checkpoint: Path | None
    last_checkpoint: Path | None
    backbone_digests: tuple[str | None, str | None] = (None, None)

    @property
    def backbone_frozen(self) -> bool:
        return assert_frozen(*self.backbone_digests)


def fit(cfg: TrainingConfig, train_index: DatasetIndex, val_index: DatasetIndex | None = None,
        resume: bool = False) -> FitResult:
    """Train for ``cfg.epochs`` epochs, validating after each.

    Without ``val_index`` the (unaugmented) training split is scored instead.
    ``checkpoint_dir`` receives ``last.pt`` every epoch, ``best.pt`` whenever
    validation mIoU improves, and ``history.csv`` / ``history.json``.
    With ``resume=True`` training continues from ``last.pt`` if present.
    """
    ckpt_dir = Path(cfg.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    mcfg = cfg.model
    loss_cfg = resolve_loss(cfg, train_index)

    model = build_model(mcfg, seed=cfg.seed)
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=cfg.lr0)
    sched = SchedulerState(cfg.lr0)
    history = TrainingHistory()
    start, best_miou = 1, -math.inf
    best_path, last_path = ckpt_dir / "best.pt", ckpt_dir / "last.pt"

    if resume and last_path.exists():
        state = load_checkpoint(last_path, mcfg)
        restore_model(model, state)
        if state.optimizer_state is not None:
            optimizer.load_state_dict(state.optimizer_state)
        sched = SchedulerState(**state.scheduler)
        history = TrainingHistory.from_list(state.history or [])
        start = state.epoch + 1
        finite = [r.val_miou for r in history.records if not math.isnan(r.val_miou)]
        best_miou = max(finite, default=-math.inf)
        log.info("resuming from %s at epoch %d", last_path, start)

    aug = dataclasses.replace(cfg.augmentation, seed=cfg.seed) if cfg.augment else None
    train_ds = SegmentationDataset(train_index, mcfg.input_size, mcfg.num_classes, aug)
    val_ds = SegmentationDataset(val_index if val_index is not None else train_index,
                                 mcfg.input_size, mcfg.num_classes, None)

    digest_before = model.backbone_digest()
    for epoch in range(start, cfg.epochs + 1):
        for g in optimizer.param_groups:
            g["lr"] = sched.current_lr
        lr_used = sched.current_lr
        train_loss, batch_log = train_epoch(model, optimizer, train_ds, cfg, epoch, loss_cfg)
        val_loss, conf = validate(model, val_ds, cfg, loss_cfg)
        if not math.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        miou = _miou(conf)
        sched = lr_on_plateau(sched, val_loss, cfg)
        history.append(EpochRecord(epoch, train_loss, val_loss, miou, lr_used, batch_log))
        log.info("epoch %d: train %.4f  val %.4f  mIoU %.4f  lr %.3g", epoch, train_loss, val_loss, miou, lr_used)

        metrics = {"val_loss": val_loss, "val_miou": None if math.isnan(miou) else miou}
        save_checkpoint(last_path, model, cfg, epoch, optimizer, sched, history, metrics)
        if not math.isnan(miou) and miou > best_miou:
            best_miou = miou
            save_checkpoint(best_path, model, cfg, epoch, optimizer, sched, history, metrics)
        history.write_csv(ckpt_dir / "history.csv")
        (ckpt_dir / "history.json").write_text(json.dumps(history.to_list()) + "\n")

    if cfg.epochs == 0 or not history.records:
        save_checkpoint(last_path, model, cfg, 0, optimizer, sched, history)
    model.eval()
    return FitResult(model, history, best_path if best_path.exists() else None, last_path,
                     (digest_before, model.backbone_digest()))


# ---------------------------------------------------------------------------
# loss ablation

ABLATION_VARIANTS = ("dice", "focal", "modified_focal", "dice_modified_focal")
ABLATION_LABELS = {
    "dice": "Dice",
    "focal": "Focal",
    "modified_focal": "Modified Focal",
    "dice_modified_focal": "Dice + Modified Focal",
}


def ablation_loss(base: LossConfig, variant: str, num_classes: int) -> LossConfig:
    """Loss settings for one ablation arm.

    dice: w=1. focal: w=0 with uniform alpha. modified_focal: w=0 with the
    configured class-frequency alpha. dice_modified_focal: w=0.5 with that alpha.
    """
    if variant == "dice":
        return dataclasses.replace(base, w=1.0)
    if variant == "focal":
        return dataclasses.replace(base, w=0.0, alpha=(1.0 / num_classes,) * num_classes)
    if variant == "modified_focal":
        return dataclasses.replace(base, w=0.0)
    if variant == "dice_modified_focal":
        return dataclasses.replace(base, w=0.5)
    raise ContractError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def run_ablation(base_cfg: TrainingConfig, train_index: DatasetIndex, eval_index: DatasetIndex | None = None,
                 variants=ABLATION_VARIANTS, out_dir=None, catalog: ClassCatalog | None = None):
    """Train and score one model per loss variant with identical seed and model.

    Returns:
        (list of MetricsReport, ComparisonTable against the combined-loss arm
        when present, else the first arm)
    """
    from .evaluation import comparison_report, evaluate, render_report

    out_dir = Path(out_dir or Path(base_cfg.checkpoint_dir) / "ablation")
    catalog = catalog or ClassCatalog.default()
    eval_index = eval_index if eval_index is not None else train_index
    base_loss = resolve_loss(base_cfg, train_index)
    reports = []
    for variant in variants:
        loss = ablation_loss(base_loss, variant, base_cfg.model.num_classes)
        cfg = dataclasses.replace(base_cfg, loss=loss, checkpoint_dir=str(out_dir / variant))
        result = fit(cfg, train_index, eval_index)
        report = evaluate(result.model, eval_index, catalog, eval_batch=cfg.eval_batch,
                          model_name=ABLATION_LABELS[variant], checkpoint=str(result.best_checkpoint or ""))
        report.metadata.update(loss_variant=variant, w=loss.w, alpha=list(loss.alpha))
        reports.append(report)
        (out_dir / variant / "report.json").write_text(render_report(report, "structured-text"))

    baseline = ABLATION_LABELS["dice_modified_focal"] if "dice_modified_focal" in variants else reports[0].name
    table = comparison_report(reports, baseline)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.csv").write_text(render_report(table, "delimited"))
    (out_dir / "ablation.txt").write_text(render_report(table, "human-readable"))
    return reports, table

"""Test-split evaluation, colorized masks and cross-model comparison reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .catalog import ClassCatalog
from .data import DatasetIndex, SegmentationDataset, preprocess, read_image, read_mask
from .errors import ContractError
from .metrics import ConfusionMatrix, MetricsReport, mean_iou

METRICS_SCHEMA = "floodseg.metrics/1"
COMPARISON_SCHEMA = "floodseg.comparison/1"
FORMATS = ("structured-text", "delimited", "human-readable")

# arbitrary but well separated; index = class id
DEFAULT_COLORS = (
    (0, 0, 0),
    (230, 25, 75),
    (60, 180, 75),
    (255, 225, 25),
    (0, 130, 200),
    (245, 130, 48),
    (145, 30, 180),
    (70, 240, 240),
    (240, 50, 230),
    (170, 110, 40),
)


@dataclass(frozen=True)
class ColorMap:
    colors: tuple = DEFAULT_COLORS

    def __post_init__(self):
        if len(set(map(tuple, self.colors))) != len(self.colors):
            raise ContractError("color map must assign distinct colors to distinct classes")

    def encode(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= len(self.colors)):
            raise ContractError("label outside the color map")
        return np.asarray(self.colors, dtype=np.uint8)[labels]

    def decode(self, rgb: np.ndarray) -> np.ndarray:
        """Invert ``encode``; any pixel with an unmapped color is an error."""
        rgb = np.asarray(rgb, dtype=np.int64)
        key = (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]
        table = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in enumerate(self.colors)}
        uniq, inv = np.unique(key, return_inverse=True)
        unknown = [int(u) for u in uniq if int(u) not in table]
        if unknown:
            raise ContractError(f"{len(unknown)} color(s) not in the color map")
        return np.array([table[int(u)] for u in uniq], dtype=np.int64)[inv].reshape(key.shape)


# ---------------------------------------------------------------------------
# evaluation

def _predict(model, images: torch.Tensor) -> torch.Tensor:
    if isinstance(model, torch.nn.Module):
        model.eval()
    with torch.no_grad():
        return model(images)


def evaluate(model, index: DatasetIndex, catalog: ClassCatalog | None = None, eval_batch: int = 16,
             input_size: int | None = None, excluded=(0,), model_name: str | None = None,
             checkpoint: str = "") -> MetricsReport:
    """Score argmax predictions over ``index``.

    ``model`` is any callable mapping ``B x H x W x 3`` images to
    ``B x H x W x C`` probabilities; ``SegmentationModel`` instances supply
    their own input size.
    """
    catalog = catalog or ClassCatalog.default()
    cfg = getattr(model, "cfg", None)
    input_size = input_size or (cfg.input_size if cfg is not None else 448)
    ds = SegmentationDataset(index, input_size, catalog.num_classes, None)
    loader = torch.utils.data.DataLoader(ds, batch_size=eval_batch, shuffle=False)
    conf = ConfusionMatrix(catalog.num_classes)
    for images, masks, _ in loader:
        probs = _predict(model, images)
        conf.update(probs.argmax(-1).numpy(), masks.numpy())
    name = model_name or (cfg.variant if cfg is not None else type(model).__name__)
    return MetricsReport.from_confusion(conf, catalog, excluded, model=name, checkpoint=checkpoint,
                                        split=index.split)


def evaluate_checkpoint(path, index: DatasetIndex, catalog: ClassCatalog | None = None,
                        model_cfg=None, eval_batch: int = 16, model_name: str | None = None) -> MetricsReport:
    """Load a checkpoint (digest and config checked) and evaluate it."""
    from .training import load_model
    model, _ = load_model(path, model_cfg)
    return evaluate(model, index, catalog, eval_batch, model_name=model_name, checkpoint=str(path))


def predict_labels(model, image: np.ndarray, input_size: int) -> np.ndarray:
    """Argmax label map for one raw 8-bit image, after the standard preprocessing."""
    sample = preprocess(image, np.zeros(image.shape[:2], dtype=np.uint8), input_size)
    probs = _predict(model, torch.from_numpy(sample.image)[None])
    return probs[0].argmax(-1).numpy()


def predict_and_colorize(model, image_path, out_path, colormap: ColorMap | None = None,
                         mask_path=None, input_size: int | None = None) -> np.ndarray:
    """Write the colorized prediction (``[prediction | ground truth]`` with a mask).

    Returns the predicted label map.
    """
    colormap = colormap or ColorMap()
    cfg = getattr(model, "cfg", None)
    input_size = input_size or (cfg.input_size if cfg is not None else 448)
    try:
        image = read_image(image_path)
    except OSError as e:
        raise OSError(f"cannot read image {image_path}: {e}") from e
    labels = predict_labels(model, image, input_size)
    panel = colormap.encode(labels)
    if mask_path is not None:
        truth = preprocess(image, read_mask(mask_path), input_size, len(colormap.colors)).mask
        panel = np.concatenate([panel, colormap.encode(truth)], axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel, mode="RGB").save(out_path)
    return labels


def decode_colorized(path, colormap: ColorMap | None = None, side_by_side: bool = False) -> np.ndarray:
    colormap = colormap or ColorMap()
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"))
    if side_by_side:
        rgb = rgb[:, : rgb.shape[1] // 2]
    return colormap.decode(rgb)


# ---------------------------------------------------------------------------
# comparison

@dataclass
class ComparisonRow:
    name: str
    per_class_iou: list
    miou: float


@dataclass
class ComparisonTable:
    class_names: list[str]
    excluded_class_ids: list[int]
    baseline: str
    rows: list[ComparisonRow] = field(default_factory=list)

    def row(self, name: str) -> ComparisonRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    @property
    def scored(self) -> list[int]:
        return [c for c in range(len(self.class_names)) if c not in self.excluded_class_ids]

    def delta(self, a: str, b: str) -> dict:
        """Absolute and relative change of ``a`` against ``b`` per scored class and mIoU."""
        ra, rb = self.row(a), self.row(b)
        keys = [self.class_names[c] for c in self.scored] + ["mIoU"]
        va = [ra.per_class_iou[c] for c in self.scored] + [ra.miou]
        vb = [rb.per_class_iou[c] for c in self.scored] + [rb.miou]
        absolute, relative = {}, {}
        for k, x, y in zip(keys, va, vb):
            absolute[k] = None if x is None or y is None else x - y
            relative[k] = None if absolute[k] is None or not y else absolute[k] / y
        return {"absolute": absolute, "relative": relative}

    def deltas(self) -> dict:
        return {r.name: self.delta(r.name, self.baseline) for r in self.rows if r.name != self.baseline}


def comparison_report(reports: Sequence[MetricsReport], baseline_name: str) -> ComparisonTable:
    if len(reports) < 2:
        raise ContractError("comparison needs at least two reports")
    first = reports[0]
    for r in reports[1:]:
        if r.class_names != first.class_names:
            raise ContractError(f"report {r.name!r} uses a different class catalog")
        if r.excluded_class_ids != first.excluded_class_ids:
            raise ContractError(f"report {r.name!r} excludes different classes")
    names = [r.name for r in reports]
    if len(set(names)) != len(names):
        raise ContractError(f"report names must be unique, got {names}")
    if baseline_name not in names:
        raise ContractError(f"baseline {baseline_name!r} not among {names}")
    rows = [ComparisonRow(r.name, list(r.per_class_iou), r.miou) for r in reports]
    return ComparisonTable(list(first.class_names), list(first.excluded_class_ids), baseline_name, rows)


# ---------------------------------------------------------------------------
# rendering

def _pct(v) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _metrics_struct(r: MetricsReport) -> dict:
    return {
        "schema": METRICS_SCHEMA,
        "per_class_iou": r.iou_by_name(),
        "miou": r.miou,
        "excluded_class_ids": r.excluded_class_ids,
        "pixels_scored": r.pixels_scored,
        "metadata": r.metadata,
    }


def _table_struct(t: ComparisonTable) -> dict:
    return {
        "schema": COMPARISON_SCHEMA,
        "class_names": t.class_names,
        "excluded_class_ids": t.excluded_class_ids,
        "baseline": t.baseline,
        "rows": [{"name": r.name, "per_class_iou": r.per_class_iou, "miou": r.miou} for r in t.rows],
        "deltas": t.deltas(),
    }


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _aligned(rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_report(obj, fmt: str = "structured-text") -> str:
    """Serialize a ``MetricsReport`` or ``ComparisonTable``.

    structured-text is versioned JSON (``parse_report`` reads it back),
    delimited is CSV, human-readable is an aligned table in percent.
    """
    if fmt not in FORMATS:
        raise ContractError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    if isinstance(obj, MetricsReport):
        if fmt == "structured-text":
            return json.dumps(_metrics_struct(obj), indent=2) + "\n"
        if fmt == "delimited":
            rows = [["class_id", "class_name", "iou"]]
            rows += [[i, n, "" if v is None else repr(v)] for i, (n, v) in enumerate(zip(obj.class_names, obj.per_class_iou))]
            rows.append(["", "mIoU", repr(obj.miou)])
            return _csv(rows)
        rows = [["Class", "IoU (%)"]]
        rows += [[n + (" *" if i in obj.excluded_class_ids else ""), _pct(v)]
                 for i, (n, v) in enumerate(zip(obj.class_names, obj.per_class_iou))]
        rows.append(["mIoU", _pct(obj.miou)])
        return (f"{obj.name} ({obj.metadata.get('split', '')}, {obj.pixels_scored} px)\n"
                + _aligned(rows) + "* excluded from mIoU\n")

    if isinstance(obj, ComparisonTable):
        if fmt == "structured-text":
            return json.dumps(_table_struct(obj), indent=2) + "\n"
        header = ["Method"] + [obj.class_names[c] for c in obj.scored] + ["mIoU"]
        body = [[r.name] + [_pct(r.per_class_iou[c]) for c in obj.scored] + [_pct(r.miou)] for r in obj.rows]
        if fmt == "delimited":
            rows = [header] + body
            for name, d in obj.deltas().items():
                rows.append([f"{name} - {obj.baseline} (abs)"] + [_pct(v) for v in d["absolute"].values()])
                rows.append([f"{name} / {obj.baseline} - 1 (rel %)"] +
                            ["-" if v is None else f"{100 * v:.2f}" for v in d["relative"].values()])
            return _csv(rows)
        out = _aligned([header] + body)
        deltas = obj.deltas()
        if deltas:
            drows = [["Change vs " + obj.baseline] + header[1:]]
            for name, d in deltas.items():
                drows.append([name + " (pp)"] + [_pct(v) for v in d["absolute"].values()])
                drows.append([name + " (%)"] + ["-" if v is None else f"{100 * v:+.2f}" for v in d["relative"].values()])
            out += "\n" + _aligned(drows)
        return out
    raise ContractError(f"cannot render {type(obj).__name__}")


def parse_report(text: str):
    """Inverse of ``render_report(..., "structured-text")``."""
    d = json.loads(text)
    schema = d.get("schema")
    if schema == METRICS_SCHEMA:
        names = list(d["per_class_iou"])
        return MetricsReport(list(d["per_class_iou"].values()), names, d["miou"], d["excluded_class_ids"],
                             d["pixels_scored"], d["metadata"])
    if schema == COMPARISON_SCHEMA:
        rows = [ComparisonRow(r["name"], r["per_class_iou"], r["miou"]) for r in d["rows"]]
        return ComparisonTable(d["class_names"], d["excluded_class_ids"], d["baseline"], rows)
    raise ContractError(f"unknown report schema {schema!r}")


def load_report(path) -> MetricsReport:
    """Read a metrics report; ``miou`` is recomputed and must match what was stored."""
    report = parse_report(Path(path).read_text())
    if not isinstance(report, MetricsReport):
        raise ContractError(f"{path} is not a metrics report")
    recomputed = mean_iou(report.per_class_iou, report.excluded_class_ids)
    if not math.isclose(recomputed, report.miou, abs_tol=1e-9):
        raise ContractError(f"{path}: stored mIoU {report.miou} disagrees with per-class mean {recomputed}")
    return report


def chart_data(table: ComparisonTable) -> str:
    """Long-format CSV of per-class changes for external bar charts."""
    rows = [["method", "baseline", "class", "absolute_pp", "relative_pct"]]
    for name, d in table.deltas().items():
        for k in d["absolute"]:
            a, r = d["absolute"][k], d["relative"][k]
            rows.append([name, table.baseline, k, "" if a is None else f"{100 * a:.4f}",
                         "" if r is None else f"{100 * r:.4f}"])
    return _csv(rows)

"""Dataset ingestion, preprocessing and paired image/mask augmentation.

Images travel as ``H x W x 3`` float32 arrays in ``[0, 1]`` and masks as
``H x W`` integer label maps whose values are class ids.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from torch.utils.data import Dataset

from .catalog import ClassCatalog
from .errors import ContractError, DataError, EmptyIndexError, InvalidLabelError, UnpairedFilesError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png", ".tif", ".tiff")


@dataclass
class DatasetLayout:
    """Where a split's images and masks live and how their filenames pair up.

    The defaults follow FloodNet-Supervised_v1.0::

        <root>/train/train-org-img/6467.jpg
        <root>/train/train-label-img/6467_lab.png

    ``image_dir``/``mask_dir`` are formatted with ``split``; an image with stem
    ``X`` pairs with the mask ``X + mask_suffix + mask_ext``.
    """

    image_dir: str = "{split}/{split}-org-img"
    mask_dir: str = "{split}/{split}-label-img"
    mask_suffix: str = "_lab"
    mask_ext: str = ".png"

    def image_root(self, root: Path, split: str) -> Path:
        return Path(root) / self.image_dir.format(split=split)

    def mask_root(self, root: Path, split: str) -> Path:
        return Path(root) / self.mask_dir.format(split=split)


@dataclass(frozen=True)
class IndexEntry:
    sample_id: str
    image_path: Path
    mask_path: Path


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]
    split: str = "train"

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[IndexEntry]:
        return iter(self.entries)

    def __getitem__(self, i) -> IndexEntry:
        return self.entries[i]

    @property
    def sample_ids(self) -> list[str]:
        return [e.sample_id for e in self.entries]

    def subset(self, sample_ids: Sequence[str]) -> "DatasetIndex":
        wanted = set(sample_ids)
        return DatasetIndex([e for e in self.entries if e.sample_id in wanted], self.split)


def scan_dataset(root, split: str = "train", layout: DatasetLayout | None = None) -> DatasetIndex:
    """Pair every image of ``split`` with its mask.

    Raises:
        UnpairedFilesError: an image has no mask, or a mask has no image.
        EmptyIndexError: the split holds no images.
        DataError: the split's directories do not exist.
    """
    if split not in SPLITS:
        raise ContractError(f"unknown split {split!r}; expected one of {SPLITS}")
    layout = layout or DatasetLayout()
    root = Path(root)
    img_root, mask_root = layout.image_root(root, split), layout.mask_root(root, split)
    for d in (img_root, mask_root):
        if not d.is_dir():
            raise DataError(f"missing {split} directory: {d}")

    images = sorted(p for p in img_root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    masks = {p.name: p for p in mask_root.iterdir() if p.suffix.lower() == layout.mask_ext}
    if not images:
        raise EmptyIndexError(f"no images found for split {split!r} under {img_root}")

    entries, unpaired = [], []
    for img in images:
        mask = masks.pop(img.stem + layout.mask_suffix + layout.mask_ext, None)
        if mask is None:
            unpaired.append(img)
        else:
            entries.append(IndexEntry(img.stem, img, mask))
    # whatever is left in ``masks`` has no image
    unpaired.extend(masks.values())
    if unpaired:
        raise UnpairedFilesError(unpaired)

    ids = [e.sample_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"duplicate sample ids in {img_root}")
    return DatasetIndex(entries, split)


# ---------------------------------------------------------------------------
# preprocessing

@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W int64 class ids
    sample_id: str = ""

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ContractError(f"image {self.image.shape} and mask {self.mask.shape} differ spatially")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as e:
        raise OSError(f"cannot read mask {path}: {e}") from e
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr


def write_mask(path, mask: np.ndarray):
    """Store a label map as a single-channel 8-bit PNG with value = class id."""
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def check_labels(mask: np.ndarray, num_classes: int):
    if mask.size and (mask.min() < 0 or mask.max() >= num_classes):
        bad = np.unique(mask[(mask < 0) | (mask >= num_classes)])
        raise InvalidLabelError(f"mask labels {bad.tolist()} outside 0..{num_classes - 1}")


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize to ``(height, width)``; never invents labels."""
    h, w = size
    if mask.shape == (h, w):
        return mask.astype(np.int64, copy=True)
    im = Image.fromarray(mask.astype(np.uint8), mode="L")
    return np.asarray(im.resize((w, h), Image.NEAREST), dtype=np.int64)


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bicubic resize of a float ``H x W x 3`` image, clipped to [0, 1]."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image.astype(np.float32, copy=True)
    channels = [
        np.asarray(Image.fromarray(np.ascontiguousarray(image[..., c], dtype=np.float32), mode="F")
                   .resize((w, h), Image.BICUBIC))
        for c in range(image.shape[2])
    ]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def preprocess(raw_image: np.ndarray, raw_mask: np.ndarray, target: int = 448,
               num_classes: int = 10, sample_id: str = "") -> Sample:
    """Resize an 8-bit image/mask pair to ``target x target``.

    The image is resampled bicubically on its 8-bit values and then scaled
    to [0, 1]; the mask uses nearest neighbour so its label set can only shrink.
    """
    raw_image = np.asarray(raw_image)
    raw_mask = np.asarray(raw_mask)
    if raw_image.ndim != 3 or raw_image.shape[2] != 3 or min(raw_image.shape[:2]) < 1:
        raise ContractError(f"expected an H x W x 3 image, got {raw_image.shape}")
    if raw_mask.shape != raw_image.shape[:2]:
        raise ContractError(f"mask {raw_mask.shape} does not match image {raw_image.shape[:2]}")
    check_labels(raw_mask, num_classes)

    im = Image.fromarray(raw_image.astype(np.uint8), mode="RGB")
    if im.size != (target, target):
        im = im.resize((target, target), Image.BICUBIC)
    image = np.asarray(im, dtype=np.float32) / 255.0
    return Sample(image, resize_mask(raw_mask, (target, target)), sample_id)


def load_sample(entry: IndexEntry, target: int = 448, num_classes: int = 10) -> Sample:
    return preprocess(read_image(entry.image_path), read_mask(entry.mask_path), target,
                      num_classes, entry.sample_id)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentationConfig:
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    zoom_range: tuple[float, float] = (0.8, 1.25)
    seed: int = 0

    def __post_init__(self):
        self.zoom_range = tuple(float(z) for z in self.zoom_range)
        lo, hi = self.zoom_range
        if not 0 < lo <= hi:
            raise ContractError(f"zoom_range must satisfy 0 < min <= max, got {self.zoom_range}")
        for p in (self.hflip_prob, self.vflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"flip probability {p} outside [0, 1]")


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample random stream, independent of loading order or worker."""
    digest = hashlib.sha256(sample_id.encode()).digest()
    return np.random.default_rng([seed, epoch, int.from_bytes(digest[:8], "little")])


def hflip(sample: Sample) -> Sample:
    return Sample(sample.image[:, ::-1].copy(), sample.mask[:, ::-1].copy(), sample.sample_id)


def vflip(sample: Sample) -> Sample:
    return Sample(sample.image[::-1].copy(), sample.mask[::-1].copy(), sample.sample_id)


def _center_fit(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Center-crop or zero-pad the leading two axes to ``(h, w)``."""
    out = np.zeros((h, w) + arr.shape[2:], dtype=arr.dtype)
    ah, aw = arr.shape[:2]
    # offsets into the source (crop) and into the output (pad)
    sy, sx = max(0, (ah - h) // 2), max(0, (aw - w) // 2)
    dy, dx = max(0, (h - ah) // 2), max(0, (w - aw) // 2)
    ch, cw = min(h, ah), min(w, aw)
    out[dy:dy + ch, dx:dx + cw] = arr[sy:sy + ch, sx:sx + cw]
    return out


def zoom(sample: Sample, scale: float) -> Sample:
    """Scale about the image center, keeping the output size.

    Zooming in crops the enlarged center; zooming out pads with zeros, which
    the mask reads as background.
    """
    if scale == 1.0:
        return Sample(sample.image.copy(), sample.mask.copy(), sample.sample_id)
    h, w = sample.mask.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
    image = _center_fit(resize_image(sample.image, (nh, nw)), h, w)
    mask = _center_fit(resize_mask(sample.mask, (nh, nw)), h, w)
    return Sample(image, mask, sample.sample_id)


def augment(sample: Sample, cfg: AugmentationConfig, rng: np.random.Generator) -> Sample:
    """Random horizontal flip, vertical flip and zoom, shared by image and mask."""
    # draw everything up front so the stream consumption is fixed
    do_h, do_v, z = rng.random(), rng.random(), rng.random()
    lo, hi = cfg.zoom_range
    scale = float(np.clip(lo + z * (hi - lo), lo, hi))
    if do_h < cfg.hflip_prob:
        sample = hflip(sample)
    if do_v < cfg.vflip_prob:
        sample = vflip(sample)
    return zoom(sample, scale)


# ---------------------------------------------------------------------------
# pixel statistics

@dataclass
class PixelCounts:
    counts: np.ndarray
    pixels: int = field(default=-1)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.pixels < 0:
            self.pixels = int(self.counts.sum())
        if int(self.counts.sum()) != self.pixels:
            raise ValueError("class counts do not add up to the scanned pixel total")

    def __add__(self, other: "PixelCounts") -> "PixelCounts":
        return PixelCounts(self.counts + other.counts, self.pixels + other.pixels)

    def tolist(self) -> list[int]:
        return self.counts.tolist()


def count_mask(mask: np.ndarray, num_classes: int) -> np.ndarray:
    check_labels(mask, num_classes)
    return np.bincount(np.asarray(mask, dtype=np.int64).ravel(), minlength=num_classes)


def class_pixel_counts(index: DatasetIndex, catalog: ClassCatalog | None = None,
                       target: int | None = 448) -> PixelCounts:
    """Count pixels per class over a split, on masks resized to ``target``.

    ``target=None`` counts at native resolution.
    """
    n = (catalog or ClassCatalog.default()).num_classes
    total = np.zeros(n, dtype=np.int64)
    for entry in index:
        mask = read_mask(entry.mask_path)
        if target is not None:
            mask = resize_mask(mask, (target, target))
        total += count_mask(mask, n)
    return PixelCounts(total)


# ---------------------------------------------------------------------------
# torch glue

class SegmentationDataset(Dataset):
    """Preprocessed (and optionally augmented) samples as tensors.

    Items are ``(image, mask, position)`` where ``image`` is ``H x W x 3``
    float32 and ``mask`` is ``H x W`` int64. Augmentation draws from
    ``sample_rng(seed, sample_id, epoch)``; set ``epoch`` before each pass.
    """

    def __init__(self, index: DatasetIndex, input_size: int = 448, num_classes: int = 10,
                 augmentation: AugmentationConfig | None = None, cache: bool = True):
        self.index = index
        self.input_size = input_size
        self.num_classes = num_classes
        self.augmentation = augmentation
        self.epoch = 0
        self._cache = {} if cache else None

    def __len__(self):
        return len(self.index)

    def _base(self, i) -> Sample:
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        s = load_sample(self.index[i], self.input_size, self.num_classes)
        if self._cache is not None:
            self._cache[i] = s
        return s

    def __getitem__(self, i):
        s = self._base(i)
        if self.augmentation is not None:
            s = augment(s, self.augmentation, sample_rng(self.augmentation.seed, s.sample_id, self.epoch))
        return torch.from_numpy(np.ascontiguousarray(s.image)), torch.from_numpy(s.mask.astype(np.int64)), i

"""Frozen patch-embedding backbones.

Two kinds share one interface: the pretrained ViT-S/14 self-supervised model
(loaded through an adapter) and a deterministic stub that derives patch
features from image statistics so tests never need weights or network.
Either way the backbone is inference-only: no gradients, eval-mode
normalization, parameters flagged ``requires_grad=False``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import BackboneLoadError, ContractError

log = logging.getLogger(__name__)

BACKBONE_KINDS = ("pretrained_vit_s14", "deterministic_stub")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class BackboneSpec:
    kind: str = "pretrained_vit_s14"
    patch_size: int = 14
    embed_dim: int = 384
    frozen: bool = True
    weights_locator: str | None = "facebook/dinov2-small"
    seed: int = 0  # stub projection seed

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ContractError(f"unknown backbone kind {self.kind!r}; expected one of {BACKBONE_KINDS}")
        if not self.frozen:
            raise ContractError("backbones are always frozen")
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ContractError("patch_size and embed_dim must be >= 1")

    @classmethod
    def stub(cls, patch_size: int = 14, embed_dim: int = 384, seed: int = 0) -> "BackboneSpec":
        return cls("deterministic_stub", patch_size, embed_dim, True, None, seed)


@dataclass
class PatchEmbeddingGrid:
    data: torch.Tensor  # B x H/p x W/p x E
    patch_size: int
    source: str

    @property
    def shape(self):
        return tuple(self.data.shape)


class FrozenBackbone(nn.Module):
    """Base class: maps NCHW images in [0, 1] to ``B x H/p x W/p x E``."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.patch_size = spec.patch_size
        self.embed_dim = spec.embed_dim

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return super().train(False)

    def train(self, mode: bool = True):
        # normalization layers stay in inference behaviour regardless of the parent's mode
        return super().train(False)

    def check_input(self, images: torch.Tensor):
        h, w = images.shape[-2:]
        p = self.patch_size
        if h % p or w % p:
            raise ContractError(f"image size {h}x{w} is not divisible by the patch size p={p}")

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.check_input(images)
        with torch.no_grad():
            return self.embed(images)


class StubBackbone(FrozenBackbone):
    """Content-derived patch features.

    Per patch: channel means and variances plus sinusoidal position codes,
    projected to ``embed_dim`` by a fixed seeded matrix and layer-normalized.
    """

    n_stats = 10

    def __init__(self, spec: BackboneSpec):
        super().__init__(spec)
        g = torch.Generator().manual_seed(spec.seed)
        proj = torch.randn(self.n_stats, spec.embed_dim, generator=g) / math.sqrt(self.n_stats)
        self.projection = nn.Parameter(proj, requires_grad=False)
        self.freeze()

    def embed(self, images):
        b, c, h, w = images.shape
        p = self.patch_size
        gh, gw = h // p, w // p
        patches = images.reshape(b, c, gh, p, gw, p)
        mean = patches.mean(dim=(3, 5))
        var = patches.var(dim=(3, 5), unbiased=False)
        ys = torch.arange(gh, dtype=images.dtype, device=images.device) / max(gh, 1)
        xs = torch.arange(gw, dtype=images.dtype, device=images.device) / max(gw, 1)
        yy, xx = torch.meshgrid(ys, xs, indexing="ij")
        pos = torch.stack([torch.sin(math.pi * yy), torch.cos(math.pi * yy),
                           torch.sin(math.pi * xx), torch.cos(math.pi * xx)]).expand(b, 4, gh, gw)
        # brighten the color stats so they dominate the position code
        stats = torch.cat([4.0 * (mean - 0.5), 8.0 * var, pos], dim=1).permute(0, 2, 3, 1)
        feats = stats @ self.projection.to(images.dtype)
        return F.layer_norm(feats, (self.embed_dim,))


class ViTAdapter(FrozenBackbone):
    """Pretrained self-supervised ViT returning its final normalized patch tokens.

    ``weights_locator`` is either a Hugging Face model id / local directory
    readable by ``transformers.Dinov2Model.from_pretrained``, or
    ``hub:<name>`` for ``torch.hub.load("facebookresearch/dinov2", name)``.
    The class token (and any register tokens) are dropped.
    """

    def __init__(self, spec: BackboneSpec, model: nn.Module | None = None):
        super().__init__(spec)
        self.source = "hf"
        self.model = model if model is not None else self._load(spec.weights_locator)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.freeze()

    def _load(self, locator):
        if not locator:
            raise BackboneLoadError("pretrained backbone needs a weights_locator")
        try:
            if locator.startswith("hub:"):
                self.source = "hub"
                return torch.hub.load("facebookresearch/dinov2", locator[4:])
            from transformers import Dinov2Model
            model = Dinov2Model.from_pretrained(locator)
        except Exception as e:  # noqa: BLE001 - any loader failure is a load error
            raise BackboneLoadError(f"cannot load backbone weights from {locator!r}: {e}") from e
        cfg = model.config
        if cfg.patch_size != self.patch_size or cfg.hidden_size != self.embed_dim:
            raise BackboneLoadError(
                f"{locator!r} has patch {cfg.patch_size} / width {cfg.hidden_size}, "
                f"spec expects {self.patch_size} / {self.embed_dim}")
        return model

    def embed(self, images):
        b, _, h, w = images.shape
        x = (images - self.mean) / self.std
        if self.source == "hub":
            tokens = self.model.forward_features(x)["x_norm_patchtokens"]
        else:
            hidden = self.model(pixel_values=x).last_hidden_state
            n_reg = getattr(self.model.config, "num_register_tokens", 0) or 0
            tokens = hidden[:, 1 + n_reg:]
        return tokens.reshape(b, h // self.patch_size, w // self.patch_size, -1)


def build_backbone(spec: BackboneSpec) -> FrozenBackbone:
    if spec.kind == "deterministic_stub":
        return StubBackbone(spec)
    return ViTAdapter(spec)


def extract_patch_embeddings(backbone: FrozenBackbone, images) -> PatchEmbeddingGrid:
    """Patch grid for channel-last ``B x H x W x 3`` images in [0, 1]."""
    images = torch.as_tensor(images)
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ContractError(f"expected B x H x W x 3 images, got {tuple(images.shape)}")
    data = backbone(images.permute(0, 3, 1, 2).float())
    return PatchEmbeddingGrid(data, backbone.patch_size, backbone.spec.kind)


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer (names, shapes and raw bytes)."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        arr = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def assert_frozen(before_snapshot: str, after_snapshot: str) -> bool:
    """True iff two parameter digests are identical."""
    return before_snapshot == after_snapshot

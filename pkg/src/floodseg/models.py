"""U-Net and DeepLabV3 segmentation models with optional frozen patch-feature fusion.

Public tensors are channel-last: models take ``B x H x W x 3`` images in
[0, 1] and return ``B x H x W x C`` per-pixel class probabilities. Internally
everything runs NCHW.

U-Net stage plan (input 448)::

    448x448x64 -pool-> 224x224x128 -pool-> 112x112x256 -pool-> 56x56x256
    [fused: ++ projected patch grid 32x32 -> 56x56x512]  -> bottleneck 56x56x512
    decoder: 2x transposed conv + skip, three times, -> 448x448x64 -> 1x1 head

DeepLabV3: ResNet-50 at output stride 16 -> ASPP 28x28x256
    [fused: ++ projected patch grid 32x32 -> 28x28x256, 3x3 conv 512 -> 256]
    -> 3x3 conv, 1x1 classifier, bicubic upsample, softmax
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet50
from torchvision.models._utils import IntermediateLayerGetter

from .backbones import BackboneSpec, FrozenBackbone, build_backbone, parameter_digest
from .errors import ContractError

log = logging.getLogger(__name__)

VARIANTS = ("unet", "unet_fused", "deeplabv3", "deeplabv3_fused")


@dataclass
class ModelConfig:
    variant: str = "unet_fused"
    num_classes: int = 10
    input_size: int = 448
    unet_channels: tuple[int, ...] = (64, 128, 256)
    bottleneck_channels: int = 512
    deeplab_aspp_channels: int = 256
    aspp_rates: tuple[int, ...] = (6, 12, 18)
    deeplab_pretrained: str | None = None  # None, "imagenet", or a state-dict path
    backbone: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneSpec(**self.backbone)
        self.unet_channels = tuple(int(c) for c in self.unet_channels)
        self.aspp_rates = tuple(int(r) for r in self.aspp_rates)
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_classes < 2:
            raise ContractError("num_classes must be >= 2")
        if self.fused and self.input_size % self.backbone.patch_size:
            raise ContractError(f"input_size {self.input_size} is not divisible by the "
                                f"patch size p={self.backbone.patch_size}")
        stride = 2 ** len(self.unet_channels) if self.family == "unet" else 16
        if self.input_size % stride:
            raise ContractError(f"input_size {self.input_size} must be divisible by {stride} for {self.variant}")

    @property
    def fused(self) -> bool:
        return self.variant.endswith("_fused")

    @property
    def family(self) -> str:
        return self.variant.split("_")[0]


def conv_bn_relu(cin, cout, kernel=3, dilation=1):
    pad = dilation * (kernel // 2)
    return nn.Sequential(nn.Conv2d(cin, cout, kernel, padding=pad, dilation=dilation, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def double_conv(cin, cout):
    return nn.Sequential(conv_bn_relu(cin, cout), conv_bn_relu(cout, cout))


def resample(x: torch.Tensor, size) -> torch.Tensor:
    """Bicubic spatial resize of an NCHW map (no-op when already ``size``)."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=tuple(size), mode="bicubic", align_corners=False)


class EmbeddingProjector(nn.Module):
    """1x1 conv from the embedding width to ``out_channels``, then bicubic resize."""

    def __init__(self, embed_dim: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(embed_dim, out_channels, kernel_size=1, stride=1)

    def forward(self, grid: torch.Tensor, target_hw) -> torch.Tensor:
        if min(target_hw) < 1:
            raise ContractError(f"target size must be positive, got {target_hw}")
        x = self.conv(grid.permute(0, 3, 1, 2))
        return resample(x, target_hw)


def project_embeddings(projector: EmbeddingProjector, grid, target_hw) -> torch.Tensor:
    """Channel-last wrapper: ``B x h x w x E`` -> ``B x th x tw x out``."""
    data = grid.data if hasattr(grid, "data") and not isinstance(grid, torch.Tensor) else grid
    return projector(data, target_hw).permute(0, 2, 3, 1)


class ASPP(nn.Module):
    def __init__(self, cin: int, cout: int = 256, rates=(6, 12, 18)):
        super().__init__()
        self.branches = nn.ModuleList([conv_bn_relu(cin, cout, kernel=1)] +
                                      [conv_bn_relu(cin, cout, dilation=r) for r in rates])
        # no BatchNorm on the 1x1 pooled branch: it cannot normalize a single value per channel
        self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Conv2d(cin, cout, 1), nn.ReLU(inplace=True))
        self.project = conv_bn_relu(cout * (len(rates) + 2), cout, kernel=1)

    def forward(self, x):
        feats = [b(x) for b in self.branches]
        feats.append(resample(self.pool(x), x.shape[-2:]))
        return self.project(torch.cat(feats, dim=1))


class SegmentationModel(nn.Module):
    """Shared plumbing: input checks, frozen backbone handling, channel-last I/O."""

    # parameter-name prefixes that exist (or change shape) only because of fusion
    fusion_prefixes: tuple[str, ...] = ("backbone.", "projector.")

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone: FrozenBackbone | None = build_backbone(cfg.backbone) if cfg.fused else None

    def check_images(self, images: torch.Tensor):
        s = self.cfg.input_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (s, s, 3):
            raise ContractError(f"expected B x {s} x {s} x 3 images, got {tuple(images.shape)}")

    def patch_grid(self, x_nchw: torch.Tensor) -> torch.Tensor:
        return self.backbone(x_nchw)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def named_trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def backbone_digest(self) -> str | None:
        return parameter_digest(self.backbone) if self.backbone is not None else None

    def state_dict_without_backbone(self) -> dict:
        return {k: v for k, v in self.state_dict().items() if not k.startswith("backbone.")}

    def init_weights(self, skip: tuple[str, ...] = ()):
        """Fan-in scaled init for every trainable conv outside ``skip`` prefixes."""
        for name, m in self.named_modules():
            if name.startswith(("backbone",) + skip):
                continue
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        self.check_images(images)
        x = images.permute(0, 3, 1, 2).contiguous()
        logits = self.logits(x)
        return torch.softmax(logits, dim=1).permute(0, 2, 3, 1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class UNet(SegmentationModel):
    fusion_prefixes = ("backbone.", "projector.", "bottleneck.0.0.")

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        chans = cfg.unet_channels
        self.encoder = nn.ModuleList()
        cin = 3
        for c in chans:
            self.encoder.append(double_conv(cin, c))
            cin = c
        self.pool = nn.MaxPool2d(2)
        bottleneck_in = chans[-1]
        if cfg.fused:
            self.projector = EmbeddingProjector(cfg.backbone.embed_dim, cfg.bottleneck_channels)
            bottleneck_in += cfg.bottleneck_channels
        self.bottleneck = double_conv(bottleneck_in, cfg.bottleneck_channels)

        self.up = nn.ModuleList()
        self.decoder = nn.ModuleList()
        cin = cfg.bottleneck_channels
        for c in reversed(chans):
            self.up.append(nn.ConvTranspose2d(cin, c, kernel_size=2, stride=2))
            self.decoder.append(double_conv(2 * c, c))
            cin = c
        self.head = nn.Conv2d(chans[0], cfg.num_classes, kernel_size=1)
        self.init_weights()

    def unet_encode(self, x):
        """Returns the pooled deep features and the per-stage skips (full res first)."""
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        return x, skips

    def fuse_bottleneck(self, deep, grid=None):
        if self.cfg.fused:
            if grid is None:
                raise ContractError("fused variant needs a patch grid")
            dino = self.projector(grid, deep.shape[-2:])
            if dino.shape[-2:] != deep.shape[-2:]:
                raise ContractError("encoder and patch features differ spatially")
            deep = torch.cat([deep, dino], dim=1)
        return self.bottleneck(deep)

    def unet_decode(self, x, skips):
        if len(skips) != len(self.up):
            raise ContractError(f"expected {len(self.up)} skips, got {len(skips)}")
        for up, dec, skip in zip(self.up, self.decoder, reversed(skips)):
            x = up(x)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ContractError(f"decoder stage {tuple(x.shape[-2:])} does not match skip {tuple(skip.shape[-2:])}")
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)

    def logits(self, x):
        grid = self.patch_grid(x) if self.cfg.fused else None
        deep, skips = self.unet_encode(x)
        return self.unet_decode(self.fuse_bottleneck(deep, grid), skips)


class DeepLabV3(SegmentationModel):
    fusion_prefixes = ("backbone.", "projector.", "fusion.")

    def __init__(self, cfg: ModelConfig):
        super().__init__(cfg)
        a = cfg.deeplab_aspp_channels
        resnet = resnet50(weights=None, replace_stride_with_dilation=[False, False, True])
        self.encoder = IntermediateLayerGetter(resnet, return_layers={"layer4": "out"})
        self.aspp = ASPP(2048, a, cfg.aspp_rates)
        if cfg.fused:
            self.projector = EmbeddingProjector(cfg.backbone.embed_dim, a)
            self.fusion = conv_bn_relu(2 * a, a)
        self.head = nn.Sequential(conv_bn_relu(a, a), nn.Conv2d(a, cfg.num_classes, kernel_size=1))
        self.init_weights()
        if cfg.deeplab_pretrained:
            self._load_encoder(cfg.deeplab_pretrained)

    def _load_encoder(self, source: str):
        try:
            if source == "imagenet":
                from torchvision.models import ResNet50_Weights
                state = ResNet50_Weights.IMAGENET1K_V2.get_state_dict(progress=False)
            else:
                state = torch.load(source, map_location="cpu", weights_only=True)
        except Exception as e:  # noqa: BLE001
            log.warning("ResNet-50 weights %r unavailable (%s); keeping random init", source, e)
            return
        missing, _ = self.encoder.load_state_dict(state, strict=False)
        log.info("loaded ResNet-50 encoder weights from %s (%d missing keys)", source, len(missing))

    def deeplab_encode(self, x):
        return self.aspp(self.encoder(x)["out"])

    def fuse(self, feats, grid=None):
        if not self.cfg.fused:
            return feats
        if grid is None:
            raise ContractError("fused variant needs a patch grid")
        dino = self.projector(grid, feats.shape[-2:])
        return self.fusion(torch.cat([feats, dino], dim=1))

    def deeplab_head(self, feats, out_hw):
        return resample(self.head(feats), out_hw)

    def logits(self, x):
        grid = self.patch_grid(x) if self.cfg.fused else None
        return self.deeplab_head(self.fuse(self.deeplab_encode(x), grid), x.shape[-2:])


def build_model(cfg: ModelConfig, seed: int = 0) -> SegmentationModel:
    """Construct a model with deterministic initialization for ``seed``."""
    torch.manual_seed(seed)
    cls = UNet if cfg.family == "unet" else DeepLabV3
    return cls(cfg)


def forward(model: SegmentationModel, images) -> torch.Tensor:
    """Evaluation-mode probabilities for channel-last images."""
    model.eval()
    with torch.no_grad():
        return model(torch.as_tensor(images, dtype=torch.float32))

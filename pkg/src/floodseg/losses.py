"""Class-frequency weighted focal loss, soft dice loss and their mixture.

All losses take ``y_pred`` and ``y_true`` with the class axis last
(``B x H x W x C`` or any ``... x C``). ``y_pred`` holds per-pixel class
probabilities and ``y_true`` is one-hot. Tensors keep their autograd graph;
numpy inputs are converted to float64 tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .catalog import ClassCatalog
from .data import PixelCounts
from .errors import ContractError, InvalidOffsetError

LOG_CLAMP = 1e-7
SIMPLEX_TOL = 1e-5


def _default_alpha():
    return tuple(ClassCatalog.default().alphas.tolist())


@dataclass
class LossConfig:
    """Loss hyperparameters.

    ``alpha`` may be the string ``"auto"``: training then derives it from the
    training split's pixel counts, offset by ``beta``.
    """

    alpha: tuple[float, ...] | str = field(default_factory=_default_alpha)
    gamma: float = 4.0
    epsilon: float = 1e-5
    w: float = 0.5
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.alpha != "auto":
            self.alpha = tuple(float(a) for a in self.alpha)
        if self.beta is not None:
            self.beta = tuple(float(b) for b in self.beta)
        if self.gamma < 0:
            raise ContractError("gamma must be >= 0")
        if self.epsilon <= 0:
            raise ContractError("epsilon must be > 0")
        if not 0.0 <= self.w <= 1.0:
            raise ContractError("w must lie in [0, 1]")
        if self.alpha != "auto" and any(a < 0 for a in self.alpha):
            raise ContractError("alpha entries must be >= 0")


@dataclass
class AlphaDerivationConfig:
    beta: tuple[float, ...] | None = None
    floor_constant: float = 1e-6

    def __post_init__(self):
        if self.beta is not None:
            self.beta = tuple(float(b) for b in self.beta)
            if any(not -0.20 <= b <= 0.20 for b in self.beta):
                raise InvalidOffsetError(f"beta offsets must lie in [-0.20, 0.20], got {self.beta}")


def compute_alpha(counts, cfg: AlphaDerivationConfig | None = None) -> np.ndarray:
    """Inverse-frequency class weights, normalized to sum to one, plus offsets.

    Args:
        counts: pixels per class (``PixelCounts`` or a sequence).
        cfg: optional per-class offsets ``beta`` (default all zero).

    Raises:
        InvalidOffsetError: an offset drives some alpha below zero.
    """
    cfg = cfg or AlphaDerivationConfig()
    if isinstance(counts, PixelCounts):
        counts = counts.counts
    counts = np.asarray(counts, dtype=np.float64)
    inv_freq = 1.0 / (counts + cfg.floor_constant)
    alpha = inv_freq / inv_freq.sum()
    if cfg.beta is not None:
        if len(cfg.beta) != len(alpha):
            raise ContractError(f"beta has {len(cfg.beta)} entries for {len(alpha)} classes")
        alpha = alpha + np.asarray(cfg.beta)
    if (alpha < 0).any():
        raise InvalidOffsetError(f"offsets produced negative alpha: {alpha.tolist()}")
    return alpha


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _check_pair(y_pred, y_true, check_simplex=False):
    y_pred, y_true = _as_tensor(y_pred), _as_tensor(y_true)
    if y_pred.shape != y_true.shape:
        raise ContractError(f"y_pred {tuple(y_pred.shape)} and y_true {tuple(y_true.shape)} differ")
    if check_simplex:
        with torch.no_grad():
            dev = (y_pred.sum(-1) - 1).abs().max().item() if y_pred.numel() else 0.0
        if dev > SIMPLEX_TOL:
            raise ContractError(f"y_pred rows must sum to 1 (max deviation {dev:.2e})")
    return y_pred, y_true.to(y_pred.dtype)


def one_hot(labels, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """``... `` integer label map -> ``... x C`` one-hot tensor."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.one_hot(labels, num_classes).to(dtype)


def weighted_focal_loss(y_pred, y_true, alpha: Sequence[float], gamma: float = 4.0,
                        check_simplex: bool = True) -> torch.Tensor:
    """Mean over pixels of ``sum_c -alpha_c * t_c * log(p_c) * (1 - p_c)**gamma``.

    Probabilities are clamped to ``[1e-7, 1]`` inside the log only.
    """
    y_pred, y_true = _check_pair(y_pred, y_true, check_simplex)
    alpha = torch.as_tensor(np.asarray(alpha, dtype=np.float64), dtype=y_pred.dtype, device=y_pred.device)
    if alpha.shape != y_pred.shape[-1:]:
        raise ContractError(f"alpha has {alpha.numel()} entries for {y_pred.shape[-1]} classes")
    log_p = torch.log(y_pred.clamp(LOG_CLAMP, 1.0))
    per_class = -alpha * y_true * log_p * (1.0 - y_pred) ** gamma
    n_pixels = max(1, y_pred.numel() // y_pred.shape[-1])
    return per_class.sum() / n_pixels


def dice_loss(y_pred, y_true, epsilon: float = 1e-5) -> torch.Tensor:
    """Soft dice over all pixels and classes in a single fraction."""
    y_pred, y_true = _check_pair(y_pred, y_true)
    inter = (y_pred * y_true).sum()
    union = y_pred.sum() + y_true.sum()
    return 1.0 - (2.0 * inter + epsilon) / (union + epsilon)


def total_loss(y_pred, y_true, cfg: LossConfig | None = None, check_simplex: bool = True) -> torch.Tensor:
    cfg = cfg or LossConfig()
    dice = dice_loss(y_pred, y_true, cfg.epsilon)
    focal = weighted_focal_loss(y_pred, y_true, cfg.alpha, cfg.gamma, check_simplex)
    return cfg.w * dice + (1.0 - cfg.w) * focal


def loss_gradient(y_pred, y_true, cfg: LossConfig | None = None) -> np.ndarray:
    """d(total_loss)/d(y_pred), evaluated in float64."""
    p = torch.tensor(np.asarray(_as_tensor(y_pred).detach().cpu(), dtype=np.float64), requires_grad=True)
    t = torch.as_tensor(np.asarray(_as_tensor(y_true).detach().cpu(), dtype=np.float64))
    loss = total_loss(p, t, cfg, check_simplex=False)
    (grad,) = torch.autograd.grad(loss, p)
    return grad.numpy()

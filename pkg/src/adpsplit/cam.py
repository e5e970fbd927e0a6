"""Gradient-weighted class activation maps, negation and thresholding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .models import Chain


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    target_class: int = -1
    source: str = ""
    all_zero: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("heatmap must be 2-D")


@dataclass
class ProtectionMask:
    bits: np.ndarray  # (H, W) bool
    threshold_used: float = float("nan")

    @property
    def coverage(self) -> float:
        return float(self.bits.mean()) if self.bits.size else 0.0


def cam_batch(
    images: torch.Tensor, composition: Chain, target_class: int | torch.Tensor | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Grad-CAM at the last convolutional layer of ``composition``.

    The class score differentiated is the target logit minus the mean of the
    other logits. Returns ``(maps, targets, all_zero)`` where ``maps`` is (B, H, W) upsampled
    to the input resolution and max-normalised per image. The target defaults
    to each image's predicted class.
    """
    x = images if images.dim() == 4 else images.unsqueeze(0)
    index = composition.last_conv_index
    with torch.enable_grad():
        inp = x.detach().clone().requires_grad_(index < 0)
        logits, act = composition.forward_capture(inp, index)
        if target_class is None:
            target = logits.argmax(dim=1)
        else:
            target = torch.as_tensor(target_class).long().expand(len(x))
        picked = logits.gather(1, target[:, None])[:, 0]
        # score the target against the other classes so evidence carried by
        # the competing logit is not lost when a class is predicted "by absence"
        others = (logits.sum(1) - picked) / max(logits.shape[1] - 1, 1)
        score = (picked - others).sum()
        (grad,) = torch.autograd.grad(score, act)
    weights = grad.mean(dim=(2, 3), keepdim=True)
    raw = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    if raw.shape[-2:] != x.shape[-2:]:
        raw = F.interpolate(raw, size=x.shape[-2:], mode="bilinear", align_corners=False)
    raw = raw[:, 0].double()
    peak = raw.flatten(1).max(dim=1).values
    zero = peak <= 0
    maps = torch.where(zero[:, None, None], torch.zeros_like(raw), raw / peak.clamp_min(1e-300)[:, None, None])
    return maps.clamp_(0.0, 1.0).numpy(), target.numpy(), zero.numpy()


def cam(image: torch.Tensor, composition: Chain, target_class: int | None = None, source: str = "") -> Heatmap:
    maps, target, zero = cam_batch(image, composition, target_class)
    return Heatmap(maps[0], int(target[0]), source, bool(zero[0]))


def negate(h):
    """1 - h. Accepts a :class:`Heatmap` or a raw array."""
    if isinstance(h, Heatmap):
        return Heatmap(1.0 - h.values, h.target_class, h.source, h.all_zero)
    return 1.0 - np.asarray(h)


def _values(h) -> np.ndarray:
    return h.values if isinstance(h, Heatmap) else np.asarray(h)


def threshold(h, t: float) -> ProtectionMask:
    if not (0.0 < t <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {t}")
    return ProtectionMask(_values(h) >= t, t)


def region_mass(values: np.ndarray, region_bits: np.ndarray) -> float:
    total = float(values.sum())
    return float(values[region_bits].sum()) / total if total > 0 else 0.0


def save_heatmap_png(h: Heatmap, path, image: torch.Tensor | None = None) -> None:
    """Grayscale heatmap, or a red overlay on ``image`` when given."""
    from PIL import Image

    v = np.clip(h.values, 0, 1)
    if image is None:
        Image.fromarray((v * 255).round().astype(np.uint8), "L").save(path)
        return
    base = image.detach().permute(1, 2, 0).numpy()
    overlay = base * 0.5 + 0.5 * np.stack([v, np.zeros_like(v), np.zeros_like(v)], axis=-1)
    Image.fromarray((np.clip(overlay, 0, 1) * 255).round().astype(np.uint8)).save(path)


def colormap_threshold(level: float = 0.99, cmap: str = "jet", resolution: int = 100_001) -> float:
    """Largest heat whose rendering in ``cmap`` still has a blue channel >= ``level``.

    Translates a "blue value" rule applied to a rendered CAM into a direct
    threshold on the normalised heatmap (about 0.344 for jet at 0.99).
    """
    import matplotlib

    v = np.linspace(0.0, 1.0, resolution)
    blue = matplotlib.colormaps[cmap](v)[:, 2]
    cold = np.flatnonzero(blue >= level)
    if not len(cold):
        raise ValueError(f"{cmap} never reaches blue >= {level}")
    return float(v[cold.max()])

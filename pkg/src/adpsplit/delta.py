"""CAM-guided image protection: the delta-min / delta-max strategies."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage

from . import cam as C
from .models import Chain, SplitModel

STRATEGIES = ("delta_min", "delta_max")
METHODS = ("black_out", "blur_out")
# blur intensities are quoted for 178-pixel-wide face crops
REFERENCE_WIDTH = 178


@dataclass(frozen=True)
class DeltaConfig:
    strategy: str = "delta_min"
    method: str = "blur_out"
    iterations: int = 2
    threshold: float = 0.99
    blur_intensity: float = 40.0
    split_position: str = ""

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not (0.0 < self.threshold <= 1.0):
            raise ValueError("threshold must lie in (0, 1]")
        if self.method == "blur_out" and self.blur_intensity < 1:
            raise ValueError("blur intensity must be >= 1")

    def kernel_width(self, image_width: int) -> int:
        """Box-blur width in pixels at ``image_width``, scaled from the reference width."""
        return max(1, int(round(self.blur_intensity * image_width / REFERENCE_WIDTH)))

    def to_dict(self) -> dict:
        return asdict(self)


def _check(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"resolution mismatch: {sorted(shapes)}")


def delta_min_mask(server_negated, adversary, t: float) -> C.ProtectionMask:
    """Adversary-hot AND server-cold, never including server-hot pixels."""
    neg, adv = C._values(server_negated), C._values(adversary)
    _check(neg, adv)
    bits = C.threshold(adv, t).bits & C.threshold(neg, t).bits
    # at t <= 0.5 a pixel can be both "cold" and "hot" for the server; utility wins.
    # 1 - (1 - v) can round one ulp below v, so the hot test gets a little slack
    bits &= ~((1.0 - neg) >= t - 1e-12)
    return C.ProtectionMask(bits, t)


def delta_max_mask(server_negated, t: float) -> C.ProtectionMask:
    return C.threshold(server_negated, t)


def box_blur(image: torch.Tensor, width: int) -> torch.Tensor:
    """Per-channel box blur of a (3, H, W) or (B, 3, H, W) image, circular boundary."""
    arr = image.detach().cpu().numpy().astype(np.float64)
    size = (1,) * (arr.ndim - 2) + (width, width)
    out = ndimage.uniform_filter(arr, size=size, mode="wrap")
    return torch.from_numpy(out).to(image.dtype)


def apply_method(image: torch.Tensor, mask, method: str, intensity: int = 1) -> torch.Tensor:
    """Protect the masked pixels of ``image``; all other pixels are returned untouched.

    ``intensity`` is the box-blur width in pixels (ignored by black-out).
    Works on (3, H, W) with an (H, W) mask or batched (B, 3, H, W) with (B, H, W).
    """
    bits = mask.bits if isinstance(mask, C.ProtectionMask) else np.asarray(mask, bool)
    if tuple(bits.shape) != tuple(image.shape[:-3]) + tuple(image.shape[-2:]):
        raise ValueError(f"mask shape {bits.shape} does not match image {tuple(image.shape)}")
    if not bits.any():
        return image.clone()
    m = torch.from_numpy(bits).unsqueeze(-3)
    if method == "black_out":
        fill = torch.zeros_like(image)
    elif method == "blur_out":
        fill = box_blur(image, int(intensity))
    else:
        raise ValueError(f"unknown method {method!r}")
    return torch.where(m, fill, image)


@dataclass
class ProtectedPair:
    original: torch.Tensor
    protected: torch.Tensor
    f_original: torch.Tensor
    f_protected: torch.Tensor
    mask_trace: list = field(default_factory=list)  # per-iteration ProtectionMask


@dataclass
class DeltaBatch:
    original: torch.Tensor  # (B, 3, H, W)
    protected: torch.Tensor
    f_original: torch.Tensor  # (B, Z, Y, X)
    f_protected: torch.Tensor
    masks: np.ndarray  # (n, B, H, W) bool

    def __len__(self):
        return len(self.original)

    def pair(self, k: int) -> ProtectedPair:
        return ProtectedPair(
            self.original[k],
            self.protected[k],
            self.f_original[k],
            self.f_protected[k],
            [C.ProtectionMask(m[k]) for m in self.masks],
        )


def run_delta_batch(
    images: torch.Tensor,
    split_model: SplitModel,
    offline_adversary: Chain | None,
    config: DeltaConfig,
) -> DeltaBatch:
    """Iterated mask-and-protect over a batch, recomputing both CAMs each round."""
    if config.strategy == "delta_min" and offline_adversary is None:
        raise ValueError("delta_min requires an offline adversary head")
    if config.strategy == "delta_max" and offline_adversary is not None:
        raise ValueError("delta_max must not consult an adversary")
    client, server = split_model.client, split_model.server
    server_path = client + server
    adv_path = client + offline_adversary if offline_adversary is not None else None
    width = config.kernel_width(images.shape[-1])
    with torch.no_grad():
        f_o = client(images)
    current = images.clone()
    masks = []
    for _ in range(config.iterations):
        server_cold = C.negate(C.cam_batch(current, server_path)[0])
        if config.strategy == "delta_min":
            adv_hot = C.cam_batch(current, adv_path)[0]
            bits = delta_min_mask(server_cold, adv_hot, config.threshold).bits
        else:
            bits = delta_max_mask(server_cold, config.threshold).bits
        current = apply_method(current, bits, config.method, width)
        masks.append(bits)
    with torch.no_grad():
        f_p = client(current)
    return DeltaBatch(images.clone(), current, f_o, f_p, np.stack(masks))


def run_delta(image, split_model, offline_adversary, config) -> ProtectedPair:
    return run_delta_batch(image.unsqueeze(0), split_model, offline_adversary, config).pair(0)

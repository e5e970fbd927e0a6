"""Forward attribute-inference adversaries and the white-box reconstruction attack."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import metrics
from .models import Chain, SplitModel, TrainResult, build_model, split, train_classifier
from .protection import ProtectionPlugin

log = logging.getLogger(__name__)

ROLES = ("offline", "inference")
ARCHITECTURES = ("split", "full")
SUCCESS_MSSSIM = 0.35


class AdversaryInfeasible(ValueError):
    pass


class ReconstructionDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdversaryRole:
    role: str = "inference"
    architecture: str = "split"
    sensitive_attribute: str = ""

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"architecture must be one of {ARCHITECTURES}")


class ShadowDataset:
    """(feature map, sensitive label) pairs produced by a shadow client on demand."""

    def __init__(self, client: Chain, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 128):
        self.client = client
        self.images = images
        self.labels = labels
        self.batch_size = batch_size

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        with torch.no_grad():
            return self.client(self.images[i : i + 1])[0], self.labels[i]

    def batches(self):
        for i in range(0, len(self), self.batch_size):
            with torch.no_grad():
                yield self.client(self.images[i : i + self.batch_size]), self.labels[i : i + self.batch_size]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for maps, labels in self.batches():
            h.update(maps.contiguous().numpy().tobytes())
            h.update(labels.numpy().tobytes())
        return h.hexdigest()


def build_adversary_dataset(client: Chain, images: torch.Tensor, sensitive_labels: torch.Tensor) -> ShadowDataset:
    return ShadowDataset(client, images, sensitive_labels)


def make_adversary(
    split_model: SplitModel,
    family: str,
    architecture: str,
    feature_shape: tuple[int, int, int],
    num_classes: int = 2,
    seed: int = 0,
) -> Chain:
    """A freshly initialised adversary head for maps of ``feature_shape``.

    ``split``: the server suffix topology with new weights. ``full``: a whole
    network of the same family whose first layer takes ``Z`` channels.
    """
    if architecture == "split":
        fresh = build_model(family, num_classes, seed, split_model.input_shape)
        return split(fresh, split_model.split_position).server
    if architecture != "full":
        raise ValueError(f"unknown adversary architecture {architecture!r}")
    net = build_model(family, num_classes, seed, tuple(feature_shape))
    x = torch.zeros((1,) + tuple(feature_shape))
    with torch.no_grad():
        for name, layer in net.layers.items():
            try:
                x = layer(x)
            except RuntimeError as exc:
                raise AdversaryInfeasible(
                    f"full adversary collapses spatially at layer {name} for input {feature_shape}"
                ) from exc
            if x.dim() == 4 and min(x.shape[-2:]) < 1:
                raise AdversaryInfeasible(f"full adversary collapses spatially at layer {name} for input {feature_shape}")
    return Chain(list(net.layers.items()), net.conv_layers)


def train_adversary(
    adversary: Chain,
    client: Chain,
    train: tuple[torch.Tensor, torch.Tensor],
    test: tuple[torch.Tensor, torch.Tensor] | None = None,
    epochs: int = 10,
    seed: int = 0,
    lr: float = 1e-3,
) -> TrainResult:
    """Train ``adversary`` on client feature maps; the client stays frozen."""
    return train_classifier(adversary, train, test, epochs=epochs, lr=lr, seed=seed, transform=client)


def protected_chain(client: Chain, plugin: ProtectionPlugin | None, head):
    if plugin is None:
        return lambda x: head(client(x))
    return lambda x: head(plugin(client(x)))


def evaluate_adversary(
    head,
    split_model: SplitModel,
    plugin: ProtectionPlugin | None,
    xs: torch.Tensor,
    ys: torch.Tensor,
) -> float:
    """Accuracy of ``head`` on client maps, optionally passed through ``plugin``.

    Works for the server suffix as well as for adversaries.
    """
    if plugin is not None and plugin.split_position != split_model.split_position:
        raise ValueError(
            f"plugin fitted at {plugin.split_position!r} but evaluated at {split_model.split_position!r}"
        )
    return metrics.accuracy(protected_chain(split_model.client, plugin, head), xs, ys)


# ---------------------------------------------------------------------------
# backward reconstruction


@dataclass(frozen=True)
class ReconstructionConfig:
    iterations: int = 1500
    step_size: float = 0.05
    tv_weight: float = 1e-3
    init: str = "noise"  # or "gray"; gray sits on the centring point of bias-free nets
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.tv_weight < 0:
            raise ValueError("tv_weight must be >= 0")
        if self.init not in ("gray", "noise"):
            raise ValueError("init must be 'gray' or 'noise'")


def total_variation(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic TV: mean absolute difference between neighbouring pixels."""
    dy = (x[..., 1:, :] - x[..., :-1, :]).abs().mean()
    dx = (x[..., :, 1:] - x[..., :, :-1]).abs().mean()
    return dx + dy


@dataclass
class Reconstruction:
    image: torch.Tensor
    best_loss: float
    best_iteration: int
    loss_trace: list = field(default_factory=list)
    best_trace: list = field(default_factory=list)


def reconstruct(
    client, target: torch.Tensor, config: ReconstructionConfig, image_shape: tuple[int, int, int] = (3, 64, 64)
) -> Reconstruction:
    """Find an image whose client output matches ``target`` (regularised inversion)."""
    gen = torch.Generator().manual_seed(config.seed)
    if config.init == "noise":
        x0 = torch.rand((1,) + tuple(image_shape), generator=gen)
    else:
        x0 = torch.full((1,) + tuple(image_shape), 0.5)
    x = x0.clone().requires_grad_(True)
    tgt = target.detach().unsqueeze(0) if target.dim() == 3 else target.detach()
    opt = torch.optim.Adam([x], lr=config.step_size)
    best, best_it, best_img = float("inf"), 0, x0[0].clone()
    trace, best_trace = [], []
    for it in range(1, config.iterations + 1):
        loss = F.mse_loss(client(x), tgt)
        if config.tv_weight:
            loss = loss + config.tv_weight * total_variation(x)
        value = loss.item()
        if not np.isfinite(value):
            raise ReconstructionDiverged(f"reconstruction loss became non-finite at iteration {it}")
        # loss of the current iterate (pre-step) is tracked, so the best image is the one scored
        if value < best:
            best, best_it, best_img = value, it, x.detach()[0].clone()
        trace.append(value)
        best_trace.append(best)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    return Reconstruction(best_img, best, best_it, trace, best_trace)


@dataclass
class ReconstructionScore:
    msssim: float
    success: bool
    reconstruction: Reconstruction


def evaluate_reconstruction(
    split_model: SplitModel,
    plugin: ProtectionPlugin | None,
    image: torch.Tensor,
    config: ReconstructionConfig,
    params: metrics.MsSsimParams = metrics.MsSsimParams(),
) -> ReconstructionScore:
    """Invert the (optionally protected) map of ``image`` and score it with MS-SSIM."""
    with torch.no_grad():
        f = split_model.client(image.unsqueeze(0))
        if plugin is not None:
            f = plugin(f)
    rec = reconstruct(split_model.client, f[0], config, tuple(image.shape))
    score = metrics.ms_ssim(image, rec.image, params)
    return ReconstructionScore(score, score > SUCCESS_MSSSIM, rec)

"""Plug-in feature-map protections: the delta autoencoder and a PCA projection."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

AE_FACTORS = {"decreasing": 2, "decreasing_deep": 4, "decreasing_extra_deep": 8}


class UnsupportedLayer(ValueError):
    """The requested autoencoder cannot reproduce this split's feature-map shape."""


class NotFitted(RuntimeError):
    pass


class ProtectionPlugin:
    kind = ""

    def __init__(self, split_position: str, shape: tuple[int, int, int]):
        self.split_position = split_position
        self.shape = tuple(shape)
        self.fitted = False

    def _check(self, f: torch.Tensor) -> tuple[torch.Tensor, bool]:
        if not self.fitted:
            raise NotFitted(f"{self.kind} plugin has not been fitted")
        single = f.dim() == 3
        batch = f.unsqueeze(0) if single else f
        if tuple(batch.shape[1:]) != self.shape:
            raise ValueError(f"feature map shape {tuple(batch.shape[1:])} does not match plugin contract {self.shape}")
        return batch, single

    def apply(self, f: torch.Tensor) -> torch.Tensor:
        batch, single = self._check(f)
        out = self._apply(batch)
        return out[0] if single else out

    __call__ = apply

    def _apply(self, batch: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError



class DeltaAutoencoder(nn.Module):
    """Convolutional AE whose latent depth is Z / factor.

    A widening layer (Z -> 2Z) precedes the depth-reducing ones; each further
    variant halves the depth once more (Z/2, Z/4, Z/8). Spatial size is kept.
    Hidden units are leaky so none can die under a high learning rate, and the
    latent and the output are linear.
    """

    def __init__(self, depth: int, variant: str = "decreasing"):
        super().__init__()
        if variant not in AE_FACTORS:
            raise ValueError(f"unknown autoencoder variant {variant!r}")
        factor = AE_FACTORS[variant]
        if depth % factor or depth < factor:
            raise UnsupportedLayer(f"{variant} autoencoder needs depth divisible by {factor}, got Z={depth}")
        widths = [depth, 2 * depth] + [depth // (2**k) for k in range(1, int(np.log2(factor)) + 1)]
        self.encoder = self._stack(widths)
        self.decoder = self._stack(widths[::-1])
        self.latent_depth = widths[-1]

    @staticmethod
    def _stack(widths):
        layers = []
        for a, b in zip(widths[:-1], widths[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), nn.LeakyReLU(0.1)]
        return nn.Sequential(*layers[:-1])

    def forward(self, x):
        return self.decoder(self.encoder(x))


class AdpPlugin(ProtectionPlugin):
    kind = "adp_ae"

    def __init__(self, split_position, shape, variant="decreasing"):
        super().__init__(split_position, shape)
        self.variant = variant
        self.net = DeltaAutoencoder(shape[0], variant).eval()
        self.loss_trace: list[float] = []

    def _apply(self, batch):
        with torch.no_grad():
            return self.net(batch)

    def state(self) -> dict:
        return {"variant": self.variant, "state_dict": self.net.state_dict(), "loss_trace": self.loss_trace}


def train_adp(
    f_original: torch.Tensor,
    f_protected: torch.Tensor,
    variant: str = "decreasing",
    epochs: int = 60,
    split_position: str = "",
    lr: float = 1e-2,
    batch_size: int = 32,
    seed: int = 0,
    on_epoch: Callable[[int, AdpPlugin], None] | None = None,
) -> AdpPlugin:
    """Fit an autoencoder mapping original feature maps onto their protected twins (MSE).

    ``on_epoch(epoch, plugin)`` is called after every epoch with the network in
    eval mode, e.g. to record accuracy curves.
    """
    if f_original.shape != f_protected.shape:
        raise ValueError("original and protected feature maps must share a shape")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        plugin = AdpPlugin(split_position, tuple(f_original.shape[1:]), variant)
    net = plugin.net
    n = len(f_original)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    steps = max(1, epochs * ((n + batch_size - 1) // batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=steps)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, batch_size):
            idx = perm[i : i + batch_size]
            loss = F.mse_loss(net(f_original[idx]), f_protected[idx])
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite autoencoder loss at epoch {epoch + 1}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        plugin.loss_trace.append(total / n)
        if on_epoch is not None:
            net.eval()
            plugin.fitted = True
            on_epoch(epoch + 1, plugin)
    net.eval()
    plugin.fitted = True
    return plugin


class PcaPlugin(ProtectionPlugin):
    """Projection onto the leading ``k_apply`` principal directions of fitted maps."""

    kind = "pca"

    def __init__(self, split_position, shape):
        super().__init__(split_position, shape)
        self.components: np.ndarray | None = None  # (k_max, D), orthonormal rows
        self.singular_values: np.ndarray | None = None
        self.mean: np.ndarray | None = None
        self.k_apply = 0

    @property
    def k_max(self) -> int:
        return 0 if self.components is None else len(self.components)

    def with_components(self, k: int) -> "PcaPlugin":
        if not (1 <= k <= self.k_max):
            raise ValueError(f"k={k} outside [1, {self.k_max}]")
        out = copy.copy(self)
        out.k_apply = int(k)
        return out

    def explained_variance_ratio(self) -> np.ndarray:
        var = self.singular_values**2
        return var / var.sum() if var.sum() > 0 else var

    def _apply(self, batch):
        x = batch.reshape(len(batch), -1).double().numpy() - self.mean
        basis = self.components[: self.k_apply]
        proj = (x @ basis.T) @ basis + self.mean
        return torch.from_numpy(proj).to(batch.dtype).reshape(batch.shape)


def fit_pca(feature_maps: torch.Tensor, k_max: int, split_position: str = "") -> PcaPlugin:
    """Mean-centred reduced SVD of flattened maps; keeps ``min(k_max, N)`` components."""
    n = len(feature_maps)
    if n < 2:
        raise ValueError("PCA needs at least two feature maps")
    x = feature_maps.reshape(n, -1).double().numpy()
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    k = min(int(k_max), len(s))
    plugin = PcaPlugin(split_position, tuple(feature_maps.shape[1:]))
    plugin.components, plugin.singular_values, plugin.mean = vt[:k], s[:k], mean
    plugin.k_apply = k
    plugin.fitted = True
    return plugin


def sweep_components(
    plugin: PcaPlugin, ks: Sequence[int], eval_fn: Callable[[PcaPlugin], tuple[float, float]]
) -> list[tuple[int, float, float]]:
    """``eval_fn(plugin_at_k) -> (server_acc, adversary_acc)`` for each k, in ascending k."""
    out = []
    for k in sorted(set(int(k) for k in ks)):
        if k > plugin.k_max:
            raise ValueError(f"k={k} exceeds fitted k_max={plugin.k_max}")
        s, a = eval_fn(plugin.with_components(k))
        out.append((k, s, a))
    return out


def log_spaced_ks(k_max: int, num: int = 12) -> list[int]:
    return sorted(set(np.unique(np.round(np.geomspace(1, k_max, num)).astype(int)).tolist()))


def save_plugin(plugin: ProtectionPlugin, path, fit_config: dict | None = None) -> None:
    blob = {
        "kind": plugin.kind,
        "split_position": plugin.split_position,
        "shape": plugin.shape,
        "fit_config_hash": hashlib.sha256(json.dumps(fit_config or {}, sort_keys=True).encode()).hexdigest(),
    }
    if isinstance(plugin, AdpPlugin):
        blob.update(plugin.state())
    elif isinstance(plugin, PcaPlugin):
        blob.update(
            components=torch.from_numpy(plugin.components),
            singular_values=torch.from_numpy(plugin.singular_values),
            mean=torch.from_numpy(plugin.mean),
            k_apply=plugin.k_apply,
        )
    torch.save(blob, path)


def load_plugin(path) -> ProtectionPlugin:
    blob = torch.load(path, weights_only=False)
    if blob["kind"] == "adp_ae":
        p = AdpPlugin(blob["split_position"], blob["shape"], blob["variant"])
        p.net.load_state_dict(blob["state_dict"])
        p.loss_trace = list(blob["loss_trace"])
    elif blob["kind"] == "pca":
        p = PcaPlugin(blob["split_position"], blob["shape"])
        p.components = blob["components"].numpy()
        p.singular_values = blob["singular_values"].numpy()
        p.mean = blob["mean"].numpy()
        p.k_apply = int(blob["k_apply"])
    else:
        raise ValueError(f"unknown plugin kind {blob['kind']!r}")
    p.fitted = True
    return p

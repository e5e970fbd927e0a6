"""Layered image classifiers and the client/server split."""
from __future__ import annotations

import copy
import hashlib
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

FAMILIES = ("micro", "vgg_like", "resnet_like")

MICRO_WIDTHS = (16, 16, 16, 16, 32, 32)
MICRO_POOLS: tuple[int, ...] = ()  # no downsampling: CAMs stay at full image resolution
MICRO_SPLITS = ("c2", "c4", "c6")
VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
RESNET50_BLOCKS = (3, 4, 6, 3)


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class SplitError(ValueError):
    pass


def conv_block(cin: int, cout: int, bias: bool = True) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=bias), nn.ReLU())


class Shift(nn.Module):
    """Fixed additive offset, used to center [0, 1] images around zero."""

    def __init__(self, offset: float):
        super().__init__()
        self.offset = offset

    def forward(self, x):
        return x + self.offset


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, cin: int, width: int, stride: int = 1):
        super().__init__()
        cout = width * self.expansion
        self.conv1 = nn.Conv2d(cin, width, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity)


class LayeredClassifier(nn.Module):
    """A classifier whose forward pass is an ordered chain of named layers.

    ``split_positions`` lists the layer names after which the chain may be cut;
    ``"input"`` (cut before the first layer) is always valid as well.
    """

    def __init__(
        self,
        layers: "OrderedDict[str, nn.Module]",
        num_classes: int,
        input_shape: tuple[int, int, int],
        family: str,
        split_positions: Sequence[str] = (),
        conv_layers: Iterable[str] = (),
        seed: int | None = None,
    ):
        super().__init__()
        self.layers = nn.ModuleDict(layers)
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.family = family
        self.split_positions = tuple(split_positions)
        # layers whose output is a spatial activation usable as a CAM source
        self.conv_layers = tuple(conv_layers)
        self.seed = seed
        for p in self.split_positions:
            if p not in self.layers:
                raise ConfigError(f"split position {p!r} is not a layer name")

    @property
    def layer_names(self) -> list[str]:
        return list(self.layers.keys())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers.values():
            x = layer(x)
        return x


def _micro(num_classes, input_shape, in_channels=None):
    cin = input_shape[0] if in_channels is None else in_channels
    layers = OrderedDict()
    # Bias-free convs on a centered image: flat background carries no evidence,
    # so CAM heat stays on the image content that drives the decision.
    for i, w in enumerate(MICRO_WIDTHS, start=1):
        block = conv_block(cin, w, bias=False)
        if i == 1 and in_channels is None:
            block.insert(0, Shift(-0.5))
        layers[f"c{i}"] = block
        cin = w
        if i in MICRO_POOLS:
            layers[f"p{i}"] = nn.MaxPool2d(2)
    layers["gap"] = nn.AdaptiveAvgPool2d(1)
    layers["flatten"] = nn.Flatten()
    # bias-free head: a predicted class always has positive spatial evidence
    layers["fc"] = nn.Linear(cin, num_classes, bias=False)
    convs = [f"c{i}" for i in range(1, len(MICRO_WIDTHS) + 1)]
    return layers, MICRO_SPLITS, convs


def _vgg_like(num_classes, input_shape):
    layers = OrderedDict()
    cin, conv_i, pool_i = input_shape[0], 0, 0
    convs = []
    for v in VGG16_CFG:
        if v == "M":
            pool_i += 1
            layers[f"Pool{pool_i}"] = nn.MaxPool2d(2)
        else:
            conv_i += 1
            name = f"Conv{conv_i:02d}"
            layers[name] = conv_block(cin, v)
            convs.append(name)
            cin = v
    layers["gap"] = nn.AdaptiveAvgPool2d(1)
    layers["flatten"] = nn.Flatten()
    layers["fc"] = nn.Linear(cin, num_classes)
    return layers, ("Conv04", "Conv08", "Conv12"), convs


def _resnet_like(num_classes, input_shape):
    layers = OrderedDict()
    layers["stem"] = nn.Sequential(
        nn.Conv2d(input_shape[0], 64, 7, stride=2, padding=3, bias=False),
        nn.BatchNorm2d(64),
        nn.ReLU(),
        nn.MaxPool2d(3, stride=2, padding=1),
    )
    cin, k = 64, 0
    convs = ["stem"]
    for stage, (n, width) in enumerate(zip(RESNET50_BLOCKS, (64, 128, 256, 512))):
        for j in range(n):
            k += 1
            stride = 2 if (j == 0 and stage > 0) else 1
            name = f"Bonk{k:02d}"
            layers[name] = Bottleneck(cin, width, stride)
            convs.append(name)
            cin = width * Bottleneck.expansion
    layers["gap"] = nn.AdaptiveAvgPool2d(1)
    layers["flatten"] = nn.Flatten()
    layers["fc"] = nn.Linear(cin, num_classes)
    return layers, ("Bonk04", "Bonk08", "Bonk12"), convs


_BUILDERS: dict[str, Callable] = {
    "micro": _micro,
    "vgg_like": _vgg_like,
    "resnet_like": _resnet_like,
}


def build_model(
    family: str,
    num_classes: int = 2,
    seed: int = 0,
    input_shape: tuple[int, int, int] = (3, 64, 64),
) -> LayeredClassifier:
    """Construct a freshly initialised classifier; weights depend only on ``seed``."""
    if family not in _BUILDERS:
        raise ConfigError(f"unknown model family {family!r}; expected one of {FAMILIES}")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        layers, splits, convs = _BUILDERS[family](num_classes, input_shape)
        model = LayeredClassifier(layers, num_classes, input_shape, family, splits, convs, seed)
    return model.eval()


class Chain(nn.Module):
    """An ordered run of named layers; ``conv_flags[i]`` marks spatial (CAM-capable) outputs."""

    def __init__(self, named: Sequence[tuple[str, nn.Module]], conv_layers: Iterable[str] = ()):
        super().__init__()
        convs = set(conv_layers)
        self.names = [n for n, _ in named]
        self.mods = nn.ModuleList([m for _, m in named])
        self.conv_flags = [n in convs for n in self.names]

    def forward(self, x):
        for m in self.mods:
            x = m(x)
        return x

    @property
    def last_conv_index(self) -> int:
        idx = [i for i, f in enumerate(self.conv_flags) if f]
        return idx[-1] if idx else -1

    def forward_capture(self, x, index: int):
        """Forward pass that also returns the output of layer ``index`` (-1: the input)."""
        captured = x if index < 0 else None
        for i, m in enumerate(self.mods):
            x = m(x)
            if i == index:
                captured = x
        return x, captured

    def __add__(self, other: "Chain") -> "Chain":
        out = Chain(list(zip(self.names, self.mods)) + list(zip(other.names, other.mods)))
        out.conv_flags = list(self.conv_flags) + list(other.conv_flags)
        return out


@dataclass
class FeatureMap:
    data: torch.Tensor  # (Z, Y, X)
    origin_split: str

    def __post_init__(self):
        if self.data.dim() != 3 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be rank 3 with positive dims, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass
class SplitModel:
    client: Chain
    server: Chain
    split_position: str
    input_shape: tuple[int, int, int] = (3, 64, 64)

    def __call__(self, x):
        return self.server(self.client(x))


def split(model: LayeredClassifier, position: str) -> SplitModel:
    """Cut ``model`` after layer ``position``. Both halves share the model's modules."""
    names = model.layer_names
    valid = ("input",) + model.split_positions
    if position not in valid:
        raise SplitError(f"invalid split position {position!r}; valid boundaries: {', '.join(valid)}")
    cut = 0 if position == "input" else names.index(position) + 1
    items = list(model.layers.items())
    client = Chain(items[:cut], model.conv_layers)
    server = Chain(items[cut:], model.conv_layers)
    return SplitModel(client, server, position, model.input_shape)


def forward_client(sm: SplitModel, image: torch.Tensor) -> torch.Tensor:
    """Client forward on a single image (3,H,W) or batch (B,3,H,W)."""
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    if tuple(x.shape[1:]) != tuple(sm.input_shape):
        raise ValueError(f"image shape {tuple(x.shape[1:])} does not match input shape {sm.input_shape}")
    with torch.no_grad():
        out = sm.client(x)
    return out[0] if single else out


def feature_map(sm: SplitModel, image: torch.Tensor) -> FeatureMap:
    return FeatureMap(forward_client(sm, image), sm.split_position)


def gradient_wrt_input(
    model: Callable[[torch.Tensor], torch.Tensor],
    image: torch.Tensor,
    objective: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """d objective(model(image)) / d image, same shape as ``image``."""
    x = image.detach().clone().requires_grad_(True)
    out = objective(model(x))
    if out.dim() != 0:
        raise ValueError("objective must return a scalar")
    (grad,) = torch.autograd.grad(out, x, allow_unused=True)
    if grad is None:
        return torch.zeros_like(x)
    return grad


def weights_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    model: nn.Module
    trace: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = float("nan")


class NonFiniteLoss(RuntimeError):
    pass


def predict(model: Callable, x: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Argmax predictions; ties resolve to the lowest class index."""
    preds = []
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            logits = model(x[i : i + batch_size])
            preds.append(torch.argmax(logits, dim=1))
    return torch.cat(preds) if preds else torch.zeros(0, dtype=torch.long)


def train_classifier(
    model: nn.Module,
    train: tuple[torch.Tensor, torch.Tensor],
    test: tuple[torch.Tensor, torch.Tensor] | None = None,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 32,
    weight_decay: float = 0.0,
    seed: int = 0,
    transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
    params: Iterable[nn.Parameter] | None = None,
) -> TrainResult:
    """Adam training with best-epoch selection on held-out accuracy.

    ``transform`` maps raw inputs to the model input (e.g. a frozen client);
    it is applied per batch so feature maps are never materialised in bulk.
    Returns a copy of the best weights; the passed-in module ends in that state too.
    """
    xs, ys = train
    result = TrainResult(model)
    if epochs <= 0:
        return result
    params = list(model.parameters()) if params is None else list(params)
    opt = torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    transform = transform or (lambda t: t)
    evaluate = test if test is not None else train
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, epochs + 1):
        model.train()
        perm = torch.randperm(len(xs), generator=gen)
        correct, total_loss = 0, 0.0
        for i in range(0, len(xs), batch_size):
            idx = perm[i : i + batch_size]
            with torch.no_grad():
                inp = transform(xs[idx])
            logits = model(inp)
            loss = F.cross_entropy(logits, ys[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {i // batch_size}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += (logits.argmax(1) == ys[idx]).sum().item()
        model.eval()
        test_acc = accuracy_of(lambda t: model(transform(t)), *evaluate)
        train_acc = correct / len(xs)
        result.trace.append(
            {"epoch": epoch, "train_loss": total_loss / len(xs), "train_acc": train_acc, "test_acc": test_acc}
        )
        log.debug("epoch %d loss %.4f train %.3f test %.3f", epoch, total_loss / len(xs), train_acc, test_acc)
        if not (test_acc <= result.best_acc):  # first epoch or improvement
            result.best_acc, result.best_epoch = test_acc, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return result


def accuracy_of(model: Callable, xs: torch.Tensor, ys: torch.Tensor) -> float:
    if len(xs) == 0:
        return float("nan")
    return float((predict(model, xs) == ys).float().mean().item())


def save_checkpoint(model: LayeredClassifier, path, config_hash: str = "") -> None:
    torch.save(
        {
            "family": model.family,
            "num_classes": model.num_classes,
            "input_shape": model.input_shape,
            "layer_names": model.layer_names,
            "seed": model.seed,
            "config_hash": config_hash,
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_checkpoint(path) -> LayeredClassifier:
    blob = torch.load(path, weights_only=False)
    model = build_model(blob["family"], blob["num_classes"], blob["seed"] or 0, tuple(blob["input_shape"]))
    if model.layer_names != blob["layer_names"]:
        raise ConfigError("checkpoint layer names do not match the family definition")
    model.load_state_dict(blob["state_dict"])
    return model.eval()


def write_trace_csv(trace: list[dict], path, split_name: str = "") -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "train_acc", "test_acc"])
        for row in trace:
            w.writerow([row["epoch"], split_name, f"{row['train_acc']:.6f}", f"{row['test_acc']:.6f}"])


def set_determinism(seed: int = 0) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)

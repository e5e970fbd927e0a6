"""Balanced binary attribute datasets and the synthetic two-attribute corpus."""
from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage


class DataError(ValueError):
    pass


@dataclass
class Corpus:
    """Images plus a table of binary (0/1) attributes, indexed by string id."""

    ids: list[str]
    attributes: dict[str, np.ndarray]
    images: np.ndarray | None = None  # (N, H, W, 3) uint8, when held in memory
    root: Path | None = None

    def __len__(self):
        return len(self.ids)

    def labels(self, attribute: str) -> np.ndarray:
        if attribute not in self.attributes:
            raise DataError(f"unknown attribute {attribute!r}")
        return self.attributes[attribute]

    def load(self, indices: Sequence[int]) -> torch.Tensor:
        """Images at ``indices`` as float (B, 3, H, W) in [0, 1]."""
        idx = np.asarray(indices, dtype=np.int64)
        if self.images is not None:
            arr = self.images[idx]
        else:
            arr = np.stack([np.asarray(Image.open(self.root / self.ids[i]).convert("RGB")) for i in idx])
        return torch.from_numpy(arr).permute(0, 3, 1, 2).float().div(255.0)


@dataclass
class AttributeDataset:
    ids: list[str]
    images: torch.Tensor
    labels: torch.Tensor
    attribute_name: str
    role: str  # primary | sensitive | delta
    partition: str  # train | test

    def __len__(self):
        return len(self.ids)

    @property
    def xy(self) -> tuple[torch.Tensor, torch.Tensor]:
        return self.images, self.labels


def _pick(rng, pool: np.ndarray, k: int, what: str) -> np.ndarray:
    if len(pool) < k:
        raise DataError(f"insufficient samples for {what}: need {k}, have {len(pool)}")
    return rng.choice(pool, size=k, replace=False)


def _make(corpus, idx, labels, attribute, role, partition) -> AttributeDataset:
    idx = np.asarray(idx, dtype=np.int64)
    return AttributeDataset(
        ids=[corpus.ids[i] for i in idx],
        images=corpus.load(idx) if len(idx) else torch.zeros(0, 3, 1, 1),
        labels=torch.as_tensor(np.asarray(labels), dtype=torch.long),
        attribute_name=attribute,
        role=role,
        partition=partition,
    )


def sample_balanced(
    corpus: Corpus,
    attribute: str,
    n_train: int,
    n_test: int,
    seed: int = 0,
    role: str = "primary",
    exclude: Sequence[str] = (),
) -> tuple[AttributeDataset, AttributeDataset]:
    """Draw balanced, disjoint train/test sets without replacement."""
    if n_train % 2 or n_test % 2:
        raise DataError("balanced sizes must be even")
    y = corpus.labels(attribute)
    rng = np.random.default_rng(seed)
    excluded = np.isin(np.asarray(corpus.ids), np.asarray(list(exclude), dtype=object)) if exclude else np.zeros(len(y), bool)
    chosen = {}
    for label in (0, 1):
        pool = np.flatnonzero((y == label) & ~excluded)
        picked = _pick(rng, pool, (n_train + n_test) // 2, f"{attribute}={label}")
        chosen[label] = (picked[: n_train // 2], picked[n_train // 2 :])
    out = []
    for part, name in ((0, "train"), (1, "test")):
        idx = np.concatenate([chosen[0][part], chosen[1][part]])
        lab = np.concatenate([np.zeros(len(chosen[0][part]), int), np.ones(len(chosen[1][part]), int)])
        order = rng.permutation(len(idx))
        out.append(_make(corpus, idx[order], lab[order], attribute, role, name))
    return out[0], out[1]


def build_delta_dataset(
    corpus: Corpus,
    attributes: Sequence[str],
    n: int,
    seed: int = 0,
    exclude: Sequence[str] = (),
) -> AttributeDataset:
    """``n`` samples split evenly over ``attributes`` x {0, 1}, disjoint from ``exclude``."""
    if not attributes:
        raise DataError("at least one attribute is required")
    per = n // (2 * len(attributes))
    if per * 2 * len(attributes) != n:
        raise DataError(f"n={n} does not split evenly over {len(attributes)} attribute(s) and 2 labels")
    rng = np.random.default_rng(seed)
    taken = np.isin(np.asarray(corpus.ids), np.asarray(list(exclude), dtype=object)) if exclude else np.zeros(len(corpus), bool)
    idx, lab = [], []
    for attr in attributes:
        y = corpus.labels(attr)
        for label in (0, 1):
            pick = _pick(rng, np.flatnonzero((y == label) & ~taken), per, f"delta {attr}={label}")
            taken[pick] = True
            idx.append(pick)
            lab.append(np.full(per, label))
    idx, lab = np.concatenate(idx), np.concatenate(lab)
    order = rng.permutation(len(idx))
    return _make(corpus, idx[order], lab[order], "+".join(attributes), "delta", "train")


def read_attribute_csv(path) -> tuple[list[str], dict[str, np.ndarray]]:
    """Parse a CelebA-style attribute table (-1/1 values) into 0/1 arrays.

    Accepts comma-separated files with a header row (first column = image id)
    and the whitespace ``list_attr_celeba.txt`` layout (count line, name line).
    """
    text = Path(path).read_text().splitlines()
    if text and text[0].strip().isdigit():
        names = text[1].split()
        rows = [line.split() for line in text[2:] if line.strip()]
    else:
        reader = list(csv.reader(text))
        names = reader[0][1:]
        rows = [r for r in reader[1:] if r]
    ids = [r[0] for r in rows]
    vals = np.array([[int(v) for v in r[1:]] for r in rows], dtype=np.int64)
    if vals.size and not np.isin(vals, (-1, 1)).all():
        raise DataError("attribute values must be -1 or 1")
    return ids, {n: (vals[:, j] > 0).astype(np.int64) for j, n in enumerate(names)}


def load_corpus(image_dir, attr_csv) -> Corpus:
    ids, attrs = read_attribute_csv(attr_csv)
    return Corpus(ids=ids, attributes=attrs, root=Path(image_dir))


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    """Two binary attributes, each drawn into its own rectangle (top, left, bottom, right)."""

    image_size: int = 64
    primary_region: tuple[int, int, int, int] = (20, 6, 44, 28)
    sensitive_region: tuple[int, int, int, int] = (20, 36, 44, 58)
    background: float = 0.5
    noise: float = 0.03  # std of the smooth background texture
    smoothness: float = 2.0
    seed: int = 0
    primary_name: str = "stripes"
    sensitive_name: str = "blob_red"

    def __post_init__(self):
        for r in (self.primary_region, self.sensitive_region):
            t, l, b, rt = r
            if not (0 <= t < b <= self.image_size and 0 <= l < rt <= self.image_size):
                raise DataError(f"region {r} outside a {self.image_size}px image")
        if region_gap(self.primary_region, self.sensitive_region) < 4:
            raise DataError("primary and sensitive regions must be disjoint with a >= 4 pixel margin")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def region_gap(a, b) -> int:
    """Chebyshev gap between two rectangles; <= 0 when they overlap."""
    dy = max(b[0] - a[2], a[0] - b[2])
    dx = max(b[1] - a[3], a[1] - b[3])
    return max(dy, dx)


def region_mask(region, size: int) -> np.ndarray:
    m = np.zeros((size, size), bool)
    t, l, b, r = region
    m[t:b, l:r] = True
    return m


def _draw_stripes(img, region, label, rng):
    t, l, b, r = region
    h, w = b - t, r - l
    period = int(rng.integers(5, 7))
    phase = int(rng.integers(0, period))
    lo, hi = rng.uniform(0.0, 0.15), rng.uniform(0.85, 1.0)
    coord = np.arange(h)[:, None] if label else np.arange(w)[None, :]
    on = ((coord + phase) % period) < period // 2
    patch = np.where(np.broadcast_to(on, (h, w)), hi, lo)
    img[t:b, l:r, :] = patch[..., None]


def _draw_blob(img, region, label, rng):
    t, l, b, r = region
    h, w = b - t, r - l
    # rounded colour patch filling most of the region, corners jittered
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2 + rng.uniform(-1, 1), (w - 1) / 2 + rng.uniform(-1, 1)
    ry, rx = rng.uniform(0.46, 0.5) * h, rng.uniform(0.46, 0.5) * w
    inside = np.abs((yy - cy) / ry) ** 4 + np.abs((xx - cx) / rx) ** 4 <= 1.0
    strong, weak = rng.uniform(0.75, 1.0), rng.uniform(0.0, 0.25)
    color = np.array([strong, weak, rng.uniform(0.0, 0.25)]) if label else np.array([weak, rng.uniform(0.0, 0.25), strong])
    # soft rim: a sharp tall outline would read as vertical-edge evidence
    alpha = ndimage.gaussian_filter(inside.astype(float), 2.5)[..., None]
    img[t:b, l:r, :] = (1 - alpha) * img[t:b, l:r, :] + alpha * color


def synth_generate(spec: SyntheticSpec, n: int) -> Corpus:
    """Generate ``n`` images whose attributes are readable only inside their regions.

    The primary attribute is stripe orientation (1 = horizontal); the sensitive
    attribute is blob colour (1 = red, 0 = blue). Labels are independent draws,
    each balanced exactly.
    """
    if n % 2:
        raise DataError("n must be even")
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    y_p = rng.permutation(np.repeat([0, 1], n // 2))
    y_s = rng.permutation(np.repeat([0, 1], n // 2))
    imgs = np.empty((n, s, s, 3), np.uint8)
    for k in range(n):
        field_ = ndimage.gaussian_filter(rng.normal(size=(s, s)), spec.smoothness, mode="wrap")
        field_ *= spec.noise / max(field_.std(), 1e-12)
        img = np.repeat((spec.background + field_)[..., None], 3, axis=2)
        _draw_stripes(img, spec.primary_region, y_p[k], rng)
        _draw_blob(img, spec.sensitive_region, y_s[k], rng)
        imgs[k] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    ids = [f"syn{spec.seed}_{k:06d}.png" for k in range(n)]
    return Corpus(ids=ids, attributes={spec.primary_name: y_p, spec.sensitive_name: y_s}, images=imgs)


def blank_region(images: torch.Tensor, region) -> torch.Tensor:
    out = images.clone()
    t, l, b, r = region
    out[:, :, t:b, l:r] = 0.0
    return out


def save_corpus(corpus: Corpus, out_dir, spec: SyntheticSpec | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(corpus.attributes)
    for i, name in enumerate(corpus.ids):
        Image.fromarray(corpus.images[i]).save(out / name)
    with open(out / "attributes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id"] + names)
        for i, name in enumerate(corpus.ids):
            w.writerow([name] + [1 if corpus.attributes[a][i] else -1 for a in names])
    manifest = {"n": len(corpus), "attributes": names}
    if spec is not None:
        manifest.update(spec_hash=spec.digest(), spec=asdict(spec))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out

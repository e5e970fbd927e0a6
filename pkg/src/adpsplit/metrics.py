"""MS-SSIM, accuracy and the privacy/utility verdict."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

log = logging.getLogger(__name__)

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class MsSsimParams:
    """Per-scale weights double as the contrast/structure exponents; the last
    one is also the luminance exponent at the coarsest scale."""

    weights: tuple[float, ...] = MSSSIM_WEIGHTS
    theta1: float = 0.01
    theta2: float = 0.03
    dynamic_range: float = 1.0
    win_size: int = 11
    sigma: float = 1.5
    window: str = "gaussian"  # or "uniform"

    def __post_init__(self):
        if len(self.weights) < 1 or any(w <= 0 for w in self.weights):
            raise ValueError("need at least one positive scale weight")

    @property
    def scales(self) -> int:
        return len(self.weights)

    @property
    def gamma1(self) -> float:
        return (self.theta1 * self.dynamic_range) ** 2

    @property
    def gamma2(self) -> float:
        return (self.theta2 * self.dynamic_range) ** 2

    @property
    def gamma3(self) -> float:
        return self.gamma2 / 2

    def kernel(self) -> np.ndarray:
        if self.window == "uniform":
            k = np.ones((self.win_size, self.win_size))
        else:
            ax = np.arange(self.win_size) - (self.win_size - 1) / 2
            g = np.exp(-(ax**2) / (2 * self.sigma**2))
            k = np.outer(g, g)
        return k / k.sum()


SINGLE_SCALE = MsSsimParams(weights=(1.0,))


def to_gray(img) -> np.ndarray:
    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    a = a.astype(np.float64)
    if a.ndim == 3:
        if a.shape[0] == 3:
            return np.tensordot(LUMA, a, axes=1)
        if a.shape[0] == 1:
            return a[0]
        raise ValueError(f"unsupported image shape {a.shape}")
    if a.ndim != 2:
        raise ValueError(f"unsupported image shape {a.shape}")
    return a


def _filter(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    win = sliding_window_view(x, k.shape)
    return np.einsum("ijkl,kl->ij", win, k)


def _stats(phi, theta, params):
    if phi.shape != theta.shape:
        raise ValueError(f"shape mismatch: {phi.shape} vs {theta.shape}")
    if min(phi.shape) < params.win_size:
        raise ValueError(f"image {phi.shape} smaller than the {params.win_size}px window")
    k = params.kernel()
    mu_p, mu_t = _filter(phi, k), _filter(theta, k)
    var_p = np.maximum(_filter(phi * phi, k) - mu_p**2, 0.0)
    var_t = np.maximum(_filter(theta * theta, k) - mu_t**2, 0.0)
    cov = _filter(phi * theta, k) - mu_p * mu_t
    return mu_p, mu_t, var_p, var_t, cov


def ssim_components(phi, theta, params: MsSsimParams = SINGLE_SCALE):
    """Local luminance, contrast and structure maps of two grayscale images."""
    phi, theta = to_gray(phi), to_gray(theta)
    mu_p, mu_t, var_p, var_t, cov = _stats(phi, theta, params)
    sd_p, sd_t = np.sqrt(var_p), np.sqrt(var_t)
    g1, g2, g3 = params.gamma1, params.gamma2, params.gamma3
    lum = (2 * mu_p * mu_t + g1) / (mu_p**2 + mu_t**2 + g1)
    con = (2 * sd_p * sd_t + g2) / (var_p + var_t + g2)
    struct = (cov + g3) / (sd_p * sd_t + g3)
    return lum, con, struct


def ssim(phi, theta, params: MsSsimParams = SINGLE_SCALE) -> float:
    lum, con, struct = ssim_components(phi, theta, params)
    return float(np.mean(lum * con * struct))


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _spow(x: float, e: float) -> float:
    # sign-preserving power keeps anti-correlated scales in [-1, 0)
    return float(np.sign(x) * abs(x) ** e)


def feasible_scales(shape, params: MsSsimParams) -> int:
    m, side = 0, min(shape)
    while m < params.scales and side >= params.win_size:
        m += 1
        side //= 2
    return m


@dataclass
class MsSsimResult:
    score: float
    scales_used: int
    per_scale: list = field(default_factory=list)
    warning: str = ""


def ms_ssim_detail(phi, theta, params: MsSsimParams = MsSsimParams()) -> MsSsimResult:
    phi, theta = to_gray(phi), to_gray(theta)
    if phi.shape != theta.shape:
        raise ValueError(f"shape mismatch: {phi.shape} vs {theta.shape}")
    m = feasible_scales(phi.shape, params)
    if m == 0:
        raise ValueError(f"image {phi.shape} smaller than the {params.win_size}px window")
    warning = ""
    weights = np.asarray(params.weights, dtype=np.float64)
    if m < params.scales:
        warning = f"image {phi.shape} supports only {m} of {params.scales} scales; weights renormalised"
        log.info(warning)
        weights = weights[:m] / weights[:m].sum()
    score, per_scale = 1.0, []
    for j in range(m):
        lum, con, struct = ssim_components(phi, theta, params)
        if j < m - 1:
            val = float(np.mean(con * struct))
            phi, theta = _downsample(phi), _downsample(theta)
        else:
            val = float(np.mean(lum * con * struct))
        per_scale.append(val)
        score *= _spow(val, weights[j])
    return MsSsimResult(float(score), m, per_scale, warning)


def ms_ssim(phi, theta, params: MsSsimParams = MsSsimParams()) -> float:
    return ms_ssim_detail(phi, theta, params).score


# ---------------------------------------------------------------------------


def accuracy(model, xs: torch.Tensor, ys: torch.Tensor, batch_size: int = 256) -> float:
    """Fraction of correct argmax predictions (ties go to the lower class index)."""
    if len(xs) == 0:
        raise ValueError("empty dataset")
    correct = 0
    with torch.no_grad():
        for i in range(0, len(xs), batch_size):
            pred = torch.argmax(model(xs[i : i + batch_size]), dim=1)
            correct += int((pred == ys[i : i + batch_size]).sum())
    return correct / len(xs)


@dataclass(frozen=True)
class Thresholds:
    """Operational margins for the three qualitative relations, as fractions."""

    eps_s: float = 0.05
    eps_a: float = 0.20
    eps_gap: float = 0.10


@dataclass
class CriterionReport:
    s_alpha: float
    s_beta: float
    a_alpha: float
    a_beta: float
    thresholds: Thresholds
    server_preserved: bool
    adversary_degraded: bool
    gap_dominates: bool

    @property
    def verdict(self) -> bool:
        return self.server_preserved and self.adversary_degraded and self.gap_dominates

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict
        return d


def judge(s_alpha, s_beta, a_alpha, a_beta, thresholds: Thresholds = Thresholds()) -> CriterionReport:
    s_drop, a_drop = s_alpha - s_beta, a_alpha - a_beta
    # small epsilon so values quoted in whole percentage points compare as intended
    tol = 1e-9
    return CriterionReport(
        s_alpha,
        s_beta,
        a_alpha,
        a_beta,
        thresholds,
        server_preserved=s_drop <= thresholds.eps_s + tol,
        adversary_degraded=a_drop >= thresholds.eps_a - tol,
        gap_dominates=(a_drop - s_drop) >= thresholds.eps_gap - tol,
    )

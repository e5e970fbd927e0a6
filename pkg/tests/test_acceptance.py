"""Acceptance suite: micro model on the synthetic corpus, one test per criterion.

Each test prints a ``criterion N ...: PASS|FAIL`` line; the lines are repeated
in the terminal summary.  The end-to-end criteria share one artifact store, so
the server model and adversaries are trained once.
"""
import json
import time

import numpy as np
import pytest
import torch
import torch.nn as nn

from adpsplit import attacks as A
from adpsplit import cam as C
from adpsplit import data as D
from adpsplit import delta as DL
from adpsplit import metrics as MT
from adpsplit import models as M
from adpsplit import pipeline as PL
from adpsplit import protection as P
from adpsplit import report as R
from adpsplit.models import Chain

SHALLOW = "c2"
S_DROP, A_MAX, A_MIN = 0.10, 0.60, 0.90


def _images(seed, n):
    raw = D.synth_generate(D.SyntheticSpec(seed=seed), n).images
    return torch.from_numpy(raw).permute(0, 3, 1, 2).float().div(255.0)


def _fmt(d):
    return " ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in d.items())


# ---------------------------------------------------------------------------
# unit-scale criteria


@pytest.mark.criterion(1)
def test_split_equivalence(criterion):
    t0 = time.time()
    x = torch.rand(100, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    model = M.build_model("micro", 2, seed=0)
    worst = 0.0
    with torch.no_grad():
        full = model(x)
        for pos in M.MICRO_SPLITS:
            sm = M.split(model, pos)
            worst = max(worst, (sm.server(sm.client(x)) - full).abs().max().item())
    dt = time.time() - t0
    criterion(worst <= 1e-5 and dt < 10, f"max|diff|={worst:.2e} time={dt:.1f}s")


@pytest.mark.criterion(2)
def test_mask_algebra(criterion):
    rng = np.random.default_rng(0)
    subset = monotone = hot = 0
    for _ in range(1000):
        server, adv = rng.random((2, 32, 32))
        t1, t2 = np.sort(rng.uniform(0.01, 1.0, 2))
        neg = C.negate(server)
        subset += int((DL.delta_min_mask(neg, adv, t1).bits & ~DL.delta_max_mask(neg, t1).bits).any())
        monotone += int((C.threshold(adv, t2).bits & ~C.threshold(adv, t1).bits).any())
        hot += int((DL.delta_min_mask(neg, adv, 0.99).bits & C.threshold(server, 0.99).bits).any())
    criterion(subset == monotone == hot == 0, f"violations subset={subset} monotone={monotone} server_hot={hot}")


@pytest.mark.criterion(3)
def test_protection_method_pixel_contracts(criterion):
    rng = np.random.default_rng(1)
    bad = []
    for k, img in enumerate(_images(5, 50)):
        mask = rng.random((64, 64)) < rng.uniform(0.05, 0.6)
        keep = torch.from_numpy(~mask)
        black = DL.apply_method(img, mask, "black_out")
        if not ((black[:, torch.from_numpy(mask)] == 0).all() and torch.equal(black[:, keep], img[:, keep])):
            bad.append(("black", k))
        blur = DL.apply_method(img, mask, "blur_out", DL.DeltaConfig(method="blur_out").kernel_width(64))
        if not torch.equal(blur[:, keep], img[:, keep]):
            bad.append(("blur", k))
        for method in DL.METHODS:
            same = DL.apply_method(img, np.zeros((64, 64), bool), method, 5)
            if same.numpy().tobytes() != img.numpy().tobytes():
                bad.append(("empty", method, k))
    criterion(not bad, f"50 images, violations={bad[:5]}")


@pytest.mark.criterion(4)
def test_pca_oracle(criterion):
    sm = M.split(M.build_model("micro", 2, seed=0), "c6")
    imgs = _images(6, 40)
    with torch.no_grad():
        maps = sm.client(imgs)
    plugin = P.fit_pca(maps, 100, "c6")
    err = ((plugin(maps) - maps).norm() / maps.norm()).item()
    low = plugin.with_components(5)
    once = low(maps)
    idem = (low(once) - once).abs().max().item()
    evr = plugin.explained_variance_ratio()
    ordered = bool((np.diff(evr) <= 1e-12).all())
    criterion(err <= 1e-4 and idem <= 1e-5 and ordered, f"full-rank rel err={err:.2e} idempotence={idem:.2e} ordered={ordered}")


def _hand_ssim(x, y, c1=1e-4, c2=9e-4):
    mx, my = x.mean(), y.mean()
    cov = ((x - mx) * (y - my)).mean()
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (x.var() + y.var() + c2))


@pytest.mark.criterion(5)
def test_msssim_oracle(criterion):
    rng = np.random.default_rng(0)
    x, y = rng.random((2, 3, 64, 64))
    self_err = abs(MT.ms_ssim(x, x) - 1.0)
    sym = abs(MT.ms_ssim(x, y) - MT.ms_ssim(y, x))
    a = rng.random((8, 8))
    b = np.clip(a + rng.normal(0, 0.2, (8, 8)), 0, 1)
    one = MT.MsSsimParams(weights=(1.0,), win_size=8, window="uniform")
    hand = abs(MT.ms_ssim(a, b, one) - _hand_ssim(a, b))
    criterion(max(self_err, sym, hand) <= 1e-6, f"self={self_err:.1e} symmetry={sym:.1e} single-scale vs hand={hand:.1e}")


@pytest.mark.criterion(6)
def test_reconstruction_attack_sanity(criterion):
    t0 = time.time()
    img = torch.rand(3, 64, 64, generator=torch.Generator().manual_seed(4))
    rec = A.reconstruct(Chain([]), img, A.ReconstructionConfig(iterations=2000, tv_weight=0.0))
    ident = MT.ms_ssim(img, rec.image)

    torch.manual_seed(0)
    conv = nn.Conv2d(3, 6, 3, padding=1, bias=False)
    h, n = 8, 3 * 8 * 8
    with torch.no_grad():
        K = torch.stack([conv(torch.eye(n)[i].reshape(1, 3, h, h)).flatten() for i in range(n)], 1).double().numpy()
        gen = torch.Generator().manual_seed(1)
        truth = 0.2 + 0.6 * torch.rand(3, h, h, generator=gen)
        target = conv(truth[None])[0] + 0.01 * torch.randn(6, h, h, generator=gen)
    ls = np.linalg.lstsq(K, target.flatten().double().numpy(), rcond=None)[0]
    got = A.reconstruct(Chain([("c1", conv)], ["c1"]), target, A.ReconstructionConfig(iterations=2000, tv_weight=0.0), (3, h, h))
    rel = np.linalg.norm(got.image.flatten().double().numpy() - ls) / np.linalg.norm(ls)
    dt = time.time() - t0
    criterion(ident >= 0.999 and rel <= 0.01 and dt < 120, f"identity msssim={ident:.4f} one-conv rel err={rel:.2e} time={dt:.0f}s")


# ---------------------------------------------------------------------------
# end-to-end criteria


def _config(**overrides):
    base = {"thresholds.eps_s": S_DROP, "thresholds.eps_a": 0.20, "splits": [SHALLOW]}
    return PL.ExperimentConfig().with_overrides(**{**base, **overrides})


@pytest.fixture(scope="module")
def store_a(tmp_path_factory):
    return tmp_path_factory.mktemp("store_a")


@pytest.fixture(scope="module")
def main_run(store_a):
    pipe = PL.Pipeline(_config(), store_a)
    art = pipe.run_all()
    metrics = json.loads(pipe.run("eval_inference", SHALLOW).file("metrics.json").read_text())
    return pipe, art, metrics


def _forward_ok(m):
    ok = m["S_beta"] >= m["S_alpha"] - S_DROP - 1e-9 and m["Ai_beta"] <= A_MAX and m["Ai_alpha"] >= A_MIN
    return ok and m["verdict"] == "pass"


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_forward_inference_protection(criterion, main_run):
    _, _, m = main_run
    keys = ("S_alpha", "S_beta", "Ai_alpha", "Ai_beta", "Ao_alpha", "Ao_beta", "verdict")
    criterion(_forward_ok(m), _fmt({k: m[k] for k in keys}))


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_reconstruction_protection(criterion, store_a, main_run):
    pipe = PL.Pipeline(_config(**{"delta.strategy": "delta_max", "delta.method": "black_out"}), store_a)
    art = pipe.run("eval_reconstruction", SHALLOW)
    rows = R.read_rows(art.file("reconstruction.csv"))
    before = [float(r["msssim_before"]) for r in rows]
    after = [float(r["msssim_after"]) for r in rows]
    ok = len(rows) == 3 and min(before) > A.SUCCESS_MSSSIM and max(after) < A.SUCCESS_MSSSIM
    criterion(ok, f"before={[round(v, 3) for v in before]} after={[round(v, 3) for v in after]}")


@pytest.mark.slow
@pytest.mark.criterion(9)
def test_adp_vs_pca(criterion, store_a, main_run, tmp_path):
    adp_pipe, _, adp_metrics = main_run
    pca_pipe = PL.Pipeline(_config(**{"protection.kind": "pca"}), store_a)
    rows = [adp_pipe.metrics_row(SHALLOW), pca_pipe.metrics_row(SHALLOW)]
    R.emit_report(rows, tmp_path / "report")
    plots = tmp_path / "report" / "plots"
    curves = bool(list(plots.glob("epochs_*.png"))) and bool(list(plots.glob("pca_sweep_*.png"))) and (plots / "adp_vs_pca.png").exists()
    div = json.loads((tmp_path / "report" / "pca_divergence.json").read_text())[SHALLOW]
    # PCA passing at the shallow split is a flagged divergence, not a failure
    ok = _forward_ok(adp_metrics) and curves and (div["divergent"] == bool(div["pca_passing_ks"]))
    outcome = f"PCA passing k={div['pca_passing_ks']} (divergence flagged)" if div["divergent"] else "no PCA k passes"
    criterion(ok, f"ADP verdict={adp_metrics['verdict']} curves={curves} {outcome}")


@pytest.mark.slow
@pytest.mark.criterion(10)
def test_determinism_and_cache(criterion, main_run, tmp_path_factory):
    pipe_a, art_a, m_a = main_run
    pipe_b = PL.Pipeline(_config(), tmp_path_factory.mktemp("store_b"))
    art_b = pipe_b.run_all()
    identical = art_a.file("metrics.csv").read_bytes() == art_b.file("metrics.csv").read_bytes()

    forced = PL.Pipeline(_config(), pipe_a.store.root, force={"train_protection", "eval_inference"})
    forced.run("train_protection", SHALLOW)
    m_f = json.loads(forced.run("eval_inference", SHALLOW).file("metrics.json").read_text())
    keys = ("S_alpha", "S_beta", "Ai_alpha", "Ai_beta", "Ao_alpha", "Ao_beta")
    drift = max(abs(m_f[k] - m_a[k]) for k in keys)
    ok = identical and drift <= 0.01 and m_f["verdict"] == m_a["verdict"]
    criterion(ok, f"clean runs byte-identical={identical} forced recompute max drift={drift:.4f}")

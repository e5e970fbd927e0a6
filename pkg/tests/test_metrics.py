import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adpsplit import metrics as mt

UNIFORM8 = mt.MsSsimParams(weights=(1.0,), win_size=8, window="uniform")


def hand_ssim(x, y, c1=1e-4, c2=9e-4):
    """Global-statistics SSIM written out in its combined form."""
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    cov = ((x - mx) * (y - my)).mean()
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def test_stabilisers():
    p = mt.MsSsimParams()
    assert p.gamma1 == pytest.approx(1e-4)
    assert p.gamma2 == pytest.approx(9e-4)
    assert p.gamma3 == p.gamma2 / 2
    assert p.weights == (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def test_components_identical_inputs():
    rng = np.random.default_rng(0)
    x = rng.random((32, 32))
    lum, con, struct = mt.ssim_components(x, x, mt.MsSsimParams())
    for m in (lum, con, struct):
        np.testing.assert_allclose(m, 1.0, atol=1e-12)


def test_components_constant_images():
    x = np.full((16, 16), 0.3)
    lum, con, struct = mt.ssim_components(x, x.copy(), mt.MsSsimParams())
    for m in (lum, con, struct):
        np.testing.assert_allclose(m, 1.0)


def test_checkerboard_inverse_structure():
    board = (np.indices((8, 8)).sum(0) % 2).astype(float)
    _, _, struct = mt.ssim_components(board, 1 - board, UNIFORM8)
    # cov = -0.25, sigma = 0.5 each: s = (-0.25 + g3) / (0.25 + g3)
    g3 = UNIFORM8.gamma3
    assert struct.shape == (1, 1)
    assert struct[0, 0] == pytest.approx((-0.25 + g3) / (0.25 + g3), abs=1e-12)
    assert struct[0, 0] < -0.99


def test_single_scale_matches_hand_ssim():
    rng = np.random.default_rng(3)
    x = rng.random((8, 8))
    y = np.clip(x + rng.normal(0, 0.2, (8, 8)), 0, 1)
    assert mt.ms_ssim(x, y, UNIFORM8) == pytest.approx(hand_ssim(x, y), abs=1e-6)
    assert mt.ssim(x, y, UNIFORM8) == pytest.approx(hand_ssim(x, y), abs=1e-6)


def test_self_similarity_and_symmetry():
    rng = np.random.default_rng(1)
    for _ in range(5):
        x, y = rng.random((3, 64, 64)), rng.random((3, 64, 64))
        assert mt.ms_ssim(x, x) == pytest.approx(1.0, abs=1e-6)
        assert abs(mt.ms_ssim(x, y) - mt.ms_ssim(y, x)) <= 1e-6


def test_independent_noise_is_dissimilar():
    rng = np.random.default_rng(2)
    scores = [mt.ms_ssim(rng.random((64, 64)), rng.random((64, 64))) for _ in range(100)]
    assert np.mean(scores) < 0.1


def test_reduced_scales_recorded():
    x = np.random.default_rng(0).random((64, 64))
    res = mt.ms_ssim_detail(x, x * 0.9)
    assert res.scales_used == 3
    assert "renormalised" in res.warning
    big = np.random.default_rng(0).random((176, 176))
    assert mt.ms_ssim_detail(big, big).scales_used == 5


def test_errors():
    with pytest.raises(ValueError):
        mt.ms_ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(ValueError):
        mt.ssim_components(np.zeros((8, 8)), np.zeros((8, 8)), mt.MsSsimParams())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (24, 24), elements=st.floats(0, 1)), arrays(np.float64, (24, 24), elements=st.floats(0, 1)))
def test_msssim_bounded_and_symmetric(x, y):
    a, b = mt.ms_ssim(x, y), mt.ms_ssim(y, x)
    assert -1.0 - 1e-9 <= a <= 1.0 + 1e-9
    assert abs(a - b) <= 1e-6


class _Fixed:
    def __init__(self, logits):
        import torch

        self.logits = torch.as_tensor(logits, dtype=torch.float32)

    def __call__(self, x):
        return self.logits[x[:, 0].long()]


def test_accuracy_ties_to_class_zero():
    import torch

    model = _Fixed([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    xs = torch.tensor([[0.0], [1.0], [2.0]])
    assert mt.accuracy(model, xs, torch.tensor([0, 0, 1])) == 1.0
    assert mt.accuracy(model, xs, torch.tensor([1, 1, 0])) == 0.0


def test_random_guesser_near_half():
    import torch

    gen = torch.Generator().manual_seed(0)
    ys = torch.randint(0, 2, (4000,), generator=gen)
    guess = lambda x: torch.randn(len(x), 2, generator=gen)
    acc = mt.accuracy(guess, torch.zeros(4000, 1), ys)
    assert abs(acc - 0.5) < 3 * 0.5 / np.sqrt(4000)


def test_judge_table_rows():
    ok = mt.judge(0.84, 0.85, 0.73, 0.50)
    assert ok.server_preserved and ok.adversary_degraded and ok.gap_dominates and ok.verdict
    bad = mt.judge(0.88, 0.49, 0.90, 0.68)
    assert not bad.server_preserved and not bad.verdict
    none = mt.judge(0.8, 0.8, 0.9, 0.9)
    assert none.server_preserved and not none.adversary_degraded and not none.gap_dominates


def test_judge_pure():
    th = mt.Thresholds(0.1, 0.2, 0.1)
    assert mt.judge(0.9, 0.85, 0.95, 0.5, th).to_dict() == mt.judge(0.9, 0.85, 0.95, 0.5, th).to_dict()

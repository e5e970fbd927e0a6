import numpy as np
import pytest
import torch

from adpsplit import attacks as A
from adpsplit import delta as DL
from adpsplit import models as M
from adpsplit import protection as P


def _maps(n=40, shape=(4, 6, 6), seed=0):
    return torch.rand((n,) + shape, generator=torch.Generator().manual_seed(seed))


@pytest.mark.parametrize("variant,latent", [("decreasing", 8), ("decreasing_deep", 4), ("decreasing_extra_deep", 2)])
def test_latent_depth_contract(variant, latent):
    ae = P.DeltaAutoencoder(16, variant)
    x = torch.rand(2, 16, 8, 8)
    assert ae.encoder(x).shape == (2, latent, 8, 8)
    assert ae(x).shape == x.shape


def test_indivisible_depth_is_unsupported():
    with pytest.raises(P.UnsupportedLayer):
        P.DeltaAutoencoder(12, "decreasing_extra_deep")
    with pytest.raises(ValueError):
        P.DeltaAutoencoder(16, "increasing")


def test_unfitted_and_shape_mismatch():
    plugin = P.AdpPlugin("c2", (4, 6, 6))
    with pytest.raises(P.NotFitted):
        plugin(torch.rand(4, 6, 6))
    fitted = P.fit_pca(_maps(), 5, "c2")
    with pytest.raises(ValueError):
        fitted(torch.rand(1, 4, 6, 7))


def test_identity_learning(world):
    with torch.no_grad():
        f = world.sm.client(world.delta.images[:200])
    # identity through a Z/2 bottleneck needs spatial context, hence the long gentle schedule
    plugin = P.train_adp(f, f, "decreasing", epochs=100, split_position="c2", lr=3e-3, batch_size=8, seed=0)
    out = plugin(f)
    assert out.shape == f.shape
    assert ((out - f).norm() / f.norm()).item() <= 0.05
    assert len(plugin.loss_trace) == 100


def test_on_epoch_callback_sees_eval_mode():
    f = _maps(8)
    seen = []
    P.train_adp(f, f, epochs=3, batch_size=4, on_epoch=lambda e, pl: seen.append((e, pl.net.training, pl.fitted)))
    assert seen == [(1, False, True), (2, False, True), (3, False, True)]


def test_training_is_seeded():
    f = _maps(8)
    a = P.train_adp(f, f, epochs=2, batch_size=4, seed=3)
    b = P.train_adp(f, f, epochs=2, batch_size=4, seed=3)
    assert torch.equal(a(f), b(f))


@pytest.fixture(scope="module")
def adp_on_delta(world):
    cfg = DL.DeltaConfig("delta_min", "black_out", iterations=2, threshold=0.35, split_position="c2")
    batch = DL.run_delta_batch(world.delta.images, world.sm, world.adversary, cfg)
    plugin = P.train_adp(batch.f_original[:300], batch.f_protected[:300], epochs=30, split_position="c2")
    return batch, plugin


def test_adp_moves_held_out_maps_toward_protected(adp_on_delta):
    batch, plugin = adp_on_delta
    f_o, f_p = batch.f_original[300:], batch.f_protected[300:]
    changed = (f_o - f_p).flatten(1).norm(dim=1) > 0
    out = plugin(f_o)
    closer = (out - f_p).flatten(1).norm(dim=1) < (out - f_o).flatten(1).norm(dim=1)
    assert closer[changed].float().mean().item() >= 0.8


def test_plugin_leaves_weights_untouched(world, adp_on_delta):
    _, plugin = adp_on_delta
    before = (M.weights_checksum(world.sm.client), M.weights_checksum(world.sm.server))
    A.evaluate_adversary(world.sm.server, world.sm, plugin, *world.p_test.xy)
    assert (M.weights_checksum(world.sm.client), M.weights_checksum(world.sm.server)) == before


def test_pca_full_rank_identity_and_idempotence():
    f = _maps(30)
    plugin = P.fit_pca(f, 100, "c2")
    assert plugin.k_max == 30
    out = plugin(f)
    assert ((out - f).norm() / f.norm()).item() <= 1e-4
    low = plugin.with_components(5)
    once = low(f)
    assert (low(once) - once).abs().max().item() <= 1e-5


def test_pca_orthonormal_and_ordered():
    plugin = P.fit_pca(_maps(50), 20)
    c = plugin.components
    np.testing.assert_allclose(c @ c.T, np.eye(len(c)), atol=1e-5)
    assert (np.diff(plugin.explained_variance_ratio()) <= 1e-12).all()


def test_pca_rank_one():
    base = torch.rand(4, 6, 6)
    scales = torch.linspace(-2, 3, 25)
    plugin = P.fit_pca(scales[:, None, None, None] * base, 10)
    assert plugin.explained_variance_ratio()[0] >= 0.999


def test_pca_errors():
    with pytest.raises(ValueError):
        P.fit_pca(_maps(1), 5)
    plugin = P.fit_pca(_maps(10), 5)
    with pytest.raises(ValueError):
        plugin.with_components(6)
    with pytest.raises(ValueError):
        P.sweep_components(plugin, [1, 7], lambda pl: (0.0, 0.0))


def test_log_spaced_ks():
    ks = P.log_spaced_ks(400)
    assert ks[0] == 1 and ks[-1] == 400 and ks == sorted(set(ks))


@pytest.fixture(scope="module")
def pca_curve(world):
    with torch.no_grad():
        maps = world.sm.client(world.p_train.images)
    plugin = P.fit_pca(maps, 400, "c2")

    def scores(pl):
        return (
            A.evaluate_adversary(world.sm.server, world.sm, pl, *world.p_test.xy),
            A.evaluate_adversary(world.adversary, world.sm, pl, *world.s_test.xy),
        )

    return plugin, P.sweep_components(plugin, [1, plugin.k_max], scores), scores(None)


def test_pca_full_rank_matches_baseline(pca_curve):
    plugin, curve, (s0, a0) = pca_curve
    k, s, a = curve[-1]
    assert k == plugin.k_max
    assert abs(s - s0) <= 0.02 and abs(a - a0) <= 0.02


def test_pca_single_component_starves_server(pca_curve):
    _, curve, (s0, _) = pca_curve
    k, s, _ = curve[0]
    assert k == 1
    assert s <= 0.65 < s0


def test_plugin_roundtrip(tmp_path, adp_on_delta):
    _, adp = adp_on_delta
    P.save_plugin(adp, tmp_path / "a.pt", {"epochs": 30})
    back = P.load_plugin(tmp_path / "a.pt")
    f = torch.rand(2, *adp.shape)
    assert torch.equal(back(f), adp(f)) and back.loss_trace == adp.loss_trace
    pca = P.fit_pca(_maps(), 7, "c4").with_components(3)
    P.save_plugin(pca, tmp_path / "p.pt")
    again = P.load_plugin(tmp_path / "p.pt")
    assert again.k_apply == 3 and torch.allclose(again(_maps(2)), pca(_maps(2)))

import numpy as np
import pytest
import torch
import torch.nn as nn

from adpsplit import models as M


def test_micro_has_named_blocks_and_binary_head():
    m = M.build_model("micro", 2, seed=0)
    for i in range(1, 7):
        assert f"c{i}" in m.layer_names
    assert m.split_positions == ("c2", "c4", "c6")
    assert m(torch.rand(3, 3, 64, 64)).shape == (3, 2)


def test_vgg_like_split_positions():
    m = M.build_model("vgg_like", 2, seed=0)
    assert {"Conv04", "Conv08", "Conv12"} <= set(m.split_positions)
    assert sum(n.startswith("Conv") for n in m.layer_names) == 13


def test_same_seed_same_weights():
    a, b = M.build_model("micro", 2, seed=7), M.build_model("micro", 2, seed=7)
    assert M.weights_checksum(a) == M.weights_checksum(b)
    assert M.weights_checksum(a) != M.weights_checksum(M.build_model("micro", 2, seed=8))


def test_unknown_family():
    with pytest.raises(M.ConfigError):
        M.build_model("alexnet")


@pytest.mark.parametrize("pos", M.MICRO_SPLITS)
def test_split_equivalence_micro(pos):
    m = M.build_model("micro", 2, seed=1)
    sm = M.split(m, pos)
    x = torch.rand(100, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        assert (sm.server(sm.client(x)) - m(x)).abs().max().item() <= 1e-5


def test_split_equivalence_vgg_conv08():
    m = M.build_model("vgg_like", 2, seed=0)
    sm = M.split(m, "Conv08")
    x = torch.rand(10, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        assert (sm.server(sm.client(x)) - m(x)).abs().max().item() <= 1e-5


def test_split_shares_modules():
    m = M.build_model("micro", 2, seed=0)
    sm = M.split(m, "c4")
    ids = {id(p) for p in m.parameters()}
    assert {id(p) for p in sm.client.parameters()} | {id(p) for p in sm.server.parameters()} == ids


def test_input_split_is_identity():
    m = M.build_model("micro", 2, seed=0)
    sm = M.split(m, "input")
    x = torch.rand(3, 64, 64)
    fm = M.feature_map(sm, x)
    assert torch.equal(fm.data, x)
    assert fm.origin_split == "input"


def test_invalid_split_lists_boundaries():
    with pytest.raises(M.SplitError, match="c2, c4, c6"):
        M.split(M.build_model("micro", 2), "Conv99")


def test_forward_client_batch_order_and_shape_check():
    sm = M.split(M.build_model("micro", 2, seed=0), "c2")
    x = torch.rand(4, 3, 64, 64)
    batch = M.forward_client(sm, x)
    assert batch.shape == (4, 16, 64, 64)
    for k in range(4):
        assert torch.allclose(M.forward_client(sm, x[k]), batch[k], atol=1e-6)
    with pytest.raises(ValueError):
        M.forward_client(sm, torch.rand(3, 32, 32))


def test_resnet_like_bonk04_shape():
    m = M.build_model("resnet_like", 2, seed=0, input_shape=(3, 224, 224))
    sm = M.split(m, "Bonk04")
    f = M.forward_client(sm, torch.rand(3, 224, 224))
    assert tuple(f.shape) == (512, 28, 28)
    assert f.numel() == 401_408


def test_gradient_linear_is_weight_row_sum():
    lin = nn.Linear(5, 3)
    g = M.gradient_wrt_input(lin, torch.rand(5), lambda out: out.sum())
    assert torch.allclose(g, lin.weight.sum(0))


def _relu_pattern(model, x):
    """Concatenated on/off state of every ReLU for input ``x``."""
    states = []
    hooks = [m.register_forward_hook(lambda mod, i, o: states.append(o > 0)) for m in model.modules() if isinstance(m, nn.ReLU)]
    with torch.no_grad():
        model(x)
    for h in hooks:
        h.remove()
    return torch.cat([s.flatten() for s in states])


def test_gradient_matches_finite_differences(world):
    import copy

    m = copy.deepcopy(world.model).double()
    x = torch.rand(1, 3, 64, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    obj = lambda out: out[0, 1] - out[0, 0]
    g = M.gradient_wrt_input(m, x, obj)
    rng = np.random.default_rng(0)
    h, checked = 1e-3, 0
    while checked < 20:
        c, i, j = rng.integers(3), rng.integers(64), rng.integers(64)
        e = torch.zeros_like(x)
        e[0, c, i, j] = h
        # central differences are only a derivative estimate when no ReLU kink lies in [x-h, x+h]
        if not torch.equal(_relu_pattern(m, x + e), _relu_pattern(m, x - e)):
            continue
        with torch.no_grad():
            fd = (obj(m(x + e)) - obj(m(x - e))).item() / (2 * h)
        an = g[0, c, i, j].item()
        assert abs(an - fd) <= 1e-2 * max(abs(an), abs(fd), 1e-12)
        checked += 1


def test_dead_relu_gives_zero_gradient():
    net = nn.Sequential(nn.Linear(4, 4), nn.ReLU())
    with torch.no_grad():
        net[0].bias.fill_(-1.0)
    g = M.gradient_wrt_input(net, torch.zeros(4), lambda out: out.sum())
    assert torch.count_nonzero(g) == 0


def test_zero_epochs_returns_initial_weights():
    m = M.build_model("micro", 2, seed=0)
    before = M.weights_checksum(m)
    res = M.train_classifier(m, (torch.rand(4, 3, 64, 64), torch.tensor([0, 1, 0, 1])), epochs=0)
    assert res.trace == [] and M.weights_checksum(m) == before


def test_non_finite_loss_aborts():
    m = M.build_model("micro", 2, seed=0)
    x = torch.full((4, 3, 64, 64), float("nan"))
    with pytest.raises(M.NonFiniteLoss):
        M.train_classifier(m, (x, torch.tensor([0, 1, 0, 1])), epochs=1)


def test_checkpoint_roundtrip(tmp_path):
    m = M.build_model("micro", 2, seed=5)
    M.save_checkpoint(m, tmp_path / "m.pt", "abc")
    assert M.weights_checksum(M.load_checkpoint(tmp_path / "m.pt")) == M.weights_checksum(m)


def test_micro_reaches_primary_accuracy(world):
    assert world.train_result.best_acc >= 0.95
    assert M.accuracy_of(world.model, *world.p_test.xy) == pytest.approx(world.train_result.best_acc)
    assert [r["epoch"] for r in world.train_result.trace] == list(range(1, 11))


def test_trace_csv(world, tmp_path):
    M.write_trace_csv(world.train_result.trace, tmp_path / "t.csv", "server")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "epoch,split,train_acc,test_acc"
    assert len(lines) == 11

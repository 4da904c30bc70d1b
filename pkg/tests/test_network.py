import math

import numpy as np
import pytest
import torch

from valveseg.memory import BACKWARD, FORWARD, MemoryBank, write
from valveseg.network import (
    CheckpointError,
    NetworkConfig,
    SegNet,
    ShapeError,
    get_parameters,
    load_checkpoint,
    network_config_dict,
    parameter_digest,
    save_checkpoint,
    set_parameters,
)

SMALL = NetworkConfig(base_channels=4, key_channels=4, value_channels=4)


@pytest.fixture
def net():
    torch.manual_seed(0)
    return SegNet(SMALL).double()


def vol(n=8, seed=0):
    return torch.rand((n,) * 3, dtype=torch.float64, generator=torch.Generator().manual_seed(seed))


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(n_levels=1)
    with pytest.raises(ValueError):
        NetworkConfig(readout_levels=(4,))
    assert NetworkConfig(readout_levels=[3, 2]).readout_levels == (2, 3)


def test_encode_level_shapes():
    f = SegNet().encode(torch.rand(32, 32, 32))
    assert f.spatial(1) == (32, 32, 32)
    assert f.spatial(2) == (16, 16, 16)
    assert f.spatial(3) == (8, 8, 8)
    assert f.keys[0].shape[1] == 8 and f.values[0].shape[1] == 16


def test_indivisible_shape_rejected(net):
    with pytest.raises(ShapeError):
        net.encode(torch.rand(10, 8, 8, dtype=torch.float64))
    with pytest.raises(ShapeError):
        net.encode(torch.rand(2, 2, 8, 8, 8, dtype=torch.float64))


@pytest.mark.parametrize("n", [16, 32])
def test_output_shape_and_range(n):
    P, _ = SegNet(SMALL).forward_segment(torch.rand(n, n, n))
    assert P.shape == (n, n, n)
    assert bool(((P > 0) & (P < 1)).all())


def test_determinism(net):
    x = vol()
    a = net.forward_segment(x)[0]
    b = net.forward_segment(x)[0]
    assert torch.equal(a, b)


def test_zero_weights_give_bias():
    model = SegNet(SMALL)
    conv = model.enc[0][0]
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.copy_(torch.tensor([0.0, 1.0, -2.0, 3.5]))
    y = conv(torch.randn(1, 1, 8, 8, 8))
    for c, b in enumerate([0.0, 1.0, -2.0, 3.5]):
        assert torch.all(y[0, c] == b)


def test_head_bias_ten_saturates():
    model = SegNet(SMALL).double()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.head.bias.fill_(10.0)
    P = model.forward_segment(vol(16))[0].detach()
    assert float((P - 1 / (1 + math.exp(-10))).abs().max()) < 1e-12
    assert 1 / (1 + math.exp(-10)) == pytest.approx(0.99995, abs=1e-5)


def _banks(net, x, phases):
    f, b = MemoryBank(FORWARD), MemoryBank(BACKWARD)
    feats = net.encode(x)
    for t in phases:
        f = write(f, t, *feats.sample(0))
        b = write(b, t, *feats.sample(0))
    return f, b


def test_memory_readout_changes_prediction(net):
    x = vol()
    banks = _banks(net, vol(seed=1), [0])
    P0 = net.forward_segment(x)[0]
    P1 = net.forward_segment(x, banks, k=4)[0]
    assert bool(((P1 > 0) & (P1 < 1)).all())
    assert not torch.equal(P0, P1)


def test_empty_banks_match_no_banks(net):
    x = vol()
    empty = (MemoryBank(FORWARD), MemoryBank(BACKWARD))
    assert torch.equal(net.forward_segment(x, empty)[0], net.forward_segment(x)[0])


def test_batch_matches_single(net):
    xs = torch.stack([vol(seed=s) for s in range(3)])
    banks = _banks(net, vol(seed=9), [0, 1])
    P, _ = net.forward_batch(xs, [None, banks, None], k=4)
    # instance norm keeps samples independent
    torch.testing.assert_close(P[0], net.forward_segment(xs[0])[0], atol=1e-12, rtol=0)
    torch.testing.assert_close(P[1], net.forward_segment(xs[1], banks, 4)[0], atol=1e-12, rtol=0)


def test_batch_view_count_checked(net):
    with pytest.raises(ShapeError):
        net.forward_batch(torch.stack([vol(), vol()]), [None], k=4)


def test_decode_rejects_bad_readout(net):
    f = net.encode(vol())
    r = net.null_readout(f)
    with pytest.raises(ShapeError):
        net.decode(f, [[r[0][:2], r[1]]])


def test_gradient_of_mean_probability(net):
    x = vol()
    w = net.enc[1][0].weight
    net.zero_grad()
    net.forward_segment(x)[0].mean().backward()
    analytic = w.grad.reshape(-1)
    flat = w.data.reshape(-1)
    h = 1e-3
    for i in (0, 17, 101):
        with torch.no_grad():
            o = float(flat[i])
            flat[i] = o + h
            fp = float(net.forward_segment(x)[0].mean())
            flat[i] = o - h
            fm = float(net.forward_segment(x)[0].mean())
            flat[i] = o
        num = (fp - fm) / (2 * h)
        assert abs(float(analytic[i]) - num) <= 1e-2 * max(abs(num), 1e-8)


def test_parameter_roundtrip_and_digest(net):
    params = get_parameters(net)
    other = SegNet(SMALL).double()
    assert parameter_digest(get_parameters(other)) != parameter_digest(params)
    set_parameters(other, params)
    assert parameter_digest(get_parameters(other)) == parameter_digest(params)
    with pytest.raises(ShapeError):
        set_parameters(SegNet(NetworkConfig(base_channels=8)), params)


def test_checkpoint_roundtrip(tmp_path):
    net = SegNet(SMALL)
    path = save_checkpoint(tmp_path / "m.ckpt", get_parameters(net), {"network": network_config_dict(SMALL)}, 12)
    tensors, config, step = load_checkpoint(path)
    assert step == 12
    assert NetworkConfig(**config["network"]) == SMALL
    for n, t in get_parameters(net).items():
        assert torch.equal(tensors[n], t)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = save_checkpoint(tmp_path / "g.ckpt", get_parameters(SegNet(SMALL)), {}, 0)
    trunc = tmp_path / "t.ckpt"
    trunc.write_bytes(good.read_bytes()[:-100])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)

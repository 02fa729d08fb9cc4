import numpy as np
import pytest
import torch

from fakeloc.backbone import (BackboneConfig, build_backbone, count_parameters, desk_config,
                              forward_features, forward_logit, load_backbone, paper_config,
                              save_backbone)
from fakeloc.checkpoint import state_checksum
from fakeloc.errors import ConfigurationError, MissingArtifactError, ShapeError


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(num_blocks=0, channel_widths=())
    with pytest.raises(ConfigurationError):
        BackboneConfig(downsample_blocks=(5,))
    with pytest.raises(ConfigurationError):
        BackboneConfig(channel_widths=(8, 8))
    with pytest.raises(ConfigurationError):
        build_backbone({"preset": "desk"})


def test_config_dict_roundtrip():
    cfg = paper_config()
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg


def test_desk_size_and_determinism():
    a = build_backbone(desk_config(), seed=0)
    b = build_backbone(desk_config(), seed=0)
    c = build_backbone(desk_config(), seed=1)
    assert count_parameters(a) < 500_000
    assert state_checksum(a) == state_checksum(b) != state_checksum(c)


def test_paper_topology():
    cfg = paper_config()
    assert cfg.num_blocks >= 11
    assert 2 <= cfg.num_blocks
    assert max(cfg.downsample_blocks) > 11  # block 11 precedes the last downsampling
    assert cfg.raster_side(2) == 37 and cfg.raster_side(11) == 19


def test_raster_sizes_desk():
    cfg = desk_config()
    model = build_backbone(cfg)
    feats = forward_features(model, torch.randn(2, 3, 64, 64), 4)
    expected = {b: 64 // 2 ** sum(d <= b for d in cfg.downsample_blocks) for b in range(1, 5)}
    assert {b: a.shape[-1] for b, a in feats.activations.items()} == expected
    assert feats.activations[2].shape[-2:] == (32, 32)
    assert all(torch.isfinite(a).all() for a in feats.activations.values())


def test_zero_image_zero_activations():
    model = build_backbone(desk_config())
    feats = forward_features(model, torch.zeros(1, 3, 64, 64), 4)
    for a in feats.activations.values():
        assert torch.count_nonzero(a) == 0


def test_shape_errors():
    model = build_backbone(desk_config())
    with pytest.raises(ShapeError):
        forward_logit(model, torch.zeros(1, 3, 32, 32))
    with pytest.raises(ShapeError):
        forward_logit(model, torch.zeros(1, 1, 64, 64))
    with pytest.raises(ConfigurationError):
        forward_features(model, torch.zeros(1, 3, 64, 64), 9)


def test_input_gradient_finite_differences():
    cfg = desk_config(input_size=16, channel_widths=(4, 8, 8, 8), stem_widths=(4,))
    model = build_backbone(cfg, seed=3).double()
    torch.manual_seed(0)
    x = torch.randn(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    grad, = torch.autograd.grad(forward_logit(model, x).sum(), x)
    h = 1e-3
    f0 = forward_logit(model, x.detach()).item()
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(32):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fp, fm = forward_logit(model, xp).item(), forward_logit(model, xm).item()
        # a ReLU kink inside [x - h, x + h] makes the one-sided slopes disagree;
        # the central difference is no oracle there
        if abs((fp - f0) - (f0 - fm)) > 1e-3 * max(abs(fp - fm), 1e-12):
            continue
        fd = (fp - fm) / (2 * h)
        assert abs(fd - grad[idx].item()) <= 1e-3 * max(abs(fd), abs(grad[idx].item()), 1e-6)
        checked += 1
    assert checked >= 8


def test_sigmoid_range_and_determinism():
    model = build_backbone(desk_config(), seed=2)
    x = torch.randn(3, 3, 64, 64) * 50
    p = torch.sigmoid(forward_logit(model, x))
    assert torch.all((p > 0) & (p < 1)) or torch.all((p >= 0) & (p <= 1))
    twin = build_backbone(desk_config(), seed=2)
    assert torch.equal(forward_logit(model, x), forward_logit(twin, x))


def test_overfit_pair():
    torch.manual_seed(0)
    model = build_backbone(desk_config(), seed=0)
    x = torch.rand(2, 3, 64, 64)
    y = torch.tensor([1.0, 0.0])
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    model.train()
    for _ in range(200):
        loss = torch.nn.functional.binary_cross_entropy_with_logits(forward_logit(model, x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    p = torch.sigmoid(forward_logit(model, x))
    assert p[0] - p[1] > 0.8


def test_save_load(tmp_path):
    model = build_backbone(desk_config(), seed=4)
    path = save_backbone(tmp_path / "b.ckpt", model)
    back = load_backbone(path, desk_config())
    assert state_checksum(back) == state_checksum(model)
    with pytest.raises(ConfigurationError):
        load_backbone(path, desk_config(input_size=32))
    with pytest.raises(MissingArtifactError):
        load_backbone(tmp_path / "missing.ckpt")


def test_paper_preset_forward():
    model = build_backbone(paper_config(), seed=0)
    feats = forward_features(model, torch.randn(1, 3, 256, 256), 11)
    assert feats.activations[2].shape[-2:] == (37, 37)
    assert feats.activations[11].shape[-2:] == (19, 19)

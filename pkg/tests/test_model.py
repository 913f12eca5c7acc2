import numpy as np
import pytest
import torch

from taggan.core import ConfigError, ShapeError
from taggan.model import (
    ArchConfig,
    discriminator_forward,
    generator_map_forward,
    generator_recon_forward,
    init_params,
)

ARCH = ArchConfig(n_domains=3, image_size=32, base_channels=4, n_residual_blocks=1, n_downsamples=2)


def _zeroed(arch=ARCH):
    nets = init_params(arch, 0)
    with torch.no_grad():
        for p in nets.parameters():
            p.zero_()
    return nets


def test_init_deterministic():
    a, b = init_params(ARCH, 7), init_params(ARCH, 7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_init_seed_matters():
    a, b = init_params(ARCH, 7), init_params(ARCH, 8)
    assert any(not torch.equal(va, vb) for va, vb in zip(a.state_dict().values(), b.state_dict().values()))


def test_init_finite_and_small():
    for arch in (ARCH, ArchConfig()):
        for name, p in init_params(arch, 1).named_parameters():
            assert torch.isfinite(p).all(), name
            assert p.abs().max() < 1, name


def test_invalid_arch():
    with pytest.raises(ConfigError):
        ArchConfig(image_size=36, n_downsamples=3)
    with pytest.raises(ConfigError):
        ArchConfig(norm="batch")


def test_generator_shapes_and_ranges():
    nets = init_params(ARCH, 0)
    x = torch.rand(2, 1, 32, 32) * 2 - 1
    m = generator_map_forward(nets, x, torch.tensor([0, 2]))
    r = generator_recon_forward(nets, x, 1)
    assert m.shape == x.shape and r.shape == x.shape
    assert m.abs().max() <= 2.0 and r.abs().max() <= 1.0


def test_recon_range_random_params():
    nets = init_params(ArchConfig(n_domains=2, image_size=16, base_channels=4, init_gain=3.0), 5)
    out = generator_recon_forward(nets, torch.rand(4, 1, 16, 16) * 2 - 1, 1)
    assert out.min() >= -1 and out.max() <= 1


def test_zero_network_outputs():
    nets = _zeroed()
    x = torch.rand(1, 1, 32, 32) * 2 - 1
    assert torch.all(generator_map_forward(nets, x, 1) == 0)
    assert torch.all(generator_recon_forward(nets, x, 1) == 0)
    scores, logits = discriminator_forward(nets, x, "abnormal")
    assert torch.all(scores == 0.5)
    assert torch.all(logits == 0)


def test_discriminator_contract():
    nets = init_params(ARCH, 0)
    x = torch.rand(3, 1, 32, 32)
    s_n, l_n = discriminator_forward(nets, x, "normal")
    s_a, l_a = discriminator_forward(nets, x, "abnormal")
    assert s_n.shape == (3, 8, 8) and s_a.shape == (3, 8, 8)
    assert ((s_n > 0) & (s_n < 1)).all()
    assert l_n is None and l_a.shape == (3, 3)


def test_scalar_discriminator():
    arch = ArchConfig(n_domains=2, image_size=16, base_channels=2, patch_output=False)
    scores, _ = discriminator_forward(init_params(arch, 0), torch.rand(2, 1, 16, 16), "normal")
    assert scores.shape == (2,)


def test_conditioning_changes_map():
    nets = init_params(ArchConfig(n_domains=3, image_size=16, base_channels=4, init_gain=1.0), 2)
    x = torch.rand(1, 1, 16, 16) * 2 - 1
    a = generator_map_forward(nets, x, 0)
    b = generator_map_forward(nets, x, 1)
    assert (a - b).abs().mean() > 1e-4


def test_forward_deterministic():
    nets = init_params(ARCH, 0)
    x = torch.rand(1, 1, 32, 32)
    assert torch.equal(generator_map_forward(nets, x, 2), generator_map_forward(nets, x, 2))


def test_shape_errors():
    nets = init_params(ARCH, 0)
    with pytest.raises(ShapeError):
        generator_map_forward(nets, torch.zeros(1, 1, 16, 16), 0)
    with pytest.raises(ShapeError):
        discriminator_forward(nets, torch.zeros(1, 32, 32), "normal")
    with pytest.raises(ValueError):
        generator_map_forward(nets, torch.zeros(1, 1, 32, 32), 3)

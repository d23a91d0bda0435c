import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sarutil.bayes import VAR_FLOOR, BBBConv2d, bbb_conv_forward, layer_kl
from sarutil.errors import InvalidArgument


def scalar_setup():
    A = torch.full((1, 1, 1, 1), 2.0, dtype=torch.float64)
    mu = torch.full((1, 1, 1, 1), 3.0, dtype=torch.float64)
    alpha = torch.full((1, 1, 1, 1), 0.25, dtype=torch.float64)
    return A, mu, alpha


def test_noise_free_and_unit_noise_paths():
    A, mu, alpha = scalar_setup()
    zero = torch.zeros(1, 1, 1, 1, dtype=torch.float64)
    assert float(bbb_conv_forward(A, mu, alpha, eps=zero)) == 6.0
    assert float(bbb_conv_forward(A, mu, alpha, eps=torch.ones_like(zero))) == pytest.approx(9.0, abs=1e-12)


def test_scalar_moments_match_weight_sampling():
    A, mu, alpha = scalar_setup()
    n = 100_000
    g = torch.Generator().manual_seed(0)
    out = bbb_conv_forward(A.expand(n, 1, 1, 1).contiguous(), mu, alpha, generator=g).flatten()
    w = torch.normal(3.0, 1.5, (n,), generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    oracle = 2.0 * w
    for sample in (out, oracle):
        m, s = float(sample.mean()), float(sample.std())
        assert abs(m - 6.0) < 3 * 3.0 / math.sqrt(n)
        assert abs(s - 3.0) < 3 * 3.0 / math.sqrt(2 * (n - 1))


def test_channel_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        bbb_conv_forward(torch.zeros(1, 2, 4, 4), torch.zeros(1, 1, 3, 3), torch.ones(1, 1, 3, 3))
    with pytest.raises(InvalidArgument):
        bbb_conv_forward(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 3, 3), torch.ones(1, 1, 3, 3),
                         eps=torch.zeros(1, 1, 3, 3))


def test_layer_kl_values():
    one = torch.ones(1, dtype=torch.float64)
    assert float(layer_kl(one, one, 1.0)) == pytest.approx(0.5, abs=1e-12)
    zero = torch.zeros(5, dtype=torch.float64)
    assert float(layer_kl(zero, one.expand(5), math.sqrt(VAR_FLOOR))) == pytest.approx(0.0, abs=1e-9)
    v = VAR_FLOOR
    assert float(layer_kl(zero[:1], one, 1.0)) == pytest.approx(0.5 * (v - 1 - math.log(v)), abs=1e-9)
    assert float(layer_kl(zero[:1], one, 1.0)) == pytest.approx(8.71, abs=5e-3)
    with pytest.raises(InvalidArgument):
        layer_kl(one, one, 0.0)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(1e-3, 10)), min_size=1, max_size=20),
       st.floats(0.01, 2.0))
def test_layer_kl_non_negative(pairs, sigma):
    mu = torch.tensor([p[0] for p in pairs], dtype=torch.float64)
    alpha = torch.tensor([p[1] for p in pairs], dtype=torch.float64)
    assert float(layer_kl(mu, alpha, sigma)) >= -1e-9


def test_layer_init_and_positive_alpha():
    layer = BBBConv2d(2, 3, 3, alpha_init=0.1)
    assert torch.allclose(layer.alpha, torch.full_like(layer.alpha, 0.1), atol=1e-6)
    with torch.no_grad():
        layer.raw_alpha.fill_(-50.0)
    assert bool((layer.alpha > 0).all())
    assert bool((layer.alpha * layer.mu ** 2 >= 0).all())


def test_layer_mean_path_and_determinism():
    layer = BBBConv2d(1, 2, 3, padding=1).double()
    x = torch.randn(2, 1, 5, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    a = layer(x, generator=torch.Generator().manual_seed(3))
    b = layer(x, generator=torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    mean = layer(x, sample=False)
    assert torch.allclose(mean, torch.nn.functional.conv2d(x, layer.mu, padding=1))


def test_local_reparameterisation_matches_weight_sampling_3x3():
    rng = np.random.default_rng(4)
    x = torch.from_numpy(rng.uniform(0, 1, (1, 1, 3, 3)))
    mu = torch.from_numpy(rng.normal(0, 0.5, (1, 1, 3, 3)))
    alpha = torch.from_numpy(rng.uniform(0.05, 1.0, (1, 1, 3, 3)))
    n = 20_000
    out = bbb_conv_forward(x.expand(n, 1, 3, 3).contiguous(), mu, alpha,
                           generator=torch.Generator().manual_seed(0)).flatten().numpy()
    w = rng.normal(mu.numpy(), np.sqrt(alpha.numpy()) * np.abs(mu.numpy()), (n, 1, 1, 3, 3))
    direct = (w * x.numpy()).reshape(n, -1).sum(1)
    s = direct.std()
    assert abs(out.mean() - direct.mean()) < 3 * s * math.sqrt(2 / n)
    assert abs(out.std() - s) < 3 * s * math.sqrt(1 / n) * 1.5

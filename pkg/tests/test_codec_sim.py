import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tdp.codec_sim import (PROB_FLOOR, FactorizedPrior, QuantLevel, SimulatorModel, dynamic_quant_level, quantize,
                           rate_estimate, sample_pmf, simulate, step_size)
from tdp.loss import ms_ssim
from tdp.numerics import ShapeError


def test_quant_level_examples():
    assert dynamic_quant_level(60).f_q == 50
    assert dynamic_quant_level(0).f_q == 1
    assert dynamic_quant_level(22).f_q == 22
    with pytest.raises(ValueError):
        dynamic_quant_level(float("nan"))
    with pytest.raises(ValueError):
        QuantLevel(0.5)


@settings(max_examples=100, deadline=None)
@given(a=st.floats(-1e6, 1e6), b=st.floats(-1e6, 1e6))
def test_quant_level_idempotent_and_monotone(a, b):
    fa = dynamic_quant_level(a).f_q
    assert dynamic_quant_level(fa).f_q == fa
    assert 1.0 <= fa <= 50.0
    if a <= b:
        assert fa <= dynamic_quant_level(b).f_q


def test_step_doubles_every_six():
    assert step_size(4.0, 1.0) == 1.0
    assert step_size(10.0, 1.0) == pytest.approx(2.0)
    assert step_size(QuantLevel(16.0), 0.5) == pytest.approx(2.0)


def test_eval_rounding():
    assert float(quantize(torch.tensor([0.4]), 1.0, "eval")) == 0.0
    assert torch.equal(quantize(torch.tensor([0.6, -1.4, 2.5]), 0.5, "eval"), torch.tensor([0.5, -1.5, 2.5]))
    with pytest.raises(ValueError):
        quantize(torch.zeros(1), 1.0, "bogus")


def test_train_noise_bounded_and_unbiased():
    step, n = 0.7, 100_000
    x = torch.full((n,), 0.3, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    y = quantize(x, step, "train", g)
    assert float((y - x).abs().max()) <= step / 2
    assert abs(float(y.mean()) - 0.3) < 3 * step / math.sqrt(12 * n)


def test_rate_positive_and_floor_counter():
    prior = FactorizedPrior(2)
    v = torch.randn(1, 2, 4, 4)
    bits = rate_estimate(v, prior, 0.5)
    assert float(bits.detach()) > 0
    prior.underflow_count = 0
    far = torch.full((1, 2, 1, 1), 1e4)
    lik = prior.likelihood(far, 1e-6)
    assert prior.underflow_count > 0 and float(lik.detach().min()) >= PROB_FLOOR


def test_rate_shape_error():
    with pytest.raises(ShapeError):
        rate_estimate(torch.zeros(1, 3, 2, 2), FactorizedPrior(2), 1.0)


def test_cdf_monotone_in_unit_interval():
    torch.manual_seed(0)
    prior = FactorizedPrior(4)
    with torch.no_grad():
        for m in prior.matrices:
            m.add_(torch.randn_like(m))
        for f in prior.factors:
            f.add_(torch.randn_like(f) * 3)
    v = torch.linspace(-20, 20, 2001).expand(4, 1, -1)
    c = prior.cdf(v).detach()
    assert float(c.min()) >= 0.0 and float(c.max()) <= 1.0
    assert bool((c[..., 1:] >= c[..., :-1]).all())


def _peaked_prior(channels=1):
    """Prior whose CDF is a near-step at 0."""
    prior = FactorizedPrior(channels, init_scale=1e-3)
    with torch.no_grad():
        for b in prior.biases:
            b.zero_()
    return prior


def test_concentrated_cdf_gives_near_zero_rate():
    prior = _peaked_prior()
    bits = rate_estimate(torch.zeros(1, 1, 4, 4), prior, 1.0)
    assert float(bits.detach()) < 1e-3 * 16


def _trained_prior(seed=0):
    torch.manual_seed(seed)
    prior = FactorizedPrior(2).double()
    opt = torch.optim.Adam(prior.parameters(), lr=1e-2)
    g = torch.Generator().manual_seed(seed)
    for _ in range(150):
        data = torch.randn(1, 2, 32, 32, generator=g, dtype=torch.float64) * torch.tensor([1.0, 3.0]).view(1, 2, 1, 1)
        v = torch.round(data) + 0  # integer-valued latents, unit step
        opt.zero_grad()
        rate_estimate(v, prior, 1.0).backward()
        opt.step()
    return prior


def test_bits_match_entropy_of_model_distribution():
    prior = _trained_prior()
    for ch in range(2):
        centers, pmf = sample_pmf(prior, ch, 1.0, support=60)
        rng = np.random.default_rng(ch)
        symbols = rng.choice(centers, size=100_000, p=pmf)
        v = torch.zeros(1, 2, 1, symbols.size, dtype=torch.float64)
        v[0, ch, 0] = torch.from_numpy(symbols)
        lik = prior.likelihood(v, 1.0)[0, ch]
        bits = float(-torch.log2(lik.detach()).mean())
        assert bits == pytest.approx(oracles.empirical_entropy_bits(symbols), rel=0.05)


def test_rate_non_increasing_under_wider_steps():
    prior = _trained_prior(1)
    v = torch.randn(1, 2, 16, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(2)) * 2
    rates = [float(rate_estimate(v, prior, step_size(fq, 1.0 / 16)).detach()) for fq in (5, 15, 30, 45)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("side", [64, 128, 50])
def test_simulate_shapes(side):
    torch.manual_seed(0)
    sim = SimulatorModel(8, 4)
    recon, bits = simulate(sim, torch.rand(3, 1, side, side), 30.0)
    assert recon.shape == (3, 1, side, side) and bits.dim() == 0 and float(bits.detach()) > 0
    with pytest.raises(ShapeError):
        simulate(sim, torch.rand(1, 2, side, side), 30.0)


def test_simulate_eval_deterministic():
    torch.manual_seed(0)
    sim = SimulatorModel(8, 4)
    x = torch.rand(1, 1, 64, 64)
    a = simulate(sim, x, 20.0, "eval")
    b = simulate(sim, x, 20.0, "eval")
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_trained_simulator_rd_monotone_in_fq():
    torch.manual_seed(0)
    sim = SimulatorModel(16, 8)
    opt = torch.optim.Adam(sim.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(0)
    yy, xx = torch.meshgrid(torch.linspace(0, 1, 64), torch.linspace(0, 1, 64), indexing="ij")
    base = (0.5 + 0.3 * torch.sin(6 * xx) * torch.cos(4 * yy))[None, None]
    for i in range(200):
        fq = float(torch.randint(5, 46, (1,), generator=g))
        x = (base + 0.05 * torch.randn(base.shape, generator=g)).clamp(0, 1)
        recon, bits = simulate(sim, x, fq, "train", g)
        loss = 1 - ms_ssim(recon, x) + 0.002 * bits / x.numel()
        opt.zero_grad()
        loss.backward()
        opt.step()
    x = base.clamp(0, 1)
    with torch.no_grad():
        out = [simulate(sim, x, fq, "eval") for fq in (5, 15, 30, 45)]
    rates = [float(b) for _, b in out]
    dist = [1 - float(ms_ssim(r, x)) for r, _ in out]
    assert all(b <= a for a, b in zip(rates, rates[1:])), rates
    assert all(b >= a - 1e-6 for a, b in zip(dist, dist[1:])), dist


def test_train_eval_consistency_order_step():
    torch.manual_seed(0)
    sim = SimulatorModel(8, 4)
    x = torch.rand(1, 1, 32, 32)
    y = sim.analysis(x)
    step = step_size(20.0, sim.delta_scale)
    a = quantize(y, step, "train", torch.Generator().manual_seed(1))
    b = quantize(y, step, "eval")
    assert float((a - b).detach().abs().max()) <= step + 1e-6

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from becdiff.discriminator import (
    Discriminator,
    DiscriminatorConfig,
    SubDiscriminator,
    downsample_pyramid,
    halve,
    pyramid_lengths,
    squash,
)
from becdiff.generator import ConfigError


@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def make(seed=0, **kw):
    torch.manual_seed(seed)
    cfg = dict(n_rois=4, length=20, heads=2, embed_dim=8)
    cfg.update(kw)
    return Discriminator(DiscriminatorConfig(**cfg)).double()


def test_pyramid_lengths_187():
    assert pyramid_lengths(187) == [187, 94, 47, 24]
    f = torch.randn(2, 3, 187)
    assert [p.shape[-1] for p in downsample_pyramid(f)] == [187, 94, 47, 24]


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 400))
def test_pyramid_lengths_follow_ceil_halving(d):
    lengths = pyramid_lengths(d)
    for a, b in zip(lengths, lengths[1:]):
        assert b == math.ceil(a / 2)
    if lengths[-1] < 2:
        return
    assert [p.shape[-1] for p in downsample_pyramid(torch.zeros(1, d))] == lengths


def test_short_series_rejected_unless_single_scale():
    assert pyramid_lengths(6) == [6, 3, 2, 1]
    with pytest.raises(ValueError):
        downsample_pyramid(torch.zeros(1, 8))
    with pytest.raises(ConfigError):
        make(length=6)
    assert make(length=6, single_scale=True)(torch.randn(2, 4, 6)).shape == (2,)


def test_constant_series_stay_constant():
    for level in downsample_pyramid(torch.full((2, 3, 19), 1.5)):
        assert torch.all(level == 1.5)


def test_halve_averages_pairs():
    torch.testing.assert_close(halve(torch.tensor([1.0, 3.0, 5.0, 7.0])), torch.tensor([2.0, 6.0]))
    torch.testing.assert_close(halve(torch.tensor([1.0, 3.0, 5.0])), torch.tensor([2.0, 5.0]))


def test_zero_head_gives_one_half():
    d = make()
    with torch.no_grad():
        for sub in d.subs:
            sub.head.weight.zero_()
            sub.head.bias.zero_()
    out = d(torch.randn(3, 4, 20))
    torch.testing.assert_close(out, torch.full((3,), 0.5, dtype=torch.float64))


def test_output_strictly_inside_unit_interval():
    assert 0.0 < squash(torch.tensor(1e4)).item() < 1.0
    assert 0.0 < squash(torch.tensor(-1e4)).item() < 1.0
    d = make().float()
    gen = torch.Generator().manual_seed(1)
    f = torch.randn(1000, 4, 20, generator=gen, dtype=torch.float32)
    f = f * torch.logspace(-2, 3, 1000, dtype=torch.float32)[:, None, None]
    out = d(f)
    assert torch.all(out > 0) and torch.all(out < 1)


def test_forward_is_mean_of_sub_scores():
    d = make()
    f = torch.randn(5, 4, 20)
    subs = d.scores(f)
    assert len(subs) == 4
    expected = sum(subs) / 4
    torch.testing.assert_close(d(f), expected)
    # each sub-network sees its own resolution
    for sub, x, score in zip(d.subs, downsample_pyramid(f), subs):
        torch.testing.assert_close(sub(x), score)


def test_attention_rows_sum_to_one():
    d = make()
    d(torch.randn(2, 4, 20))
    for sub in d.subs:
        s = sub.last_weights.sum(-1)
        torch.testing.assert_close(s, torch.ones_like(s), atol=1e-6, rtol=0)


def test_single_scale_and_timestep_variants():
    d = make(single_scale=True)
    assert len(d.subs) == 1
    assert d(torch.randn(2, 4, 20)).shape == (2,)
    dt = make(use_timestep=True)
    assert dt(torch.randn(2, 4, 20), torch.tensor([4, 8])).shape == (2,)
    with pytest.raises(ValueError):
        dt(torch.randn(2, 4, 20))
    assert make()(torch.randn(4, 20)).shape == ()


@pytest.mark.parametrize("kw", [dict(n_scales=3), dict(heads=3), dict(length=8)])
def test_invalid_configs(kw):
    cfg = dict(n_rois=4, length=20, heads=2, embed_dim=8)
    cfg.update(kw)
    with pytest.raises(ConfigError):
        DiscriminatorConfig(**cfg)


def test_gradcheck_inputs_and_loss():
    d = make(length=16)
    f = torch.randn(2, 4, 16, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: d(x), (f,))
    sub = SubDiscriminator(8, 4, 2).double()
    g = torch.randn(3, 2, 8, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: -torch.log(sub(x)).mean(), (g,))

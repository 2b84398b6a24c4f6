import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from floodseg.catalog import ClassCatalog
from floodseg.errors import ContractError, InvalidOffsetError
from floodseg.losses import (
    AlphaDerivationConfig,
    LossConfig,
    compute_alpha,
    dice_loss,
    loss_gradient,
    one_hot,
    total_loss,
    weighted_focal_loss,
)
from oracles import alpha_loop, dice_loop, focal_loop, total_loop


def random_instance(rng, n_pix, n_cls):
    logits = rng.normal(size=(n_pix, n_cls)) * 2
    p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    t = np.eye(n_cls)[rng.integers(0, n_cls, n_pix)]
    return p, t


def test_focal_worked_example():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]])
    t = np.array([[1, 0, 0], [0, 0, 1]], float)
    got = weighted_focal_loss(p, t, [0.2, 0.3, 0.5], 4.0).item()
    want = (-0.2 * math.log(0.7) * 0.3**4 - 0.5 * math.log(0.8) * 0.2**4) / 2
    assert got == pytest.approx(want, abs=1e-12)


def test_dice_perfect_and_disjoint():
    t = one_hot(torch.tensor([0, 1, 2, 1]), 3, torch.float64)
    assert dice_loss(t, t).item() == pytest.approx(0.0, abs=1e-12)
    wrong = one_hot(torch.tensor([1, 2, 0, 0]), 3, torch.float64)
    assert dice_loss(wrong, t, 1e-5).item() == pytest.approx(1 - 1e-5 / (8 + 1e-5))


def test_total_is_convex_mix():
    rng = np.random.default_rng(0)
    p, t = random_instance(rng, 6, 3)
    alpha = [0.2, 0.3, 0.5]
    d = dice_loss(p, t).item()
    f = weighted_focal_loss(p, t, alpha).item()
    for w in (0.0, 0.3, 1.0):
        got = total_loss(p, t, LossConfig(alpha=alpha, w=w)).item()
        assert got == pytest.approx(w * d + (1 - w) * f, abs=1e-12)


def test_log_clamp_keeps_focal_finite():
    p = np.array([[0.0, 1.0]])
    t = np.array([[1.0, 0.0]])
    val = weighted_focal_loss(p, t, [1.0, 1.0], 0.0).item()
    assert val == pytest.approx(-math.log(1e-7))


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_pix=st.integers(1, 16), n_cls=st.integers(2, 5),
       gamma=st.sampled_from([0.0, 1.0, 2.0, 4.0]))
def test_losses_match_scalar_oracle(seed, n_pix, n_cls, gamma):
    rng = np.random.default_rng(seed)
    p, t = random_instance(rng, n_pix, n_cls)
    alpha = rng.random(n_cls)
    w = float(rng.random())
    assert weighted_focal_loss(p, t, alpha, gamma).item() == pytest.approx(
        focal_loop(p.tolist(), t.tolist(), alpha, gamma), abs=1e-9)
    assert dice_loss(p, t, 1e-5).item() == pytest.approx(dice_loop(p.tolist(), t.tolist(), 1e-5), abs=1e-9)
    cfg = LossConfig(alpha=tuple(alpha), gamma=gamma, w=w)
    assert total_loss(p, t, cfg).item() == pytest.approx(
        total_loop(p.tolist(), t.tolist(), alpha, gamma, 1e-5, w), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_losses_are_bounded_below(seed):
    rng = np.random.default_rng(seed)
    p, t = random_instance(rng, 8, 4)
    assert weighted_focal_loss(p, t, rng.random(4)).item() >= 0
    d = dice_loss(p, t).item()
    assert 0 <= d <= 1


def test_batched_shapes_agree_with_flat():
    rng = np.random.default_rng(3)
    p, t = random_instance(rng, 2 * 3 * 4, 5)
    cfg = LossConfig(alpha=(0.1, 0.2, 0.3, 0.2, 0.2))
    flat = total_loss(p, t, cfg).item()
    batched = total_loss(p.reshape(2, 3, 4, 5), t.reshape(2, 3, 4, 5), cfg).item()
    assert flat == pytest.approx(batched, abs=1e-12)


def test_gradient_matches_finite_difference():
    rng = np.random.default_rng(4)
    p, t = random_instance(rng, 4, 3)
    cfg = LossConfig(alpha=(0.2, 0.5, 0.3))
    g = loss_gradient(p.reshape(2, 2, 3), t.reshape(2, 2, 3), cfg).reshape(4, 3)
    h = 1e-6
    for i in range(4):
        for c in range(3):
            up, dn = p.copy(), p.copy()
            up[i, c] += h
            dn[i, c] -= h
            fd = (total_loop(up.tolist(), t.tolist(), cfg.alpha, 4.0, 1e-5, 0.5)
                  - total_loop(dn.tolist(), t.tolist(), cfg.alpha, 4.0, 1e-5, 0.5)) / (2 * h)
            assert g[i, c] == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_contract_errors():
    p = np.full((2, 3), 1 / 3)
    with pytest.raises(ContractError):
        total_loss(p, np.zeros((2, 4)))
    with pytest.raises(ContractError):
        weighted_focal_loss(np.full((2, 3), 0.5), np.eye(3)[:2], [1, 1, 1])
    with pytest.raises(ContractError):
        weighted_focal_loss(p, np.eye(3)[:2], [1, 1])
    with pytest.raises(ContractError):
        LossConfig(w=1.5)


def test_alpha_inverse_frequency():
    a = compute_alpha([10, 30, 60])
    np.testing.assert_allclose(a, [2 / 3, 2 / 9, 1 / 9], atol=1e-9)
    np.testing.assert_allclose(a, alpha_loop([10, 30, 60]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(counts=st.lists(st.integers(0, 10**7), min_size=2, max_size=10))
def test_alpha_properties(counts):
    a = compute_alpha(counts)
    assert a.sum() == pytest.approx(1.0, abs=1e-9)
    assert (a > 0).all()
    # rarer classes never get less weight
    order = np.argsort(counts, kind="stable")
    assert (np.diff(a[order]) <= 1e-12).all()


def test_alpha_offsets():
    a = compute_alpha([10, 30, 60], AlphaDerivationConfig(beta=(0.0, 0.1, -0.1)))
    np.testing.assert_allclose(a, alpha_loop([10, 30, 60], [0.0, 0.1, -0.1]), atol=1e-12)
    with pytest.raises(InvalidOffsetError):
        AlphaDerivationConfig(beta=(0.0, 0.3, 0.0))
    with pytest.raises(InvalidOffsetError):
        compute_alpha([1, 100, 100], AlphaDerivationConfig(beta=(0.0, -0.2, 0.0)))


def test_published_alphas_sum_to_one():
    assert abs(ClassCatalog.default().alphas.sum() - 1.0) <= 1e-9
    assert LossConfig().alpha == tuple(ClassCatalog.default().alphas)

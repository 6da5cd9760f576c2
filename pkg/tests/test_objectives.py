import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from anatomy_modality.factor_model import NumericFailure
from anatomy_modality.objectives import (
    LossReport,
    LossWeights,
    adversarial_losses,
    dice_loss,
    kl_loss,
    reconstruction_loss,
    total_loss,
    write_loss_csv,
    z_reconstruction_loss,
)


def kl_by_quadrature(mean: float, var: float) -> float:
    """KL(N(mean, var) || N(0, 1)) by integrating q log(q/p)."""
    sd = math.sqrt(var)

    def integrand(z):
        log_q = -0.5 * math.log(2 * math.pi * var) - (z - mean) ** 2 / (2 * var)
        log_p = -0.5 * math.log(2 * math.pi) - z * z / 2
        return math.exp(log_q) * (log_q - log_p)

    val, _ = integrate.quad(integrand, mean - 40 * sd, mean + 40 * sd, limit=400, epsabs=1e-12)
    return val


def _kl(mean, var):
    m = torch.tensor([[mean]], dtype=torch.float64)
    lv = torch.log(torch.tensor([[var]], dtype=torch.float64))
    return float(kl_loss(m, lv))


def test_kl_examples():
    assert _kl(1.0, 1.0) == pytest.approx(0.5, abs=1e-12)
    # 0.5 * (4 - ln 4 - 1), frozen from the quadrature oracle
    assert _kl(0.0, 4.0) == pytest.approx(0.8068528194400546, abs=1e-9)
    assert kl_by_quadrature(0.0, 4.0) == pytest.approx(0.8068528194400546, abs=1e-7)


def test_kl_zero_at_prior_and_batch_average():
    assert float(kl_loss(torch.zeros(3, 5), torch.zeros(3, 5))) == 0.0
    mean = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    lv = torch.zeros(2, 2)
    # sum over dims then mean over the batch: (0.5 + 0) / 2
    assert float(kl_loss(mean, lv)) == pytest.approx(0.25)


def test_kl_rejects_non_finite():
    with pytest.raises(NumericFailure):
        kl_loss(torch.tensor([[float("nan")]]), torch.zeros(1, 1))


@given(st.floats(-3, 3), st.floats(0.05, 5.0))
def test_kl_non_negative_and_matches_quadrature(mean, var):
    v = _kl(mean, var)
    assert v >= -1e-12
    assert v == pytest.approx(kl_by_quadrature(mean, var), abs=1e-4)


def _mask(pixels, shape=(1, 1, 4, 4)):
    m = torch.zeros(shape)
    for p in pixels:
        m.view(-1)[p] = 1.0
    return m


def test_dice_loss_examples():
    gt = _mask([0, 1, 2, 3])
    assert float(dice_loss(gt, gt)) == pytest.approx(0.0, abs=1e-5)
    assert float(dice_loss(gt, _mask([8, 9, 10, 11]))) == pytest.approx(1.0, abs=1e-6)
    # overlap 2 of 4 + 4 pixels
    assert float(dice_loss(gt, _mask([2, 3, 4, 5]))) == pytest.approx(0.5, abs=1e-6)


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError):
        dice_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2, 4, 4))


@given(st.integers(0, 2**32 - 1))
def test_dice_loss_range(seed):
    g = torch.Generator().manual_seed(seed)
    gt = (torch.rand(2, 3, 6, 6, generator=g) > 0.5).float()
    pred = torch.rand(2, 3, 6, 6, generator=g)
    v = float(dice_loss(gt, pred))
    assert -1e-6 <= v <= 1.0 + 1e-5


def test_lsgan_grid():
    for fake, real, gen, disc in [(0.0, 1.0, 1.0, 0.0), (1.0, 1.0, 0.0, 1.0), (0.5, 0.5, 0.25, 0.5)]:
        g, d = adversarial_losses(torch.tensor([fake]), torch.tensor([real]))
        assert float(g) == gen
        assert float(d) == disc


def test_reconstruction_losses():
    x = torch.zeros(2, 1, 2, 2)
    assert float(reconstruction_loss(x, x + 0.5)) == pytest.approx(0.5)
    assert float(z_reconstruction_loss(torch.ones(3, 4), torch.zeros(3, 4))) == 1.0
    with pytest.raises(ValueError):
        reconstruction_loss(x, torch.zeros(2, 1, 3, 3))


def test_total_loss_examples():
    zero = dict(kl=0.0, segm=0.0, adv_gen=0.0, rec=0.0, z_rec=0.0)
    assert total_loss({**zero, "kl": 1.0}, LossWeights()) == pytest.approx(0.01)
    mixed = dict(kl=1.0, segm=0.5, adv_gen=0.1, rec=0.2, z_rec=0.3)
    # 0.01 + 5 + 1 + 0.2 + 0.3
    assert total_loss(mixed, LossWeights()) == pytest.approx(6.51)
    assert total_loss(mixed, LossWeights(), has_labels=False) == pytest.approx(1.51)


_TERMS = {"kl": "kl", "segm": "segm", "adv_gen": "adv", "rec": "rec", "z_rec": "z_rec"}


@given(
    st.fixed_dictionaries({k: st.floats(0, 5) for k in _TERMS}),
    st.fixed_dictionaries({w: st.floats(0, 20) for w in _TERMS.values()}),
    st.sampled_from(sorted(_TERMS)),
    st.floats(0.01, 2.0),
)
def test_total_loss_linear_in_each_term(report, weights, term, bump):
    w = LossWeights(**weights)
    base = total_loss(report, w)
    moved = total_loss({**report, term: report[term] + bump}, w)
    assert moved - base == pytest.approx(weights[_TERMS[term]] * bump, rel=1e-9, abs=1e-9)


def test_weights_validation():
    assert LossWeights() == LossWeights(0.01, 10, 10, 1, 1)
    with pytest.raises(ValueError):
        LossWeights(kl=-0.1)


def test_loss_csv(tmp_path):
    p = tmp_path / "losses.csv"
    write_loss_csv(p, [(0, LossReport(kl=1.0, total=0.01))])
    lines = p.read_text().splitlines()
    assert lines[0] == "step,kl,segm,adv_gen,adv_disc,rec,z_rec,total"
    assert lines[1].startswith("0,1.0,")

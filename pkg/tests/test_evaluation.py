import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anatomy_modality.evaluation import capacity_analysis, compute_lvv, dice_score, modality_probe


def dice_by_counting(pred, gt, c):
    p = [i for i, v in enumerate(pred.ravel()) if v == c]
    g = [i for i, v in enumerate(gt.ravel()) if v == c]
    if not p and not g:
        return 1.0
    return 2 * len(set(p) & set(g)) / (len(p) + len(g))


def test_dice_score_examples():
    a = np.zeros((4, 4), np.uint8)
    a[0] = 1
    b = np.zeros((4, 4), np.uint8)
    b[0, 2:] = 1
    b[1, :2] = 1
    assert dice_score(a, a, 1).tolist() == [1.0]
    assert dice_score(a, np.roll(a, 2, axis=0), 1).tolist() == [0.0]
    assert dice_score(a, b, 1).tolist() == [0.5]
    # absent in both counts as agreement
    assert dice_score(a, a, 2).tolist() == [1.0, 1.0]
    with pytest.raises(ValueError):
        dice_score(a, a[:2], 1)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=100)
def test_dice_score_matches_counting_and_is_symmetric(seed):
    r = np.random.default_rng(seed)
    pred, gt = r.integers(0, 4, (6, 6)), r.integers(0, 4, (6, 6))
    d = dice_score(pred, gt, 3)
    assert np.allclose(d, [dice_by_counting(pred, gt, c) for c in (1, 2, 3)], atol=1e-12)
    assert np.array_equal(d, dice_score(gt, pred, 3))
    assert np.all((d >= 0) & (d <= 1))


def test_compute_lvv_examples():
    assert compute_lvv([1000], 1.0, 10.0) == pytest.approx(10.0)
    assert compute_lvv([0, 0, 0], 1.4, 8.0) == 0.0


@given(st.lists(st.integers(0, 3000), min_size=1, max_size=5), st.floats(0.5, 2.0), st.floats(1, 12), st.floats(0.1, 5))
def test_compute_lvv_linear(counts, res, thick, k):
    base = compute_lvv(counts, res, thick)
    assert compute_lvv(np.array(counts) * k, res, thick) == pytest.approx(k * base, rel=1e-9, abs=1e-9)
    assert compute_lvv(counts, res, thick * k) == pytest.approx(k * base, rel=1e-9, abs=1e-9)


def _clusters(seed, n=80, sep=4.0, dims=5):
    r = np.random.default_rng(seed)
    tags = np.array(["A", "B"] * (n // 2))
    z = r.normal(size=(n, dims))
    z[tags == "B", 0] += sep
    return z, tags


def test_probe_separable_and_shuffled():
    z_tr, t_tr = _clusters(0, sep=20)
    z_te, t_te = _clusters(1, sep=20)
    rep = modality_probe(z_tr, t_tr, z_te, t_te)
    assert rep.all_dims_accuracy == 1.0
    assert rep.per_dim_accuracy[0] == 1.0
    r = np.random.default_rng(2)
    shuffled = modality_probe(z_tr, r.permutation(t_tr), z_te, r.permutation(t_te))
    assert abs(shuffled.all_dims_accuracy - 0.5) <= 0.15


@given(st.integers(0, 1000), st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=25)
def test_probe_invariant_to_affine_rescaling(seed, scale, shift):
    z_tr, t_tr = _clusters(seed, sep=1.5)
    z_te, t_te = _clusters(seed + 1, sep=1.5)
    a = modality_probe(z_tr, t_tr, z_te, t_te)
    b = modality_probe(z_tr * scale + shift, t_tr, z_te * scale + shift, t_te)
    assert a.all_dims_accuracy == pytest.approx(b.all_dims_accuracy, abs=1e-9)
    assert np.allclose(a.per_dim_accuracy, b.per_dim_accuracy)


def test_probe_rejects_single_class():
    z = np.zeros((4, 2))
    with pytest.raises(ValueError):
        modality_probe(z, ["A"] * 4, z, ["A", "B", "A", "B"])


def test_capacity_examples():
    lv = np.zeros((10, 3))
    lv[:, 1] = np.log(0.25)
    assert np.allclose(capacity_analysis(lv), [1.0, 0.25, 1.0])
    with pytest.raises(ValueError):
        capacity_analysis(np.zeros((0, 3)))


@given(st.lists(st.floats(-10, 10), min_size=2, max_size=20))
def test_capacity_positive(vals):
    assert np.all(capacity_analysis(np.array(vals).reshape(-1, 1)) > 0)

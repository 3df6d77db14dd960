import itertools
import warnings

import numpy as np
import pytest

from vdn.data import (Dataset, DomainSpec, apply_style, gen_multidomain, gen_xor, invert_style,
                      lodo_split, restyle, sample_content, xor_label)
from vdn.errors import ContractError, VdnError


def test_xor_truth_table_over_all_orthants():
    for signs in itertools.product([-1, 1], repeat=3):
        x = 0.5 * np.array(signs)
        expected = sum(s > 0 for s in signs) % 2
        assert xor_label(x) == expected
    assert xor_label([0.5, 0.5, 0.5]) == 1 and xor_label([-0.5, -0.5, -0.5]) == 0


def test_xor_balance_and_range():
    ds = gen_xor(100_000, np.random.default_rng(0))
    assert abs(ds.y.mean() - 0.5) < 0.01
    assert np.all(np.abs(ds.x) <= 1) and set(ds.d) == {0}
    with pytest.raises(ContractError):
        gen_xor(0, np.random.default_rng(0))


@pytest.fixture(scope="module")
def spec():
    return DomainSpec.random(4, 4, seed=0)


@pytest.fixture(scope="module")
def multi(spec):
    return gen_multidomain(spec, 80, np.random.default_rng(3))


def test_pixels_in_range_and_balanced(multi):
    assert np.all(np.abs(multi.x) <= 1.0)
    for d in range(4):
        assert np.all(np.bincount(multi.y[multi.d == d], minlength=4) == 20)


def test_same_content_in_two_domains_inverts_to_the_same_map(spec, rng):
    fac = sample_content(spec, np.array([2]), rng)
    a = apply_style(spec, fac["content"], [0])
    b = apply_style(spec, fac["content"], [3])
    np.testing.assert_allclose(invert_style(spec, a, [0]), invert_style(spec, b, [3]), atol=1e-12)


def test_style_swap_and_back_is_exact(spec, multi):
    src, dst = multi.d, (multi.d + 1) % 4
    there = restyle(spec, multi.x, src, dst)
    back = restyle(spec, there, dst, src)
    np.testing.assert_allclose(back, multi.x, atol=1e-12, rtol=0)


def test_linear_probe_on_content_factors_is_perfect_in_every_domain(spec, multi):
    # nearest-anchor rule: argmax_k <a_k, f> - |a_k|^2 / 2 is linear in the blob centre f
    feats = np.c_[multi.factors["center_u"], multi.factors["center_v"]]
    anchors = spec.class_anchors()
    scores = feats @ anchors.T - 0.5 * np.sum(anchors ** 2, axis=1)
    pred = scores.argmax(axis=1)
    for d in range(4):
        m = multi.d == d
        assert np.mean(pred[m] == multi.y[m]) == 1.0


def test_content_factor_means_agree_across_domains(spec):
    ds = gen_multidomain(spec, 2000, np.random.default_rng(7))
    for key in ("center_u", "center_v", "radius", "intensity"):
        vals = ds.factors[key]
        means = [vals[ds.d == d].mean() for d in range(4)]
        se = vals.std() / np.sqrt(2000)
        assert max(means) - min(means) < 6 * se, key


def test_degenerate_styles_are_flagged():
    g = np.full((3, 3), 0.5)
    spec = DomainSpec(g, np.zeros((3, 3)))
    with pytest.warns(UserWarning):
        ds = gen_multidomain(spec, 8, np.random.default_rng(0))
    assert "degenerate_styles" in ds.warnings


def test_spec_contracts():
    with pytest.raises(ContractError):
        DomainSpec(np.zeros((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ContractError):
        DomainSpec(np.full((3, 3), 0.9), np.full((3, 3), 0.5))
    with pytest.raises(ContractError):
        gen_multidomain(DomainSpec.random(2, 4), 10, np.random.default_rng(0))


def test_lodo_split(multi):
    train, test = lodo_split(multi, 1)
    assert train.domains() == [0, 2, 3] and test.domains() == [1]
    assert len(train) + len(test) == len(multi)
    for d in (0, 2, 3):
        assert np.sum(train.d == d) == np.sum(multi.d == d)
    with pytest.raises(ContractError):
        lodo_split(multi, 9)


def test_save_load_round_trip(multi, tmp_path):
    multi.save(tmp_path)
    back = Dataset.load(tmp_path)
    np.testing.assert_array_equal(back.x, multi.x)
    np.testing.assert_array_equal(back.y, multi.y)
    np.testing.assert_array_equal(back.d, multi.d)
    assert back.image_shape == multi.image_shape
    raw = (tmp_path / "data.bin").read_bytes()
    assert len(raw) == 8 * len(multi) * (multi.x_dim + 2)
    row0 = np.frombuffer(raw[: 8 * (multi.x_dim + 2)], dtype="<f8")
    assert row0[-2] == multi.y[0] and row0[-1] == multi.d[0]
    (tmp_path / "data.bin").write_bytes(raw[:-8])
    with pytest.raises(VdnError):
        Dataset.load(tmp_path)

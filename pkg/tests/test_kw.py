"""Kernel-weighted pseudoweights: hand values, invariants, brute-force oracle."""

import numpy as np
import pytest

from kwnr.data_model import Provenance
from kwnr.kw import (KERNELS, KernelSpec, OrphanReferenceError,
                     epanechnikov_kernel, gaussian_kernel, kw_pseudoweights,
                     silverman_bandwidth, triweight_kernel)

K0 = 0.3989422804014327   # standard normal density at 0
K1 = 0.24197072451914337  # and at 1


def brute_force(scores_c, scores_s, d_s, kernel, h):
    """Direct double-loop evaluation of the pseudoweight definition."""
    out = np.zeros(len(scores_c))
    for i in range(len(scores_s)):
        row = np.array([kernel(np.array((scores_s[i] - b) / h))
                        for b in scores_c], dtype=float)
        out += d_s[i] * row / row.sum()
    return out


# ------------------------------------------------------------------- kernels


def test_gaussian_kernel_values():
    assert gaussian_kernel(0.0) == pytest.approx(K0, abs=1e-15)
    assert gaussian_kernel(1.0) == pytest.approx(K1, abs=1e-15)


def test_kernels_nonnegative_symmetric_positive_at_zero():
    t = np.linspace(-3, 3, 61)
    for kernel in KERNELS.values():
        vals = kernel(t)
        assert np.all(vals >= 0)
        assert np.allclose(vals, kernel(-t))
        assert kernel(np.array(0.0)) > 0


def test_bounded_kernels_vanish_outside_support():
    assert epanechnikov_kernel(1.5) == 0.0
    assert triweight_kernel(-1.2) == 0.0


def test_kernel_spec_validation():
    with pytest.raises(ValueError, match="unknown kernel"):
        KernelSpec(kernel="box")
    with pytest.raises(ValueError, match="positive"):
        KernelSpec(bandwidth=0.0)
    with pytest.raises(ValueError, match="silverman"):
        KernelSpec(bandwidth="auto")
    assert KernelSpec(bandwidth=2.5).resolve_bandwidth(np.zeros(3)) == 2.5


# ----------------------------------------------------------------- bandwidth


def test_silverman_formula():
    rng = np.random.default_rng(2)
    scores = rng.standard_normal(1000)
    h = silverman_bandwidth(scores)
    sd = np.std(scores, ddof=1)
    iqr = np.subtract(*np.percentile(scores, [75, 25]))
    assert h == pytest.approx(0.9 * min(sd, iqr / 1.34) * 1000 ** -0.2)
    # standard normal scores land near the closed-form value
    assert h == pytest.approx(0.9 * 1000 ** -0.2, rel=0.2)


def test_silverman_degenerate_and_location_invariance():
    with pytest.raises(ValueError, match="degenerate"):
        silverman_bandwidth(np.zeros(10))
    with pytest.raises(ValueError, match="at least 2"):
        silverman_bandwidth(np.array([1.0]))
    rng = np.random.default_rng(3)
    scores = rng.standard_normal(50)
    assert silverman_bandwidth(scores + 17.3) == pytest.approx(
        silverman_bandwidth(scores), rel=1e-12)


def test_silverman_zero_iqr_falls_back_to_sd():
    scores = np.r_[np.zeros(20), 1.0, -1.0]  # IQR 0, sd positive
    sd = np.std(scores, ddof=1)
    assert silverman_bandwidth(scores) == pytest.approx(
        0.9 * sd * scores.size ** -0.2)


# ------------------------------------------------------------- pseudoweights


def test_single_pair_identity():
    w = kw_pseudoweights([0.0], [0.0], [2.0], KernelSpec(bandwidth=1.0))
    assert w.values[0] == pytest.approx(2.0, abs=1e-12)
    assert w.provenance is Provenance.KW


def test_symmetric_split():
    for name in KERNELS:
        for h in (0.5, 1.0, 3.0):
            w = kw_pseudoweights([0.4, -0.4], [0.0], [2.0],
                                 KernelSpec(kernel=name, bandwidth=h))
            assert np.allclose(w.values, [1.0, 1.0], atol=1e-12)


def test_two_by_two_hand_values():
    # reference scores {0, 1} with weights {2, 1}, cohort scores {0, 1}, h = 1:
    # each kernel row is {K0, K1} (in some order) normalized over the cohort
    w = kw_pseudoweights([0.0, 1.0], [0.0, 1.0], [2.0, 1.0],
                         KernelSpec(bandwidth=1.0))
    expected0 = 2.0 * K0 / (K0 + K1) + 1.0 * K1 / (K0 + K1)
    expected1 = 2.0 * K1 / (K0 + K1) + 1.0 * K0 / (K0 + K1)
    assert w.values == pytest.approx([expected0, expected1], rel=1e-12)
    assert w.sum() == pytest.approx(3.0, rel=1e-12)


def test_mass_conservation():
    rng = np.random.default_rng(5)
    b_c = rng.standard_normal(700)
    b_s = rng.standard_normal(300) * 1.2
    d = rng.lognormal(3.0, 0.8, 300)
    w = kw_pseudoweights(b_c, b_s, d)
    assert abs(w.sum() - d.sum()) / d.sum() < 1e-9
    assert np.all(w.values >= 0)
    assert np.all(w.values > 0)  # unbounded-support kernel touches every unit


def test_location_invariance():
    rng = np.random.default_rng(6)
    b_c = rng.standard_normal(80)
    b_s = rng.standard_normal(40)
    d = rng.uniform(1, 5, 40)
    spec = KernelSpec(bandwidth=0.7)
    w0 = kw_pseudoweights(b_c, b_s, d, spec)
    w1 = kw_pseudoweights(b_c + 123.456, b_s + 123.456, d, spec)
    assert np.allclose(w0.values, w1.values, rtol=1e-12)


def test_large_bandwidth_uniform_limit():
    rng = np.random.default_rng(7)
    b_c = rng.standard_normal(50)
    b_s = rng.standard_normal(20)
    d = rng.uniform(1, 4, 20)
    w = kw_pseudoweights(b_c, b_s, d, KernelSpec(bandwidth=1e6))
    uniform = d.sum() / 50
    assert np.allclose(w.values, uniform, rtol=1e-6)


def test_brute_force_oracle_small_samples():
    rng = np.random.default_rng(8)
    for name in KERNELS:
        for _ in range(5):
            n_c = rng.integers(1, 6)
            n_s = rng.integers(1, 6)
            b_c = rng.uniform(-1, 1, n_c)
            b_s = rng.uniform(-1, 1, n_s)
            d = rng.uniform(0.5, 3, n_s)
            # keep |b_i - b_j|/h < 1 so bounded kernels keep every row alive
            h = rng.uniform(2.5, 4)
            w = kw_pseudoweights(b_c, b_s, d,
                                 KernelSpec(kernel=name, bandwidth=h))
            oracle = brute_force(b_c, b_s, d, KERNELS[name], h)
            assert np.allclose(w.values, oracle, rtol=1e-13)


def test_chunking_does_not_change_results():
    rng = np.random.default_rng(9)
    b_c = rng.standard_normal(100)
    b_s = rng.standard_normal(1200)
    d = rng.uniform(1, 3, 1200)
    spec = KernelSpec(bandwidth=0.4)
    w_all = kw_pseudoweights(b_c, b_s, d, spec, chunk=10_000)
    w_small = kw_pseudoweights(b_c, b_s, d, spec, chunk=7)
    assert np.allclose(w_all.values, w_small.values, rtol=1e-12)


def test_orphan_reference_bounded_kernel():
    with pytest.raises(OrphanReferenceError) as err:
        kw_pseudoweights([0.0, 0.1], [0.0, 5.0], [1.0, 1.0],
                         KernelSpec(kernel="epanechnikov", bandwidth=1.0))
    assert err.value.indices == (1,)
    assert "wider bandwidth" in str(err.value)


def test_orphan_reference_gaussian_underflow():
    # kernel underflows to exactly 0 at huge standardized distance
    with pytest.raises(OrphanReferenceError):
        kw_pseudoweights([0.0], [1000.0], [1.0], KernelSpec(bandwidth=1.0))


def test_input_validation():
    with pytest.raises(ValueError, match="align"):
        kw_pseudoweights([0.0], [0.0, 1.0], [1.0], KernelSpec(bandwidth=1.0))
    with pytest.raises(ValueError, match="nonempty"):
        kw_pseudoweights([], [0.0], [1.0], KernelSpec(bandwidth=1.0))

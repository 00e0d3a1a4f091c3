import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from olivia.data import default_presets, build_corpus
from olivia.errors import DegenerateSpectrumError, ValidationError
from olivia.harmonizer import HouseholderStack
from olivia.rng import CounterRNG, stream_key, mix64, GAMMA, MASK64
from olivia.spectral import (
    Psd,
    Window,
    dataset_psd,
    divergence,
    harmonization_gap,
    moment_matrix,
    periodogram,
    sample_windows,
    standardize_window,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def naive_periodogram(x):
    T = len(x)
    out = []
    for k in range(T // 2 + 1):
        acc = 0j
        for t in range(T):
            acc += x[t] * complex(math.cos(2 * math.pi * k * t / T), -math.sin(2 * math.pi * k * t / T))
        out.append(abs(acc) ** 2 / T)
    return np.array(out)


def distributions(n):
    return arrays(np.float64, n, elements=st.floats(0, 1)).filter(lambda a: a.sum() > 1e-3).map(lambda a: a / a.sum())


class TestPeriodogram:
    def test_constant_is_dc(self):
        np.testing.assert_allclose(periodogram(np.ones(4)).power, [4, 0, 0], atol=1e-14)

    def test_nyquist(self):
        np.testing.assert_allclose(periodogram([1, -1, 1, -1]).power, [0, 0, 4], atol=1e-14)

    def test_matches_naive_dft(self):
        x = [0.5, -0.2, 0.3, 0.1]
        np.testing.assert_allclose(periodogram(x).power, naive_periodogram(x), rtol=0, atol=1e-12)

    def test_odd_length_bins(self, rng):
        x = rng.normal(size=7)
        p = periodogram(x)
        assert p.F == 4
        np.testing.assert_allclose(p.power, naive_periodogram(x), atol=1e-12)

    @pytest.mark.parametrize("T", [8, 64, 512, 4096])
    def test_direct_and_fast_agree(self, T, rng):
        x = rng.normal(size=(3, T))
        a = periodogram(x, method="direct").power
        b = periodogram(x, method="fft").power
        assert np.max(np.abs(a - b)) < 1e-9 * max(1.0, np.max(b))

    def test_nonfinite_rejected(self):
        with pytest.raises(ValidationError):
            periodogram([1.0, np.nan, 2.0])
        with pytest.raises(ValidationError):
            Window(np.array([1.0, np.inf]))

    @given(arrays(np.float64, st.integers(2, 40), elements=finite), st.integers(0, 39))
    def test_shift_invariance_and_nonnegative(self, x, shift):
        p = periodogram(x).power
        assert np.all(p >= 0)
        q = periodogram(np.roll(x, shift)).power
        assert np.allclose(p, q, atol=1e-10 * max(1.0, p.max()))

    @given(arrays(np.float64, st.integers(2, 40), elements=finite))
    def test_parseval_two_sided(self, x):
        T = len(x)
        p = periodogram(x).power
        full = p[0] + 2 * p[1 : (T + 1) // 2].sum() + (p[T // 2] if T % 2 == 0 else 0.0)
        assert math.isclose(full, float(np.sum(x**2)), rel_tol=1e-9, abs_tol=1e-9)


class TestDatasetPsd:
    def test_constant_window(self):
        np.testing.assert_allclose(dataset_psd([np.full(6, 3.0)]).power, [1, 0, 0, 0], atol=1e-15)

    def test_matches_elementwise_oracle(self, rng):
        a, b = rng.normal(size=8), rng.normal(size=8)
        mean = (naive_periodogram(a) + naive_periodogram(b)) / 2
        got = dataset_psd([a, b])
        assert got.normalized
        np.testing.assert_allclose(got.power, mean / mean.sum(), atol=1e-12)

    def test_sums_to_one(self, rng):
        p = dataset_psd(list(rng.normal(size=(20, 33))))
        assert abs(p.power.sum() - 1) < 1e-12

    def test_errors(self):
        with pytest.raises(ValidationError):
            dataset_psd([])
        with pytest.raises(ValidationError):
            dataset_psd([np.ones(4), np.ones(5)])
        with pytest.raises(DegenerateSpectrumError):
            dataset_psd([np.zeros(4)])


class TestDivergence:
    def test_identical(self):
        p = np.array([0.2, 0.3, 0.5])
        assert divergence(p, p, "js") == 0.0
        assert divergence(p, p, "kl") == 0.0

    def test_disjoint_is_ln2(self):
        assert abs(divergence([1.0, 0.0], [0.0, 1.0], "js") - math.log(2)) < 1e-12

    def test_derived_value(self):
        mpmath.mp.dps = 40
        p, q = [mpmath.mpf("0.5")] * 2, [mpmath.mpf("0.9"), mpmath.mpf("0.1")]
        m = [(a + b) / 2 for a, b in zip(p, q)]
        oracle = sum(0.5 * a * mpmath.log(a / c) + 0.5 * b * mpmath.log(b / c) for a, b, c in zip(p, q, m))
        assert abs(float(oracle) - 0.101749) < 5e-7
        assert abs(divergence([0.5, 0.5], [0.9, 0.1], "js") - float(oracle)) < 1e-12

    def test_kl_infinite_on_missing_support(self):
        assert divergence([0.5, 0.5], [1.0, 0.0], "kl") == math.inf
        assert divergence([1.0, 0.0], [0.5, 0.5], "kl") == pytest.approx(math.log(2))

    def test_errors(self):
        with pytest.raises(ValidationError):
            divergence([0.5, 0.6], [0.5, 0.5])
        with pytest.raises(ValidationError):
            divergence([1.0], [0.5, 0.5])
        with pytest.raises(ValidationError):
            divergence([0.5, 0.5], [0.5, 0.5], "wasserstein")

    @given(distributions(6), distributions(6))
    def test_properties(self, p, q):
        js = divergence(p, q, "js")
        assert js == divergence(q, p, "js")
        assert 0.0 <= js <= math.log(2)
        assert divergence(p, q, "kl") >= -1e-12
        assert divergence(p, p, "kl") == 0.0


class TestStandardize:
    def test_constant(self):
        np.testing.assert_array_equal(standardize_window(np.full(4, 5.0), 1e-8), np.zeros(4))

    def test_hand_value(self):
        np.testing.assert_allclose(standardize_window(np.array([1.0, 2, 3, 4]), 0.0),
                                   [-1.34164, -0.44721, 0.44721, 1.34164], atol=1e-5)

    def test_window_type_preserved(self):
        w = standardize_window(Window(np.array([1.0, 3.0]), "a"))
        assert isinstance(w, Window) and w.domain_id == "a"

    @given(arrays(np.float64, st.integers(2, 50), elements=finite))
    def test_centered_and_idempotent(self, x):
        eps = 1e-8
        once = standardize_window(x, eps)
        scale = np.max(np.abs(x)) / (x.std() + eps) + 1.0
        assert abs(once.mean()) < 1e-12 * scale
        if x.std() > 1e-3:
            rel = eps / x.std()
            assert abs(once.std() - 1) < 2 * rel + 1e-12 * scale
            twice = standardize_window(once, eps)
            assert np.max(np.abs(twice - once)) < (2 * rel + 2 * eps + 1e-12 * scale) * max(1.0, np.max(np.abs(once)))


class TestSampleWindows:
    def test_single_start(self):
        s = np.arange(512.0)
        ws = sample_windows(s, 512, 3, seed=0, standardize=False)
        assert len(ws) == 3
        for w in ws:
            np.testing.assert_array_equal(w.values, s)

    def test_deterministic(self, rng):
        s = rng.normal(size=700)
        a = sample_windows(s, 64, 10, seed=5)
        b = sample_windows(s, 64, 10, seed=5)
        assert all(np.array_equal(x.values, y.values) for x, y in zip(a, b))

    def test_start_histogram_matches_reference_generator(self):
        s = np.arange(1000.0)
        ws = sample_windows(s, 512, 2000, seed=7, standardize=False, domain_id="d")
        starts = np.array([int(w.values[0]) for w in ws])
        # independent scalar implementation of the same stream
        key = stream_key(7, "windows/d")
        ref = []
        for i in range(2000):
            z = mix64((key + (i + 1) * GAMMA) & MASK64)
            ref.append(min(int(((z >> 11) * 2.0**-53) * 489), 488))
        assert np.array_equal(np.bincount(starts, minlength=489), np.bincount(ref, minlength=489))
        assert starts.min() >= 0 and starts.max() <= 488

    def test_too_short(self):
        with pytest.raises(ValidationError):
            sample_windows(np.ones(10), 16, 1)

    def test_standardized(self, rng):
        ws = sample_windows(rng.normal(5, 3, size=300), 32, 4, seed=1, standardize=True)
        assert all(abs(w.values.mean()) < 1e-10 for w in ws)


class TestMoments:
    def test_rank_one(self):
        np.testing.assert_array_equal(moment_matrix([np.array([1.0, 1.0])]).sigma, [[1, 1], [1, 1]])

    def test_naive_loop(self, rng):
        X = rng.normal(size=(5, 6))
        naive = np.zeros((6, 6))
        for x in X:
            for i in range(6):
                for j in range(6):
                    naive[i, j] += x[i] * x[j]
        mm = moment_matrix(list(X))
        np.testing.assert_allclose(mm.sigma, naive / 5, atol=1e-12)
        assert mm.sample_count == 5

    def test_psd_symmetric_and_order_invariant(self, rng):
        X = rng.normal(size=(9, 10))
        a = moment_matrix(list(X)).sigma
        b = moment_matrix(list(X[::-1])).sigma
        np.testing.assert_allclose(a, b, atol=1e-13)
        assert np.max(np.abs(a - a.T)) <= 1e-12
        w = np.linalg.eigvalsh(a)
        assert w.min() >= -1e-9 * w.max()

    def test_errors_and_csv(self):
        with pytest.raises(ValidationError):
            moment_matrix([])
        with pytest.raises(ValidationError):
            moment_matrix([np.ones(3), np.ones(4)])
        text = moment_matrix([np.array([1.0, 2.0])]).to_csv()
        rows = [list(map(float, r.split(","))) for r in text.strip().splitlines()]
        assert rows == [[1.0, 2.0], [2.0, 4.0]]


class TestHarmonizationGap:
    @staticmethod
    @pytest.fixture(scope="class")
    def corpora():
        specs = [s for s in default_presets(128)[:3]]
        corpus = build_corpus(specs, 128, 40, seed=0)
        return {d: [standardize_window(w) for w in ws] for d, ws in corpus.domains.items()}

    def test_identity_transform(self, corpora):
        a = harmonization_gap(corpora)
        b = harmonization_gap(corpora, HouseholderStack.identity(128))
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_report_properties(self, corpora):
        rep = harmonization_gap(corpora, HouseholderStack.initialize(8, 128, 0, "random"))
        m = rep.matrix
        assert np.array_equal(m, m.T)
        assert np.all(np.diag(m) == 0)
        assert np.all(m <= math.log(2) + 1e-12)
        js = rep.to_json()
        assert set(js) == {"T", "labels", "psd", "js_matrix"} and js["T"] == 128

    def test_disjoint_bands_far_apart(self):
        T = 128
        t = np.arange(T)
        d2 = [np.sin(2 * np.pi * 2 * t / T + ph) for ph in np.linspace(0, 3, 10)]
        d30 = [np.sin(2 * np.pi * 30 * t / T + ph) for ph in np.linspace(0, 3, 10)]
        assert harmonization_gap({"a": d2, "b": d30}).matrix[0, 1] > 0.5

    def test_errors(self, corpora):
        with pytest.raises(ValidationError):
            harmonization_gap({"a": corpora["band2"]})
        with pytest.raises(ValidationError):
            harmonization_gap(corpora, HouseholderStack.identity(64))

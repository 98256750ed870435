"""Accumulators, paired z-statistics, and the counter-based stream policy."""

import math

import numpy as np
import pytest

from flowibp.errors import InsufficientData, NonFiniteSample
from flowibp.rng import RngPolicy
from flowibp.stats import McAccumulator, paired_z


class TestAccumulator:
    def test_constant_samples(self):
        acc = McAccumulator.from_samples(np.array([1.0, 1.0, 1.0]))
        assert acc.count == 3
        assert acc.mean == 1.0
        assert acc.variance == 0.0

    def test_two_samples(self):
        acc = McAccumulator.from_samples(np.array([0.0, 2.0]))
        assert acc.mean == 1.0
        assert acc.variance == 2.0
        assert acc.std_error == 1.0

    def test_streaming_matches_batch(self):
        rng = np.random.default_rng(0)
        xs = rng.standard_normal(1000)
        acc = McAccumulator()
        for x in xs:
            acc.add(float(x))
        batch = McAccumulator.from_samples(xs)
        assert abs(acc.mean - batch.mean) < 1e-12
        assert abs(acc.variance - batch.variance) < 1e-10

    def test_merge_equals_concatenation(self):
        a = McAccumulator.from_samples(np.array([0.0]))
        b = McAccumulator.from_samples(np.array([2.0]))
        merged = a.merged(b)
        direct = McAccumulator.from_samples(np.array([0.0, 2.0]))
        assert merged.count == direct.count
        assert abs(merged.mean - direct.mean) < 1e-15
        assert abs(merged.variance - direct.variance) < 1e-15

    def test_merge_associative_commutative(self):
        rng = np.random.default_rng(1)
        xs = [rng.standard_normal(n) + 3.0 for n in (17, 5, 41)]
        accs = [McAccumulator.from_samples(x) for x in xs]
        left = accs[0].merged(accs[1]).merged(accs[2])
        right = accs[0].merged(accs[1].merged(accs[2]))
        swapped = accs[2].merged(accs[0]).merged(accs[1])
        ref = McAccumulator.from_samples(np.concatenate(xs))
        for other in (right, swapped, ref):
            assert abs(left.mean - other.mean) <= 1e-12 * abs(ref.mean)
            assert abs(left.variance - other.variance) <= 1e-12 * ref.variance

    def test_merge_with_empty(self):
        a = McAccumulator.from_samples(np.array([1.0, 3.0]))
        assert a.merged(McAccumulator()).mean == a.mean
        assert McAccumulator().merged(a).count == 2

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteSample):
            McAccumulator().add(float("nan"))
        with pytest.raises(NonFiniteSample):
            McAccumulator.from_samples(np.array([1.0, np.inf]))


class TestPairedZ:
    def test_all_zero_diffs(self):
        assert paired_z(McAccumulator.from_samples(np.zeros(10))) == 0.0

    def test_symmetric_diffs(self):
        assert paired_z(McAccumulator.from_samples(np.array([1.0, -1.0]))) == 0.0

    def test_systematic_mismatch_flags_infinity(self):
        z = paired_z(McAccumulator.from_samples(np.ones(4)))
        assert math.isinf(z)

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            paired_z(McAccumulator.from_samples(np.array([1.0])))


class TestRngPolicy:
    def test_reproducible(self):
        a = RngPolicy(123).generator("brownian", 5).standard_normal(8)
        b = RngPolicy(123).generator("brownian", 5).standard_normal(8)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        pol = RngPolicy(123)
        a = pol.generator("brownian", 5).standard_normal(8)
        b = pol.generator("brownian", 6).standard_normal(8)
        c = pol.generator("base_points", 5).standard_normal(8)
        d = RngPolicy(124).generator("brownian", 5).standard_normal(8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)
        assert not np.array_equal(a, d)

    def test_fill_matches_fresh_generators(self):
        pol = RngPolicy(99)
        out = np.empty((7, 4, 2))
        pol.fill_normals("brownian", 10, out)
        for i in range(7):
            ref = pol.generator("brownian", 10 + i).standard_normal((4, 2))
            assert np.array_equal(out[i], ref)

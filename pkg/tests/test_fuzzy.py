"""
Tests for fuzzy Boolean tasks and datasets.
"""

import itertools

import numpy as np
import pytest

from neuralinterp.fuzzy import (
    FuzzyError,
    FuzzyExpr,
    eval_fuzzy,
    fuzzy_and,
    fuzzy_not,
    fuzzy_or,
    gen_dataset,
    r2_per_task,
    r2_score,
    sample_expressions,
    sample_truth_table,
)

XOR = FuzzyExpr(2, (0, 1, 1, 0))


class TestOperators:
    """Tests for the product fuzzy operators."""

    def test_boolean_reduction(self):
        """Test that on {0, 1} the operators are the Boolean ones."""
        for a, b in itertools.product([0.0, 1.0], repeat=2):
            assert fuzzy_and(a, b) == float(bool(a) and bool(b))
            assert fuzzy_or(a, b) == float(bool(a) or bool(b))
        assert fuzzy_not(0.0) == 1.0
        assert fuzzy_not(1.0) == 0.0

    def test_de_morgan(self):
        """Test not(a or b) = not(a) and not(b) on 10^4 random pairs."""
        a, b = np.random.default_rng(3).random((2, 10_000))
        np.testing.assert_allclose(
            fuzzy_not(fuzzy_or(a, b)), fuzzy_and(fuzzy_not(a), fuzzy_not(b)), atol=1e-15
        )

    def test_half_values(self):
        """Test and(0.5, 0.5) = 0.25 and or(0.5, 0.5) = 0.75."""
        assert fuzzy_and(0.5, 0.5) == pytest.approx(0.25)
        assert fuzzy_or(0.5, 0.5) == pytest.approx(0.75)

    def test_out_of_range(self):
        """Test that values outside [0, 1] are refused."""
        with pytest.raises(FuzzyError):
            fuzzy_and(1.5, 0.5)
        with pytest.raises(FuzzyError):
            fuzzy_not(-0.1)
        with pytest.raises(FuzzyError):
            fuzzy_or(np.nan, 0.5)


class TestFuzzyExpr:
    """Tests for truth-table expressions."""

    def test_xor_at_half(self):
        """Test the fuzzy XOR at (0.5, 0.5)."""
        assert eval_fuzzy(XOR, np.array([0.5, 0.5])) == pytest.approx(0.4375)

    def test_corners_match_truth_table(self):
        """Test every corner of every table for N <= 3, and of 100 random tables per N <= 4."""
        rng = np.random.default_rng(0)
        for n_vars in (1, 2, 3, 4):
            tables = [sample_truth_table(n_vars, rng).truth_table for _ in range(100)]
            if n_vars <= 3:
                tables += list(itertools.product([0, 1], repeat=2 ** n_vars))
            corners = np.array(list(itertools.product([0.0, 1.0], repeat=n_vars)))
            for table in tables:
                expr = FuzzyExpr(n_vars, tuple(table))
                np.testing.assert_array_equal(eval_fuzzy(expr, corners), np.array(table))

    def test_constant_tables(self):
        """Test the all-zero and all-one tables at the corners and inside the cube."""
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=3)))
        zero = FuzzyExpr(3, (0,) * 8)
        one = FuzzyExpr(3, (1,) * 8)
        np.testing.assert_array_equal(eval_fuzzy(one, corners), np.ones(8))
        np.testing.assert_array_equal(eval_fuzzy(zero, corners), np.zeros(8))

        x = np.random.default_rng(1).random((20, 3))
        np.testing.assert_array_equal(eval_fuzzy(zero, x), np.zeros(20))
        interior = eval_fuzzy(one, x)
        assert np.all((interior >= 0.0) & (interior <= 1.0))
        assert np.all(interior < 1.0)

    def test_values_in_unit_interval(self):
        """Test the range on random inputs."""
        rng = np.random.default_rng(2)
        expr = sample_truth_table(5, rng)
        values = eval_fuzzy(expr, rng.random((500, 5)))
        assert np.all((values >= 0.0) & (values <= 1.0))

    def test_wrong_input_width(self):
        """Test that the last axis must hold N variables."""
        with pytest.raises(FuzzyError):
            eval_fuzzy(XOR, np.array([0.5, 0.5, 0.5]))

    def test_invalid_tables(self):
        """Test table length and entry validation."""
        with pytest.raises(FuzzyError):
            FuzzyExpr(2, (0, 1, 1))
        with pytest.raises(FuzzyError):
            FuzzyExpr(1, (0, 2))
        with pytest.raises(FuzzyError):
            FuzzyExpr(0, (1,))

    def test_hex(self):
        """Test hex encoding, decoding and errors."""
        assert XOR.to_hex() == "6"
        assert FuzzyExpr.from_hex("6", 2) == XOR
        assert FuzzyExpr(3, (1, 0, 0, 0, 0, 0, 0, 1)).to_hex() == "81"
        with pytest.raises(FuzzyError):
            FuzzyExpr.from_hex("zz", 2)
        with pytest.raises(FuzzyError):
            FuzzyExpr.from_hex("1f", 2)

    def test_describe(self):
        """Test the sum-of-products text."""
        assert XOR.describe() == "(~x0 & x1) | (x0 & ~x1)"
        assert FuzzyExpr(1, (0, 0)).describe() == "0"


class TestSampling:
    """Tests for random task sampling."""

    def test_determinism(self):
        """Test that equal seeds give equal expressions."""
        a = sample_expressions(5, 4, np.random.default_rng(9))
        b = sample_expressions(5, 4, np.random.default_rng(9))
        assert a == b

    def test_fair_entries(self):
        """Test that about half the entries are ones over 1000 tables."""
        rng = np.random.default_rng(0)
        fractions = [np.mean(sample_truth_table(5, rng).truth_table) for _ in range(1000)]
        assert abs(np.mean(fractions) - 0.5) < 0.05


class TestDataset:
    """Tests for dataset generation."""

    @pytest.fixture
    def exprs(self):
        return sample_expressions(3, 4, np.random.default_rng(0))

    def test_determinism(self, exprs):
        """Test bit-identical datasets for equal seeds."""
        a = gen_dataset(exprs, 200, seed=4)
        b = gen_dataset(exprs, 200, seed=4)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.targets, b.targets)
        np.testing.assert_array_equal(a.val_idx, b.val_idx)

    def test_shapes_and_range(self, exprs):
        """Test shapes and values in [0, 1]."""
        data = gen_dataset(exprs, 200, seed=0)
        assert data.inputs.shape == (200, 4)
        assert data.targets.shape == (200, 3)
        assert data.num_tasks == 3
        assert np.all((data.targets >= 0.0) & (data.targets <= 1.0))

    def test_split(self, exprs):
        """Test an 80/20 split that is disjoint and exhaustive."""
        data = gen_dataset(exprs, 200, seed=0)
        assert len(data.train_idx) == 160
        assert len(data.val_idx) == 40
        assert not set(data.train_idx) & set(data.val_idx)
        assert sorted(set(data.train_idx) | set(data.val_idx)) == list(range(200))
        x_val, y_val = data.split("val")
        assert x_val.shape == (40, 4) and y_val.shape == (40, 3)
        with pytest.raises(FuzzyError):
            data.split("test")

    def test_validation(self, exprs):
        """Test sample count, empty task list and mixed N."""
        with pytest.raises(FuzzyError):
            gen_dataset(exprs, 9, seed=0)
        with pytest.raises(FuzzyError):
            gen_dataset([], 100, seed=0)
        with pytest.raises(FuzzyError):
            gen_dataset([XOR, FuzzyExpr(1, (0, 1))], 100, seed=0)

    def test_csv(self, exprs, tmp_path):
        """Test the CSV header and row count."""
        path = gen_dataset(exprs, 20, seed=0).to_csv(tmp_path / "data" / "tasks.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "x0,x1,x2,x3,f0,f1,f2"
        assert len(lines) == 21


class TestR2:
    """Tests for the coefficient of determination."""

    def test_perfect_and_mean(self):
        """Test R^2 = 1 for exact predictions and 0 for the target mean."""
        target = np.array([0.1, 0.4, 0.2, 0.9])
        assert r2_score(target, target) == pytest.approx(1.0)
        assert r2_score(np.full(4, target.mean()), target) == pytest.approx(0.0)

    def test_worse_than_mean(self):
        """Test that R^2 can be negative."""
        assert r2_score(np.array([1.0, 0.0]), np.array([0.0, 1.0])) < 0.0

    def test_edge_cases(self):
        """Test constant targets, single samples and length mismatch."""
        with pytest.raises(FuzzyError):
            r2_score(np.array([0.1, 0.2]), np.array([0.5, 0.5]))
        with pytest.raises(FuzzyError):
            r2_score(np.array([0.1]), np.array([0.5]))
        with pytest.raises(FuzzyError):
            r2_score(np.array([0.1, 0.2, 0.3]), np.array([0.5, 0.6]))

    def test_per_task(self):
        """Test one score per column."""
        target = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.2]])
        scores = r2_per_task(target.copy(), target)
        assert scores == pytest.approx([1.0, 1.0])
        with pytest.raises(FuzzyError):
            r2_per_task(target[:, :1], target)

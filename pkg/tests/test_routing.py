"""
Tests for type inference and compatibility routing.
"""

import math

import numpy as np
import pytest

from neuralinterp.autodiff import Tape, Tensor, reduce
from neuralinterp.params import ModelError, ParamStore
from neuralinterp.routing import (
    RoutingRecorder,
    TypeInference,
    closest_function,
    compatibility,
    type_distance,
)


def _types(*vectors: list[float]) -> Tensor:
    """One batch row holding the given type vectors."""
    return Tensor(np.array([vectors], dtype=np.float64))


class TestTypeInference:
    """Tests for the type-inference MLP."""

    @pytest.fixture
    def inference(self):
        params = ParamStore()
        return TypeInference(params, "t", 6, 4, np.random.default_rng(0)), params

    def test_unit_norm(self, inference):
        """Test that every type lies on the unit sphere."""
        module, _ = inference
        x = Tensor(np.random.default_rng(1).standard_normal((3, 5, 6)))
        types = module(x).data
        assert types.shape == (3, 5, 4)
        np.testing.assert_allclose(np.linalg.norm(types, axis=-1), 1.0, atol=1e-10)

    def test_identical_elements(self, inference):
        """Test that equal elements get equal types."""
        module, _ = inference
        row = np.random.default_rng(2).standard_normal(6)
        types = module(Tensor(np.stack([row, row])[None])).data
        np.testing.assert_array_equal(types[0, 0], types[0, 1])

    def test_gradient_reaches_weights(self, inference):
        """Test that the MLP weights receive a nonzero gradient."""
        module, params = inference
        x = Tensor(np.random.default_rng(3).standard_normal((2, 3, 6)))
        weights = np.random.default_rng(4).standard_normal((2, 3, 4))
        with Tape() as tape:
            loss = reduce(module(x) * weights, "sum")
        grads = tape.backward(loss, dict(params.items()))
        assert np.abs(grads["t.hidden.weight"]).sum() > 0.0
        assert np.abs(grads["t.output.weight"]).sum() > 0.0


class TestTypeDistance:
    """Tests for the kernel distance."""

    def test_reference_values(self):
        """Test distances 0, 1 and 2 for equal, orthogonal and opposite vectors."""
        types = _types([1.0, 0.0])
        signatures = Tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
        d = type_distance(types, signatures).data
        assert d.shape == (1, 3, 1)
        np.testing.assert_allclose(d[0, :, 0], [0.0, 1.0, 2.0])

    def test_dimension_mismatch(self):
        """Test that type and signature widths must match."""
        with pytest.raises(ModelError):
            type_distance(_types([1.0, 0.0]), Tensor([[1.0, 0.0, 0.0]]))


class TestCompatibility:
    """Tests for truncated-kernel compatibilities."""

    def test_hand_computed(self):
        """Test two functions at distances 0 and 1 with sigma = 1."""
        c = compatibility(
            _types([1.0, 0.0]),
            Tensor([[1.0, 0.0], [0.0, 1.0]]),
            Tensor(0.0),
            tau=1.6,
        ).data
        np.testing.assert_allclose(c[0, :, 0], [0.731059, 0.268941], atol=1e-5)

    def test_sigma_sharpens(self):
        """Test that a smaller sigma moves mass to the nearest function."""
        types = _types([1.0, 0.0])
        signatures = Tensor([[1.0, 0.0], [0.0, 1.0]])
        wide = compatibility(types, signatures, Tensor(0.0), tau=1.6).data
        sharp = compatibility(types, signatures, Tensor(math.log(0.25)), tau=1.6).data
        assert sharp[0, 0, 0] > wide[0, 0, 0]

    def test_truncation(self):
        """Test that functions beyond tau get exactly zero."""
        c = compatibility(
            _types([1.0, 0.0], [0.0, 1.0]),
            Tensor([[1.0, 0.0], [-1.0, 0.0]]),
            Tensor(0.0),
            tau=1.6,
        ).data
        assert c[0, 1, 0] == 0.0
        assert c[0, 0, 0] == pytest.approx(1.0, abs=1e-7)
        # orthogonal element: d = 1 to both
        np.testing.assert_allclose(c[0, :, 1], [0.5, 0.5], atol=1e-7)

    def test_unreached_element(self):
        """Test that an element beyond every signature gets an all-zero column."""
        c = compatibility(
            _types([1.0, 0.0]),
            Tensor([[-1.0, 0.0], [-0.9, 0.1 * math.sqrt(19.0)]]),
            Tensor(0.0),
            tau=1.6,
        ).data
        np.testing.assert_array_equal(c[0, :, 0], [0.0, 0.0])

    def test_keep_mask_renormalizes(self):
        """Test that dropped functions get zero and the rest renormalize."""
        types = _types([1.0, 0.0], [0.6, 0.8])
        signatures = Tensor([[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]])
        c = compatibility(types, signatures, Tensor(0.0), 1.6, np.array([True, False, True])).data
        assert np.all(c[0, 1] == 0.0)
        np.testing.assert_allclose(c[0].sum(axis=0), 1.0, atol=1e-7)

    def test_range_and_column_sums(self):
        """Test C in [0, 1] and column sums at most 1 on random types."""
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((4, 6, 5))
        types = Tensor(raw / np.linalg.norm(raw, axis=-1, keepdims=True))
        sig = rng.standard_normal((3, 5))
        signatures = Tensor(sig / np.linalg.norm(sig, axis=-1, keepdims=True))
        c = compatibility(types, signatures, Tensor(0.3), tau=1.4).data
        assert c.shape == (4, 3, 6)
        assert np.all((c >= 0.0) & (c <= 1.0))
        assert np.all(c.sum(axis=1) <= 1.0 + 1e-9)

    def test_keep_mask_shape(self):
        """Test that a keep mask of the wrong length is refused."""
        with pytest.raises(ModelError):
            compatibility(
                _types([1.0, 0.0]),
                Tensor([[1.0, 0.0], [0.0, 1.0]]),
                Tensor(0.0),
                1.6,
                np.array([True]),
            )


class TestRoutingRecorder:
    """Tests for routing capture."""

    def test_closest_function(self):
        """Test the nearest-signature index."""
        types = np.array([[[1.0, 0.0], [0.0, -1.0]]])
        signatures = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, -1.0]])
        np.testing.assert_array_equal(closest_function(types, signatures), [[1, 2]])

    def test_captures_are_copies(self):
        """Test that captures do not alias the live tensors."""
        recorder = RoutingRecorder()
        compat = Tensor(np.full((1, 2, 3), 0.5))
        types = _types([1.0, 0.0], [0.0, 1.0], [1.0, 0.0])
        recorder.record(0, 1, compat, types, Tensor([[1.0, 0.0], [0.0, 1.0]]))
        compat.data[0, 0, 0] = 9.0
        capture = recorder.captures[0]
        assert capture.script == 0 and capture.iteration == 1
        assert capture.compatibility[0, 0, 0] == 0.5
        np.testing.assert_array_equal(capture.closest, [[0, 1, 0]])
        recorder.clear()
        assert recorder.captures == []

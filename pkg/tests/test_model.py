"""
Tests for the interpreter model.
"""

import numpy as np
import pytest

from neuralinterp.autodiff import Tensor
from neuralinterp.model import (
    SetBatch,
    add_functions,
    create_model,
    drop_functions,
    fn_iter,
    interpreter_forward,
    model_forward,
    script_forward,
)
from neuralinterp.models import ElementRole, PositionalMode, StreamAggregation
from neuralinterp.params import ModelError
from neuralinterp.routing import RoutingRecorder
from tests.conftest import tiny_model_config


def _isolate_new_functions(model, direction: np.ndarray) -> np.ndarray:
    """
    Give every element the same type `direction` in every script and return
    the signature no element can reach (distance 2 > tau).
    """
    for script in model.scripts:
        prefix = f"{script.prefix}.type_mlp.output"
        model.params[f"{prefix}.weight"].data = np.zeros_like(model.params[f"{prefix}.weight"].data)
        model.params[f"{prefix}.bias"].data = direction.copy()
    return -direction


class TestConstruction:
    """Tests for building a model."""

    def test_parameter_names(self, tiny_config):
        """Test the parameter naming scheme."""
        model = create_model(tiny_config, seed=0)
        names = set(model.params)
        for expected in (
            "embed.weight",
            "embed.bias",
            "pos_embed",
            "cls_tokens",
            "head.weight",
            "head.bias",
            "scripts.0.sigma_log",
            "scripts.0.functions.1.signature",
            "scripts.0.functions.1.code",
            "scripts.0.type_mlp.hidden.weight",
            "scripts.0.locs.0.attn.query.0.weight",
        ):
            assert expected in names
        assert model.n_functions == 2

    def test_seed_determinism(self, tiny_config):
        """Test that equal seeds give identical parameters."""
        a = create_model(tiny_config, seed=3).params.state_dict()
        b = create_model(tiny_config, seed=3).params.state_dict()
        c = create_model(tiny_config, seed=4).params.state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert not all(np.array_equal(a[k], c[k]) for k in a)

    def test_signatures_are_unit(self, tiny_config):
        """Test that initial signatures lie on the unit sphere."""
        model = create_model(tiny_config, seed=0)
        norms = np.linalg.norm(model.scripts[0].signatures().data, axis=-1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_invalid_config(self):
        """Test that inconsistent architectures are refused."""
        with pytest.raises(ModelError):
            create_model(tiny_model_config(tau=2.0))
        with pytest.raises(ModelError):
            create_model(tiny_model_config(n_cls=0))
        with pytest.raises(ModelError):
            create_model(
                tiny_model_config(
                    positional_mode=PositionalMode.RELATIVE_GRID, grid_shape=[3, 3]
                )
            )

    def test_parameter_count_independent_of_functions(self):
        """Test that the interpreter does not grow with the number of functions."""
        small = create_model(tiny_model_config(n_functions=2), seed=0)
        large = create_model(tiny_model_config(n_functions=6), seed=0)
        assert small.interpreter_parameter_count() == large.interpreter_parameter_count()
        assert large.params.count() - small.params.count() == 4 * (4 + 8)

    def test_parameter_count_independent_of_iterations(self):
        """Test weight sharing across function iterations."""
        one = create_model(tiny_model_config(n_iterations=1), seed=0)
        many = create_model(tiny_model_config(n_iterations=8), seed=0)
        assert one.params.count() == many.params.count()

    def test_config_is_copied(self, tiny_config):
        """Test that the model keeps its own copy of the config."""
        model = create_model(tiny_config)
        tiny_config.n_cls = 7
        assert model.config.n_cls == 2


class TestEmbedding:
    """Tests for input embedding."""

    def test_set_layout(self, tiny_config):
        """Test set size and roles: inputs first, then CLS tokens."""
        model = create_model(tiny_config)
        batch = model.embed_inputs(np.random.default_rng(0).random((3, 2)))
        assert batch.elements.shape == (3, 4, 8)
        assert batch.set_size == 4
        assert batch.positions(ElementRole.CLS) == [2, 3]
        assert batch.roles[:2] == (ElementRole.INPUT, ElementRole.INPUT)

    def test_learned_positions_distinguish_slots(self, tiny_config):
        """Test that the same scalar embeds differently at two positions."""
        model = create_model(tiny_config)
        elements = model.embed_inputs(np.full((1, 2), 0.5)).elements.data
        assert not np.array_equal(elements[0, 0], elements[0, 1])

    def test_no_positions(self):
        """Test that without positional terms equal scalars embed identically."""
        model = create_model(tiny_model_config(positional_mode=PositionalMode.NONE))
        assert "pos_embed" not in model.params
        elements = model.embed_inputs(np.full((1, 2), 0.5)).elements.data
        np.testing.assert_array_equal(elements[0, 0], elements[0, 1])

    def test_wrong_input_width(self, tiny_config):
        """Test that the number of scalar inputs is checked."""
        model = create_model(tiny_config)
        with pytest.raises(ModelError):
            model.embed_inputs(np.ones((2, 3)))

    def test_set_batch_roles_must_match(self):
        """Test SetBatch validation."""
        with pytest.raises(ModelError):
            SetBatch(Tensor(np.ones((1, 3, 4))), (ElementRole.INPUT,))


class TestInterpreterForward:
    """Tests for the compatibility-weighted stream sum."""

    @pytest.fixture
    def script(self, tiny_config):
        return create_model(tiny_config, seed=0).scripts[0]

    @pytest.mark.parametrize("aggregation", list(StreamAggregation))
    def test_unrouted_elements_are_unchanged(self, script, aggregation):
        """Test that elements with zero compatibility everywhere pass through bit-exactly."""
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 4, 8))
        compat = rng.uniform(0.2, 0.5, (2, 2, 4))
        compat[:, :, 1] = 0.0
        y = interpreter_forward(
            Tensor(x), script.codes(), Tensor(compat), script.locs, aggregation
        ).data
        np.testing.assert_array_equal(y[:, 1], x[:, 1])
        assert not np.array_equal(y[:, 0], x[:, 0])

    @pytest.fixture
    def single(self):
        """One function, constant C = 0.4, and the stream output computed by hand."""
        script = create_model(tiny_model_config(n_functions=1), seed=0).scripts[0]
        x = np.random.default_rng(1).standard_normal((2, 4, 8))
        compat = np.full((2, 1, 4), 0.4)
        stream = Tensor(x.reshape(2, 1, 4, 8))
        for loc in script.locs:
            stream = loc(stream, script.codes(), Tensor(compat))
        return script, x, compat, stream.data[:, 0]

    def test_single_function_updates(self, single):
        """Test y = x + c * (stream(x) - x) for one function and constant C."""
        script, x, compat, stream = single
        y = interpreter_forward(Tensor(x), script.codes(), Tensor(compat), script.locs).data
        np.testing.assert_allclose(y, x + 0.4 * (stream - x), rtol=1e-12, atol=1e-12)

    def test_single_function_streams(self, single):
        """Test y = x + c * stream(x) for one function and constant C."""
        script, x, compat, stream = single
        y = interpreter_forward(
            Tensor(x), script.codes(), Tensor(compat), script.locs, StreamAggregation.STREAMS
        ).data
        np.testing.assert_allclose(y, x + 0.4 * stream, rtol=1e-12, atol=1e-12)

    def test_streams_mode_grows_inputs(self):
        """Test that stream aggregation inflates the element norm far more than updates."""
        x = np.random.default_rng(4).random((4, 2))
        norms = {}
        for aggregation in StreamAggregation:
            config = tiny_model_config(n_iterations=4, aggregation=aggregation)
            model = create_model(config, seed=0)
            out = model.forward(model.embed_inputs(x)).elements.data
            norms[aggregation] = np.linalg.norm(out)
        assert norms[StreamAggregation.STREAMS] > 2.0 * norms[StreamAggregation.UPDATES]

    def test_script_uses_configured_aggregation(self):
        """Test that a script passes its aggregation mode to the interpreter."""
        x = np.random.default_rng(5).random((3, 2))
        config = tiny_model_config(aggregation=StreamAggregation.STREAMS)
        model = create_model(config, seed=0)
        script = model.scripts[0]
        batch = model.embed_inputs(x)
        _, compat = script.route(batch.elements)
        expected = interpreter_forward(
            batch.elements, script.codes(), compat, script.locs, StreamAggregation.STREAMS
        ).data
        np.testing.assert_array_equal(fn_iter(batch, script).elements.data, expected)

    def test_compatibility_shape_checked(self, script):
        """Test that C must be [B, F, S]."""
        with pytest.raises(ModelError):
            interpreter_forward(
                Tensor(np.ones((1, 4, 8))), script.codes(), Tensor(np.ones((1, 3, 4))), script.locs
            )


class TestIterations:
    """Tests for function iterations and scripts."""

    @pytest.fixture
    def model(self, tiny_config):
        return create_model(tiny_config, seed=0)

    @pytest.fixture
    def batch(self, model):
        return model.embed_inputs(np.random.default_rng(0).random((3, 2)))

    def test_cardinality_preserved(self, model, batch):
        """Test that every stage keeps the set size and roles."""
        out = fn_iter(batch, model.scripts[0])
        assert out.elements.shape == batch.elements.shape
        assert out.roles == batch.roles
        assert model_forward(batch, model).elements.shape == batch.elements.shape

    def test_one_iteration_is_fn_iter(self, model, batch):
        """Test that a script with n_i = 1 is a single function iteration."""
        once = script_forward(batch, model.scripts[0], 1).elements.data
        np.testing.assert_array_equal(once, fn_iter(batch, model.scripts[0]).elements.data)

    def test_iterations_differ(self, model, batch):
        """Test that two iterations differ from one."""
        one = script_forward(batch, model.scripts[0], 1).elements.data
        two = script_forward(batch, model.scripts[0], 2).elements.data
        assert not np.allclose(one, two)

    def test_routing_recomputed_each_iteration(self, model, batch):
        """Test that compatibilities follow the updated elements."""
        recorder = RoutingRecorder()
        model.forward(batch, recorder=recorder)
        assert [(c.script, c.iteration) for c in recorder.captures] == [(0, 0), (0, 1)]
        first, second = recorder.captures
        assert not np.array_equal(first.compatibility, second.compatibility)

    def test_zero_iterations_refused(self, model, batch):
        """Test that n_i must be at least one."""
        with pytest.raises(ModelError):
            model.forward(batch, n_iterations=0)

    def test_any_iteration_count_is_finite(self, model):
        """Test evaluation at n_i from 1 to 16."""
        x = np.random.default_rng(1).random((4, 2))
        for n_iterations in range(1, 17):
            preds = model.predict(x, n_iterations=n_iterations).data
            assert preds.shape == (4, 2)
            assert np.isfinite(preds).all()


class TestSymmetry:
    """Tests for permutation equivariance without positional terms."""

    def test_permuting_inputs(self):
        """Test that permuting input elements permutes outputs and fixes CLS outputs."""
        config = tiny_model_config(n_inputs=5, n_scripts=2, positional_mode=PositionalMode.NONE)
        model = create_model(config, seed=2)
        x = np.random.default_rng(3).random((3, 5))
        perm = np.array([3, 0, 4, 1, 2])
        out = model.forward(model.embed_inputs(x)).elements.data
        out_perm = model.forward(model.embed_inputs(x[:, perm])).elements.data
        np.testing.assert_allclose(out_perm[:, :5], out[:, perm], atol=1e-10)
        np.testing.assert_allclose(out_perm[:, 5:], out[:, 5:], atol=1e-10)


class TestPredict:
    """Tests for task predictions."""

    def test_shape(self, tiny_config):
        """Test one prediction per CLS token."""
        model = create_model(tiny_config)
        assert model.predict(np.random.default_rng(0).random((5, 2))).shape == (5, 2)

    def test_reset_cls_tokens(self, tiny_config):
        """Test that new CLS tokens change the number of predictions."""
        model = create_model(tiny_config)
        model.reset_cls_tokens(4, np.random.default_rng(1))
        assert model.config.n_cls == 4
        assert model.params["cls_tokens"].shape == (4, 8)
        assert model.predict(np.random.default_rng(0).random((3, 2))).shape == (3, 4)
        with pytest.raises(ModelError):
            model.reset_cls_tokens(0, np.random.default_rng(1))

    def test_clone_is_independent(self, tiny_config):
        """Test that a clone shares no parameter storage."""
        model = create_model(tiny_config)
        twin = model.clone()
        twin.params["head.bias"].data = twin.params["head.bias"].data + 1.0
        assert not np.array_equal(model.params["head.bias"].data, twin.params["head.bias"].data)
        assert twin.function_of("scripts.0.functions.0.code") is twin.scripts[0].functions[0]


class TestAddFunctions:
    """Tests for extending a trained model with new functions."""

    def test_interpreter_untouched(self, tiny_config):
        """Test that existing parameters are bit-identical and n_f grows by k."""
        model = create_model(tiny_config, seed=0)
        before = model.params.state_dict()
        group = add_functions(model, 3, np.random.default_rng(5))
        after = model.params.state_dict()
        assert all(np.array_equal(before[name], after[name]) for name in before)
        assert model.n_functions == 5
        assert model.config.n_functions == 5
        assert len(group.names) == 6
        assert group.signature_names == [
            f"scripts.0.functions.{u}.signature" for u in (2, 3, 4)
        ]
        new = model.scripts[0].functions[-1]
        assert new.signature_trainable and new.code_trainable

    def test_unreachable_function_changes_nothing(self, tiny_config):
        """Test that a function no element can reach leaves outputs bit-identical."""
        model = create_model(tiny_config, seed=0)
        unreachable = _isolate_new_functions(model, np.array([1.0, 0.0, 0.0, 0.0]))
        x = np.random.default_rng(6).random((4, 2))
        baseline = model.predict(x).data

        add_functions(
            model,
            1,
            np.random.default_rng(7),
            signatures=unreachable[None],
            codes=np.random.default_rng(8).standard_normal((1, 8)),
        )
        np.testing.assert_array_equal(model.predict(x).data, baseline)

    def test_validation(self, tiny_config):
        """Test k and explicit signature shapes."""
        model = create_model(tiny_config)
        with pytest.raises(ModelError):
            add_functions(model, 0, np.random.default_rng(0))
        with pytest.raises(ModelError):
            add_functions(model, 2, np.random.default_rng(0), signatures=np.ones((1, 4)))


class TestDropFunctions:
    """Tests for evaluating with functions disabled."""

    @pytest.fixture
    def model(self):
        return create_model(tiny_model_config(n_functions=3), seed=1)

    def test_full_mask_is_identity(self, model):
        """Test that keeping every function reproduces the outputs exactly."""
        x = np.random.default_rng(0).random((4, 2))
        view = drop_functions(model, [True, True, True])
        np.testing.assert_array_equal(view.predict(x).data, model.predict(x).data)

    def test_single_drops_are_finite(self, model):
        """Test every single-function drop."""
        x = np.random.default_rng(1).random((4, 2))
        for u in range(3):
            mask = [v != u for v in range(3)]
            preds = drop_functions(model, mask).predict(x).data
            assert np.isfinite(preds).all()

    def test_dropped_function_gets_no_weight(self, model):
        """Test that a dropped function's compatibility is zero in every iteration."""
        x = np.random.default_rng(2).random((2, 2))
        recorder = RoutingRecorder()
        drop_functions(model, [True, False, True]).predict(x, recorder=recorder)
        for capture in recorder.captures:
            assert np.all(capture.compatibility[:, 1] == 0.0)

    def test_one_function_left(self, model):
        """Test column sums of at most one with a single kept function."""
        recorder = RoutingRecorder()
        x = np.random.default_rng(3).random((2, 2))
        drop_functions(model, [False, False, True]).predict(x, recorder=recorder)
        for capture in recorder.captures:
            sums = capture.compatibility.sum(axis=1)
            assert np.all(sums <= 1.0 + 1e-9)

    def test_invalid_masks(self, model):
        """Test masks that keep nothing or have the wrong length."""
        with pytest.raises(ModelError):
            drop_functions(model, [False, False, False])
        with pytest.raises(ModelError):
            drop_functions(model, [True, False])

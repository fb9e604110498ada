import numpy as np
import pytest

from s4ecg import nn
from s4ecg.errors import CheckpointError
from s4ecg.tensor import Tensor

pytestmark = pytest.mark.unit


class Block(nn.Module):
    def __init__(self, rng: np.random.Generator) -> None:
        super().__init__()
        self.linear = nn.Linear(3, 2, rng)
        self.norm = nn.BatchNorm1d(2)
        self.scale = nn.Parameter(np.ones(2))

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.linear(x)) * self.scale


class TestModule:
    def test_parameters_are_discovered_in_definition_order(self, rng: np.random.Generator) -> None:
        names = [name for name, _ in Block(rng).named_parameters()]

        assert names == ["linear.weight", "linear.bias", "norm.weight", "norm.bias", "scale"]

    def test_state_dict_contains_buffers(self, rng: np.random.Generator) -> None:
        state = Block(rng).state_dict()

        assert "norm.running_mean" in state
        assert "norm.running_var" in state

    def test_state_dict_round_trip(self, rng: np.random.Generator) -> None:
        source, target = Block(rng), Block(np.random.default_rng(99))
        source(Tensor(rng.normal(size=(4, 3))))

        target.load_state_dict(source.state_dict())

        for name, values in source.state_dict().items():
            np.testing.assert_array_equal(target.state_dict()[name], values)

    def test_strict_loading_reports_missing_names(self, rng: np.random.Generator) -> None:
        state = Block(rng).state_dict()
        del state["scale"]

        with pytest.raises(CheckpointError, match="scale"):
            Block(rng).load_state_dict(state)

    def test_lenient_loading_skips_unknown_names(self, rng: np.random.Generator) -> None:
        block = Block(rng)

        block.load_state_dict({"scale": np.full(2, 3.0), "other": np.zeros(1)}, strict=False)

        np.testing.assert_array_equal(block.scale.values, [3.0, 3.0])

    def test_shape_mismatch(self, rng: np.random.Generator) -> None:
        with pytest.raises(CheckpointError, match="Shape mismatch"):
            Block(rng).load_state_dict({"scale": np.ones(3)}, strict=False)

    def test_freeze_and_unfreeze_respect_fixed_parameters(self, rng: np.random.Generator) -> None:
        block = Block(rng)
        block.fix("scale")

        block.freeze()
        assert not any(p.requires_grad for p in block.parameters())

        block.unfreeze()
        assert block.linear.weight.requires_grad
        assert not block.scale.requires_grad

    def test_train_and_eval_propagate(self, rng: np.random.Generator) -> None:
        block = Block(rng).eval()

        assert not block.norm.training
        assert block.train().norm.training

    def test_count_parameters(self, rng: np.random.Generator) -> None:
        assert nn.count_parameters(Block(rng)) == 6 + 2 + 2 + 2 + 2
        assert nn.count_parameters(None) == 0


class TestLayers:
    def test_linear_acts_on_last_axis(self, rng: np.random.Generator) -> None:
        layer = nn.Linear(3, 5, rng)
        x = rng.normal(size=(2, 4, 3))

        y = layer(Tensor(x)).values

        np.testing.assert_allclose(y, x @ layer.weight.values.T + layer.bias.values)

    def test_linear_without_bias(self, rng: np.random.Generator) -> None:
        layer = nn.Linear(3, 2, rng, bias=False)

        assert [name for name, _ in layer.named_parameters()] == ["weight"]

    def test_pointwise_conv_is_a_linear_map_per_time_step(self, rng: np.random.Generator) -> None:
        conv = nn.Conv1d(3, 2, 1, rng)
        x = rng.normal(size=(2, 3, 6))

        y = conv(Tensor(x)).values

        expected = np.einsum("oc,bcl->bol", conv.weight.values[:, :, 0], x) + conv.bias.values[:, None]
        np.testing.assert_allclose(y, expected)

    def test_batch_norm_switches_statistics(self, rng: np.random.Generator) -> None:
        norm = nn.BatchNorm1d(2)
        x = Tensor(rng.normal(5.0, 1.0, size=(32, 2)))

        training_output = norm(x).values
        eval_output = norm.eval()(x).values

        np.testing.assert_allclose(training_output.mean(axis=0), 0.0, atol=1e-10)
        assert np.all(eval_output.mean(axis=0) > 1.0)

    def test_dropout_uses_the_shared_generator(self) -> None:
        first = nn.Dropout(0.5).set_rng(np.random.default_rng(7))
        second = nn.Dropout(0.5).set_rng(np.random.default_rng(7))
        x = Tensor(np.ones(20))

        np.testing.assert_array_equal(first(x).values, second(x).values)
        np.testing.assert_array_equal(first.eval()(x).values, x.values)

    def test_dropout_probability_validation(self) -> None:
        with pytest.raises(ValueError):
            nn.Dropout(1.5)

    def test_module_list(self, rng: np.random.Generator) -> None:
        layers = nn.ModuleList([nn.Linear(2, 2, rng), nn.Dropout(0.1)])

        assert len(layers) == 2
        assert isinstance(layers[-1], nn.Dropout)
        assert [name for name, _ in layers.named_parameters()] == ["0.weight", "0.bias"]

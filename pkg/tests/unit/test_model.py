import copy

import numpy as np
import pytest

from s4ecg.checkpoint import save_checkpoint
from s4ecg.config import ModelConfig
from s4ecg.errors import CheckpointError, MetadataError, ShapeError
from s4ecg.model import (
    S4Block,
    S4Classifier,
    S4Layer,
    load_model,
    make_bidirectional,
    parameter_breakdown,
    save_model,
)
from s4ecg.nn import count_parameters
from s4ecg.tensor import Tensor, no_grad

pytestmark = pytest.mark.unit


def tiny_config(**overrides) -> ModelConfig:
    values = dict(H=4, N=4, depth=2, n_classes=3, c_in=2, dropout=0.0, directionality="causal")
    values.update(overrides)
    return ModelConfig(**values)


def parameter_gradient_error(model: S4Classifier, signal: np.ndarray, target: np.ndarray, eps: float = 1e-6) -> float:
    def loss() -> Tensor:
        return ((model.forward_signal(Tensor(signal)) - target) ** 2).sum()

    model.zero_grad()
    loss().backward()
    errors = []
    for _, parameter in model.named_parameters():
        if not parameter.requires_grad:
            continue
        numeric = np.zeros_like(parameter.values)
        for position in np.ndindex(parameter.shape):
            original = parameter.values[position]
            with no_grad():
                parameter.values[position] = original + eps
                upper = loss().item()
                parameter.values[position] = original - eps
                lower = loss().item()
            parameter.values[position] = original
            numeric[position] = (upper - lower) / (2 * eps)
        scale = max(np.linalg.norm(parameter.grad) + np.linalg.norm(numeric), 1e-12)
        errors.append(np.linalg.norm(parameter.grad - numeric) / scale)
    return float(max(errors))


class TestGradients:
    @pytest.mark.parametrize("directionality", ["causal", "bidirectional"])
    def test_end_to_end_gradients(self, directionality: str, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(directionality=directionality), seed=5)
        signal = rng.normal(size=(2, 2, 16))
        target = rng.normal(size=(2, 3))

        assert parameter_gradient_error(model, signal, target) < 1e-5

    def test_fixed_state_matrix_gets_no_gradient(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(train_a=False))
        layer = model.backbone.s4_layers()[0]

        model.forward_signal(Tensor(rng.normal(size=(2, 8)))).sum().backward()
        model.freeze().unfreeze()

        assert layer.forward_ssm.A.grad is None
        assert not layer.forward_ssm.A.requires_grad
        assert layer.forward_ssm.C.requires_grad


class TestDirectionality:
    def test_causal_backbone_ignores_the_future(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(), seed=1).eval()
        x = rng.normal(size=(1, 2, 20))
        perturbed = x.copy()
        perturbed[..., 12] += 5.0

        before = model.backbone(Tensor(x)).values
        after = model.backbone(Tensor(perturbed)).values

        np.testing.assert_allclose(before[..., :12], after[..., :12], atol=1e-12)
        assert not np.allclose(before[..., 12:], after[..., 12:])

    def test_bidirectional_backbone_sees_the_future(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(directionality="bidirectional"), seed=1).eval()
        x = rng.normal(size=(1, 2, 20))
        perturbed = x.copy()
        perturbed[..., 12] += 5.0

        before = model.backbone(Tensor(x)).values
        after = model.backbone(Tensor(perturbed)).values

        assert not np.allclose(before[..., :12], after[..., :12])

    def test_reverse_pass_mirrors_a_causal_pass(self, rng: np.random.Generator) -> None:
        layer = S4Layer(3, 4, rng, causal=False)
        mirror = S4Layer(3, 4, rng, causal=True)
        mirror.forward_ssm = copy.deepcopy(layer.backward_ssm)
        mirror.D = copy.deepcopy(layer.D)
        u = rng.normal(size=(2, 3, 15))

        _, y_backward = layer.directional_outputs(Tensor(u))
        y_mirror, _ = mirror.directional_outputs(Tensor(u[..., ::-1].copy()))

        np.testing.assert_allclose(y_backward.values, y_mirror.values[..., ::-1], atol=1e-12)

    @pytest.mark.parametrize("merge, channels", [("concat", 6), ("sum", 3)])
    def test_merge_modes(self, merge: str, channels: int, rng: np.random.Generator) -> None:
        layer = S4Layer(3, 2, rng, causal=False, merge=merge)

        y = layer(Tensor(rng.normal(size=(1, 3, 7))))

        assert y.shape == (1, channels, 7)
        assert layer.output_channels == channels

    def test_bidirectional_copy_starts_with_the_causal_outputs(self, rng: np.random.Generator) -> None:
        block = S4Block(3, 4, rng, causal=True, dropout=0.0)
        x = Tensor(rng.normal(size=(2, 3, 10)))

        converted = make_bidirectional(block)

        assert not converted.layer.causal
        np.testing.assert_allclose(converted(x).values, block(x).values, atol=1e-12)


class TestClassifier:
    def test_single_and_batched_inputs(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config()).eval()
        batch = rng.normal(size=(3, 2, 12))

        batched = model.forward_signal(Tensor(batch)).values
        single = model.forward_signal(Tensor(batch[1])).values

        assert batched.shape == (3, 3)
        np.testing.assert_allclose(single, batched[1], atol=1e-12)

    def test_fce_encoder(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(encoder="fce", encoder_width=5))

        assert model.forward_signal(Tensor(rng.normal(size=(2, 9)))).shape == (3,)

    @pytest.mark.parametrize("shape", [(3, 12), (2, 0), (12,)])
    def test_invalid_signals(self, shape) -> None:
        with pytest.raises(ShapeError):
            S4Classifier(tiny_config()).forward_signal(Tensor(np.ones(shape)))

    def test_pooling_prefix(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config()).eval()
        x = rng.normal(size=(1, 2, 16))

        prefix = model.pooled_features(Tensor(x), upto=8).values
        truncated = model.pooled_features(Tensor(x[..., :8])).values

        np.testing.assert_allclose(prefix, truncated, atol=1e-12)

    def test_rescaling_changes_and_restores_outputs(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config()).eval()
        x = Tensor(rng.normal(size=(2, 16)))
        reference = model.forward_signal(x).values

        assert model.rescale_steps(100.0, 50.0) == pytest.approx(2.0)
        assert not np.allclose(model.forward_signal(x).values, reference)
        model.rescale_steps(1.0, 1.0)
        np.testing.assert_allclose(model.forward_signal(x).values, reference)

    def test_continuous_systems(self) -> None:
        assert len(S4Classifier(tiny_config()).continuous_systems()) == 2 * 4
        assert len(S4Classifier(tiny_config(directionality="bidirectional")).continuous_systems()) == 2 * 2 * 4

    def test_parameter_breakdown_adds_up(self) -> None:
        model = S4Classifier(tiny_config(with_meta=True, n_meta=3, meta_hidden=5))

        breakdown = parameter_breakdown(model)

        assert breakdown["total"] == count_parameters(model)
        assert breakdown["classifier"] == (4 + 5) * 3 + 3


class TestMetadata:
    def test_fused_logits(self, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(with_meta=True, n_meta=3, meta_hidden=5))

        logits = model.forward_with_meta(Tensor(rng.normal(size=(4, 2, 10))), Tensor(rng.normal(size=(4, 3))))

        assert logits.shape == (4, 3)

    def test_signal_only_forward_is_rejected(self) -> None:
        model = S4Classifier(tiny_config(with_meta=True, n_meta=3))

        with pytest.raises(MetadataError):
            model.forward_signal(Tensor(np.ones((2, 10))))

    def test_missing_head(self) -> None:
        with pytest.raises(MetadataError):
            S4Classifier(tiny_config()).forward_with_meta(Tensor(np.ones((2, 10))), Tensor(np.ones(7)))

    @pytest.mark.parametrize("meta", [None, np.ones(4), np.array([1.0, np.nan, 0.0])])
    def test_invalid_metadata(self, meta) -> None:
        model = S4Classifier(tiny_config(with_meta=True, n_meta=3)).eval()

        with pytest.raises(MetadataError):
            model.forward_with_meta(Tensor(np.ones((2, 10))), None if meta is None else Tensor(meta))


class TestPersistence:
    def test_save_and_load(self, tmp_path, rng: np.random.Generator) -> None:
        model = S4Classifier(tiny_config(directionality="bidirectional"), seed=9).eval()
        path = str(tmp_path / "model.ckpt")
        x = Tensor(rng.normal(size=(2, 2, 11)))

        save_model(path, model, {"codes": ["A", "B", "C"]})
        loaded, metadata = load_model(path)

        assert metadata["codes"] == ["A", "B", "C"]
        assert loaded.config == model.config
        np.testing.assert_array_equal(loaded.eval().forward_signal(x).values, model.forward_signal(x).values)

    def test_foreign_checkpoint(self, tmp_path) -> None:
        path = str(tmp_path / "heads.ckpt")
        save_checkpoint(path, {"w": np.ones(2)}, {"cpc_config": {}})

        with pytest.raises(CheckpointError, match="does not describe a classifier"):
            load_model(path)

    def test_architecture_mismatch(self, tmp_path) -> None:
        path = str(tmp_path / "model.ckpt")
        model = S4Classifier(tiny_config())
        state = model.state_dict()
        state["classifier.weight"] = np.ones((3, 7))
        save_checkpoint(path, state, {"model_config": {"H": 4, "N": 4, "depth": 2, "c_in": 2}})

        with pytest.raises(CheckpointError):
            load_model(path)

import numpy as np
import pytest

from fedmsrw.model import (NORM, REST, CheckpointError, ModelConfig, OptimizerConfig, Param,
                           ParamSet, build_model, load_checkpoint, model_objective, partition, save_checkpoint,
                           sgd_step)
from fedmsrw.tensor import NonFiniteError, grad_check


class TestBuildModel:
    def test_deterministic(self):
        _, a = build_model(ModelConfig(), 7)
        _, b = build_model(ModelConfig(), 7)
        assert a.signature() == b.signature()
        for ea, eb in zip(a, b):
            assert ea.value.tobytes() == eb.value.tobytes()

    def test_output_shape_and_range(self, rng):
        net, params = build_model(ModelConfig(), 0)
        out, _ = net(params, rng.standard_normal((2, 1, 32, 32)), True)
        assert out.shape == (2, 1, 32, 32)
        assert np.all((out > 0) & (out < 1))

    def test_norm_entries_per_block(self):
        cfg = ModelConfig()
        _, params = build_model(cfg, 0)
        norm, rest = partition(params)
        assert len(norm) == 5 * len(cfg.blocks)
        for b in range(len(cfg.blocks)):
            assert sum(e.name.startswith(f"block{b}.") for e in norm) == 5
        assert all("conv" in e.name or e.name.startswith("head") for e in rest)
        # conv kernels plus the head bias; blocks feeding batchnorm carry no bias
        assert [e.name for e in rest] == [f"block{b}.conv.weight" for b in range(3)] + [
            "head.weight", "head.bias"]

    def test_no_batchnorm_means_empty_norm_view(self):
        _, params = build_model(ModelConfig(use_batchnorm=False), 0)
        norm, rest = partition(params)
        assert norm == [] and len(rest) == len(params)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ModelConfig(blocks=[])
        with pytest.raises(ValueError):
            ModelConfig(blocks=[0])

    @pytest.mark.parametrize("seed", range(3))
    def test_full_model_grad_check(self, seed):
        g = np.random.default_rng(seed)
        net, params = build_model(ModelConfig(), seed)
        x = g.standard_normal((1, 1, 8, 8))
        y = (g.random((1, 1, 8, 8)) < 0.3).astype(float)
        assert grad_check(*model_objective(net, x, y), params) < 1e-4

    def test_grad_check_restores_running_stats(self, rng):
        net, params = build_model(ModelConfig(blocks=[2]), 0)
        before = params["block0.bn.running_mean"].value.copy()
        grad_check(*model_objective(net, rng.standard_normal((1, 1, 4, 4)), np.ones((1, 1, 4, 4))), params)
        np.testing.assert_array_equal(params["block0.bn.running_mean"].value, before)


def scalar_set(theta, grad):
    p = ParamSet([Param("w", np.array([theta]), REST)])
    p["w"].grad[...] = grad
    return p


class TestSGD:
    def test_zero_lr(self, rng):
        _, params = build_model(ModelConfig(blocks=[2]), 0)
        before = [e.value.copy() for e in params]
        for e in params:
            e.grad[...] = rng.standard_normal(e.value.shape)
        sgd_step(params, OptimizerConfig(learning_rate=0.0))
        for e, b in zip(params, before):
            np.testing.assert_array_equal(e.value, b)

    def test_two_step_momentum(self):
        p = scalar_set(1.0, 1.0)
        opt = OptimizerConfig(learning_rate=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step(p, opt)
        assert p["w"].value[0] == pytest.approx(0.9, abs=1e-15)
        sgd_step(p, opt)
        assert p["w"].value[0] == pytest.approx(0.9 - 0.1 * (0.9 * 1 + 1), abs=1e-15)
        assert p["w"].value[0] == pytest.approx(0.71, abs=1e-15)

    def test_weight_decay_only(self):
        p = scalar_set(1.0, 0.0)
        sgd_step(p, OptimizerConfig(learning_rate=0.0002, momentum=0.0, weight_decay=0.0005))
        assert p["w"].value[0] == pytest.approx(0.9999999, abs=1e-15)

    def test_running_stats_untouched(self):
        _, params = build_model(ModelConfig(blocks=[2]), 0)
        for e in params:
            e.grad[...] = 1.0
        sgd_step(params, OptimizerConfig(learning_rate=1.0))
        np.testing.assert_array_equal(params["block0.bn.running_var"].value, 1.0)
        np.testing.assert_array_equal(params["block0.bn.running_mean"].value, 0.0)

    def test_weight_decay_reaches_affine_norm(self):
        _, params = build_model(ModelConfig(blocks=[2]), 0)
        sgd_step(params, OptimizerConfig(learning_rate=1.0, momentum=0.0, weight_decay=0.5))
        np.testing.assert_allclose(params["block0.bn.gamma"].value, 0.5)

    def test_non_finite_gradient_names_parameter(self):
        p = scalar_set(1.0, np.nan)
        with pytest.raises(NonFiniteError, match="'w'"):
            sgd_step(p, OptimizerConfig())

    def test_bitwise_determinism(self, rng):
        _, a = build_model(ModelConfig(blocks=[3]), 1)
        b = a.copy()
        for ea, eb in zip(a, b):
            ea.grad[...] = eb.grad[...] = rng.standard_normal(ea.value.shape)
        for _ in range(3):
            sgd_step(a, OptimizerConfig(learning_rate=0.1))
            sgd_step(b, OptimizerConfig(learning_rate=0.1))
        assert all(x.value.tobytes() == y.value.tobytes() for x, y in zip(a, b))

    def test_partition_stable_across_steps(self, rng):
        _, params = build_model(ModelConfig(), 0)
        names = [[e.name for e in v] for v in partition(params)]
        for _ in range(3):
            for e in params:
                e.grad[...] = rng.standard_normal(e.value.shape)
            sgd_step(params, OptimizerConfig(learning_rate=0.01))
        assert [[e.name for e in v] for v in partition(params)] == names

    def test_invalid_optimizer(self):
        with pytest.raises(ValueError):
            OptimizerConfig(momentum=1.0)
        with pytest.raises(ValueError):
            OptimizerConfig(learning_rate=-1)


class TestParamSet:
    def test_duplicate_names(self):
        with pytest.raises(ValueError):
            ParamSet([Param("a", np.zeros(1), REST), Param("a", np.zeros(1), NORM)])

    def test_grad_and_buffer_shapes(self):
        _, params = build_model(ModelConfig(), 0)
        for e in params:
            assert e.grad.shape == e.value.shape == e.buf.shape


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        cfg = ModelConfig(blocks=[4, 5])
        net, params = build_model(cfg, 3)
        net(params, rng.standard_normal((2, 1, 8, 8)), True)  # move running stats
        save_checkpoint(tmp_path / "m.fseg", params, cfg)
        loaded, cfg2 = load_checkpoint(tmp_path / "m.fseg")
        assert cfg2 == cfg
        assert loaded.signature() == params.signature()
        for a, b in zip(params, loaded):
            assert a.value.tobytes() == b.value.tobytes()
            assert a.trainable == b.trainable
        assert (tmp_path / "m.fseg").read_bytes()[:5] == b"FSEG1"

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE!" + bytes(10))
        with pytest.raises(CheckpointError, match="offset 0"):
            load_checkpoint(tmp_path / "x")

    def test_truncated(self, tmp_path):
        cfg = ModelConfig(blocks=[2])
        _, params = build_model(cfg, 0)
        save_checkpoint(tmp_path / "m", params, cfg)
        data = (tmp_path / "m").read_bytes()
        (tmp_path / "t").write_bytes(data[:-3])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(tmp_path / "t")

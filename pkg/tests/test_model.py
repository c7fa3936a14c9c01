import dataclasses
import json

import numpy as np
import pytest

from nestseg import ops
from nestseg.losses import LossConfig, compute_loss
from nestseg.model import ModelConfig, N_STAGES, TOGGLES, build, count_params, estimate_flops
from nestseg.nn import Conv2d, Dense, Module
from nestseg.tensor import Tensor, backward, no_grad, trace_ops
from nestseg.train import ABLATION_ROWS, TOGGLE_FIELDS

LINEAR_INIT = ("proj.weight", "query.weight", "key.weight", "value.weight", "res_proj.weight")


def row_config(base, row):
    return base.with_toggles(**dict(zip(TOGGLE_FIELDS, row)))


def fan_in(name, shape):
    if len(shape) == 2:  # dense (in, out)
        return shape[0]
    return int(np.prod(shape[1:]))


class TestForward:
    def test_rgb_output_shape_and_range(self, tiny_config):
        cfg = dataclasses.replace(tiny_config, in_channels=3)
        model = build(cfg, 0)
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, 64, 64)).astype(np.float32))
        with no_grad():
            out = model(x).data
        assert out.shape == (2, 1, 64, 64)
        assert ((out > 0) & (out < 1)).all()

    @pytest.mark.parametrize("row", ABLATION_ROWS, ids=lambda r: "".join("Y" if t else "-" for t in r))
    def test_every_ablation_row_runs(self, tiny_config, row):
        model = build(row_config(tiny_config, row), 0)
        with no_grad():
            out = model(Tensor(np.random.default_rng(0).uniform(size=(2, 1, 64, 64)).astype(np.float32)))
        assert out.shape == (2, 1, 64, 64)
        assert ((out.data > 0) & (out.data < 1)).all()

    def test_size_mismatch_rejected(self, tiny_config):
        with pytest.raises(ValueError, match="does not match config"):
            build(tiny_config, 0)(Tensor(np.zeros((1, 1, 32, 32), np.float32)))

    def test_divisibility_names_divisor(self):
        with pytest.raises(ValueError, match="divisible by 64"):
            ModelConfig(input_size=(96, 96), base_channels=2).validate()

    def test_side_map_mean(self, tiny_config):
        model = build(tiny_config, 0).eval()
        for head in list(model.side)[1:]:
            head.weight.data[...] = 0.0
            head.bias.data[...] = 0.0
        x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 64, 64)).astype(np.float32))
        with no_grad():
            aux = model(x, return_aux=True)
        np.testing.assert_allclose(aux["fused"].data, aux["sides"][0].data / N_STAGES, rtol=1e-6, atol=1e-7)

    def test_same_seed_bit_identical(self, tiny_config):
        a, b = build(tiny_config, 7), build(tiny_config, 7)
        x = Tensor(np.random.default_rng(0).uniform(size=(2, 1, 64, 64)).astype(np.float32))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and pa.data.tobytes() == pb.data.tobytes()
        with no_grad():
            assert a(x).data.tobytes() == b(x).data.tobytes()

    def test_gradient_flow(self, tiny_config):
        model = build(tiny_config, 0)
        r = np.random.default_rng(3)
        x = Tensor(r.uniform(size=(2, 1, 64, 64)).astype(np.float32))
        y = (r.uniform(size=(2, 1, 64, 64)) > 0.5).astype(np.float32)
        backward(compute_loss(LossConfig(), y, model(x)))
        for name, p in model.named_parameters():
            assert p.grad is not None, f"{name} received no gradient"
            assert p.grad.shape == p.shape and np.isfinite(p.grad).all(), name

    def test_parameter_names_unique_and_ordered(self, tiny_config):
        names = [n for n, _ in build(tiny_config, 0).named_parameters()]
        assert len(names) == len(set(names))
        assert names == [n for n, _ in build(tiny_config, 1).named_parameters()]


class TestInit:
    def test_uniform_bounds(self, tiny_config):
        model = build(tiny_config, 0)
        for name, p in model.named_parameters():
            if p.ndim < 2:
                continue
            gain = 3.0 if name.endswith(LINEAR_INIT) or name.startswith("side.") else 6.0
            bound = np.sqrt(gain / fan_in(name, p.shape))
            assert np.abs(p.data).max() <= bound, name
            if p.size >= 64:  # draws actually span the interval
                assert np.abs(p.data).max() > 0.8 * bound, name

    def test_depthwise_bound(self, tiny_config):
        model = build(tiny_config, 0)
        dw = model.enc[0].first.conv1.dw.data
        assert np.abs(dw).max() <= np.sqrt(6 / 9) + 1e-7
        assert np.sqrt(6 / 9) == pytest.approx(0.8165, abs=1e-4)

    def test_biases_and_norms(self, tiny_config):
        model = build(tiny_config, 0)
        for name, p in model.named_parameters():
            if name.endswith(("bias", "beta", "pw_b", "dw_b")):
                assert not p.data.any(), name
            elif name.endswith("gamma"):
                expected = 0.0 if name.endswith("out.bn2.gamma") else 1.0
                assert (p.data == expected).all(), name


class TestCounts:
    def test_count_invariant_under_seed(self, tiny_config):
        assert count_params(build(tiny_config, 0)) == count_params(build(tiny_config, 9))

    @pytest.mark.parametrize("toggle", TOGGLES)
    def test_toggles_only_add_parameters(self, tiny_config, toggle):
        on = count_params(build(tiny_config.with_toggles(**{toggle: True}), 0))
        off = count_params(build(tiny_config.with_toggles(**{toggle: False}), 0))
        assert on >= off
        if toggle == "use_cam":
            assert on > off

    def test_cam_off_removes_cam_parameters(self, tiny_config):
        names = [n for n, _ in build(tiny_config.with_toggles(use_cam=False), 0).named_parameters()]
        assert not any(n.startswith("cam.") for n in names)

    def test_conv_block_count(self):
        from nestseg.blocks import ConvBlock

        blk = ConvBlock(2, 4, np.random.default_rng(0))
        assert count_params(blk) == (2 * 9 + 2 * 4) + (4 * 9 + 4 * 4) + 4 * 4

    def test_table_rows_non_decreasing(self, tiny_config):
        counts = [count_params(build(row_config(tiny_config, r), 0)) for r in ABLATION_ROWS]
        assert counts == sorted(counts)


class TwoLayer(Module):
    def __init__(self):
        super().__init__()
        rng = np.random.default_rng(0)
        self.conv = Conv2d(3, 5, 3, rng)
        self.fc = Dense(5, 2, rng)

    def forward(self, x):
        return self.fc(ops.global_avg_pool(self.conv(x)))


class TestMacs:
    def test_two_layer_hand_sum(self):
        n, h, w = 2, 6, 4
        expected = n * 5 * h * w * 3 * 9 + n * 5 * 2
        assert estimate_flops(TwoLayer(), (n, 3, h, w)) == expected

    def test_pointwise_conv(self):
        conv = Conv2d(4, 7, 1, np.random.default_rng(0))
        assert estimate_flops(conv, (1, 4, 5, 6)) == 5 * 6 * 4 * 7

    def test_quadratic_scaling_without_am(self, tiny_config):
        cfg = tiny_config.with_toggles(use_am=False)
        conv_macs = []
        for size in (64, 128):
            model = build(dataclasses.replace(cfg, input_size=(size, size)), 0).eval()
            with no_grad(), trace_ops() as tr:
                model(Tensor(np.zeros((1, 1, size, size), np.float32)))
            conv_macs.append(tr.macs["conv2d"])
        assert conv_macs[1] == 4 * conv_macs[0]

    def test_attention_terms_counted(self, tiny_config):
        with_am = estimate_flops(build(tiny_config, 0))
        without = estimate_flops(build(tiny_config.with_toggles(use_am=False), 0))
        assert with_am > without


class TestConfig:
    def test_json_round_trip(self, tiny_config):
        again = ModelConfig.from_json(tiny_config.to_json())
        assert again == tiny_config

    def test_unknown_field_rejected(self, tiny_config):
        d = json.loads(tiny_config.to_json())
        d["depth_multiplier"] = 2
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict(d)

    def test_describe_lists_all_stages(self, tiny_config):
        text = build(tiny_config, 0).describe()
        assert text.count("enc") == N_STAGES and text.count("dec") == N_STAGES and "bridge" in text

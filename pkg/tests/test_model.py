import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pstbln.checkpoint import CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint
from pstbln.model import LayerSpec, NetworkSpec, build_model, count_params, count_params_for, param_shapes
from pstbln.tensor import TrainConfig
from pstbln.training import train_epochs
from oracles import tabulated_param_count
from toys import end_to_end_gradcheck

PAPER_WIDTHS = [8, 16, 16, 32, 32, 64, 64]
SEARCHED_WIDTHS = [15, 10, 15, 5, 5, 10]


def small_spec(widths=(3, 4), E=5, C=3, T=4, p=0.2):
    return NetworkSpec.from_widths(list(widths), E, C, T, p=p)


class TestSpecs:
    @pytest.mark.parametrize("kwargs", [{"f": 0}, {"f": 4, "k": 2}, {"f": 4, "p": 1.0}, {"f": 4, "p": -0.1}])
    def test_layer_spec_validation(self, kwargs):
        with pytest.raises(ValueError):
            LayerSpec(**kwargs)

    def test_network_spec_validation(self):
        with pytest.raises(ValueError):
            NetworkSpec.from_widths([4], 5, 1, 4)
        with pytest.raises(ValueError):
            NetworkSpec.from_widths([4], 0, 3, 4)

    def test_json_schema_and_roundtrip(self):
        spec = small_spec()
        d = json.loads(spec.to_json())
        assert set(d) == {"layers", "edge_count", "classes", "frames"}
        assert d["layers"][0] == {"f": 3, "k": 3, "p": 0.2}
        assert NetworkSpec.from_json(spec.to_json()) == spec

    def test_unknown_key_rejected(self):
        d = small_spec().to_dict()
        d["colour"] = "red"
        with pytest.raises(ValueError, match="unknown"):
            NetworkSpec.from_dict(d)


class TestParamCount:
    def test_one_layer_example(self):
        spec = NetworkSpec.from_widths([4], 5, 2, 4)
        # U 25 + W 8 + bias 4 + temporal 48 + bias 4 + BN 16 + res1 12 + res2 20 + fc 10
        assert count_params_for(spec) == 147
        assert tabulated_param_count(2, [4], 3, 5, 2) == 147
        assert count_params(build_model(spec)) == 147

    def test_classifier_only(self):
        spec = NetworkSpec((), 5, 3, 4)
        assert count_params_for(spec) == 3 * 2 + 3

    @pytest.mark.parametrize("widths", [PAPER_WIDTHS, SEARCHED_WIDTHS, [1], [5, 5]])
    def test_closed_form_matches_shapes(self, widths):
        spec = NetworkSpec.from_widths(widths, 181, 3, 4)
        tabulated = tabulated_param_count(2, widths, 3, 181, 3)
        by_shapes = sum(int(np.prod(s)) for s in param_shapes(spec).values())
        assert count_params_for(spec) == tabulated == by_shapes

    def test_reference_counts(self):
        # the synthetic face topology has 181 edges
        assert count_params_for(NetworkSpec.from_widths(PAPER_WIDTHS, 181, 3, 4)) == 290802
        assert count_params_for(NetworkSpec.from_widths(SEARCHED_WIDTHS, 181, 3, 4)) == 200839

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.integers(0, 1000))
    def test_count_independent_of_values(self, widths, seed):
        spec = NetworkSpec.from_widths(widths, 4, 2, 3)
        assert count_params(build_model(spec, seed)) == count_params_for(spec)


class TestForward:
    def test_same_seed_same_parameters(self):
        a, b = build_model(small_spec(), 7), build_model(small_spec(), 7)
        for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(p1.value, p2.value)

    def test_zero_input_gives_classifier_bias(self):
        model = build_model(small_spec(), 0)
        model.fc_bias.value[:] = (0.1, -0.2, 0.3)
        logits = model.forward(np.zeros((2, 2, 4, 5)), "eval")
        np.testing.assert_array_equal(logits, np.tile([0.1, -0.2, 0.3], (2, 1)))

    def test_eval_is_deterministic(self):
        model = build_model(small_spec(), 0)
        X = np.random.default_rng(0).normal(size=(3, 2, 4, 5))
        np.testing.assert_array_equal(model.forward(X, "eval"), model.forward(X, "eval"))

    def test_mc_without_dropout_equals_eval(self):
        model = build_model(small_spec(p=0.0), 0)
        X = np.random.default_rng(0).normal(size=(3, 2, 4, 5))
        np.testing.assert_array_equal(model.forward(X, "mc", np.random.default_rng(1)), model.forward(X, "eval"))

    def test_shape_mismatch(self):
        model = build_model(small_spec(), 0)
        with pytest.raises(ValueError, match="shape"):
            model.forward(np.zeros((1, 2, 4, 6)))

    def test_dropout_needs_rng(self):
        with pytest.raises(ValueError):
            build_model(small_spec(), 0).forward(np.zeros((1, 2, 4, 5)), "train")

    def test_residual_identity_wiring(self):
        spec = NetworkSpec.from_widths([2], 5, 2, 4, p=0.0)
        model = build_model(spec, 0)
        layer = model.layers[0]
        P = layer.params
        for name in ("U", "W", "temporal", "W_bias", "temporal_bias", "bn1_beta", "bn2_beta", "res1_bias", "res2_bias"):
            P[name].value[:] = 0
        P["res1"].value[:] = np.eye(2)
        P["res2"].value[:] = np.eye(2)
        x = np.random.default_rng(0).normal(size=(3, 2, 4, 5))
        np.testing.assert_array_equal(layer.forward(x, "train"), np.maximum(x, 0))

    def test_end_to_end_gradients(self):
        report = end_to_end_gradcheck(seed=0)
        assert report.passed, str(report)

    def test_end_to_end_gradients_six_edges(self):
        report = end_to_end_gradcheck(seed=1, widths=(2, 2), E=6, N=3)
        assert report.passed, str(report)


class TestGrowthEdits:
    def test_widen_preserves_old_slices(self):
        model = build_model(small_spec(), 0)
        before = {n: p.value.copy() for n, p in model.named_parameters() if n.startswith("layer1")}
        model.widen_last_layer(3, np.random.default_rng(1))
        assert model.spec.widths == [3, 7]
        for name, old in before.items():
            new = dict(model.named_parameters())[name].value
            idx = tuple(slice(0, s) for s in old.shape)
            np.testing.assert_array_equal(new[idx], old)
        assert model.fc_weight.shape == (3, 7)
        assert count_params(model) == count_params_for(model.spec)
        model.forward(np.zeros((1, 2, 4, 5)), "eval")

    def test_append_layer(self):
        model = build_model(small_spec(), 0)
        model.append_layer(LayerSpec(5), np.random.default_rng(0))
        assert model.spec.widths == [3, 4, 5]
        assert model.layers[-1].f_in == 4
        assert count_params(model) == count_params_for(model.spec)


class TestCheckpoint:
    def _trained(self):
        spec = small_spec()
        model = build_model(spec, 3)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(6, 2, 4, 5)), rng.integers(0, 3, 6)
        train_epochs(model, X, y, TrainConfig(batch_size=3), epochs=2)
        return model

    def test_roundtrip_bytes(self):
        blob = save_checkpoint(self._trained(), {"note": "x"})
        model, meta = load_checkpoint(blob)
        assert meta == {"note": "x"}
        assert save_checkpoint(model, meta) == blob

    def test_roundtrip_state(self):
        model = self._trained()
        restored, _ = load_checkpoint(save_checkpoint(model))
        for (_, a), (_, b) in zip(model.named_parameters(), restored.named_parameters()):
            np.testing.assert_array_equal(a.value, b.value)
            np.testing.assert_array_equal(a.momentum_buffer, b.momentum_buffer)
        for (_, a), (_, b) in zip(model.named_buffers(), restored.named_buffers()):
            np.testing.assert_array_equal(a, b)
        assert restored.seed == model.seed

    def test_file_roundtrip(self, tmp_path):
        model = self._trained()
        write_checkpoint(tmp_path / "m.ckpt", model)
        restored, _ = read_checkpoint(tmp_path / "m.ckpt")
        assert restored.spec == model.spec
        assert (tmp_path / "m.ckpt").read_bytes()[:6] == b"STBLN1"

    def test_corrupt_length_field(self):
        blob = bytearray(save_checkpoint(self._trained()))
        struct.pack_into("<Q", blob, 8, 10**9)
        with pytest.raises(CheckpointError):
            load_checkpoint(bytes(blob))

    def test_truncated(self):
        blob = save_checkpoint(self._trained())
        for cut in (4, 40, len(blob) - 8):
            with pytest.raises(CheckpointError):
                load_checkpoint(blob[:cut])

    def test_bad_magic_and_version(self):
        blob = bytearray(save_checkpoint(self._trained()))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(b"XXXXXX" + bytes(blob[6:]))
        struct.pack_into("<H", blob, 6, 99)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bytes(blob))

    def test_spec_mismatch(self):
        blob = save_checkpoint(self._trained())
        with pytest.raises(CheckpointError, match="inconsistent"):
            load_checkpoint(blob, expected_spec=small_spec(widths=(3, 5)))

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(save_checkpoint(self._trained()) + b"\0" * 8)

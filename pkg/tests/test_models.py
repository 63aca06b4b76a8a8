import numpy as np
import pytest

from conftest import linear_model, random_batch, tiny_cnn, tiny_mlp
from logitlab import tensor as T
from logitlab.models import (CheckpointError, CheckpointShapeError,
                             CheckpointTruncatedError, CheckpointVersionError,
                             LayerSpec, ModelBuildError, architecture_spec,
                             forward_logits, init_params, input_gradient,
                             lenet_spec, load_checkpoint, mlp_spec, predict,
                             save_checkpoint)


class TestArchitectures:
    def test_mlp_shapes(self):
        model = init_params(mlp_spec(), (1, 28, 28), 10, seed=0)
        assert model.params["01_dense/W"].shape == (784, 256)
        assert model.params["03_dense/W"].shape == (256, 10)
        x = np.zeros((3, 1, 28, 28), dtype=np.float32)
        assert forward_logits(model, x).shape == (3, 10)

    def test_cnn_shapes(self):
        model = init_params(lenet_spec(), (1, 28, 28), 10, seed=0)
        assert model.params["00_conv2d/W"].shape == (32, 1, 5, 5)
        assert model.params["03_conv2d/W"].shape == (64, 32, 5, 5)
        assert model.params["07_dense/W"].shape == (64 * 7 * 7, 1024)
        assert model.params["09_dense/W"].shape == (1024, 10)
        x = np.zeros((2, 1, 28, 28), dtype=np.float32)
        assert forward_logits(model, x).shape == (2, 10)

    def test_architecture_spec_names(self):
        assert architecture_spec("mlp") == mlp_spec()
        assert architecture_spec("cnn") == lenet_spec()
        with pytest.raises(ValueError):
            architecture_spec("resnet")

    def test_init_deterministic_in_seed(self):
        a = init_params(mlp_spec(), (1, 8, 8), 4, seed=5)
        b = init_params(mlp_spec(), (1, 8, 8), 4, seed=5)
        c = init_params(mlp_spec(), (1, 8, 8), 4, seed=6)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert not np.array_equal(a.params["01_dense/W"],
                                  c.params["01_dense/W"])

    def test_biases_start_at_zero(self):
        model = init_params(lenet_spec(), (1, 28, 28), 10, seed=0)
        for name, arr in model.params.items():
            if name.endswith("/b"):
                assert not arr.any()

    def test_build_errors(self):
        with pytest.raises(ModelBuildError):
            init_params([LayerSpec("dense", units=4)], (1, 8, 8), 4, 0)
        with pytest.raises(ModelBuildError):
            init_params([LayerSpec("flatten"), LayerSpec("conv2d", filters=2,
                                                         kernel=3)],
                        (1, 8, 8), 4, 0)
        with pytest.raises(ModelBuildError):
            init_params([LayerSpec("maxpool2d", pool=3), LayerSpec("flatten"),
                         LayerSpec("dense")], (1, 8, 8), 4, 0)
        with pytest.raises(ModelBuildError):  # wrong final width
            init_params([LayerSpec("flatten"), LayerSpec("dense", units=7)],
                        (1, 8, 8), 4, 0)
        with pytest.raises(ModelBuildError):
            init_params([LayerSpec("spectral")], (1, 8, 8), 4, 0)

    def test_batch_shape_validation(self):
        model = tiny_mlp()
        with pytest.raises(Exception):
            forward_logits(model, np.zeros((2, 1, 7, 7), dtype=np.float32))


class TestGradients:
    def test_linear_softmax_closed_form_input_gradient(self):
        """For z = xW + b, d(sum CE)/dx = (softmax(z) - onehot(y)) W^T."""
        model = linear_model()
        x, y = random_batch(model, 8, seed=3)
        grad = input_gradient(model, x, y)
        w = model.params["01_dense/W"]
        z = x.reshape(8, -1) @ w + model.params["01_dense/b"]
        e = np.exp(z - z.max(axis=1, keepdims=True))
        softmax = e / e.sum(axis=1, keepdims=True)
        onehot = np.eye(model.n_classes)[y]
        expected = ((softmax - onehot) @ w.T).reshape(x.shape)
        np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-6)

    def test_input_gradient_label_range(self):
        model = linear_model()
        x, _ = random_batch(model, 2)
        with pytest.raises(T.ContractError):
            input_gradient(model, x, np.array([0, 9]))

    def test_predict_matches_argmax(self):
        model = tiny_cnn()
        x, _ = random_batch(model, 5, seed=1)
        np.testing.assert_array_equal(
            predict(model, x), forward_logits(model, x).data.argmax(axis=1))


class TestCheckpoints:
    def make(self, seed=0):
        model = tiny_cnn(seed=seed)
        model.metadata = {"note": "fixture", "epoch": 3}
        return model

    def test_round_trip_preserves_everything(self, tmp_path):
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, model.metadata, path)
        loaded = load_checkpoint(path)
        assert loaded.layers == model.layers
        assert loaded.input_shape == model.input_shape
        assert loaded.n_classes == model.n_classes
        assert loaded.metadata == model.metadata
        assert list(loaded.params) == list(model.params)
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name],
                                          model.params[name])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = self.make(seed=9)
        first, second = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, model.metadata, first)
        loaded = load_checkpoint(first)
        save_checkpoint(loaded, loaded.metadata, second)
        assert first.read_bytes() == second.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_unsupported_version(self, tmp_path):
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 99
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointVersionError):
            load_checkpoint(path)

    def test_truncated_blob(self, tmp_path):
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_truncated_header(self, tmp_path):
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        path.write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointTruncatedError):
            load_checkpoint(path)

    def test_shape_mismatch_detected(self, tmp_path):
        import json
        import struct
        model = self.make()
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        raw = path.read_bytes()
        hlen, = struct.unpack_from("<Q", raw, 8)
        header = json.loads(raw[16:16 + hlen])
        # transpose a declared weight shape; same byte count, wrong layout
        entry = next(e for e in header["params"]
                     if e["name"] == "07_dense/W")
        entry["shape"] = entry["shape"][::-1]
        new_header = json.dumps(header, sort_keys=True).encode()
        path.write_bytes(raw[:8] + struct.pack("<Q", len(new_header))
                         + new_header + raw[16 + hlen:])
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path)

    def test_forward_identical_after_reload(self, tmp_path):
        model = self.make(seed=2)
        x, _ = random_batch(model, 4, seed=8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(model, {}, path)
        np.testing.assert_array_equal(
            forward_logits(model, x).data,
            forward_logits(load_checkpoint(path), x).data)

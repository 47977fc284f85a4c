"""
Unit tests for toy_detector.py: configuration, forward/backward, inference
and the checkpoint container.
"""

import json

import numpy as np
import pytest

from toy_detector import (
    LEVELS,
    ToyConfig,
    ToyModel,
    detect,
    load_checkpoint,
    read_tensor_bytes,
    save_checkpoint,
)

SMALL = dict(input_size=32, widths=(4, 4, 8, 8), neck_channels=8, msdp_convs=1, dck_groups=2, dck_reduction=2)


def _image(seed=0, size=32):
    return np.random.default_rng(seed).uniform(0.0, 1.0, (3, size, size))


def _projected_loss(model, image, cots):
    out, _ = model.forward(image)
    total = 0.0
    for n in LEVELS:
        total += np.sum(out.cls[n] * cots["cls"][n]) + np.sum(out.box[n] * cots["box"][n])
        if n in out.depth:
            total += np.sum(out.depth[n] * cots["depth"][n])
    return float(total)


def _cotangents(model, seed=1):
    rng = np.random.default_rng(seed)
    shapes = model.config.level_shapes()
    return {
        "cls": {n: rng.standard_normal((model.config.num_classes, h, w)) for n, (h, w) in shapes.items()},
        "box": {n: rng.standard_normal((4, h, w)) for n, (h, w) in shapes.items()},
        "depth": {n: 1e-3 * rng.standard_normal((h, w)) for n, (h, w) in shapes.items()},
    }


class TestToyConfig:
    """Tests for ToyConfig."""

    def test_defaults_validate(self):
        """The default configuration is valid."""
        ToyConfig().validate()

    def test_input_size_multiple(self):
        """input_size must be a multiple of the coarsest stride."""
        with pytest.raises(ValueError, match="input_size"):
            ToyConfig(input_size=40).validate()

    def test_widths_length(self):
        """One width per backbone stage."""
        with pytest.raises(ValueError, match="widths"):
            ToyConfig(widths=(8, 16)).validate()

    def test_from_dict(self):
        """Lists become tuples and unknown keys fail."""
        assert ToyConfig.from_dict({"widths": [4, 4, 8, 8]}).widths == (4, 4, 8, 8)
        with pytest.raises(ValueError, match="unknown model config"):
            ToyConfig.from_dict({"depth": 3})

    def test_dck_must_fit_channels(self):
        """DCK groups must divide the neck width."""
        with pytest.raises(ValueError, match="divisible"):
            ToyConfig(neck_channels=8, dck_groups=3).validate()


class TestToyModel:
    """Tests for ToyModel forward and backward."""

    def test_output_shapes(self):
        """Each level yields class, box and depth maps at its stride."""
        model = ToyModel.init(ToyConfig(**SMALL))
        out, _ = model.forward(_image())
        for n, (h, w) in model.config.level_shapes().items():
            assert out.cls[n].shape == (3, h, w)
            assert out.box[n].shape == (4, h, w)
            assert out.depth[n].shape == (h, w)
        assert model.config.level_shapes()[2] == (8, 8)

    def test_initial_depth_and_scores(self):
        """Untrained depth sits near 50 m and class scores near the prior."""
        model = ToyModel.init(ToyConfig(**SMALL))
        out, _ = model.forward(_image())
        assert np.all(np.abs(np.log(out.depth[2]) - np.log(50.0)) < 0.5)
        assert np.all(out.cls[3] < -3.0)

    def test_wrong_input_shape(self):
        """The input must match input_size."""
        model = ToyModel.init(ToyConfig(**SMALL))
        with pytest.raises(ValueError, match="input must be"):
            model.forward(np.zeros((3, 64, 64)))

    def test_same_seed_same_model(self):
        """Initialisation is deterministic."""
        a = ToyModel.init(ToyConfig(**SMALL))
        b = ToyModel.init(ToyConfig(**SMALL))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_variants_share_common_tensors(self):
        """Dropping DCK or MSDP leaves every shared tensor's init unchanged."""
        full = ToyModel.init(ToyConfig(**SMALL))
        plain = ToyModel.init(ToyConfig(**SMALL, use_msdp=False, use_dck=False))
        assert not any(name.startswith(("head.msdp", "head.dck")) for name in plain.params)
        assert set(plain.params) < set(full.params)
        for name in plain.params:
            np.testing.assert_array_equal(plain.params[name], full.params[name])

    def test_without_msdp_has_no_depth(self):
        """Without MSDP the model predicts no depth."""
        model = ToyModel.init(ToyConfig(**SMALL, use_msdp=False))
        out, _ = model.forward(_image())
        assert out.depth == {}

    def test_without_dck_head_sees_tower(self):
        """Without DCK the head input is the tower output."""
        model = ToyModel.init(ToyConfig(**SMALL, use_dck=False))
        _, cache = model.forward(_image())
        for n in LEVELS:
            np.testing.assert_array_equal(cache.levels[n].head_in, cache.levels[n].tower)

    def test_forward_leaves_buffers_without_update(self):
        """Plain forward passes never touch running statistics."""
        model = ToyModel.init(ToyConfig(**SMALL))
        before = {k: v.copy() for k, v in model.buffers.items()}
        model.forward(_image())
        for name, value in model.buffers.items():
            np.testing.assert_array_equal(value, before[name])

    def test_update_stats_selects_layers(self):
        """Only layers accepted by update_stats move their buffers."""
        model = ToyModel.init(ToyConfig(**SMALL))
        model.forward(_image(), update_stats=lambda prefix: prefix == "backbone.1.norm")
        assert np.any(model.buffers["backbone.1.norm.running_mean"] != 0.0)
        np.testing.assert_array_equal(model.buffers["backbone.2.norm.running_mean"], 0.0)

    @pytest.mark.parametrize("variant", [{}, {"use_dck": False}, {"use_msdp": False}])
    def test_backward_matches_finite_differences(self, variant):
        """Analytic gradients agree with central differences on sampled elements."""
        model = ToyModel.init(ToyConfig(**SMALL, **variant))
        image = _image(3)
        cots = _cotangents(model)
        _, cache = model.forward(image)
        grads = model.backward(cache, cots["cls"], cots["box"], cots["depth"])
        names = [
            "head.cls.weight",
            "head.box.bias",
            "head.tower.conv.weight",
            "neck.lateral3.weight",
            "backbone.2.conv.weight",
            "backbone.1.norm.gamma",
        ]
        if model.config.use_dck:
            names += ["head.dck.expand.weight", "head.dck.reduce.weight"]
        if model.config.use_msdp:
            names += ["head.msdp.2.depth.bias", "head.msdp.3.conv0.weight"]
        step = 1e-6
        for name in names:
            value = model.params[name]
            flat = value.reshape(-1)
            for k in (0, flat.size // 2):
                original = flat[k]
                flat[k] = original + step
                plus = _projected_loss(model, image, cots)
                flat[k] = original - step
                minus = _projected_loss(model, image, cots)
                flat[k] = original
                fd = (plus - minus) / (2 * step)
                analytic = grads[name].reshape(-1)[k]
                assert abs(analytic - fd) <= 1e-6 + 1e-4 * abs(fd), (name, k, analytic, fd)

    def test_identity_start_is_optional(self):
        """Without an identity start DCK has no expand bias and still trains end to end."""
        model = ToyModel.init(ToyConfig(**SMALL, dck_identity_start=False))
        assert "head.dck.expand.bias" not in model.params
        assert "head.dck.expand.weight" in model.params
        cots = _cotangents(model)
        _, cache = model.forward(_image())
        grads = model.backward(cache, cots["cls"], cots["box"], cots["depth"])
        assert set(grads) == set(model.params)

    def test_identity_start_passes_features_through(self):
        """With zero expand weights the default DCK leaves the tower feature unchanged."""
        model = ToyModel.init(ToyConfig(**SMALL))
        model.params["head.dck.expand.weight"][:] = 0.0
        _, cache = model.forward(_image())
        for n in LEVELS:
            np.testing.assert_allclose(cache.levels[n].head_in, cache.levels[n].tower, atol=1e-12)

    def test_gradient_covers_every_parameter(self):
        """backward returns one gradient per parameter with matching shape."""
        model = ToyModel.init(ToyConfig(**SMALL))
        cots = _cotangents(model)
        _, cache = model.forward(_image())
        grads = model.backward(cache, cots["cls"], cots["box"], cots["depth"])
        assert set(grads) == set(model.params)
        for name, g in grads.items():
            assert g.shape == model.params[name].shape


class TestDetect:
    """Tests for detect."""

    def test_default_threshold_filters_prior(self):
        """An untrained model scores below the default threshold everywhere."""
        model = ToyModel.init(ToyConfig(**SMALL))
        assert detect(model, _image()) == []

    def test_detections_are_ordered_and_clipped(self):
        """With no score floor, results are sorted, capped and inside the image."""
        model = ToyModel.init(ToyConfig(**SMALL))
        results = detect(model, _image(), score_threshold=0.0, max_detections=10)
        assert 0 < len(results) <= 10
        scores = [score for _, _, score in results]
        assert scores == sorted(scores, reverse=True)
        for (x, y, w, h), label, _ in results:
            assert 0 <= label < 3
            assert x >= 0 and y >= 0 and w > 0 and h > 0
            assert x + w <= 32 + 1e-9 and y + h <= 32 + 1e-9


class TestCheckpoint:
    """Tests for the checkpoint container."""

    def test_round_trip(self, tmp_path):
        """A reloaded model has identical tensors and outputs."""
        model = ToyModel.init(ToyConfig(**SMALL))
        model.buffers["head.tower.norm.running_mean"][:] = 0.5
        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        assert loaded.config == model.config
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])
        np.testing.assert_array_equal(loaded.buffers["head.tower.norm.running_mean"], 0.5)
        image = _image()
        np.testing.assert_array_equal(loaded.forward(image)[0].cls[2], model.forward(image)[0].cls[2])

    def test_bytes_stable_across_save(self, tmp_path):
        """Saving a reloaded model writes the same tensor bytes."""
        model = ToyModel.init(ToyConfig(**SMALL))
        save_checkpoint(model, tmp_path / "a")
        save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
        assert read_tensor_bytes(tmp_path / "a") == read_tensor_bytes(tmp_path / "b")
        assert (tmp_path / "a" / "model.bin").read_bytes() == (tmp_path / "b" / "model.bin").read_bytes()

    def test_index_file_path(self, tmp_path):
        """The index file itself is accepted as the checkpoint path."""
        save_checkpoint(ToyModel.init(ToyConfig(**SMALL)), tmp_path)
        assert load_checkpoint(tmp_path / "model.json").config.input_size == 32

    def test_wrong_format(self, tmp_path):
        """An unknown format tag is rejected."""
        save_checkpoint(ToyModel.init(ToyConfig(**SMALL)), tmp_path)
        index = json.loads((tmp_path / "model.json").read_text())
        index["format"] = "something-else/9"
        (tmp_path / "model.json").write_text(json.dumps(index))
        with pytest.raises(ValueError, match="unsupported checkpoint format"):
            load_checkpoint(tmp_path)

    def test_truncated_blob(self, tmp_path):
        """A short blob is rejected."""
        save_checkpoint(ToyModel.init(ToyConfig(**SMALL)), tmp_path)
        blob = (tmp_path / "model.bin").read_bytes()
        (tmp_path / "model.bin").write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="past the end"):
            load_checkpoint(tmp_path)

    def test_trailing_bytes(self, tmp_path):
        """Bytes the index does not describe are rejected."""
        save_checkpoint(ToyModel.init(ToyConfig(**SMALL)), tmp_path)
        with open(tmp_path / "model.bin", "ab") as f:
            f.write(b"\0\0\0\0")
        with pytest.raises(ValueError, match="blob holds"):
            load_checkpoint(tmp_path)

    def test_config_mismatch(self, tmp_path):
        """Tensors that do not fit the declared config are rejected."""
        save_checkpoint(ToyModel.init(ToyConfig(**SMALL)), tmp_path)
        index = json.loads((tmp_path / "model.json").read_text())
        index["config"]["use_dck"] = False
        (tmp_path / "model.json").write_text(json.dumps(index))
        with pytest.raises(ValueError, match="tensor names do not match"):
            load_checkpoint(tmp_path)

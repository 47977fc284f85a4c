"""
Unit tests for pdft_trainer.py: freezing, the optimizer step, stage
training and the two-stage driver.
"""

import copy
import json

import numpy as np
import pytest

from dataset_tools import ToyDatasetConfig, generate_toy_dataset
from pdft_trainer import (
    ABLATION_VARIANTS,
    LOG_NAME,
    PdftConfig,
    StageConfig,
    ablate,
    ablation_configs,
    backbone_prefixes,
    compare_finetuning,
    evaluate_model,
    freeze_mask,
    load_pdft_config,
    load_samples,
    pdft,
    predict,
    prepare_sample,
    run_stage,
    scaled_lr,
    sgd_step,
)
from toy_detector import ToyConfig, ToyModel, read_tensor_bytes

SMALL = dict(input_size=32, widths=(4, 4, 8, 8), neck_channels=8, msdp_convs=1, dck_groups=2, dck_reduction=2)


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("pdft")
    manifest = generate_toy_dataset(ToyDatasetConfig(num_images=4, resolution=128, objects_per_image=3, seed=1), out)
    return manifest


@pytest.fixture(scope="module")
def samples(toy_corpus):
    return load_samples(toy_corpus, "train", ToyConfig(**SMALL))


class TestFreezeMask:
    """Tests for freeze_mask."""

    def test_nothing_frozen(self):
        """No prefixes freeze nothing."""
        mask = freeze_mask(ToyModel.init(ToyConfig(**SMALL)), [])
        assert not any(mask.values())

    def test_whole_backbone(self):
        """A trailing dot matches the dotted subtree."""
        mask = freeze_mask(ToyModel.init(ToyConfig(**SMALL)), ["backbone."])
        assert all(mask[n] == n.startswith("backbone.") for n in mask)

    def test_first_k_stages(self):
        """k = 3 freezes stages 1..3 and leaves stage 4 trainable."""
        mask = freeze_mask(ToyModel.init(ToyConfig(**SMALL)), backbone_prefixes(3))
        assert mask["backbone.3.conv.weight"] is True
        assert mask["backbone.4.conv.weight"] is False
        assert mask["neck.lateral2.weight"] is False

    def test_prefix_stops_at_dot(self):
        """A bare prefix covers its own dotted children only."""
        mask = freeze_mask(ToyModel.init(ToyConfig(**SMALL)), ["head.cls"])
        assert mask["head.cls.weight"] and mask["head.cls.bias"]
        assert not mask["head.box.weight"]

    def test_unknown_prefix(self):
        """A prefix that matches nothing is an error."""
        with pytest.raises(ValueError, match="matches no parameter"):
            freeze_mask(ToyModel.init(ToyConfig(**SMALL)), ["backbone.9"])


class TestSgdStep:
    """Tests for sgd_step."""

    def test_single_step(self):
        """p = 1, g = 0.5, lr 0.1 from rest gives 0.95."""
        params, velocity = sgd_step(
            {"w": np.array([1.0])}, {"w": np.array([0.5])}, {"w": np.zeros(1)}, 0.1, 0.9, 0.0, {}
        )
        np.testing.assert_allclose(params["w"], [0.95])
        np.testing.assert_allclose(velocity["w"], [0.5])

    def test_weight_decay(self):
        """Weight decay adds decay * p to the velocity."""
        _, velocity = sgd_step({"w": np.array([2.0])}, {"w": np.zeros(1)}, {"w": np.zeros(1)}, 0.1, 0.9, 0.01, {})
        np.testing.assert_allclose(velocity["w"], [0.02])

    def test_masked_parameter_untouched(self):
        """Frozen entries come back as the very same objects."""
        w, v = np.array([1.0]), np.zeros(1)
        params, velocity = sgd_step({"w": w}, {"w": np.array([3.0])}, {"w": v}, 0.1, 0.9, 1e-4, {"w": True})
        assert params["w"] is w
        assert velocity["w"] is v

    def test_zero_lr_accumulates_velocity(self):
        """With lr 0 parameters hold while momentum builds up."""
        params, velocity = {"w": np.array([1.0])}, {"w": np.zeros(1)}
        grads = {"w": np.array([1.0])}
        for _ in range(2):
            params, velocity = sgd_step(params, grads, velocity, 0.0, 0.9, 0.0, {})
        np.testing.assert_array_equal(params["w"], [1.0])
        np.testing.assert_allclose(velocity["w"], [1.9])

    def test_non_finite_gradient_rejected(self):
        """NaN on a trainable parameter rejects the step."""
        with pytest.raises(ValueError, match="non-finite"):
            sgd_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, {"w": np.zeros(1)}, 0.1, 0.9, 0.0, {})

    def test_non_finite_gradient_on_frozen_ignored(self):
        """NaN on a frozen parameter is irrelevant."""
        params, _ = sgd_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, {"w": np.zeros(1)}, 0.1, 0.9, 0.0, {"w": True})
        np.testing.assert_array_equal(params["w"], [1.0])


class TestConfigs:
    """Tests for StageConfig and PdftConfig."""

    def test_scaled_lr(self):
        """0.02 x 0.1 is exactly 0.002."""
        assert scaled_lr(0.02, 0.1) == 0.002

    def test_derived_fields(self):
        """Stage 1 freezes stage 1; stage 2 freezes 1..k at lr x gamma."""
        config = PdftConfig(k=2)
        assert config.stage1.frozen_prefixes == ("backbone.1",)
        assert config.stage2.frozen_prefixes == ("backbone.1", "backbone.2")
        assert config.stage2.lr == 0.002

    def test_from_dict_rejects_derived(self):
        """Stage-2 lr cannot be set directly."""
        with pytest.raises(ValueError, match="derived"):
            PdftConfig.from_dict({"stage2": {"lr": 0.5}})

    def test_from_dict_unknown(self):
        """Unknown top-level keys are rejected."""
        with pytest.raises(ValueError, match="unknown pdft config"):
            PdftConfig.from_dict({"stage3": {}})

    def test_k_range(self):
        """k beyond the backbone depth is rejected."""
        with pytest.raises(ValueError, match="k must be"):
            PdftConfig(k=5).validate()

    def test_stage_lr_positive(self):
        """A stage needs a positive learning rate."""
        with pytest.raises(ValueError, match="learning rate"):
            StageConfig(lr=0.0).validate()

    def test_load_file(self, tmp_path):
        """A JSON file overrides stage-1 settings and gamma."""
        path = tmp_path / "pdft.json"
        path.write_text(json.dumps({"stage1": {"lr": 0.01, "epochs": 2}, "gamma": 0.5}), encoding="utf-8")
        config = load_pdft_config(path)
        assert config.stage1.epochs == 2
        assert config.stage2.lr == 0.005
        assert load_pdft_config(None).gamma == 0.1


class TestSamples:
    """Tests for prepare_sample and load_samples."""

    def test_prepare_sample(self, toy_corpus):
        """A 128 px toy image becomes a 32 px sample with depth and targets."""
        record = toy_corpus.images[0]
        anns = toy_corpus.annotations_by_image()[record.id]
        sample = prepare_sample(toy_corpus, record, ToyConfig(**SMALL), anns)
        assert sample.image.shape == (3, 32, 32)
        assert sample.depth.shape == (32, 32)
        assert sample.scale == 0.25
        assert sample.offset == (0, 0)
        assert 0 < sample.targets.num_positive <= len(anns)

    def test_class_count_mismatch(self, toy_corpus):
        """The model's class count must match the manifest."""
        with pytest.raises(ValueError, match="classes"):
            load_samples(toy_corpus, "train", ToyConfig(**SMALL, num_classes=2))


class TestRunStage:
    """Tests for run_stage."""

    def test_zero_epochs(self, samples):
        """E = 0 returns the model unchanged with no history."""
        model = ToyModel.init(ToyConfig(**SMALL))
        result = run_stage(model, samples, StageConfig(epochs=0))
        assert result.history == []
        for name in model.params:
            np.testing.assert_array_equal(result.model.params[name], model.params[name])

    def test_total_freeze(self, samples):
        """Freezing every parameter leaves parameters and buffers unchanged."""
        model = ToyModel.init(ToyConfig(**SMALL))
        result = run_stage(model, samples, StageConfig(epochs=1, frozen_prefixes=("backbone", "neck", "head")))
        for name in model.params:
            np.testing.assert_array_equal(result.model.params[name], model.params[name])
        for name in model.buffers:
            np.testing.assert_array_equal(result.model.buffers[name], model.buffers[name])

    def test_input_model_not_modified(self, samples):
        """Training works on a copy."""
        model = ToyModel.init(ToyConfig(**SMALL))
        before = model.params["head.cls.bias"].copy()
        result = run_stage(model, samples, StageConfig(epochs=1))
        np.testing.assert_array_equal(model.params["head.cls.bias"], before)
        assert not np.array_equal(result.model.params["head.cls.bias"], before)

    def test_history_record(self, samples):
        """One record per epoch with lr and frozen element count."""
        model = ToyModel.init(ToyConfig(**SMALL))
        result = run_stage(model, samples, StageConfig(epochs=2, frozen_prefixes=("backbone.1",)), "s")
        assert [r["epoch"] for r in result.history] == [1, 2]
        # conv 4x3x3x3 + bias 4 + gamma 4 + beta 4
        assert result.history[0]["frozen_param_count"] == 120
        assert all(np.isfinite(r["mean_loss"]) for r in result.history)

    def test_frozen_norm_keeps_running_stats(self, samples):
        """Running statistics of frozen norms stay put; trainable ones move."""
        model = ToyModel.init(ToyConfig(**SMALL))
        result = run_stage(model, samples, StageConfig(epochs=1, frozen_prefixes=("backbone.1",)))
        np.testing.assert_array_equal(result.model.buffers["backbone.1.norm.running_mean"], 0.0)
        assert np.any(result.model.buffers["backbone.2.norm.running_mean"] != 0.0)

    def test_empty_dataset(self):
        """No samples is an error."""
        with pytest.raises(ValueError, match="empty dataset"):
            run_stage(ToyModel.init(ToyConfig(**SMALL)), [], StageConfig())


class TestPdft:
    """Tests for the two-stage driver."""

    def test_two_stages(self, toy_corpus, tmp_path):
        """Checkpoints, frozen bytes and log lines after a one-epoch run per stage."""
        config = PdftConfig(
            stage1=StageConfig(epochs=1, batch_size=2),
            stage2=StageConfig(epochs=1, batch_size=2),
            k=2,
            model=ToyConfig(**SMALL),
        )
        model0 = ToyModel.init(config.model)
        result = pdft(model0, toy_corpus, toy_corpus, config, tmp_path / "run")

        assert set(result.checkpoints) == {"stage0", "stage1", "stage2"}
        b0 = read_tensor_bytes(result.checkpoints["stage0"])
        b1 = read_tensor_bytes(result.checkpoints["stage1"])
        b2 = read_tensor_bytes(result.checkpoints["stage2"])
        for name in b0:
            if name.startswith("backbone.1."):
                assert b0[name] == b1[name] == b2[name]
            if name.startswith("backbone.2.") and name in model0.params:
                assert b1[name] == b2[name]
        assert b0["backbone.2.conv.weight"] != b1["backbone.2.conv.weight"]
        assert b1["backbone.3.conv.weight"] != b2["backbone.3.conv.weight"]

        lines = (tmp_path / "run" / LOG_NAME).read_text().splitlines()
        records = [json.loads(line) for line in lines]
        assert [(r["stage"], r["epoch"]) for r in records] == [("stage1", 1), ("stage2", 1)]
        assert records[1]["lr"] == 0.002
        assert result.history == records

    def test_default_k_is_deterministic(self, toy_corpus, tmp_path):
        """With k = 3 stages 1..3 keep their stage-1 bytes and a re-run writes identical checkpoints."""
        config = PdftConfig(
            stage1=StageConfig(epochs=1, batch_size=2, seed=4),
            stage2=StageConfig(epochs=1, batch_size=2, seed=4),
            model=ToyConfig(**SMALL),
        )
        assert config.k == 3
        runs = [pdft(ToyModel.init(config.model), toy_corpus, toy_corpus, config, tmp_path / name) for name in ("a", "b")]

        b1 = read_tensor_bytes(runs[0].checkpoints["stage1"])
        b2 = read_tensor_bytes(runs[0].checkpoints["stage2"])
        for name in b1:
            if name.startswith(("backbone.1.", "backbone.2.", "backbone.3.")):
                assert b1[name] == b2[name]
        assert b1["backbone.4.conv.weight"] != b2["backbone.4.conv.weight"]

        for stage in ("stage0", "stage1", "stage2"):
            first = runs[0].checkpoints[stage] / "model.bin"
            second = runs[1].checkpoints[stage] / "model.bin"
            assert first.read_bytes() == second.read_bytes()
        assert runs[0].history == runs[1].history

    def test_predict_and_evaluate(self, toy_corpus):
        """An untrained model scores nothing above the default threshold."""
        model = ToyModel.init(ToyConfig(**SMALL))
        assert predict(model, toy_corpus, "train") == []
        assert evaluate_model(model, toy_corpus, "train").mAP == 0.0


def _train_test_split(manifest):
    split = copy.deepcopy(manifest)
    for i, img in enumerate(split.images):
        img.split = "train" if i < 2 else "test"
    return split


class TestAblation:
    """Tests for the component ablation and the fine-tuning comparison."""

    def test_variant_configs(self):
        """Each variant switches the documented components."""
        model, stage = ToyConfig(**SMALL), StageConfig()
        full_model, full_stage = ablation_configs(model, stage, "full")
        assert full_model.use_msdp and full_model.use_dck and full_stage.loss_weight == 0.2
        no_sir_model, no_sir_stage = ablation_configs(model, stage, "no_sir")
        assert no_sir_model.use_dck and no_sir_stage.loss_weight == 0.0
        no_dck_model, _ = ablation_configs(model, stage, "no_dck")
        assert no_dck_model.use_msdp and not no_dck_model.use_dck
        base_model, _ = ablation_configs(ToyConfig(**SMALL), stage, "baseline")
        assert not base_model.use_msdp and not base_model.use_dck

    def test_unknown_variant(self):
        """Unknown variant names are rejected."""
        with pytest.raises(ValueError, match="unknown ablation variant"):
            ablation_configs(ToyConfig(**SMALL), StageConfig(), "no_fpn")

    def test_every_variant_runs(self, toy_corpus):
        """One score per seed for every variant, with full as the reference."""
        split = _train_test_split(toy_corpus)
        report = ablate(split, ToyConfig(**SMALL), StageConfig(epochs=1), seeds=[0], variants=list(ABLATION_VARIANTS))
        assert list(report.scores) == list(ABLATION_VARIANTS)
        assert all(len(scores) == 1 and 0.0 <= scores[0] <= 1.0 for scores in report.scores.values())
        data = report.to_dict()
        assert set(data["wins_vs_full"]) == set(ABLATION_VARIANTS) - {"full"}
        assert data["runs"] == 1

    def test_full_always_included(self, toy_corpus):
        """Asking for one variant still trains the reference model."""
        split = _train_test_split(toy_corpus)
        report = ablate(split, ToyConfig(**SMALL), StageConfig(epochs=1), seeds=[0], variants=["no_dck"])
        assert list(report.scores) == ["full", "no_dck"]
        assert report.wins("no_dck") in (0, 1)

    def test_compare_finetuning(self, toy_corpus):
        """Direct, simulated-only and progressive runs are each scored per seed."""
        split = _train_test_split(toy_corpus)
        config = PdftConfig(
            stage1=StageConfig(epochs=1, batch_size=2),
            stage2=StageConfig(epochs=1, batch_size=2),
            model=ToyConfig(**SMALL),
        )
        result = compare_finetuning(split, split, config, seeds=[0], test_split="test")
        assert set(result.scores) == {"direct", "sim_only", "pdft"}
        assert all(len(v) == 1 for v in result.scores.values())
        assert result.to_dict()["pdft_wins_vs_direct"] in (0, 1)


@pytest.mark.slow
class TestTrainingDynamics:
    """Longer runs."""

    def test_loss_decreases(self, samples):
        """Mean loss of the last epoch is below the first."""
        model = ToyModel.init(ToyConfig(**SMALL))
        result = run_stage(model, samples, StageConfig(epochs=6, lr=0.01, batch_size=2))
        assert result.history[-1]["mean_loss"] < result.history[0]["mean_loss"]


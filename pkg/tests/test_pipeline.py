import numpy as np
import pytest

from conftest import accuracy
from tailadapt import dataio, pipeline
from tailadapt.errors import (
    ConfigurationError,
    DanglingReferenceError,
    DivergenceError,
    HashMismatchError,
    InvalidConfigError,
)
from tailadapt.model import branch_logits_batch, init_adapter
from tailadapt.pipeline import (
    ProbeCheckpoint,
    RunConfig,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from tailadapt.seeding import named_rng

SMALL = dict(
    num_classes=4, dim=8, head_count=40, tail_count=4, test_per_class=5,
    many_min=20, few_max=6,
)


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("small")
    cfg = dataio.SynthConfig(**SMALL)
    path = dataio.write_dataset(out, *dataio.synth_generate(cfg))
    return dataio.load_manifest(path)


@pytest.fixture(scope="module")
def small_run(small_manifest):
    cfg = RunConfig(epochs_stage1=5, epochs_stage2=4, seed=0)
    ckpt_w = train_stage1(small_manifest, "wrs", cfg)
    ckpt_r = train_stage1(small_manifest, "rus", cfg)
    return {"cfg": cfg, "w": ckpt_w, "r": ckpt_r}


class TestStage1:
    def test_zero_epochs_equals_initialization(self, small_manifest):
        cfg = RunConfig(epochs_stage1=0, seed=11)
        ckpt = train_stage1(small_manifest, "wrs", cfg)
        expected = init_adapter(small_manifest.dim, named_rng(11, "init", "wrs"))
        np.testing.assert_array_equal(ckpt.adapter.weight, expected.weight)
        assert ckpt.adapter.gate == 0.0
        assert ckpt.final_loss is None

    def test_deterministic_across_runs(self, small_manifest):
        cfg = RunConfig(epochs_stage1=3, seed=5)
        a = train_stage1(small_manifest, "wrs", cfg)
        b = train_stage1(small_manifest, "wrs", cfg)
        np.testing.assert_array_equal(a.adapter.weight, b.adapter.weight)
        assert a.adapter.gate == b.adapter.gate
        assert a.final_loss == b.final_loss

    def test_unknown_sampler_rejected(self, small_manifest):
        with pytest.raises(ConfigurationError):
            train_stage1(small_manifest, "smote", RunConfig())

    def test_training_reduces_loss(self, small_manifest):
        cfg = RunConfig(epochs_stage1=10, seed=0)
        ckpt = train_stage1(small_manifest, "wrs", cfg)
        test = small_manifest.load_test()
        bank = small_manifest.load_bank()
        preds = pipeline.predict_stage1(ckpt, bank, test.features)
        zs = pipeline.predict_zero_shot(bank, test.features, cfg.head())
        assert accuracy(preds, test.labels) > accuracy(zs, test.labels)

    def test_epoch_losses_recorded_and_finite(self, small_manifest, small_run):
        for ckpt in (small_run["w"], small_run["r"]):
            assert len(ckpt.epoch_losses) == ckpt.epochs
            assert all(np.isfinite(loss) for loss in ckpt.epoch_losses)
            assert ckpt.final_loss == ckpt.epoch_losses[-1]


class TestStage2:
    def test_sampler_pairing_enforced(self, small_manifest, small_run):
        with pytest.raises(ConfigurationError):
            train_stage2(small_run["w"], small_run["w"], "logit", small_manifest, small_run["cfg"])
        with pytest.raises(ConfigurationError):
            train_stage2(small_run["r"], small_run["w"], "logit", small_manifest, small_run["cfg"])

    def test_tau_mismatch_rejected(self, small_manifest, small_run):
        other = train_stage1(
            small_manifest, "rus",
            RunConfig(epochs_stage1=0, tau=0.5, seed=0),
        )
        with pytest.raises(ConfigurationError):
            train_stage2(small_run["w"], other, "logit", small_manifest, small_run["cfg"])

    @pytest.mark.parametrize("mode", ["logit", "feature"])
    def test_zero_epochs_predicts_branch_average(self, small_manifest, small_run, mode):
        cfg = RunConfig(epochs_stage2=0, seed=0)
        ckpt2 = train_stage2(small_run["w"], small_run["r"], mode, small_manifest, cfg)
        test = small_manifest.load_test()
        bank = small_manifest.load_bank()
        preds = pipeline.predict_stage2(ckpt2, bank, test.features)
        lw, fw = branch_logits_batch(small_run["w"].adapter, bank, test.features, ckpt2.head)
        lr_, fr = branch_logits_batch(small_run["r"].adapter, bank, test.features, ckpt2.head)
        if mode == "logit":
            reference = ((lw + lr_) / 2.0).argmax(axis=1)
        else:
            mean = (fw + fr) / 2.0
            units = mean / np.linalg.norm(mean, axis=1, keepdims=True)
            reference = (units @ bank.anchors.T).argmax(axis=1)
        np.testing.assert_array_equal(preds, reference)

    def test_adapters_frozen_bit_exact(self, small_manifest, small_run, tmp_path):
        dir_w = save_checkpoint(tmp_path / "w", small_run["w"])
        dir_r = save_checkpoint(tmp_path / "r", small_run["r"])
        before = [(p, p.read_bytes()) for d in (dir_w, dir_r) for p in sorted(d.iterdir())]
        train_stage2(small_run["w"], small_run["r"], "feature", small_manifest, small_run["cfg"])
        after = [(p, p.read_bytes()) for d in (dir_w, dir_r) for p in sorted(d.iterdir())]
        assert before == after

    def test_deterministic(self, small_manifest, small_run):
        a = train_stage2(small_run["w"], small_run["r"], "logit", small_manifest, small_run["cfg"])
        b = train_stage2(small_run["w"], small_run["r"], "logit", small_manifest, small_run["cfg"])
        np.testing.assert_array_equal(a.ensembler.weight, b.ensembler.weight)
        np.testing.assert_array_equal(a.ensembler.bias, b.ensembler.bias)


class TestCheckpointIO:
    def test_stage1_round_trip_bit_exact(self, small_run, tmp_path):
        save_checkpoint(tmp_path / "ck", small_run["w"])
        loaded = load_checkpoint(tmp_path / "ck")
        np.testing.assert_array_equal(loaded.adapter.weight, small_run["w"].adapter.weight)
        assert loaded.adapter.gate == small_run["w"].adapter.gate
        assert loaded.sampler_kind == "wrs"
        assert loaded.head.tau == small_run["w"].head.tau

    def test_stage2_round_trip_with_references(self, small_manifest, small_run, tmp_path):
        save_checkpoint(tmp_path / "w", small_run["w"])
        save_checkpoint(tmp_path / "r", small_run["r"])
        ckpt2 = train_stage2(small_run["w"], small_run["r"], "feature", small_manifest,
                             small_run["cfg"])
        save_checkpoint(tmp_path / "s2", ckpt2)
        loaded = load_checkpoint(tmp_path / "s2")
        np.testing.assert_array_equal(loaded.ensembler.weight, ckpt2.ensembler.weight)
        np.testing.assert_array_equal(loaded.ensembler.bias, ckpt2.ensembler.bias)
        assert loaded.ckpt_w.sampler_kind == "wrs"
        assert loaded.ckpt_r.sampler_kind == "rus"

    def test_tampered_matrix_detected(self, small_run, tmp_path):
        directory = save_checkpoint(tmp_path / "ck", small_run["w"])
        blob = bytearray((directory / "adapter.tfae").read_bytes())
        blob[-1] ^= 0xFF
        (directory / "adapter.tfae").write_bytes(bytes(blob))
        with pytest.raises(HashMismatchError):
            load_checkpoint(directory)

    def test_missing_stage1_reference_detected(self, small_manifest, small_run, tmp_path):
        import shutil

        save_checkpoint(tmp_path / "w", small_run["w"])
        save_checkpoint(tmp_path / "r", small_run["r"])
        ckpt2 = train_stage2(small_run["w"], small_run["r"], "logit", small_manifest,
                             small_run["cfg"])
        save_checkpoint(tmp_path / "s2", ckpt2)
        shutil.rmtree(tmp_path / "r")
        with pytest.raises(DanglingReferenceError):
            load_checkpoint(tmp_path / "s2")

    def test_tampered_stage1_reference_detected(self, small_manifest, small_run, tmp_path):
        save_checkpoint(tmp_path / "w", small_run["w"])
        save_checkpoint(tmp_path / "r", small_run["r"])
        ckpt2 = train_stage2(small_run["w"], small_run["r"], "logit", small_manifest,
                             small_run["cfg"])
        save_checkpoint(tmp_path / "s2", ckpt2)
        # replace the referenced RUS checkpoint with a different adapter
        other = train_stage1(small_manifest, "rus", RunConfig(epochs_stage1=1, seed=99))
        save_checkpoint(tmp_path / "r", other)
        with pytest.raises(HashMismatchError):
            load_checkpoint(tmp_path / "s2")

    def test_unsaved_references_rejected(self, small_manifest, tmp_path):
        cfg = RunConfig(epochs_stage1=0, epochs_stage2=0, seed=0)
        ckpt_w = train_stage1(small_manifest, "wrs", cfg)
        ckpt_r = train_stage1(small_manifest, "rus", cfg)
        ckpt2 = train_stage2(ckpt_w, ckpt_r, "logit", small_manifest, cfg)
        with pytest.raises(pipeline.CheckpointError):
            save_checkpoint(tmp_path / "s2", ckpt2)

    def test_probe_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        ckpt = ProbeCheckpoint(weight=rng.standard_normal((3, 5)),
                               bias=rng.standard_normal(3), epochs=7, seed=1)
        save_checkpoint(tmp_path / "probe", ckpt)
        loaded = load_checkpoint(tmp_path / "probe")
        np.testing.assert_array_equal(loaded.weight, ckpt.weight)
        np.testing.assert_array_equal(loaded.bias, ckpt.bias)


class TestDivergenceGuard:
    def test_nan_loss_names_epoch(self):
        with pytest.raises(DivergenceError) as excinfo:
            pipeline._finite_or_raise(float("nan"), 7, "stage1")
        assert excinfo.value.epoch == 7
        assert "epoch 7" in str(excinfo.value)

    def test_huge_loss_aborts(self):
        with pytest.raises(DivergenceError):
            pipeline._finite_or_raise(2e6, 0, "stage2")

    def test_finite_loss_passes(self):
        pipeline._finite_or_raise(123.4, 0, "stage1")


class TestRunConfig:
    def test_defaults_match_contract(self):
        cfg = RunConfig()
        assert cfg.batch_size == 128
        assert cfg.epochs_stage1 == 200
        assert cfg.epochs_stage2 == 100
        assert cfg.lr0 == 0.1
        assert cfg.momentum == 0.9
        assert cfg.weight_decay == 5e-4
        assert cfg.tau == 0.01
        assert cfg.gamma == 2.0

    def test_validation(self):
        with pytest.raises(InvalidConfigError):
            RunConfig(batch_size=0)
        with pytest.raises(InvalidConfigError):
            RunConfig(epochs_stage1=-1)
        with pytest.raises(InvalidConfigError):
            RunConfig(gamma=-0.5)

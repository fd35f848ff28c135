import json
import zipfile

import numpy as np
import pytest
import torch

from tvptst.data import Dataset, SyntheticConfig, generate_synthetic
from tvptst.model import DecoderConfig, ModelConfig, StageConfig
from tvptst.objective import ObjectiveConfig, preset
from tvptst.training import (
    Checkpoint,
    CheckpointFormatError,
    RunRecord,
    TrainConfig,
    UnsupportedModeError,
    default_heads,
    evaluate,
    lr_schedule,
    semi_supervised_sweep,
    train,
)


def tiny_model_cfg(f=4, k=3):
    return ModelConfig(
        input_dim=f,
        num_classes=k,
        stages=tuple(StageConfig(channels=8, heads=2) for _ in range(2)),
        latent_dim=16,
        decoder=DecoderConfig(channels=16, depth=1, heads=2, max_len=32),
    )


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic(SyntheticConfig(K=3, T=16, B=2, n_parcels=32, seed=1))


@pytest.fixture(scope="module")
def tiny_eval():
    return generate_synthetic(SyntheticConfig(K=3, T=16, B=2, n_parcels=16, seed=2))


def short_cfg(**kwargs):
    kwargs.setdefault("objective", "tvae")
    kwargs.setdefault("preset", "VII")
    kwargs.setdefault("epochs", 2)
    kwargs.setdefault("batch_size", 16)
    kwargs.setdefault("seed", 0)
    return TrainConfig(**kwargs)


@pytest.fixture(scope="module")
def short_run(tiny_ds, tiny_eval):
    return train(tiny_ds, short_cfg(), model_cfg=tiny_model_cfg(), eval_ds=tiny_eval)


class TestTrainConfig:
    def test_preset_name_accepted_as_objective(self):
        cfg = TrainConfig(objective="dkl-fixed")
        assert cfg.objective == "tvae" and cfg.preset == "dkl-fixed"

    def test_rejects_unknown_objective(self):
        with pytest.raises(ValueError):
            TrainConfig(objective="svm")

    def test_rejects_bad_numbers(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            TrainConfig(labelled_fraction=0.0)
        with pytest.raises(ValueError):
            TrainConfig(labelled_fraction=1.5)


class TestLrSchedule:
    def test_linear_decay_to_zero(self):
        assert lr_schedule(0, 100, 1e-4) == pytest.approx(1e-4)
        assert lr_schedule(50, 100, 1e-4) == pytest.approx(5e-5)
        assert lr_schedule(100, 100, 1e-4) == 0.0

    def test_strictly_decreasing(self):
        values = [lr_schedule(s, 64, 1e-3) for s in range(65)]
        assert all(b < a for a, b in zip(values, values[1:]))


class TestTrainLoop:
    def test_run_record_structure(self, short_run, tiny_ds):
        _, run = short_run
        assert run.objective == "tvae" and run.preset == "VII"
        assert len(run.epochs) == 2
        assert run.total_steps == 4  # 32 records / batch 16 * 2 epochs
        assert len(run.early_step_losses) == 4
        assert all(np.isfinite(v) for v in run.early_step_losses)
        assert set(run.config) == {"train", "model", "objective"}
        assert run.config["train"]["preset"] == "VII"
        for rec in run.epochs:
            assert np.isfinite(rec.losses["total"])
            assert rec.seconds >= 0.0

    def test_lr_decreases_across_epochs(self, short_run):
        _, run = short_run
        assert run.epochs[-1].lr < run.epochs[0].lr

    def test_final_metrics_present(self, short_run):
        _, run = short_run
        metrics = run.final_metrics
        assert set(metrics) == {"y", "z", "cos"}
        for head in metrics.values():
            assert 0.0 <= head["oa"] <= 100.0

    def test_eval_every_skips_intermediate_epochs(self, tiny_ds):
        _, run = train(tiny_ds, short_cfg(epochs=3, eval_every=3),
                       model_cfg=tiny_model_cfg())
        assert run.epochs[0].metrics == {} and run.epochs[1].metrics == {}
        assert run.epochs[2].metrics != {}

    def test_empty_dataset_rejected(self):
        ds = Dataset([], T=16, F=4, K=3)
        with pytest.raises(ValueError, match="empty"):
            train(ds, short_cfg())

    def test_ptst_needs_labels(self, tiny_ds):
        from dataclasses import replace

        records = [replace(r, label_present=False) for r in tiny_ds.records]
        unlabelled = Dataset(records, T=tiny_ds.T, F=tiny_ds.F, K=tiny_ds.K)
        with pytest.raises(ValueError, match="labelled"):
            train(unlabelled, short_cfg(objective="ptst"), model_cfg=tiny_model_cfg())

    def test_run_record_jsonl_round_trip(self, short_run, tmp_path):
        _, run = short_run
        path = tmp_path / "run.jsonl"
        run.to_jsonl(path)
        back = RunRecord.from_jsonl(path)
        assert back.seed == run.seed and back.total_steps == run.total_steps
        assert back.early_step_losses == run.early_step_losses
        assert len(back.epochs) == len(run.epochs)
        assert back.epochs[-1].metrics == run.epochs[-1].metrics
        with pytest.raises(ValueError):
            other = tmp_path / "other.jsonl"
            other.write_text('{"record": "epoch"}\n')
            RunRecord.from_jsonl(other)


class TestDeterminism:
    def test_identical_seeds_reproduce_losses_and_metrics(self, tiny_ds, tiny_eval):
        a = train(tiny_ds, short_cfg(seed=11), model_cfg=tiny_model_cfg(), eval_ds=tiny_eval)
        b = train(tiny_ds, short_cfg(seed=11), model_cfg=tiny_model_cfg(), eval_ds=tiny_eval)
        assert a[1].early_step_losses == b[1].early_step_losses
        assert a[1].final_metrics == b[1].final_metrics
        for key, val in a[0].state.items():
            torch.testing.assert_close(val, b[0].state[key], rtol=0, atol=0)

    def test_different_seed_changes_trajectory(self, tiny_ds):
        a = train(tiny_ds, short_cfg(seed=11), model_cfg=tiny_model_cfg())
        b = train(tiny_ds, short_cfg(seed=12), model_cfg=tiny_model_cfg())
        assert a[1].early_step_losses != b[1].early_step_losses


class TestCheckpoint:
    def test_round_trip_reproduces_metrics_bit_identically(self, short_run, tiny_eval, tmp_path):
        ckpt, _ = short_run
        direct = evaluate(ckpt, tiny_eval)
        path = tmp_path / "ckpt.zip"
        ckpt.save(path)
        loaded = Checkpoint.load(path)
        assert loaded.objective == ckpt.objective
        assert loaded.model_cfg == ckpt.model_cfg
        assert loaded.class_names == ckpt.class_names
        for key, val in ckpt.state.items():
            torch.testing.assert_close(loaded.state[key], val, rtol=0, atol=0)
        reloaded = evaluate(loaded, tiny_eval)
        assert reloaded.to_dict() == direct.to_dict()
        for head in direct.heads:
            np.testing.assert_array_equal(
                reloaded.heads[head].predictions, direct.heads[head].predictions
            )

    def test_rejects_non_zip(self, tmp_path):
        path = tmp_path / "junk.zip"
        path.write_bytes(b"not a zip archive")
        with pytest.raises(CheckpointFormatError, match="not a checkpoint"):
            Checkpoint.load(path)

    def test_rejects_wrong_format_tag(self, short_run, tmp_path):
        ckpt, _ = short_run
        path = tmp_path / "ckpt.zip"
        ckpt.save(path)
        bad = tmp_path / "bad.zip"
        with zipfile.ZipFile(path) as zin, zipfile.ZipFile(bad, "w") as zout:
            for name in zin.namelist():
                data = zin.read(name)
                if name == "format.json":
                    data = json.dumps({"format": "something-else", "version": 1}).encode()
                zout.writestr(name, data)
        with pytest.raises(CheckpointFormatError, match="format tag"):
            Checkpoint.load(bad)

    def test_rejects_missing_format_entry(self, short_run, tmp_path):
        ckpt, _ = short_run
        path = tmp_path / "ckpt.zip"
        ckpt.save(path)
        bad = tmp_path / "bad.zip"
        with zipfile.ZipFile(path) as zin, zipfile.ZipFile(bad, "w") as zout:
            for name in zin.namelist():
                if name != "format.json":
                    zout.writestr(name, zin.read(name))
        with pytest.raises(CheckpointFormatError, match="format.json"):
            Checkpoint.load(bad)


class TestEvaluate:
    def test_default_heads_per_configuration(self):
        assert default_heads("ptst", None) == ("y",)
        assert default_heads("tvae", preset("VII")) == ("y", "z", "cos")
        # without latent supervision the z head carries no trained signal
        assert default_heads("tvae", preset("I")) == ("y", "cos")
        assert default_heads("tvae", preset("dkl-learnable")) == ("y", "cos")

    def test_ptst_checkpoint_only_serves_y(self, tiny_ds, tiny_eval):
        ckpt, _ = train(tiny_ds, short_cfg(objective="ptst", epochs=1),
                        model_cfg=tiny_model_cfg())
        report = evaluate(ckpt, tiny_eval)
        assert set(report.heads) == {"y"}
        with pytest.raises(UnsupportedModeError):
            evaluate(ckpt, tiny_eval, heads=("y", "z"))
        with pytest.raises(UnsupportedModeError):
            evaluate(ckpt, tiny_eval, heads=("cos",))

    def test_unknown_head_rejected(self, short_run, tiny_eval):
        ckpt, _ = short_run
        with pytest.raises(ValueError, match="unknown head"):
            evaluate(ckpt, tiny_eval, heads=("logits",))

    def test_class_count_mismatch_rejected(self, short_run):
        ckpt, _ = short_run
        other = generate_synthetic(SyntheticConfig(K=4, T=16, B=2, n_parcels=8, seed=3))
        with pytest.raises(ValueError, match="classes"):
            evaluate(ckpt, other)

    def test_feature_dim_mismatch_rejected(self, short_run):
        ckpt, _ = short_run
        other = generate_synthetic(SyntheticConfig(K=3, T=16, B=3, n_parcels=8, seed=3))
        with pytest.raises(ValueError, match="feature dim"):
            evaluate(ckpt, other)

    def test_confusion_totals_match_record_count(self, short_run, tiny_eval):
        ckpt, _ = short_run
        report = evaluate(ckpt, tiny_eval)
        assert report.n_records == len(tiny_eval)
        for head in report.heads.values():
            assert head.confusion.total == len(tiny_eval)
            assert head.predictions.shape == (len(tiny_eval),)

    def test_agreement_bounds(self, short_run, tiny_eval):
        ckpt, _ = short_run
        report = evaluate(ckpt, tiny_eval)
        value = report.agreement("y", "z")
        assert 0.0 <= value <= 1.0
        assert report.agreement("y", "y") == 1.0


class TestSanityDescent:
    def test_loss_decreases_when_overfitting_tiny_batch(self, tiny_ds):
        cfg = short_cfg(epochs=120, batch_size=32, lr=1e-3, eval_every=120)
        _, run = train(tiny_ds, cfg, model_cfg=tiny_model_cfg())
        totals = [rec.losses["total"] for rec in run.epochs]
        first = float(np.mean(totals[:10]))
        last = float(np.mean(totals[-10:]))
        assert last < first

    def test_overfit_run_classifies_train_set(self, tiny_ds):
        cfg = short_cfg(objective="ptst", epochs=120, batch_size=32, lr=1e-3,
                        eval_every=120)
        ckpt, _ = train(tiny_ds, cfg, model_cfg=tiny_model_cfg())
        report = evaluate(ckpt, tiny_ds)
        assert report.heads["y"].metrics.oa >= 80.0


class TestSweep:
    def test_rows_cover_fractions_and_heads(self, tiny_ds, tiny_eval, tmp_path):
        result, ckpts = semi_supervised_sweep(
            tiny_ds, tiny_eval, fractions=(1.0, 0.5),
            train_cfg=short_cfg(), model_cfg=tiny_model_cfg(),
        )
        assert set(ckpts) == {1.0, 0.5}
        assert len(result.rows) == 6  # 2 fractions x 3 heads
        assert {row["fraction"] for row in result.rows} == {1.0, 0.5}
        assert {row["head"] for row in result.rows} == {"y", "z", "cos"}
        path = tmp_path / "sweep.csv"
        result.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "fraction,head,oa,precision,recall,f1"
        assert len(lines) == 7

    def test_full_fraction_matches_direct_training(self, tiny_ds, tiny_eval, short_run):
        result, ckpts = semi_supervised_sweep(
            tiny_ds, tiny_eval, fractions=(1.0,),
            train_cfg=short_cfg(), model_cfg=tiny_model_cfg(),
        )
        direct = evaluate(short_run[0], tiny_eval)
        swept = evaluate(ckpts[1.0], tiny_eval)
        assert swept.to_dict() == direct.to_dict()

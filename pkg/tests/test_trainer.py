import csv
import json
import logging
from pathlib import Path

import numpy as np
import pytest

import vqseg.trainer as trainer
from vqseg.checkpoint import load_checkpoint
from vqseg.errors import ConfigurationError, DataError, NumericalError
from vqseg.model import build_model
from vqseg.schemas import MetricsReport
from vqseg.synthetic import SyntheticDataset
from vqseg.trainer import (
    ablate_codebook,
    build_dataset,
    class_names,
    compare,
    evaluate,
    evaluate_model,
    load_trained,
    train,
)


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_short_run_writes_everything(tiny_run_config):
    report = train(tiny_run_config)
    run_dir = Path(tiny_run_config.run_dir)

    assert [p.iteration for p in report.loss_curve] == [0, 1]
    assert report.loss_curve[0].lr == pytest.approx(0.003)
    assert sorted(report.snapshots) == [1, 2]
    for point in report.loss_curve:
        assert np.isfinite(point.terms.total)
        assert point.terms.total == pytest.approx(point.terms.ce + point.terms.vq)

    rows = read_csv(run_dir / "losses.csv")
    assert list(rows[0]) == ["iteration", "lr", "ce", "vq", "total"]
    assert len(rows) == 2

    assert (run_dir / "checkpoints" / "iter_000001.ckpt").exists()
    assert report.checkpoint == str(run_dir / "checkpoints" / "iter_000002.ckpt")
    assert load_checkpoint(Path(report.checkpoint)).iteration == 2

    metrics = MetricsReport.model_validate(json.loads((run_dir / "metrics.json").read_text()))
    assert metrics.iteration == 2
    assert [c.name for c in metrics.per_class] == class_names(tiny_run_config)
    assert 0.0 <= metrics.mIoU <= 1.0
    assert metrics.codebook is not None
    assert sum(metrics.codebook.histogram) > 0
    assert len(metrics.codebook.histogram) == 6


def test_single_iteration_run(tiny_run_config):
    report = train(tiny_run_config.with_overrides(**{"train.max_iters": 1}))
    assert len(report.loss_curve) == 1
    assert list(report.snapshots) == [1]


def test_runs_are_deterministic(tiny_run_config, tmp_path):
    a = train(tiny_run_config, tmp_path / "a")
    b = train(tiny_run_config, tmp_path / "b")
    assert [p.terms for p in a.loss_curve] == [p.terms for p in b.loss_curve]
    assert a.snapshots[2].mIoU == b.snapshots[2].mIoU


def test_threaded_loading_matches_serial(tiny_run_config, tmp_path):
    serial = train(tiny_run_config, tmp_path / "serial")
    threaded = train(tiny_run_config.with_overrides(**{"data.num_workers": 2}), tmp_path / "threaded")
    assert [p.terms for p in serial.loss_curve] == [p.terms for p in threaded.loss_curve]
    assert serial.snapshots[2].model_dump() == threaded.snapshots[2].model_dump()


def test_baseline_leaves_codebook_untouched(tiny_run_config):
    cfg = tiny_run_config.with_overrides(**{"model.use_vq": False})
    report = train(cfg)
    assert all(p.terms.vq == 0.0 for p in report.loss_curve)
    assert report.snapshots[2].codebook is None

    ckpt = load_checkpoint(Path(report.checkpoint))
    fresh = build_model(cfg.model, seed=cfg.seed)
    np.testing.assert_array_equal(ckpt.params["quantizer.codebook"], fresh.codebook.data)


def test_checkpoint_reload_reproduces_metrics(tiny_run_config):
    report = train(tiny_run_config)
    reloaded = evaluate(tiny_run_config, Path(report.checkpoint))
    assert reloaded.mIoU == report.snapshots[2].mIoU
    assert reloaded.codebook.histogram == report.snapshots[2].codebook.histogram


def test_oracle_scores_perfectly(tiny_run_config):
    report = train(tiny_run_config)
    metrics = evaluate(tiny_run_config, Path(report.checkpoint), oracle=True)
    assert metrics.mIoU == 1.0
    assert metrics.pixel_accuracy == 1.0
    assert all(c.iou in (None, 1.0) for c in metrics.per_class)


def test_prediction_pngs(tiny_run_config, tmp_path):
    report = train(tiny_run_config)
    out = tmp_path / "predictions"
    evaluate(tiny_run_config, Path(report.checkpoint), emit_png=out)
    assert sorted(p.name for p in out.iterdir()) == ["val_00000.png", "val_00001.png", "val_00002.png"]


def test_evaluate_rejects_other_architecture(tiny_run_config):
    report = train(tiny_run_config)
    with pytest.raises(ConfigurationError, match="model.vq.K"):
        load_trained(tiny_run_config.with_overrides(**{"model.vq.K": 7}), Path(report.checkpoint))


def test_evaluate_model_restores_training_mode(tiny_run_config):
    model = build_model(tiny_run_config.model, seed=0).train()
    dataset = build_dataset(tiny_run_config, "val")
    evaluate_model(model, dataset, tiny_run_config, "val")
    assert model.training


def test_empty_split_cannot_be_scored(tiny_run_config):
    model = build_model(tiny_run_config.model, seed=0)
    with pytest.raises(DataError, match="empty"):
        evaluate_model(model, SyntheticDataset(0, 4, 16), tiny_run_config, "val")


def test_numerical_failure_names_last_checkpoint(tiny_run_config, monkeypatch):
    real_step = trainer.train_step
    calls = []

    def failing_step(*args, **kwargs):
        calls.append(1)
        if len(calls) == 2:
            raise NumericalError("non-finite gradient for head.weight")
        return real_step(*args, **kwargs)

    monkeypatch.setattr(trainer, "train_step", failing_step)
    with pytest.raises(NumericalError, match="iter_000001.ckpt"):
        train(tiny_run_config)
    assert (Path(tiny_run_config.run_dir) / "checkpoints" / "iter_000001.ckpt").exists()


def test_ablation_single_size_matches_plain_run(tiny_run_config, tmp_path):
    rows = ablate_codebook(tiny_run_config, [3], repeats=1)
    assert len(rows) == 1 and rows[0].K == 3 and rows[0].repeats == 1
    assert rows[0].mIoU_std == 0.0

    plain = train(tiny_run_config.with_overrides(**{"model.vq.K": 3}), tmp_path / "plain")
    assert rows[0].mIoU == plain.snapshots[2].mIoU
    assert rows[0].usage == plain.snapshots[2].codebook.usage

    written = read_csv(Path(tiny_run_config.run_dir) / "ablation.csv")
    assert [r["K"] for r in written] == ["3"]
    assert (Path(tiny_run_config.run_dir) / "ablation" / "K3_seed0" / "metrics.json").exists()


def test_ablation_arguments(tiny_run_config):
    with pytest.raises(ConfigurationError):
        ablate_codebook(tiny_run_config, [])
    with pytest.raises(ConfigurationError):
        ablate_codebook(tiny_run_config, [3], repeats=0)


def test_comparison_rows(tiny_run_config):
    rows = compare(tiny_run_config, [0])
    assert len(rows) == 1 and rows[0].seed == 0
    root = Path(tiny_run_config.run_dir)
    assert [r["seed"] for r in read_csv(root / "comparison.csv")] == ["0"]
    assert (root / "comparison" / "vq_seed0" / "losses.csv").exists()
    assert (root / "comparison" / "baseline_seed0" / "losses.csv").exists()
    with pytest.raises(ConfigurationError):
        compare(tiny_run_config, [])


def test_resumed_run_continues_exactly(tiny_run_config, tmp_path):
    full = train(tiny_run_config, tmp_path / "full")
    halfway = tmp_path / "full" / "checkpoints" / "iter_000001.ckpt"
    resumed = train(tiny_run_config, tmp_path / "resumed", resume=halfway)
    assert [p.iteration for p in resumed.loss_curve] == [1]
    assert resumed.loss_curve[0].terms == full.loss_curve[1].terms

    a = load_checkpoint(Path(full.checkpoint))
    b = load_checkpoint(Path(resumed.checkpoint))
    for name, array in a.params.items():
        np.testing.assert_array_equal(b.params[name], array)


def test_resume_from_final_checkpoint_is_rejected(tiny_run_config):
    report = train(tiny_run_config)
    with pytest.raises(ConfigurationError, match="nothing left"):
        train(tiny_run_config, resume=Path(report.checkpoint))


def test_training_split_evaluation_logs_val_gap(tiny_run_config, caplog):
    report = train(tiny_run_config)
    val_miou = report.snapshots[2].mIoU
    caplog.set_level(logging.INFO, logger="vqseg.trainer")
    metrics = evaluate(tiny_run_config, Path(report.checkpoint), split="train")
    assert metrics.split == "train"
    assert f"train mIoU {metrics.mIoU:.4f} vs val mIoU {val_miou:.4f}" in caplog.text
    saved = MetricsReport.model_validate_json((Path(tiny_run_config.run_dir) / "metrics.json").read_text())
    assert saved.split == "train"

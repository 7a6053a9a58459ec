"""
Training, evaluation, the codebook-size ablation and the VQ-vs-baseline comparison.

Everything a run produces lands under cfg.run_dir:
metrics.json, losses.csv, ablation.csv, comparison.csv, checkpoints/, predictions/.
"""

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .data import BatchLoader, FolderDataset, SegSample, load_remap, normalize
from .errors import ConfigurationError, NumericalError
from .inference import sliding_window_infer
from .losses import cross_entropy, total_loss
from .metrics import ConfusionMatrix, accumulate_confusion, iou_report, pixel_accuracy
from .model import SegModel, build_model, predict_from_logits
from .optim import AdamW, poly_lr
from .palette import class_colors, road_scene_names, save_label_png, synthetic_names
from .quantizer import usage_stats
from .schemas import (
    AblationRow,
    CodebookSummary,
    ComparisonRow,
    LossPoint,
    LossTerms,
    MetricsReport,
    RunReport,
)
from .synthetic import SyntheticDataset
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["iteration", "lr", "ce", "vq", "total"]


# -- datasets -----------------------------------------------------------------

def class_names(cfg: RunConfig) -> List[str]:
    C = cfg.model.num_classes
    if cfg.data.class_names:
        if len(cfg.data.class_names) != C:
            raise ConfigurationError(
                f"data.class_names has {len(cfg.data.class_names)} entries for {C} classes"
            )
        return list(cfg.data.class_names)
    if cfg.data.kind == "synthetic":
        return synthetic_names(C)
    names = road_scene_names()
    return names if C == len(names) else [str(c) for c in range(C)]


def build_dataset(cfg: RunConfig, split: str):
    """Random-access dataset for one split ("train" / "val" or a folder split name)."""
    if cfg.data.kind == "synthetic":
        num = cfg.data.num_train if split == cfg.data.train_split else cfg.data.num_val
        return SyntheticDataset(
            num, cfg.model.num_classes, cfg.data.image_size, cfg.data.noise, seed=cfg.seed, split=split
        )
    remap = load_remap(cfg.data.remap_file, cfg.data.ignore_index) if cfg.data.remap_file else None
    return FolderDataset(cfg.data.root, split, remap)


def _iterate(dataset) -> Iterable[SegSample]:
    for i in range(len(dataset)):
        yield dataset.get(i)


# -- evaluation -------------------------------------------------------------

class _CodeRecorder:
    """Callable model wrapper that keeps the code assignments of every window."""

    def __init__(self, model: SegModel, beta: float):
        self.model = model
        self.beta = beta
        self.indices: List[np.ndarray] = []
        self.vq_losses: List[float] = []

    def __call__(self, x: Tensor) -> Tensor:
        out = self.model(x)
        if out.qr is not None:
            self.indices.append(out.qr.indices.reshape(-1))
            self.vq_losses.append(out.qr.vq_loss(self.beta))
        return out.logits


@dataclass
class _ImageResult:
    cm: ConfusionMatrix
    indices: List[np.ndarray] = field(default_factory=list)
    ce: float = 0.0
    vq: float = 0.0


def _evaluate_sample(
    model: SegModel,
    sample: SegSample,
    cfg: RunConfig,
    oracle: bool,
    emit_png: Optional[Path],
    colors: np.ndarray,
) -> _ImageResult:
    C = cfg.model.num_classes
    ignore = cfg.data.ignore_index
    cm = ConfusionMatrix(C)
    if oracle:
        pred = np.where(sample.labels == ignore, 0, sample.labels)
        accumulate_confusion(pred, sample.labels, ignore, cm)
        return _ImageResult(cm=cm)

    image = normalize(sample.image, cfg.data.mean, cfg.data.std).transpose(2, 0, 1)[None]
    H, W = sample.labels.shape
    window = cfg.train.window or (H, W)
    stride = cfg.train.window_stride or window
    recorder = _CodeRecorder(model, cfg.model.vq.beta)
    logits = sliding_window_infer(recorder, image.astype(model.dtype), window, stride)
    pred = predict_from_logits(logits)[0]
    accumulate_confusion(pred, sample.labels, ignore, cm)
    with no_grad():
        ce = cross_entropy(Tensor(logits), sample.labels, ignore).item()
    vq = float(np.mean(recorder.vq_losses)) if recorder.vq_losses else 0.0
    if emit_png is not None:
        save_label_png(pred, emit_png / f"{sample.id}.png", colors, ignore)
    return _ImageResult(cm=cm, indices=recorder.indices, ce=ce, vq=vq)


def evaluate_model(
    model: SegModel,
    dataset,
    cfg: RunConfig,
    split: str,
    iteration: Optional[int] = None,
    emit_png: Optional[Path] = None,
    oracle: bool = False,
) -> MetricsReport:
    """
    Metrics over a whole split in eval mode.

    Images are spread over cfg.data.num_workers threads, each producing its
    own confusion matrix; the matrices are merged at the end.
    """
    was_training = model.training
    model.eval()
    colors = class_colors(class_names(cfg))
    if emit_png is not None:
        emit_png = Path(emit_png)
        emit_png.mkdir(parents=True, exist_ok=True)
    try:
        task = lambda s: _evaluate_sample(model, s, cfg, oracle, emit_png, colors)
        if cfg.data.num_workers > 0:
            with ThreadPoolExecutor(max_workers=cfg.data.num_workers) as pool:
                results = list(pool.map(task, _iterate(dataset)))
        else:
            results = [task(s) for s in _iterate(dataset)]
    finally:
        if was_training:
            model.train()

    cm = ConfusionMatrix(cfg.model.num_classes)
    for r in results:
        cm.merge(r.cm)
    per_class, miou = iou_report(cm, class_names(cfg))

    codebook = None
    if model.use_vq and not oracle:
        indices = np.concatenate([i for r in results for i in r.indices]) if results else np.zeros(0, np.int64)
        stats = usage_stats(indices, cfg.model.vq.K)
        codebook = CodebookSummary(usage=stats.usage_fraction, perplexity=stats.perplexity, histogram=stats.histogram)
        dead = cfg.model.vq.K - int(np.count_nonzero(stats.histogram))
        if dead:
            logger.warning("%d of %d codes unused on %s", dead, cfg.model.vq.K, split)

    loss = None
    if results and not oracle:
        ce = float(np.mean([r.ce for r in results]))
        vq = float(np.mean([r.vq for r in results]))
        loss = LossTerms(ce=ce, vq=vq, total=ce + vq)

    report = MetricsReport(
        mIoU=miou,
        per_class=per_class,
        codebook=codebook,
        loss=loss,
        pixel_accuracy=pixel_accuracy(cm),
        split=split,
        iteration=iteration,
    )
    logger.info(
        "Eval %s%s: mIoU %.4f, pixel acc %.4f%s",
        split,
        f" @ {iteration}" if iteration is not None else "",
        report.mIoU,
        report.pixel_accuracy,
        f", usage {codebook.usage:.3f}, perplexity {codebook.perplexity:.2f}" if codebook else "",
    )
    return report


def write_metrics(report: MetricsReport, run_dir: Path) -> Path:
    path = Path(run_dir) / "metrics.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2))
    return path


# -- training -----------------------------------------------------------------

def _checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return run_dir / "checkpoints" / f"iter_{iteration:06d}.ckpt"


def train_step(
    model: SegModel,
    optimizer: AdamW,
    images: np.ndarray,
    labels: np.ndarray,
    lr: float,
    cfg: RunConfig,
) -> LossTerms:
    """forward -> loss -> backward -> AdamW update."""
    out = model(Tensor(images.astype(model.dtype)))
    ce = cross_entropy(out.logits, labels, cfg.data.ignore_index)
    terms = total_loss(ce, out.qr, cfg.model.vq.beta)
    loss = ce + out.vq_loss
    optimizer.zero_grad()
    loss.backward()
    optimizer.step(lr)
    optimizer.zero_grad()
    return terms


def train(cfg: RunConfig, run_dir: Optional[Path] = None, resume: Optional[Path] = None) -> RunReport:
    """
    Train from scratch, or continue from a checkpoint written by an earlier
    run of the same config (weights, batch-norm buffers and AdamW state).

    A non-finite loss or gradient aborts the run with NumericalError; the
    checkpoints written so far are left in place.
    """
    run_dir = Path(run_dir or cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    logger.info("Training %s for %d iterations in %s (vq=%s)", cfg.name, cfg.train.max_iters, run_dir, cfg.model.use_vq)

    model = build_model(cfg.model, seed=cfg.seed)
    train_set = build_dataset(cfg, cfg.data.train_split)
    val_set = build_dataset(cfg, cfg.data.val_split)
    loader = BatchLoader(
        train_set,
        cfg.train.batch_size,
        cfg.augment,
        cfg.data.mean,
        cfg.data.std,
        seed=cfg.seed,
        num_workers=cfg.data.num_workers,
        ignore_index=cfg.data.ignore_index,
    )
    optimizer = AdamW(model.param_store(), cfg.train)
    report = RunReport(run_dir=str(run_dir))
    last_good: Optional[Path] = None
    first = 0
    if resume is not None:
        ckpt = load_checkpoint(Path(resume))
        restore(model, ckpt, cfg)
        optimizer.load_state_arrays(ckpt.optimizer)
        first = ckpt.iteration
        if first >= cfg.train.max_iters:
            raise ConfigurationError(f"checkpoint is at iteration {first}, nothing left of {cfg.train.max_iters}")
        last_good = Path(resume)
        logger.info("Resuming from %s at iteration %d", resume, first)

    losses_path = run_dir / "losses.csv"
    append = resume is not None and losses_path.exists()
    with open(losses_path, "a" if append else "w", newline="") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(LOSS_COLUMNS)
        model.train()
        for it, images, labels in loader.batches(first, cfg.train.max_iters):
            lr = poly_lr(it, cfg.train)
            try:
                terms = train_step(model, optimizer, images, labels, lr, cfg)
            except NumericalError as e:
                logger.error("Aborting at iteration %d: %s; last good checkpoint: %s", it, e, last_good)
                raise NumericalError(f"iteration {it}: {e} (last good checkpoint: {last_good})") from e
            report.loss_curve.append(LossPoint(iteration=it, lr=lr, terms=terms))
            writer.writerow([it, lr, terms.ce, terms.vq, terms.total])

            done = it + 1
            if done % cfg.train.log_interval == 0 or done == 1:
                f.flush()
                logger.info(
                    "iter %d/%d lr %.3g ce %.4f vq %.4f total %.4f",
                    done, cfg.train.max_iters, lr, terms.ce, terms.vq, terms.total,
                )
            if done % cfg.train.eval_interval == 0 and done != cfg.train.max_iters:
                report.snapshots[done] = evaluate_model(model, val_set, cfg, cfg.data.val_split, iteration=done)
            if done % cfg.train.checkpoint_interval == 0 and done != cfg.train.max_iters:
                last_good = save_checkpoint(_checkpoint_path(run_dir, done), model, cfg, done, optimizer.state_arrays())

    final = cfg.train.max_iters
    report.snapshots[final] = evaluate_model(model, val_set, cfg, cfg.data.val_split, iteration=final)
    write_metrics(report.snapshots[final], run_dir)
    report.checkpoint = str(save_checkpoint(_checkpoint_path(run_dir, final), model, cfg, final, optimizer.state_arrays()))
    report.wall_clock = time.perf_counter() - start
    logger.info("Finished %s in %.1fs: val mIoU %.4f", cfg.name, report.wall_clock, report.snapshots[final].mIoU)
    return report


def load_trained(cfg: RunConfig, checkpoint: Path) -> SegModel:
    """Model built from cfg with the checkpoint's weights; raises on config mismatch."""
    ckpt = load_checkpoint(checkpoint)
    model = build_model(cfg.model, seed=cfg.seed)
    restore(model, ckpt, cfg)
    model.eval()
    return model


def evaluate(
    cfg: RunConfig,
    checkpoint: Path,
    emit_png: Optional[Path] = None,
    split: Optional[str] = None,
    oracle: bool = False,
) -> MetricsReport:
    """
    Evaluate a checkpoint on a split (default: the validation split) and
    write metrics.json to the run directory. oracle=True scores the ground
    truth against itself.
    """
    split = split or cfg.data.val_split
    model = load_trained(cfg, checkpoint)
    dataset = build_dataset(cfg, split)
    report = evaluate_model(model, dataset, cfg, split, emit_png=emit_png, oracle=oracle)
    if split == cfg.data.train_split and not oracle:
        _compare_with_val(report, Path(cfg.run_dir) / "metrics.json", cfg.data.val_split)
    write_metrics(report, Path(cfg.run_dir))
    return report


def _compare_with_val(report: MetricsReport, path: Path, val_split: str) -> None:
    """Log training-split mIoU next to the last validation result in the run directory."""
    if not path.exists():
        logger.info("No %s metrics in %s to compare the %s mIoU with", val_split, path.parent, report.split)
        return
    try:
        previous = MetricsReport.model_validate_json(path.read_text())
    except ValueError as e:
        logger.warning("Ignoring unreadable %s: %s", path, e)
        return
    if previous.split != val_split:
        return
    logger.info(
        "%s mIoU %.4f vs %s mIoU %.4f (gap %+.4f)",
        report.split, report.mIoU, val_split, previous.mIoU, report.mIoU - previous.mIoU,
    )


# -- experiments --------------------------------------------------------------

def _final(report: RunReport) -> MetricsReport:
    return report.snapshots[max(report.snapshots)]


def ablate_codebook(cfg: RunConfig, sizes: Sequence[int], repeats: int = 3) -> List[AblationRow]:
    """
    Train and evaluate once per (codebook size, repeat); repeat r uses seed
    cfg.seed + r for every size. Writes ablation.csv.
    """
    if not sizes:
        raise ConfigurationError("ablation needs at least one codebook size")
    if repeats < 1:
        raise ConfigurationError(f"repeats must be >= 1, got {repeats}")
    root = Path(cfg.run_dir)
    rows: List[AblationRow] = []
    for K in sizes:
        mious, usages, perplexities = [], [], []
        for r in range(repeats):
            seed = cfg.seed + r
            run_cfg = cfg.with_overrides(**{"model.vq.K": int(K), "model.use_vq": True}).seeded(seed)
            run_dir = root / "ablation" / f"K{K}_seed{seed}"
            metrics = _final(train(run_cfg.with_overrides(run_dir=str(run_dir)), run_dir))
            mious.append(metrics.mIoU)
            usages.append(metrics.codebook.usage)
            perplexities.append(metrics.codebook.perplexity)
        rows.append(
            AblationRow(
                K=int(K),
                mIoU=float(np.mean(mious)),
                mIoU_std=float(np.std(mious)),
                usage=float(np.mean(usages)),
                perplexity=float(np.mean(perplexities)),
                repeats=repeats,
            )
        )
        logger.info("K=%d: mIoU %.4f +- %.4f, usage %.3f", K, rows[-1].mIoU, rows[-1].mIoU_std, rows[-1].usage)

    spread = max(r.mIoU for r in rows) - min(r.mIoU for r in rows)
    noise = float(np.mean([r.mIoU_std for r in rows]))
    logger.info("mIoU spread across sizes %.4f vs mean run-to-run std %.4f", spread, noise)

    root.mkdir(parents=True, exist_ok=True)
    with open(root / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["K", "mIoU", "mIoU_std", "usage", "perplexity", "repeats"])
        for row in rows:
            writer.writerow([row.K, row.mIoU, row.mIoU_std, row.usage, row.perplexity, row.repeats])
    return rows


def compare(cfg: RunConfig, seeds: Sequence[int]) -> List[ComparisonRow]:
    """Quantised model vs the --no-vq baseline, seed-matched. Writes comparison.csv."""
    if not seeds:
        raise ConfigurationError("comparison needs at least one seed")
    root = Path(cfg.run_dir)
    rows: List[ComparisonRow] = []
    for seed in seeds:
        results: List[Tuple[bool, MetricsReport]] = []
        for use_vq in (True, False):
            run_dir = root / "comparison" / f"{'vq' if use_vq else 'baseline'}_seed{seed}"
            run_cfg = cfg.with_overrides(**{"model.use_vq": use_vq, "run_dir": str(run_dir)}).seeded(int(seed))
            results.append((use_vq, _final(train(run_cfg, run_dir))))
        vq_metrics, base_metrics = results[0][1], results[1][1]
        rows.append(
            ComparisonRow(
                seed=int(seed),
                vq_mIoU=vq_metrics.mIoU,
                baseline_mIoU=base_metrics.mIoU,
                usage=vq_metrics.codebook.usage,
            )
        )
        logger.info("seed %d: vq %.4f vs baseline %.4f", seed, vq_metrics.mIoU, base_metrics.mIoU)

    root.mkdir(parents=True, exist_ok=True)
    with open(root / "comparison.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "vq_mIoU", "baseline_mIoU", "usage"])
        for row in rows:
            writer.writerow([row.seed, row.vq_mIoU, row.baseline_mIoU, row.usage])
    return rows

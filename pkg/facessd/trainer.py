"""
Trainer: SGD with momentum and weight decay over minibatches from a BatchLoader.

The four-step procedure is
  1. initialise (random, or subsampled from a wider weights file)
  2. finetune trunk + detection with the analysis branch frozen
  3. copy detection G4-G10 into the analysis branch
  4. finetune analysis with trunk + detection frozen
and every step writes a weights file.
"""
import csv
import logging
import math
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .anchors import DefaultBoxGrid, match
from .data import AnnotatedImage, compute_stats
from .errors import ConfigError, NonFiniteError, ShapeError
from .loader import Batch, BatchLoader
from .losses import (
    analysis_loss, batch_task_loss, face_loss_terms, flatten_face_maps, flatten_task_maps, recycle_hard_samples
)
from .model import FaceSSDModel, build_model, initialize_from, load_weights, save_weights
from .models import AugmentConfig, DatasetStats, Phase, RunConfig, TrainConfig, TrainLogRow
from .tensor import Tensor, backward, get_default_dtype, set_default_dtype

logger = logging.getLogger("facessd.trainer")

STEP_FILES = {
    2: "step2_detection.fssd",
    3: "step3_copied.fssd",
    4: "step4_analysis.fssd",
}
LOG_COLUMNS = list(TrainLogRow.model_fields)


class SampleLoss(NamedTuple):
    total: Tensor
    parts: Dict[str, float]
    task_losses: Sequence[Tensor] = ()


# -- optimiser --------------------------------------------------------------------------

def sgd_step(
    params: Sequence[np.ndarray],
    grads: Sequence[Optional[np.ndarray]],
    velocities: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0005
) -> None:
    """
    In place: v <- momentum * v + grad + weight_decay * p, then p <- p - lr * v.

    A missing gradient counts as zero.
    """
    if not (len(params) == len(grads) == len(velocities)):
        raise ShapeError(f"{len(params)} params, {len(grads)} grads, {len(velocities)} velocities")
    for p, g, v in zip(params, grads, velocities):
        if p.shape != v.shape or (g is not None and g.shape != p.shape):
            raise ShapeError(f"sgd shapes disagree: param {p.shape}, grad {None if g is None else g.shape}, velocity {v.shape}")
        v *= momentum
        if g is not None:
            v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v


class SGD:
    """Momentum SGD over named tensors; velocities are keyed by parameter name."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0005):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities: Dict[str, np.ndarray] = {}

    def step(self, named_params: Sequence[Tuple[str, Tensor]], lr: float) -> None:
        params, grads, velocities = [], [], []
        for name, param in named_params:
            if not param.requires_grad:
                continue
            velocity = self.velocities.get(name)
            if velocity is None or velocity.shape != param.shape or velocity.dtype != param.data.dtype:
                velocity = self.velocities[name] = np.zeros_like(param.data)
            params.append(param.data)
            grads.append(param.grad)
            velocities.append(velocity)
        sgd_step(params, grads, velocities, lr, self.momentum, self.weight_decay)


# -- training log ----------------------------------------------------------------------------

def write_train_log(rows: Sequence[TrainLogRow], path: Union[str, Path]) -> Path:
    """CSV of training rows; the timestamp lives only in the leading comment line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# facessd training log {datetime.now().isoformat(timespec='seconds')}\n")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            record = row.model_dump()
            record["phase"] = row.phase.value
            writer.writerow(record)
    return path


def read_train_log(path: Union[str, Path]) -> List[TrainLogRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return [TrainLogRow.model_validate(record) for record in csv.DictReader(lines)]


# -- one phase --------------------------------------------------------------------------------

def configure_phase(model: FaceSSDModel, phase: Phase) -> None:
    """Freeze state of a finetuning phase."""
    if phase == Phase.DETECTION:
        model.set_frozen("trunk", False)
        model.set_frozen("detection", False)
        model.set_frozen("analysis", True)
    else:
        model.set_frozen("trunk", True)
        model.set_frozen("detection", True)
        model.set_frozen("analysis", False)


class Trainer:
    """
    Runs one finetuning phase.

    The trainer thread owns the model; augmentation happens on the loader's
    worker threads.
    """

    def __init__(
        self,
        model: FaceSSDModel,
        dataset: Sequence[AnnotatedImage],
        cfg: TrainConfig,
        augment_cfg: Optional[AugmentConfig] = None,
        stats: Optional[DatasetStats] = None,
        grid: Optional[DefaultBoxGrid] = None,
        checkpoint_dir: Optional[Union[str, Path]] = None,
        log_every: int = 50
    ):
        if cfg.phase == Phase.ANALYSIS and cfg.task_weights is not None:
            if len(cfg.task_weights.w) != len(model.head.tasks):
                raise ConfigError(
                    f"{len(cfg.task_weights.w)} task weights for {len(model.head.tasks)} tasks"
                )
        self.model = model
        self.dataset = list(dataset)
        self.cfg = cfg
        self.augment_cfg = augment_cfg
        self.stats = stats or compute_stats(self.dataset)
        self.grid = grid or DefaultBoxGrid()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
        self.log_every = max(1, log_every)
        self.optimizer = SGD(cfg.momentum, cfg.weight_decay)
        self.branch = "detection" if cfg.phase == Phase.DETECTION else "analysis"

        # Statistics
        self.iterations_done = 0
        self.checkpoints: List[Path] = []
        self.rows: List[TrainLogRow] = []
        self.start_time = None

    def sample_loss(self, loaded) -> SampleLoss:
        """Loss of one augmented sample for this phase, plus its logged parts."""
        assignment = match(loaded.sample.boxes, self.grid, self.cfg.iou_threshold)
        volumes = self.model.forward(Tensor(loaded.image), branches=(self.branch,))
        if self.cfg.phase == Phase.DETECTION:
            faces, offsets = flatten_face_maps(volumes)
            terms = face_loss_terms(assignment, faces, offsets, self.cfg.loss)
            parts = {"cls_loss": terms.cls, "reg_loss": terms.reg, "num_positive": terms.num_positive}
            return SampleLoss(terms.total, parts)
        terms = analysis_loss(
            assignment, loaded.sample.faces, flatten_task_maps(volumes), self.model.head,
            self.cfg.task_weights, self.cfg.loss.eps
        )
        return SampleLoss(terms.total, {"num_positive": terms.num_positive}, terms.task_losses)

    def _check_finite(self, value: float, iteration: int, lr: float, sample: str) -> None:
        if not math.isfinite(value):
            raise NonFiniteError(
                f"non-finite loss at iteration {iteration} (phase={self.cfg.phase.value}, "
                f"sample={sample}, lr={lr})"
            )

    def train_step(self, iteration: int, batch: Batch) -> Tuple[TrainLogRow, List[float]]:
        """
        Forward/backward the batch, one optimiser step; returns the log row and
        per-sample losses.

        The face loss is linear in the samples, so each sample is backpropagated
        as soon as it is computed. The analysis objective is a norm over the
        batch means of the task losses and is backpropagated once per batch.
        """
        lr = self.cfg.lr_at(iteration)
        self.model.zero_grad()
        scale = 1.0 / len(batch)
        losses = []
        task_losses = []
        totals = {"cls_loss": 0.0, "reg_loss": 0.0, "task_loss": 0.0, "num_positive": 0}
        for loaded in batch.samples:
            result = self.sample_loss(loaded)
            value = result.total.item()
            self._check_finite(value, iteration, lr, str(loaded.index))
            if self.cfg.phase == Phase.DETECTION:
                backward(result.total * scale)
            else:
                task_losses.append(result.task_losses)
            losses.append(value)
            for key, part in result.parts.items():
                totals[key] += part * scale if key != "num_positive" else part

        if self.cfg.phase == Phase.ANALYSIS:
            batch_loss = batch_task_loss(task_losses, len(batch), self.cfg.task_weights)
            self._check_finite(batch_loss.item(), iteration, lr, "batch")
            backward(batch_loss)
            totals["task_loss"] = batch_loss.item()
        self.optimizer.step(self.model.trainable_parameters(), lr)

        row = TrainLogRow(
            iteration=iteration,
            phase=self.cfg.phase,
            lr=lr,
            loss=float(np.mean(losses)),
            cls_loss=totals["cls_loss"],
            reg_loss=totals["reg_loss"],
            task_loss=totals["task_loss"],
            num_positive=int(totals["num_positive"]),
            recycled=batch.num_recycled,
        )
        return row, losses

    def _checkpoint(self, iteration: int) -> None:
        if self.checkpoint_dir is None:
            return
        path = self.checkpoint_dir / f"{self.cfg.phase.value}_iter{iteration:06d}.fssd"
        save_weights(self.model, path, self.stats)
        self.checkpoints.append(path)
        logger.info(f"CHECKPOINT | phase={self.cfg.phase.value} | iter={iteration} | path={path}")

    def train(self) -> List[TrainLogRow]:
        """Run every iteration of the schedule."""
        cfg = self.cfg
        configure_phase(self.model, cfg.phase)
        previous_dtype = get_default_dtype()
        dtype = np.dtype(cfg.precision.value)
        set_default_dtype(dtype)
        self.model.astype(dtype)

        boundaries = set(cfg.stage_boundaries)
        loader = BatchLoader(
            self.dataset, self.augment_cfg, self.stats, cfg.batch_size, cfg.num_workers, cfg.seed
        )
        self.start_time = time.time()
        logger.info(
            f"PHASE START | phase={cfg.phase.value} | iterations={cfg.total_iterations} | "
            f"batch={cfg.batch_size} | samples={len(self.dataset)}"
        )
        recycled: List[int] = []
        try:
            loader.start()
            for iteration in range(cfg.total_iterations):
                batch = loader.next_batch(recycled)
                row, losses = self.train_step(iteration, batch)
                self.rows.append(row)
                self.iterations_done = iteration + 1

                recycled = []
                if cfg.hnm_recycling:
                    recycled = [batch.indices[i] for i in recycle_hard_samples(losses, cfg.hnm_fraction)]

                if iteration % self.log_every == 0 or iteration + 1 == cfg.total_iterations:
                    logger.info(
                        f"ITERATION | phase={cfg.phase.value} | iter={iteration} | lr={row.lr:g} | "
                        f"loss={row.loss:.4f} | pos={row.num_positive}"
                    )
                done = iteration + 1
                if done in boundaries or done % cfg.checkpoint_every == 0:
                    self._checkpoint(done)
        finally:
            loader.stop()
            set_default_dtype(previous_dtype)

        logger.info(
            f"PHASE DONE | phase={cfg.phase.value} | final_loss={self.rows[-1].loss:.4f} | "
            f"seconds={time.time() - self.start_time:.1f}"
        )
        return self.rows

    def get_stats(self) -> dict:
        elapsed = time.time() - self.start_time if self.start_time else 0
        return {
            "phase": self.cfg.phase.value,
            "iterations_done": self.iterations_done,
            "total_iterations": self.cfg.total_iterations,
            "last_loss": self.rows[-1].loss if self.rows else None,
            "checkpoints": [str(p) for p in self.checkpoints],
            "iterations_per_second": self.iterations_done / elapsed if elapsed > 0 else 0,
        }


def train_phase(
    model: FaceSSDModel,
    dataset: Sequence[AnnotatedImage],
    cfg: TrainConfig,
    augment_cfg: Optional[AugmentConfig] = None,
    stats: Optional[DatasetStats] = None,
    out_dir: Optional[Union[str, Path]] = None
) -> List[TrainLogRow]:
    """Train one phase in place; with ``out_dir`` also writes checkpoints and ``<phase>_log.csv``."""
    out_dir = Path(out_dir) if out_dir is not None else None
    trainer = Trainer(
        model, dataset, cfg, augment_cfg, stats,
        checkpoint_dir=out_dir / "checkpoints" if out_dir is not None else None,
    )
    rows = trainer.train()
    if out_dir is not None:
        write_train_log(rows, out_dir / f"{cfg.phase.value}_log.csv")
    return rows


# -- four-step procedure ------------------------------------------------------------------------

def run_four_step_pipeline(
    cfg: RunConfig,
    dataset: Sequence[AnnotatedImage],
    out_dir: Union[str, Path],
    init_weights: Optional[Union[str, Path]] = None,
    stats: Optional[DatasetStats] = None
) -> Tuple[FaceSSDModel, Dict[int, Path]]:
    """
    Steps 1-4 on ``dataset``; returns the final model and the weights file of
    each of steps 2, 3 and 4. With ``cfg.copy_detection_to_analysis`` off, step 3
    leaves the analysis branch at its initial values.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = stats or compute_stats(dataset)

    # step 1
    model = build_model(cfg.head, cfg.channel_scale, cfg.seed)
    if init_weights is not None:
        _, source = load_weights(init_weights)
        initialize_from(model, source)
    logger.info(f"STEP 1 | init={'file' if init_weights else 'random'} | seed={cfg.seed}")

    written: Dict[int, Path] = {}

    # step 2
    train_phase(model, dataset, cfg.detection, cfg.augment, stats, out_dir)
    written[2] = save_weights(model, out_dir / STEP_FILES[2], stats)
    logger.info(f"STEP 2 | detection finetuned | weights={written[2]}")

    # step 3
    if cfg.copy_detection_to_analysis:
        model.copy_detection_to_analysis()
    else:
        logger.info("STEP 3 | copy skipped, analysis branch keeps its initial values")
    written[3] = save_weights(model, out_dir / STEP_FILES[3], stats)

    # step 4
    train_phase(model, dataset, cfg.analysis, cfg.augment, stats, out_dir)
    written[4] = save_weights(model, out_dir / STEP_FILES[4], stats)
    logger.info(f"STEP 4 | analysis finetuned | weights={written[4]}")
    return model, written

"""Training engine for the three stages: skeleton pretraining, silhouette pretraining, global training.

Semantics:
- Each iteration samples one P x K x T batch, records a tape for the forward
  pass, runs backward and applies one SGD step.
- Learning rates follow per-group multi-step schedules decided up front in a
  ``RunPlan``; iteration 0 uses the base rate.
- Seeds: parameters use ``config.seed``; batch sampling and dropout each get
  their own derived stream, so a rerun with the same config is bit-identical.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from bifusion_gait.autodiff import Tape, backward
from bifusion_gait.config import RunConfig
from bifusion_gait.errors import ConfigurationError, ContractError, SamplingError
from bifusion_gait.losses import LossBreakdown, global_loss, msgg_pretrain_loss, part_averaged_triplet
from bifusion_gait.optim import SGD, MultiStepSchedule
from bifusion_gait.pipeline import ModelBundle, build_model, initialize_from_pretrained
from bifusion_gait.rng import Rng, derive_seed
from bifusion_gait.sampling import Batch, SequenceSource, sample_batch

LOGGER = logging.getLogger("bifusion_gait.training")

Stage = Literal["pretrain_msgg", "pretrain_silhouette", "global"]
STAGES: tuple[Stage, ...] = ("pretrain_msgg", "pretrain_silhouette", "global")
TELEMETRY_COLUMNS = (
    "iteration",
    "loss_total",
    "loss_sil_tp",
    "loss_ske_tp",
    "loss_ske_ce",
    "lr_group0",
    "lr_group1",
)
GROUP_DEFAULT = "default"
GROUP_PRETRAINED = "pretrained"
GROUP_HEAD = "head"
SAMPLER_STREAM = 1
DROPOUT_STREAM = 2
LOG_EVERY = 50


@dataclass(frozen=True)
class RunOptions:
    """Run options for planning and execution of one training stage."""

    iterations_override: int | None = None
    telemetry_path: Path | None = None
    fixed_batch: bool = False


@dataclass(frozen=True)
class PlannedStep:
    iteration: int
    lrs: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class RunPlan:
    """Normalized stage settings and the planned per-iteration learning rates."""

    stage: Stage
    groups: tuple[str, ...]
    schedules: dict[str, MultiStepSchedule]
    steps: tuple[PlannedStep, ...]

    @property
    def iterations(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class TelemetryRow:
    iteration: int
    loss_total: float
    loss_sil_tp: float
    loss_ske_tp: float
    loss_ske_ce: float
    lr_group0: float
    lr_group1: float | None

    def as_csv(self) -> tuple[str, ...]:
        values = (self.loss_total, self.loss_sil_tp, self.loss_ske_tp, self.loss_ske_ce, self.lr_group0)
        group1 = "" if self.lr_group1 is None else repr(self.lr_group1)
        return (str(self.iteration), *(repr(float(v)) for v in values), group1)


@dataclass(frozen=True)
class TrainingResult:
    """Result of one training stage."""

    bundle: ModelBundle
    iterations_completed: int
    cancelled: bool
    history: tuple[TelemetryRow, ...]


def normalize_iterations(config: RunConfig, stage: Stage, options: RunOptions | None = None) -> int:
    """Resolve iteration count from config + options and enforce a non-negative value."""
    if options is not None and options.iterations_override is not None:
        iterations = int(options.iterations_override)
    elif stage == "global":
        iterations = config.global_iterations
    else:
        iterations = config.pretrain_iterations
    if iterations < 0:
        raise ConfigurationError(f"iterations must be >= 0, got {iterations}.")
    return iterations


def stage_schedules(config: RunConfig, stage: Stage) -> dict[str, MultiStepSchedule]:
    if stage == "global":
        milestones = tuple(config.global_milestones)
        return {
            GROUP_PRETRAINED: MultiStepSchedule(config.global_pretrained_lr, milestones),
            GROUP_HEAD: MultiStepSchedule(config.global_lr, milestones),
        }
    return {GROUP_DEFAULT: MultiStepSchedule(config.pretrain_lr, tuple(config.pretrain_milestones))}


def plan_schedule(config: RunConfig, stage: Stage, options: RunOptions | None = None) -> RunPlan:
    """Plan the learning rate of every group for every iteration of ``stage``."""
    if stage not in STAGES:
        raise ConfigurationError(f"unknown training stage {stage!r}.")
    schedules = stage_schedules(config, stage)
    groups = tuple(schedules)
    steps = tuple(
        PlannedStep(iteration, tuple((group, schedules[group].lr_at(iteration)) for group in groups))
        for iteration in range(normalize_iterations(config, stage, options))
    )
    return RunPlan(stage=stage, groups=groups, schedules=schedules, steps=steps)


def assign_groups(bundle: ModelBundle, stage: Stage) -> None:
    """Global training: pretrained modules in one group, compact block, fusion and heads in the other."""
    if stage != "global":
        return
    store = bundle.store
    store.set_group("msgg.", GROUP_PRETRAINED)
    store.set_group("sil.", GROUP_PRETRAINED)
    for prefix in ("msgg.head.", "compact.", "fusion."):
        store.set_group(prefix, GROUP_HEAD)


def branch_loss_weights(config: RunConfig, branches: int) -> tuple[float, ...]:
    weights = tuple(config.loss_weights)
    return weights[len(weights) - branches :]


def _stage_loss(bundle: ModelBundle, config: RunConfig, stage: Stage, batch: Batch, dropout_rng: Rng) -> tuple[LossBreakdown, float, float, float]:
    labels = batch.labels
    if stage == "pretrain_msgg":
        assert bundle.msgg is not None
        out = bundle.msgg.forward(batch.keypoints, "train")
        loss = msgg_pretrain_loss(
            out.embeddings,
            out.logits,
            labels,
            margin=config.margin,
            weights=branch_loss_weights(config, len(out.embeddings)),
        )
        ske_tp = loss.total.item() - loss.components["ce"]
        return loss, 0.0, ske_tp, loss.components["ce"]
    if stage == "pretrain_silhouette":
        assert bundle.silhouette is not None
        parts = bundle.silhouette.forward(batch.silhouettes, "train")
        sil_tp = part_averaged_triplet(parts, labels, config.margin)
        return LossBreakdown(total=sil_tp, components={"sil_tp": sil_tp.item()}), sil_tp.item(), 0.0, 0.0
    assert bundle.bifusion is not None
    out = bundle.bifusion.forward(batch.keypoints, batch.silhouettes, "train", rng=dropout_rng)
    features = out.fused if config.sil_tp_target == "fused" else out.parts
    loss = global_loss(features, out.skeleton.e_body, out.skeleton.logits, labels, margin=config.margin)
    parts = loss.components
    return loss, parts["sil_tp"], parts["ske_tp"], parts["ske_ce"]


def run_training(
    bundle: ModelBundle,
    source: SequenceSource,
    config: RunConfig,
    stage: Stage,
    *,
    identities: Sequence[int] | None = None,
    options: RunOptions | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> TrainingResult:
    """Run the planned iterations of ``stage`` on ``bundle`` with cooperative cancellation."""
    options = options or RunOptions()
    plan = plan_schedule(config, stage, options)
    assign_groups(bundle, stage)
    optimizer = SGD(bundle.store, plan.schedules, momentum=config.momentum, weight_decay=config.weight_decay)
    sampler_rng = Rng(derive_seed(config.seed, SAMPLER_STREAM))
    dropout_rng = Rng(derive_seed(config.seed, DROPOUT_STREAM))
    spec = config.batch_spec()
    fixed = sample_batch(source, spec, sampler_rng, identities=identities, normalize=config.normalize) if options.fixed_batch else None

    history: list[TelemetryRow] = []
    handle = None
    writer = None
    if options.telemetry_path is not None:
        options.telemetry_path.parent.mkdir(parents=True, exist_ok=True)
        handle = options.telemetry_path.open("w", newline="", encoding="utf-8")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TELEMETRY_COLUMNS)
    LOGGER.info("training_started stage=%s iterations=%d groups=%s batch=%d", stage, plan.iterations, ",".join(plan.groups), spec.size)
    try:
        for step in plan.steps:
            if should_stop is not None and should_stop():
                LOGGER.info("training_cancelled stage=%s iteration=%d", stage, step.iteration)
                return TrainingResult(bundle, len(history), True, tuple(history))
            batch = fixed if fixed is not None else sample_batch(
                source, spec, sampler_rng, identities=identities, normalize=config.normalize
            )
            bundle.store.zero_grad()
            with Tape() as tape:
                loss, sil_tp, ske_tp, ske_ce = _stage_loss(bundle, config, stage, batch, dropout_rng)
            value = loss.value()
            if not np.isfinite(value):
                raise ContractError(f"loss became non-finite at iteration {step.iteration}.")
            backward(loss.total, tape)
            lrs = optimizer.step()
            row = TelemetryRow(
                iteration=step.iteration,
                loss_total=value,
                loss_sil_tp=sil_tp,
                loss_ske_tp=ske_tp,
                loss_ske_ce=ske_ce,
                lr_group0=lrs[plan.groups[0]],
                lr_group1=lrs[plan.groups[1]] if len(plan.groups) > 1 else None,
            )
            history.append(row)
            if writer is not None:
                writer.writerow(row.as_csv())
            if step.iteration % LOG_EVERY == 0:
                LOGGER.info("train_iteration stage=%s iteration=%d loss_total=%.6f lr=%s", stage, step.iteration, value, lrs)
    finally:
        if handle is not None:
            handle.close()
    LOGGER.info("training_finished stage=%s iterations=%d", stage, len(history))
    return TrainingResult(bundle, len(history), False, tuple(history))


def training_identities(source: SequenceSource, config: RunConfig) -> tuple[int, ...]:
    available = source.identities()
    chosen = tuple(identity for identity in available if identity < config.train_ids)
    if len(chosen) < config.batch_p:
        raise SamplingError(f"training split has {len(chosen)} identities, batches need {config.batch_p}.")
    return chosen


def train_msgg_pretrain(
    source: SequenceSource,
    config: RunConfig,
    *,
    options: RunOptions | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> TrainingResult:
    identities = training_identities(source, config)
    bundle = build_model("msgg", config, len(identities))
    return run_training(bundle, source, config, "pretrain_msgg", identities=identities, options=options, should_stop=should_stop)


def train_silhouette_pretrain(
    source: SequenceSource,
    config: RunConfig,
    *,
    options: RunOptions | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> TrainingResult:
    identities = training_identities(source, config)
    bundle = build_model("silhouette", config, len(identities))
    return run_training(
        bundle, source, config, "pretrain_silhouette", identities=identities, options=options, should_stop=should_stop
    )


def train_global(
    source: SequenceSource,
    config: RunConfig,
    *,
    msgg_checkpoint: str | Path | None = None,
    silhouette_checkpoint: str | Path | None = None,
    options: RunOptions | None = None,
    should_stop: Callable[[], bool] | None = None,
) -> TrainingResult:
    """Global training from pretrained checkpoints (both or neither)."""
    identities = training_identities(source, config)
    bundle = build_model("bifusion", config, len(identities))
    if (msgg_checkpoint is None) != (silhouette_checkpoint is None):
        raise ConfigurationError("global training needs both pretrained checkpoints or neither.")
    if msgg_checkpoint is not None and silhouette_checkpoint is not None:
        initialize_from_pretrained(bundle, msgg_checkpoint, silhouette_checkpoint, config)
    return run_training(bundle, source, config, "global", identities=identities, options=options, should_stop=should_stop)

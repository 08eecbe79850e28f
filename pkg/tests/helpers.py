"""Tiny builders shared by the test modules."""

from __future__ import annotations

from dataclasses import replace
import os

import pytest

from bifusion_gait.config import RunConfig
from bifusion_gait.dataset import InMemoryDataset
from bifusion_gait.rng import derive_seed
from bifusion_gait.synthetic import GenerationPlan, generate_identity, synthesize_sequence

slow = pytest.mark.skipif(os.environ.get("BIFUSION_RUN_SLOW") != "1", reason="set BIFUSION_RUN_SLOW=1 to run")


def tiny_config(**overrides: object) -> RunConfig:
    """Small model and batch so a training step runs in well under a second."""
    base = RunConfig(
        channels=(4, 4, 4),
        temporal_kernel=3,
        silhouette_channels=(2, 4, 4),
        num_parts=4,
        compact_dim=4,
        fused_dim=6,
        batch_p=2,
        batch_k=2,
        batch_t=12,
        train_ids=2,
        pretrain_iterations=3,
        pretrain_milestones=(2,),
        global_iterations=3,
        global_milestones=(2,),
    )
    return replace(base, **overrides)  # type: ignore[arg-type]


def tiny_plan(identities: int = 3, *, seed: int = 5, frames: int = 12, views: tuple[int, ...] = (0, 90)) -> GenerationPlan:
    return GenerationPlan(
        identities=identities,
        seed=seed,
        frames=frames,
        views=views,
        sequences={"NM": (1, 2, 5), "BG": (1,), "CL": (1,)},
    )


def tiny_dataset(identities: int = 3, *, seed: int = 5, frames: int = 12, views: tuple[int, ...] = (0, 90)) -> InMemoryDataset:
    plan = tiny_plan(identities, seed=seed, frames=frames, views=views)
    people = {index: generate_identity(derive_seed(plan.seed, index)) for index in range(plan.identities)}
    return InMemoryDataset([synthesize_sequence(plan, key, people[key.identity]) for key in plan.keys()])

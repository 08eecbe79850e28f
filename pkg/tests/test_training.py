"""Training stage planning, execution, telemetry and cancellation."""

from __future__ import annotations

import csv

import numpy as np
import pytest

from bifusion_gait.checkpoint import checkpoint_digest
from bifusion_gait.errors import ConfigurationError, SamplingError
from bifusion_gait.pipeline import build_model, save_model
from bifusion_gait.training import (
    TELEMETRY_COLUMNS,
    RunOptions,
    assign_groups,
    branch_loss_weights,
    plan_schedule,
    run_training,
    train_global,
    train_msgg_pretrain,
    train_silhouette_pretrain,
    training_identities,
)
from helpers import tiny_config, tiny_dataset


def test_global_plan_has_two_groups_with_their_own_rates() -> None:
    plan = plan_schedule(tiny_config(), "global")

    assert plan.groups == ("pretrained", "head")
    assert plan.iterations == 3
    rates = [dict(step.lrs) for step in plan.steps]
    assert [r["head"] for r in rates] == pytest.approx([0.1, 0.1, 0.01])
    assert [r["pretrained"] for r in rates] == pytest.approx([1e-4, 1e-4, 1e-5])


def test_pretrain_plan_honours_the_iteration_override() -> None:
    plan = plan_schedule(tiny_config(), "pretrain_msgg", RunOptions(iterations_override=5))

    assert plan.groups == ("default",)
    assert [step.iteration for step in plan.steps] == [0, 1, 2, 3, 4]


def test_negative_iterations_are_rejected() -> None:
    with pytest.raises(ConfigurationError, match="iterations must be >= 0"):
        plan_schedule(tiny_config(), "global", RunOptions(iterations_override=-1))


def test_unknown_stage_is_rejected() -> None:
    with pytest.raises(ConfigurationError, match="unknown training stage"):
        plan_schedule(tiny_config(), "finetune")  # type: ignore[arg-type]


def test_branch_loss_weights_follow_the_branch_count() -> None:
    config = tiny_config()

    assert branch_loss_weights(config, 3) == (3.0, 2.0, 1.0)
    assert branch_loss_weights(config, 1) == (1.0,)


def test_global_groups_split_pretrained_modules_from_new_heads() -> None:
    bundle = build_model("bifusion", tiny_config(), 2)

    assign_groups(bundle, "global")

    store = bundle.store
    for name, _ in store.named_parameters():
        group = store.meta(name).group
        if name.startswith(("msgg.head.", "compact.", "fusion.")):
            assert group == "head", name
        else:
            assert group == "pretrained", name


def test_training_split_needs_enough_identities() -> None:
    with pytest.raises(SamplingError, match="training split"):
        training_identities(tiny_dataset(identities=3), tiny_config(train_ids=2, batch_p=3))


def test_msgg_pretraining_writes_telemetry(tmp_path) -> None:
    telemetry = tmp_path / "logs" / "msgg.csv"

    result = train_msgg_pretrain(tiny_dataset(), tiny_config(), options=RunOptions(telemetry_path=telemetry))

    assert result.iterations_completed == 3
    assert result.cancelled is False
    with telemetry.open(newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == TELEMETRY_COLUMNS
    assert len(rows) == 4
    assert all(row[-1] == "" for row in rows[1:])
    assert all(float(row[2]) == 0.0 for row in rows[1:])
    assert float(rows[3][5]) == pytest.approx(0.01)


def test_silhouette_pretraining_reports_only_the_silhouette_term() -> None:
    result = train_silhouette_pretrain(tiny_dataset(), tiny_config(pretrain_iterations=2))

    assert result.iterations_completed == 2
    for row in result.history:
        assert row.loss_total == pytest.approx(row.loss_sil_tp)
        assert row.loss_ske_tp == 0.0 and row.loss_ske_ce == 0.0


def test_global_loss_is_the_sum_of_its_terms() -> None:
    result = train_global(tiny_dataset(), tiny_config(global_iterations=2))

    for row in result.history:
        assert row.loss_total == pytest.approx(row.loss_sil_tp + row.loss_ske_tp + row.loss_ske_ce)
        assert row.lr_group1 is not None


def test_cancellation_stops_between_iterations() -> None:
    calls = {"count": 0}

    def stop_after_two() -> bool:
        calls["count"] += 1
        return calls["count"] > 2

    result = train_msgg_pretrain(tiny_dataset(), tiny_config(pretrain_iterations=10), should_stop=stop_after_two)

    assert result.cancelled is True
    assert result.iterations_completed == 2
    assert len(result.history) == 2


def test_training_changes_parameters() -> None:
    source = tiny_dataset()
    config = tiny_config()
    bundle = build_model("msgg", config, 2)
    before = {name: tensor.data.copy() for name, tensor in bundle.store.named_parameters()}

    run_training(bundle, source, config, "pretrain_msgg", identities=(0, 1))

    changed = [name for name, tensor in bundle.store.named_parameters() if not np.array_equal(tensor.data, before[name])]
    assert "msgg.head.fc.weight" in changed


def test_reruns_produce_identical_checkpoints(tmp_path) -> None:
    config = tiny_config()
    paths = []
    for run in ("a", "b"):
        result = train_msgg_pretrain(tiny_dataset(), config)
        paths.append(save_model(tmp_path / f"{run}.msgg", result.bundle, config))

    assert checkpoint_digest(paths[0]) == checkpoint_digest(paths[1])


def test_global_training_needs_both_checkpoints_or_neither(tmp_path) -> None:
    config = tiny_config()
    msgg = save_model(tmp_path / "m.msgg", train_msgg_pretrain(tiny_dataset(), config).bundle, config)

    with pytest.raises(ConfigurationError, match="both pretrained checkpoints"):
        train_global(tiny_dataset(), config, msgg_checkpoint=msgg)


def test_global_training_starts_from_pretrained_weights(tmp_path) -> None:
    config = tiny_config(global_iterations=0)
    source = tiny_dataset()
    msgg_bundle = train_msgg_pretrain(source, config).bundle
    sil_bundle = train_silhouette_pretrain(source, config).bundle
    msgg = save_model(tmp_path / "m.msgg", msgg_bundle, config)
    sil = save_model(tmp_path / "s.silp", sil_bundle, config)

    result = train_global(source, config, msgg_checkpoint=msgg, silhouette_checkpoint=sil)

    store = result.bundle.store
    for name, tensor in msgg_bundle.store.named_parameters():
        np.testing.assert_array_equal(store.parameter(name).data, tensor.data)
    for name, tensor in sil_bundle.store.named_parameters():
        np.testing.assert_array_equal(store.parameter(name).data, tensor.data)

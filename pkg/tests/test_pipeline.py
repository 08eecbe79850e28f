"""Model construction, checkpoint-backed loading and pretrained initialization."""

from __future__ import annotations

import numpy as np
import pytest

from bifusion_gait.checkpoint import MAGIC_MSGG, save_checkpoint
from bifusion_gait.errors import LoadError
from bifusion_gait.pipeline import build_model, initialize_from_pretrained, load_model, save_model
from helpers import tiny_config


def test_build_model_kinds() -> None:
    config = tiny_config()

    msgg = build_model("msgg", config, 3)
    silhouette = build_model("silhouette", config, 3)
    bifusion = build_model("bifusion", config, 3)

    assert msgg.msgg is not None and msgg.bifusion is None
    assert silhouette.silhouette is not None and silhouette.msgg is None
    assert bifusion.bifusion is not None and bifusion.msgg is bifusion.bifusion.msgg
    assert {name.split(".")[0] for name, _ in bifusion.store.named_parameters()} == {"msgg", "sil", "compact", "fusion"}


def test_same_seed_builds_identical_parameters() -> None:
    first = build_model("bifusion", tiny_config(seed=4), 2)
    second = build_model("bifusion", tiny_config(seed=4), 2)

    for (name, a), (_, b) in zip(first.store.named_parameters(), second.store.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_save_and_load_round_trip(tmp_path) -> None:
    config = tiny_config()
    bundle = build_model("bifusion", config, 2)
    path = save_model(tmp_path / "model.bifu", bundle, config, {"stage": "global"})

    loaded = load_model(path, tiny_config(seed=123))

    assert loaded.kind == "bifusion"
    assert loaded.num_classes == 2
    assert loaded.metadata["stage"] == "global"
    for name, tensor in bundle.store.named_parameters():
        np.testing.assert_array_equal(loaded.store.parameter(name).data, tensor.data)


def test_loading_the_wrong_kind_fails(tmp_path) -> None:
    config = tiny_config()
    path = save_model(tmp_path / "model.msgg", build_model("msgg", config, 2), config)

    with pytest.raises(LoadError, match="expected BIFU"):
        load_model(path, config, expected="bifusion")


def test_loading_under_an_incompatible_config_fails(tmp_path) -> None:
    config = tiny_config()
    path = save_model(tmp_path / "model.msgg", build_model("msgg", config, 2), config)

    with pytest.raises(LoadError, match="temporal_kernel=3, the current config has temporal_kernel=5"):
        load_model(path, tiny_config(temporal_kernel=5))


@pytest.mark.parametrize(
    ("kind", "change"),
    [
        ("msgg", {"strategy": "spatial"}),
        ("msgg", {"semp": False}),
        ("msgg", {"self_loops_all_subsets": False}),
        ("bifusion", {"compact_source": "concat"}),
    ],
)
def test_loading_rejects_settings_that_keep_shapes(tmp_path, kind, change) -> None:
    config = tiny_config()
    path = save_model(tmp_path / "model.ckpt", build_model(kind, config, 2), config)
    key = next(iter(change))

    with pytest.raises(LoadError, match=f"was trained with {key}="):
        load_model(path, tiny_config(**change))


def test_loading_ignores_settings_outside_the_network(tmp_path) -> None:
    config = tiny_config()
    path = save_model(tmp_path / "model.msgg", build_model("msgg", config, 2), config)

    loaded = load_model(path, tiny_config(seed=9, batch_p=3, global_iterations=7))

    assert loaded.kind == "msgg"


def test_loading_needs_the_recorded_config(tmp_path) -> None:
    bundle = build_model("msgg", tiny_config(), 2)
    path = save_checkpoint(tmp_path / "bare.msgg", bundle.store, MAGIC_MSGG, {"kind": "msgg", "num_classes": 2})

    with pytest.raises(LoadError, match="does not record the configuration"):
        load_model(path, tiny_config())


def test_pretrained_initialization_copies_both_modules(tmp_path) -> None:
    config = tiny_config()
    msgg = build_model("msgg", tiny_config(seed=1), 2)
    silhouette = build_model("silhouette", tiny_config(seed=2), 2)
    msgg_path = save_model(tmp_path / "m.msgg", msgg, config)
    sil_path = save_model(tmp_path / "s.silp", silhouette, config)
    bundle = build_model("bifusion", tiny_config(seed=3), 2)
    compact_before = bundle.store.parameter("compact.fc.weight").data.copy()

    initialize_from_pretrained(bundle, msgg_path, sil_path)

    np.testing.assert_array_equal(bundle.store.parameter("msgg.head.fc.weight").data, msgg.store.parameter("msgg.head.fc.weight").data)
    np.testing.assert_array_equal(bundle.store.parameter("sil.conv1.weight").data, silhouette.store.parameter("sil.conv1.weight").data)
    np.testing.assert_array_equal(bundle.store.parameter("compact.fc.weight").data, compact_before)


def test_pretrained_initialization_needs_a_bifusion_bundle(tmp_path) -> None:
    bundle = build_model("msgg", tiny_config(), 2)

    with pytest.raises(LoadError, match="bifusion"):
        initialize_from_pretrained(bundle, tmp_path / "m.msgg", tmp_path / "s.silp")


def test_pretrained_initialization_checks_the_skeleton_structure(tmp_path) -> None:
    saved_with = tiny_config(strategy="spatial")
    msgg_path = save_model(tmp_path / "m.msgg", build_model("msgg", saved_with, 2), saved_with)
    sil_path = save_model(tmp_path / "s.silp", build_model("silhouette", saved_with, 2), saved_with)
    config = tiny_config()

    with pytest.raises(LoadError, match="m.msgg was trained with strategy=spatial"):
        initialize_from_pretrained(build_model("bifusion", config, 2), msgg_path, sil_path, config)

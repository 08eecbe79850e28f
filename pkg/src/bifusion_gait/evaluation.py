"""Embedding extraction and the gallery/probe rank-k protocol.

Accuracy for a probe view is the mean over gallery views (the identical view
excluded by default) of the fraction of probes whose identity appears among
the k nearest gallery entries of that view. Test-time embedding uses every
frame of a sequence.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
import csv
import io
from dataclasses import dataclass
import logging
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from bifusion_gait.dataset import DatasetEntry, normalize_keypoints
from bifusion_gait.errors import DimensionError, LoadError, ProtocolError
from bifusion_gait.models import CONDITION_NORMAL, CONDITIONS, Condition, SequenceKey, SequenceRecord
from bifusion_gait.pipeline import ModelBundle
from bifusion_gait.sampling import SequenceSource

LOGGER = logging.getLogger("bifusion_gait.evaluation")

EmbeddingMode = Literal["bifusion", "msgg_only", "silhouette_only"]
EMBEDDING_MODES: tuple[EmbeddingMode, ...] = ("bifusion", "msgg_only", "silhouette_only")


@dataclass(frozen=True)
class EmbeddingSet:
    """``S x N x D`` features with one key per sequence; single-vector modes use ``N = 1``."""

    features: np.ndarray
    keys: tuple[SequenceKey, ...]
    mode: str = "bifusion"

    def __post_init__(self) -> None:
        if self.features.ndim != 3 or self.features.shape[0] != len(self.keys):
            raise DimensionError(f"{len(self.keys)} keys for features of shape {self.features.shape}.")

    def __len__(self) -> int:
        return len(self.keys)

    def identities(self) -> np.ndarray:
        return np.asarray([key.identity for key in self.keys])

    def views(self) -> np.ndarray:
        return np.asarray([key.view for key in self.keys])

    def conditions(self) -> np.ndarray:
        return np.asarray([key.condition for key in self.keys])

    def subset(self, mask: np.ndarray) -> "EmbeddingSet":
        picked = np.flatnonzero(mask)
        return EmbeddingSet(self.features[picked], tuple(self.keys[i] for i in picked), self.mode)


def embed_record(bundle: ModelBundle, record: SequenceRecord, mode: EmbeddingMode, normalize: bool = True) -> np.ndarray:
    """Eval-mode ``N x D`` embedding of one whole sequence."""
    keypoints = normalize_keypoints(record.keypoints, normalize).data[None]
    silhouettes = record.silhouettes.frames[None].astype(np.float64)
    if mode == "bifusion":
        if bundle.bifusion is None:
            raise LoadError(f"mode bifusion needs a bifusion checkpoint, got {bundle.kind}.")
        return bundle.bifusion.forward(keypoints, silhouettes, "eval").fused.data[0]
    if mode == "msgg_only":
        if bundle.bifusion is None:
            raise LoadError(f"mode msgg_only needs the compact block of a bifusion checkpoint, got {bundle.kind}.")
        _, compact = bundle.bifusion.skeleton_features(keypoints, "eval")
        return compact.data
    if mode == "silhouette_only":
        if bundle.silhouette is None:
            raise LoadError(f"mode silhouette_only needs a silhouette or bifusion checkpoint, got {bundle.kind}.")
        return bundle.silhouette.forward(silhouettes, "eval").data[0]
    raise LoadError(f"unknown embedding mode {mode!r}.")


def extract_embeddings(
    bundle: ModelBundle,
    source: SequenceSource,
    entries: Sequence[DatasetEntry],
    mode: EmbeddingMode = "bifusion",
    *,
    normalize: bool = True,
    threads: int = 1,
) -> EmbeddingSet:
    """Embed ``entries`` in order; parameters are read-only so sequences run concurrently."""

    def _embed(entry: DatasetEntry) -> np.ndarray:
        return embed_record(bundle, source.load(entry), mode, normalize)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            features = list(pool.map(_embed, entries))
    else:
        features = [_embed(entry) for entry in entries]
    LOGGER.info("embeddings_extracted mode=%s sequences=%d threads=%d", mode, len(features), threads)
    stacked = np.stack(features) if features else np.zeros((0, 1, 1))
    return EmbeddingSet(stacked, tuple(entry.key for entry in entries), mode)


def part_distance(query: np.ndarray, gallery: np.ndarray) -> float:
    """Mean over parts of the Euclidean distance between matching part vectors."""
    if query.shape != gallery.shape:
        raise DimensionError(f"part distance shapes differ: {query.shape} vs {gallery.shape}.")
    return float(np.linalg.norm(query - gallery, axis=-1).mean())


def distance_matrix(probe: np.ndarray, gallery: np.ndarray, threads: int = 1) -> np.ndarray:
    """``P x G`` part-averaged distances, one probe row at a time."""
    if probe.shape[1:] != gallery.shape[1:]:
        raise DimensionError(f"probe parts {probe.shape[1:]} do not match gallery parts {gallery.shape[1:]}.")

    def _row(row: np.ndarray) -> np.ndarray:
        return np.linalg.norm(gallery - row[None], axis=-1).mean(axis=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_row, probe))
    else:
        rows = [_row(row) for row in probe]
    return np.stack(rows) if rows else np.zeros((0, gallery.shape[0]))


def hits_at_k(distances: np.ndarray, probe_ids: np.ndarray, gallery_ids: np.ndarray, k: int) -> np.ndarray:
    """Per probe: does its identity appear among the ``k`` nearest gallery columns (stable order)?"""
    order = np.argsort(distances, axis=1, kind="stable")[:, :k]
    return (gallery_ids[order] == probe_ids[:, None]).any(axis=1)


@dataclass(frozen=True)
class RankTable:
    """Accuracy in [0, 1] per (condition, probe view) and per-condition means."""

    k: int
    views: tuple[int, ...]
    accuracy: dict[tuple[str, int], float]
    means: dict[str, float]

    def conditions(self) -> tuple[str, ...]:
        return tuple(condition for condition in CONDITIONS if condition in self.means)

    def rows(self) -> list[tuple[str, str, float]]:
        out: list[tuple[str, str, float]] = []
        for condition in self.conditions():
            for view in self.views:
                if (condition, view) in self.accuracy:
                    out.append((condition, str(view), self.accuracy[(condition, view)]))
            out.append((condition, "mean", self.means[condition]))
        return out


def rank_k_table(
    gallery: EmbeddingSet,
    probe: EmbeddingSet,
    k: int = 1,
    *,
    exclude_identical_view: bool = True,
    threads: int = 1,
) -> RankTable:
    if k < 1:
        raise ProtocolError(f"rank k must be >= 1, got {k}.")
    if len(probe) == 0:
        raise ProtocolError("probe set is empty.")
    gallery_views = gallery.views()
    probe_views = probe.views()
    views = tuple(sorted(set(gallery_views.tolist()) | set(probe_views.tolist())))
    for view in views:
        if not np.any(gallery_views == view):
            raise ProtocolError(f"gallery has no sequence at view {view}.")

    distances = distance_matrix(probe.features, gallery.features, threads)
    probe_ids, gallery_ids = probe.identities(), gallery.identities()
    conditions = probe.conditions()
    hits = {
        view: hits_at_k(distances[:, gallery_views == view], probe_ids, gallery_ids[gallery_views == view], k)
        for view in views
    }

    accuracy: dict[tuple[str, int], float] = {}
    means: dict[str, float] = {}
    for condition in CONDITIONS:
        per_view = []
        for probe_view in sorted(set(probe_views[conditions == condition].tolist())):
            rows = (conditions == condition) & (probe_views == probe_view)
            compared = [view for view in views if not (exclude_identical_view and view == probe_view)]
            if not compared:
                raise ProtocolError(f"no gallery view left to compare probe view {probe_view} against.")
            value = float(np.mean([hits[view][rows].mean() for view in compared]))
            accuracy[(condition, probe_view)] = value
            per_view.append(value)
        if per_view:
            means[condition] = float(np.mean(per_view))
    LOGGER.info("rank_table k=%d probes=%d gallery=%d means=%s", k, len(probe), len(gallery), means)
    return RankTable(k=k, views=views, accuracy=accuracy, means=means)


def split_gallery_probe(
    entries: Sequence[DatasetEntry],
    identities: Sequence[int],
    gallery_sequences: Sequence[int] = (1, 2, 3, 4),
    probe_conditions: Sequence[Condition] = CONDITIONS,
) -> tuple[list[DatasetEntry], list[DatasetEntry]]:
    """Gallery: the listed NM sequences; probe: every other sequence of the requested conditions."""
    wanted = set(identities)
    enrolled = set(gallery_sequences)
    gallery, probe = [], []
    for entry in entries:
        key = entry.key
        if key.identity not in wanted:
            continue
        if key.condition == CONDITION_NORMAL and key.sequence in enrolled:
            gallery.append(entry)
        elif key.condition in probe_conditions:
            probe.append(entry)
    return gallery, probe


REPORT_DECIMALS = 4


def format_report(table: RankTable) -> str:
    """CSV text: one row per (condition, probe view) plus a mean row per condition, accuracy in percent."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(("condition", "probe_view", f"rank{table.k}_accuracy"))
    for condition, view, value in table.rows():
        writer.writerow((condition, view, f"{100.0 * value:.{REPORT_DECIMALS}f}"))
    return buffer.getvalue()


def write_report(path: str | Path, table: RankTable) -> Path:
    target = Path(path).expanduser()
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(format_report(table), encoding="utf-8")
    LOGGER.info("report_written path=%s rows=%d", target, len(table.rows()))
    return target


def evaluate_source(
    bundle: ModelBundle,
    source: SequenceSource,
    test_identities: Sequence[int],
    *,
    mode: EmbeddingMode = "bifusion",
    gallery_sequences: Sequence[int] = (1, 2, 3, 4),
    probe_conditions: Sequence[Condition] = CONDITIONS,
    k: int = 1,
    normalize: bool = True,
    exclude_identical_view: bool = True,
    threads: int = 1,
) -> RankTable:
    """Split the test identities into gallery and probe, embed both and build the rank-k table."""
    if not test_identities:
        raise ProtocolError("no test identities to evaluate.")
    entries = [entry for identity in sorted(test_identities) for entry in source.entries_for(identity)]
    gallery_entries, probe_entries = split_gallery_probe(entries, test_identities, gallery_sequences, probe_conditions)
    if not gallery_entries:
        raise ProtocolError(f"no gallery sequences among NM {tuple(gallery_sequences)} for the test identities.")
    gallery = extract_embeddings(bundle, source, gallery_entries, mode, normalize=normalize, threads=threads)
    probe = extract_embeddings(bundle, source, probe_entries, mode, normalize=normalize, threads=threads)
    return rank_k_table(gallery, probe, k, exclude_identical_view=exclude_identical_view, threads=threads)

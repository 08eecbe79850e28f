"""Pyramid skeleton graph: joints, limbs and bodyparts scales.

Joint order (fixed, shared with the keypoints file format):

    0 left_shoulder   1 right_shoulder  2 left_elbow   3 right_elbow
    4 left_wrist      5 right_wrist     6 left_hip     7 right_hip
    8 left_knee       9 right_knee     10 left_ankle  11 right_ankle

Adjacency subsets are normalized symmetrically, ``D^-1/2 (A_k + I) D^-1/2``
with ``D_ii = sum_j (A_k + I)_ij + 1e-6``. The printed source formula carries
``+1/2`` on the right-hand degree factor, which does not normalize anything;
``-1/2`` is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np

from bifusion_gait.errors import ConfigurationError, DimensionError

Scale = Literal["joints", "limbs", "bodyparts"]
Strategy = Literal["uniform", "distance", "spatial", "gait_temporal"]

STRATEGIES: tuple[Strategy, ...] = ("uniform", "distance", "spatial", "gait_temporal")
SUBSET_COUNTS: dict[str, int] = {"uniform": 1, "distance": 2, "spatial": 3, "gait_temporal": 3}
DEGREE_GUARD = 1e-6
EQUIDISTANT_TOLERANCE = 1e-9

JOINT_NAMES: tuple[str, ...] = (
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)
JOINT_INDEX: dict[str, int] = {name: index for index, name in enumerate(JOINT_NAMES)}
LIMB_NAMES: tuple[str, ...] = ("left_arm", "right_arm", "left_leg", "right_leg", "left_torso", "right_torso")
BODYPART_NAMES: tuple[str, ...] = ("arms", "legs", "torso")

_JOINT_EDGES: tuple[tuple[str, str], ...] = (
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
    ("left_shoulder", "right_shoulder"),
    ("left_hip", "right_hip"),
    ("left_shoulder", "left_hip"),
    ("right_shoulder", "right_hip"),
)
_LIMB_EDGES: tuple[tuple[str, str], ...] = (
    ("left_arm", "left_torso"),
    ("right_arm", "right_torso"),
    ("left_leg", "left_torso"),
    ("right_leg", "right_torso"),
    ("left_torso", "right_torso"),
)
_BODYPART_EDGES: tuple[tuple[str, str], ...] = (("arms", "torso"), ("legs", "torso"))

_JOINT_TO_LIMB: tuple[tuple[tuple[str, str], str], ...] = (
    (("left_elbow", "left_wrist"), "left_arm"),
    (("right_elbow", "right_wrist"), "right_arm"),
    (("left_knee", "left_ankle"), "left_leg"),
    (("right_knee", "right_ankle"), "right_leg"),
    (("left_shoulder", "left_hip"), "left_torso"),
    (("right_shoulder", "right_hip"), "right_torso"),
)
_LIMB_TO_BODYPART: tuple[tuple[tuple[str, str], str], ...] = (
    (("left_arm", "right_arm"), "arms"),
    (("left_leg", "right_leg"), "legs"),
    (("left_torso", "right_torso"), "torso"),
)

# Standing pose in image coordinates (y grows downward); the reference frame
# for inspecting spatial-strategy subsets when no sequence is at hand.
REST_POSE = np.array(
    [
        [-0.40, -1.00],
        [0.40, -1.00],
        [-0.50, -0.45],
        [0.50, -0.45],
        [-0.55, 0.05],
        [0.55, 0.05],
        [-0.22, 0.00],
        [0.22, 0.00],
        [-0.24, 0.95],
        [0.24, 0.95],
        [-0.25, 1.90],
        [0.25, 1.90],
    ]
)


@dataclass(frozen=True)
class ScaleGraph:
    """One scale of the pyramid: nodes, undirected spatial edges, swing classes."""

    scale: Scale
    node_names: tuple[str, ...]
    spatial_edges: frozenset[tuple[int, int]]
    positive_set: frozenset[int]
    negative_set: frozenset[int]

    def __post_init__(self) -> None:
        nodes = set(range(self.node_count))
        if self.positive_set | self.negative_set != nodes or self.positive_set & self.negative_set:
            raise ConfigurationError(f"{self.scale}: positive/negative sets must partition the nodes.")
        for a, b in self.spatial_edges:
            if not (a < b and a in nodes and b in nodes):
                raise ConfigurationError(f"{self.scale}: malformed edge ({a}, {b}).")
        if not self._connected():
            raise ConfigurationError(f"{self.scale}: spatial edges must form a connected graph.")

    @property
    def node_count(self) -> int:
        return len(self.node_names)

    def neighbors(self, node: int) -> tuple[int, ...]:
        found = {b for a, b in self.spatial_edges if a == node} | {a for a, b in self.spatial_edges if b == node}
        return tuple(sorted(found))

    def adjacency(self) -> np.ndarray:
        matrix = np.zeros((self.node_count, self.node_count))
        for a, b in self.spatial_edges:
            matrix[a, b] = matrix[b, a] = 1.0
        return matrix

    def _connected(self) -> bool:
        if self.node_count <= 1:
            return True
        seen = {0}
        frontier = [0]
        while frontier:
            node = frontier.pop()
            for other in self.neighbors(node):
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        return len(seen) == self.node_count


@dataclass(frozen=True)
class PoolMap:
    """Pairs ``((a, b) -> i)`` mapping two lower-scale nodes to one higher-scale node."""

    from_scale: Scale
    to_scale: Scale
    from_count: int
    to_count: int
    pairs: tuple[tuple[tuple[int, int], int], ...]

    def __post_init__(self) -> None:
        sources = [node for (a, b), _ in self.pairs for node in {a, b}]
        targets = [target for _, target in self.pairs]
        if sorted(sources) != list(range(self.from_count)) or sorted(targets) != list(range(self.to_count)):
            raise ConfigurationError(f"pool map {self.from_scale}->{self.to_scale} is not a perfect matching.")

    def matrix(self) -> np.ndarray:
        """``to_count x from_count`` averaging matrix (0.5 per pair member)."""
        out = np.zeros((self.to_count, self.from_count))
        for (a, b), target in self.pairs:
            out[target, a] += 0.5
            out[target, b] += 0.5
        return out


@dataclass(frozen=True)
class PyramidGraph:
    joints: ScaleGraph
    limbs: ScaleGraph
    bodyparts: ScaleGraph
    joints_to_limbs: PoolMap
    limbs_to_bodyparts: PoolMap

    def scale(self, name: Scale) -> ScaleGraph:
        return {"joints": self.joints, "limbs": self.limbs, "bodyparts": self.bodyparts}[name]

    def joint_to_bodypart(self) -> np.ndarray:
        """Bodypart index for each of the 12 joints, composing both pool maps."""
        composed = self.limbs_to_bodyparts.matrix() @ self.joints_to_limbs.matrix()
        return np.argmax(composed, axis=0)


@dataclass(frozen=True)
class PartitionLabeling:
    """Subset index for every (root, member) pair, members including the root itself."""

    strategy: Strategy
    K: int
    node_count: int
    labels: Mapping[tuple[int, int], int] = field(hash=False)

    def subsets(self, root: int) -> tuple[frozenset[int], ...]:
        members: list[set[int]] = [set() for _ in range(self.K)]
        for (r, member), k in self.labels.items():
            if r == root:
                members[k].add(member)
        return tuple(frozenset(group) for group in members)


@dataclass(frozen=True)
class NormalizedAdjacency:
    """Per-subset matrices: raw neighbour masks, masks with self loops, normalized."""

    strategy: Strategy
    subsets: np.ndarray
    masks: np.ndarray
    matrices: np.ndarray

    @property
    def K(self) -> int:
        return int(self.matrices.shape[0])


def _scale_graph(scale: Scale, names: Sequence[str], edges: Sequence[tuple[str, str]], negative: Sequence[str]) -> ScaleGraph:
    index = {name: position for position, name in enumerate(names)}
    edge_set = frozenset(tuple(sorted((index[a], index[b]))) for a, b in edges)
    negative_set = frozenset(index[name] for name in negative)
    return ScaleGraph(
        scale=scale,
        node_names=tuple(names),
        spatial_edges=edge_set,  # type: ignore[arg-type]
        positive_set=frozenset(range(len(names))) - negative_set,
        negative_set=negative_set,
    )


def _pool_map(
    from_graph: ScaleGraph, to_graph: ScaleGraph, pairs: Sequence[tuple[tuple[str, str], str]]
) -> PoolMap:
    src = {name: i for i, name in enumerate(from_graph.node_names)}
    dst = {name: i for i, name in enumerate(to_graph.node_names)}
    return PoolMap(
        from_scale=from_graph.scale,
        to_scale=to_graph.scale,
        from_count=from_graph.node_count,
        to_count=to_graph.node_count,
        pairs=tuple(((src[a], src[b]), dst[target]) for (a, b), target in pairs),
    )


def build_pyramid_graph() -> PyramidGraph:
    """Build the fixed three-scale graph and the two 2->1 pool maps."""
    joints = _scale_graph(
        "joints", JOINT_NAMES, _JOINT_EDGES, ("left_shoulder", "right_shoulder", "left_hip", "right_hip")
    )
    limbs = _scale_graph("limbs", LIMB_NAMES, _LIMB_EDGES, ("left_torso", "right_torso"))
    bodyparts = _scale_graph("bodyparts", BODYPART_NAMES, _BODYPART_EDGES, ("torso",))
    return PyramidGraph(
        joints=joints,
        limbs=limbs,
        bodyparts=bodyparts,
        joints_to_limbs=_pool_map(joints, limbs, _JOINT_TO_LIMB),
        limbs_to_bodyparts=_pool_map(limbs, bodyparts, _LIMB_TO_BODYPART),
    )


def identity_pool_map(graph: ScaleGraph) -> PoolMap:
    """Map every node to itself; used when stacked branches share one scale."""
    return PoolMap(
        from_scale=graph.scale,
        to_scale=graph.scale,
        from_count=graph.node_count,
        to_count=graph.node_count,
        pairs=tuple(((node, node), node) for node in range(graph.node_count)),
    )


def rest_pose(pyramid: PyramidGraph, scale: Scale) -> np.ndarray:
    """Rest-pose coordinates at ``scale`` (pooled pair means above the joints)."""
    coords = REST_POSE
    if scale in ("limbs", "bodyparts"):
        coords = pyramid.joints_to_limbs.matrix() @ coords
    if scale == "bodyparts":
        coords = pyramid.limbs_to_bodyparts.matrix() @ coords
    return coords


def partition_neighbors(
    graph: ScaleGraph,
    strategy: Strategy,
    frame_coords: np.ndarray | None = None,
) -> PartitionLabeling:
    """Label each member of every neighbour set (self included) with a subset index."""
    if strategy not in SUBSET_COUNTS:
        raise ConfigurationError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}.")
    radius: np.ndarray | None = None
    if strategy == "spatial":
        if frame_coords is None:
            raise ConfigurationError("the spatial strategy needs per-node frame coordinates.")
        coords = np.asarray(frame_coords, dtype=np.float64)
        if coords.shape != (graph.node_count, 2):
            raise DimensionError(f"frame_coords must be {graph.node_count} x 2, got {coords.shape}.")
        radius = np.linalg.norm(coords - coords.mean(axis=0), axis=1)

    labels: dict[tuple[int, int], int] = {}
    for root in range(graph.node_count):
        labels[(root, root)] = 0
        for member in graph.neighbors(root):
            if strategy == "uniform":
                label = 0
            elif strategy == "distance":
                label = 1
            elif strategy == "spatial":
                assert radius is not None
                gap = radius[member] - radius[root]
                label = 0 if abs(gap) <= EQUIDISTANT_TOLERANCE else (1 if gap < 0 else 2)
            else:
                label = 1 if member in graph.positive_set else 2
            labels[(root, member)] = label
    return PartitionLabeling(strategy=strategy, K=SUBSET_COUNTS[strategy], node_count=graph.node_count, labels=labels)


def subset_masks(graph: ScaleGraph, labeling: PartitionLabeling) -> np.ndarray:
    """``K x N x N`` neighbour masks ``A_k`` (self excluded; it enters through ``I``)."""
    if labeling.node_count != graph.node_count:
        raise DimensionError("labeling was built for a different graph.")
    masks = np.zeros((labeling.K, graph.node_count, graph.node_count))
    for (root, member), k in labeling.labels.items():
        if root != member:
            masks[k, root, member] = 1.0
    return masks


def frame_subset_masks(graph: ScaleGraph, frame_coords: np.ndarray) -> np.ndarray:
    """Spatial-strategy masks for every frame of a ``... x N x 2`` coordinate stack.

    Returns ``... x 3 x N x N`` masks (self excluded), labelled exactly as
    ``partition_neighbors(graph, "spatial", frame)`` labels each frame.
    """
    coords = np.asarray(frame_coords, dtype=np.float64)
    if coords.ndim < 2 or coords.shape[-2:] != (graph.node_count, 2):
        raise DimensionError(f"frame_coords must be ... x {graph.node_count} x 2, got {coords.shape}.")
    radius = np.linalg.norm(coords - coords.mean(axis=-2, keepdims=True), axis=-1)
    pairs = np.array([(root, member) for root in range(graph.node_count) for member in graph.neighbors(root)])
    masks = np.zeros((*coords.shape[:-2], SUBSET_COUNTS["spatial"], graph.node_count, graph.node_count))
    if pairs.size == 0:
        return masks
    roots, members = pairs[:, 0], pairs[:, 1]
    gap = radius[..., members] - radius[..., roots]
    labels = np.where(np.abs(gap) <= EQUIDISTANT_TOLERANCE, 0, np.where(gap < 0, 1, 2))
    for k in range(SUBSET_COUNTS["spatial"]):
        masks[..., k, roots, members] = (labels == k).astype(np.float64)
    return masks


def normalize_mask(mask: np.ndarray) -> np.ndarray:
    """``D^-1/2 M D^-1/2`` with row degrees plus the 1e-6 guard."""
    inv_sqrt = 1.0 / np.sqrt(mask.sum(axis=-1) + DEGREE_GUARD)
    return inv_sqrt[..., :, None] * mask * inv_sqrt[..., None, :]


def self_loop_masks(subsets: np.ndarray, self_loops_all_subsets: bool = True) -> np.ndarray:
    """Add ``I`` to every subset (literal form) or to subset 0 only; leading axes pass through."""
    with_loops = subsets.copy()
    eye = np.eye(subsets.shape[-1])
    if self_loops_all_subsets:
        with_loops += eye
    else:
        with_loops[..., 0, :, :] += eye
    return with_loops


def normalized_adjacency(
    graph: ScaleGraph,
    labeling: PartitionLabeling,
    *,
    self_loops_all_subsets: bool = True,
) -> NormalizedAdjacency:
    subsets = subset_masks(graph, labeling)
    masks = self_loop_masks(subsets, self_loops_all_subsets)
    return NormalizedAdjacency(
        strategy=labeling.strategy,
        subsets=subsets,
        masks=masks,
        matrices=normalize_mask(masks),
    )


def edge_importance_init(graph: ScaleGraph, K: int) -> np.ndarray:
    """Initial edge-importance weights: ``K`` all-ones ``N x N`` matrices."""
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}.")
    return np.ones((K, graph.node_count, graph.node_count))


def adjacency_for(
    pyramid: PyramidGraph,
    scale: Scale,
    strategy: Strategy,
    *,
    self_loops_all_subsets: bool = True,
) -> NormalizedAdjacency:
    """Adjacency subsets for one scale; the spatial strategy is labelled on the rest pose."""
    graph = pyramid.scale(scale)
    coords = rest_pose(pyramid, scale) if strategy == "spatial" else None
    labeling = partition_neighbors(graph, strategy, coords)
    return normalized_adjacency(graph, labeling, self_loops_all_subsets=self_loops_all_subsets)

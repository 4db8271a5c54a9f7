"""Voxel grouping, group attention scores, and the region decision gate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .attention import AttentionOutput
from .numerics import DTYPE, ParamStore, softmax
from .validation import DataError, check_in_range


@dataclass(frozen=True)
class GroupingConfig:
    """Uniform voxel partition of space, the only grouping mode."""

    mode: str = "voxel"
    cell_size: float = 0.1
    grid_origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.mode != "voxel":
            raise DataError(f"unknown grouping mode {self.mode!r}")
        if not self.cell_size > 0:
            raise DataError(f"cell_size must be positive, got {self.cell_size}")
        if len(self.grid_origin) != 3:
            raise DataError("grid_origin must have 3 coordinates")


@dataclass(frozen=True)
class Group:
    members: np.ndarray
    cell: tuple[int, int, int]


@dataclass(frozen=True)
class Grouping:
    """Partition of a frame's point indices into voxel groups.

    Group ids run in ascending lexicographic cell-coordinate order, so the
    same cloud always produces the same numbering.
    """

    group_of: np.ndarray
    groups: list[Group]

    def __len__(self) -> int:
        return len(self.groups)


@dataclass
class NgsaScores:
    """Per-group scores: summed attention mass and the learned-vector means.

    global_scores stays on the autograd graph (it depends on w and on the
    attention features); sum_scores is plain data.
    """

    sum_scores: np.ndarray
    global_scores: torch.Tensor
    w: torch.Tensor


@dataclass(frozen=True)
class RegionSelection:
    region_index: int
    confidence: float
    decision: str

    def __post_init__(self):
        if self.decision not in ("accept", "refine"):
            raise DataError(f"decision must be accept or refine, got {self.decision!r}")
        check_in_range("confidence", self.confidence, 0.0, 1.0)


def group_points(frame, cfg: GroupingConfig) -> Grouping:
    """Partition points into voxel cells of side cfg.cell_size.

    Cell coordinates are floor((p - grid_origin) / cell_size) per axis, so
    negative positions fall into negative cells rather than truncating
    toward zero.
    """
    positions = np.asarray(frame.positions, dtype=np.float64)
    if positions.shape[0] == 0:
        raise DataError("cannot group an empty frame")
    origin = np.asarray(cfg.grid_origin, dtype=np.float64)
    cells = np.floor((positions - origin) / cfg.cell_size).astype(np.int64)
    unique_cells, group_of = np.unique(cells, axis=0, return_inverse=True)
    groups = []
    for gid in range(unique_cells.shape[0]):
        members = np.flatnonzero(group_of == gid)
        groups.append(Group(members=members, cell=tuple(int(c) for c in unique_cells[gid])))
    return Grouping(group_of=group_of.astype(np.int64), groups=groups)


def group_score_sum(att: AttentionOutput, grouping: Grouping) -> np.ndarray:
    """Sum each group's per-point attention mass into one scalar per group."""
    scores = att.point_scores.detach().numpy()
    if scores.shape[0] != grouping.group_of.shape[0]:
        raise DataError(
            f"attention covers {scores.shape[0]} points but grouping covers "
            f"{grouping.group_of.shape[0]}")
    return np.array([scores[g.members].sum() for g in grouping.groups])


def ngsa_scores(att: AttentionOutput, grouping: Grouping,
                w: torch.Tensor) -> NgsaScores:
    """Score each group by the mean inner product of member features with w."""
    y = att.features
    if w.dim() != 1 or w.shape[0] != y.shape[1]:
        raise DataError(
            f"w must be a vector of length {y.shape[1]}, got shape {tuple(w.shape)}")
    sums = group_score_sum(att, grouping)
    contrib = y @ w
    global_scores = group_means(contrib, grouping)
    return NgsaScores(sum_scores=sums, global_scores=global_scores, w=w)


def group_means(values: torch.Tensor, grouping: Grouping) -> torch.Tensor:
    """Mean of a per-point tensor within each group, differentiably."""
    if values.shape[0] != grouping.group_of.shape[0]:
        raise DataError(
            f"values cover {values.shape[0]} points but grouping covers "
            f"{grouping.group_of.shape[0]}")
    index = torch.from_numpy(grouping.group_of)
    counts = torch.from_numpy(
        np.bincount(grouping.group_of, minlength=len(grouping.groups))
        .astype(np.float64))
    totals = values.new_zeros(len(grouping.groups)).index_add(0, index, values)
    return totals / counts


def select_region(scores: NgsaScores) -> int:
    """Index of the highest-scoring group; ties go to the lowest id."""
    values = scores.global_scores.detach().numpy()
    if values.shape[0] == 0:
        raise DataError("cannot select a region from zero groups")
    return int(np.argmax(values))


def localization_decision(scores: NgsaScores, eta: float) -> RegionSelection:
    """Gate on confidence: softmax the group scores and compare the max to eta.

    The selected region is reported either way; the decision only records
    whether the score distribution was decisive enough to stop at the
    localization stage.
    """
    check_in_range("eta", eta, 0.0, 1.0)
    values = scores.global_scores.detach()
    if values.shape[0] == 0:
        raise DataError("cannot decide on zero groups")
    confidence = float(softmax(values, dim=0).max())
    return RegionSelection(
        region_index=select_region(scores),
        confidence=confidence,
        decision="refine" if confidence < eta else "accept",
    )


def make_region_vector(store: ParamStore, name: str, rng: np.random.Generator,
                       d_attention: int) -> torch.Tensor:
    bound = 1.0 / np.sqrt(d_attention)
    return store.register(name, rng.uniform(-bound, bound, size=d_attention))

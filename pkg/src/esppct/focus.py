"""Top-K point selection inside the localized region and the flattened
representation handed to the recognition heads."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
import torch

from .attention import AttentionOutput
from .ngsa import Grouping, NgsaScores, select_region
from .validation import DataError, check_finite, check_in_range

ABLATIONS = ("no_attention_score", "no_grouping", "no_highest_group", "no_top_k")


@dataclass(frozen=True)
class FocusConfig:
    """Second-stage knobs: how many points survive and when to bother.

    `ablation` holds at most one switch (None = the full pipeline), matching
    runs that disable exactly one mechanism at a time.  `selection_over`
    picks what the rank score means: each point's own feature-vector score
    ("points") or its whole group's score ("groups").
    """

    top_k: int = 30
    eta: float = 0.68
    ablation: str | None = None
    selection_over: str = "points"

    def __post_init__(self):
        if not isinstance(self.top_k, int) or self.top_k < 0:
            raise DataError(f"top_k must be an integer >= 0, got {self.top_k!r}")
        check_in_range("eta", self.eta, 0.0, 1.0)
        if self.ablation is not None and self.ablation not in ABLATIONS:
            raise DataError(
                f"ablation must be one of {ABLATIONS} or None, got {self.ablation!r}")
        if self.selection_over not in ("points", "groups"):
            raise DataError(
                f"selection_over must be 'points' or 'groups', got {self.selection_over!r}")


@dataclass
class FocusOutput:
    """Selected point indices and their concatenated feature rows.

    representation lives on the autograd graph; selection indices do not
    (hard selection is a stop-gradient index choice).  frame_padded reports
    that zero rows were appended because fewer than top_k candidates existed.
    """

    selected_indices: np.ndarray
    representation: torch.Tensor
    frame_padded: bool


def top_k_points(point_scores, k: int) -> np.ndarray:
    """Indices of the k highest scores, ties to the lower index, sorted ascending."""
    scores = np.asarray(point_scores, dtype=np.float64).reshape(-1)
    check_finite("point_scores", scores)
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise DataError(f"k must be an integer >= 0, got {k!r}")
    if k == 0 or scores.size == 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")[:min(int(k), scores.size)]
    return np.sort(order).astype(np.int64)


def concat_representation(features: torch.Tensor, indices) -> torch.Tensor:
    """Flatten the chosen feature rows into one vector, in the order given."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if features.dim() != 2:
        raise DataError(f"features must be 2-D, got {tuple(features.shape)}")
    if idx.size == 0:
        return features.new_zeros(0)
    if idx.min() < 0 or idx.max() >= features.shape[0]:
        raise DataError(
            f"indices out of range for {features.shape[0]} rows: "
            f"[{idx.min()}, {idx.max()}]")
    return features[torch.from_numpy(idx)].reshape(-1)


def _adjacent_candidates(grouping: Grouping, region: int) -> np.ndarray:
    """Point indices in the region's cell and the 26 cells touching it."""
    by_cell = {g.cell: gid for gid, g in enumerate(grouping.groups)}
    cx, cy, cz = grouping.groups[region].cell
    members = []
    for dx, dy, dz in product((-1, 0, 1), repeat=3):
        gid = by_cell.get((cx + dx, cy + dy, cz + dz))
        if gid is not None:
            members.append(grouping.groups[gid].members)
    return np.sort(np.concatenate(members))


def focus_stage(att: AttentionOutput, scores: NgsaScores, grouping: Grouping,
                cfg: FocusConfig, frame=None) -> FocusOutput:
    """Pick the points that carry the signal and flatten their features.

    The default path restricts candidates to the winning voxel plus its 26
    neighbors, ranks them by their feature score against w, keeps the best
    top_k, and zero-pads the flattened rows to a fixed top_k * d width.
    Ablations swap out exactly one of those mechanisms; `no_attention_score`
    ranks by raw sensor intensity and therefore needs the original frame.
    """
    n = att.features.shape[0]
    d = att.features.shape[1]
    if grouping.group_of.shape[0] != n:
        raise DataError(
            f"grouping covers {grouping.group_of.shape[0]} points, attention {n}")
    if scores.global_scores.shape[0] != len(grouping.groups):
        raise DataError(
            f"scores cover {scores.global_scores.shape[0]} groups, "
            f"grouping has {len(grouping.groups)}")

    if cfg.ablation in ("no_grouping", "no_highest_group"):
        candidates = np.arange(n, dtype=np.int64)
    else:
        region = select_region(scores)
        candidates = _adjacent_candidates(grouping, region)

    if cfg.ablation == "no_attention_score":
        if frame is None:
            raise DataError("ranking by intensity needs the source frame")
        if frame.points.shape[0] != n:
            raise DataError(
                f"frame has {frame.points.shape[0]} points, attention {n}")
        rank = np.asarray(frame.points[:, 4], dtype=np.float64)
    elif cfg.selection_over == "groups":
        group_vals = scores.global_scores.detach().numpy()
        rank = group_vals[grouping.group_of]
    else:
        rank = (att.features.detach() @ scores.w.detach()).numpy()

    if cfg.ablation == "no_top_k":
        chosen = candidates
        padded = False
    else:
        within = top_k_points(rank[candidates], cfg.top_k)
        chosen = candidates[within]
        padded = chosen.size < cfg.top_k

    representation = concat_representation(att.features, chosen)
    if padded:
        pad = att.features.new_zeros(cfg.top_k * d - representation.shape[0])
        representation = torch.cat([representation, pad])
    return FocusOutput(selected_indices=chosen, representation=representation,
                       frame_padded=padded)

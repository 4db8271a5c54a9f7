"""Neighborhood vector attention over point features.

Each point attends to its k nearest neighbors (self included, always first).
The relation is subtractive: a learned query/key difference plus an MLP
encoding of the 3-D relative position feeds a channel-wise MLP, and the
result is softmax-normalized per channel across the neighborhood.  Outputs
are channel-wise weighted sums of transformed neighbor features, so every
attention weight is a vector, not a scalar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import (
    DTYPE,
    LinearParams,
    MlpParams,
    ParamStore,
    linear_forward,
    make_linear,
    make_mlp,
    mlp_forward,
    softmax,
)
from .validation import DataError

__all__ = [
    "AttentionConfig",
    "VectorAttentionLayer",
    "AttentionOutput",
    "knn_neighbors",
    "vector_attention_forward",
    "attention_stack_forward",
    "make_attention_stack",
    "POINT_FEATURES",
]

POINT_FEATURES = 5


@dataclass(frozen=True)
class AttentionConfig:
    """Shapes of the localization attention stack."""

    d_attention: int = 32
    depth: int = 2
    k_nn: int = 16
    gamma_hidden: int | None = None  # None = d_attention
    delta_hidden: int | None = None  # None = d_attention

    def __post_init__(self):
        if self.d_attention < 1:
            raise DataError("d_attention must be >= 1")
        if self.depth < 1:
            raise DataError("depth must be >= 1")
        if self.k_nn < 1:
            raise DataError("k_nn must be >= 1")
        for name in ("gamma_hidden", "delta_hidden"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise DataError(f"{name} must be >= 1 when set")

    @property
    def gamma_width(self) -> int:
        return self.gamma_hidden or self.d_attention

    @property
    def delta_width(self) -> int:
        return self.delta_hidden or self.d_attention


@dataclass
class VectorAttentionLayer:
    """One attention layer: query/key/value maps plus relation and position MLPs."""

    phi: LinearParams    # query map
    psi: LinearParams    # key map
    alpha: LinearParams  # value map
    gamma: MlpParams     # relation MLP, d_attention -> d_attention
    delta: MlpParams     # position MLP, 3 -> d_attention

    def __post_init__(self):
        d = self.gamma.d_out
        if not (self.phi.d_out == self.psi.d_out == self.alpha.d_out == d):
            raise DataError("phi/psi/alpha output widths must equal d_attention")
        if self.phi.d_in != self.psi.d_in or self.phi.d_in != self.alpha.d_in:
            raise DataError("phi/psi/alpha input widths must agree")
        if self.gamma.d_in != d:
            raise DataError("gamma must map d_attention -> d_attention")
        if self.delta.d_in != 3 or self.delta.d_out != d:
            raise DataError("delta must map 3 -> d_attention")

    @property
    def d_in(self) -> int:
        return self.phi.d_in

    @property
    def d_attention(self) -> int:
        return self.gamma.d_out


@dataclass
class AttentionOutput:
    """Per-point attention results for one frame.

    features:     (N, d) aggregated output y_i, differentiable.
    weights:      (N, k, d) normalized per-channel attention, slot j follows
                  the neighbor ordering in `neighbors`.
    neighbors:    (N, k) int neighbor indices, self first.
    point_scores: (N,) channel-averaged incoming attention mass, detached
                  (selection scores never carry gradients).
    layer_weights: per-layer weight tensors when produced by a stack.
    """

    features: torch.Tensor
    weights: torch.Tensor
    neighbors: np.ndarray
    point_scores: torch.Tensor
    layer_weights: list[torch.Tensor] | None = None

    @property
    def n_points(self) -> int:
        return self.features.shape[0]


def knn_neighbors(positions_or_frame, k_nn: int) -> np.ndarray:
    """Index lists of the k nearest neighbors per point (self always first).

    Accepts a Frame or an (N, 3) position array.  Distances are Euclidean on
    xyz; exact ties resolve to the lower index.  Lists are trimmed to N when
    the frame has fewer than k_nn points.
    """
    if k_nn < 1:
        raise DataError(f"k_nn must be >= 1, got {k_nn}")
    pos = getattr(positions_or_frame, "positions", positions_or_frame)
    pos = np.asarray(pos, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3:
        raise DataError(f"positions must be (N, 3), got {pos.shape}")
    n = pos.shape[0]
    if n == 0:
        raise DataError("cannot build neighbor lists for an empty frame")
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    # below-zero diagonal pins each point first in its own list even under
    # coincident coordinates
    np.fill_diagonal(d2, -1.0)
    order = np.argsort(d2, axis=1, kind="stable")
    return np.ascontiguousarray(order[:, :min(k_nn, n)])


def _features_of(frame_or_tensor) -> torch.Tensor:
    pts = getattr(frame_or_tensor, "points", frame_or_tensor)
    if isinstance(pts, torch.Tensor):
        t = pts.to(DTYPE)
    else:
        # frames expose read-only arrays; torch tensors must own writable data
        t = torch.from_numpy(np.array(pts, dtype=np.float64))
    if t.dim() != 2:
        raise DataError(f"point features must be 2-D, got {tuple(t.shape)}")
    return t


def _positions_of(frame) -> torch.Tensor:
    pos = frame.positions
    if isinstance(pos, torch.Tensor):
        return pos.to(DTYPE)
    return torch.from_numpy(np.array(pos, dtype=np.float64))


def _attention_forward(layer: VectorAttentionLayer, features: torch.Tensor,
                       positions: torch.Tensor, neighbors: np.ndarray
                       ) -> AttentionOutput:
    n, k = neighbors.shape
    if features.shape[0] != n:
        raise DataError(
            f"features rows {features.shape[0]} do not match neighbor lists {n}")
    if features.shape[1] != layer.d_in:
        raise DataError(
            f"feature width {features.shape[1]} does not match layer d_in {layer.d_in}")
    d = layer.d_attention
    nbr = torch.as_tensor(neighbors, dtype=torch.long)

    q = linear_forward(layer.phi, features)
    key = linear_forward(layer.psi, features)
    val = linear_forward(layer.alpha, features)

    rel = positions.unsqueeze(1) - positions[nbr]            # (n, k, 3)
    pos_enc = mlp_forward(layer.delta, rel.reshape(n * k, 3)).reshape(n, k, d)
    pre = q.unsqueeze(1) - key[nbr] + pos_enc                # (n, k, d)
    logits = mlp_forward(layer.gamma, pre.reshape(n * k, d)).reshape(n, k, d)
    weights = softmax(logits, dim=1)
    out = (weights * val[nbr]).sum(dim=1)

    # total incoming attention mass per point, channel-averaged; selection
    # scores are value-only so this is computed off the graph
    w_np = weights.detach().numpy()
    incoming = np.zeros((n, d))
    np.add.at(incoming, neighbors.reshape(-1), w_np.reshape(n * k, d))
    point_scores = torch.as_tensor(incoming.mean(axis=1))

    return AttentionOutput(features=out, weights=weights, neighbors=neighbors,
                           point_scores=point_scores)


def vector_attention_forward(layer: VectorAttentionLayer, frame,
                             neighbors: np.ndarray) -> AttentionOutput:
    """Run one attention layer on a frame's raw 5-feature points."""
    features = _features_of(frame)
    return _attention_forward(layer, features, _positions_of(frame), neighbors)


def attention_stack_forward(layers: list[VectorAttentionLayer], frame,
                            k_nn: int, neighbors: np.ndarray | None = None
                            ) -> AttentionOutput:
    """Run a stack of attention layers over one frame.

    The kNN graph is geometric, so it is built once and shared by every
    layer; deeper layers consume the previous layer's features.  Point scores
    come from the final layer; per-layer weights are retained.  Callers that
    evaluate the same frame repeatedly may pass a precomputed `neighbors`
    array (it depends only on positions, never on parameters).
    """
    if not layers:
        raise DataError("attention stack needs at least one layer")
    for a, b in zip(layers, layers[1:]):
        if a.d_attention != b.d_in:
            raise DataError(
                f"stack widths do not chain: {a.d_attention} -> {b.d_in}")
    if neighbors is None:
        neighbors = knn_neighbors(frame, k_nn)
    positions = _positions_of(frame)
    features = _features_of(frame)
    layer_weights = []
    out = None
    for layer in layers:
        out = _attention_forward(layer, features, positions, neighbors)
        features = out.features
        layer_weights.append(out.weights)
    out.layer_weights = layer_weights
    return out


def attention_stack_forward_many(layers: list[VectorAttentionLayer], frames,
                                 k_nn: int,
                                 neighbors_list: list[np.ndarray] | None = None
                                 ) -> list[AttentionOutput]:
    """Run the stack over several frames in one concatenated pass.

    The kNN graph never crosses frames, so stacking the clouds with offset
    neighbor indices computes exactly what per-frame calls would, while
    amortizing kernel launches over the whole sequence.  Frames whose
    neighbor lists differ in width cannot share one array and fall back to
    per-frame calls.
    """
    if not frames:
        raise DataError("batched attention needs at least one frame")
    if neighbors_list is None:
        neighbors_list = [knn_neighbors(f, k_nn) for f in frames]
    if len(neighbors_list) != len(frames):
        raise DataError(
            f"{len(frames)} frames but {len(neighbors_list)} neighbor lists")
    if len({nb.shape[1] for nb in neighbors_list}) != 1:
        return [attention_stack_forward(layers, f, k_nn, neighbors=nb)
                for f, nb in zip(frames, neighbors_list)]

    counts = [f.n_points for f in frames]
    offsets = np.concatenate(([0], np.cumsum(counts[:-1])))
    features = torch.cat([_features_of(f) for f in frames])
    positions = torch.cat([_positions_of(f) for f in frames])
    neighbors = np.concatenate(
        [nb + off for nb, off in zip(neighbors_list, offsets)])

    stacked = attention_stack_forward(layers, _StackedCloud(features, positions),
                                      k_nn, neighbors=neighbors)
    outs = []
    for i, nb in enumerate(neighbors_list):
        rows = slice(int(offsets[i]), int(offsets[i]) + counts[i])
        out = AttentionOutput(features=stacked.features[rows],
                              weights=stacked.weights[rows],
                              neighbors=nb,
                              point_scores=stacked.point_scores[rows])
        out.layer_weights = [w[rows] for w in stacked.layer_weights]
        outs.append(out)
    return outs


class _StackedCloud:
    """Duck-typed frame stand-in for pre-concatenated tensors."""

    def __init__(self, features: torch.Tensor, positions: torch.Tensor):
        self.points = features
        self.positions = positions


def make_attention_stack(store: ParamStore, prefix: str, rng: np.random.Generator,
                         config: AttentionConfig, d_in: int = POINT_FEATURES
                         ) -> list[VectorAttentionLayer]:
    """Build and register a stack; layer 1 reads raw d_in features."""
    layers = []
    width = d_in
    d = config.d_attention
    for i in range(config.depth):
        base = f"{prefix}.{i}"
        layers.append(VectorAttentionLayer(
            phi=make_linear(store, f"{base}.phi", rng, width, d),
            psi=make_linear(store, f"{base}.psi", rng, width, d),
            alpha=make_linear(store, f"{base}.alpha", rng, width, d),
            # gamma's output only ever feeds the per-channel softmax, which is
            # shift-invariant, so a final bias would be an untrainable no-op
            gamma=make_mlp(store, f"{base}.gamma", rng,
                           [d, config.gamma_width, d], final_bias=False),
            delta=make_mlp(store, f"{base}.delta", rng,
                           [3, config.delta_width, d]),
        ))
        width = d
    return layers

"""Recurrent recognition heads over per-frame focus representations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .numerics import (
    LinearParams,
    MlpParams,
    ParamStore,
    linear_forward,
    make_linear,
    make_mlp,
    mlp_forward,
    softmax,
    xavier_uniform,
)
from .validation import DataError

APP_CLASSES = 5
KEY_CLASSES = 36  # 26 letters + 10 digits


@dataclass(frozen=True)
class RecurrentCellParams:
    """One gated recurrent cell: input/forget/output gates plus candidate."""

    wi: torch.Tensor
    ui: torch.Tensor
    bi: torch.Tensor
    wf: torch.Tensor
    uf: torch.Tensor
    bf: torch.Tensor
    wo: torch.Tensor
    uo: torch.Tensor
    bo: torch.Tensor
    wg: torch.Tensor
    ug: torch.Tensor
    bg: torch.Tensor

    def __post_init__(self):
        h, d = self.wi.shape
        for name in ("wi", "wf", "wo", "wg"):
            if getattr(self, name).shape != (h, d):
                raise DataError(f"{name} must have shape {(h, d)}")
        for name in ("ui", "uf", "uo", "ug"):
            if getattr(self, name).shape != (h, h):
                raise DataError(f"{name} must have shape {(h, h)}")
        for name in ("bi", "bf", "bo", "bg"):
            if getattr(self, name).shape != (h,):
                raise DataError(f"{name} must have shape {(h,)}")

    @property
    def hidden(self) -> int:
        return self.wi.shape[0]

    @property
    def d_in(self) -> int:
        return self.wi.shape[1]

    def n_scalars(self) -> int:
        return sum(getattr(self, f).numel() for f in
                   ("wi", "ui", "bi", "wf", "uf", "bf",
                    "wo", "uo", "bo", "wg", "ug", "bg"))


@dataclass(frozen=True)
class AppNetParams:
    """Application-type head: per-frame features, one forward scan, 5 logits."""

    feature_net: MlpParams
    action_module: RecurrentCellParams
    decision: LinearParams

    def __post_init__(self):
        if self.decision.weight.shape[0] != APP_CLASSES:
            raise DataError(
                f"AppNet must emit {APP_CLASSES} logits, "
                f"got {self.decision.weight.shape[0]}")
        if self.decision.weight.shape[1] != self.action_module.hidden:
            raise DataError("decision width does not match the recurrent hidden size")


@dataclass(frozen=True)
class KeyNetParams:
    """Keystroke head: per-frame features, bidirectional scans, 36 logits."""

    feature_net: MlpParams
    forward_cell: RecurrentCellParams
    backward_cell: RecurrentCellParams
    decision: LinearParams

    def __post_init__(self):
        if self.decision.weight.shape[0] != KEY_CLASSES:
            raise DataError(
                f"KeyNet must emit {KEY_CLASSES} logits, "
                f"got {self.decision.weight.shape[0]}")
        if self.forward_cell.hidden != self.backward_cell.hidden:
            raise DataError("directional cells must share a hidden width")
        if self.decision.weight.shape[1] != 2 * self.forward_cell.hidden:
            raise DataError("decision width must cover both directions")


def _stack_reps(reps) -> torch.Tensor:
    if isinstance(reps, torch.Tensor):
        if reps.dim() != 2:
            raise DataError(f"representations must be (frames, width), "
                            f"got {tuple(reps.shape)}")
        seq = reps
    else:
        reps = list(reps)
        if any(not isinstance(r, torch.Tensor) or r.dim() != 1 for r in reps):
            raise DataError("each representation must be a 1-D tensor")
        widths = {int(r.shape[0]) for r in reps}
        if len(widths) > 1:
            raise DataError(f"representation widths differ: {sorted(widths)}")
        seq = torch.stack(reps) if reps else torch.zeros((0, 0))
    if seq.shape[0] == 0:
        raise DataError("need at least one frame representation")
    return seq


def recurrent_scan(cell: RecurrentCellParams, xs: torch.Tensor) -> torch.Tensor:
    """Run the gated cell over xs rows in order; returns the final hidden state."""
    if xs.shape[1] != cell.d_in:
        raise DataError(f"cell expects width {cell.d_in}, got {xs.shape[1]}")
    h = xs.new_zeros(cell.hidden)
    c = xs.new_zeros(cell.hidden)
    for t in range(xs.shape[0]):
        x = xs[t]
        i = torch.sigmoid(cell.wi @ x + cell.ui @ h + cell.bi)
        f = torch.sigmoid(cell.wf @ x + cell.uf @ h + cell.bf)
        o = torch.sigmoid(cell.wo @ x + cell.uo @ h + cell.bo)
        g = torch.tanh(cell.wg @ x + cell.ug @ h + cell.bg)
        c = f * c + i * g
        h = o * torch.tanh(c)
    return h


def appnet_forward(p: AppNetParams, reps) -> torch.Tensor:
    seq = _stack_reps(reps)
    feats = mlp_forward(p.feature_net, seq)
    final = recurrent_scan(p.action_module, feats)
    return linear_forward(p.decision, final.unsqueeze(0))[0]


def keynet_hidden_states(p: KeyNetParams, reps) -> tuple[torch.Tensor, torch.Tensor]:
    """Final hidden states of the forward and backward scans, pre-decision."""
    seq = _stack_reps(reps)
    feats = mlp_forward(p.feature_net, seq)
    h_fwd = recurrent_scan(p.forward_cell, feats)
    h_bwd = recurrent_scan(p.backward_cell, feats.flip(0))
    return h_fwd, h_bwd


def keynet_forward(p: KeyNetParams, reps) -> torch.Tensor:
    h_fwd, h_bwd = keynet_hidden_states(p, reps)
    return linear_forward(p.decision, torch.cat([h_fwd, h_bwd]).unsqueeze(0))[0]


def classify(logits: torch.Tensor) -> tuple[int, float]:
    """Argmax label (lowest index on ties) and its softmax confidence."""
    values = logits.detach().reshape(-1)
    if values.shape[0] == 0:
        raise DataError("cannot classify empty logits")
    label = int(np.argmax(values.numpy()))
    confidence = float(softmax(values, dim=0)[label])
    return label, confidence


def make_recurrent_cell(store: ParamStore, prefix: str, rng: np.random.Generator,
                        d_in: int, hidden: int) -> RecurrentCellParams:
    def w(name):
        return store.register(f"{prefix}.{name}", xavier_uniform(rng, hidden, d_in))

    def u(name):
        return store.register(f"{prefix}.{name}", xavier_uniform(rng, hidden, hidden))

    def b(name, value=0.0):
        return store.register(f"{prefix}.{name}", np.full(hidden, value))

    # the forget gate starts open (bias 1) so the cell state survives the
    # first updates instead of being erased before training can use it
    return RecurrentCellParams(
        wi=w("wi"), ui=u("ui"), bi=b("bi"),
        wf=w("wf"), uf=u("uf"), bf=b("bf", 1.0),
        wo=w("wo"), uo=u("uo"), bo=b("bo"),
        wg=w("wg"), ug=u("ug"), bg=b("bg"),
    )


def make_appnet(store: ParamStore, prefix: str, rng: np.random.Generator,
                rep_width: int, hidden: int = 96) -> AppNetParams:
    return AppNetParams(
        feature_net=make_mlp(store, f"{prefix}.feature", rng, [rep_width, hidden]),
        action_module=make_recurrent_cell(store, f"{prefix}.cell", rng,
                                          hidden, hidden),
        decision=make_linear(store, f"{prefix}.decision", rng, hidden, APP_CLASSES),
    )


def make_keynet(store: ParamStore, prefix: str, rng: np.random.Generator,
                rep_width: int, hidden: int = 64) -> KeyNetParams:
    return KeyNetParams(
        feature_net=make_mlp(store, f"{prefix}.feature", rng, [rep_width, hidden]),
        forward_cell=make_recurrent_cell(store, f"{prefix}.fwd", rng, hidden, hidden),
        backward_cell=make_recurrent_cell(store, f"{prefix}.bwd", rng, hidden, hidden),
        decision=make_linear(store, f"{prefix}.decision", rng,
                             2 * hidden, KEY_CLASSES),
    )

"""Closed-form FLOP and parameter accounting for every pipeline variant.

Every constant below is documented in COST.md.  Counts are exact Python
integers; one multiply-add is 2 FLOPs, a softmax over m entries is 5*m, and
elementwise ops cost 1 per scalar.  Integer bookkeeping (sorting, argmax,
index gathers) costs 0 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

from .validation import DataError

APP_CLASSES = 5
KEY_CLASSES = 36


@dataclass(frozen=True)
class FlopReport:
    """Exact per-component FLOP counts for one sequence forward pass."""

    attention: int
    ngsa: int
    focus: int
    head: int
    input_shape: tuple[int, int, int]  # (frames, points, d_attention)

    @property
    def total(self) -> int:
        return self.attention + self.ngsa + self.focus + self.head

    def to_json(self) -> dict:
        return {
            "input_shape": {"frames": self.input_shape[0],
                            "points": self.input_shape[1],
                            "d_attention": self.input_shape[2]},
            "components": {"attention": self.attention, "ngsa": self.ngsa,
                           "focus": self.focus, "head": self.head},
            "total": self.total,
        }

    @staticmethod
    def csv_header() -> list[str]:
        return ["frames", "points", "d_attention", "flops_attention",
                "flops_ngsa", "flops_focus", "flops_head", "flops_total"]

    def csv_row(self) -> list[str]:
        s, n, d = self.input_shape
        return [str(v) for v in
                (s, n, d, self.attention, self.ngsa, self.focus,
                 self.head, self.total)]


@dataclass(frozen=True)
class ParamReport:
    """Exact per-component trainable-scalar counts."""

    attention: int
    ngsa: int
    head: int

    @property
    def total(self) -> int:
        return self.attention + self.ngsa + self.head

    def to_json(self) -> dict:
        return {
            "components": {"attention": self.attention, "ngsa": self.ngsa,
                           "head": self.head},
            "total": self.total,
        }

    @staticmethod
    def csv_header() -> list[str]:
        return ["params_attention", "params_ngsa", "params_head", "params_total"]

    def csv_row(self) -> list[str]:
        return [str(v) for v in (self.attention, self.ngsa, self.head, self.total)]


# ---------------------------------------------------------------------------
# primitive counts
# ---------------------------------------------------------------------------

def linear_flops(n: int, d_in: int, d_out: int, bias: bool = True) -> int:
    """2*n*d_in*d_out multiply-adds, plus n*d_out bias adds."""
    return 2 * n * d_in * d_out + (n * d_out if bias else 0)


def linear_params(d_in: int, d_out: int, bias: bool = True) -> int:
    return d_in * d_out + (d_out if bias else 0)


def mlp2_flops(n: int, d_in: int, hidden: int, d_out: int,
               final_bias: bool = True) -> int:
    """Two-layer relu MLP on n rows; relu costs 1 per hidden scalar."""
    return (linear_flops(n, d_in, hidden) + n * hidden
            + linear_flops(n, hidden, d_out, bias=final_bias))


def mlp2_params(d_in: int, hidden: int, d_out: int,
                final_bias: bool = True) -> int:
    return linear_params(d_in, hidden) + linear_params(hidden, d_out,
                                                       bias=final_bias)


def softmax_flops(instances: int, m: int) -> int:
    return 5 * m * instances


def cell_step_flops(d_in: int, h: int) -> int:
    """One gated-cell step: 4 gates (two matvecs, two adds, one activation
    each) plus the state update f*c + i*g and h = o*tanh(c)."""
    gates = 4 * (2 * d_in * h + 2 * h * h + 2 * h + h)
    state = 3 * h + h + h
    return gates + state


def cell_params(d_in: int, h: int) -> int:
    return 4 * (h * d_in + h * h + h)


def dense_attention_flops(n: int, d: int) -> dict:
    """A standard dense self-attention block on n tokens of width d.

    quadratic collects every n^2 term (scores, softmax, value mixing);
    linear collects the four projections.  This is the downstream-model
    stand-in for the O(N^2 * D) argument.
    """
    if n < 0 or d < 0:
        raise DataError(f"shape must be non-negative, got n={n}, d={d}")
    quadratic = 2 * n * n * d + softmax_flops(n, n) + 2 * n * n * d
    linear = 4 * linear_flops(n, d, d)
    return {"quadratic": quadratic, "linear": linear,
            "total": quadratic + linear}


# ---------------------------------------------------------------------------
# pipeline components
# ---------------------------------------------------------------------------

def attention_layer_flops(n: int, nb: int, d_in: int, d: int,
                          gamma_hidden: int, delta_hidden: int) -> int:
    """One vector-attention layer: n points, nb neighbors each."""
    pairs = n * nb
    proj = 3 * linear_flops(n, d_in, d)
    rel = 3 * pairs
    delta = mlp2_flops(pairs, 3, delta_hidden, d)
    pre = 2 * pairs * d
    gamma = mlp2_flops(pairs, d, gamma_hidden, d, final_bias=False)
    sm = softmax_flops(n * d, nb)
    aggregate = 2 * pairs * d
    return proj + rel + delta + pre + gamma + sm + aggregate


def _shape_of(config, input_shape) -> tuple[int, int]:
    if input_shape is None:
        return (config.synth.frames_per_sequence, config.synth.points_per_frame)
    s, n = int(input_shape[0]), int(input_shape[1])
    if s < 0 or n < 0:
        raise DataError(f"input shape must be non-negative, got {(s, n)}")
    return s, n


def _head_flops(config, frames: int, rep_width: int) -> int:
    if config.head == "appnet":
        h = config.app_hidden
        return (frames * (linear_flops(1, rep_width, h) + cell_step_flops(h, h))
                + linear_flops(1, h, APP_CLASSES))
    h = config.key_hidden
    return (frames * (linear_flops(1, rep_width, h) + 2 * cell_step_flops(h, h))
            + linear_flops(1, 2 * h, KEY_CLASSES))


def count_flops(config, input_shape=None, dense: bool | None = None) -> FlopReport:
    """FLOPs of one sequence forward pass under `config`.

    input_shape is (frames, points); it defaults to the config's synthetic
    data shape.  `dense` forces global neighborhoods (every point attends to
    all points); by default that follows from ablation no_grouping, which
    removes the spatial structure the local neighborhoods come from.
    """
    s, n = _shape_of(config, input_shape)
    att_cfg = config.attention
    d = att_cfg.d_attention
    ablation = config.focus.ablation
    if dense is None:
        dense = ablation == "no_grouping"
    if n == 0 or s == 0:
        return FlopReport(0, 0, 0, 0, (s, n, d))

    nb = n if dense else min(att_cfg.k_nn, n)
    per_frame_attention = 0
    d_in = 5
    for _ in range(att_cfg.depth):
        per_frame_attention += attention_layer_flops(
            n, nb, d_in, d, att_cfg.gamma_width, att_cfg.delta_width)
        d_in = d

    # selection arithmetic: incoming-mass scatter and channel means, the
    # per-point w contributions, then group sums/means and the group softmax
    # (group count bounded above by n)
    scatter = n * nb * d + n * d + n
    contributions = 0 if ablation == "no_attention_score" else 2 * n * d
    group_terms = 0 if ablation == "no_grouping" else n + 2 * n + softmax_flops(1, n)
    per_frame_ngsa = scatter + contributions + group_terms

    head_len = n if ablation == "no_top_k" else config.focus.top_k
    head = _head_flops(config, s, head_len * d)

    return FlopReport(
        attention=s * per_frame_attention,
        ngsa=s * per_frame_ngsa,
        focus=0,
        head=head,
        input_shape=(s, n, d),
    )


def count_params(config) -> ParamReport:
    """Trainable scalar count; must equal the checkpoint exactly."""
    att_cfg = config.attention
    d = att_cfg.d_attention
    attention = 0
    d_in = 5
    for _ in range(att_cfg.depth):
        attention += 3 * linear_params(d_in, d)
        attention += mlp2_params(d, att_cfg.gamma_width, d, final_bias=False)
        attention += mlp2_params(3, att_cfg.delta_width, d)
        d_in = d

    if config.focus.ablation == "no_top_k":
        rep_width = config.synth.points_per_frame * d
    else:
        rep_width = config.focus.top_k * d
    if config.head == "appnet":
        h = config.app_hidden
        head = (linear_params(rep_width, h) + cell_params(h, h)
                + linear_params(h, APP_CLASSES))
    else:
        h = config.key_hidden
        head = (linear_params(rep_width, h) + 2 * cell_params(h, h)
                + linear_params(2 * h, KEY_CLASSES))

    return ParamReport(attention=attention, ngsa=d, head=head)


def baseline_flops(config, input_shape=None) -> FlopReport:
    """The everything-on reference: global attention, heads over all points.

    This is the cost story of a downstream model without the two pruning
    mechanisms (no spatial grouping, no top-K truncation), so the attention
    runs dense and the heads read all n points' features.
    """
    s, n = _shape_of(config, input_shape)
    att_cfg = config.attention
    d = att_cfg.d_attention
    if n == 0 or s == 0:
        return FlopReport(0, 0, 0, 0, (s, n, d))

    per_frame_attention = 0
    d_in = 5
    for _ in range(att_cfg.depth):
        per_frame_attention += attention_layer_flops(
            n, n, d_in, d, att_cfg.gamma_width, att_cfg.delta_width)
        d_in = d
    scatter = n * n * d + n * d + n
    return FlopReport(
        attention=s * per_frame_attention,
        ngsa=s * scatter,
        focus=0,
        head=_head_flops(config, s, n * d),
        input_shape=(s, n, d),
    )


def reduction_ratio(full: FlopReport, pruned: FlopReport) -> float:
    """Fraction of full's FLOPs that pruning removed."""
    if full.total == 0:
        raise DataError("reduction against a zero-FLOP reference")
    return 1.0 - pruned.total / full.total


def reduction_by_component(full: FlopReport, pruned: FlopReport) -> dict:
    out = {}
    for name in ("attention", "ngsa", "focus", "head"):
        f = getattr(full, name)
        p = getattr(pruned, name)
        out[name] = None if f == 0 else 1.0 - p / f
    return out

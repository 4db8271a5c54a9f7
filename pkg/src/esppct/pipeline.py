"""End-to-end orchestration: config, model assembly, training, evaluation,
and the profile/ablation experiment drivers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .attention import (
    AttentionConfig,
    attention_stack_forward,
    attention_stack_forward_many,
    knn_neighbors,
    make_attention_stack,
)
from .cost import FlopReport, ParamReport, count_flops, count_params
from .focus import ABLATIONS, FocusConfig, concat_representation, focus_stage
from .heads import (
    appnet_forward,
    classify,
    keynet_forward,
    make_appnet,
    make_keynet,
)
from .ngsa import (
    Group,
    Grouping,
    GroupingConfig,
    group_means,
    group_points,
    localization_decision,
    make_region_vector,
    ngsa_scores,
)
from .numerics import (
    GradCheckReport,
    ParamStore,
    backward,
    cross_entropy,
    gradient_report,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)
from .pointcloud import (
    LabeledDataset,
    Sequence,
    SynthConfig,
    semantic_masks,
    synth_generate,
)
from .validation import DataError, NumericError

HEAD_CHOICES = ("appnet", "keynet")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs: data shape, model shape, training schedule."""

    synth: SynthConfig = field(default_factory=SynthConfig)
    grouping: GroupingConfig = field(default_factory=GroupingConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)
    focus: FocusConfig = field(default_factory=FocusConfig)
    head: str = "appnet"
    app_hidden: int = 96
    key_hidden: int = 64
    epochs: int = 700
    patience: int = 200
    learning_rate: float = 1e-3
    batch_size: int = 10
    seed: int = 0
    region_align_weight: float = 1.0

    def __post_init__(self):
        if self.head not in HEAD_CHOICES:
            raise DataError(f"head must be one of {HEAD_CHOICES}, got {self.head!r}")
        for name in ("app_hidden", "key_hidden", "epochs", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise DataError(f"{name} must be a positive integer, got {v!r}")
        if not isinstance(self.patience, int) or self.patience < 0:
            raise DataError(f"patience must be an integer >= 0, got {self.patience!r}")
        if self.patience > self.epochs:
            raise DataError(
                f"patience ({self.patience}) must not exceed epochs ({self.epochs})")
        if not self.learning_rate > 0:
            raise DataError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.region_align_weight < 0:
            raise DataError("region_align_weight must be >= 0")

    @property
    def n_classes(self) -> int:
        return 5 if self.head == "appnet" else 36

    @property
    def rep_width(self) -> int:
        if self.focus.ablation == "no_top_k":
            return self.synth.points_per_frame * self.attention.d_attention
        return self.focus.top_k * self.attention.d_attention

    def to_json(self) -> dict:
        def sub(cfg):
            out = {}
            for f in fields(cfg):
                v = getattr(cfg, f.name)
                out[f.name] = list(v) if isinstance(v, tuple) else v
            return out

        own = {f.name: getattr(self, f.name) for f in fields(self)
               if f.name not in ("synth", "grouping", "attention", "focus")}
        return {"synth": sub(self.synth), "grouping": sub(self.grouping),
                "attention": sub(self.attention), "focus": sub(self.focus), **own}

    @staticmethod
    def from_json(data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise DataError(f"config must be a JSON object, got {type(data).__name__}")
        data = dict(data)
        parts = {}
        for key, cls in (("synth", SynthConfig), ("grouping", GroupingConfig),
                         ("attention", AttentionConfig), ("focus", FocusConfig)):
            raw = data.pop(key, None)
            if raw is None:
                parts[key] = cls()
                continue
            known = {f.name for f in fields(cls)}
            unknown = set(raw) - known
            if unknown:
                raise DataError(f"unknown {key} config keys: {sorted(unknown)}")
            if key == "grouping" and "grid_origin" in raw:
                raw = {**raw, "grid_origin": tuple(raw["grid_origin"])}
            parts[key] = cls(**raw)
        own_names = {f.name for f in fields(PipelineConfig)
                     if f.name not in ("synth", "grouping", "attention", "focus")}
        unknown = set(data) - own_names
        if unknown:
            raise DataError(f"unknown config keys: {sorted(unknown)}")
        try:
            return PipelineConfig(**parts, **data)
        except TypeError as exc:
            raise DataError(f"invalid config: {exc}") from None


def load_config(path) -> PipelineConfig:
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    return PipelineConfig.from_json(data)


def save_config(config: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_json(), indent=2, sort_keys=True)
                          + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# model assembly and the per-sequence forward pass
# ---------------------------------------------------------------------------

@dataclass
class FrameTrace:
    """What the localization stage decided for one frame, for metrics."""

    region_members: np.ndarray | None
    decision: str | None
    confidence: float | None
    group_sum_argmax: int | None
    group_count: int


@dataclass
class FrameStatics:
    """Parameter-independent per-frame structure: the kNN graph and voxel
    grouping depend only on point positions, so repeated passes over the
    same frame (every training epoch) can reuse them."""

    neighbors: np.ndarray | None
    grouping: Grouping | None


class EspPctModel:
    """The two-stage recognizer: attention scoring, region selection, focus,
    and one recurrent head, all parameters in a single store."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        self.layers = make_attention_stack(self.store, "attention", rng,
                                           config.attention)
        self.w = make_region_vector(self.store, "ngsa.w", rng,
                                    config.attention.d_attention)
        if config.head == "appnet":
            self.head = make_appnet(self.store, "head", rng,
                                    config.rep_width, config.app_hidden)
            self._head_forward = appnet_forward
        else:
            self.head = make_keynet(self.store, "head", rng,
                                    config.rep_width, config.key_hidden)
            self._head_forward = keynet_forward

    def frame_statics(self, frame) -> FrameStatics:
        n = frame.n_points
        if n == 0:
            return FrameStatics(None, None)
        ablation = self.config.focus.ablation
        k_nn = n if ablation == "no_grouping" else self.config.attention.k_nn
        neighbors = knn_neighbors(frame, k_nn)
        if ablation == "no_grouping":
            grouping = Grouping(group_of=np.zeros(n, dtype=np.int64),
                                groups=[Group(np.arange(n), (0, 0, 0))])
        else:
            grouping = group_points(frame, self.config.grouping)
        return FrameStatics(neighbors, grouping)

    def _frame_select(self, frame, att, grouping, want_alignment: bool
                      ) -> tuple[torch.Tensor, FrameTrace, torch.Tensor | None]:
        cfg = self.config
        width = cfg.rep_width
        scores = ngsa_scores(att, grouping, self.w)
        decision = localization_decision(scores, cfg.focus.eta)
        out = focus_stage(att, scores, grouping, cfg.focus, frame=frame)

        rep = out.representation
        if rep.shape[0] > width:
            raise DataError(
                f"frame produced a {rep.shape[0]}-wide representation but the "
                f"head expects {width}; the configured points-per-frame is "
                f"too small for this data")
        if rep.shape[0] < width:
            rep = torch.cat([rep, rep.new_zeros(width - rep.shape[0])])
        trace = FrameTrace(
            region_members=grouping.groups[decision.region_index].members,
            decision=decision.decision,
            confidence=decision.confidence,
            group_sum_argmax=int(np.argmax(scores.sum_scores)),
            group_count=len(grouping.groups),
        )

        align = None
        if want_alignment and len(grouping.groups) >= 2:
            # The hard argmax in region selection passes no gradient, so the
            # selector's mean scores are trained against the summed
            # attention-mass target directly; the gradient reaches both w and
            # the attention stack.  The target itself is an index, fixed
            # under the reverse pass.
            group_scores = group_means(att.features @ self.w, grouping)
            align = cross_entropy(group_scores, trace.group_sum_argmax)
        return rep, trace, align

    def frame_forward(self, frame, want_alignment: bool = False,
                      statics: FrameStatics | None = None
                      ) -> tuple[torch.Tensor, FrameTrace, torch.Tensor | None]:
        cfg = self.config
        n = frame.n_points
        if n == 0:
            # a fully occluded frame contributes silence, not a crash
            return (torch.zeros(cfg.rep_width, dtype=torch.float64),
                    FrameTrace(None, None, None, None, 0), None)
        if statics is None:
            statics = self.frame_statics(frame)
        k_nn = n if cfg.focus.ablation == "no_grouping" else cfg.attention.k_nn
        att = attention_stack_forward(self.layers, frame, k_nn,
                                      neighbors=statics.neighbors)
        return self._frame_select(frame, att, statics.grouping, want_alignment)

    def sequence_statics(self, seq: Sequence) -> list[FrameStatics]:
        return [self.frame_statics(frame) for frame in seq.frames]

    def sequence_forward(self, seq: Sequence, want_alignment: bool = False,
                         statics: list[FrameStatics] | None = None
                         ) -> tuple[torch.Tensor, list[FrameTrace],
                                    torch.Tensor | None]:
        if statics is None:
            statics = self.sequence_statics(seq)
        frames = seq.frames
        width = self.config.rep_width
        reps: list = [torch.zeros(width, dtype=torch.float64)] * len(frames)
        traces: list = [FrameTrace(None, None, None, None, 0)] * len(frames)
        aligns = []

        live = [i for i, f in enumerate(frames) if f.n_points > 0]
        if live:
            atts = attention_stack_forward_many(
                self.layers, [frames[i] for i in live],
                self.config.attention.k_nn,
                [statics[i].neighbors for i in live])
            for i, att in zip(live, atts):
                rep, trace, align = self._frame_select(
                    frames[i], att, statics[i].grouping, want_alignment)
                reps[i] = rep
                traces[i] = trace
                if align is not None:
                    aligns.append(align)
        logits = self._head_forward(self.head, torch.stack(reps))
        return (logits, traces,
                torch.stack(aligns).mean() if aligns else None)

    def sequence_logits(self, seq: Sequence) -> tuple[torch.Tensor, list[FrameTrace]]:
        logits, traces, _ = self.sequence_forward(seq)
        return logits, traces


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    """What a run reports: accuracy, confusion, curves, cost."""

    top1_accuracy: float | None
    confusion: np.ndarray | None
    train_loss: list[float]
    val_loss: list[float]
    flops: FlopReport
    params: ParamReport
    region_purity_mean: float | None = None
    region_purity_hit_rate: float | None = None
    refine_fraction: float | None = None
    n_samples: int = 0

    def to_json(self) -> dict:
        return {
            "top1_accuracy": self.top1_accuracy,
            "confusion": None if self.confusion is None
            else self.confusion.tolist(),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "flops": self.flops.to_json(),
            "params": self.params.to_json(),
            "region_purity_mean": self.region_purity_mean,
            "region_purity_hit_rate": self.region_purity_hit_rate,
            "refine_fraction": self.refine_fraction,
            "n_samples": self.n_samples,
        }


@dataclass
class TrainedModel:
    model: EspPctModel
    config: PipelineConfig
    best_val_loss: float
    best_epoch: int
    stopped_epoch: int

    def save(self, path) -> None:
        extra = {
            "config": self.config.to_json(),
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
        }
        save_checkpoint(self.model.store, path, extra=extra)


def load_trained(path) -> TrainedModel:
    arrays, extra = load_checkpoint(path)
    for key in ("config", "best_val_loss", "best_epoch", "stopped_epoch"):
        if key not in extra:
            raise DataError(f"checkpoint {path} lacks header field {key!r}")
    config = PipelineConfig.from_json(extra["config"])
    model = EspPctModel(config)
    model.store.load_state(arrays)
    return TrainedModel(model=model, config=config,
                        best_val_loss=float(extra["best_val_loss"]),
                        best_epoch=int(extra["best_epoch"]),
                        stopped_epoch=int(extra["stopped_epoch"]))


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------

def _check_labels(ds: LabeledDataset, n_classes: int, what: str) -> None:
    bad = [s.label for s in ds.sequences if s.label >= n_classes]
    if bad:
        raise DataError(
            f"{what} labels {sorted(set(bad))} exceed the head's "
            f"{n_classes} classes")


def _dataset_loss(model: EspPctModel, ds: LabeledDataset,
                  statics: list[list[FrameStatics]] | None = None) -> float:
    total = 0.0
    if statics is None:
        statics = [None] * len(ds.sequences)
    with torch.no_grad():
        for seq, st in zip(ds.sequences, statics):
            logits, _, _ = model.sequence_forward(seq, statics=st)
            total += float(cross_entropy(logits, seq.label))
    return total / len(ds.sequences)


def train(config: PipelineConfig, splits: dict[str, LabeledDataset]
          ) -> tuple[TrainedModel, Metrics]:
    """Plain SGD on cross-entropy with early stopping on validation loss.

    Either epochs run out or `patience` epochs pass without the validation
    loss making a new low; the returned model carries the best-validation
    parameters, not the last ones.
    """
    for name in ("train", "val"):
        if name not in splits or not splits[name].sequences:
            raise DataError(f"training needs a non-empty {name!r} split")
    torch.set_num_threads(1)
    train_ds, val_ds = splits["train"], splits["val"]
    _check_labels(train_ds, config.n_classes, "train")
    _check_labels(val_ds, config.n_classes, "val")

    model = EspPctModel(config)
    train_statics = [model.sequence_statics(s) for s in train_ds.sequences]
    val_statics = [model.sequence_statics(s) for s in val_ds.sequences]
    order_rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    best_val = float("inf")
    best_state = model.store.state_arrays()
    best_epoch = 0
    train_curve: list[float] = []
    val_curve: list[float] = []
    stopped = 0

    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_ds.sequences))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            model.store.zero_grad()
            want_align = config.region_align_weight > 0
            losses = []
            for idx in batch:
                seq = train_ds.sequences[idx]
                logits, _, align = model.sequence_forward(
                    seq, want_align, statics=train_statics[idx])
                loss = cross_entropy(logits, seq.label)
                if align is not None:
                    loss = loss + config.region_align_weight * align
                losses.append(loss)
            batch_loss = torch.stack(losses).mean()
            if not torch.isfinite(batch_loss):
                raise NumericError(
                    f"training diverged at epoch {epoch}: loss {batch_loss.item()}")
            backward(batch_loss)
            sgd_step(model.store, config.learning_rate)
            epoch_loss += float(batch_loss.detach()) * len(batch)
        train_curve.append(epoch_loss / len(order))

        val_loss = _dataset_loss(model, val_ds, val_statics)
        if not np.isfinite(val_loss):
            raise NumericError(f"validation loss diverged at epoch {epoch}")
        val_curve.append(val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best_state = model.store.state_arrays()
            best_epoch = epoch
        stopped = epoch
        if epoch - best_epoch >= config.patience:
            break

    model.store.load_state(best_state)
    trained = TrainedModel(model=model, config=config, best_val_loss=best_val,
                           best_epoch=best_epoch, stopped_epoch=stopped)
    metrics = evaluate(trained, val_ds)
    metrics.train_loss = train_curve
    metrics.val_loss = val_curve
    return trained, metrics


def evaluate(trained: TrainedModel, ds: LabeledDataset) -> Metrics:
    """Deterministic forward pass: confusion, top-1, localization metrics."""
    config = trained.config
    if not ds.sequences:
        raise DataError("cannot evaluate an empty dataset")
    _check_labels(ds, config.n_classes, "eval")
    torch.set_num_threads(1)
    model = trained.model
    c = config.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    purities: list[float] = []
    purity_hits = 0
    purity_frames = 0
    refines = 0
    decided = 0

    with torch.no_grad():
        for seq in ds.sequences:
            logits, traces = model.sequence_logits(seq)
            pred, _ = classify(logits)
            confusion[seq.label, pred] += 1
            masks = semantic_masks(seq)
            for t, trace in enumerate(traces):
                if trace.decision is not None:
                    decided += 1
                    if trace.decision == "refine":
                        refines += 1
                if masks is not None and trace.region_members is not None:
                    members = trace.region_members
                    purity = float(masks[t][members].mean())
                    purities.append(purity)
                    purity_frames += 1
                    if purity >= 0.9:
                        purity_hits += 1

    total = confusion.sum()
    return Metrics(
        top1_accuracy=float(np.trace(confusion) / total),
        confusion=confusion,
        train_loss=[],
        val_loss=[],
        flops=count_flops(config),
        params=count_params(config),
        region_purity_mean=(float(np.mean(purities)) if purities else None),
        region_purity_hit_rate=(purity_hits / purity_frames
                                if purity_frames else None),
        refine_fraction=(refines / decided if decided else None),
        n_samples=int(total),
    )


# ---------------------------------------------------------------------------
# experiment drivers
# ---------------------------------------------------------------------------

def gradcheck_pipeline(config: PipelineConfig, seed: int = 0,
                       eps: float = 1e-4, tolerance: float = 1e-4
                       ) -> GradCheckReport:
    """Finite-difference check of every parameter through the training loss.

    Builds the model from `config` and runs one synthetic sequence through
    classification plus the region-alignment term.  Index selections (region
    choice, top-K membership, the alignment target) are constants under the
    reverse pass, so they are pinned from an initial forward pass before
    differencing; without the pin a perturbation that flips a selection
    measures the jump between branches instead of the gradient.

    The probe sequence is capped at 3 frames of 20 points: the reverse pass
    is shape-generic, and a larger probe multiplies both runtime (every
    parameter entry costs two forward passes) and the density of relu
    pre-activations landing within eps of their kink, without exercising any
    code path the capped probe misses.  Model structure (widths, depth,
    head, ablation) still comes from `config`, so parameter-heavy configs
    remain slow to sweep.
    """
    torch.set_num_threads(1)
    probe = config.synth
    if probe.frames_per_sequence > 3:
        probe = replace(probe, frames_per_sequence=3)
    if probe.points_per_frame > 20:
        scale = 20 / probe.points_per_frame
        semantic = max(1, round(probe.semantic_cluster_points * scale))
        probe = replace(probe, points_per_frame=20,
                        semantic_cluster_points=semantic,
                        noise_points=20 - semantic)
    synth = replace(probe, classes=1, sequences_per_class=1, seed=seed)
    config = replace(config, synth=replace(config.synth, seed=seed), seed=seed)
    seq = synth_generate(synth).sequences[0]
    model = EspPctModel(config)
    weight = config.region_align_weight
    width = config.rep_width

    pins = []
    with torch.no_grad():
        for i, frame in enumerate(seq.frames):
            if frame.n_points == 0:
                continue
            statics = model.frame_statics(frame)
            att = attention_stack_forward(model.layers, frame, 0,
                                          neighbors=statics.neighbors)
            scores = ngsa_scores(att, statics.grouping, model.w)
            out = focus_stage(att, scores, statics.grouping, config.focus,
                              frame=frame)
            target = (int(np.argmax(scores.sum_scores))
                      if len(statics.grouping.groups) >= 2 else None)
            pins.append((i, statics, out.selected_indices, target))

    def loss_fn(_store):
        reps = [torch.zeros(width, dtype=torch.float64)] * len(seq.frames)
        aligns = []
        for i, statics, chosen, target in pins:
            att = attention_stack_forward(model.layers, seq.frames[i], 0,
                                          neighbors=statics.neighbors)
            rep = concat_representation(att.features, chosen)
            if rep.shape[0] < width:
                rep = torch.cat([rep, rep.new_zeros(width - rep.shape[0])])
            reps[i] = rep
            if weight > 0 and target is not None:
                group_scores = group_means(att.features @ model.w,
                                           statics.grouping)
                aligns.append(cross_entropy(group_scores, target))
        logits = model._head_forward(model.head, torch.stack(reps))
        loss = cross_entropy(logits, seq.label)
        if aligns:
            loss = loss + weight * torch.stack(aligns).mean()
        return loss

    return gradient_report(loss_fn, model.store, eps=eps, tolerance=tolerance)


@dataclass
class ProfileRow:
    top_k: int
    eta: float
    flops: FlopReport
    params: ParamReport
    metrics: Metrics | None

    @staticmethod
    def csv_header() -> list[str]:
        return (["top_k", "eta", "top1_accuracy"]
                + FlopReport.csv_header() + ParamReport.csv_header())

    def csv_row(self) -> list[str]:
        acc = ""
        if self.metrics is not None and self.metrics.top1_accuracy is not None:
            acc = f"{self.metrics.top1_accuracy:.6f}"
        return ([str(self.top_k), repr(self.eta), acc]
                + self.flops.csv_row() + self.params.csv_row())


def profile(config: PipelineConfig, grid: list[tuple[int, float]],
            splits: dict[str, LabeledDataset] | None = None) -> list[ProfileRow]:
    """Cost (and optionally accuracy) per (top_k, eta) grid cell."""
    if not grid:
        raise DataError("profile needs at least one (top_k, eta) pair")
    rows = []
    for top_k, eta in grid:
        cell = replace(config, focus=replace(config.focus, top_k=top_k, eta=eta))
        metrics = None
        if splits is not None:
            trained, _ = train(cell, splits)
            test_ds = splits.get("test") or splits["val"]
            metrics = evaluate(trained, test_ds)
        rows.append(ProfileRow(top_k=top_k, eta=eta, flops=count_flops(cell),
                               params=count_params(cell), metrics=metrics))
    return rows


@dataclass
class AblationRow:
    name: str
    flops: FlopReport
    params: ParamReport
    metrics: Metrics

    @staticmethod
    def csv_header() -> list[str]:
        return (["variant", "top1_accuracy"]
                + FlopReport.csv_header() + ParamReport.csv_header())

    def csv_row(self) -> list[str]:
        return ([self.name, f"{self.metrics.top1_accuracy:.6f}"]
                + self.flops.csv_row() + self.params.csv_row())


def ablate(config: PipelineConfig, splits: dict[str, LabeledDataset]
           ) -> list[AblationRow]:
    """Train each single-mechanism ablation plus the full model (last row)."""
    rows = []
    for ablation in list(ABLATIONS) + [None]:
        cell = replace(config, focus=replace(config.focus, ablation=ablation))
        trained, _ = train(cell, splits)
        test_ds = splits.get("test") or splits["val"]
        metrics = evaluate(trained, test_ds)
        rows.append(AblationRow(name=ablation or "full",
                                flops=count_flops(cell),
                                params=count_params(cell), metrics=metrics))
    return rows

"""Top-level acceptance gate: nine checks, one printed verdict line each.

Each test measures its quantities, prints a single PASS/FAIL line with the
numbers and pinned tolerances, and then asserts.  The desk-scale training
run is shared between the recognition and occlusion checks through a
module-scoped fixture so the model is trained once.
"""

import json
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from esppct.attention import (
    AttentionConfig,
    attention_stack_forward,
    knn_neighbors,
    make_attention_stack,
    vector_attention_forward,
)
from esppct.cli import EXIT_OK, main
from esppct.cost import (
    baseline_flops,
    count_flops,
    dense_attention_flops,
    reduction_ratio,
)
from esppct.focus import FocusConfig, top_k_points
from esppct.ngsa import NgsaScores, select_region
from esppct.numerics import ParamStore, load_checkpoint, save_checkpoint
from esppct.pipeline import (
    EspPctModel,
    PipelineConfig,
    evaluate,
    gradcheck_pipeline,
    save_config,
    train,
)
from esppct.pointcloud import (
    OCCLUSION_PRESETS,
    Frame,
    LabeledDataset,
    Sequence,
    SynthConfig,
    apply_occlusion,
    load_dataset,
    semantic_masks,
    synth_generate,
    write_dataset,
)


def _verdict(number: int, label: str, ok: bool, detail: str) -> None:
    status = "PASS" if ok else "FAIL"
    print(f"criterion {number} ({label}): {status} [{detail}]")
    assert ok, f"criterion {number} ({label}): {detail}"


def _random_frame(rng, n: int) -> Frame:
    pts = np.column_stack([
        rng.normal(0.0, 1.0, (n, 3)),
        rng.normal(0.0, 0.5, n),
        rng.uniform(0.0, 1.0, n),
    ])
    return Frame(0, pts)


# ---------------------------------------------------------------------------
# 1. attention layer vs a dense loop-written oracle
# ---------------------------------------------------------------------------

def _np_linear(lp, x):
    w = lp.weight.detach().numpy()
    out = x @ w.T
    if lp.bias is not None:
        out = out + lp.bias.detach().numpy()
    return out


def _np_mlp(mp, x):
    h = x
    for lp in mp.layers[:-1]:
        h = np.maximum(_np_linear(lp, h), 0.0)
    return _np_linear(mp.layers[-1], h)


def _dense_oracle(layer, frame):
    """All-pairs attention written as explicit per-point loops in numpy."""
    x = np.asarray(frame.points, dtype=np.float64)
    p = x[:, :3]
    n = x.shape[0]
    d = layer.d_attention
    q = _np_linear(layer.phi, x)
    key = _np_linear(layer.psi, x)
    val = _np_linear(layer.alpha, x)
    weights = np.zeros((n, n, d))
    out = np.zeros((n, d))
    for i in range(n):
        logits = np.zeros((n, d))
        for j in range(n):
            pre = q[i] - key[j] + _np_mlp(layer.delta,
                                          (p[i] - p[j]).reshape(1, 3))[0]
            logits[j] = _np_mlp(layer.gamma, pre.reshape(1, d))[0]
        shifted = np.exp(logits - logits.max(axis=0, keepdims=True))
        weights[i] = shifted / shifted.sum(axis=0, keepdims=True)
        for j in range(n):
            out[i] += weights[i, j] * val[j]
    return out, weights


def test_criterion_1_attention_matches_dense_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(20240601)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 17))
        d = int(rng.integers(2, 9))
        frame = _random_frame(rng, n)
        store = ParamStore()
        layer = make_attention_stack(
            store, "att", rng,
            AttentionConfig(d_attention=d, depth=1, k_nn=n))[0]
        got = vector_attention_forward(layer, frame,
                                       knn_neighbors(frame, n))
        want_y, want_w = _dense_oracle(layer, frame)
        worst = max(worst, float(np.abs(
            got.features.detach().numpy() - want_y).max()))
        for i in range(n):
            reordered = want_w[i, got.neighbors[i]]
            worst = max(worst, float(np.abs(
                got.weights[i].detach().numpy() - reordered).max()))
    elapsed = time.perf_counter() - start
    _verdict(1, "attention equation oracle",
             worst < 1e-12 and elapsed < 10.0,
             f"50 instances, max abs diff {worst:.2e} < 1e-12, "
             f"{elapsed:.1f}s < 10s")


# ---------------------------------------------------------------------------
# 2. finite-difference gradient suite over the whole toy pipeline
# ---------------------------------------------------------------------------

def _toy_pipeline_config(head: str) -> PipelineConfig:
    return PipelineConfig(
        synth=SynthConfig(classes=2, sequences_per_class=2,
                          frames_per_sequence=3, points_per_frame=18,
                          semantic_cluster_points=12, noise_points=6,
                          seed=5),
        attention=AttentionConfig(d_attention=4, depth=1, k_nn=4,
                                  gamma_hidden=4, delta_hidden=4),
        focus=FocusConfig(top_k=5, eta=0.6),
        head=head,
        app_hidden=6,
        key_hidden=6,
        epochs=2,
        patience=2,
        learning_rate=0.05,
        batch_size=2,
        seed=3,
    )


def test_criterion_2_gradient_suite(tmp_path, capsys):
    start = time.perf_counter()
    config_path = tmp_path / "gradcheck.json"
    save_config(_toy_pipeline_config("appnet"), config_path)
    rc = main(["gradcheck", "--config", str(config_path), "--seed", "1"])
    cli_tail = capsys.readouterr().out.strip().splitlines()[-1]
    key_report = gradcheck_pipeline(_toy_pipeline_config("keynet"), seed=2)
    elapsed = time.perf_counter() - start
    _verdict(2, "gradient suite",
             rc == EXIT_OK and cli_tail.startswith("PASS")
             and key_report.passed and elapsed < 120.0,
             f"appnet cli exit {rc}, keynet max rel err "
             f"{key_report.max_rel_err:.2e} < 1e-4 at eps 1e-4, "
             f"{elapsed:.1f}s < 120s")


# ---------------------------------------------------------------------------
# 3. top-K and region argmax against sort/scan oracles
# ---------------------------------------------------------------------------

def test_criterion_3_selection_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    top_k_ok = 0
    for trial in range(1000):
        n = int(rng.integers(1, 40))
        scores = rng.normal(0.0, 1.0, n)
        if trial % 3 == 0:
            scores = np.round(scores)  # engineered ties
        if trial % 97 == 0:
            scores = np.full(n, scores[0])
        k = int(rng.integers(0, n + 3))
        ranked = sorted(range(n), key=lambda i: (-scores[i], i))[:min(k, n)]
        want = np.array(sorted(ranked), dtype=np.int64)
        got = top_k_points(scores, k)
        top_k_ok += int(np.array_equal(got, want))

    region_ok = 0
    for trial in range(1000):
        n = int(rng.integers(1, 60))
        values = rng.normal(0.0, 1.0, n)
        if trial % 3 == 0:
            values = np.round(values * 2) / 2
        best = 0
        for i in range(1, n):
            if values[i] > values[best]:
                best = i
        scores = NgsaScores(sum_scores=np.zeros(n),
                            global_scores=torch.as_tensor(values),
                            w=torch.zeros(1, dtype=torch.float64))
        region_ok += int(select_region(scores) == best)
    elapsed = time.perf_counter() - start
    _verdict(3, "selection oracles",
             top_k_ok == 1000 and region_ok == 1000 and elapsed < 5.0,
             f"top-k exact on {top_k_ok}/1000, argmax exact on "
             f"{region_ok}/1000 (ties included), {elapsed:.1f}s < 5s")


# ---------------------------------------------------------------------------
# 4. weight normalization and permutation equivariance
# ---------------------------------------------------------------------------

def test_criterion_4_normalization_and_equivariance():
    rng = np.random.default_rng(404)
    norm_worst = 0.0
    perm_worst = 0.0
    for _ in range(100):
        n = int(rng.integers(5, 26))
        frame = _random_frame(rng, n)
        store = ParamStore()
        layers = make_attention_stack(
            store, "att", rng,
            AttentionConfig(d_attention=6, depth=2, k_nn=8,
                            gamma_hidden=5, delta_hidden=5))
        with torch.no_grad():
            out = attention_stack_forward(layers, frame, 8)
            for w in out.layer_weights:
                norm_worst = max(norm_worst, float(
                    (w.sum(dim=1) - 1.0).abs().max()))

            perm = rng.permutation(n)
            shuffled = Frame(0, np.asarray(frame.points)[perm])
            out_p = attention_stack_forward(layers, shuffled, 8)
            perm_worst = max(perm_worst, float(
                (out_p.features - out.features[torch.as_tensor(perm)])
                .abs().max()))
    _verdict(4, "normalization and equivariance",
             norm_worst < 1e-9 and perm_worst < 1e-9,
             f"100 frames, worst row-sum deviation {norm_worst:.2e} < 1e-9, "
             f"worst permutation mismatch {perm_worst:.2e} < 1e-9")


# ---------------------------------------------------------------------------
# 5. cost-model structure
# ---------------------------------------------------------------------------

def test_criterion_5_cost_structure():
    start = time.perf_counter()
    cfg = PipelineConfig()
    d = cfg.attention.d_attention
    ratio = (dense_attention_flops(cfg.focus.top_k, d)["quadratic"]
             / dense_attention_flops(cfg.synth.points_per_frame, d)["quadratic"])
    reduction = reduction_ratio(baseline_flops(cfg), count_flops(cfg))
    elapsed = time.perf_counter() - start
    _verdict(5, "cost-model structure",
             ratio == 0.09 and reduction >= 0.70 and elapsed < 1.0,
             f"quadratic ratio {ratio!r} == 0.09 exactly, "
             f"reduction {reduction:.3f} >= 0.70, {elapsed:.2f}s < 1s")


# ---------------------------------------------------------------------------
# 6 + 7. desk-scale recognition and occlusion degradation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def desk_run():
    config = PipelineConfig(
        attention=AttentionConfig(d_attention=16, depth=1, k_nn=10,
                                  gamma_hidden=16, delta_hidden=16),
        app_hidden=32,
        epochs=30,
        patience=30,
        learning_rate=0.1,
        batch_size=10,
        seed=0,
        region_align_weight=1.0,
    )
    ds = synth_generate(config.synth)

    # ground-truth separability gate: a nearest-centroid classifier on the
    # semantic-cluster trajectory must succeed before any training claim
    # about this data is attributable to the pipeline
    feats = []
    labels = []
    for seq in ds.sequences:
        masks = semantic_masks(seq)
        cents = np.array([f.positions[m].mean(axis=0)
                          for f, m in zip(seq.frames, masks)])
        feats.append((cents - cents[0]).ravel())
        labels.append(seq.label)
    feats = np.array(feats)
    labels = np.array(labels)
    centroids = np.array([feats[labels == c].mean(axis=0)
                          for c in range(config.synth.classes)])
    dist = np.linalg.norm(feats[:, None, :] - centroids[None, :, :], axis=2)
    oracle_acc = float((dist.argmin(axis=1) == labels).mean())
    assert oracle_acc >= 0.95, f"separability oracle at {oracle_acc}"

    per_class = config.synth.sequences_per_class
    train_seqs = [s for i, s in enumerate(ds.sequences)
                  if (i % per_class) < 30]
    val_seqs = [s for i, s in enumerate(ds.sequences)
                if (i % per_class) >= 30]
    splits = {
        "train": LabeledDataset(train_seqs, ds.class_names, split="train"),
        "val": LabeledDataset(val_seqs, ds.class_names, split="val"),
    }
    start = time.perf_counter()
    trained, metrics = train(config, splits)
    elapsed = time.perf_counter() - start
    return {
        "trained": trained,
        "metrics": metrics,
        "elapsed": elapsed,
        "oracle_acc": oracle_acc,
        "val": splits["val"],
    }


def test_criterion_6_desk_scale_recognition(desk_run):
    metrics = desk_run["metrics"]
    ok = (desk_run["oracle_acc"] >= 0.95
          and metrics.top1_accuracy >= 0.90
          and metrics.region_purity_hit_rate >= 0.90
          and desk_run["elapsed"] < 600.0)
    _verdict(6, "desk-scale recognition", ok,
             f"separability oracle {desk_run['oracle_acc']:.3f} >= 0.95, "
             f"held-out top-1 {metrics.top1_accuracy:.3f} >= 0.90, "
             f"semantic-region hit rate {metrics.region_purity_hit_rate:.3f}"
             f" >= 0.90, training {desk_run['elapsed']:.0f}s < 600s")


def test_criterion_7_occlusion_degradation(desk_run):
    start = time.perf_counter()
    trained = desk_run["trained"]
    val = desk_run["val"]
    means = []
    for preset in ("none", "wood", "brick", "combined"):
        model = OCCLUSION_PRESETS[preset]
        accs = []
        for seed in (101, 202, 303):
            children = np.random.SeedSequence(seed).spawn(
                len(val.sequences))
            occluded = [
                apply_occlusion(s, model, int(c.generate_state(1)[0]))
                for s, c in zip(val.sequences, children)]
            occ = LabeledDataset(occluded, val.class_names, split="val")
            accs.append(evaluate(trained, occ).top1_accuracy)
        means.append(float(np.mean(accs)))
    elapsed = time.perf_counter() - start
    monotone = all(b <= a + 1e-12 for a, b in zip(means, means[1:]))
    _verdict(7, "occlusion degradation", monotone and elapsed < 1800.0,
             "mean top-1 over 3 seeds "
             + " >= ".join(f"{m:.3f}" for m in means)
             + f" (none/wood/brick/combined, ties allowed), "
             f"{elapsed:.0f}s < 1800s")


# ---------------------------------------------------------------------------
# 8. ablation table shape and cross-command consistency
# ---------------------------------------------------------------------------

def test_criterion_8_ablation_table(tmp_path, capsys):
    import csv

    start = time.perf_counter()
    config = _toy_pipeline_config("appnet")
    config_path = tmp_path / "config.json"
    save_config(config, config_path)
    data_dir = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_path), "--seed", "12",
                 "--out", str(data_dir)]) == EXIT_OK

    ablate_csv = tmp_path / "ablate.csv"
    assert main(["ablate", "--config", str(config_path),
                 "--data", str(data_dir), "--out", str(ablate_csv)]) == EXIT_OK
    profile_csv = tmp_path / "profile.csv"
    grid = f"{config.focus.top_k},{config.focus.eta}"
    assert main(["profile", "--config", str(config_path),
                 "--data", str(data_dir), "--grid", grid,
                 "--out", str(profile_csv)]) == EXIT_OK
    capsys.readouterr()

    with open(ablate_csv, newline="") as fh:
        ablate_rows = list(csv.reader(fh))
    with open(profile_csv, newline="") as fh:
        profile_rows = list(csv.reader(fh))

    names = [r[0] for r in ablate_rows[1:]]
    flops_col = ablate_rows[0].index("flops_total")
    flops = {r[0]: int(r[flops_col]) for r in ablate_rows[1:]}

    shared = [c for c in ablate_rows[0] if c in profile_rows[0]]
    full = dict(zip(ablate_rows[0], ablate_rows[-1]))
    prof = dict(zip(profile_rows[0], profile_rows[1]))
    consistent = all(full[c] == prof[c] for c in shared)
    elapsed = time.perf_counter() - start

    ok = (len(ablate_rows) == 6 and names[-1] == "full"
          and flops["no_top_k"] > flops["full"] and consistent
          and elapsed < 900.0)
    _verdict(8, "ablation table", ok,
             f"{len(ablate_rows) - 1} rows, flops no_top_k "
             f"{flops['no_top_k']} > full {flops['full']}, full row matches "
             f"profile on {len(shared)} shared columns, "
             f"{elapsed:.0f}s < 900s")


# ---------------------------------------------------------------------------
# 9. serialization round trips
# ---------------------------------------------------------------------------

def test_criterion_9_serialization(tmp_path):
    start = time.perf_counter()
    model = EspPctModel(_toy_pipeline_config("appnet"))
    ckpt = tmp_path / "params.ckpt"
    save_checkpoint(model.store, ckpt)
    arrays, _ = load_checkpoint(ckpt)
    before = model.store.state_arrays()
    params_exact = (set(arrays) == set(before) and all(
        arrays[k].tobytes() == before[k].tobytes() for k in before))

    rng = np.random.default_rng(909)
    sequences = []
    for _ in range(100):
        frames = []
        for t in range(int(rng.integers(1, 5))):
            frames.append(_random_frame(rng, int(rng.integers(0, 13))))
            frames[-1] = Frame(t, frames[-1].points)
        meta = {"note": "x"} if rng.random() < 0.5 else {}
        sequences.append(Sequence(frames=tuple(frames),
                                  label=int(rng.integers(0, 3)), meta=meta))
    ds = LabeledDataset(sequences, ["a", "b", "c"], split="train")
    out = tmp_path / "roundtrip"
    write_dataset(ds, out)
    loaded = load_dataset(out)
    seq_exact = len(loaded.sequences) == 100
    for orig, back in zip(ds.sequences, loaded.sequences):
        seq_exact = seq_exact and orig.label == back.label
        seq_exact = seq_exact and orig.meta == back.meta
        for fa, fb in zip(orig.frames, back.frames):
            seq_exact = seq_exact and np.asarray(fa.points).tobytes() == \
                np.asarray(fb.points).tobytes()
    elapsed = time.perf_counter() - start
    _verdict(9, "serialization", params_exact and seq_exact and elapsed < 10.0,
             f"checkpoint bit-exact over {len(before)} tensors, 100 random "
             f"sequences round-trip exactly, {elapsed:.1f}s < 10s")

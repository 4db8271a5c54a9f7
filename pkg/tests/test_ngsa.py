"""Grouping and region-scoring tests with linear-scan and floor oracles."""

import math

import numpy as np
import pytest
import torch

from esppct.attention import AttentionOutput
from esppct.ngsa import (
    Group,
    Grouping,
    GroupingConfig,
    NgsaScores,
    group_points,
    group_score_sum,
    localization_decision,
    make_region_vector,
    ngsa_scores,
    select_region,
)
from esppct.numerics import ParamStore
from esppct.pointcloud import Frame
from esppct.validation import DataError

RNG = np.random.default_rng


def frame_at(positions):
    positions = np.asarray(positions, dtype=float)
    pts = np.zeros((positions.shape[0], 5))
    pts[:, :3] = positions
    pts[:, 4] = 1.0
    return Frame(0, pts)


def fake_attention(features, point_scores):
    features = torch.as_tensor(np.asarray(features, dtype=float))
    return AttentionOutput(
        features=features,
        weights=torch.zeros((features.shape[0], 1, features.shape[1])),
        neighbors=np.zeros((features.shape[0], 1), dtype=np.int64),
        point_scores=torch.as_tensor(np.asarray(point_scores, dtype=float)),
    )


def scores_of(values):
    values = np.asarray(values, dtype=float)
    return NgsaScores(sum_scores=np.zeros_like(values),
                      global_scores=torch.as_tensor(values),
                      w=torch.zeros(1))


class TestGroupingConfig:
    def test_defaults(self):
        cfg = GroupingConfig()
        assert cfg.mode == "voxel" and cfg.cell_size == 0.1
        assert cfg.grid_origin == (0.0, 0.0, 0.0)

    def test_bad_cell_size(self):
        with pytest.raises(DataError):
            GroupingConfig(cell_size=0.0)

    def test_bad_mode(self):
        with pytest.raises(DataError):
            GroupingConfig(mode="octree")


class TestGroupPoints:
    def test_single_cell(self):
        g = group_points(frame_at([[0.01, 0.02, 0.03], [0.09, 0.05, 0.0]]),
                         GroupingConfig())
        assert len(g) == 1
        assert g.groups[0].cell == (0, 0, 0)
        np.testing.assert_array_equal(g.groups[0].members, [0, 1])

    def test_positive_cell(self):
        g = group_points(frame_at([[0.05, 0.05, 0.05]]), GroupingConfig())
        assert g.groups[0].cell == (0, 0, 0)

    def test_negative_coordinate_floors(self):
        g = group_points(frame_at([[-0.05, 0.0, 0.0]]), GroupingConfig())
        assert g.groups[0].cell == (-1, 0, 0)

    def test_floor_oracle_on_signed_grid(self):
        """Cell coordinates match math.floor on a signed lattice of offsets."""
        cfg = GroupingConfig(cell_size=0.25, grid_origin=(0.1, -0.2, 0.0))
        coords = [-0.9, -0.3, -0.05, 0.0, 0.05, 0.3, 0.9]
        positions = [(x, y, z) for x in coords for y in coords for z in coords]
        g = group_points(frame_at(positions), cfg)
        for idx, p in enumerate(positions):
            expect = tuple(math.floor((p[a] - cfg.grid_origin[a]) / cfg.cell_size)
                           for a in range(3))
            assert g.groups[g.group_of[idx]].cell == expect

    def test_partition_property(self):
        rng = RNG(7)
        for _ in range(20):
            n = int(rng.integers(1, 120))
            g = group_points(frame_at(rng.uniform(-1, 1, size=(n, 3))),
                             GroupingConfig())
            seen = np.concatenate([grp.members for grp in g.groups])
            assert sorted(seen.tolist()) == list(range(n))
            for gid, grp in enumerate(g.groups):
                assert grp.members.size > 0
                assert (g.group_of[grp.members] == gid).all()

    def test_ids_lexicographic_by_cell(self):
        rng = RNG(8)
        g = group_points(frame_at(rng.uniform(-0.5, 0.5, size=(60, 3))),
                         GroupingConfig())
        cells = [grp.cell for grp in g.groups]
        assert cells == sorted(cells)

    def test_translation_consistency(self):
        rng = RNG(9)
        positions = rng.uniform(0, 1, size=(40, 3))
        shift = np.array([1.7, -2.3, 0.4])
        a = group_points(frame_at(positions), GroupingConfig())
        b = group_points(frame_at(positions + shift),
                         GroupingConfig(grid_origin=tuple(shift)))
        np.testing.assert_array_equal(a.group_of, b.group_of)
        assert [g.cell for g in a.groups] == [g.cell for g in b.groups]

    def test_empty_frame_rejected(self):
        with pytest.raises(DataError):
            group_points(Frame(0, np.zeros((0, 5))), GroupingConfig())


class TestGroupScoreSum:
    def test_hand_example(self):
        """Two groups {0,1} and {2} over masses [0.2, 0.3, 0.5] sum to [0.5, 0.5]."""
        att = fake_attention(np.zeros((3, 2)), [0.2, 0.3, 0.5])
        grouping = Grouping(
            group_of=np.array([0, 0, 1]),
            groups=[Group(np.array([0, 1]), (0, 0, 0)),
                    Group(np.array([2]), (1, 0, 0))])
        np.testing.assert_allclose(group_score_sum(att, grouping), [0.5, 0.5])

    def test_zero_scores(self):
        att = fake_attention(np.zeros((4, 2)), np.zeros(4))
        g = group_points(frame_at(RNG(1).uniform(0, 1, (4, 3))), GroupingConfig())
        assert (group_score_sum(att, g) == 0).all()

    def test_single_group_total_mass(self):
        scores = RNG(2).uniform(0, 1, 6)
        att = fake_attention(np.zeros((6, 2)), scores)
        g = group_points(frame_at(np.full((6, 3), 0.05)), GroupingConfig())
        np.testing.assert_allclose(group_score_sum(att, g), [scores.sum()])

    def test_size_mismatch_rejected(self):
        att = fake_attention(np.zeros((3, 2)), [1.0, 1.0, 1.0])
        g = group_points(frame_at(RNG(3).uniform(0, 1, (5, 3))), GroupingConfig())
        with pytest.raises(DataError):
            group_score_sum(att, g)


class TestNgsaScores:
    def test_hand_inner_product(self):
        att = fake_attention([[1.0, 2.0]], [1.0])
        g = group_points(frame_at([[0.05, 0.05, 0.05]]), GroupingConfig())
        s = ngsa_scores(att, g, torch.tensor([1.0, 1.0], dtype=torch.float64))
        assert s.global_scores.item() == 3.0

    def test_zero_w(self):
        att = fake_attention(RNG(4).normal(size=(8, 3)), np.ones(8))
        g = group_points(frame_at(RNG(5).uniform(-1, 1, (8, 3))), GroupingConfig())
        s = ngsa_scores(att, g, torch.zeros(3, dtype=torch.float64))
        assert (s.global_scores == 0).all()

    def test_group_means_match_loop_oracle(self):
        rng = RNG(6)
        feats = rng.normal(size=(30, 4))
        att = fake_attention(feats, np.ones(30))
        g = group_points(frame_at(rng.uniform(-0.4, 0.4, (30, 3))), GroupingConfig())
        w = torch.as_tensor(rng.normal(size=4))
        s = ngsa_scores(att, g, w)
        for gid, grp in enumerate(g.groups):
            expect = np.mean([feats[i] @ w.numpy() for i in grp.members])
            assert abs(s.global_scores[gid].item() - expect) < 1e-12

    def test_linearity_in_w(self):
        rng = RNG(10)
        att = fake_attention(rng.normal(size=(12, 3)), np.ones(12))
        g = group_points(frame_at(rng.uniform(0, 1, (12, 3))), GroupingConfig())
        w = torch.as_tensor(rng.normal(size=3))
        s1 = ngsa_scores(att, g, w)
        s2 = ngsa_scores(att, g, 2.0 * w)
        assert torch.equal(s2.global_scores, 2.0 * s1.global_scores)
        assert select_region(s1) == select_region(s2)

    def test_sum_scores_populated(self):
        att = fake_attention(RNG(11).normal(size=(5, 2)), np.arange(5.0))
        g = group_points(frame_at(np.full((5, 3), 0.01)), GroupingConfig())
        s = ngsa_scores(att, g, torch.ones(2, dtype=torch.float64))
        np.testing.assert_allclose(s.sum_scores, [10.0])

    def test_wrong_w_length_rejected(self):
        att = fake_attention(np.zeros((2, 3)), np.ones(2))
        g = group_points(frame_at(RNG(12).uniform(0, 1, (2, 3))), GroupingConfig())
        with pytest.raises(DataError):
            ngsa_scores(att, g, torch.ones(4, dtype=torch.float64))

    def test_w_receives_gradient(self):
        att = fake_attention(RNG(13).normal(size=(6, 3)), np.ones(6))
        g = group_points(frame_at(RNG(14).uniform(0, 1, (6, 3))), GroupingConfig())
        store = ParamStore()
        w = make_region_vector(store, "w", RNG(15), 3)
        ngsa_scores(att, g, w).global_scores.sum().backward()
        assert w.grad is not None and float(w.grad.abs().sum()) > 0


class TestSelectRegion:
    def test_single_group(self):
        assert select_region(scores_of([4.2])) == 0

    def test_unambiguous(self):
        assert select_region(scores_of([1.0, 3.0, 2.0])) == 1

    def test_tie_break_lowest(self):
        assert select_region(scores_of([0.7, 0.7, 0.2])) == 0

    def test_linear_scan_oracle(self):
        """1000 random vectors, ties engineered by value duplication."""
        rng = RNG(20)
        for trial in range(1000):
            n = int(rng.integers(1, 12))
            values = np.round(rng.uniform(-1, 1, n), 1)  # coarse grid forces ties
            got = select_region(scores_of(values))
            best = 0
            for j in range(1, n):
                if values[j] > values[best]:
                    best = j
            assert got == best

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            select_region(scores_of([]))


class TestLocalizationDecision:
    def test_eta_zero_always_accepts(self):
        rng = RNG(21)
        for _ in range(20):
            sel = localization_decision(scores_of(rng.normal(size=5)), 0.0)
            assert sel.decision == "accept"

    def test_single_group_confidence_one(self):
        sel = localization_decision(scores_of([-3.0]), 1.0)
        assert sel.confidence == 1.0 and sel.decision == "accept"

    def test_two_flat_groups_straddle_table_thresholds(self):
        """Uniform scores over 2 groups: confidence 0.5 refines at 0.68, not 0.45."""
        assert localization_decision(scores_of([0.0, 0.0]), 0.68).decision == "refine"
        assert localization_decision(scores_of([0.0, 0.0]), 0.45).decision == "accept"

    def test_confidence_is_softmax_max(self):
        values = np.array([1.0, 2.0, 0.5])
        e = np.exp(values - values.max())
        sel = localization_decision(scores_of(values), 0.5)
        assert abs(sel.confidence - e.max() / e.sum()) < 1e-12
        assert sel.region_index == 1

    def test_eta_monotone_refine_set(self):
        rng = RNG(22)
        for _ in range(10):
            s = scores_of(rng.normal(size=4))
            refines = [localization_decision(s, eta).decision == "refine"
                       for eta in np.linspace(0, 1, 21)]
            # once refining starts it never stops as eta grows
            assert refines == sorted(refines)

    def test_region_reported_even_when_refining(self):
        sel = localization_decision(scores_of([0.0, 0.1]), 0.99)
        assert sel.decision == "refine" and sel.region_index == 1

    def test_bad_eta_rejected(self):
        with pytest.raises(DataError):
            localization_decision(scores_of([1.0]), 1.5)

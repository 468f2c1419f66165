import itertools

import numpy as np
import pytest

from tinyovd.errors import DomainError, ShapeError
from tinyovd.geometry import Box, NoiseKind, NoisySample
from tinyovd.losses import LossWeights
from tinyovd.matching import Assignment, assign_auxiliary, build_cost_matrix, hungarian


def brute_force_min(cost: np.ndarray) -> float:
    nq, nt = cost.shape
    return min(
        sum(cost[perm[t], t] for t in range(nt))
        for perm in itertools.permutations(range(nq), nt)
    )


class TestHungarian:
    def test_one_by_one(self):
        a = hungarian(np.array([[5.0]]))
        assert a.pairs == ((0, 0),)
        assert a.unmatched_queries == ()

    def test_two_by_two_hand(self):
        a = hungarian(np.array([[1.0, 2.0], [3.0, 0.0]]))
        assert a.pairs == ((0, 0), (1, 1))
        total = sum(np.array([[1.0, 2.0], [3.0, 0.0]])[q, t] for q, t in a.pairs)
        assert total == 1.0

    def test_brute_force_oracle_all_sizes(self):
        rng = np.random.default_rng(12)
        for n in range(1, 8):
            for _ in range(1000 // 7 + 1):
                rows = n + int(rng.integers(0, 3))
                cost = rng.normal(size=(rows, n))
                a = hungarian(cost)
                total = sum(cost[q, t] for q, t in a.pairs)
                assert total == pytest.approx(brute_force_min(cost), abs=1e-9)

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(5)
        cost = rng.normal(size=(6, 4))
        a = hungarian(cost)
        b = hungarian(cost + 17.3)
        assert a.pairs == b.pairs

    def test_shape_error_more_targets(self):
        with pytest.raises(ShapeError):
            hungarian(np.zeros((2, 3)))

    def test_nonfinite_rejected(self):
        with pytest.raises(DomainError):
            hungarian(np.array([[1.0, np.inf], [0.0, 2.0]]))

    def test_empty_targets(self):
        a = hungarian(np.zeros((3, 0)))
        assert a.pairs == ()
        assert a.unmatched_queries == (0, 1, 2)

    def test_lex_tie_break_uniform(self):
        a = hungarian(np.ones((3, 3)))
        assert a.pairs == ((0, 0), (1, 1), (2, 2))

    def test_lex_tie_break_rectangular(self):
        # queries 0 and 1 tie for target 0: lex picks query 0
        cost = np.array([[1.0], [1.0], [2.0]])
        assert hungarian(cost).pairs == ((0, 0),)

    def test_unmatched_queries_reported(self):
        cost = np.array([[0.0, 5.0], [5.0, 0.0], [1.0, 1.0], [9.0, 9.0]])
        a = hungarian(cost)
        assert a.pairs == ((0, 0), (1, 1))
        assert a.unmatched_queries == (2, 3)


class TestLexOracle:
    def test_matches_brute_force_lex(self):
        rng = np.random.default_rng(9)
        for _ in range(300):
            nt = int(rng.integers(1, 4))
            nq = nt + int(rng.integers(0, 4))
            cost = rng.integers(0, 3, size=(nq, nt)).astype(float)
            got = hungarian(cost).pairs
            best_total, best_pairs = None, None
            for qs in itertools.permutations(range(nq), nt):
                tot = sum(cost[qs[t], t] for t in range(nt))
                pairs = tuple(sorted((qs[t], t) for t in range(nt)))
                if (
                    best_total is None
                    or tot < best_total - 1e-9
                    or (abs(tot - best_total) <= 1e-9 and pairs < best_pairs)
                ):
                    best_total, best_pairs = tot, pairs
            assert got == best_pairs


class TestCostMatrix:
    def test_perfect_query(self):
        gt = Box(0.2, 0.2, 0.5, 0.6)
        cost = build_cost_matrix(np.array([[1.0]]), [gt], [gt], LossWeights())
        assert cost[0, 0] == pytest.approx(-1.0, abs=1e-12)

    def test_hand_weighted_sum(self):
        # engineered pair: l1 = 0.2 in center form, giou = 0.6
        pred = Box(0.0, 0.0, 0.4, 0.4)
        tgt = Box(0.0, 0.2, 0.4, 0.6)  # shifted up by 0.2: l1 = 0.2, iou = 1/3
        from tinyovd.geometry import giou

        g = giou(pred, tgt)
        cost = build_cost_matrix(np.array([[0.5]]), [pred], [tgt], LossWeights(1, 5, 2))
        assert cost[0, 0] == pytest.approx(-0.5 + 5 * 0.2 + 2 * (1 - g), abs=1e-12)

    def test_column_permutation(self, rng):
        def rb():
            x1, y1 = rng.uniform(0, 0.5, 2)
            w, h = rng.uniform(0.1, 0.3, 2)
            return Box(x1, y1, x1 + w, y1 + h)

        qs = [rb() for _ in range(5)]
        ts = [rb() for _ in range(3)]
        scores = rng.uniform(0.1, 0.9, (5, 3))
        c1 = build_cost_matrix(scores, qs, ts, LossWeights())
        perm = [2, 0, 1]
        c2 = build_cost_matrix(scores[:, perm], qs, [ts[i] for i in perm], LossWeights())
        assert np.allclose(c2, c1[:, perm], atol=1e-12)


class TestAssignAuxiliary:
    def samples(self, gt_indices):
        return [
            NoisySample(Box(0.1, 0.1, 0.3, 0.3), gi, 0, 0.8, NoiseKind.PERTURBED)
            for gi in gt_indices
        ]

    def test_order_preserving(self):
        got = assign_auxiliary(self.samples([0, 0, 0, 1, 1]))
        assert got == [(0, 0), (1, 0), (2, 0), (3, 1), (4, 1)]

    def test_empty(self):
        assert assign_auxiliary([]) == []

    def test_independent_of_anything_else(self):
        s = self.samples([2, 0, 1])
        assert assign_auxiliary(s) == assign_auxiliary(list(s)) == [(0, 2), (1, 0), (2, 1)]

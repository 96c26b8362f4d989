import itertools

import numpy as np
import pytest

from tripletkit.evalkit import (EvalProtocol, EvalResult, ProtocolError,
                                average_precision, combine_embeddings_max,
                                combine_embeddings_mean, evaluate,
                                inject_distractors, rank_gallery)
from tripletkit.sampling import LabeledDataset

from oracles import oracle_average_precision, oracle_first_correct_rank


def embset(feats, pids, cams=None):
    feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
    n = len(feats)
    if cams is None:
        cams = np.zeros(n)
    return LabeledDataset(feats, pids, cams, np.arange(n))


class TestRankGallery:
    def test_orders_by_distance(self):
        order = rank_gallery(np.array([0.0, 0.0]),
                             np.array([[5.0, 0.0], [1.0, 0.0], [3.0, 0.0]]))
        assert order.tolist() == [1, 2, 0]

    def test_self_first(self):
        g = np.array([[2.0, 2.0], [1.0, 1.0], [0.0, 3.0]])
        order = rank_gallery(np.array([1.0, 1.0]), g)
        assert order[0] == 1

    def test_tie_lower_index_first(self):
        g = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
        order = rank_gallery(np.zeros(2), g)
        assert order.tolist() == [0, 1, 2]

    def test_empty_gallery(self):
        with pytest.raises(ProtocolError):
            rank_gallery(np.zeros(2), np.zeros((0, 2)))


class TestAveragePrecision:
    def test_reference_example(self):
        assert average_precision([1, 0, 1, 0], 2) == \
            pytest.approx(0.833333, abs=1e-6)

    def test_perfect_prefix(self):
        assert average_precision([1, 1, 1], 3) == 1.0

    def test_relevant_last(self):
        n = 7
        rel = [0] * (n - 1) + [1]
        assert average_precision(rel, 1) == pytest.approx(1 / n, abs=1e-12)

    def test_matches_oracle_on_all_small_patterns(self):
        # every binary relevance pattern for galleries of size <= 6
        for size in range(1, 7):
            for bits in itertools.product([0, 1], repeat=size):
                num_rel = sum(bits)
                if num_rel == 0:
                    continue
                got = average_precision(list(bits), num_rel)
                want = oracle_average_precision(bits, num_rel)
                assert got == pytest.approx(want, abs=1e-12)

    def test_rejects_zero_relevant(self):
        with pytest.raises(ProtocolError):
            average_precision([0, 0], 0)


class TestEvaluate:
    def test_perfect_model_distinct_cameras(self):
        feats = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]])
        q = embset(feats, [0, 0, 1, 1], cams=[0, 0, 1, 1])
        g = embset(feats, [0, 0, 1, 1], cams=[2, 2, 3, 3])
        res = evaluate(q, g, EvalProtocol(cmc_ranks=(1, 5)))
        assert res.map == 1.0
        assert res.cmc[1] == 1.0

    def test_exhaustive_toy_vs_oracle(self):
        # 6-item gallery on a line; brute-force AP/CMC from definitions
        g_feats = [[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]]
        g_pids = [0, 1, 0, 1, 0, 1]
        q = embset([[0.2]], [0], cams=[9])
        g = embset(g_feats, g_pids, cams=[0, 0, 0, 0, 0, 0])
        res = evaluate(q, g, EvalProtocol(cmc_ranks=(1, 2, 3)))
        # ranked order by distance from 0.2: [0,1,2,3,4,5] -> relevance 1,0,1,0,1,0
        rel = [1, 0, 1, 0, 1, 0]
        assert res.map == pytest.approx(oracle_average_precision(rel, 3), abs=1e-12)
        assert res.cmc[1] == 1.0
        assert oracle_first_correct_rank(rel) == 1

    def test_camera_filter_removes_self(self):
        feats = np.array([[0.0], [1.0], [5.0], [6.0]])
        pids = [0, 0, 1, 1]
        cams = [0, 1, 0, 1]
        q = embset(feats, pids, cams)
        res_filtered = evaluate(q, q, EvalProtocol(cmc_ranks=(1,)))
        res_raw = evaluate(q, q, EvalProtocol(
            exclude_same_camera_same_id=False, cmc_ranks=(1,)))
        # without filtering every query finds itself at distance 0
        assert res_raw.cmc[1] == 1.0
        assert res_filtered.map <= 1.0
        assert res_raw.cmc[1] >= res_filtered.cmc[1]

    def test_skipped_queries_counted(self):
        q = embset([[0.0], [1.0]], [0, 7], cams=[0, 0])
        g = embset([[0.0], [2.0]], [0, 1], cams=[1, 1])
        res = evaluate(q, g, EvalProtocol(cmc_ranks=(1,)))
        assert res.num_skipped == 1
        assert res.num_queries == 1

    def test_map_is_mean_of_per_query_aps(self):
        rng = np.random.default_rng(0)
        q = embset(rng.standard_normal((8, 3)), np.arange(8) % 4, cams=np.full(8, 9))
        g = embset(rng.standard_normal((20, 3)), np.arange(20) % 4,
                   cams=np.zeros(20))
        res = evaluate(q, g, EvalProtocol(cmc_ranks=(1, 5)))
        assert res.map == pytest.approx(np.mean(res.per_query_ap), abs=1e-15)

    def test_cmc_monotone(self):
        rng = np.random.default_rng(1)
        q = embset(rng.standard_normal((10, 3)), np.arange(10) % 5,
                   cams=np.full(10, 9))
        g = embset(rng.standard_normal((30, 3)), np.arange(30) % 5,
                   cams=np.zeros(30))
        res = evaluate(q, g, EvalProtocol(cmc_ranks=(1, 2, 3, 5, 10, 20)))
        vals = [res.cmc[k] for k in sorted(res.cmc)]
        assert all(a <= b + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_multi_query_pools_by_identity_camera(self):
        # two noisy queries of the same (pid, cam) pool into one clean query
        q = embset([[0.0, 2.0], [0.0, -2.0]], [0, 0], cams=[5, 5])
        g = embset([[0.0, 0.0], [1.0, 0.0]], [0, 1], cams=[0, 0])
        res = evaluate(q, g, EvalProtocol(mode="multi_query", cmc_ranks=(1,)))
        assert res.num_queries == 1
        assert res.cmc[1] == 1.0

    def test_width_mismatch(self):
        with pytest.raises(ProtocolError):
            evaluate(embset([[0.0]], [0]), embset([[0.0, 1.0]], [0]))


class TestCombine:
    def test_mean(self):
        assert combine_embeddings_mean(
            [np.array([0.0, 0.0]), np.array([2.0, 0.0])]).tolist() == [1.0, 0.0]
        assert combine_embeddings_mean([np.array([3.0, 4.0])]).tolist() == [3.0, 4.0]

    def test_max(self):
        assert combine_embeddings_max(
            [np.array([0.0, 1.0]), np.array([2.0, 0.0])]).tolist() == [2.0, 1.0]
        assert combine_embeddings_max([np.array([3.0, 4.0])]).tolist() == [3.0, 4.0]

    def test_mean_within_convex_hull_distance(self, rng):
        for _ in range(50):
            xs = [rng.standard_normal(4) for _ in range(5)]
            y = rng.standard_normal(4)
            mean = combine_embeddings_mean(xs)
            d_mean = np.linalg.norm(mean - y)
            d_max = max(np.linalg.norm(x - y) for x in xs)
            assert d_mean <= d_max + 1e-12


class TestDistractors:
    def _base(self):
        rng = np.random.default_rng(2)
        q = embset(rng.standard_normal((6, 3)), np.arange(6) % 3,
                   cams=np.full(6, 9))
        g = embset(rng.standard_normal((12, 3)), np.arange(12) % 3,
                   cams=np.zeros(12))
        return q, g

    def test_zero_distractors_unchanged(self):
        q, g = self._base()
        empty = LabeledDataset(np.zeros((0, 3)), np.zeros(0), np.zeros(0),
                               np.zeros(0))
        before = evaluate(q, g, EvalProtocol(cmc_ranks=(1,)))
        after = evaluate(q, inject_distractors(g, empty, q.pids),
                         EvalProtocol(cmc_ranks=(1,)))
        assert before.map == after.map

    def test_ap_never_increases(self, rng):
        q, g = self._base()
        proto = EvalProtocol(cmc_ranks=(1,))
        before = evaluate(q, g, proto)
        for num in (5, 20, 100):
            dis = embset(rng.standard_normal((num, 3)), np.full(num, 100),
                         cams=np.zeros(num))
            after = evaluate(q, inject_distractors(g, dis, q.pids), proto)
            for a, b in zip(after.per_query_ap, before.per_query_ap):
                assert a <= b + 1e-12
            assert after.map <= before.map + 1e-12

    def test_identity_collision_rejected(self):
        q, g = self._base()
        dis = embset(np.zeros((2, 3)), [0, 100], cams=[0, 0])
        with pytest.raises(ProtocolError):
            inject_distractors(g, dis, q.pids)

    def test_prepended_twin_distractor_kills_rank1(self):
        q = embset([[0.0, 0.0]], [0], cams=[9])
        g = embset([[0.0, 0.0], [5.0, 0.0]], [0, 1], cams=[0, 0])
        proto = EvalProtocol(cmc_ranks=(1,))
        assert evaluate(q, g, proto).cmc[1] == 1.0
        twin = embset([[0.0, 0.0]], [42], cams=[0])
        injected = inject_distractors(g, twin, q.pids, prepend=True)
        assert evaluate(q, injected, proto).cmc[1] == 0.0

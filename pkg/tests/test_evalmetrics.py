import csv

import numpy as np
import pytest

from scrc.errors import InputError
from scrc.evalmetrics import (RankedResult, eval_gt_scenario,
                              eval_proposal_scenario, rank_candidates, write_per_query_csv)
from scrc.geometry import BoundingBox
from scrc.nncore import make_rng


def box_at(k, size=1.0):
    return BoundingBox(10.0 * k, 0.0, 10.0 * k + size, size)


def gt_result(n_cands, gt_idx, top_idx, query="q", image_id="img"):
    """Candidates at disjoint locations; scores place top_idx first."""
    boxes = [box_at(k) for k in range(n_cands)]
    scores = [1.0 if k == top_idx else -float(k) for k in range(n_cands)]
    return RankedResult.build(query, image_id, boxes, scores, boxes[gt_idx])


class TestRankCandidates:
    def test_descending(self):
        assert rank_candidates([0.1, 0.9, 0.5]) == [1, 2, 0]

    def test_all_equal_keeps_input_order(self):
        assert rank_candidates([3.0, 3.0, 3.0]) == [0, 1, 2]

    def test_duplicate_max_earlier_index_first(self):
        scores = [0.0, 0.0, 9.0, 1.0, 2.0, 9.0]
        assert rank_candidates(scores)[:2] == [2, 5]

    def test_nonfinite_names_index(self):
        with pytest.raises(InputError, match="candidate 1"):
            rank_candidates([0.0, float("nan"), 1.0])


class TestGtScenario:
    def test_all_correct(self):
        report = eval_gt_scenario([gt_result(4, 2, 2) for _ in range(5)])
        assert report.p_at_1 == 1.0
        assert report.scenario == "gt_boxes"

    def test_two_of_three(self):
        results = [gt_result(3, 0, 0), gt_result(3, 1, 1), gt_result(3, 2, 0)]
        report = eval_gt_scenario(results)
        assert report.p_at_1 == pytest.approx(2.0 / 3.0)
        assert report.query_count == 3

    def test_single_candidate_forced_hit(self):
        report = eval_gt_scenario([gt_result(1, 0, 0)])
        assert report.p_at_1 == 1.0

    def test_gt_absent_rejected(self):
        boxes = [box_at(0), box_at(1)]
        result = RankedResult.build("q", "img", boxes, [0.5, 0.2], box_at(7))
        with pytest.raises(InputError, match="ground-truth"):
            eval_gt_scenario([result])

    def test_random_scores_converge_to_one_over_m(self):
        rng = make_rng(123)
        m, trials = 4, 10000
        boxes = [box_at(k) for k in range(m)]
        hits = 0
        for _ in range(trials):
            gt_idx = int(rng.integers(m))
            result = RankedResult.build("q", "img", boxes, list(rng.normal(size=m)),
                                        boxes[gt_idx])
            hits += result.boxes[0] == result.gt_box
        assert abs(hits / trials - 1.0 / m) < 0.05


def proposal_result(hit_ranks, n_cands, query="q"):
    """Ground truth at the origin; candidates at hit_ranks coincide with it."""
    gt = BoundingBox(0.0, 0.0, 5.0, 5.0)
    boxes = []
    for k in range(n_cands):
        boxes.append(gt if k in hit_ranks else BoundingBox(100.0 + 10 * k, 0.0,
                                                           104.0 + 10 * k, 5.0))
    scores = [float(n_cands - k) for k in range(n_cands)]
    return RankedResult.build(query, "img", boxes, scores, gt)


class TestProposalScenario:
    def test_fixture_values(self):
        results = [proposal_result({0}, 12),    # hit at rank 1
                   proposal_result({4}, 12),    # hit at rank 5
                   proposal_result({10}, 12)]   # hit at rank 11
        report = eval_proposal_scenario(results)
        assert report.r_at_k[1] == pytest.approx(1.0 / 3.0)
        assert report.r_at_k[10] == pytest.approx(2.0 / 3.0)
        assert report.oracle == 1.0

    def test_hit_at_rank_11_counts_only_for_oracle(self):
        report = eval_proposal_scenario([proposal_result({10}, 100)])
        assert report.r_at_k[1] == 0.0
        assert report.r_at_k[10] == 0.0
        assert report.oracle == 1.0

    def test_no_hits_anywhere(self):
        report = eval_proposal_scenario([proposal_result(set(), 20)])
        assert report.r_at_k[1] == report.r_at_k[10] == report.oracle == 0.0

    def test_shuffle_invariance(self):
        rng = make_rng(9)
        gt = BoundingBox(0.0, 0.0, 5.0, 5.0)
        boxes = [gt] + [BoundingBox(50.0 + 7 * k, 0.0, 54.0 + 7 * k, 5.0)
                        for k in range(11)]
        scores = list(rng.normal(size=12))
        base = eval_proposal_scenario([RankedResult.build("q", "img", boxes, scores, gt)])
        perm = list(rng.permutation(12))
        shuffled = eval_proposal_scenario([RankedResult.build(
            "q", "img", [boxes[i] for i in perm], [scores[i] for i in perm], gt)])
        assert base.to_dict() == shuffled.to_dict()

    def test_monotone_in_k_randomized(self):
        rng = make_rng(77)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            hit_ranks = set(int(i) for i in rng.integers(0, n, size=rng.integers(0, 4)))
            results = [proposal_result(hit_ranks, n)]
            report = eval_proposal_scenario(results)
            assert report.r_at_k[1] <= report.r_at_k[10] <= report.oracle

    def test_score_transform_invariance(self):
        gt = BoundingBox(0.0, 0.0, 5.0, 5.0)
        boxes = [gt] + [BoundingBox(50.0, 0.0, 54.0, 5.0)] * 10
        scores = [-3.0, -1.0, 0.5, 2.0, -2.5, 1.5, 0.0, -0.5, 3.0, -4.0, 0.25]
        base = eval_proposal_scenario([RankedResult.build("q", "i", boxes, scores, gt)])
        squashed = eval_proposal_scenario([RankedResult.build(
            "q", "i", boxes, [np.tanh(s) for s in scores], gt)])
        assert base.to_dict() == squashed.to_dict()

    def test_empty_results_rejected(self):
        with pytest.raises(InputError):
            eval_proposal_scenario([])

    def test_empty_candidates_rejected(self):
        with pytest.raises(InputError):
            RankedResult.build("q", "img", [], [], box_at(0))


class TestReportShape:
    def test_gt_dict(self):
        d = eval_gt_scenario([gt_result(2, 0, 0)]).to_dict()
        assert d == {"scenario": "gt_boxes", "query_count": 1, "p_at_1": 1.0}

    def test_proposal_dict_keys(self):
        d = eval_proposal_scenario([proposal_result({0}, 12)]).to_dict()
        assert set(d) == {"scenario", "query_count", "r_at_1", "r_at_10", "oracle"}

    def test_custom_k_list(self):
        d = eval_proposal_scenario([proposal_result({2}, 12)], k_list=(1, 3, 5)).to_dict()
        assert d["r_at_1"] == 0.0
        assert d["r_at_3"] == 1.0
        assert d["r_at_5"] == 1.0


class TestPerQueryCsv:
    def test_columns_and_flags(self, tmp_path):
        path = tmp_path / "q.csv"
        write_per_query_csv([proposal_result({4}, 12)], "proposals", path)
        rows = list(csv.reader(path.read_text().splitlines()))
        assert rows[0] == ["query", "image_id", "rank1_iou", "hit_at_1", "hit_at_10",
                           "hit_any"]
        assert rows[1][3:] == ["0", "1", "1"]

    def test_gt_scenario_identity_flags(self, tmp_path):
        path = tmp_path / "q.csv"
        write_per_query_csv([gt_result(3, 1, 1)], "gt_boxes", path)
        rows = list(csv.reader(path.read_text().splitlines()))
        assert rows[1][3] == "1"
        assert rows[1][2] == "1.000000"  # rank-1 box is the gt box itself

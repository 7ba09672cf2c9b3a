import random

import pytest
import torch

from fssuw.dataset import build_folds
from fssuw.episodes import sample_test_pairs
from fssuw.errors import EmptyEpisodeList, ShapeMismatch
from fssuw.evaluation import (MetricsReport, aggregate_reports, evaluate_fold, iou,
                              render_table)


class TestIou:
    def test_identity(self):
        m = torch.zeros(6, 6, dtype=torch.uint8)
        m[1:4, 1:4] = 1
        assert iou(m, m) == 1.0

    def test_disjoint(self):
        a = torch.zeros(4, 4, dtype=torch.uint8)
        b = torch.zeros(4, 4, dtype=torch.uint8)
        a[:2] = 1
        b[2:] = 1
        assert iou(a, b) == 0.0

    def test_subset_pixel_count(self):
        gt = torch.zeros(5, 5, dtype=torch.uint8)
        gt[0, :4] = 1
        pred = torch.zeros(5, 5, dtype=torch.uint8)
        pred[0, :2] = 1
        assert iou(pred, gt) == pytest.approx(2 / 4)

    def test_both_empty_is_vacuous_agreement(self):
        z = torch.zeros(3, 3, dtype=torch.uint8)
        assert iou(z, z) == 1.0

    def test_symmetric(self):
        g = torch.Generator().manual_seed(3)
        a = (torch.rand(6, 6, generator=g) > 0.5).to(torch.uint8)
        b = (torch.rand(6, 6, generator=g) > 0.5).to(torch.uint8)
        assert iou(a, b) == iou(b, a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            iou(torch.zeros(4, 4), torch.zeros(5, 5))


class _FixedPredictor:
    """Duck-typed stand-in for FssuwNet: predicts a stored mask per query id."""

    def __init__(self, predictions):
        self.predictions = predictions

    def eval(self):
        return self

    def predict(self, episode, out_size=None):
        return self.predictions[episode.query_id]


def _perfect_predictor(index, specs):
    preds = {}
    for s in specs:
        preds[s.query_id] = (index.load_mask(s.query_id) == s.class_id).to(torch.uint8)
    return _FixedPredictor(preds)


@pytest.fixture
def eval_setup(suim_index):
    fold = build_folds(suim_index, "suim2")[0]
    specs = sample_test_pairs(fold, suim_index, n=20, seed=2)
    return fold, specs, suim_index


class TestEvaluateFold:
    def test_perfect_model_scores_one(self, eval_setup):
        fold, specs, index = eval_setup
        model = _perfect_predictor(index, specs)
        report = evaluate_fold(model, specs, index, resolution=32, fold_id=fold.fold_id)
        assert report.fold_miou == pytest.approx(1.0)
        assert all(v == pytest.approx(1.0) for v in report.per_class_iou.values())
        assert report.n_episodes == 20

    def test_all_background_scores_zero(self, eval_setup):
        fold, specs, index = eval_setup
        shape = index.records[specs[0].query_id].shape
        model = _FixedPredictor({s.query_id: torch.zeros(shape, dtype=torch.uint8)
                                 for s in specs})
        report = evaluate_fold(model, specs, index, resolution=32)
        assert all(v == 0.0 for v in report.per_class_iou.values())

    def test_mean_over_two_classes(self, suim_index):
        # one episode per class with engineered subset IoUs; mIoU is their mean
        from fssuw.episodes import EpisodeSpec
        index = suim_index
        ids = {index.class_map.id_of("HD"): 0.6, index.class_map.id_of("PF"): 0.2}
        specs, preds, expected = [], {}, []
        for cid, target_iou in ids.items():
            pool = index.instances(cid)
            spec = EpisodeSpec(cid, (pool[0],), pool[1])
            specs.append(spec)
            gt = (index.load_mask(spec.query_id) == cid)
            n = int(gt.sum().item())
            keep = int(round(target_iou * n))
            pred = torch.zeros_like(gt, dtype=torch.uint8)
            rows, cols = torch.nonzero(gt, as_tuple=True)
            pred[rows[:keep], cols[:keep]] = 1
            preds[spec.query_id] = pred
            expected.append(keep / n)
        report = evaluate_fold(_FixedPredictor(preds), specs, index, resolution=32)
        assert report.fold_miou == pytest.approx(sum(expected) / len(expected), abs=1e-12)

    def test_miou_is_unweighted_class_mean(self):
        report = MetricsReport(per_class_iou={1: 0.6, 2: 0.2}, fold_miou=0.4, fold_id=0)
        assert sum(report.per_class_iou.values()) / len(report.per_class_iou) == \
            pytest.approx(report.fold_miou) == pytest.approx(0.4)

    def test_accumulation_matches_bruteforce_recount(self, eval_setup):
        fold, specs, index = eval_setup
        g = torch.Generator().manual_seed(4)
        preds = {}
        for s in specs:
            shape = index.records[s.query_id].shape
            preds[s.query_id] = (torch.rand(shape, generator=g) > 0.6).to(torch.uint8)
        report = evaluate_fold(_FixedPredictor(preds), specs, index, resolution=32)

        inter, union = {}, {}
        for s in specs:
            gt = (index.load_mask(s.query_id) == s.class_id)
            p = preds[s.query_id].bool()
            inter[s.class_id] = inter.get(s.class_id, 0) + (p & gt).sum().item()
            union[s.class_id] = union.get(s.class_id, 0) + (p | gt).sum().item()
        for cid, expected in ((c, inter[c] / union[c]) for c in inter):
            assert report.per_class_iou[cid] == pytest.approx(expected, abs=1e-12)

    def test_order_invariance(self, eval_setup):
        fold, specs, index = eval_setup
        g = torch.Generator().manual_seed(5)
        preds = {s.query_id: (torch.rand(index.records[s.query_id].shape, generator=g) > 0.5).to(torch.uint8)
                 for s in specs}
        r1 = evaluate_fold(_FixedPredictor(preds), specs, index, resolution=32)
        shuffled = specs[:]
        random.Random(0).shuffle(shuffled)
        r2 = evaluate_fold(_FixedPredictor(preds), shuffled, index, resolution=32)
        assert r1.fold_miou == r2.fold_miou
        assert r1.per_class_iou == r2.per_class_iou

    def test_empty_list(self, suim_index):
        with pytest.raises(EmptyEpisodeList):
            evaluate_fold(_FixedPredictor({}), [], suim_index)

    def test_per_episode_mean_variant(self, eval_setup):
        fold, specs, index = eval_setup
        g = torch.Generator().manual_seed(6)
        preds = {s.query_id: (torch.rand(index.records[s.query_id].shape, generator=g) > 0.5).to(torch.uint8)
                 for s in specs}
        r = evaluate_fold(_FixedPredictor(preds), specs, index, resolution=32,
                          per_episode_mean=True)
        per_class = {}
        for s in specs:
            gt = (index.load_mask(s.query_id) == s.class_id).to(torch.uint8)
            per_class.setdefault(s.class_id, []).append(iou(preds[s.query_id], gt))
        for cid, vals in per_class.items():
            assert r.per_class_iou[cid] == pytest.approx(sum(vals) / len(vals))


class TestReports:
    def test_aggregate_mean(self):
        reports = [MetricsReport({1: 0.7}, 0.70, 0), MetricsReport({2: 0.6}, 0.60, 1),
                   MetricsReport({3: 0.65}, 0.65, 2), MetricsReport({4: 0.65}, 0.65, 3)]
        agg = aggregate_reports(reports)
        assert agg.mean_over_folds == pytest.approx(0.65)
        assert agg.per_fold_miou == {0: 0.70, 1: 0.60, 2: 0.65, 3: 0.65}

    def test_render_table_layout(self):
        reports = [MetricsReport({}, 0.5, 0), MetricsReport({}, 0.7, 1)]
        md, csv_text = render_table(reports)
        assert "Fold-0" in md and "Fold-1" in md and "Mean" in md
        assert "0.6000" in md
        assert csv_text.splitlines()[0] == "metric,Fold-0,Fold-1,Mean"

    def test_json_round_trip(self):
        r = MetricsReport({1: 0.5, 2: 0.75}, 0.625, 3, n_episodes=10)
        back = MetricsReport.from_json(r.to_json())
        assert back == r

"""Retrieval metric tests against plain-Python sorting oracles."""

import json
import math
from collections import Counter

import numpy as np
import pytest

from mrcontrast.errors import (
    EmptyGallery,
    EmptyImageSet,
    EmptyPredictionList,
    LabelDecodeFailure,
    SingleClassTrainingSet,
)
from mrcontrast.evaluate import (
    Gallery,
    build_gallery,
    encode_features,
    linear_probe,
    per_tag_error,
    rank_gallery,
    recall_at_k,
    render_table,
    run_evaluation,
    scan_majority_vote,
    scan_ranking,
    scan_to_text_recall,
    text_to_image_recall,
)
from mrcontrast.labels import GridSpec, LabelConfig, build_label_space
from mrcontrast.records import make_record
from mrcontrast.train import dataset_arrays


def unit(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return arr / np.linalg.norm(arr, axis=1, keepdims=True)


def mk_gallery(ids, embeddings):
    return Gallery(
        label_ids=np.asarray(ids, dtype=np.int64),
        embeddings=unit(embeddings),
    )


def random_gallery(rng, n_labels, dim):
    ids = np.sort(rng.choice(50, size=n_labels, replace=False)).astype(np.int64)
    return Gallery(label_ids=ids, embeddings=unit(rng.normal(size=(n_labels, dim))))


def reference_rank(queries, gallery):
    """Sort by similarity descending, then ascending label id."""
    sims = queries @ gallery.embeddings.T
    out = []
    for i in range(queries.shape[0]):
        order = sorted(
            range(gallery.label_ids.size),
            key=lambda j: (-sims[i, j], gallery.label_ids[j]),
        )
        out.append([int(gallery.label_ids[j]) for j in order])
    return np.asarray(out, dtype=np.int64)


class TestRankGallery:
    def test_hand_case(self):
        gallery = mk_gallery([0, 1, 2], [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        ranked = rank_gallery(unit([[1.0, 0.0]]), gallery)
        np.testing.assert_array_equal(ranked, [[0, 2, 1]])

    def test_tie_breaks_by_ascending_label_id(self):
        gallery = mk_gallery([7, 3, 5], [[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        ranked = rank_gallery(unit([[1.0, 0.0]]), gallery)
        np.testing.assert_array_equal(ranked, [[3, 5, 7]])

    def test_matches_sorting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            gallery = random_gallery(rng, int(rng.integers(2, 9)), 4)
            queries = unit(rng.normal(size=(int(rng.integers(1, 7)), 4)))
            np.testing.assert_array_equal(
                rank_gallery(queries, gallery), reference_rank(queries, gallery)
            )

    def test_empty_queries_raise(self):
        gallery = mk_gallery([0], [[1.0, 0.0]])
        with pytest.raises(EmptyImageSet):
            rank_gallery(np.empty((0, 2)), gallery)


class TestRecallAtK:
    def gallery(self):
        return mk_gallery([0, 1, 2], [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])

    def test_hand_case(self):
        queries = unit([[1.0, 0.0], [0.0, 1.0]])
        out = recall_at_k(queries, self.gallery(), np.array([0, 0]), ks=(1, 2, 3))
        assert out == {1: 0.5, 2: 0.5, 3: 1.0}

    def test_k_larger_than_gallery_saturates(self):
        queries = unit([[0.0, 1.0]])
        out = recall_at_k(queries, self.gallery(), np.array([0]), ks=(10,))
        assert out == {10: 1.0}

    def test_k_below_one_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k(unit([[1.0, 0.0]]), self.gallery(), np.array([0]), ks=(0,))


def reference_text_to_image(gallery, image_embeddings, image_label_ids, ks):
    sims = gallery.embeddings @ image_embeddings.T
    n = image_embeddings.shape[0]
    hits = {k: 0 for k in ks}
    for q in range(gallery.label_ids.size):
        order = sorted(
            range(n), key=lambda i: (-sims[q, i], image_label_ids[i], i)
        )
        labels = [int(image_label_ids[i]) for i in order]
        for k in ks:
            if int(gallery.label_ids[q]) in labels[:k]:
                hits[k] += 1
    return {k: hits[k] / gallery.label_ids.size for k in ks}


class TestTextToImageRecall:
    def test_hand_case_perfect(self):
        gallery = mk_gallery([0, 1], [[1.0, 0.0], [0.0, 1.0]])
        images = unit([[1.0, 0.1], [0.1, 1.0]])
        out = text_to_image_recall(gallery, images, np.array([0, 1]), ks=(1,))
        assert out == {1: 1.0}

    def test_hand_case_swapped_labels(self):
        gallery = mk_gallery([0, 1], [[1.0, 0.0], [0.0, 1.0]])
        images = unit([[1.0, 0.1], [0.1, 1.0]])
        out = text_to_image_recall(gallery, images, np.array([1, 0]), ks=(1, 2))
        assert out == {1: 0.0, 2: 1.0}

    def test_matches_sorting_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            gallery = random_gallery(rng, int(rng.integers(2, 6)), 4)
            n = int(rng.integers(2, 9))
            images = unit(rng.normal(size=(n, 4)))
            labels = rng.choice(gallery.label_ids, size=n)
            got = text_to_image_recall(gallery, images, labels, ks=(1, 2, 3))
            want = reference_text_to_image(gallery, images, labels, ks=(1, 2, 3))
            assert got == want

    def test_empty_images_raise(self):
        gallery = mk_gallery([0], [[1.0, 0.0]])
        with pytest.raises(EmptyImageSet):
            text_to_image_recall(gallery, np.empty((0, 2)), np.array([]))


class TestScanMajorityVote:
    def test_clear_mode_wins(self):
        assert scan_majority_vote([3, 3, 5], [0.1, 0.1, 0.99]) == 3

    def test_count_tie_resolved_by_mean_score(self):
        assert scan_majority_vote([1, 2], [0.9, 0.8]) == 1
        assert scan_majority_vote([1, 2], [0.8, 0.9]) == 2

    def test_full_tie_resolved_by_lowest_id(self):
        assert scan_majority_vote([2, 1], [0.5, 0.5]) == 1

    def test_mean_uses_only_voting_slices(self):
        # label 4 votes: 0.9, 0.1 (mean 0.5); label 6 votes: 0.6, 0.6 (mean 0.6)
        assert scan_majority_vote([4, 4, 6, 6], [0.9, 0.1, 0.6, 0.6]) == 6

    def test_empty_raises(self):
        with pytest.raises(EmptyPredictionList):
            scan_majority_vote([], [])


class TestScanRanking:
    def gallery(self):
        return mk_gallery(
            [0, 1, 2, 3],
            [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]],
        )

    def test_vote_counts_order_the_tail(self):
        ranked = scan_ranking(
            np.array([1, 1, 2]),
            np.array([0.9, 0.8, 0.95]),
            np.array([0.1, 0.5, 0.6, 0.2]),
            self.gallery(),
        )
        np.testing.assert_array_equal(ranked, [1, 2, 3, 0])

    def test_vote_winner_promoted_over_higher_mean(self):
        # counts tie 1-1; the vote tie-break picks label 1 (score 0.9) even
        # though label 2 has the higher scan-mean similarity
        ranked = scan_ranking(
            np.array([1, 2]),
            np.array([0.9, 0.1]),
            np.array([0.0, 0.2, 0.9, 0.0]),
            self.gallery(),
        )
        np.testing.assert_array_equal(ranked, [1, 2, 0, 3])

    def test_result_is_permutation_of_gallery(self):
        ranked = scan_ranking(
            np.array([3]),
            np.array([0.4]),
            np.array([0.4, 0.3, 0.2, 0.1]),
            self.gallery(),
        )
        assert sorted(ranked.tolist()) == [0, 1, 2, 3]
        assert ranked[0] == 3


def reference_scan_to_text(image_embeddings, image_label_ids, scan_ids, gallery, ks):
    sims = image_embeddings @ gallery.embeddings.T
    top1_label = []
    top1_score = []
    for i in range(image_embeddings.shape[0]):
        order = sorted(
            range(gallery.label_ids.size),
            key=lambda j: (-sims[i, j], gallery.label_ids[j]),
        )
        top1_label.append(int(gallery.label_ids[order[0]]))
        top1_score.append(float(sims[i, order[0]]))

    def vote(preds, scores):
        votes = Counter(preds)
        top = max(votes.values())
        tied = [lab for lab, v in votes.items() if v == top]
        if len(tied) == 1:
            return tied[0]
        means = {
            lab: float(np.mean([s for p, s in zip(preds, scores) if p == lab]))
            for lab in tied
        }
        best = max(means.values())
        return min(lab for lab in tied if means[lab] == best)

    hits = {k: 0 for k in ks}
    scans = sorted(set(int(s) for s in scan_ids))
    for scan in scans:
        rows = [i for i, s in enumerate(scan_ids) if int(s) == scan]
        truth = int(image_label_ids[rows[0]])
        preds = [top1_label[i] for i in rows]
        scores = [top1_score[i] for i in rows]
        winner = vote(preds, scores)
        counts = Counter(preds)
        mean_sims = sims[rows].mean(axis=0)
        rest = sorted(
            range(gallery.label_ids.size),
            key=lambda j: (
                -counts.get(int(gallery.label_ids[j]), 0),
                -mean_sims[j],
                gallery.label_ids[j],
            ),
        )
        ranked = [winner] + [
            int(gallery.label_ids[j])
            for j in rest
            if int(gallery.label_ids[j]) != winner
        ]
        for k in ks:
            if truth in ranked[:k]:
                hits[k] += 1
    return {k: hits[k] / len(scans) for k in ks}


class TestScanToTextRecall:
    def test_majority_vote_rescues_outvoted_slice(self):
        gallery = mk_gallery([0, 1], [[1.0, 0.0], [0.0, 1.0]])
        images = unit([[1.0, 0.0], [2.0, 1.0], [1.0, 2.0]])
        labels = np.array([0, 0, 0])
        scans = np.array([9, 9, 9])
        s2t = scan_to_text_recall(images, labels, scans, gallery, ks=(1,))
        assert s2t == {1: 1.0}
        i2t = recall_at_k(images, gallery, labels, ks=(1,))
        assert i2t[1] == pytest.approx(2.0 / 3.0)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(2)
        for _ in range(8):
            gallery = random_gallery(rng, int(rng.integers(3, 7)), 4)
            scan_ids = []
            labels = []
            for scan in range(int(rng.integers(2, 6))):
                n_slices = int(rng.integers(1, 5))
                lab = int(rng.choice(gallery.label_ids))
                scan_ids.extend([scan] * n_slices)
                labels.extend([lab] * n_slices)
            images = unit(rng.normal(size=(len(labels), 4)))
            labels = np.asarray(labels, dtype=np.int64)
            scan_ids = np.asarray(scan_ids, dtype=np.int64)
            got = scan_to_text_recall(images, labels, scan_ids, gallery, ks=(1, 2, 3))
            want = reference_scan_to_text(images, labels, scan_ids, gallery, ks=(1, 2, 3))
            assert got == want


class TestLinearProbe:
    def clusters(self, rng, n_per, centers, labels):
        xs, ys = [], []
        for center, label in zip(centers, labels):
            xs.append(rng.normal(scale=0.1, size=(n_per, 2)) + center)
            ys.extend([label] * n_per)
        return np.concatenate(xs), np.asarray(ys, dtype=np.int64)

    def test_separable_clusters_reach_full_accuracy(self):
        rng = np.random.default_rng(3)
        train_x, train_y = self.clusters(rng, 30, [(0, 0), (5, 5)], [5, 9])
        eval_x, eval_y = self.clusters(rng, 20, [(0, 0), (5, 5)], [5, 9])
        result = linear_probe(train_x, train_y, eval_x, eval_y)
        assert result.accuracy == 1.0
        assert set(result.predicted_ids.tolist()) <= {5, 9}

    def test_first_loss_is_log_class_count(self):
        rng = np.random.default_rng(4)
        train_x, train_y = self.clusters(
            rng, 10, [(0, 0), (4, 0), (0, 4)], [0, 1, 2]
        )
        result = linear_probe(train_x, train_y, train_x, train_y, max_iter=5)
        assert result.losses[0] == pytest.approx(math.log(3), rel=1e-12)

    def test_losses_never_increase(self):
        rng = np.random.default_rng(5)
        train_x, train_y = self.clusters(rng, 25, [(0, 0), (2, 1)], [0, 1])
        result = linear_probe(train_x, train_y, train_x, train_y)
        for before, after in zip(result.losses, result.losses[1:]):
            assert after <= before

    def test_iteration_budget_respected(self):
        rng = np.random.default_rng(6)
        train_x, train_y = self.clusters(rng, 10, [(0, 0), (3, 3)], [0, 1])
        result = linear_probe(train_x, train_y, train_x, train_y, max_iter=3)
        assert result.n_iterations <= 3

    def test_loose_gradient_tolerance_stops_immediately(self):
        rng = np.random.default_rng(7)
        train_x, train_y = self.clusters(rng, 10, [(0, 0), (3, 3)], [0, 1])
        result = linear_probe(train_x, train_y, train_x, train_y, grad_tol=1e9)
        assert result.n_iterations == 1

    def test_single_class_rejected(self):
        x = np.zeros((4, 2))
        y = np.array([7, 7, 7, 7])
        with pytest.raises(SingleClassTrainingSet):
            linear_probe(x, y, x, y)


class TestPerTagError:
    def space(self):
        def rec(te, tr, manufacturer="SIEMENS", model="AVANTO"):
            return make_record(
                "r", manufacturer=manufacturer, scanner_model=model,
                sequence_type="SE", sequence_variant="SK",
                field_strength_tesla=1.5, te_ms=te, tr_ms=tr,
                flip_angle_deg=90.0, voxel_spacing_mm=(1.0, 1.0, 5.0),
            )

        records = [
            rec(5.0, 250.0),
            rec(35.0, 1750.0),
            rec(5.0, 250.0, manufacturer="GE", model="SIGNA"),
        ]
        return build_label_space(records, LabelConfig())

    def test_timing_mismatch_rates_and_distances(self):
        space, ids = self.space()
        id_a, id_b, _ = (int(i) for i in ids)
        report = per_tag_error(np.array([id_a]), np.array([id_b]), space)
        assert report.rates["te_bin"] == 1.0
        assert report.rates["tr_bin"] == 1.0
        assert report.rates["manufacturer"] == 0.0
        assert report.te_bin_mae == 3.0
        assert report.tr_bin_mae == 3.0
        assert report.te_mae_ms == 30.0
        assert report.tr_mae_ms == 1500.0

    def test_categorical_mismatch_leaves_timings_clean(self):
        space, ids = self.space()
        id_a, _, id_c = (int(i) for i in ids)
        report = per_tag_error(np.array([id_c]), np.array([id_a]), space)
        assert report.rates["manufacturer"] == 1.0
        assert report.rates["scanner_model"] == 1.0
        assert report.rates["te_bin"] == 0.0
        assert report.te_mae_ms == 0.0

    def test_millisecond_error_is_exactly_bins_times_width(self):
        space, ids = self.space()
        id_a, id_b, id_c = (int(i) for i in ids)
        pred = np.array([id_a, id_c, id_b])
        true = np.array([id_b, id_a, id_b])
        report = per_tag_error(pred, true, space)
        grid = space.config.grid
        assert report.te_mae_ms == report.te_bin_mae * grid.te_width
        assert report.tr_mae_ms == report.tr_bin_mae * grid.tr_width
        assert report.te_bin_mae == pytest.approx(1.0)
        assert report.rates["manufacturer"] == pytest.approx(1.0 / 3.0)

    def test_perfect_predictions_are_clean(self):
        space, ids = self.space()
        report = per_tag_error(ids, ids, space)
        assert all(rate == 0.0 for rate in report.rates.values())
        assert report.te_mae_ms == 0.0 and report.tr_mae_ms == 0.0

    def test_length_mismatch_rejected(self):
        space, ids = self.space()
        with pytest.raises(LabelDecodeFailure):
            per_tag_error(ids[:1], ids, space)


class TestGalleryAndEndToEnd:
    def test_build_gallery_dedupes_and_sorts(self, tiny_run):
        slices, space, ids, run, state = tiny_run
        gallery = build_gallery(state.model, space, [int(i) for i in ids])
        np.testing.assert_array_equal(gallery.label_ids, np.unique(ids))
        norms = np.linalg.norm(gallery.embeddings, axis=1)
        np.testing.assert_allclose(norms, 1.0, rtol=1e-9)

    def test_build_gallery_empty_raises(self, tiny_run):
        _, space, _, _, state = tiny_run
        with pytest.raises(EmptyGallery):
            build_gallery(state.model, space, [])

    def test_encode_features_chunking_is_consistent(self, tiny_run):
        slices, _, _, _, state = tiny_run
        features, _, _ = dataset_arrays(slices[:10])
        full = encode_features(state.model, features)
        chunked = encode_features(state.model, features, chunk=3)
        np.testing.assert_allclose(chunked, full, rtol=1e-12)
        assert full.shape == (10, state.model.config.d_emb)

    def test_run_evaluation_report_shape(self, tiny_run):
        slices, space, ids, run, state = tiny_run
        features, scan_ids, _ = dataset_arrays(slices)
        report = run_evaluation(
            state.model, space, features, ids, features, ids, scan_ids,
            config_hash="cafe0123", ks=(1, 5),
        )
        assert set(report.recalls) == {"image_to_text", "scan_to_text", "text_to_image"}
        for task in report.recalls.values():
            assert set(task) == {"r1", "r5"}
            for value in task.values():
                assert 0.0 <= value <= 1.0
        assert report.probe_accuracy is not None
        assert set(report.per_tag_error) == set(space.key_fields)
        grid = space.config.grid
        assert report.te_mae_ms == report.te_bin_mae * grid.te_width
        assert report.config_hash == "cafe0123"
        assert report.counts["n_eval_slices"] == len(slices)
        assert report.counts["n_eval_scans"] == len({s.scan_id for s in slices})
        assert report.counts["n_labels"] == len(space)
        json.dumps(report.to_json_dict())

    def test_transfer_grid_relabels_and_skips_probe(self, tiny_run):
        slices, space, ids, run, state = tiny_run
        features, scan_ids, _ = dataset_arrays(slices)
        report = run_evaluation(
            state.model, space, features, ids, features, ids, scan_ids,
            config_hash="cafe0123", ks=(1,),
            transfer_grid=GridSpec(n_te=1, n_tr=1),
        )
        assert report.probe_accuracy is None
        assert report.per_tag_error == {}
        assert report.counts["n_labels"] == 2
        assert report.counts["n_gallery"] == 2

    def test_render_table_mentions_headline_numbers(self, tiny_run):
        slices, space, ids, run, state = tiny_run
        features, scan_ids, _ = dataset_arrays(slices)
        report = run_evaluation(
            state.model, space, features, ids, features, ids, scan_ids,
            config_hash="cafe0123",
        )
        text = render_table(report)
        assert "scan_to_text" in text
        assert "linear probe accuracy" in text
        assert "cafe0123" in text

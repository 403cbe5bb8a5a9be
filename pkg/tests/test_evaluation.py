"""Probes, aggregation statistics, slope regression, toy geometry."""

import math

import numpy as np
import pytest

from cmim.data import Dataset
from cmim.errors import ContractError
from cmim.evaluation import (
    EmbeddingSet,
    MetricsRecord,
    angle_radius_stats,
    batch_slope,
    embed_dataset,
    knn_probe,
    load_records,
    mlp_probe,
    rank_aggregate,
    reconstruction_score,
    save_records,
    zscore_aggregate,
    zscore_per_record,
)
from cmim.evaluation import _ols
from cmim.models import build_bundle, decode, mean_embedding
from cmim.numcore import Tensor
from cmim.distributions import bernoulli_log_prob


def embset(X, labels, kind="mean", **kw):
    return EmbeddingSet(X=np.asarray(X, dtype=float), labels=np.asarray(labels),
                        kind=kind, **kw)


class TestKnnProbe:
    def test_exact_duplicate_neighborhood(self):
        # the query coincides with five same-label training points
        train = embset(np.vstack([np.zeros((5, 2)), np.ones((5, 2)) * 10]),
                       [7] * 5 + [1] * 5)
        test = embset(np.zeros((1, 2)), [7])
        assert knn_probe(train, test, k=5) == 1.0

    def test_two_separated_blobs_perfect(self, rng):
        a = rng.normal(0.0, 0.1, size=(100, 3))
        b = rng.normal(0.0, 0.1, size=(100, 3)) + np.array([10.0, 0, 0])
        train = embset(np.vstack([a[:80], b[:80]]), [0] * 80 + [1] * 80)
        test = embset(np.vstack([a[80:], b[80:]]), [0] * 20 + [1] * 20)
        for metric in ("euclidean", "cosine"):
            assert knn_probe(train, test, k=5, metric=metric) == 1.0

    def test_k1_matches_bruteforce_oracle(self, rng):
        train = embset(rng.standard_normal((50, 4)), rng.integers(0, 5, 50))
        test = embset(rng.standard_normal((20, 4)), rng.integers(0, 5, 20))
        acc = knn_probe(train, test, k=1, metric="euclidean")
        correct = 0
        for x, y in zip(test.X, test.labels):
            nearest = np.argmin(((train.X - x) ** 2).sum(axis=1))
            correct += int(train.labels[nearest] == y)
        assert acc == correct / 20

    def test_vote_tie_breaks_by_summed_distance(self):
        # 2-2-1 votes: label 0 at distances {1, 4}, label 1 at {2, 2.5}, plus
        # a singleton; label 1 wins on the smaller distance sum
        train = embset([[1.0, 0], [-4.0, 0], [0, 2.0], [0, -2.5], [8.0, 8.0]],
                       [0, 0, 1, 1, 2])
        test = embset([[0.0, 0.0]], [1])
        assert knn_probe(train, test, k=5) == 1.0

    def test_full_tie_breaks_by_smallest_label(self):
        train = embset([[1.0, 0], [-1.0, 0], [0, 1.0], [0, -1.0]], [3, 3, 1, 1])
        test = embset([[0.0, 0.0]], [1])
        assert knn_probe(train, test, k=4) == 1.0  # equal votes, equal sums -> label 1

    def test_train_set_on_itself_with_k1(self, rng):
        X = rng.standard_normal((30, 4))
        ds = embset(X, rng.integers(0, 3, 30))
        assert knn_probe(ds, ds, k=1) == 1.0

    def test_k_exceeding_train_rejected(self, rng):
        ds = embset(rng.standard_normal((3, 2)), [0, 1, 2])
        with pytest.raises(ContractError):
            knn_probe(ds, ds, k=4)

    def test_dim_mismatch_rejected(self, rng):
        a = embset(rng.standard_normal((5, 2)), range(5))
        b = embset(rng.standard_normal((5, 3)), range(5))
        with pytest.raises(ContractError):
            knn_probe(a, b)


class TestMlpProbe:
    def test_linearly_separable(self, rng):
        X = np.vstack([rng.normal(-2, 0.3, size=(60, 2)), rng.normal(2, 0.3, size=(60, 2))])
        y = np.array([0] * 60 + [1] * 60)
        train = embset(X, y)
        test = embset(X + rng.normal(0, 0.05, X.shape), y)
        assert mlp_probe(train, test, hidden=32, steps=300, seed=0) >= 0.99

    def test_shuffled_labels_hit_chance_level(self, rng):
        n_classes, n = 4, 400
        X = rng.standard_normal((n, 6))
        y_random = rng.integers(0, n_classes, n)
        train = embset(X, y_random)
        test = embset(rng.standard_normal((n, 6)), rng.integers(0, n_classes, n))
        acc = mlp_probe(train, test, hidden=16, steps=150, seed=1)
        p = 1.0 / n_classes
        assert abs(acc - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_deterministic_under_seed(self, rng):
        X = rng.standard_normal((80, 3))
        y = rng.integers(0, 3, 80)
        train, test = embset(X, y), embset(X[:30], y[:30])
        a = mlp_probe(train, test, hidden=8, steps=100, seed=5)
        b = mlp_probe(train, test, hidden=8, steps=100, seed=5)
        assert a == b


def make_record(obj="m", ds="d", bs=10, seed=0, probe="knn5_cosine", kind="mean",
                acc=0.5):
    return MetricsRecord(objective=obj, dataset=ds, batch_size=bs, seed=seed,
                         probe=probe, kind=kind, accuracy=acc)


class TestZScores:
    def test_two_models_single_cell(self):
        records = [make_record(obj="a", acc=0.4), make_record(obj="b", acc=0.6)]
        zs = zscore_per_record(records)
        assert zs == [-1.0, 1.0]  # population std of {0.4, 0.6} is 0.1
        agg = zscore_aggregate(records)
        assert agg["a"][0] == -1.0 and agg["b"][0] == 1.0

    def test_identical_accuracies_all_zero(self):
        records = [make_record(obj=o, acc=0.7) for o in "abcd"]
        assert zscore_per_record(records) == [0.0] * 4

    def test_three_model_hand_computed_fixture(self):
        # cell 1: accuracies 0.2, 0.5, 0.8 -> z = -1.2247, 0, 1.2247
        # cell 2: accuracies 0.9, 0.6, 0.6 -> z = 1.4142, -0.7071, -0.7071
        records = [
            make_record(obj="a", probe="mlp", acc=0.2),
            make_record(obj="b", probe="mlp", acc=0.5),
            make_record(obj="c", probe="mlp", acc=0.8),
            make_record(obj="a", probe="knn5_cosine", acc=0.9),
            make_record(obj="b", probe="knn5_cosine", acc=0.6),
            make_record(obj="c", probe="knn5_cosine", acc=0.6),
        ]
        agg = zscore_aggregate(records)
        assert agg["a"][0] == pytest.approx((-1.22474487 + 1.41421356) / 2, abs=1e-6)
        assert agg["b"][0] == pytest.approx((0.0 - 0.70710678) / 2, abs=1e-6)
        assert agg["c"][0] == pytest.approx((1.22474487 - 0.70710678) / 2, abs=1e-6)

    def test_invariant_to_per_cell_affine_rescaling(self, rng):
        records = [
            make_record(obj=o, probe=p, acc=float(a))
            for o, p, a in zip("abcabc", ["mlp"] * 3 + ["knn5_cosine"] * 3,
                               rng.uniform(0.2, 0.9, 6))
        ]
        base = zscore_per_record(records)
        rescaled = []
        for r in records:
            scale, shift = (0.5, 0.2) if r.probe == "mlp" else (0.1, 0.05)
            rescaled.append(make_record(obj=r.objective, probe=r.probe,
                                        acc=r.accuracy * scale + shift))
        np.testing.assert_allclose(zscore_per_record(rescaled), base, atol=1e-9)

    def test_reconstruction_rows_excluded(self):
        records = [make_record(obj="a", acc=0.4), make_record(obj="b", acc=0.6),
                   MetricsRecord(objective="a", dataset="d", batch_size=10, seed=0,
                                 probe="reconstruction", kind="mean", accuracy=-90.0)]
        agg = zscore_aggregate(records)
        assert agg["a"][0] == -1.0


class TestRankAggregate:
    def test_rank_one_is_best(self):
        records = [make_record(obj="a", acc=0.9), make_record(obj="b", acc=0.2),
                   make_record(obj="c", acc=0.5)]
        agg = rank_aggregate(records)
        assert agg["a"][0] == 1.0 and agg["c"][0] == 2.0 and agg["b"][0] == 3.0

    def test_ties_share_mean_rank(self):
        records = [make_record(obj="a", acc=0.9), make_record(obj="b", acc=0.9),
                   make_record(obj="c", acc=0.1)]
        agg = rank_aggregate(records)
        assert agg["a"][0] == 1.5 and agg["b"][0] == 1.5 and agg["c"][0] == 3.0

    def test_rank_sum_constant_per_cell(self, rng):
        for trial in range(5):
            accs = rng.uniform(0, 1, 4)
            records = [make_record(obj=f"m{i}", acc=float(a)) for i, a in enumerate(accs)]
            agg = rank_aggregate(records)
            total = sum(v[0] for v in agg.values())
            assert total == pytest.approx(1 + 2 + 3 + 4)
            assert all(1.0 <= v[0] <= 4.0 for v in agg.values())


class TestBatchSlope:
    def test_constant_z_gives_zero_slope(self):
        records = []
        for bs in (2, 10, 100):
            records.append(make_record(obj="a", bs=bs, acc=0.4))
            records.append(make_record(obj="b", bs=bs, acc=0.6))
        slopes = batch_slope(records)
        assert slopes["a"][0] == pytest.approx(0.0, abs=1e-12)
        assert slopes["b"][0] == pytest.approx(0.0, abs=1e-12)

    def test_exact_line_fixture(self):
        # the regression itself: y = 0.01 x recovered exactly
        x = np.array([2.0, 10.0, 100.0, 200.0])
        slope, stderr = _ols(x, 0.01 * x)
        assert slope == pytest.approx(0.01, abs=1e-12)
        assert stderr == pytest.approx(0.0, abs=1e-12)

    def test_ols_matches_normal_equation_oracle(self, rng):
        x = rng.uniform(0, 100, 12)
        y = rng.standard_normal(12)
        slope, _ = _ols(x, y)
        design = np.stack([np.ones_like(x), x], axis=1)
        beta = np.linalg.lstsq(design, y, rcond=None)[0]
        assert slope == pytest.approx(beta[1], abs=1e-10)

    def test_invariant_to_record_order(self, rng):
        records = []
        for bs in (2, 10, 100):
            for obj in "ab":
                records.append(make_record(obj=obj, bs=bs,
                                           acc=float(rng.uniform(0.2, 0.9))))
        forward = batch_slope(records)
        backward = batch_slope(records[::-1])
        for key in forward:
            assert forward[key][0] == pytest.approx(backward[key][0], abs=1e-12)

    def test_opposite_trends_have_opposite_slopes(self):
        records = []
        for bs in (2, 10, 100):
            records.append(make_record(obj="up", bs=bs, acc=0.3 + 0.003 * bs))
            records.append(make_record(obj="down", bs=bs, acc=0.8 - 0.003 * bs))
        slopes = batch_slope(records)
        assert slopes["up"][0] > 0 > slopes["down"][0]


class TestRecordsIO:
    def test_round_trip(self, tmp_path):
        records = [make_record(obj="a", acc=0.25),
                   MetricsRecord(objective="b", dataset="d", batch_size=5, seed=2,
                                 probe="reconstruction", kind="mean", accuracy=-88.5)]
        path = tmp_path / "records.csv"
        save_records(path, records)
        back = load_records(path)
        assert back == records

    def test_accuracy_range_enforced(self):
        with pytest.raises(ContractError):
            make_record(acc=1.5)


class TestAngleRadiusStats:
    def test_axis_points_uniform_over_four_bins(self):
        points = np.array([[1.0, 0], [0, 1.0], [-1.0, 0], [0, -1.0]])
        stats = angle_radius_stats(points, bins=4)
        np.testing.assert_array_equal(stats.angle_hist, [1, 1, 1, 1])

    def test_first_quadrant_ks_at_least_half(self, rng):
        points = rng.uniform(0.01, 1.0, size=(500, 2))
        stats = angle_radius_stats(points)
        assert stats.ks_angle >= 0.5

    def test_equally_spaced_circle_ks_below_1_over_n(self):
        n = 200
        theta = (np.arange(n) + 0.5) / n * 2 * math.pi
        points = np.stack([np.cos(theta), np.sin(theta)], axis=1)
        stats = angle_radius_stats(points)
        assert stats.ks_angle <= 1.0 / n + 1e-12

    def test_radius_variance(self):
        points = np.array([[1.0, 0], [2.0, 0], [3.0, 0]])
        stats = angle_radius_stats(points)
        assert stats.radius_variance == pytest.approx(np.var([1.0, 2.0, 3.0], ddof=1))


class TestEmbedAndReconstruction:
    def test_embed_dataset_kinds_and_provenance(self, rng):
        bundle = build_bundle("cmim", input_dim=8, hidden=(6, 5), latent_dim=3,
                              seed=0)
        bundle.extra = {"batch_size": 10}
        ds = Dataset(images=(rng.random((9, 8)) > 0.5).astype(float),
                     labels=rng.integers(0, 3, 9), name="unit", image_shape=(2, 4))
        mean_set = embed_dataset(bundle, ds, "mean")
        info_set = embed_dataset(bundle, ds, "informative")
        assert mean_set.X.shape == (9, 3)
        assert info_set.X.shape == (9, 6)  # first hidden width, reversed
        assert mean_set.objective == "cmim" and mean_set.batch_size == 10

    def test_reconstruction_score_matches_manual(self, rng):
        bundle = build_bundle("mim", input_dim=8, hidden=(6, 5), latent_dim=3, seed=1)
        ds = Dataset(images=(rng.random((7, 8)) > 0.5).astype(float),
                     labels=np.zeros(7, dtype=int), name="unit", image_shape=(2, 4))
        score = reconstruction_score(bundle, ds)
        x = ds.images
        logits, _ = decode(bundle, mean_embedding(bundle, x))
        manual = bernoulli_log_prob(logits, Tensor(x)).data.mean()
        assert score == pytest.approx(manual, abs=1e-12)

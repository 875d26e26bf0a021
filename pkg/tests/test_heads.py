"""Diagnosis-head tests: MLP and forest fitting, early stopping, persistence."""

import numpy as np
import pytest

from dpae import heads as H
from dpae.data import Location


def blob_toy(n_per=10, centers=((0.0, 0.0), (10.0, 10.0)), sigma=1.0, seed=0):
    """Two well-separated Gaussian blobs labelled by location."""
    rng = np.random.default_rng(seed)
    latents, labels = [], []
    for center, loc in zip(centers, (Location.COLD_LEG, Location.HOT_LEG)):
        for _ in range(n_per):
            latents.append(np.array(center) + sigma * rng.normal(size=2))
            labels.append(H.DiagnosisLabel(location=loc, size_cm=1.0))
    return latents, labels


class TestLabelAndConfig:
    def test_size_must_be_positive(self):
        with pytest.raises(ValueError):
            H.DiagnosisLabel(location=Location.COLD_LEG, size_cm=0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            H.HeadConfig(early_stop_window=0)
        with pytest.raises(ValueError):
            H.HeadConfig(early_stop_threshold=0.0)
        with pytest.raises(ValueError):
            H.HeadConfig(kind="svm")
        with pytest.raises(ValueError):
            H.HeadConfig(val_fraction=1.0)


class TestEarlyStop:
    def test_flat_curve_stops_after_window(self):
        assert H.early_stop_epoch([1.0] * 30, window=20) == 21

    def test_fast_decay_never_stops(self):
        curve = [2.0 ** -e for e in range(30)]
        assert H.early_stop_epoch(curve, window=20) is None

    def test_injected_plateau(self):
        patience = 10
        curve = [1.0 - 0.05 * i for i in range(patience)] + [0.55] * 40
        stop = H.early_stop_epoch(curve, window=20)
        assert stop == 20 + patience
        assert stop <= 20 + patience

    def test_short_curve_returns_none(self):
        assert H.early_stop_epoch([1.0] * 5, window=20) is None


class TestMlpClassify:
    def test_separable_blobs_reach_full_train_accuracy(self):
        latents, labels = blob_toy()
        head, report = H.fit_mlp_head(latents, labels, task="classify")
        assert report.final_metrics["train_accuracy"] == 1.0
        assert report.stopping_epoch <= H.HeadConfig().max_epochs

    def test_probabilities_sum_to_one(self):
        latents, labels = blob_toy()
        head, _ = H.fit_mlp_head(latents, labels, task="classify")
        probs = H.predict(head, np.stack(latents))
        assert probs.shape == (len(latents), 2)
        assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_single_class_rejected(self):
        latents, labels = blob_toy()
        same = [H.DiagnosisLabel(Location.COLD_LEG, 1.0) for _ in labels]
        with pytest.raises(ValueError):
            H.fit_mlp_head(latents, same, task="classify")

    def test_too_few_samples_rejected(self):
        latents, labels = blob_toy(n_per=3)
        with pytest.raises(ValueError):
            H.fit_mlp_head(latents[:6], labels[:6], task="classify")

    def test_same_seed_same_predictions(self):
        latents, labels = blob_toy()
        probe = np.array([[1.0, 2.0], [8.0, 9.0]])
        outs = []
        for _ in range(2):
            head, _ = H.fit_mlp_head(latents, labels,
                                     config=H.HeadConfig(seed=3),
                                     task="classify")
            outs.append(H.predict(head, probe))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_shared_bias_shift_keeps_argmax(self):
        latents, labels = blob_toy()
        head, _ = H.fit_mlp_head(latents, labels, task="classify")
        probe = np.stack(latents)
        before = np.argmax(H.predict(head, probe), axis=1)
        last = len(head.widths) - 2
        head.params[f"b{last}"].data += 7.5
        after = np.argmax(H.predict(head, probe), axis=1)
        np.testing.assert_array_equal(before, after)

    def test_early_stop_consistent_with_reported_curve(self):
        latents, labels = blob_toy()
        cfg = H.HeadConfig(seed=1)
        _, report = H.fit_mlp_head(latents, labels, config=cfg, task="classify")
        stop = H.early_stop_epoch(report.val_curve, cfg.early_stop_window,
                                  cfg.early_stop_threshold)
        if report.stopping_epoch < cfg.max_epochs:
            assert stop == report.stopping_epoch
        assert len(report.train_curve) == report.stopping_epoch
        assert len(report.val_curve) == report.stopping_epoch


class TestMlpRegress:
    def test_constant_target_fits_to_tolerance(self):
        rng = np.random.default_rng(5)
        latents = [rng.normal(size=3) for _ in range(12)]
        labels = [H.DiagnosisLabel(Location.COLD_LEG, 2.5) for _ in latents]
        cfg = H.HeadConfig(lr=0.02, lr_decay=0.999, max_epochs=2000,
                           early_stop_window=2000)
        head, report = H.fit_mlp_head(latents, labels, config=cfg,
                                      task="regress")
        assert report.final_metrics["train_rmse"] < 1e-3

    def test_prediction_is_finite_scalar(self):
        rng = np.random.default_rng(6)
        latents = [rng.normal(size=3) for _ in range(12)]
        labels = [H.DiagnosisLabel(Location.COLD_LEG, float(1.0 + i))
                  for i, _ in enumerate(latents)]
        head, _ = H.fit_mlp_head(latents, labels, task="regress")
        out = H.predict(head, latents[0])
        assert isinstance(out, float) and np.isfinite(out)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(7)
        latents = [rng.normal(size=3) for _ in range(12)]
        labels = [H.DiagnosisLabel(Location.COLD_LEG, 1.0) for _ in latents]
        head, _ = H.fit_mlp_head(latents, labels, task="regress")
        with pytest.raises(ValueError):
            H.predict(head, np.zeros(5))


class TestEndToEnd:
    def test_full_scale_input_width(self):
        rng = np.random.default_rng(8)
        mats = [rng.normal(size=(200, 38)) for _ in range(8)]
        labels = [H.DiagnosisLabel(loc, 1.0)
                  for loc in [Location.COLD_LEG, Location.HOT_LEG] * 4]
        cfg = H.HeadConfig(kind="end_to_end_mlp", max_epochs=2)
        head, report = H.fit_end_to_end(mats, labels, config=cfg,
                                        task="classify")
        assert head.widths[0] == 7600
        assert report.stopping_epoch <= 2

    def test_separable_toy_reaches_full_accuracy(self):
        rng = np.random.default_rng(9)
        mats, labels = [], []
        for loc, level in ((Location.COLD_LEG, 0.0), (Location.HOT_LEG, 5.0)):
            for _ in range(8):
                mats.append(level + 0.1 * rng.normal(size=(6, 4)))
                labels.append(H.DiagnosisLabel(loc, 1.0))
        head, report = H.fit_end_to_end(mats, labels, task="classify")
        assert report.final_metrics["train_accuracy"] == 1.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(10)
        mats = [rng.normal(size=(6, 4)) for _ in range(10)]
        labels = [H.DiagnosisLabel(loc, 1.0)
                  for loc in [Location.COLD_LEG, Location.HOT_LEG] * 5]
        probe = np.zeros(24)
        outs = []
        for _ in range(2):
            head, _ = H.fit_end_to_end(mats, labels,
                                       config=H.HeadConfig(seed=4,
                                                           max_epochs=50),
                                       task="classify")
            outs.append(H.predict(head, probe))
        np.testing.assert_array_equal(outs[0], outs[1])


class TestForest:
    def test_two_point_dataset_single_tree(self):
        latents = [np.array([0.0, 0.0])] * 4 + [np.array([1.0, 1.0])] * 4
        labels = [H.DiagnosisLabel(Location.COLD_LEG, 1.0)] * 4 \
            + [H.DiagnosisLabel(Location.HOT_LEG, 1.0)] * 4
        cfg = H.HeadConfig(kind="random_forest", tree_count=1)
        forest, report = H.fit_random_forest(latents, labels, config=cfg,
                                             task="classify")
        assert report.final_metrics["train_accuracy"] == 1.0
        assert np.argmax(H.predict(forest, np.array([0.0, 0.0]))) == 0
        assert np.argmax(H.predict(forest, np.array([1.0, 1.0]))) == 1

    def test_same_seed_identical_predictions(self):
        latents, labels = blob_toy(seed=11)
        probe = np.array([[2.0, 3.0], [9.0, 8.0], [5.0, 5.0]])
        outs = []
        for _ in range(2):
            forest, _ = H.fit_random_forest(
                latents, labels, config=H.HeadConfig(kind="random_forest",
                                                     seed=12),
                task="classify")
            outs.append(H.predict(forest, probe))
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_vote_matches_per_tree_enumeration(self):
        latents, labels = blob_toy(seed=13)
        forest, _ = H.fit_random_forest(latents, labels, task="classify")
        probe = np.array([3.0, 4.0])
        votes = np.zeros(2)
        for tree in forest.trees:
            votes[int(np.argmax(H._tree_eval(tree, probe)))] += 1.0
        np.testing.assert_allclose(H.predict(forest, probe),
                                   votes / len(forest.trees), atol=1e-15)

    def test_probabilities_sum_to_one(self):
        latents, labels = blob_toy(seed=14)
        forest, _ = H.fit_random_forest(latents, labels, task="classify")
        probs = H.predict(forest, np.stack(latents))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_big_forest_beats_stump_on_linear_target(self):
        rng = np.random.default_rng(15)
        xs = rng.uniform(0.0, 10.0, size=40)
        latents = [np.array([x]) for x in xs]
        labels = [H.DiagnosisLabel(Location.COLD_LEG, 0.5 + 0.3 * x)
                  for x in xs]
        grid = np.linspace(1.0, 9.0, 20).reshape(-1, 1)
        target = 0.5 + 0.3 * grid.reshape(-1)

        big, _ = H.fit_random_forest(
            latents, labels,
            config=H.HeadConfig(kind="random_forest", tree_count=100),
            task="regress")
        stump, _ = H.fit_random_forest(
            latents, labels,
            config=H.HeadConfig(kind="random_forest", tree_count=1,
                                max_depth=1),
            task="regress")
        rmse_big = np.sqrt(np.mean((H.predict(big, grid) - target) ** 2))
        rmse_stump = np.sqrt(np.mean((H.predict(stump, grid) - target) ** 2))
        assert rmse_big < rmse_stump


class TestPersistence:
    def test_mlp_head_roundtrip(self, tmp_path):
        latents, labels = blob_toy(seed=16)
        head, _ = H.fit_mlp_head(latents, labels, task="classify")
        H.save_head(head, tmp_path / "head")
        loaded = H.load_head(tmp_path / "head")
        probe = np.stack(latents)
        np.testing.assert_array_equal(H.predict(head, probe),
                                      H.predict(loaded, probe))

    def test_forest_roundtrip(self, tmp_path):
        latents, labels = blob_toy(seed=17)
        forest, _ = H.fit_random_forest(latents, labels, task="classify")
        H.save_head(forest, tmp_path / "forest")
        loaded = H.load_head(tmp_path / "forest")
        probe = np.stack(latents)
        np.testing.assert_array_equal(H.predict(forest, probe),
                                      H.predict(loaded, probe))

    def test_wrong_kind_rejected(self, tmp_path):
        import json
        d = tmp_path / "bad"
        d.mkdir()
        (d / "forest.json").write_text(json.dumps({"kind": "other"}))
        with pytest.raises(IOError):
            H.load_head(d)

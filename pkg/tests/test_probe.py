from __future__ import annotations

import numpy as np
import pytest

from crobo.errors import InputError, NumericError
from crobo.probe import (
    ProbeDataset,
    build_probe_dataset,
    eval_probe,
    fit_mlp_probe,
    fit_ridge,
    frame_targets,
    predict,
)
from crobo.synthvideo import PALETTE_NAMES, SHAPES

from conftest import rng


def synthetic_ds(n=60, d=8, k=3, seed=0, noise=0.0) -> tuple[ProbeDataset, np.ndarray]:
    g = rng(seed)
    x = g.normal(size=(n, d))
    w = g.normal(size=(d, k))
    y = x @ w + 0.5 + noise * g.normal(size=(n, k))
    rows = np.arange(n)
    return (
        ProbeDataset(features=x, targets=y, train_rows=rows[: n // 2], test_rows=rows[n // 2 :], view_size=64),
        w,
    )


class TestFitRidge:
    def test_exact_recovery_at_tiny_lambda(self):
        ds, w = synthetic_ds()
        probe = fit_ridge(ds, 1e-10)
        assert np.abs(probe.weights - w).max() < 1e-6
        assert np.abs(probe.bias - 0.5).max() < 1e-6

    def test_huge_lambda_shrinks_to_zero(self):
        ds, _ = synthetic_ds()
        probe = fit_ridge(ds, 1e9)
        assert np.abs(probe.weights).max() < 1e-6

    def test_matches_normal_equation_oracle(self):
        # brute-force oracle: explicit inverse of the regularized Gram matrix
        g = rng(3)
        x = g.normal(size=(8, 3))
        y = g.normal(size=(8, 2))
        ds = ProbeDataset(x, y, np.arange(8), np.arange(8), 64)
        lam = 0.37
        probe = fit_ridge(ds, lam)
        xc = x - x.mean(axis=0)
        yc = y - y.mean(axis=0)
        w_oracle = np.linalg.inv(xc.T @ xc + lam * np.eye(3)) @ xc.T @ yc
        assert np.abs(probe.weights - w_oracle).max() < 1e-10

    def test_row_order_invariance(self):
        ds, _ = synthetic_ds(seed=4)
        probe_a = fit_ridge(ds, 1e-3)
        perm = rng(5).permutation(len(ds.train_rows))
        ds_b = ProbeDataset(ds.features, ds.targets, ds.train_rows[perm], ds.test_rows, 64)
        probe_b = fit_ridge(ds_b, 1e-3)
        assert np.abs(probe_a.weights - probe_b.weights).max() < 1e-10

    def test_underdetermined_without_lambda_rejected(self):
        g = rng(6)
        ds = ProbeDataset(g.normal(size=(4, 8)), g.normal(size=(4, 2)), np.arange(4), np.arange(4), 64)
        with pytest.raises(NumericError):
            fit_ridge(ds, 0.0)
        fit_ridge(ds, 1e-3)  # regularized solve succeeds

    def test_duplicate_feature_column_never_hurts_training_loss(self):
        ds, _ = synthetic_ds(seed=7, noise=0.1)
        probe = fit_ridge(ds, 1e-2)
        base_loss = float(((predict(probe, ds.features[ds.train_rows]) - ds.targets[ds.train_rows]) ** 2).mean())
        dup = np.concatenate([ds.features, ds.features[:, :1]], axis=1)
        ds2 = ProbeDataset(dup, ds.targets, ds.train_rows, ds.test_rows, 64)
        probe2 = fit_ridge(ds2, 1e-2)
        dup_loss = float(((predict(probe2, dup[ds.train_rows]) - ds.targets[ds.train_rows]) ** 2).mean())
        assert dup_loss <= base_loss + 1e-9


class TestEvalProbe:
    def test_perfect_predictions(self):
        ds, w = synthetic_ds(noise=0.0)
        probe = fit_ridge(ds, 1e-10)
        scores = eval_probe(probe, ds)
        assert scores["pos_mae_px"] < 1e-6

    def test_constant_predictor_matches_mad(self):
        ds, _ = synthetic_ds(seed=9, noise=0.3)
        probe = fit_ridge(ds, 1e12)  # weights ~ 0: predicts the training mean
        scores = eval_probe(probe, ds)
        train_mean = ds.targets[ds.train_rows].mean(axis=0)
        mad = np.abs(ds.targets[ds.test_rows][:, :2] - train_mean[:2]).mean()
        assert scores["pos_mae_px"] == pytest.approx(float(mad), rel=1e-6)

    def test_repeat_evaluation_identical(self):
        ds, _ = synthetic_ds(seed=10, noise=0.2)
        probe = fit_ridge(ds, 1e-3)
        assert eval_probe(probe, ds) == eval_probe(probe, ds)

    def test_empty_test_split_rejected(self):
        ds, _ = synthetic_ds()
        broken = ProbeDataset(ds.features, ds.targets, ds.train_rows, np.array([], dtype=int), 64)
        with pytest.raises(InputError):
            eval_probe(fit_ridge(ds, 1e-3), broken)


class TestBuildProbeDataset:
    def test_row_count(self, desk_model, tiny_clips):
        ds = build_probe_dataset(desk_model, tiny_clips, seed=0)
        assert ds.features.shape[0] == sum(len(c.frames) for c in tiny_clips)
        assert ds.targets.shape[1] == 2 + len(SHAPES) + len(PALETTE_NAMES)

    def test_split_is_clip_level_partition(self, desk_model, tiny_clips):
        ds = build_probe_dataset(desk_model, tiny_clips, seed=0)
        frames_per_clip = len(tiny_clips[0].frames)
        clip_of_row = np.repeat(np.arange(len(tiny_clips)), frames_per_clip)
        train_clips = set(clip_of_row[ds.train_rows])
        test_clips = set(clip_of_row[ds.test_rows])
        assert train_clips.isdisjoint(test_clips)
        assert len(ds.train_rows) + len(ds.test_rows) == ds.features.shape[0]

    def test_split_deterministic(self, desk_model, tiny_clips):
        a = build_probe_dataset(desk_model, tiny_clips, seed=3)
        b = build_probe_dataset(desk_model, tiny_clips, seed=3)
        assert np.array_equal(a.train_rows, b.train_rows)
        assert np.array_equal(a.features, b.features)

    def test_targets_read_from_metadata(self, tiny_clips):
        clip = tiny_clips[0]
        meta = clip.metadata[0]
        row = frame_targets(meta, 64, 64, 64)
        largest = max(meta, key=lambda sp: sp.radius_px)
        assert row[0] == pytest.approx(largest.position[0])
        assert row[1] == pytest.approx(largest.position[1])
        assert row[2:2 + len(SHAPES)].sum() == 1.0
        assert row[2 + len(SHAPES):].sum() == 1.0

    def test_missing_metadata_rejected(self, desk_model, tiny_clips):
        clip = tiny_clips[0]
        broken = type(clip)(
            frames=clip.frames, metadata=[[] for _ in clip.frames], seed=0, cfg=clip.cfg
        )
        with pytest.raises(InputError):
            build_probe_dataset(desk_model, [broken])


class TestMlpHead:
    def test_learns_linear_map(self):
        ds, _ = synthetic_ds(n=120, seed=12, noise=0.01)
        head = fit_mlp_probe(ds, hidden=32, steps=800, seed=0)
        scores = eval_probe(head, ds)
        baseline = eval_probe(fit_ridge(ds, 1e12), ds)  # mean predictor
        assert scores["pos_mae_px"] < baseline["pos_mae_px"]

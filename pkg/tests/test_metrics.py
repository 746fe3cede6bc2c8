import json
import logging
import math

import numpy as np
import pytest
import torch
from PIL import Image

from fanfill.losses import StubFeatureExtractor
from fanfill.metrics import (
    MetricReport,
    StubFidFeatures,
    contact_sheet,
    evaluate,
    extract_features,
    fid,
    fid_from_stats,
    pixel_metrics,
    ssim,
)


class TestPixelMetrics:
    def test_identical_images(self):
        img = np.random.default_rng(0).random((32, 32))
        region = np.ones((32, 32), dtype=np.uint8)
        mse, l1, psnr = pixel_metrics(img, img, region)
        assert (mse, l1, psnr) == (0.0, 0.0, 100.0)

    def test_constant_offset(self):
        gt = np.full((16, 16), 0.4)
        out = gt + 0.1
        region = np.ones((16, 16), dtype=np.uint8)
        mse, l1, psnr = pixel_metrics(gt, out, region)
        assert mse == pytest.approx(0.01, rel=1e-12)
        assert l1 == pytest.approx(0.1, rel=1e-12)
        assert psnr == pytest.approx(20.0, abs=1e-9)

    def test_matches_straightline_oracle(self):
        rng = np.random.default_rng(3)
        gt = rng.random((24, 24))
        out = rng.random((24, 24))
        region = (rng.random((24, 24)) > 0.5).astype(np.uint8)
        mse, l1, psnr = pixel_metrics(gt, out, region)

        total_sq = total_abs = count = 0
        for i in range(24):
            for j in range(24):
                if region[i, j]:
                    d = gt[i, j] - out[i, j]
                    total_sq += d * d
                    total_abs += abs(d)
                    count += 1
        assert mse == pytest.approx(total_sq / count, abs=1e-10)
        assert l1 == pytest.approx(total_abs / count, abs=1e-10)
        assert psnr == pytest.approx(-10 * math.log10(total_sq / count), abs=1e-10)

    def test_region_restriction(self):
        rng = np.random.default_rng(4)
        gt = rng.random((16, 16))
        out = rng.random((16, 16))
        region = np.zeros((16, 16), dtype=np.uint8)
        region[4:8, 4:8] = 1
        base = pixel_metrics(gt, out, region)
        out2 = out.copy()
        out2[region == 0] = 0.123  # changes outside the region only
        assert pixel_metrics(gt, out2, region) == base

    def test_empty_region(self):
        img = np.zeros((8, 8))
        with pytest.raises(ValueError, match="empty region"):
            pixel_metrics(img, img, np.zeros((8, 8), dtype=np.uint8))


class TestFid:
    def test_identical_feature_sets(self):
        feats = np.random.default_rng(0).normal(size=(200, 16))
        assert fid(feats, feats) < 1e-6

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(300, 8))
        b = rng.normal(loc=0.5, size=(250, 8))
        assert abs(fid(a, b) - fid(b, a)) < 1e-6

    def test_mean_shift_recovers_squared_distance(self):
        rng = np.random.default_rng(2)
        cov_chol = np.linalg.cholesky(np.eye(16) * 0.5 + 0.1)
        a = rng.normal(size=(4000, 16)) @ cov_chol.T
        shift = np.full(16, 1.0)
        b = rng.normal(size=(4000, 16)) @ cov_chol.T + shift
        assert fid(a, b) == pytest.approx(float(shift @ shift), rel=0.05)

    def test_two_by_two_closed_form(self):
        # tr sqrt(M) for a 2x2 PSD product M: sqrt(tr M + 2 sqrt(det M)).
        mu_r, mu_g = np.array([0.0, 0.0]), np.array([1.0, 2.0])
        cov_r = np.array([[4.0, 1.0], [1.0, 3.0]])
        cov_g = np.array([[2.0, 0.5], [0.5, 1.0]])
        m = cov_r @ cov_g
        tr_sqrt = math.sqrt(np.trace(m) + 2.0 * math.sqrt(np.linalg.det(m)))
        expected = float((mu_r - mu_g) @ (mu_r - mu_g)) + np.trace(cov_r) + np.trace(cov_g) - 2.0 * tr_sqrt
        got = fid_from_stats(mu_r, cov_r, mu_g, cov_g)
        assert got == pytest.approx(expected, abs=1e-8)

    def test_diagonal_hand_case(self):
        # sqrt(diag(4,9) @ I) = diag(2,3): everything is hand arithmetic.
        value = fid_from_stats(
            np.zeros(2), np.diag([4.0, 9.0]), np.array([1.0, 2.0]), np.eye(2)
        )
        assert value == pytest.approx(5.0 + (4 + 9) + 2 - 2 * 5, abs=1e-10)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dims differ"):
            fid(np.zeros((10, 3)), np.zeros((10, 4)))

    def test_non_finite_rejected(self):
        bad = np.zeros((10, 3))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            fid(bad, np.zeros((10, 3)))

    def test_small_sample_warning(self, caplog):
        rng = np.random.default_rng(3)
        with caplog.at_level(logging.WARNING, logger="fanfill.metrics"):
            fid(rng.normal(size=(5, 16)), rng.normal(size=(5, 16)))
        assert any("does not exceed dim" in r.message for r in caplog.records)


class TestSsim:
    def test_self_similarity_is_one(self):
        img = np.random.default_rng(0).random((32, 32))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((32, 32)), rng.random((32, 32))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_windowed_oracle_on_inverted_fixture(self):
        # Straight-line oracle: explicit 11x11 Gaussian window at every
        # interior pixel.
        rng = np.random.default_rng(2)
        gt = 0.3 + 0.4 * rng.random((20, 20))
        out = 1.0 - gt

        half = 5
        x = np.arange(11, dtype=np.float64) - 5
        g = np.exp(-(x ** 2) / (2 * 1.5 ** 2))
        w = np.outer(g, g)
        w /= w.sum()
        c1, c2 = 0.01 ** 2, 0.03 ** 2
        values = []
        for i in range(half, 20 - half):
            for j in range(half, 20 - half):
                px = gt[i - half:i + half + 1, j - half:j + half + 1]
                py = out[i - half:i + half + 1, j - half:j + half + 1]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * px * px).sum() - mx ** 2
                vy = (w * py * py).sum() - my ** 2
                vxy = (w * px * py).sum() - mx * my
                values.append(
                    ((2 * mx * my + c1) * (2 * vxy + c2))
                    / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
                )
        assert ssim(gt, out) == pytest.approx(float(np.mean(values)), abs=1e-10)

    def test_too_small_image(self):
        img = np.zeros((8, 8))
        with pytest.raises(ValueError, match="smaller than"):
            ssim(img, img)

    def test_out_of_range_rejected(self):
        img = np.full((16, 16), 1.5)
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            ssim(img, img)

    def test_region_restriction_changes_result(self):
        rng = np.random.default_rng(5)
        gt = rng.random((32, 32))
        out = gt.copy()
        out[:10] = rng.random((10, 32))  # corrupt the top rows only
        region = np.zeros((32, 32), dtype=np.uint8)
        region[20:, :] = 1  # windows centered here never touch the corruption
        assert ssim(gt, out, region=region) == pytest.approx(1.0, abs=1e-12)
        assert ssim(gt, out) < 1.0


def _write_img(path, arr):
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _make_index(tmp_path, cuts=(15.0,), n_frames=3, noise_per_cut=0.0, seed=0):
    """Handcrafted index: gt frames plus outputs with optional noise."""
    rng = np.random.default_rng(seed)
    rows = []
    for k in range(n_frames):
        gt = 0.2 + 0.6 * rng.random((32, 32))
        gt_path = tmp_path / f"f{k}_gt.png"
        _write_img(gt_path, gt)
        gt_round = np.asarray(Image.open(gt_path)) / 255.0
        for idx, cut in enumerate(cuts):
            sigma = noise_per_cut * (idx + 1)
            out = np.clip(gt_round + sigma * rng.standard_normal((32, 32)), 0, 1) if sigma else gt_round
            filled = np.zeros((32, 32), dtype=np.uint8)
            filled[:, :8] = 1
            filled[:, -8:] = 1
            out_path = tmp_path / f"f{k}_cut{cut:g}_out.png"
            inp_path = tmp_path / f"f{k}_cut{cut:g}_in.png"
            mask_path = tmp_path / f"f{k}_cut{cut:g}_mask.png"
            _write_img(out_path, out)
            _write_img(inp_path, gt_round * (1 - filled))
            Image.fromarray(filled * np.uint8(255), mode="L").save(mask_path)
            rows.append({
                "frame_id": f"f{k}",
                "gt": str(gt_path),
                "input": str(inp_path),
                "output": str(out_path),
                "filled_mask": str(mask_path),
                "cut_deg": cut,
            })
    return {"rows": rows, "errors": []}


class TestEvaluate:
    def test_degenerate_perfection(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0,), n_frames=3)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        row = report.rows[0]
        assert row.mse == 0.0 and row.l1 == 0.0
        assert row.lpips == 0.0
        assert row.fid < 1e-3
        assert row.psnr == 100.0
        assert row.ssim == pytest.approx(1.0, abs=1e-12)
        assert row.n_images == 3

    def test_one_row_per_cut(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0, 23.0, 30.0, 40.0), n_frames=2)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        assert [r.cut_deg for r in report.rows] == [15.0, 23.0, 30.0, 40.0]

    def test_fid_increases_with_degradation(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0, 23.0, 30.0), n_frames=8,
                            noise_per_cut=0.08, seed=3)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        fids = [r.fid for r in report.rows]
        assert fids[0] < fids[1] < fids[2]

    def test_missing_file_listed_and_excluded(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0,), n_frames=3)
        victim = index["rows"][1]["output"]
        import os

        os.unlink(victim)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        assert report.rows[0].n_images == 2
        assert len(report.metadata["missing"]) == 1

    def test_order_invariance(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0, 30.0), n_frames=3, noise_per_cut=0.05)
        shuffled = {"rows": list(reversed(index["rows"])), "errors": []}
        r1 = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        r2 = evaluate(shuffled, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        for a, b in zip(r1.rows, r2.rows):
            assert a == b

    def test_report_json_round_trip(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0,), n_frames=2)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        path = tmp_path / "report.json"
        report.to_json(path)
        loaded = MetricReport.from_json(path)
        assert loaded.rows == report.rows

    def test_text_table_mentions_cut_columns(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0, 40.0), n_frames=2)
        report = evaluate(index, StubFeatureExtractor(seed=0), StubFidFeatures(seed=0, dim=8))
        text = report.to_text()
        assert "Cut 30" in text and "Cut 80" in text
        assert "FID" in text and "PSNR" in text


class TestContactSheet:
    def test_writes_one_sheet_per_cut(self, tmp_path):
        index = _make_index(tmp_path, cuts=(15.0, 40.0), n_frames=2)
        written = contact_sheet(index, tmp_path / "sheets")
        assert len(written) == 2
        for path in written:
            assert path.exists()
            arr = np.asarray(Image.open(path))
            assert arr.shape[1] >= 3 * 32  # GT | input | output side by side


class TestFeatureExtraction:
    def test_stub_features_deterministic(self):
        imgs = [np.random.default_rng(i).random((32, 32)).astype(np.float32) for i in range(4)]
        f1 = extract_features(imgs, StubFidFeatures(seed=3, dim=16))
        f2 = extract_features(imgs, StubFidFeatures(seed=3, dim=16))
        np.testing.assert_array_equal(f1, f2)
        assert f1.shape == (4, 16)

    def test_batching_does_not_change_features(self):
        imgs = [np.random.default_rng(i).random((32, 32)).astype(np.float32) for i in range(5)]
        model = StubFidFeatures(seed=1, dim=8)
        a = extract_features(imgs, model, batch_size=2)
        b = extract_features(imgs, model, batch_size=5)
        np.testing.assert_allclose(a, b, atol=1e-6)

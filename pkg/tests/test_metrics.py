import math

import numpy as np
import pytest

from fdvm.errors import ShapeError
from fdvm.metrics import evaluate, psnr, read_report, ssim, write_report


class TestPsnr:
    def test_identical_images_are_infinite(self, rng):
        a = rng.uniform(0, 1, (3, 8, 8))
        assert math.isinf(psnr(a, a.copy()))

    def test_closed_form_quarter_mse(self):
        a = np.zeros((3, 8, 8))
        b = np.full((3, 8, 8), 0.5)
        assert abs(psnr(a, b) - 6.0206) < 1e-3

    def test_symmetric(self, rng):
        a = rng.uniform(0, 1, (3, 6, 6))
        b = rng.uniform(0, 1, (3, 6, 6))
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_on_noise_ladder(self, rng):
        a = rng.uniform(0.3, 0.7, (3, 16, 16))
        noise = rng.normal(size=a.shape)
        scores = [psnr(a, a + amp * noise) for amp in (0.01, 0.03, 0.1, 0.3)]
        assert all(x > y for x, y in zip(scores, scores[1:]))

    def test_invariant_to_shared_pixel_permutation(self, rng):
        a = rng.uniform(0, 1, (3, 5, 5))
        b = rng.uniform(0, 1, (3, 5, 5))
        perm = rng.permutation(a[0].size)
        ap = a.reshape(3, -1)[:, perm].reshape(a.shape)
        bp = b.reshape(3, -1)[:, perm].reshape(b.shape)
        assert abs(psnr(a, b) - psnr(ap, bp)) < 1e-12

    def test_shape_mismatch_raises(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


class TestSsim:
    def test_identical_images_score_one(self, rng):
        a = rng.uniform(0, 1, (3, 16, 16))
        assert ssim(a, a.copy()) == 1.0

    def test_constant_images_closed_form(self):
        a = np.full((3, 16, 16), 0.2)
        b = np.full((3, 16, 16), 0.4)
        # variance terms collapse; luminance term = 0.1601/0.2001
        assert abs(ssim(a, b) - 0.80010) < 1e-4

    def test_symmetric(self, rng):
        a = rng.uniform(0, 1, (3, 14, 14))
        b = rng.uniform(0, 1, (3, 14, 14))
        assert ssim(a, b) == ssim(b, a)

    def test_in_valid_range(self, rng):
        a = rng.uniform(0, 1, (3, 20, 20))
        b = rng.uniform(0, 1, (3, 20, 20))
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_small_images_use_reduced_window(self, rng):
        a = rng.uniform(0, 1, (3, 7, 9))     # min side 7 -> 7x7 window
        b = rng.uniform(0, 1, (3, 7, 9))
        val = ssim(a, b)
        assert -1.0 <= val <= 1.0
        assert ssim(a, a.copy()) == 1.0

    def test_structure_sensitivity(self, rng):
        a = rng.uniform(0, 1, (1, 16, 16))
        shifted = np.clip(a + 0.02, 0, 1)
        flat = a.reshape(-1).copy()
        rng.shuffle(flat)
        shuffled = flat.reshape(a.shape)
        assert ssim(a, shifted) > ssim(a, shuffled)


class TestEvaluateAndReport:
    def test_ground_truth_against_itself(self, rng):
        imgs = [rng.uniform(0, 1, (3, 8, 8)) for _ in range(3)]
        report = evaluate([(f"img{i}", im, im.copy()) for i, im in enumerate(imgs)])
        assert report.mean_ssim == 1.0
        assert report.psnr_inf_count == 3
        assert math.isnan(report.mean_psnr)     # no finite values to average

    def test_pass_through_baseline(self, rng):
        target = rng.uniform(0, 1, (3, 8, 8))
        degraded = np.clip(target * 0.6, 0, 1)
        report = evaluate([("x", degraded, target)])
        assert report.entries[0][1] == psnr(degraded, target)
        assert report.entries[0][2] == ssim(degraded, target)

    def test_missing_predictions_listed_and_excluded(self, rng):
        t = rng.uniform(0, 1, (3, 8, 8))
        report = evaluate([("a", t * 0.9, t), ("b", None, t)])
        assert report.missing == ["b"]
        assert report.count == 1

    def test_report_round_trip(self, rng, tmp_path):
        t = rng.uniform(0, 1, (3, 8, 8))
        report = evaluate([("a", t.copy(), t), ("b", np.clip(t * 0.8, 0, 1), t),
                           ("c", None, t)])
        path = tmp_path / "report.txt"
        write_report(report, path)
        text = path.read_text()
        assert "MEAN\t" in text and "inf" in text
        loaded = read_report(path)
        assert loaded.missing == ["c"]
        assert len(loaded.entries) == 2
        for (p1, ps1, ss1), (p2, ps2, ss2) in zip(loaded.entries, report.entries):
            assert p1 == p2
            assert (math.isinf(ps1) and math.isinf(ps2)) or abs(ps1 - ps2) < 1e-5
            assert abs(ss1 - ss2) < 1e-5

    def test_repeated_evaluation_is_deterministic(self, rng, tmp_path):
        t = rng.uniform(0, 1, (3, 8, 8))
        pairs = [("a", np.clip(t * 0.8, 0, 1), t)]
        write_report(evaluate(pairs), tmp_path / "r1.txt")
        write_report(evaluate(pairs), tmp_path / "r2.txt")
        assert (tmp_path / "r1.txt").read_bytes() == (tmp_path / "r2.txt").read_bytes()

"""Metric closed forms, stub scorers, layout loading, and the bench harness."""

import json
import math

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from conceptswap.bbox import BBox
from conceptswap.errors import LayoutError, ScorerUnavailable, ShapeError
from conceptswap.evaluation import (
    REPORT_COLUMNS,
    MetricsReport,
    StubClipScorer,
    StubPerceptualClient,
    background_metrics,
    clip_scores,
    cosine,
    identity_runner,
    load_layout,
    mse_metric,
    psnr_metric,
    render_table,
    run_benchmark,
    split_fg_bg,
    ssim_metric,
)

from helpers import write_layout


class TestSplitFgBg:
    def test_full_image_bbox_zeroes_background(self):
        rng = np.random.default_rng(0)
        image = rng.random((8, 8))
        fg, bg = split_fg_bg(image, BBox(0, 0, 7, 7, grid=(8, 8)))
        np.testing.assert_array_equal(fg, image)
        assert np.all(bg == 0.0)

    def test_single_pixel_bbox(self):
        rng = np.random.default_rng(1)
        image = rng.random((8, 8))
        fg, bg = split_fg_bg(image, BBox(3, 5, 3, 5, grid=(8, 8)))
        assert fg.shape == (1, 1)
        assert fg[0, 0] == image[3, 5]
        assert bg[3, 5] == 0.0

    def test_pieces_reconstruct_the_image(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            image = rng.random((12, 10, 3))
            r0, c0 = rng.integers(0, 6, size=2)
            box = BBox(
                int(r0), int(c0), int(rng.integers(r0, 12)), int(rng.integers(c0, 10)),
                grid=(12, 10),
            )
            fg, bg = split_fg_bg(image, box)
            rebuilt = bg.copy()
            rebuilt[box.row_slice, box.col_slice] = fg
            np.testing.assert_array_equal(rebuilt, image)

    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            split_fg_bg(np.zeros((8, 8)), BBox(0, 0, 3, 3, grid=(16, 16)))


class TestScalarMetrics:
    def test_identical_images(self):
        rng = np.random.default_rng(3)
        a = rng.random((16, 16))
        assert mse_metric(a, a) == 0.0
        assert psnr_metric(a, a) == math.inf
        assert ssim_metric(a, a) == 1.0

    def test_psnr_closed_form(self):
        """Constant images 10 apart at peak 255: mse 100, psnr 28.13."""
        a = np.full((16, 16), 100.0)
        b = np.full((16, 16), 110.0)
        assert mse_metric(a, b) == 100.0
        psnr = psnr_metric(a, b, data_range=255.0)
        np.testing.assert_allclose(psnr, 10.0 * math.log10(255.0**2 / 100.0), rtol=1e-12)
        assert round(psnr, 2) == 28.13

    def test_ssim_constant_images_closed_form(self):
        """Zero-variance windows leave only the luminance term."""
        a = np.full((16, 16), 0.2)
        b = np.full((16, 16), 0.4)
        expected = (2 * 0.2 * 0.4 + 1e-4) / (0.2**2 + 0.4**2 + 1e-4)
        np.testing.assert_allclose(ssim_metric(a, b), expected, rtol=1e-12)

    def test_ssim_matches_reference_implementation(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            h, w = rng.integers(7, 40, size=2)
            a = rng.random((h, w))
            b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
            ours = ssim_metric(a, b, data_range=1.0)
            ref = structural_similarity(a, b, win_size=7, data_range=1.0)
            np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-10)

    def test_ssim_color_is_channel_mean(self):
        rng = np.random.default_rng(5)
        a = rng.random((12, 12, 3))
        b = rng.random((12, 12, 3))
        ref = np.mean(
            [
                structural_similarity(a[..., c], b[..., c], win_size=7, data_range=1.0)
                for c in range(3)
            ]
        )
        np.testing.assert_allclose(ssim_metric(a, b), ref, rtol=0, atol=1e-10)

    def test_ssim_of_negated_gradient_is_non_positive(self):
        """Zero-mean windows make luminance 1, structure ~ -1.

        A column sawtooth with period equal to the window width puts
        every residue in each window exactly once, so window means are
        exactly zero.
        """
        w = np.array([3.0, 2.0, 1.0, 0.0, -1.0, -2.0, -3.0]) / 3.0
        a = np.tile(w[np.arange(8) % 7], (8, 1))
        ssim = ssim_metric(a, -a, data_range=2.0)
        assert ssim <= 0.0

    def test_noise_monotonicity(self):
        rng = np.random.default_rng(6)
        a = rng.random((24, 24))
        noise = rng.standard_normal(a.shape)
        psnrs, ssims = [], []
        for k in (0.05, 0.15, 0.3):
            b = a + k * noise
            psnrs.append(psnr_metric(a, b))
            ssims.append(ssim_metric(a, b))
        assert psnrs[0] > psnrs[1] > psnrs[2]
        assert ssims[0] > ssims[1] > ssims[2]

    def test_metric_ranges(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            a = rng.random((10, 10))
            b = rng.random((10, 10))
            assert mse_metric(a, b) >= 0.0
            assert -1.0 <= ssim_metric(a, b) <= 1.0

    def test_shape_and_window_domains(self):
        with pytest.raises(ShapeError):
            mse_metric(np.zeros((4, 4)), np.zeros((5, 5)))
        with pytest.raises(ShapeError):
            ssim_metric(np.zeros((16, 16)), np.zeros((16, 16)), win_size=4)
        with pytest.raises(ShapeError):
            ssim_metric(np.zeros((5, 5)), np.zeros((5, 5)), win_size=7)


class TestBackgroundMetrics:
    def test_bundle_keys_and_lpips_gating(self):
        rng = np.random.default_rng(8)
        a = rng.random((16, 16))
        b = rng.random((16, 16))
        bare = background_metrics(a, b)
        assert bare["lpips"] is None
        assert bare["mse"] == mse_metric(a, b)
        with_client = background_metrics(a, b, lpips_client=StubPerceptualClient())
        assert with_client["lpips"] is not None
        assert with_client["lpips"] >= 0.0

    def test_stub_perceptual_distance_is_zero_on_identical(self):
        rng = np.random.default_rng(9)
        a = rng.random((16, 16))
        assert StubPerceptualClient().distance(a, a) == 0.0


class TestClipScores:
    def _image_with_box(self):
        rng = np.random.default_rng(10)
        return rng.random((16, 16)), BBox(4, 4, 9, 11, grid=(16, 16))

    def test_fixed_vector_cosine(self):
        """fg (0.6, 0.8) against concept (1, 0): cosine 0.6 -> score 60."""
        image, box = self._image_with_box()
        fg_shape = (6, 8)
        scorer = StubClipScorer(
            image_fn=lambda img: np.array([0.6, 0.8])
            if img.shape == fg_shape
            else np.array([1.0, 0.0]),
            text_fn=lambda text: np.array([1.0, 0.0]),
        )
        clip_i, clip_t = clip_scores(
            image, [np.zeros((5, 5))], "a photo of a dog", box, scorer
        )
        assert abs(clip_i - 60.0) <= 1e-9
        assert abs(clip_t - 100.0) <= 1e-9

    def test_self_similarity_is_100(self):
        image, box = self._image_with_box()
        fg, _ = split_fg_bg(image, box)
        clip_i, _ = clip_scores(
            image, [fg], "a photo of a dog", box, StubClipScorer()
        )
        assert abs(clip_i - 100.0) <= 1e-9

    def test_orthogonal_embeddings_score_zero(self):
        image, box = self._image_with_box()
        fg_shape = (6, 8)
        scorer = StubClipScorer(
            image_fn=lambda img: np.array([1.0, 0.0])
            if img.shape == fg_shape
            else np.array([0.0, 1.0]),
            text_fn=lambda text: np.array([1.0, 1.0]),
        )
        clip_i, _ = clip_scores(image, [np.zeros((5, 5))], "p", box, scorer)
        assert abs(clip_i) <= 1e-12

    def test_multiple_concept_images_average(self):
        """cosines 1 and 0 against two concept images average to 50."""
        image, box = self._image_with_box()
        by_shape = {
            (6, 8): np.array([1.0, 0.0]),  # the fg crop
            (5, 5): np.array([1.0, 0.0]),
            (4, 4): np.array([0.0, 1.0]),
            (16, 16): np.array([1.0, 1.0]),  # the whole generated image
        }
        scorer = StubClipScorer(
            image_fn=lambda img: by_shape[img.shape],
            text_fn=lambda text: np.array([1.0, 1.0]),
        )
        clip_i, _ = clip_scores(
            image, [np.zeros((5, 5)), np.zeros((4, 4))], "p", box, scorer
        )
        assert abs(clip_i - 50.0) <= 1e-9

    def test_missing_client_or_images(self):
        image, box = self._image_with_box()
        with pytest.raises(ScorerUnavailable):
            clip_scores(image, [np.zeros((5, 5))], "p", box, None)
        with pytest.raises(ScorerUnavailable):
            clip_scores(image, [], "p", box, StubClipScorer())

    def test_cosine_zero_vector_convention(self):
        assert cosine(np.zeros(4), np.ones(4)) == 0.0
        assert cosine(np.array([0.6, 0.8]), np.array([1.0, 0.0])) == pytest.approx(0.6)


class TestLoadLayout:
    def test_good_layout(self, tmp_path):
        write_layout(tmp_path)
        layout = load_layout(tmp_path)
        assert sorted(layout.concepts) == ["dog", "duck"]
        assert len(layout.swaps) == 3
        assert set(layout.gt_bboxes) == {"img0", "img1", "img2"}
        assert layout.prompts["img0"]["source_concept"] == "cat"
        assert layout.gt_bboxes["img0"] == BBox(4, 4, 9, 11, grid=(16, 16))

    def test_missing_pieces(self, tmp_path):
        with pytest.raises(LayoutError, match="not a directory"):
            load_layout(tmp_path / "nope")
        write_layout(tmp_path)
        (tmp_path / "prompts.tsv").unlink()
        with pytest.raises(LayoutError, match="prompt table"):
            load_layout(tmp_path)

    def test_missing_gt_bbox(self, tmp_path):
        write_layout(tmp_path)
        (tmp_path / "gt_bboxes" / "img1.json").unlink()
        with pytest.raises(LayoutError, match="img1"):
            load_layout(tmp_path)

    def test_bad_prompts_header(self, tmp_path):
        write_layout(tmp_path)
        path = tmp_path / "prompts.tsv"
        path.write_text("image\tprompt\n" + "\n".join(path.read_text().splitlines()[1:]))
        with pytest.raises(LayoutError, match="header"):
            load_layout(tmp_path)

    def test_short_prompts_row(self, tmp_path):
        write_layout(tmp_path)
        path = tmp_path / "prompts.tsv"
        path.write_text(path.read_text() + "imgX\tonly two\tcols\n")
        with pytest.raises(LayoutError, match="4 columns"):
            load_layout(tmp_path)

    def test_swap_image_without_prompt_row(self, tmp_path):
        write_layout(tmp_path)
        path = tmp_path / "prompts.tsv"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(ln for ln in lines if not ln.startswith("img2")) + "\n")
        with pytest.raises(LayoutError, match="img2"):
            load_layout(tmp_path)

    def test_empty_concepts_or_swaps(self, tmp_path):
        write_layout(tmp_path)
        for png in (tmp_path / "swaps").glob("*.png"):
            png.unlink()
        with pytest.raises(LayoutError, match="no swap images"):
            load_layout(tmp_path)
        other = tmp_path / "other"
        write_layout(other)
        for sub in (other / "concepts").iterdir():
            for png in sub.glob("*.png"):
                png.unlink()
        with pytest.raises(LayoutError, match="no concept image sets"):
            load_layout(other)


class TestRunBenchmark:
    def test_identity_runner_on_two_by_three_layout(self, tmp_path):
        write_layout(tmp_path)
        report = run_benchmark(
            load_layout(tmp_path),
            identity_runner,
            clip_scorer=StubClipScorer(),
            lpips_client=StubPerceptualClient(),
        )
        assert len(report.per_image) == 6
        assert report.failures == []
        # identical backgrounds: mse 0, psnr +inf, serialized as "inf"
        assert report.mse == 0.0
        assert report.psnr == math.inf
        blob = report.to_json()
        assert blob["summary"]["psnr"] == "inf"
        assert blob["columns"] == list(REPORT_COLUMNS)
        assert REPORT_COLUMNS == (
            "CLIP-I", "PSNR", "LPIPS(x1e3)", "MSE(x1e4)", "SSIM(x1e2)", "CLIP-T", "Time(s)",
        )

    def test_full_scale_cardinality(self, tmp_path):
        """10 concepts x 160 swap images -> 1600 evaluation rows."""
        write_layout(
            tmp_path, concepts=tuple(f"c{i}" for i in range(10)), n_images=160
        )
        report = run_benchmark(load_layout(tmp_path), identity_runner)
        assert len(report.per_image) == 1600

    def test_single_failure_is_isolated(self, tmp_path):
        write_layout(tmp_path)
        calls = {"n": 0}

        def flaky(image, task):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("synthetic failure")
            return image.copy()

        report = run_benchmark(load_layout(tmp_path), flaky)
        assert len(report.failures) == 1
        assert "RuntimeError" in report.failures[0]
        assert len(report.per_image) == 5

    def test_failure_rows_are_excluded_from_means(self, tmp_path):
        write_layout(tmp_path)
        calls = []

        def half_bad(image, task):
            calls.append(task.concept)
            if task.concept == "dog":
                raise ValueError("bad stage")
            return image.copy()

        report = run_benchmark(load_layout(tmp_path), half_bad)
        assert len(report.failures) == 3
        assert all("dog/" in f and "ValueError" in f for f in report.failures)
        assert len(report.per_image) == 3
        assert report.mse == 0.0

    def test_report_determinism_excluding_time(self, tmp_path):
        write_layout(tmp_path)
        layout = load_layout(tmp_path)

        def strip_time(blob):
            blob = json.loads(json.dumps(blob))
            blob["summary"].pop("time_s")
            for row in blob["rows"]:
                row.pop("time_s")
            return blob

        kw = dict(clip_scorer=StubClipScorer(), lpips_client=StubPerceptualClient())
        first = run_benchmark(layout, identity_runner, **kw).to_json()
        second = run_benchmark(layout, identity_runner, **kw).to_json()
        assert strip_time(first) == strip_time(second)

    def test_parallel_jobs_match_serial(self, tmp_path):
        write_layout(tmp_path)
        layout = load_layout(tmp_path)
        serial = run_benchmark(layout, identity_runner)
        threaded = run_benchmark(layout, identity_runner, jobs=3)
        strip = lambda rows: [
            {k: v for k, v in row.items() if k != "time_s"} for row in rows
        ]
        assert strip(serial.per_image) == strip(threaded.per_image)

    def test_out_path_writes_json_and_table(self, tmp_path):
        write_layout(tmp_path)
        out = tmp_path / "results" / "report"
        report = run_benchmark(load_layout(tmp_path), identity_runner, out_path=out)
        blob = json.loads((tmp_path / "results" / "report.json").read_text())
        assert blob["summary"]["mse"] == 0.0
        table = (tmp_path / "results" / "report.txt").read_text()
        assert table == render_table(report)


class TestRenderTable:
    def test_column_order_scaling_and_sentinels(self):
        report = MetricsReport(
            method="ours",
            clip_i=60.0,
            psnr=math.inf,
            lpips=0.0123,
            mse=0.00005,
            ssim=0.925,
            clip_t=None,
            time_s=1.5,
        )
        table = render_table(report)
        header, row, _ = table.split("\n")
        assert header.split() == ["Method", *REPORT_COLUMNS]
        cells = row.split()
        assert cells[0] == "ours"
        assert cells[1] == "60.00"
        assert cells[2] == "inf"
        assert cells[3] == "12.30"  # lpips x1e3
        assert cells[4] == "0.50"  # mse x1e4
        assert cells[5] == "92.50"  # ssim x1e2
        assert cells[6] == "n/a"
        assert cells[7] == "1.50"

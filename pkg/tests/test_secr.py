"""Regional semantic injection: crop-attend-paste and its hook plumbing.

The paste-back contract is the load-bearing property: every position
outside the (per-layer resized) box must come out bit-identical, which
is what lets the background stay frozen through a whole optimization.
"""

import math

import numpy as np
import pytest

from conceptswap.backends.base import ProjectionSet
from conceptswap.backends.adapter import DiffusionAdapterBackend
from conceptswap.bbox import BBox
from conceptswap.errors import ParamError, ShapeError, UnsupportedBackend
from conceptswap.secr import (
    FeatureMap,
    concept_rows,
    dense_cross_attention,
    install_secr,
    regional_cross_attention,
    softmax_rows,
)

from helpers import RECT, SOURCE_PROMPT, make_toy


def _random_proj(rng, channels, embed_dim, width):
    return ProjectionSet(
        wq=rng.standard_normal((channels, width)),
        wk=rng.standard_normal((embed_dim, width)),
        wv=rng.standard_normal((embed_dim, channels)),
    )


class TestFeatureMap:
    def test_grid(self):
        feat = FeatureMap(values=np.zeros((6, 4, 8)), layer_id="attn0")
        assert feat.grid == (6, 4)

    def test_rejects_non_3d(self):
        with pytest.raises(ShapeError):
            FeatureMap(values=np.zeros((6, 4)))

    def test_rejects_empty_spatial_dims(self):
        with pytest.raises(ShapeError):
            FeatureMap(values=np.zeros((0, 4, 8)))


class TestSoftmaxRows:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        out = softmax_rows(rng.standard_normal((20, 7)))
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_shift_invariant_and_overflow_safe(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(softmax_rows(x + 3.7), softmax_rows(x), atol=1e-12)
        big = softmax_rows(np.array([[1000.0, 1000.0, 999.0]]))
        assert np.all(np.isfinite(big))

    def test_uniform_scores(self):
        np.testing.assert_array_equal(
            softmax_rows(np.zeros((2, 4))), np.full((2, 4), 0.25)
        )


class TestConceptRows:
    def test_occupied_span_only(self):
        backend = make_toy()
        emb = backend.embed("sks teapot")
        rows = concept_rows(emb)
        idx = emb.occupied_indices()
        assert len(idx) == 2
        np.testing.assert_array_equal(rows, emb.values[idx])

    def test_null_prompt_uses_full_matrix(self):
        backend = make_toy()
        emb = backend.embed("")
        rows = concept_rows(emb)
        assert rows.shape == emb.values.shape
        np.testing.assert_array_equal(rows, emb.values)


class TestRegionalCrossAttention:
    def test_outside_box_bit_identical(self):
        rng = np.random.default_rng(2)
        feat = FeatureMap(values=rng.standard_normal((10, 12, 5)))
        box = BBox(2, 3, 5, 8, grid=(10, 12))
        rows = rng.standard_normal((3, 9))
        proj = _random_proj(rng, 5, 9, 4)
        out = regional_cross_attention(feat, box, rows, proj)
        inside = box.mask()
        assert np.array_equal(out.values[~inside], feat.values[~inside])
        assert not np.array_equal(out.values[inside], feat.values[inside])

    def test_full_box_matches_dense_attention(self):
        """Cropping to the whole grid is plain cross-attention."""
        rng = np.random.default_rng(3)
        for _ in range(20):
            h, w = rng.integers(2, 9, size=2)
            channels = int(rng.integers(2, 6))
            embed_dim = int(rng.integers(2, 8))
            k = int(rng.integers(1, 5))
            feat = FeatureMap(values=rng.standard_normal((h, w, channels)))
            rows = rng.standard_normal((k, embed_dim))
            proj = _random_proj(rng, channels, embed_dim, int(rng.integers(1, 6)))
            box = BBox(0, 0, int(h) - 1, int(w) - 1, grid=(int(h), int(w)))
            regional = regional_cross_attention(feat, box, rows, proj)
            dense = dense_cross_attention(feat, rows, proj)
            np.testing.assert_allclose(regional.values, dense.values, atol=1e-6)

    def test_single_pixel_two_token_hand_case(self):
        """Scalar softmax: out = (v1*e^s1 + v2*e^s2) / (e^s1 + e^s2)."""
        feat = FeatureMap(values=np.array([[[1.0]]]))
        box = BBox(0, 0, 0, 0, grid=(1, 1))
        rows = np.array([[1.0], [2.0]])
        proj = ProjectionSet(
            wq=np.array([[1.0]]), wk=np.array([[1.0]]), wv=np.array([[10.0]])
        )
        out = regional_cross_attention(feat, box, rows, proj)
        # q=1, d'=1: scores (1, 2); values (10, 20)
        expected = (10.0 * math.exp(1.0) + 20.0 * math.exp(2.0)) / (
            math.exp(1.0) + math.exp(2.0)
        )
        assert abs(out.values[0, 0, 0] - expected) <= 1e-9

    def test_identical_token_rows_give_their_value(self):
        """Row-stochastic attention maps identical V rows to that row."""
        rng = np.random.default_rng(4)
        row = rng.standard_normal(7)
        rows = np.stack([row, row, row])
        feat = FeatureMap(values=rng.standard_normal((6, 6, 5)))
        proj = _random_proj(rng, 5, 7, 3)
        box = BBox(1, 1, 4, 4, grid=(6, 6))
        out = regional_cross_attention(feat, box, rows, proj)
        v0 = row @ proj.wv
        np.testing.assert_allclose(
            out.values[box.row_slice, box.col_slice], np.broadcast_to(v0, (4, 4, 5)),
            rtol=1e-10,
        )

    def test_shape_contract_violations(self):
        rng = np.random.default_rng(5)
        feat = FeatureMap(values=rng.standard_normal((6, 6, 5)))
        rows = rng.standard_normal((2, 7))
        proj = _random_proj(rng, 5, 7, 3)
        with pytest.raises(ShapeError, match="grid"):
            regional_cross_attention(feat, BBox(0, 0, 3, 3, grid=(8, 8)), rows, proj)
        box = BBox(0, 0, 3, 3, grid=(6, 6))
        with pytest.raises(ShapeError, match="channels"):
            regional_cross_attention(
                feat, box, rows, _random_proj(rng, 4, 7, 3)
            )
        with pytest.raises(ShapeError, match="embed dim"):
            regional_cross_attention(
                feat, box, rows, _random_proj(rng, 5, 6, 3)
            )
        with pytest.raises(ShapeError, match="width"):
            regional_cross_attention(
                feat,
                box,
                rows,
                ProjectionSet(
                    wq=rng.standard_normal((5, 3)),
                    wk=rng.standard_normal((7, 3)),
                    wv=rng.standard_normal((7, 4)),
                ),
            )
        with pytest.raises(ShapeError, match="concept rows"):
            regional_cross_attention(feat, box, rng.standard_normal(7), proj)


class TestInstallSecr:
    def _box(self, backend):
        return BBox(RECT[0], RECT[1], RECT[2], RECT[3], grid=backend.latent_grid)

    def test_hooked_forward_differs_only_inside_box(self):
        backend = make_toy()
        rng = np.random.default_rng(6)
        z_t = rng.standard_normal(backend.latent_dims)
        cond = backend.embed(SOURCE_PROMPT)
        plain, _ = backend.predict_noise(z_t, 100, cond, branch="source")
        handle = install_secr(
            backend, "source", backend.embed("cat"), self._box(backend)
        )
        hooked, _ = backend.predict_noise(z_t, 100, cond, branch="source")
        inside = self._box(backend).mask()
        assert np.array_equal(hooked[:, ~inside], plain[:, ~inside])
        assert not np.array_equal(hooked[:, inside], plain[:, inside])
        assert set(handle.layer_boxes) == {"attn0", "attn1"}

    def test_hooks_are_branch_selective(self):
        backend = make_toy()
        rng = np.random.default_rng(7)
        z_t = rng.standard_normal(backend.latent_dims)
        cond = backend.embed(SOURCE_PROMPT)
        plain, _ = backend.predict_noise(z_t, 100, cond, branch="target")
        install_secr(backend, "source", backend.embed("cat"), self._box(backend))
        after, _ = backend.predict_noise(z_t, 100, cond, branch="target")
        np.testing.assert_array_equal(after, plain)

    def test_uninstall_restores_bit_identical_output(self):
        backend = make_toy()
        rng = np.random.default_rng(8)
        z_t = rng.standard_normal(backend.latent_dims)
        cond = backend.embed(SOURCE_PROMPT)
        plain, _ = backend.predict_noise(z_t, 200, cond, branch="source")
        handle = install_secr(
            backend, "source", backend.embed("cat"), self._box(backend)
        )
        handle.uninstall()
        assert not handle.active
        restored, _ = backend.predict_noise(z_t, 200, cond, branch="source")
        np.testing.assert_array_equal(restored, plain)
        handle.uninstall()  # second uninstall is a quiet no-op

    def test_two_branches_differ_inside_box(self):
        """Source injects 'rose', target 'sks teapot'; only the box moves."""
        backend = make_toy()
        rng = np.random.default_rng(9)
        z_t = rng.standard_normal(backend.latent_dims)
        cond = backend.embed(SOURCE_PROMPT)
        box = self._box(backend)
        install_secr(backend, "source", backend.embed("rose"), box)
        install_secr(backend, "target", backend.embed("sks teapot"), box)
        src, _ = backend.predict_noise(z_t, 100, cond, branch="source")
        tgt, _ = backend.predict_noise(z_t, 100, cond, branch="target")
        inside = box.mask()
        assert np.array_equal(src[:, ~inside], tgt[:, ~inside])
        assert not np.array_equal(src[:, inside], tgt[:, inside])

    def test_layer_subset(self):
        backend = make_toy()
        handle = install_secr(
            backend, "source", backend.embed("cat"), self._box(backend),
            layer_ids=["attn1"],
        )
        assert set(handle.layer_boxes) == {"attn1"}
        assert backend.hook_for("source", "attn0") is None
        assert backend.hook_for("source", "attn1") is not None

    def test_double_install_warns_and_owns_nothing(self):
        backend = make_toy()
        box = self._box(backend)
        install_secr(backend, "source", backend.embed("cat"), box)
        with pytest.warns(UserWarning, match="no-op"):
            second = install_secr(backend, "source", backend.embed("cat"), box)
        assert second.layer_boxes == {}
        second.uninstall()
        # the first install's hooks survive the no-op handle's uninstall
        assert backend.hook_for("source", "attn0") is not None

    def test_bad_branch(self):
        backend = make_toy()
        with pytest.raises(ParamError, match="branch"):
            install_secr(backend, "both", backend.embed("cat"), self._box(backend))

    def test_backend_without_hooks(self):
        backend = DiffusionAdapterBackend()
        box = BBox(2, 3, 5, 8, grid=(64, 64))
        toy = make_toy()
        with pytest.raises(UnsupportedBackend):
            install_secr(backend, "source", toy.embed("cat"), box)

    def test_coarse_layer_box_is_resized(self):
        backend = make_toy(include_coarse_layer=True)
        handle = install_secr(
            backend, "source", backend.embed("cat"), self._box(backend)
        )
        assert handle.layer_boxes["attn0"].grid == (16, 16)
        assert handle.layer_boxes["attn2_coarse"] == BBox(1, 1, 3, 4, grid=(8, 8))

    def test_debug_dump_names_layers(self):
        backend = make_toy()
        handle = install_secr(
            backend, "source", backend.embed("cat"), self._box(backend)
        )
        dump = handle.debug_dump()
        assert dump["branch"] == "source"
        assert dump["active"] is True
        assert set(dump["layers"]) == {"attn0", "attn1"}

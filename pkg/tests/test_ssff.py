from __future__ import annotations

import numpy as np
import pytest

from sfdr import autodiff as ad
from sfdr.autodiff import Tensor, grad_check, tensor
from sfdr.ssff import SsffParams, embed_semantic, fuse


def identity_params(d_embed, d_t=2):
    return SsffParams(embed_proj=Tensor(np.eye(d_embed)), out_proj=None,
                      text_const=Tensor(np.zeros((1, d_t))))


class TestEmbedSemantic:
    def test_visual_first(self):
        out = embed_semantic(tensor([[1.0, 2.0, 3.0, 4.0]]),
                             tensor([[5.0, 6.0, 7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2, 3, 4, 5, 6, 7, 8]])

    def test_zero_inputs(self):
        out = embed_semantic(tensor(np.zeros((1, 3))), tensor(np.zeros((1, 2))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 5)))

    def test_full_scale_dims(self):
        out = embed_semantic(tensor(np.zeros((1, 512))), tensor(np.zeros((1, 512))))
        assert out.shape == (1, 1024)

    def test_non_row_vectors_rejected(self):
        with pytest.raises(ad.DimensionError):
            embed_semantic(tensor(np.zeros((2, 3))), tensor(np.zeros((1, 3))))


class TestFuse:
    def test_alpha_zero_returns_grid(self):
        grid = np.random.default_rng(0).uniform(-1, 1, (4, 2))
        out = fuse(tensor([[1.0, 1.0]]), tensor(grid), 0.0, identity_params(2))
        np.testing.assert_allclose(out.matrix.data, grid, atol=1e-15)

    def test_alpha_one_tiles_embedding(self):
        grid = np.random.default_rng(1).uniform(-1, 1, (5, 2))
        out = fuse(tensor([[0.3, -0.7]]), tensor(grid), 1.0, identity_params(2))
        for row in out.matrix.data:
            np.testing.assert_allclose(row, [0.3, -0.7], atol=1e-15)

    def test_hand_mix(self):
        out = fuse(tensor([[1.0, 1.0]]), tensor([[3.0, 3.0], [5.0, 5.0]]),
                   0.5, identity_params(2))
        np.testing.assert_allclose(out.matrix.data, [[2.0, 2.0], [3.0, 3.0]])

    def test_alpha_out_of_range(self):
        with pytest.raises(ValueError):
            fuse(tensor([[1.0]]), tensor([[1.0]]), 1.5, identity_params(1))

    def test_projects_when_grid_dim_differs(self):
        rng = np.random.default_rng(2)
        params = SsffParams.init(rng, d_v=3, d_t=3, d_g=4, d=2)
        out = fuse(tensor(rng.uniform(-1, 1, (1, 6))),
                   tensor(rng.uniform(-1, 1, (5, 4))), 0.5, params)
        assert out.matrix.shape == (5, 2)

    def test_linear_in_both_inputs(self):
        rng = np.random.default_rng(3)
        params = SsffParams.init(rng, d_v=2, d_t=2, d_g=3, d=3)
        alpha = 0.4
        for _ in range(10):
            e1, e2 = rng.uniform(-1, 1, (2, 1, 4))
            g1, g2 = rng.uniform(-1, 1, (2, 6, 3))
            a, b = rng.uniform(-2, 2, 2)
            lhs = fuse(tensor(a * e1 + b * e2), tensor(a * g1 + b * g2),
                       alpha, params).matrix.data
            rhs = a * fuse(tensor(e1), tensor(g1), alpha, params).matrix.data \
                + b * fuse(tensor(e2), tensor(g2), alpha, params).matrix.data
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_gradients_through_fuse(self):
        rng = np.random.default_rng(4)
        proj = rng.uniform(-1, 1, (4, 3))
        out_proj = rng.uniform(-1, 1, (3, 2))
        embedded = rng.uniform(-1, 1, (1, 4))
        grid = rng.uniform(-1, 1, (5, 3))

        def f(params):
            p, op, e, g = params
            sp = SsffParams(embed_proj=p, out_proj=op,
                            text_const=Tensor(np.zeros((1, 2))))
            return ad.sum_all(ad.mul(fuse(e, g, 0.3, sp).matrix,
                                     fuse(e, g, 0.3, sp).matrix))

        err = grad_check(f, [Tensor(proj), Tensor(out_proj),
                             Tensor(embedded), Tensor(grid)], eps=1e-5)
        assert err < 1e-6

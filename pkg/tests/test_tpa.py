import numpy as np
import pytest

from tucl import tensor as T
from tucl.errors import ContractError, DimensionError
from tucl.rng import Stream
from tucl.tensor import Tensor, backward, parameter
from tucl.tpa import (AttentionBlock, PhiWeights, PromptSet, TPABlocks, attend, cross_attn,
                      cycle_loss, intra_attn, pooled_prediction, tpa_forward)
from tucl.volume_io import RegionMask

from conftest import check_grads


def block(seed=0, d=16, heads=2):
    return AttentionBlock.init(Stream(seed, "blk"), d, heads)


def zeroed(blk, *names):
    for n in names:
        getattr(blk, n).data = np.zeros_like(getattr(blk, n).data)
    return blk


class TestIntraAttn:
    def test_single_token(self, rng):
        b = block()
        tok = Tensor(rng.uniform(-1, 1, (1, 16)))
        res = attend(tok, tok, b)
        for w in res.weights:
            assert w.data.tolist() == [[1.0]]
        expected = T.layer_norm(tok + (tok @ b.wv) @ b.wo, b.ln_gain, b.ln_bias)
        np.testing.assert_allclose(res.out.data, expected.data, rtol=1e-12)

    def test_zero_qk_uniform_mix(self, rng):
        b = zeroed(block(), "wq", "wk")
        toks = Tensor(rng.uniform(-1, 1, (5, 16)))
        res = attend(toks, toks, b)
        mean_v = (toks.data @ b.wv.data).mean(axis=0)
        np.testing.assert_allclose(res.mixed.data, np.tile(mean_v, (5, 1)), rtol=1e-12)

    def test_weights_row_stochastic(self, rng):
        res = attend(Tensor(rng.normal(size=(9, 16))), Tensor(rng.normal(size=(9, 16))), block())
        for w in res.weights:
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-6)

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            intra_attn(Tensor(rng.normal(size=(3, 8))), block())

    def test_gradients_on_all_weights(self, rng):
        b = block(d=16)
        x = rng.uniform(-1, 1, (7, 16))
        c = rng.uniform(-1, 1, (7, 16))

        def build(x, wq, wk, wv, wo, g, bb):
            blk = AttentionBlock(wq, wk, wv, wo, 2, g, bb)
            return (intra_attn(x, blk) * Tensor(c)).sum()

        check_grads(build, [x] + [p.data.copy() for p in b.parameters()])


class TestCrossAttn:
    def test_identical_prompts(self, rng):
        b = block()
        row = rng.uniform(-1, 1, 16)
        prompts = Tensor(np.tile(row, (7, 1)))
        res = attend(Tensor(rng.uniform(-1, 1, (4, 16))), prompts, b)
        np.testing.assert_allclose(res.mixed.data, np.tile(row @ b.wv.data, (4, 1)), rtol=1e-12)

    def test_single_prompt_row(self, rng):
        res = attend(Tensor(rng.uniform(-1, 1, (4, 16))), Tensor(rng.uniform(-1, 1, (1, 16))), block())
        for w in res.weights:
            np.testing.assert_array_equal(w.data, np.ones((4, 1)))

    def test_gradient(self, rng):
        b = block(3)
        c = rng.uniform(-1, 1, (6, 16))

        def build(seg, pr, wq, wk, wv):
            blk = AttentionBlock(wq, wk, wv, b.wo, 2, b.ln_gain, b.ln_bias)
            return (cross_attn(seg, pr, blk) * Tensor(c)).sum()

        check_grads(build, [rng.uniform(-1, 1, (6, 16)), rng.uniform(-1, 1, (7, 16)),
                            b.wq.data.copy(), b.wk.data.copy(), b.wv.data.copy()])

    def test_width_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cross_attn(Tensor(rng.normal(size=(3, 16))), Tensor(rng.normal(size=(7, 12))), block())


def small_tpa(seed=0, d=16, dp=8):
    return TPABlocks.init(Stream(seed, "tpa"), dp, d, 2), PromptSet.init(Stream(seed, "p"), dp)


class TestTPAForward:
    def test_zero_projections_pass_through(self, rng):
        blocks, prompts = small_tpa()
        for blk in (blocks.intra_seg, blocks.intra_prompt, blocks.cross):
            zeroed(blk, "wq", "wk", "wv")
            blk.wo.data = np.eye(16)
        f = Tensor(rng.uniform(-1, 1, (8, 16)))
        out = tpa_forward(f, prompts, blocks)
        np.testing.assert_allclose(out.data, T.layer_norm(T.layer_norm(f)).data, rtol=1e-12)

    @pytest.mark.parametrize("m", [8, 27, 64])
    def test_shape(self, rng, m):
        blocks, prompts = small_tpa()
        assert tpa_forward(Tensor(rng.normal(size=(m, 16))), prompts, blocks).shape == (m, 16)

    def test_gradient_reaches_prompts(self, rng):
        blocks, prompts = small_tpa()
        out = tpa_forward(Tensor(rng.normal(size=(8, 16))), prompts, blocks)
        backward((out * Tensor(rng.normal(size=(8, 16)))).sum())
        assert np.linalg.norm(prompts.embeddings.grad) > 0

    def test_permutation_equivariant(self, rng):
        blocks, prompts = small_tpa()
        f = rng.normal(size=(10, 16))
        perm = rng.permutation(10)
        a = tpa_forward(Tensor(f), prompts, blocks).data
        b = tpa_forward(Tensor(f[perm]), prompts, blocks).data
        np.testing.assert_allclose(b, a[perm], rtol=1e-10, atol=1e-12)

    def test_prompt_set_shape_checked(self):
        with pytest.raises(DimensionError):
            PromptSet(parameter(np.zeros((6, 8))))


def cycle_oracle(x, f, y_hat, w, b):
    """Scalar loops: pooled stats, linear remap, mean squared error."""
    n_rows, dp = x.shape
    pooled = [float(np.sum(y_hat[r])) / y_hat[r].size for r in range(3)]
    overall = sum(pooled) / 3
    stats = [overall] * 4 + pooled
    total = 0.0
    for i in range(n_rows):
        feats = list(f[i]) + [stats[i]]
        for j in range(dp):
            phi = b[j] + sum(feats[k] * w[k][j] for k in range(len(feats)))
            total += (x[i][j] - phi) ** 2
    return total / (n_rows * dp)


class TestCycleLoss:
    def setup_method(self):
        self.rng = np.random.default_rng(7)

    def _mask(self):
        return RegionMask(self.rng.random((3, 8, 8, 8)))

    def test_zero_when_remap_is_identity(self):
        dp = 8
        x = self.rng.normal(size=(7, dp))
        w = np.vstack([np.eye(dp), np.zeros((1, dp))])
        loss = cycle_loss(PromptSet(parameter(x)), Tensor(x), self._mask(),
                          PhiWeights(Tensor(w), Tensor(np.zeros(dp))))
        assert loss.item() == 0.0

    def test_unit_offset_gives_one(self):
        dp = 8
        x = self.rng.normal(size=(7, dp))
        w = np.vstack([np.eye(dp), np.zeros((1, dp))])
        loss = cycle_loss(PromptSet(parameter(x)), Tensor(x), self._mask(),
                          PhiWeights(Tensor(w), Tensor(np.ones(dp))))
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_matches_scalar_oracle(self):
        dp, d = 5, 6
        x = self.rng.normal(size=(7, dp))
        f = self.rng.normal(size=(7, d))
        w = self.rng.normal(size=(d + 1, dp))
        b = self.rng.normal(size=dp)
        mask = self._mask()
        loss = cycle_loss(PromptSet(parameter(x)), Tensor(f), mask, PhiWeights(Tensor(w), Tensor(b)))
        assert abs(loss.item() - cycle_oracle(x, f, mask.array, w, b)) < 1e-12

    def test_binarized_rejected(self):
        m = RegionMask(np.zeros((3, 8, 8, 8)), binarized=True)
        with pytest.raises(ContractError):
            cycle_loss(PromptSet(parameter(np.zeros((7, 4)))), Tensor(np.zeros((7, 4))), m,
                       PhiWeights(Tensor(np.zeros((5, 4))), Tensor(np.zeros(4))))

    def test_nonnegative_and_gradient(self):
        dp, d = 4, 6
        y = self.rng.random((3, 8, 8, 8))

        def build(x, f, w, b, yh):
            return cycle_loss(PromptSet(x), f, RegionMask(yh), PhiWeights(w, b))

        arrays = [self.rng.normal(size=(7, dp)), self.rng.normal(size=(7, d)),
                  self.rng.normal(size=(d + 1, dp)), self.rng.normal(size=dp), y * 0.5 + 0.25]
        check_grads(build, arrays)
        assert build(*[Tensor(a) for a in arrays]).item() >= 0

    def test_pooled_prediction_layout(self):
        y = np.zeros((3, 8, 8, 8))
        y[0] = 0.9
        y[1] = 0.3
        stats = pooled_prediction(Tensor(y)).data.ravel()
        np.testing.assert_allclose(stats, [0.4] * 4 + [0.9, 0.3, 0.0], rtol=1e-14)

"""
Tests for graph_transformer module.
"""

import math

import numpy as np
import pytest

from liftmesh.exceptions import ConfigError, ContractViolation
from liftmesh.graph_transformer import (GtBlockParams, gcn_layer,
                                        gt_block_forward, init_block_params,
                                        multi_head_self_attention,
                                        parallel_fuse, run_block_stack,
                                        scaled_dot_attention)
from liftmesh.skeleton import H36M17, SkeletonTopology, build_adjacency
from liftmesh.tensor_core import Tensor, finite_diff_check, tensor_sum
from liftmesh.utils import make_rng


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_attention(q, k, v):
    return np_softmax(q @ k.T / math.sqrt(q.shape[-1])) @ v


def identity_block(d: int) -> GtBlockParams:
    eye = Tensor(np.eye(d))
    return GtBlockParams(
        gcn_weight=eye, q=(eye,), k=(eye,), v=(eye,), w_out=eye,
        ffn_w1=eye, ffn_b1=Tensor(np.zeros(d)), ffn_w2=eye, ffn_b2=Tensor(np.zeros(d)),
        ln1_gain=Tensor(np.ones(d)), ln1_bias=Tensor(np.zeros(d)),
        ln2_gain=Tensor(np.ones(d)), ln2_bias=Tensor(np.zeros(d)),
    )


def zero_block(d: int, heads: int = 2, d_ff: int = 8) -> GtBlockParams:
    d_k = d // heads
    z = lambda *dims: Tensor(np.zeros(dims))
    return GtBlockParams(
        gcn_weight=z(d, d),
        q=tuple(z(d, d_k) for _ in range(heads)),
        k=tuple(z(d, d_k) for _ in range(heads)),
        v=tuple(z(d, d_k) for _ in range(heads)),
        w_out=z(d, d), ffn_w1=z(d, d_ff), ffn_b1=z(d_ff), ffn_w2=z(d_ff, d), ffn_b2=z(d),
        ln1_gain=z(d), ln1_bias=z(d), ln2_gain=z(d), ln2_bias=z(d),
    )


class TestGcnLayer:
    """Test the graph convolution."""

    def test_single_joint_zero(self):
        """Test Â = I, W = I, x = 0 gives 0."""
        out = gcn_layer(Tensor([[0.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
        assert out.item() == 0.0

    def test_single_joint_asymptote(self):
        """Test Â = I, W = I, x = 10 gives about 10."""
        out = gcn_layer(Tensor([[10.0]]), Tensor([[1.0]]), Tensor([[1.0]]))
        assert abs(out.item() - 10.0) < 1e-4

    def test_two_joint_chain(self):
        """Test against an explicit three-matrix product."""
        rng = make_rng(1)
        adj = build_adjacency(SkeletonTopology("two", ("a", "b"), ((0, 1),)))
        x = rng.normal(size=(2, 3))
        w = rng.normal(size=(3, 4))
        out = gcn_layer(Tensor(x), adj, Tensor(w)).numpy()
        np.testing.assert_allclose(out, np_gelu(adj.numpy() @ x @ w), atol=1e-12)

    def test_dim_mismatch(self):
        """Test that non-conforming inputs raise."""
        with pytest.raises(ContractViolation):
            gcn_layer(Tensor(np.ones((3, 2))), Tensor(np.eye(2)), Tensor(np.ones((2, 2))))
        with pytest.raises(ContractViolation):
            gcn_layer(Tensor(np.ones((2, 3))), Tensor(np.eye(2)), Tensor(np.ones((2, 2))))


class TestScaledDotAttention:
    """Test single-head attention."""

    def test_single_token(self):
        """Test N = 1 returns v."""
        out = scaled_dot_attention(Tensor([[0.3, -2.0]]), Tensor([[1.5, 0.2]]), Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.numpy(), [[3.0, 4.0]], atol=1e-15)

    def test_identical_keys_average_values(self):
        """Test uniform weights average the value rows."""
        q = Tensor([[1.0, 2.0], [-1.0, 0.5]])
        k = Tensor([[0.7, 0.7], [0.7, 0.7]])
        v = Tensor([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(scaled_dot_attention(q, k, v).numpy(), [[1.0, 1.0], [1.0, 1.0]], atol=1e-12)

    def test_random_instance(self):
        """Test a random 2×2 instance against a numpy oracle."""
        rng = make_rng(2)
        q, k, v = (rng.normal(size=(2, 2)) for _ in range(3))
        out = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).numpy()
        np.testing.assert_allclose(out, np_attention(q, k, v), atol=1e-12)

    def test_width_mismatch(self):
        """Test that q and k must share width."""
        with pytest.raises(ContractViolation):
            scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))


class TestMultiHeadSelfAttention:
    """Test multi-head self-attention."""

    def test_single_head_identity_matches_attention_bitwise(self):
        """Test h = 1 with identity projections reduces to plain attention exactly."""
        x = Tensor(make_rng(3).normal(size=(6, 4)))
        msa = multi_head_self_attention(x, identity_block(4)).numpy()
        plain = scaled_dot_attention(x, x, x).numpy()
        assert np.array_equal(msa, plain)

    def test_zero_values(self):
        """Test V_i = 0 gives a zero matrix."""
        rng = make_rng(4)
        block = init_block_params(4, 4, 2, 8, rng)
        zeros = tuple(Tensor(np.zeros(v.dims)) for v in block.v)
        block = GtBlockParams(**{**block.__dict__, "v": zeros})
        out = multi_head_self_attention(Tensor(rng.normal(size=(5, 4))), block)
        np.testing.assert_array_equal(out.numpy(), np.zeros((5, 4)))

    def test_two_heads_against_oracle(self):
        """Test h = 2, d_k = 2, D = 4 against composing attention twice."""
        rng = make_rng(5)
        block = init_block_params(4, 4, 2, 8, rng)
        x = rng.normal(size=(5, 4))
        heads = [
            np_attention(x @ block.q[i].numpy(), x @ block.k[i].numpy(), x @ block.v[i].numpy())
            for i in range(2)
        ]
        expected = np.concatenate(heads, axis=-1) @ block.w_out.numpy()
        out = multi_head_self_attention(Tensor(x), block).numpy()
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_permutation_equivariance(self):
        """Test MSA(Px) = P·MSA(x)."""
        rng = make_rng(6)
        block = init_block_params(8, 8, 2, 16, rng)
        x = rng.normal(size=(7, 8))
        perm = rng.permutation(7)
        out = multi_head_self_attention(Tensor(x), block).numpy()
        permuted = multi_head_self_attention(Tensor(x[perm]), block).numpy()
        assert np.max(np.abs(permuted - out[perm])) < 1e-9

    def test_attention_rows_sum_to_one(self):
        """Test attention weights of random projections are stochastic rows."""
        rng = make_rng(7)
        block = init_block_params(8, 8, 2, 16, rng)
        x = rng.normal(0.0, 10.0, size=(9, 8))
        for q, k in zip(block.q, block.k):
            qx, kx = x @ q.numpy(), x @ k.numpy()
            weights = np_softmax(qx @ kx.T / math.sqrt(qx.shape[-1]))
            assert np.max(np.abs(weights.sum(axis=-1) - 1.0)) < 1e-9

    def test_width_mismatch(self):
        """Test that the input width must equal the block dim."""
        block = init_block_params(4, 4, 2, 8, make_rng(0))
        with pytest.raises(ContractViolation):
            multi_head_self_attention(Tensor(np.ones((3, 6))), block)


class TestGtBlockForward:
    """Test the composed block."""

    def test_zero_block_gives_zero(self):
        """Test zero weights, gains and biases give a zero output."""
        x = Tensor(make_rng(8).normal(size=(17, 4)))
        out = gt_block_forward(x, build_adjacency(H36M17), zero_block(4))
        np.testing.assert_array_equal(out.numpy(), np.zeros((17, 4)))

    def test_single_joint_topology(self):
        """Test a one-joint graph still yields a well-formed output."""
        rng = make_rng(9)
        block = init_block_params(4, 4, 2, 8, rng)
        out = gt_block_forward(Tensor(rng.normal(size=(1, 4))), Tensor([[1.0]]), block)
        assert out.dims == (1, 4)
        assert np.all(np.isfinite(out.numpy()))

    def test_default_shape(self):
        """Test a default-size block on a 17×32 input."""
        rng = make_rng(10)
        block = init_block_params(32, 32, 2, 64, rng)
        out = gt_block_forward(Tensor(rng.normal(size=(17, 32))), build_adjacency(H36M17), block)
        assert out.dims == (17, 32)

    def test_batched_matches_unbatched(self):
        """Test a batch of inputs equals per-sample evaluation."""
        rng = make_rng(11)
        block = init_block_params(8, 8, 2, 16, rng)
        adj = build_adjacency(H36M17)
        x = rng.normal(size=(3, 17, 8))
        batched = gt_block_forward(Tensor(x), adj, block).numpy()
        for i in range(3):
            single = gt_block_forward(Tensor(x[i]), adj, block).numpy()
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestParallelFuse:
    """Test branch split and fusion."""

    def test_single_branch_is_plain_stack(self):
        """Test B = 1 with an identity split equals one block stack."""
        rng = make_rng(12)
        adj = build_adjacency(H36M17)
        blocks = [init_block_params(8, 8, 2, 16, rng) for _ in range(2)]
        x = Tensor(rng.normal(size=(17, 8)))
        fused = parallel_fuse(x, adj, [Tensor(np.eye(8))], [blocks])
        np.testing.assert_array_equal(fused.numpy(), run_block_stack(x, adj, blocks).numpy())

    def test_default_shape(self):
        """Test B = 4, D = 32 gives 17×32."""
        rng = make_rng(13)
        adj = build_adjacency(H36M17)
        splits = [Tensor(rng.normal(size=(32, 8))) for _ in range(4)]
        branches = [[init_block_params(8, 8, 2, 16, rng)] for _ in range(4)]
        out = parallel_fuse(Tensor(rng.normal(size=(17, 32))), adj, splits, branches)
        assert out.dims == (17, 32)

    def test_zeroed_branch_columns(self):
        """Test a zeroed first branch and an independently run second branch."""
        rng = make_rng(14)
        adj = build_adjacency(H36M17)
        x = Tensor(rng.normal(size=(17, 8)))
        splits = [Tensor(rng.normal(size=(8, 4))) for _ in range(2)]
        live = [init_block_params(4, 4, 2, 8, rng)]
        out = parallel_fuse(x, adj, splits, [[zero_block(4)], live]).numpy()
        np.testing.assert_array_equal(out[:, :4], np.zeros((17, 4)))
        expected = run_block_stack(x @ splits[1], adj, live).numpy()
        np.testing.assert_array_equal(out[:, 4:], expected)

    def test_branches_must_divide_width(self):
        """Test that B not dividing D is a configuration error."""
        rng = make_rng(15)
        branches = [[init_block_params(2, 2, 1, 4, rng)] for _ in range(3)]
        splits = [Tensor(np.ones((8, 2))) for _ in range(3)]
        with pytest.raises(ConfigError):
            parallel_fuse(Tensor(np.ones((17, 8))), build_adjacency(H36M17), splits, branches)


class TestGradients:
    """Finite-difference checks of every block operation."""

    @pytest.mark.parametrize("seed", range(10))
    def test_gcn_layer(self, seed):
        rng = make_rng(seed)
        adj = build_adjacency(H36M17)
        w = Tensor(rng.normal(size=(6, 5)))
        probe = Tensor(rng.normal(size=(17, 5)))
        x = Tensor(rng.normal(size=(17, 6)))
        assert finite_diff_check(lambda t: tensor_sum(gcn_layer(t, adj, w) * probe), x) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_scaled_dot_attention(self, seed):
        rng = make_rng(seed)
        k = Tensor(rng.normal(size=(5, 4)))
        v = Tensor(rng.normal(size=(5, 4)))
        probe = Tensor(rng.normal(size=(5, 4)))
        q = Tensor(rng.normal(size=(5, 4)))
        assert finite_diff_check(lambda t: tensor_sum(scaled_dot_attention(t, k, t + v) * probe), q) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_multi_head_self_attention(self, seed):
        rng = make_rng(seed)
        block = init_block_params(8, 8, 2, 16, rng)
        probe = Tensor(rng.normal(size=(5, 8)))
        x = Tensor(rng.normal(size=(5, 8)))
        assert finite_diff_check(lambda t: tensor_sum(multi_head_self_attention(t, block) * probe), x) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_gt_block_forward(self, seed):
        rng = make_rng(seed)
        block = init_block_params(8, 8, 2, 16, rng)
        adj = build_adjacency(SkeletonTopology("chain5", tuple("abcde"), ((0, 1), (1, 2), (2, 3), (3, 4))))
        probe = Tensor(rng.normal(size=(5, 8)))
        x = Tensor(rng.normal(size=(5, 8)))
        assert finite_diff_check(lambda t: tensor_sum(gt_block_forward(t, adj, block) * probe), x) < 1e-4

    @pytest.mark.parametrize("seed", range(10))
    def test_block_weight_gradient(self, seed):
        """Test gradients reach the graph-convolution weight."""
        rng = make_rng(seed)
        block = init_block_params(8, 8, 2, 16, rng)
        adj = build_adjacency(SkeletonTopology("chain5", tuple("abcde"), ((0, 1), (1, 2), (2, 3), (3, 4))))
        x = Tensor(rng.normal(size=(5, 8)))
        probe = Tensor(rng.normal(size=(5, 8)))

        def f(w):
            params = GtBlockParams(**{**block.__dict__, "gcn_weight": w})
            return tensor_sum(gt_block_forward(x, adj, params) * probe)

        assert finite_diff_check(f, block.gcn_weight) < 1e-4

"""Attention, enhancer and adapter against step-by-step references."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from anchordiff import autodiff as ad
from anchordiff.adapter import GatedContextAdapter
from anchordiff.attention import MultiHeadAttention
from anchordiff.enhancer import IdentityEnhancer
from anchordiff.gradcheck import check_parameter


def softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def reference_mha(queries, context, w_q, w_k, w_v, w_out):
    """Unfused multi-head attention: one head at a time, explicit concat."""
    head_dim = w_q[0].shape[1]
    heads = []
    for wq, wk, wv in zip(w_q, w_k, w_v):
        q = queries @ wq
        k = context @ wk
        v = context @ wv
        att = softmax_np(q @ k.T / math.sqrt(head_dim))
        heads.append(att @ v)
    return np.concatenate(heads, axis=1) @ w_out


def reference_adapt(context, identity, w_p, mha, gamma, beta):
    """Unfused adapter: explicit concat, slice and gated residual."""
    projected = identity @ w_p.T
    joined = np.concatenate([context, projected], axis=0)
    mixed = reference_mha(joined, joined, *mha)
    text = mixed[:context.shape[0]]
    return context + beta * math.tanh(gamma) * text


def mha_weight_arrays(mha):
    return ([p.value for p in mha.w_q], [p.value for p in mha.w_k],
            [p.value for p in mha.w_v], mha.w_out.value)


class TestMultiHeadAttention:
    def test_dim_must_divide(self):
        with pytest.raises(ad.ContractError):
            MultiHeadAttention(10, 3, ad.Rng(1, "root").stream("mha"), "m")

    def test_matches_reference(self):
        rng = ad.Rng(2, "root")
        mha = MultiHeadAttention(16, 4, rng.stream("mha"), "m")
        draws = rng.stream("draws")
        for trial in range(20):
            q_rows = draws.normal(5, 16)
            c_rows = draws.normal(3, 16)
            got = mha.apply(ad.constant(q_rows), ad.constant(c_rows)).value
            want = reference_mha(q_rows, c_rows, *mha_weight_arrays(mha))
            npt.assert_allclose(got, want, atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        rng = ad.Rng(3, "root")
        mha = MultiHeadAttention(8, 2, rng.stream("mha"), "m")
        att = mha.attention_weights(ad.constant(rng.stream("q").normal(4, 8)),
                                    ad.constant(rng.stream("c").normal(6, 8)), head=1)
        npt.assert_allclose(att.value.sum(axis=1), np.ones(4), atol=1e-12)

    def test_width_checked(self):
        mha = MultiHeadAttention(8, 2, ad.Rng(4, "root").stream("mha"), "m")
        with pytest.raises(ad.ShapeError):
            mha.apply(ad.constant(np.ones((2, 6))), ad.constant(np.ones((2, 8))))

    def test_logit_scale_is_inverse_sqrt_head_dim(self):
        # craft rank-1 weights so the raw q.k product is a known constant,
        # then recover the applied scale from the softmax output
        def effective_logit_gap(dim):
            mha = MultiHeadAttention(dim, 1, ad.Rng(5, "root").stream("mha"), "m")
            mha.w_q[0].value[:] = 0.0
            mha.w_q[0].value[0, 0] = 1.0
            mha.w_k[0].value[:] = 0.0
            mha.w_k[0].value[0, 0] = 1.0
            q = np.zeros((1, dim)); q[0, 0] = 1.0
            c = np.zeros((2, dim)); c[0, 0] = 1.0  # key 0 -> logit 1, key 1 -> 0
            att = mha.attention_weights(ad.constant(q), ad.constant(c), head=0).value
            return math.log(att[0, 0] / att[0, 1])

        gap_small = effective_logit_gap(4)    # head_dim 4
        gap_large = effective_logit_gap(16)   # head_dim 16
        assert gap_small == pytest.approx(1.0 / math.sqrt(4), abs=1e-12)
        assert gap_large == pytest.approx(1.0 / math.sqrt(16), abs=1e-12)
        assert gap_small / gap_large == pytest.approx(2.0, abs=1e-10)

    def test_parameter_gradients_finite_difference(self):
        rng = ad.Rng(6, "root")
        mha = MultiHeadAttention(8, 2, rng.stream("mha"), "m")
        q_rows = rng.stream("q").normal(3, 8)
        c_rows = rng.stream("c").normal(4, 8)
        target = rng.stream("t").normal(3, 8)

        def loss(build=True):
            out = mha.apply(ad.constant(q_rows), ad.constant(c_rows))
            return ad.mse(out, ad.constant(target))

        for p in mha.params():
            max_err, _, _ = check_parameter(loss, p)
            assert max_err <= 1e-5, f"{p.name}: {max_err}"


class TestIdentityEnhancer:
    def make(self, seed=7, dim=32, heads=4, anchor_rows=None):
        rng = ad.Rng(seed, "root")
        if anchor_rows is None:
            anchor_rows = rng.stream("anchor").normal(2, dim) * 0.1
        return IdentityEnhancer(dim, heads, anchor_rows, rng.stream("enhancer")), rng

    def test_output_shape_tracks_query_rows(self):
        enh, rng = self.make()
        for m in (1, 4, 9):
            out = enh.enhance(ad.constant(rng.stream(f"f{m}").normal(m, 32)))
            assert out.shape == (m, 32)

    def test_identical_keys_degeneracy(self):
        # both anchor rows equal u, one head, output projection forced to
        # identity: every output row collapses to u @ W_v
        dim = 8
        rng = ad.Rng(8, "root")
        u = rng.stream("u").normal(1, dim)
        anchor = np.concatenate([u, u], axis=0)
        enh = IdentityEnhancer(dim, 1, anchor, rng.stream("enhancer"))
        enh.attention.w_out.value[:] = np.eye(dim)
        out = enh.enhance(ad.constant(rng.stream("f").normal(5, dim))).value
        expected = u @ enh.attention.w_v[0].value
        for row in out:
            npt.assert_allclose(row, expected[0], atol=1e-12)

    def test_anchor_permutation_invariance(self):
        enh, rng = self.make()
        faces = ad.constant(rng.stream("faces").normal(4, 32))
        base = enh.enhance(faces).value
        swapped = enh.anchor.value[::-1].copy()
        out = enh.enhance(faces, anchor=ad.constant(swapped)).value
        npt.assert_allclose(out, base, atol=1e-12)

    def test_matches_reference(self):
        enh, rng = self.make()
        draws = rng.stream("draws")
        for trial in range(10):
            faces = draws.normal(4, 32)
            got = enh.enhance(ad.constant(faces)).value
            want = reference_mha(faces, enh.anchor.value,
                                 *mha_weight_arrays(enh.attention))
            npt.assert_allclose(got, want, atol=1e-10)

    def test_anchor_width_checked(self):
        rng = ad.Rng(9, "root")
        with pytest.raises(ad.ShapeError):
            IdentityEnhancer(32, 4, np.ones((2, 16)), rng.stream("enhancer"))

    def test_parameter_gradients_finite_difference(self):
        enh, rng = self.make(dim=8, heads=2)
        faces = rng.stream("faces").normal(3, 8)
        target = rng.stream("target").normal(3, 8)

        def loss(build=True):
            return ad.mse(enh.enhance(ad.constant(faces)), ad.constant(target))

        for p in enh.params():
            max_err, _, _ = check_parameter(loss, p)
            assert max_err <= 1e-5, f"{p.name}: {max_err}"


class TestGatedContextAdapter:
    def make(self, seed=11, dim=32, heads=4, beta=1.0, double=False):
        rng = ad.Rng(seed, "root")
        adapter = GatedContextAdapter(dim, heads, beta, rng.stream("adapter"),
                                      double_attention=double)
        context = rng.stream("context").normal(8, dim)
        identity = rng.stream("identity").normal(4, dim)
        return adapter, context, identity

    def test_zero_gate_is_bitwise_passthrough(self):
        adapter, context, identity = self.make()
        out = adapter.adapt(ad.constant(context), ad.constant(identity)).value
        assert np.array_equal(out, context)

    def test_zero_beta_is_passthrough_for_any_gate(self):
        adapter, context, identity = self.make(beta=0.0)
        adapter.gate.value[0, 0] = 1.7
        out = adapter.adapt(ad.constant(context), ad.constant(identity)).value
        npt.assert_array_equal(out, context)

    def test_matches_reference(self):
        adapter, context, identity = self.make()
        adapter.gate.value[0, 0] = 0.5
        got = adapter.adapt(ad.constant(context), ad.constant(identity)).value
        want = reference_adapt(context, identity, adapter.projection.value,
                               mha_weight_arrays(adapter.attention), 0.5, 1.0)
        npt.assert_allclose(got, want, atol=1e-10)

    def test_gate_monotonicity(self):
        # residual magnitude scales exactly as |tanh(gate)|
        adapter, context, identity = self.make()
        norms = {}
        for g in (-2.0, -1.0, 0.0, 1.0, 2.0):
            adapter.gate.value[0, 0] = g
            out = adapter.adapt(ad.constant(context), ad.constant(identity)).value
            norms[g] = np.linalg.norm(out - context)
        assert norms[0.0] == 0.0
        ratios = [norms[g] / abs(math.tanh(g)) for g in (-2.0, -1.0, 1.0, 2.0)]
        npt.assert_allclose(ratios, [ratios[0]] * 4, rtol=1e-10)
        assert norms[1.0] < norms[2.0]

    def test_deviation_bound(self):
        # ||adapt - context||_inf <= |beta * tanh(gate)| * max row norm of
        # the attended slice, and saturates at the beta-scaled slice as
        # the gate grows
        beta = 0.7
        adapter, context, identity = self.make(beta=beta)
        adapter.gate.value[0, 0] = 1.3
        got = adapter.adapt(ad.constant(context), ad.constant(identity)).value
        attended_slice = (got - context) / (beta * math.tanh(1.3))
        max_row_norm = np.linalg.norm(attended_slice, axis=1).max()
        deviation = np.abs(got - context).max()
        assert deviation <= abs(beta * math.tanh(1.3)) * max_row_norm + 1e-12
        # limit: even a saturated gate cannot exceed the beta-scaled slice
        adapter.gate.value[0, 0] = 50.0
        saturated = adapter.adapt(ad.constant(context), ad.constant(identity)).value
        assert np.abs(saturated - context).max() <= beta * max_row_norm + 1e-12

    def test_double_attention_variant(self):
        single, context, identity = self.make()
        double, _, _ = self.make(double=True)
        for a in (single, double):
            a.gate.value[0, 0] = 0.5
        out_single = single.adapt(ad.constant(context), ad.constant(identity)).value
        out_double = double.adapt(ad.constant(context), ad.constant(identity)).value
        assert np.abs(out_single - out_double).max() > 1e-8
        # reference for the double path: second unfused pass over the slice
        w = mha_weight_arrays(double.attention)
        projected = identity @ double.projection.value.T
        joined = np.concatenate([context, projected], axis=0)
        text = reference_mha(joined, joined, *w)[:8]
        text = reference_mha(text, text, *w)
        want = context + math.tanh(0.5) * text
        npt.assert_allclose(out_double, want, atol=1e-10)

    def test_output_width_checked(self):
        adapter, context, identity = self.make()
        with pytest.raises(ad.ShapeError):
            adapter.adapt(ad.constant(context[:, :16]), ad.constant(identity))

    def test_all_parameter_gradients_finite_difference(self):
        adapter, context, identity = self.make(dim=8, heads=2)
        adapter.gate.value[0, 0] = 0.3
        target = ad.Rng(12, "root").stream("target").normal(8, 8)

        def loss(build=True):
            out = adapter.adapt(ad.constant(context), ad.constant(identity))
            return ad.mse(out, ad.constant(target))

        for p in adapter.params():
            max_err, _, _ = check_parameter(loss, p)
            assert max_err <= 1e-5, f"{p.name}: {max_err}"

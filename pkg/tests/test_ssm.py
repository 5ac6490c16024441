import math

import numpy as np
import pytest

from helpers import check_gradients
from ssmqa import ssm
from ssmqa import tensor as T
from ssmqa.ssm import (
    ModelConfig,
    SsmModel,
    causal_window_mask,
    discretize_zoh,
    scan_combine,
    selective_scan,
    selective_scan_parallel,
    selective_scan_sequential,
    sliding_window_attention,
    ssd_scalar_head_scan,
    ssm_block_forward,
)
from ssmqa.tensor import ShapeError, Tensor


def unrolled_scan_oracle(u, delta, B, C, A, D):
    """Direct per-step, per-element recurrence; the ground truth for scans."""
    T_, C_ = u.shape
    N = B.shape[-1]
    y = np.zeros_like(u)
    h = np.zeros((C_, N))
    for t in range(T_):
        for c in range(C_):
            for n in range(N):
                a_bar, b_bar = discretize_zoh(A[c, n], np.array([B[t, n]]), delta[t, c])
                h[c, n] = a_bar * h[c, n] + b_bar[0] * u[t, c]
        for c in range(C_):
            y[t, c] = float(h[c] @ C[t]) + D[c] * u[t, c]
    return y


def random_scan_instance(rng, T_len, C_dim, N):
    u = T.tensor(rng.normal(size=(T_len, C_dim)))
    delta = T.tensor(rng.uniform(0.01, 0.5, size=(T_len, C_dim)))
    B = T.tensor(rng.normal(size=(T_len, N)))
    C = T.tensor(rng.normal(size=(T_len, N)))
    A = T.tensor(-rng.uniform(0.1, 5.0, size=(C_dim, N)))
    D = T.tensor(rng.normal(size=(C_dim,)))
    return u, delta, B, C, A, D


class TestDiscretizeZoh:
    def test_closed_form_hand_value(self):
        a_bar, b_bar = discretize_zoh(-1.0, np.array([1.0, 2.0]), math.log(2.0))
        assert abs(a_bar - 0.5) < 1e-15
        assert np.allclose(b_bar, [0.5, 1.0], atol=1e-15)

    def test_small_delta_limit(self):
        a_bar, b_bar = discretize_zoh(-1.0, np.array([3.0]), 1e-8)
        assert abs(a_bar - 1.0) < 1e-7
        assert abs(b_bar[0] - 3.0e-8) < 1e-12

    def test_a_zero_branch(self):
        a_bar, b_bar = discretize_zoh(0.0, np.array([2.0]), 0.25)
        assert a_bar == 1.0
        assert np.allclose(b_bar, [0.5])

    def test_nonpositive_delta_rejected(self):
        with pytest.raises(ValueError):
            discretize_zoh(-1.0, np.array([1.0]), 0.0)


class TestScanCombine:
    def test_matches_two_step_recurrence(self):
        # h1 = a1*h0 + b1; h2 = a2*h1 + b2 = (a2*a1)*h0 + (a2*b1 + b2)
        a, b = scan_combine((0.5, 2.0), (0.25, 1.0))
        h0 = 3.0
        assert a * h0 + b == 0.25 * (0.5 * h0 + 2.0) + 1.0

    def test_associativity_random_triples(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p, q, r = [(rng.uniform(0, 1), rng.normal()) for _ in range(3)]
            left = scan_combine(scan_combine(p, q), r)
            right = scan_combine(p, scan_combine(q, r))
            assert abs(left[0] - right[0]) < 1e-12
            assert abs(left[1] - right[1]) < 1e-12


class TestSelectiveScan:
    def test_memoryless_when_state_carry_zero(self):
        # a_bar ~ 0 via very negative A and large delta
        T_len, C_dim, N = 5, 2, 3
        rng = np.random.default_rng(1)
        u = T.tensor(rng.normal(size=(T_len, C_dim)))
        delta = T.tensor(np.full((T_len, C_dim), 50.0))
        B = T.tensor(rng.normal(size=(T_len, N)))
        C = T.tensor(rng.normal(size=(T_len, N)))
        A = T.tensor(np.full((C_dim, N), -50.0))
        D = T.tensor(np.zeros(C_dim))
        y = selective_scan_sequential(u, delta, B, C, A, D).data
        # with a_bar = 0 each step sees only its own input
        b_bar = (0.0 - 1.0) / -50.0 * B.data          # (a_bar-1)/a * B
        expected = np.einsum("tn,tn->t", C.data, b_bar)[:, None] * u.data
        assert np.max(np.abs(y - expected)) < 1e-9

    def test_cumulative_sum_case(self):
        # a_bar = 1 (A -> 0 limit), b_bar = delta*B = 1, C = 1, D = 0
        u = T.tensor(np.ones((3, 1)))
        delta = T.tensor(np.ones((3, 1)))
        B = T.tensor(np.ones((3, 1)))
        C = T.tensor(np.ones((3, 1)))
        A = T.tensor(np.zeros((1, 1)))
        y = selective_scan_sequential(u, delta, B, C, A).data
        assert np.allclose(y[:, 0], [1.0, 2.0, 3.0], atol=1e-12)
        yp = selective_scan_parallel(u, delta, B, C, A).data
        assert np.allclose(yp[:, 0], [1.0, 2.0, 3.0], atol=1e-12)

    def test_matches_unrolled_oracle(self):
        rng = np.random.default_rng(0)
        args = random_scan_instance(rng, 8, 3, 4)
        y = selective_scan_sequential(*args).data
        oracle = unrolled_scan_oracle(*(a.data for a in args))
        assert np.max(np.abs(y - oracle)) < 1e-12

    def test_parallel_equals_sequential_t1(self):
        rng = np.random.default_rng(2)
        args = random_scan_instance(rng, 1, 2, 3)
        ys = selective_scan_sequential(*args).data
        yp = selective_scan_parallel(*args).data
        assert np.array_equal(ys, yp)

    def test_parallel_equals_sequential_large(self):
        rng = np.random.default_rng(3)
        args = random_scan_instance(rng, 512, 4, 16)
        ys = selective_scan_sequential(*args).data
        yp = selective_scan_parallel(*args).data
        assert np.max(np.abs(ys - yp)) < 1e-10

    def test_batched_input(self):
        rng = np.random.default_rng(4)
        u = T.tensor(rng.normal(size=(2, 6, 3)))
        delta = T.tensor(rng.uniform(0.01, 0.5, size=(2, 6, 3)))
        B = T.tensor(rng.normal(size=(2, 6, 4)))
        C = T.tensor(rng.normal(size=(2, 6, 4)))
        A = T.tensor(-rng.uniform(0.1, 5.0, size=(3, 4)))
        D = T.tensor(rng.normal(size=(3,)))
        y = selective_scan_sequential(u, delta, B, C, A, D).data
        for b in range(2):
            oracle = unrolled_scan_oracle(
                u.data[b], delta.data[b], B.data[b], C.data[b], A.data, D.data
            )
            assert np.max(np.abs(y[b] - oracle)) < 1e-12

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(5)
        u, delta, B, C, A, D = random_scan_instance(rng, 4, 2, 3)
        bad_delta = T.tensor(rng.normal(size=(5, 2)))
        with pytest.raises(ShapeError):
            selective_scan_sequential(u, bad_delta, B, C, A, D)

    def test_stability_long_sequence(self):
        # with A < 0 and bounded delta the state stays bounded over 4096 steps
        rng = np.random.default_rng(6)
        args = random_scan_instance(rng, 4096, 2, 8)
        y = selective_scan_parallel(*args).data
        assert np.all(np.isfinite(y))
        assert np.max(np.abs(y)) < 1e4

    @pytest.mark.parametrize("method", ["sequential", "parallel"])
    def test_gradients_match_finite_differences(self, method):
        rng = np.random.default_rng(7)
        args = random_scan_instance(rng, 5, 2, 3)
        for a in args:
            a.requires_grad = True
        w = T.tensor(np.random.default_rng(8).normal(size=(5, 2)))

        def fn():
            y = selective_scan(*args, method=method)
            return (y * w).sum()

        check_gradients(fn, list(args))


class TestScalarHeadScan:
    def _instance(self, rng, Bsz=1, T_len=12, H=2, P=3, N=4):
        C_dim = H * P
        u = rng.normal(size=(Bsz, T_len, C_dim))
        delta_h = rng.uniform(0.01, 0.5, size=(Bsz, T_len, H))
        A_h = -rng.uniform(0.5, 8.0, size=H)
        B = rng.normal(size=(Bsz, T_len, N))
        C = rng.normal(size=(Bsz, T_len, N))
        D = rng.normal(size=C_dim)
        return u, delta_h, A_h, B, C, D, P

    def test_equals_broadcast_sequential_scan(self):
        rng = np.random.default_rng(0)
        u, delta_h, A_h, B, C, D, P = self._instance(rng)
        y = ssd_scalar_head_scan(u, delta_h, A_h, B, C, D, P, chunk=5)
        H = A_h.shape[0]
        C_dim = u.shape[-1]
        A_full = np.repeat(A_h, P)[:, None] * np.ones((1, B.shape[-1]))
        delta_full = np.repeat(delta_h, P, axis=-1)
        y_ref = selective_scan_sequential(
            T.tensor(u), T.tensor(delta_full), T.tensor(B), T.tensor(C),
            T.tensor(A_full), T.tensor(D),
        ).data
        assert np.max(np.abs(y - y_ref)) < 1e-6

    def test_chunk_equal_to_t_matches_smaller_chunks(self):
        rng = np.random.default_rng(1)
        u, delta_h, A_h, B, C, D, P = self._instance(rng, T_len=16)
        full = ssd_scalar_head_scan(u, delta_h, A_h, B, C, D, P, chunk=16)
        small = ssd_scalar_head_scan(u, delta_h, A_h, B, C, D, P, chunk=4)
        assert np.max(np.abs(full - small)) < 1e-12

    def test_chunk_below_one_rejected(self):
        rng = np.random.default_rng(2)
        u, delta_h, A_h, B, C, D, P = self._instance(rng)
        with pytest.raises(ValueError):
            ssd_scalar_head_scan(u, delta_h, A_h, B, C, D, P, chunk=0)


def make_block(variant="diagonal", d_model=4, N=2, seed=0, conv_width=2):
    cfg = ModelConfig(
        n_layers=1, d_model=d_model, state_size=N, vocab_size=16,
        conv_width=conv_width, ssd_head_dim=2,
    )
    rng = np.random.default_rng(seed)
    return ssm._init_ssm_block("layer0", variant, cfg, rng, np.float64)


class TestSsmBlock:
    def test_zero_weights_pass_input_through(self):
        p = make_block()
        for t in p.named().values():
            t.data[...] = 0.0
        x = T.tensor(np.random.default_rng(0).normal(size=(5, 4)))
        y = ssm_block_forward(x, p)
        assert np.array_equal(y.data, x.data)

    def test_output_shape_batched(self):
        cfg = ModelConfig(n_layers=1, d_model=64, state_size=4, vocab_size=16)
        p = ssm._init_ssm_block("layer0", "diagonal", cfg, np.random.default_rng(1), np.float64)
        x = T.tensor(np.random.default_rng(2).normal(size=(2, 16, 64)))
        assert ssm_block_forward(x, p).shape == (2, 16, 64)

    @pytest.mark.parametrize("variant", ["diagonal", "scalar_per_head"])
    def test_causality_future_perturbation(self, variant):
        p = make_block(variant=variant, d_model=4, N=2, seed=3)
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 4))
        t_cut = 4
        x2 = x.copy()
        x2[t_cut + 1:] += rng.normal(size=x2[t_cut + 1:].shape)
        with T.no_grad():
            y1 = ssm_block_forward(T.tensor(x), p).data
            y2 = ssm_block_forward(T.tensor(x2), p).data
        assert y1[: t_cut + 1].tobytes() == y2[: t_cut + 1].tobytes()

    def test_full_block_gradients(self):
        p = make_block(d_model=4, N=2, seed=5, conv_width=2)
        x = T.tensor(np.random.default_rng(6).normal(size=(3, 4)), requires_grad=True)
        params = [x] + list(p.named().values())
        w = np.random.default_rng(7).normal(size=(3, 4))

        def fn():
            return (ssm_block_forward(x, p, scan_method="sequential") * T.tensor(w)).sum()

        check_gradients(fn, params)

    def test_scalar_head_train_eval_paths_agree(self):
        p = make_block(variant="scalar_per_head", d_model=4, N=3, seed=8)
        x = T.tensor(np.random.default_rng(9).normal(size=(2, 10, 4)))
        y_train = ssm_block_forward(x, p).data
        with T.no_grad():
            y_eval = ssm_block_forward(x, p).data
        assert np.max(np.abs(y_train - y_eval)) < 1e-6

    def test_scalar_head_gradients(self):
        p = make_block(variant="scalar_per_head", d_model=4, N=2, seed=10, conv_width=2)
        x = T.tensor(np.random.default_rng(11).normal(size=(3, 4)), requires_grad=True)
        params = [x] + list(p.named().values())
        w = np.random.default_rng(12).normal(size=(3, 4))

        def fn():
            return (ssm_block_forward(x, p, scan_method="sequential") * T.tensor(w)).sum()

        check_gradients(fn, params)


def dense_causal_attention_oracle(x, p):
    """Independent full-attention reference with an explicit mask loop."""
    T_len, d = x.shape
    H = p.n_heads
    dh = d // H
    q = (x @ p.q_proj.data).reshape(T_len, H, dh)
    k = (x @ p.k_proj.data).reshape(T_len, H, dh)
    v = (x @ p.v_proj.data).reshape(T_len, H, dh)
    out = np.zeros_like(q)
    for h in range(H):
        for t in range(T_len):
            lo = max(0, t - p.window + 1)
            logits = q[t, h] @ k[lo: t + 1, h].T / math.sqrt(dh)
            w = np.exp(logits - logits.max())
            w = w / w.sum()
            out[t, h] = w @ v[lo: t + 1, h]
    return out.reshape(T_len, d) @ p.o_proj.data


class TestSlidingWindowAttention:
    def make_swa(self, window, d=4, heads=2, seed=0):
        cfg = ModelConfig(n_layers=1, d_model=d, state_size=2, vocab_size=16,
                          n_heads=heads, swa_window=window)
        return ssm._init_swa_block("layer0", cfg, np.random.default_rng(seed), np.float64)

    def test_window_one_returns_value_at_t(self):
        p = self.make_swa(window=1, seed=1)
        p.o_proj.data[...] = np.eye(4)
        x = T.tensor(np.random.default_rng(2).normal(size=(6, 4)))
        y = sliding_window_attention(x, p).data
        v = x.data @ p.v_proj.data
        assert np.max(np.abs(y - v)) < 1e-12

    def test_window_covering_t_equals_full_causal(self):
        p = self.make_swa(window=50, seed=3)
        x = np.random.default_rng(4).normal(size=(12, 4))
        y = sliding_window_attention(T.tensor(x), p).data
        assert np.max(np.abs(y - dense_causal_attention_oracle(x, p))) < 1e-12

    def test_small_window_matches_oracle(self):
        p = self.make_swa(window=3, seed=5)
        x = np.random.default_rng(6).normal(size=(10, 4))
        y = sliding_window_attention(T.tensor(x), p).data
        assert np.max(np.abs(y - dense_causal_attention_oracle(x, p))) < 1e-12

    def test_causality(self):
        p = self.make_swa(window=4, seed=7)
        rng = np.random.default_rng(8)
        x = rng.normal(size=(9, 4))
        x2 = x.copy()
        x2[6:] = rng.normal(size=(3, 4))
        y1 = sliding_window_attention(T.tensor(x), p).data
        y2 = sliding_window_attention(T.tensor(x2), p).data
        assert y1[:6].tobytes() == y2[:6].tobytes()

    def test_window_below_one_rejected(self):
        with pytest.raises(ValueError):
            causal_window_mask(4, 0)

    def test_gradients(self):
        p = self.make_swa(window=3, d=4, heads=2, seed=9)
        x = T.tensor(np.random.default_rng(10).normal(size=(5, 4)), requires_grad=True)
        params = [x] + list(p.named().values())
        w = np.random.default_rng(11).normal(size=(5, 4))

        def fn():
            return (ssm.swa_block_forward(x, p) * T.tensor(w)).sum()

        check_gradients(fn, params)


class TestModel:
    def small_config(self, **kw):
        base = dict(n_layers=2, d_model=8, state_size=2, vocab_size=32,
                    n_heads=2, swa_window=4, ssd_head_dim=2, max_seq_len=64)
        base.update(kw)
        return ModelConfig(**base)

    def test_logits_shape(self):
        model = SsmModel(self.small_config(vocab_size=128), seed=0)
        ids = np.random.default_rng(0).integers(0, 128, size=(2, 16))
        with T.no_grad():
            logits = model.forward(ids)
        assert logits.shape == (2, 16, 128)
        assert np.all(np.isfinite(logits.data))

    def test_out_of_range_id_rejected(self):
        model = SsmModel(self.small_config(), seed=1)
        with pytest.raises(ValueError):
            model.forward(np.array([[0, 99]]))

    def test_too_long_sequence_rejected(self):
        model = SsmModel(self.small_config(max_seq_len=8), seed=2)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 9), dtype=int))

    def test_all_pad_with_zero_embedding_row_gives_constant_logits(self):
        model = SsmModel(self.small_config(), seed=3)
        model.embed.data[0, :] = 0.0
        with T.no_grad():
            logits = model.forward(np.zeros((1, 7), dtype=int)).data
        assert np.max(np.abs(logits - logits[:, :1, :])) < 1e-12

    @pytest.mark.parametrize("variant", ["diagonal", "scalar_per_head", "hybrid"])
    def test_model_causality(self, variant):
        model = SsmModel(self.small_config(variant=variant), seed=4)
        rng = np.random.default_rng(5)
        ids = rng.integers(0, 32, size=(1, 12))
        ids2 = ids.copy()
        ids2[0, 8:] = (ids2[0, 8:] + 7) % 32
        with T.no_grad():
            l1 = model.forward(ids).data
            l2 = model.forward(ids2).data
        assert l1[0, :8].tobytes() == l2[0, :8].tobytes()

    def test_hybrid_schedule_interleaves(self):
        cfg = self.small_config(variant="hybrid", n_layers=4)
        assert cfg.layer_variants() == [
            "diagonal", "swa_hybrid", "diagonal", "swa_hybrid"
        ]

    def test_preset_zamba_max_seq_len(self):
        cfg = ModelConfig.preset("zamba", d_model=8, vocab_size=16)
        assert cfg.max_seq_len == 4096
        assert cfg.preset_name == "zamba"

    def test_same_seed_same_weights(self):
        a = SsmModel(self.small_config(), seed=9)
        b = SsmModel(self.small_config(), seed=9)
        for (na, ta), (nb, tb) in zip(
            sorted(a.named_weights().items()), sorted(b.named_weights().items())
        ):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_span_head_logit_shapes(self):
        model = SsmModel(self.small_config(), seed=10)
        head = model.attach_span_head(seed=1)
        with T.no_grad():
            h = model.hidden(np.zeros((1, 6), dtype=int))
            s, e = head.logits(h)
        assert s.shape == (1, 6)
        assert e.shape == (1, 6)

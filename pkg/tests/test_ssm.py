import numpy as np
import pytest

from mtair import NonFiniteError, ShapeError, Tape, Tensor
from mtair import oracles as orc
from mtair import ssm
from mtair import tensor as tc

from conftest import rel_err, scale_err


def make_params(rng, c=4, s=3, r=2, dtype=np.float32):
    def arr(shape, scale=0.3):
        return Tensor(rng.normal(scale=scale, size=shape).astype(dtype))

    return ssm.SSMParams(
        a_log=arr((c, s)),
        d=arr((c,)),
        w_b=arr((s, c)),
        b_b=arr((s,)),
        w_c=arr((s, c)),
        b_c=arr((s,)),
        w_dt_low=arr((r, c)),
        w_dt=arr((c, r)),
        b_dt=arr((c,)),
    )


def constant_path_params(delta, b_const, c_const, a_log_val, d_val=0.0, c_ch=1):
    """Parameters whose projections ignore the input: delta, B, C constant."""
    from mtair.weights import inv_softplus

    z = np.zeros
    return ssm.SSMParams(
        a_log=Tensor(np.full((c_ch, 1), a_log_val, dtype=np.float64)),
        d=Tensor(np.full(c_ch, d_val, dtype=np.float64)),
        w_b=Tensor(z((1, c_ch), dtype=np.float64)),
        b_b=Tensor(np.array([b_const], dtype=np.float64)),
        w_c=Tensor(z((1, c_ch), dtype=np.float64)),
        b_c=Tensor(np.array([c_const], dtype=np.float64)),
        w_dt_low=Tensor(z((1, c_ch), dtype=np.float64)),
        w_dt=Tensor(z((c_ch, 1), dtype=np.float64)),
        b_dt=Tensor(np.full(c_ch, inv_softplus(np.float64(delta)), dtype=np.float64)),
    )


class TestRoutes:
    def test_2x2_row_major(self):
        x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 2, 2, 1))
        seq = ssm.route_flatten(x, "tl_br")
        np.testing.assert_array_equal(seq.data.ravel(), [1, 2, 3, 4])
        rev = ssm.route_flatten(x, "br_tl")
        np.testing.assert_array_equal(rev.data.ravel(), [4, 3, 2, 1])

    def test_3x3_hand_enumerated_table(self):
        x = Tensor(np.arange(9, dtype=np.float32).reshape(1, 3, 3, 1))
        table = {
            "tl_br": [0, 1, 2, 3, 4, 5, 6, 7, 8],
            "br_tl": [8, 7, 6, 5, 4, 3, 2, 1, 0],
            "tr_bl": [2, 5, 8, 1, 4, 7, 0, 3, 6],
            "bl_tr": [6, 3, 0, 7, 4, 1, 8, 5, 2],
        }
        for direction, want in table.items():
            got = ssm.route_flatten(x, direction).data.ravel()
            np.testing.assert_array_equal(got, want)
            walk = orc.route_order_oracle(3, 3, direction)
            np.testing.assert_array_equal(ssm.route_perm(3, 3, direction), walk)

    def test_bijection_round_trip_bit_exact(self, rng):
        for h in (1, 2, 3, 5, 16):
            for w in (1, 2, 7, 16):
                x = Tensor(rng.normal(size=(2, h, w, 3)).astype(np.float32))
                for direction in ssm.ROUTE_DIRECTIONS:
                    seq = ssm.route_flatten(x, direction)
                    back = ssm.route_unflatten(seq, direction, h, w)
                    np.testing.assert_array_equal(back.data, x.data)

    def test_reversal_duality(self, rng):
        x = Tensor(rng.normal(size=(1, 5, 4, 2)).astype(np.float32))
        fwd = ssm.route_flatten(x, "tl_br").data
        rev = ssm.route_flatten(x, "br_tl").data
        np.testing.assert_array_equal(rev, fwd[:, ::-1])
        col = ssm.route_flatten(x, "tr_bl").data
        col_rev = ssm.route_flatten(x, "bl_tr").data
        np.testing.assert_array_equal(col_rev, col[:, ::-1])

    def test_unknown_direction(self):
        with pytest.raises(ShapeError):
            ssm.route_perm(2, 2, "diagonal")


class TestSelectiveScan:
    def test_memoryless_limit(self):
        # decay factor 0 (state forgets instantly), C*Bbar = 1, D = 0:
        # y_t must equal x_t exactly
        delta = 0.7
        p = constant_path_params(
            delta, b_const=1.0 / delta, c_const=1.0, a_log_val=40.0
        )
        x = np.array([0.3, -1.2, 2.5, 0.0, 4.0], dtype=np.float64)
        seq = Tensor(x.reshape(1, 5, 1))
        out = ssm.selective_scan_1d(seq, p)
        np.testing.assert_allclose(out.data.ravel(), x, atol=1e-12)

    def test_geometric_decay_by_hand(self):
        # Abar = 0.5, Bbar = 1, C = 1, D = 0, impulse input
        ln2 = float(np.log(2.0))
        p = constant_path_params(ln2, b_const=1.0 / ln2, c_const=1.0, a_log_val=0.0)
        seq = Tensor(np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 4, 1))
        out = ssm.selective_scan_1d(seq, p)
        np.testing.assert_allclose(
            out.data.ravel(), [1.0, 0.5, 0.25, 0.125], atol=1e-12
        )

    def test_matches_sequential_oracle(self, rng):
        p = make_params(rng, c=6, s=4, r=3)
        x = rng.normal(size=(2, 16, 6)).astype(np.float32)
        got = ssm.selective_scan_1d(Tensor(x), p).data
        want = np.stack([orc.selective_scan_oracle(x[b], p) for b in range(2)])
        assert scale_err(got, want) <= 1e-5

    def test_length_one_and_shape_errors(self, rng):
        p = make_params(rng)
        out = ssm.selective_scan_1d(Tensor(rng.normal(size=(1, 1, 4)).astype(np.float32)), p)
        assert out.shape == (1, 1, 4)
        with pytest.raises(ShapeError):
            ssm.selective_scan_1d(Tensor(np.zeros((1, 0, 4), dtype=np.float32)), p)
        with pytest.raises(ShapeError):
            ssm.selective_scan_1d(Tensor(np.zeros((1, 4, 5), dtype=np.float32)), p)

    def test_nonfinite_state_names_step(self, rng):
        p = make_params(rng)
        x = np.zeros((1, 8, 4), dtype=np.float32)
        x[0, 3] = 1e30  # overflows the state update at step 3
        with pytest.raises(NonFiniteError, match="step 3"):
            ssm.selective_scan_1d(Tensor(x), p)

    def test_gradients_match_finite_differences(self, rng):
        p = make_params(rng, c=3, s=2, r=2, dtype=np.float64)
        x = rng.normal(size=(1, 6, 3)).astype(np.float64)
        proj = rng.normal(size=(1, 6, 3)).astype(np.float64)
        xt = Tensor(x)
        with Tape() as tape:
            out = ssm.selective_scan_1d(xt, p)
            loss = tc.reduce_sum(tc.ew(out, Tensor(proj), "mul"))
        grads = tape.backward(loss)
        h = 1e-6
        for tens in [xt] + p.tensors():
            analytic = grads.wrt(tens)
            arr = tens.data
            numeric = np.zeros_like(arr)
            flat, nflat = arr.reshape(-1), numeric.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float((ssm.selective_scan_1d(Tensor(x), p).data * proj).sum())
                flat[i] = orig - h
                fm = float((ssm.selective_scan_1d(Tensor(x), p).data * proj).sum())
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            assert rel_err(analytic, numeric) <= 1e-6, f"grad mismatch on {arr.shape}"


class TestSsm2d:
    def test_rotation_symmetry(self, rng):
        p = make_params(rng, c=3)
        params4 = (p, p, p, p)
        half = rng.normal(size=(1, 4, 6, 3)).astype(np.float32)
        x = half + half[:, ::-1, ::-1]  # invariant under 180-degree rotation
        out = ssm.ssm_2d(Tensor(x), params4).data
        np.testing.assert_allclose(out, out[:, ::-1, ::-1], rtol=1e-5, atol=1e-6)

    def test_memoryless_routes_agree(self):
        delta = 0.9
        p = constant_path_params(delta, 1.0 / delta, 1.0, 40.0, d_val=0.5)
        params4 = (p, p, p, p)
        x = np.random.default_rng(7).normal(size=(1, 3, 5, 1))
        out = ssm.ssm_2d(Tensor(x, np.float64), params4).data
        seq = ssm.route_flatten(Tensor(x, np.float64), "tl_br")
        single = ssm.route_unflatten(
            ssm.selective_scan_1d(seq, p), "tl_br", 3, 5
        ).data
        np.testing.assert_allclose(out, 4.0 * single, atol=1e-12)

    def test_matches_directional_oracle(self, rng):
        params4 = tuple(make_params(rng) for _ in range(4))
        x = rng.normal(size=(1, 6, 6, 4)).astype(np.float32)
        got = ssm.ssm_2d(Tensor(x), params4).data
        want = orc.ssm_2d_oracle(x, params4)
        assert scale_err(got, want) <= 1e-5

    def test_fault_hook_negates_one_route(self, rng):
        params4 = tuple(make_params(rng) for _ in range(4))
        x = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32))
        clean = ssm.ssm_2d(x, params4).data
        with ssm.inject_route_fault("tr_bl"):
            faulty = ssm.ssm_2d(x, params4).data
        assert np.abs(clean - faulty).max() > 1e-3
        np.testing.assert_allclose(ssm.ssm_2d(x, params4).data, clean)


class TestVssModule:
    def test_zero_annihilation(self, rng):
        w = ssm.init_vss(rng, channels=4, d_state=3, dt_rank=2)
        x = Tensor(np.zeros((1, 3, 3, 4), dtype=np.float32))
        out = ssm.vss_module(x, w)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-7)

    def test_shape_preserved_at_level_one_width(self, rng):
        w = ssm.init_vss(rng, channels=48, d_state=4, dt_rank=2)
        x = Tensor(rng.normal(size=(1, 8, 8, 48)).astype(np.float32))
        assert ssm.vss_module(x, w).shape == (1, 8, 8, 48)

    def test_matches_composition_oracle(self, rng):
        w = ssm.init_vss(rng, channels=4, d_state=3, dt_rank=2)
        x64 = rng.normal(size=(1, 5, 4, 4))
        w64 = ssm.VSSWeights(
            w_expand=Tensor(w.w_expand.data, np.float64),
            b_expand=Tensor(w.b_expand.data, np.float64),
            scans=tuple(
                ssm.SSMParams(*[Tensor(t.data, np.float64) for t in p.tensors()])
                for p in w.scans
            ),
            ln_gamma=Tensor(w.ln_gamma.data, np.float64),
            ln_beta=Tensor(w.ln_beta.data, np.float64),
            w_out=Tensor(w.w_out.data, np.float64),
            b_out=Tensor(w.b_out.data, np.float64),
        )
        got = ssm.vss_module(Tensor(x64, np.float64), w64).data
        want = orc.vss_module_oracle(x64, w64)
        assert scale_err(got, want) <= 1e-6
        got32 = ssm.vss_module(Tensor(x64.astype(np.float32)), w).data
        assert scale_err(got32, want) <= 1e-5

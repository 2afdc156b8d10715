import dataclasses
import json
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import fd_grad, rel_err
from gsmnet import autodiff as ad
from gsmnet import networks as nn


def chord_gap(f, a, b, lam):
    """f(a + lam (b-a)) minus the chord value; <= tol for convex f."""
    mid = f(a + lam * (b - a))
    return mid - ((1 - lam) * f(a) + lam * f(b))


class TestFicnnForward:
    def test_single_layer_at_zero(self):
        arch = nn.FicnnArch(n_in=1, widths=(1,))
        p = nn.FicnnParams(
            arch=arch,
            layers=[nn.FicnnLayer(wi=np.array([[1.0]]), wu=None, b=np.zeros(1))],
        )
        out = nn.ficnn_forward(p, np.zeros(1))
        assert out == pytest.approx(np.log(2.0), rel=1e-15)

    def test_zero_weights_constant_in_input(self):
        arch = nn.FicnnArch(n_in=3, widths=(4, 1))
        p = nn.init(arch, seed=0)
        for layer in p.layers:
            layer.wi = np.zeros_like(layer.wi)
            if layer.wu is not None:
                layer.wu = np.zeros_like(layer.wu)
            layer.b = np.full_like(layer.b, 0.3)
        rng = np.random.default_rng(0)
        vals = {float(nn.ficnn_forward(p, rng.normal(size=3))) for _ in range(5)}
        assert len(vals) == 1
        # output layer sees only its own bias: softplus(0.3)
        assert vals.pop() == pytest.approx(np.log1p(np.exp(0.3)), rel=1e-12)

    def test_dimension_mismatch(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(5, 1)), seed=1)
        with pytest.raises(ValueError):
            nn.ficnn_forward(p, np.zeros(4))

    def test_chord_convexity_seeded(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1), non_decreasing=True), seed=2)
        rng = np.random.default_rng(3)
        f = lambda x: float(nn.ficnn_forward(p, x))
        for _ in range(200):
            a, b = rng.normal(size=3), rng.normal(size=3)
            scale = max(abs(f(a)), abs(f(b))) + 1.0
            for lam in (0.25, 0.5, 0.75):
                assert chord_gap(f, a, b, lam) <= 1e-9 * scale

    def test_chord_convexity_unconstrained_passthrough(self):
        # the plain convex variant (free passthrough weights) is convex too
        p = nn.init(nn.FicnnArch(n_in=6, widths=(20, 1)), seed=4)
        rng = np.random.default_rng(5)
        f = lambda x: float(nn.ficnn_forward(p, x))
        for _ in range(100):
            a, b = rng.normal(size=6), rng.normal(size=6)
            scale = max(abs(f(a)), abs(f(b))) + 1.0
            assert chord_gap(f, a, b, 0.5) <= 1e-9 * scale

    def test_non_decreasing_variant(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1), non_decreasing=True), seed=6)
        rng = np.random.default_rng(7)
        for _ in range(100):
            x = rng.normal(size=3)
            d = rng.uniform(0.0, 1.0, size=3)
            lo = nn.ficnn_forward(p, x)
            hi = nn.ficnn_forward(p, x + d)
            assert hi >= lo - 1e-9

    def test_convexity_survives_affine_input_map(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1)), seed=8)
        s, m = 0.02, 0.003
        f = lambda x: float(nn.ficnn_forward(p, (x - m) / s))
        rng = np.random.default_rng(9)
        for _ in range(50):
            a, b = rng.normal(scale=0.02, size=3), rng.normal(scale=0.02, size=3)
            scale = max(abs(f(a)), abs(f(b))) + 1.0
            assert chord_gap(f, a, b, 0.5) <= 1e-9 * scale

    def test_batched_matches_loop(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1)), seed=10)
        xs = np.random.default_rng(11).normal(size=(7, 3))
        batch = nn.ficnn_forward(p, xs)
        assert batch.shape == (7,)
        for i in range(7):
            assert batch[i] == pytest.approx(float(nn.ficnn_forward(p, xs[i])))

    def test_gradients_through_parameters(self):
        arch = nn.FicnnArch(n_in=3, widths=(4, 1), non_decreasing=True)
        p = nn.init(arch, seed=12)
        x = np.array([0.3, -0.1, 0.7])

        def loss(params):
            return nn.ficnn_forward(params, x)

        _, grads = ad.grad_params(loss, p)
        w0 = p.layers[0].wi

        def f_w0(flat):
            q = nn.init(arch, seed=12)
            q.layers[0].wi = flat.reshape(w0.shape)
            return float(nn.ficnn_forward(q, x))

        fd = fd_grad(f_w0, w0.ravel(), h=1e-6).reshape(w0.shape)
        assert rel_err(grads.layers[0].wi.data, fd) < 1e-6

    def test_input_hessian_is_psd(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1), non_decreasing=True), seed=13)
        x = np.array([0.2, -0.4, 0.9])
        hess = ad.hessian_input(lambda v: nn.ficnn_forward(p, v), x)
        eig = np.linalg.eigvalsh(0.5 * (hess + hess.T))
        assert np.all(eig >= -1e-9)


class TestPicnnForward:
    def make(self, seed=0, **kw):
        arch = nn.PicnnArch(n_convex=3, n_nonconvex=3, **kw)
        return nn.init(arch, seed=seed)

    def test_degenerate_gating_matches_ficnn(self):
        p = self.make(seed=14)
        # silence everything driven by the non-convex input
        for layer in p.u_layers:
            layer.gate_i_w = np.zeros_like(layer.gate_i_w)
            layer.gate_i_b = np.zeros_like(layer.gate_i_b)
            if layer.gate_u_w is not None:
                layer.gate_u_w = np.zeros_like(layer.gate_u_w)
                layer.gate_u_b = np.zeros_like(layer.gate_u_b)
        for layer in p.v_layers:
            layer.b = np.zeros_like(layer.b)
        # gates now output softplus(0) = ln 2, so the PICNN equals a FICNN
        # whose passthrough/layer weights absorb that factor
        g = np.log(2.0)
        arch = nn.FicnnArch(n_in=3, widths=p.arch.u_widths)
        layers = []
        for k, ul in enumerate(p.u_layers):
            layers.append(
                nn.FicnnLayer(
                    wi=g * ul.wi,
                    wu=None if ul.wu is None else g * ul.wu,
                    b=ul.b.copy(),
                )
            )
        f = nn.FicnnParams(arch=arch, layers=layers)
        rng = np.random.default_rng(15)
        for _ in range(10):
            x = rng.normal(size=3)
            a = nn.picnn_forward(p, x, np.zeros(3))
            b = nn.ficnn_forward(f, x)
            assert a == pytest.approx(b, rel=1e-12)

    def test_chord_convexity_in_convex_input(self):
        p = self.make(seed=16, non_decreasing_convex=True)
        rng = np.random.default_rng(17)
        for xn in rng.normal(size=(5, 3)):
            f = lambda x: float(nn.picnn_forward(p, x, xn))
            for _ in range(40):
                a, b = rng.normal(size=3), rng.normal(size=3)
                scale = max(abs(f(a)), abs(f(b))) + 1.0
                for lam in (0.25, 0.5, 0.75):
                    assert chord_gap(f, a, b, lam) <= 1e-9 * scale

    def test_not_convex_in_nonconvex_input(self):
        # regression fixture: seeded search that exhibits a chord violation
        # in the non-convex argument (tanh path), proving no convexity is
        # enforced there
        p = self.make(seed=18)
        xc = np.full(3, 0.5)
        f = lambda xn: float(nn.picnn_forward(p, xc, xn))
        rng = np.random.default_rng(19)
        worst = 0.0
        for _ in range(500):
            a, b = rng.normal(scale=2.0, size=3), rng.normal(scale=2.0, size=3)
            worst = max(worst, chord_gap(f, a, b, 0.5))
        assert worst > 1e-6

    def test_non_decreasing_in_convex_input(self):
        p = self.make(seed=20, non_decreasing_convex=True)
        rng = np.random.default_rng(21)
        for _ in range(50):
            x = rng.normal(size=3)
            xn = rng.normal(size=3)
            d = rng.uniform(0.0, 1.0, size=3)
            assert nn.picnn_forward(p, x + d, xn) >= nn.picnn_forward(p, x, xn) - 1e-9

    def test_dimension_mismatch(self):
        p = self.make(seed=22)
        with pytest.raises(ValueError):
            nn.picnn_forward(p, np.zeros(4), np.zeros(3))
        with pytest.raises(ValueError):
            nn.picnn_forward(p, np.zeros(3), np.zeros(2))

    def test_gradient_through_parameters(self):
        p = self.make(seed=23)
        xc = np.array([0.1, 0.2, -0.3])
        xn = np.array([0.5, -0.5, 0.0])

        def loss(params):
            return nn.picnn_forward(params, xc, xn)

        _, grads = ad.grad_params(loss, p)
        w = p.u_layers[0].gate_i_w

        def f_w(flat):
            q = self.make(seed=23)
            q.u_layers[0].gate_i_w = flat.reshape(w.shape)
            return float(nn.picnn_forward(q, xc, xn))

        fd = fd_grad(f_w, w.ravel(), h=1e-6).reshape(w.shape)
        assert rel_err(grads.u_layers[0].gate_i_w.data, fd) < 1e-6


class TestProjectAndInit:
    def test_feasible_fixed_point(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(10, 1), non_decreasing=True), seed=24)
        q = nn.project(p)
        for a, b in zip(nn.constrained_entries(p), nn.constrained_entries(q)):
            assert np.array_equal(a, b)

    def test_clamps_negative_entry(self):
        p = nn.init(nn.FicnnArch(n_in=3, widths=(4, 1)), seed=25)
        p.layers[1].wu[0, 0] = -0.3
        q = nn.project(p)
        assert q.layers[1].wu[0, 0] == 0.0
        assert not nn.is_feasible(p) and nn.is_feasible(q)

    def test_idempotent_bitwise(self):
        p = nn.init(nn.PicnnArch(3, 3, non_decreasing_convex=True), seed=26)
        rng = np.random.default_rng(27)
        for layer in p.u_layers:
            layer.wi = layer.wi - rng.uniform(size=layer.wi.shape)
            if layer.wu is not None:
                layer.wu = layer.wu - rng.uniform(size=layer.wu.shape)
        once = nn.project(p)
        twice = nn.project(once)
        for a, b in zip(ad.tree_leaves(once), ad.tree_leaves(twice)):
            assert np.array_equal(a, b)

    def test_init_deterministic(self):
        arch = nn.PicnnArch(3, 3, non_decreasing_convex=True)
        a, b = nn.init(arch, seed=7), nn.init(arch, seed=7)
        for la, lb in zip(ad.tree_leaves(a), ad.tree_leaves(b)):
            assert np.array_equal(la, lb)

    def test_init_feasible(self):
        for arch in (
            nn.FicnnArch(3, (10, 1), non_decreasing=True),
            nn.PicnnArch(3, 3, non_decreasing_convex=True),
        ):
            p = nn.init(arch, seed=28)
            assert nn.is_feasible(p)

    def test_two_seeds_differ(self):
        arch = nn.FicnnArch(3, (10, 1))
        a, b = nn.init(arch, seed=0), nn.init(arch, seed=1)
        assert any(
            not np.array_equal(la, lb)
            for la, lb in zip(ad.tree_leaves(a), ad.tree_leaves(b))
        )


def toy_sequences():
    # two short paths whose extrema are chosen by hand
    eps_a = np.zeros((3, 6))
    eps_a[1, 0] = 0.02
    eps_a[2, 1] = -0.02
    sig_a = np.zeros((3, 6))
    sig_a[1, 0] = 30.0
    sig_a[2, 2] = -30.0
    a = SimpleNamespace(t=np.array([0.0, 0.5, 1.1]), eps=eps_a, sig=sig_a)
    eps_b = np.zeros((2, 6))
    eps_b[1, 3] = 0.01
    sig_b = np.zeros((2, 6))
    sig_b[1, 4] = 12.0
    b = SimpleNamespace(t=np.array([0.0, 0.4]), eps=eps_b, sig=sig_b)
    return [a, b]


class TestNormalizer:
    def test_symmetric_strain_range(self):
        norm = nn.fit_normalizer(toy_sequences())
        assert norm.m_eps == pytest.approx(0.0, abs=1e-15)
        assert norm.s_eps == pytest.approx(0.02)
        assert norm.m_sig == pytest.approx(0.0, abs=1e-12)
        assert norm.s_sig == pytest.approx(30.0)

    def test_derived_scales(self):
        norm = nn.fit_normalizer(toy_sequences())
        assert norm.s_psi == pytest.approx(0.02 * 30.0)  # = 0.6
        assert norm.m_psi == norm.s_psi
        assert norm.s_q == norm.s_eps
        assert norm.s_qdot == norm.s_epsdot
        assert norm.s_phi == pytest.approx(norm.s_epsdot * norm.s_sig)

    def test_constant_time_step_degenerate(self):
        seq = SimpleNamespace(
            t=np.array([0.0, 0.05, 0.10, 0.15]),
            eps=np.random.default_rng(29).normal(scale=0.01, size=(4, 6)),
            sig=np.random.default_rng(30).normal(scale=10.0, size=(4, 6)),
        )
        with pytest.raises(ValueError, match="dt"):
            nn.fit_normalizer([seq])

    def test_constant_strain_degenerate(self):
        seq = SimpleNamespace(
            t=np.array([0.0, 0.4, 1.0]),
            eps=np.zeros((3, 6)),
            sig=np.random.default_rng(31).normal(scale=10.0, size=(3, 6)),
        )
        with pytest.raises(ValueError, match="eps"):
            nn.fit_normalizer([seq])

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            nn.fit_normalizer([])

    def test_non_increasing_times(self):
        seq = SimpleNamespace(
            t=np.array([0.0, 0.5, 0.5]),
            eps=np.random.default_rng(32).normal(scale=0.01, size=(3, 6)),
            sig=np.random.default_rng(33).normal(scale=10.0, size=(3, 6)),
        )
        with pytest.raises(ValueError):
            nn.fit_normalizer([seq])


class TestSerialization:
    def test_ficnn_round_trip(self):
        p = nn.init(nn.FicnnArch(3, (10, 1), non_decreasing=True), seed=34)
        payload = json.loads(json.dumps(nn.ficnn_to_payload(p)))
        q = nn.ficnn_from_payload(payload)
        assert q.arch == p.arch
        for a, b in zip(ad.tree_leaves(p), ad.tree_leaves(q)):
            assert np.array_equal(a, b)

    def test_picnn_round_trip(self):
        p = nn.init(nn.PicnnArch(3, 3, non_decreasing_convex=True), seed=35)
        payload = json.loads(json.dumps(nn.picnn_to_payload(p)))
        q = nn.picnn_from_payload(payload)
        assert q.arch == p.arch
        for a, b in zip(ad.tree_leaves(p), ad.tree_leaves(q)):
            assert np.array_equal(a, b)

    def test_infeasible_payload_rejected(self):
        p = nn.init(nn.FicnnArch(3, (4, 1)), seed=36)
        payload = nn.ficnn_to_payload(p)
        payload["layers"][1]["wu"][0][0] = -0.5
        with pytest.raises(ValueError):
            nn.ficnn_from_payload(payload)

    def test_wrong_shape_rejected(self):
        p = nn.init(nn.FicnnArch(3, (4, 1)), seed=37)
        payload = nn.ficnn_to_payload(p)
        payload["layers"][0]["wi"] = [[1.0, 2.0]]
        with pytest.raises(ValueError):
            nn.ficnn_from_payload(payload)

    def test_normalizer_round_trip(self):
        norm = nn.fit_normalizer(toy_sequences())
        payload = json.loads(json.dumps(nn.normalizer_to_payload(norm)))
        back = nn.normalizer_from_payload(payload)
        assert back == norm

    def test_normalizer_bad_scale_rejected(self):
        payload = nn.normalizer_to_payload(nn.fit_normalizer(toy_sequences()))
        payload["s_eps"] = 0.0
        with pytest.raises(ValueError):
            nn.normalizer_from_payload(payload)

"""Implicit solver tests.

The main oracle is a quadratic two-potential material whose update has a
closed form: with stiffness matrices C_eq, C_ov and viscosity matrix V0,

    qdot = (V0 + dt C_ov)^-1 C_ov (eps_new - q_prev)

so every step is checkable with plain linear algebra, and a purely
deviatoric sinusoidal path has an exact continuous-time solution for the
time-step refinement study.  Network-based models cover the rest-state
fixed point, dissipation sign, determinism, and failure modes.
"""

import dataclasses

import numpy as np
import pytest

from gsmnet import autodiff as ad
from gsmnet import mandel, solver
from gsmnet.mandel import SymTensor2
from gsmnet.networks import Normalizer
from gsmnet.potentials import build_model, internal_force_phi
from gsmnet.solver import MaterialState, SolverConfig, SolverError

from conftest import iso_matrix

NORM = Normalizer(
    s_eps=0.02,
    m_eps=0.0,
    s_sig=30.0,
    m_sig=0.0,
    s_epsdot=0.05,
    m_epsdot=0.0,
    s_t=5.0,
    m_t=5.0,
    s_dt=0.02,
    m_dt=0.05,
)

I6 = mandel.IDENTITY6


def _iso_quadratic(bulk, shear, t6):
    tr = mandel.trace6(t6)
    dev = mandel.deviator6(t6)
    return ((tr * tr) * bulk + ad.vdot(dev, dev) * (2.0 * shear)) * 0.5


@dataclasses.dataclass
class QuadraticModel:
    """Isotropic quadratic potentials; constant viscosity."""

    k_eq: np.ndarray
    g_eq: np.ndarray
    k_ov: np.ndarray
    g_ov: np.ndarray
    eta_k: np.ndarray
    eta_d: np.ndarray

    def free_energy_eq(self, eps6):
        return _iso_quadratic(self.k_eq, self.g_eq, eps6)

    def free_energy_ov(self, epsel6):
        return _iso_quadratic(self.k_ov, self.g_ov, epsel6)

    def dissipation(self, qdot6, epsel6):
        return _iso_quadratic(self.eta_k, self.eta_d, qdot6)


def quadratic_model():
    return QuadraticModel(
        k_eq=np.asarray(500.0),
        g_eq=np.asarray(300.0),
        k_ov=np.asarray(1000.0),
        g_ov=np.asarray(700.0),
        eta_k=np.asarray(400.0),
        eta_d=np.asarray(200.0),
    )


def quadratic_matrices(m):
    c_eq = iso_matrix(float(m.k_eq), float(m.g_eq))
    c_ov = iso_matrix(float(m.k_ov), float(m.g_ov))
    v0 = iso_matrix(float(m.eta_k), float(m.eta_d))
    return c_eq, c_ov, v0


class TestQuadraticOracle:
    def test_single_step_matches_closed_form(self):
        rng = np.random.default_rng(7)
        model = quadratic_model()
        c_eq, c_ov, v0 = quadratic_matrices(model)
        for _ in range(10):
            eps_new = rng.normal(0.0, 0.01, 6)
            q_prev = rng.normal(0.0, 0.004, 6)
            dt = float(rng.uniform(0.02, 0.2))
            raw = solver.step_raw(model, eps_new, q_prev, dt)
            expected = np.linalg.solve(v0 + dt * c_ov, c_ov @ (eps_new - q_prev))
            err = np.linalg.norm(raw.qdot - expected) / np.linalg.norm(expected)
            assert err < 1e-9
            assert raw.iterations == 1
            assert raw.converged

    def test_stress_assembly(self):
        rng = np.random.default_rng(8)
        model = quadratic_model()
        c_eq, c_ov, v0 = quadratic_matrices(model)
        eps_new = rng.normal(0.0, 0.01, 6)
        q_prev = rng.normal(0.0, 0.004, 6)
        raw = solver.step_raw(model, eps_new, q_prev, 0.05)
        q_new = np.asarray(ad.val_of(raw.q))
        expected = c_eq @ eps_new + c_ov @ (eps_new - q_new)
        assert np.linalg.norm(raw.sig - expected) < 1e-9 * np.linalg.norm(expected)

    def test_sequence_matches_matrix_recursion(self):
        rng = np.random.default_rng(9)
        model = quadratic_model()
        c_eq, c_ov, v0 = quadratic_matrices(model)
        n = 40
        t = np.concatenate([[0.0], np.cumsum(rng.uniform(0.03, 0.07, n))])
        eps = np.zeros((n + 1, 6))
        eps[1:] = np.cumsum(rng.normal(0.0, 0.002, (n, 6)), axis=0)
        states = solver.predict_sequence(model, t, eps)
        assert len(states) == n + 1
        q = np.zeros(6)
        for k in range(1, n + 1):
            dt = t[k] - t[k - 1]
            qdot = np.linalg.solve(v0 + dt * c_ov, c_ov @ (eps[k] - q))
            q = q + dt * qdot
            sig = c_eq @ eps[k] + c_ov @ (eps[k] - q)
            assert np.allclose(states[k].q.m, q, rtol=1e-9, atol=1e-14)
            assert np.allclose(states[k].sig.m, sig, rtol=1e-9, atol=1e-12)

    def test_deviatoric_relaxation_first_order_in_dt(self):
        # exact solution of qdot = lam (f(t) - q) for f(t) = A sin(w t),
        # along a trace-free direction so only the shear pair acts
        model = quadratic_model()
        lam = float(model.g_ov) / float(model.eta_d)
        amp, omega, horizon = 0.015, 2.0, 2.0
        direction = np.array([1.0, -1.0, 0.0, 0.0, 0.0, 0.0]) / np.sqrt(2.0)

        def exact_q(t):
            c = amp * lam / (lam**2 + omega**2)
            return c * (
                lam * np.sin(omega * t)
                - omega * np.cos(omega * t)
                + omega * np.exp(-lam * t)
            )

        def exact_sig(t):
            e = amp * np.sin(omega * t)
            return 2.0 * float(model.g_eq) * e + 2.0 * float(model.g_ov) * (
                e - exact_q(t)
            )

        errors = []
        for n_steps in (20, 40, 80):
            t = np.linspace(0.0, horizon, n_steps + 1)
            eps = amp * np.sin(omega * t)[:, None] * direction
            states = solver.predict_sequence(model, t, eps)
            sig_end = states[-1].sig.m @ direction
            errors.append(abs(sig_end - exact_sig(horizon)))
        order = np.log2(errors[0] / errors[2]) / 2.0
        assert order > 0.9
        assert errors[1] < errors[0]
        assert errors[2] < errors[1]


class TestRestState:
    @pytest.mark.parametrize("mode", ["invariant", "coordinate"])
    def test_zero_strain_step_stays_at_rest(self, mode):
        model = build_model(mode, NORM, seed=3)
        res = solver.step(model, MaterialState.rest(), SymTensor2.zero(), 0.05)
        assert res.converged
        assert res.iterations == 0
        assert np.all(res.state.q.m == 0.0)
        assert np.linalg.norm(res.state.sig.m) <= 1e-12 * NORM.s_sig
        assert res.state.t == pytest.approx(0.05)

    def test_zero_path_sequence(self):
        model = build_model("invariant", NORM, seed=3)
        t = np.linspace(0.0, 2.0, 11)
        states = solver.predict_sequence(model, t, np.zeros((11, 6)))
        assert len(states) == 11
        for s in states:
            assert np.linalg.norm(s.sig.m) <= 1e-12 * NORM.s_sig
            assert np.all(s.q.m == 0.0)


@pytest.fixture(scope="module", params=["invariant", "coordinate"])
def net_model(request):
    return build_model(request.param, NORM, seed=11)


def smooth_path():
    t = np.linspace(0.0, 3.0, 61)
    eps = np.zeros((61, 6))
    eps[:, 0] = 0.012 * np.sin(1.7 * t)
    eps[:, 5] = 0.008 * np.sin(2.3 * t)
    return t, eps


class TestNetworkModelStepping:
    def test_path_converges_and_is_finite(self, net_model):
        t, eps = smooth_path()
        states = solver.predict_sequence(net_model, t, eps)
        sig = solver.stresses_of(states)
        assert np.all(np.isfinite(sig))
        assert np.all(np.isfinite(np.stack([s.q.m for s in states])))

    def test_per_step_dissipation_non_negative(self, net_model):
        t, eps = smooth_path()
        states = solver.predict_sequence(net_model, t, eps)
        for prev, cur in zip(states, states[1:]):
            dt = cur.t - prev.t
            qdot = (cur.q - prev.q) * (1.0 / dt)
            force = internal_force_phi(net_model, qdot, cur.eps, cur.q)
            rate = force.dot(qdot)
            scale = force.norm() * qdot.norm() + 1e-30
            assert rate >= -1e-9 * scale

    def test_bitwise_deterministic(self, net_model):
        t, eps = smooth_path()
        a = solver.stresses_of(solver.predict_sequence(net_model, t, eps))
        b = solver.stresses_of(solver.predict_sequence(net_model, t, eps))
        assert np.array_equal(a, b)

    def test_converged_residual_below_tolerance(self, net_model):
        eps = SymTensor2(np.array([0.008, -0.003, 0.001, 0.0, 0.0, 0.004]))
        res = solver.step(net_model, MaterialState.rest(), eps, 0.05)
        assert res.converged
        assert res.residual_norm <= solver.resolve_tolerance(net_model, SolverConfig())


class TestGradientThroughStep:
    def test_matches_finite_differences(self):
        eps_new = np.array([0.012, -0.004, 0.002, 0.0, 0.003, -0.006])
        q_prev = np.array([0.002, 0.001, -0.001, 0.0, 0.0, 0.002])
        dt = 0.05

        def loss(m):
            raw = solver.step_raw(m, eps_new, q_prev, dt)
            return ad.vdot(raw.sig, np.arange(1.0, 7.0))

        model = quadratic_model()
        value, grads = ad.grad_params(loss, model)
        for field in ("g_ov", "eta_d", "k_eq"):
            h = 1e-4 * float(getattr(model, field))
            up = dataclasses.replace(
                model, **{field: np.asarray(float(getattr(model, field)) + h)}
            )
            dn = dataclasses.replace(
                model, **{field: np.asarray(float(getattr(model, field)) - h)}
            )
            fd = (loss(up) - loss(dn)) / (2.0 * h)
            grad = float(getattr(grads, field))
            assert grad == pytest.approx(fd, rel=1e-6)


@dataclasses.dataclass
class FlatOverstressModel:
    """Linear overstress energy and no dissipation: the Newton matrix is
    identically singular while the residual stays away from zero."""

    slope: np.ndarray

    def free_energy_eq(self, eps6):
        return mandel.trace6(eps6) * 0.0

    def free_energy_ov(self, epsel6):
        return mandel.trace6(epsel6) * self.slope

    def dissipation(self, qdot6, epsel6):
        return mandel.trace6(qdot6) * 0.0


class TestFailureModes:
    def test_non_convergence_reports_best_iterate(self):
        model = build_model("invariant", NORM, seed=11)
        cfg = SolverConfig(tolerance=1e-300, max_iterations=3)
        eps = np.array([0.015, -0.006, 0.002, 0.0, 0.004, -0.008])
        with pytest.raises(SolverError) as err:
            solver.step_raw(model, eps, np.zeros(6), 0.05, cfg)
        assert err.value.iterations == 3
        assert np.isfinite(err.value.residual_norm)
        assert err.value.best_qdot.shape == (6,)
        assert np.all(np.isfinite(err.value.best_qdot))

    def test_sequence_failure_carries_step_index(self):
        model = build_model("invariant", NORM, seed=11)
        cfg = SolverConfig(tolerance=1e-300, max_iterations=2)
        t = np.array([0.0, 0.05, 0.10])
        eps = np.zeros((3, 6))
        eps[1, 0] = 0.01
        eps[2, 0] = 0.02
        with pytest.raises(SolverError) as err:
            solver.predict_sequence(model, t, eps, cfg)
        assert err.value.step_index == 1
        assert "step 1" in str(err.value)

    def test_singular_newton_matrix_is_reported(self):
        model = FlatOverstressModel(slope=np.asarray(4.0))
        with pytest.raises(SolverError) as err:
            solver.step_raw(model, 0.01 * I6, np.zeros(6), 0.05)
        assert np.all(np.isfinite(err.value.best_qdot))

    def test_non_positive_dt_rejected(self):
        model = quadratic_model()
        with pytest.raises(ValueError):
            solver.step_raw(model, np.zeros(6), np.zeros(6), 0.0)
        with pytest.raises(ValueError):
            solver.step_raw(model, np.zeros(6), np.zeros(6), -0.1)

    def test_path_validation(self):
        model = quadratic_model()
        with pytest.raises(ValueError, match="strictly increasing"):
            solver.predict_sequence(
                model, np.array([0.0, 0.1, 0.1]), np.zeros((3, 6))
            )
        with pytest.raises(ValueError, match="rest state"):
            eps = np.zeros((3, 6))
            eps[0, 0] = 0.01
            solver.predict_sequence(model, np.array([0.0, 0.1, 0.2]), eps)
        with pytest.raises(ValueError, match="shape"):
            solver.predict_sequence(model, np.array([0.0, 0.1]), np.zeros((3, 6)))


class TestConfigValidation:
    def test_bad_values_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(tolerance=0.0)
        with pytest.raises(ValueError):
            SolverConfig(max_iterations=0)
        with pytest.raises(ValueError):
            SolverConfig(shrink=1.0)
        with pytest.raises(ValueError):
            SolverConfig(max_backtracks=-1)

    def test_default_tolerance_uses_stress_scale(self):
        model = build_model("invariant", NORM, seed=0)
        assert solver.resolve_tolerance(model, SolverConfig()) == pytest.approx(
            1e-8 * NORM.s_sig
        )
        assert solver.resolve_tolerance(
            quadratic_model(), SolverConfig()
        ) == pytest.approx(1e-8)
        assert solver.resolve_tolerance(
            quadratic_model(), SolverConfig(tolerance=0.5)
        ) == pytest.approx(0.5)

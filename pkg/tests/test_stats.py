"""Accumulators, pooled statistics and the bound chain."""
import math
import warnings
import pytest

import oracles
from conftest import rel, shear
from lssm.dynamics import FlowParams, ForcingSpec, forcing_field
from lssm.errors import DataCorruptionError, ParameterError, UndefinedStatisticsError
from lssm.field import Grid
from lssm.integrate import DtPolicy, InitSpec, RunSetup, SimState, StepRecord, run_trajectory
from lssm.noise import NoiseSpec
from lssm.stats import (
    FiniteHorizon,
    Statistics,
    StatsAccumulator,
    accumulate,
    b2_rhs,
    bound_check,
    concat,
    finalize,
    finalize_many,
    forcing_length_candidates,
    forcing_scales,
    stderr,
)


def record(**kw):
    base = dict(t=0.0, dt=0.1, ke_pre=1.0, ke_post=1.0, grad_l2_sq=0.0, grad_lr_r=0.0, trace_gg=0.0,
                f_dot_u=0.0, noise_dot_u=0.0, noise_sq=0.0, div_residual=0.0)
    base.update(kw)
    return StepRecord(**base)


def stokes_run(F0=0.1, nu=0.1, n=16, T=2.0):
    g = Grid(n)
    p = FlowParams(nu, 0.0, 2, ForcingSpec.single_mode((0, 1, 0), (F0, 0, 0)))
    su = RunSetup(g, p, NoiseSpec.off(g), DtPolicy("fixed", 0.25), T)
    rep = run_trajectory(su, start=SimState(shear(g, F0 / nu)))
    return su, rep


def noisy_acc(sigma0, T=0.5):
    g = Grid(16)
    p = FlowParams(0.1, 0.05, 3, ForcingSpec.single_mode((0, 1, 0), (0.1, 0, 0)))
    su = RunSetup(g, p, NoiseSpec.power_law(g, sigma0), DtPolicy("fixed", 0.05), T,
                  init=InitSpec("random", energy=1.0))
    return su, run_trajectory(su, 4, 0).acc


class TestAccumulator:
    def test_rectangle_rule(self):
        acc = accumulate(StatsAccumulator(), record(dt=0.5, grad_l2_sq=2.0))
        assert acc.int_grad_l2_sq == 1.0 and acc.elapsed == 0.5

    def test_boundary_terms(self):
        acc = StatsAccumulator()
        accumulate(acc, record(t=1.0, ke_pre=3.0, ke_post=4.0))
        accumulate(acc, record(t=1.1, ke_pre=4.0, ke_post=6.0))
        assert (acc.boundary_ke_start, acc.boundary_ke_end) == (3.0, 6.0)
        assert acc.t_start == 1.0 and acc.t_end == pytest.approx(1.2)

    def test_rejects_non_finite(self):
        with pytest.raises(DataCorruptionError):
            accumulate(StatsAccumulator(), record(grad_l2_sq=math.nan))

    def test_concat_matches_single_window(self):
        su, _ = noisy_acc(0.05)
        rep = run_trajectory(su, 4, 0)
        a, b = StatsAccumulator(), StatsAccumulator()
        for r in rep.records[:4]:
            accumulate(a, r)
        for r in rep.records[4:]:
            accumulate(b, r)
        joined = concat(a, b)
        for name, v in rep.acc.to_dict().items():
            assert joined.to_dict()[name] == pytest.approx(v, rel=1e-12, abs=1e-300)

    def test_concat_identity(self):
        _, acc = noisy_acc(0.05)
        assert concat(StatsAccumulator(), acc) == acc
        assert concat(acc, StatsAccumulator()) == acc

    def test_dict_round_trip(self):
        _, acc = noisy_acc(0.05)
        assert StatsAccumulator.from_dict(acc.to_dict()) == acc


class TestForcingScales:
    @pytest.mark.parametrize("r", [2, 3])
    def test_shear_candidates(self, r):
        g = Grid(32)
        F0 = 0.4
        f = forcing_field(ForcingSpec.single_mode((0, 1, 0), (F0, 0, 0)), g)
        F, want = oracles.shear_forcing_scales(F0, r)
        got = forcing_length_candidates(f, g, r)
        assert rel(forcing_scales(f, g, r)[0], F) <= 1e-12
        for i in (0, 1, 3):
            assert rel(got[i], want[i]) <= 1e-12
        # the L^r candidate carries the collocation error of |cos|^r for odd r
        assert rel(got[2], want[2]) <= (1e-12 if r == 2 else 1e-3)
        assert forcing_scales(f, g, r)[1] == pytest.approx(1 / math.sqrt(2), rel=1e-12)

    def test_amplitude_invariance_of_length(self, grid16):
        f = forcing_field(ForcingSpec(modes=(((0, 1, 0), (1.0, 0, 0), "sin"), ((1, 0, 1), (0, 0.7, 0), "cos"))), grid16)
        F1, L1 = forcing_scales(f, grid16, 3)
        F2, L2 = forcing_scales(7.0 * f, grid16, 3)
        assert rel(F2, 7 * F1) <= 1e-12 and rel(L2, L1) <= 1e-12

    def test_zero_force(self, grid16):
        f = forcing_field(ForcingSpec(), grid16)
        with pytest.warns(UserWarning):
            assert forcing_scales(f, grid16, 3) == (0.0, grid16.ell)


class TestSteadyStokes:
    def test_statistics(self):
        su, rep = stokes_run()
        st = finalize(rep.acc, su.params, su.noise, su.grid)
        ref = oracles.steady_stokes(0.1, 0.1)
        for key in ("eps", "U", "F", "L", "Re_nu"):
            assert rel(getattr(st, key), ref[key]) <= 1e-10, key
        assert st.epsM == 0.0 and st.G2 == 0.0 and st.tau == 0.0
        assert st.Re_nubar == math.inf

    def test_bound_chain(self):
        su, rep = stokes_run()
        st = finalize(rep.acc, su.params, su.noise, su.grid)
        br = bound_check(st, su.params, FiniteHorizon.from_accumulators([rep.acc], su.grid))
        assert abs(br.residual_B1) <= 1e-8
        assert br.passed
        assert rel(br.ratio_B3, oracles.steady_stokes(0.1, 0.1)["ratio_B3"]) <= 1e-10
        assert rel(br.ratio_B3, 1 / 12) <= 1e-10

    def test_reynolds_similarity(self):
        """``(F0, nu) -> (4 F0, 2 nu)`` keeps ``U L / nu`` and hence ``ratio_B3``."""
        out = []
        for F0, nu in ((0.1, 0.1), (0.4, 0.2)):
            su, rep = stokes_run(F0, nu)
            st = finalize(rep.acc, su.params, su.noise, su.grid)
            out.append((st.Re_nu, bound_check(st, su.params).ratio_B3))
        assert rel(out[1][0], out[0][0]) <= 1e-10
        assert rel(out[1][1], out[0][1]) <= 1e-10


class TestDimensionalConsistency:
    def test_rescaled_units(self):
        """``x -> lam x``, ``t -> mu t`` with matched parameters leaves the dimensionless groups fixed."""
        lam, mu, r = 1.7, 0.6, 3.0
        nu, nu_bar, F0, e0, dt, T = 0.1, 0.05, 0.3, 2.0, 0.02, 1.0

        def stats(scale_x, scale_t):
            g = Grid(16, 2 * math.pi * scale_x)
            p = FlowParams(nu * scale_x**2 / scale_t, nu_bar * scale_x**2 * scale_t ** (r - 3), r,
                           ForcingSpec.single_mode((0, 1, 0), (F0 * scale_x / scale_t**2, 0, 0)))
            su = RunSetup(g, p, NoiseSpec.off(g), DtPolicy("fixed", dt * scale_t), T * scale_t, 0.2 * scale_t,
                          InitSpec("random", energy=e0 * scale_x**5 / scale_t**2, kmax=2))
            acc = run_trajectory(su, 6, 0, keep_records=False).acc
            # multiplicative-type rho has units 1/time
            ns = NoiseSpec.power_law(g, 0.05 / math.sqrt(scale_t), mode="multiplicative")
            st = finalize(acc, p, ns, g)
            return st, bound_check(st, p).ratio_B3

        (a, ra), (b, rb) = stats(1.0, 1.0), stats(lam, mu)
        for key in ("Re_nu", "Re_nubar", "tau"):
            assert rel(getattr(b, key), getattr(a, key)) <= 1e-8, key
        assert rel(rb, ra) <= 1e-8
        assert rel(b.eps, a.eps * lam**2 / mu**3) <= 1e-8


class TestFinalize:
    def test_needs_positive_window(self, grid16):
        with pytest.raises(UndefinedStatisticsError):
            finalize(StatsAccumulator(), FlowParams(0.1), NoiseSpec.off(grid16), grid16)

    def test_zero_trajectory(self, grid16):
        p = FlowParams(0.1, 0.05, 3)
        su = RunSetup(grid16, p, NoiseSpec.off(grid16), DtPolicy("fixed", 0.1), 1.0)
        rep = run_trajectory(su)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            st = finalize(rep.acc, p, su.noise, grid16)
        assert (st.eps, st.U, st.F, st.G2) == (0.0, 0.0, 0.0, 0.0)
        br = bound_check(st, p)
        assert br.passed and br.residual_B1 == 0.0 and math.isnan(br.ratio_B3)

    def test_re_nubar_at_r3(self, grid16):
        _, rep = stokes_run()
        g = Grid(16)
        p = FlowParams(0.1, 0.05, 3, ForcingSpec.single_mode((0, 1, 0), (0.1, 0, 0)))
        st = finalize(rep.acc, p, NoiseSpec.off(g), g)
        assert rel(st.Re_nubar, st.L**2 / 0.05) <= 1e-12

    def test_g2_scales_with_noise_variance(self):
        su1, a1 = noisy_acc(0.05)
        su2, a2 = noisy_acc(0.1)
        g1 = finalize(a1, su1.params, su1.noise, su1.grid).G2
        g2 = finalize(a2, su2.params, su2.noise, su2.grid).G2
        assert g1 > 0 and rel(g2, 4 * g1) <= 1e-12

    def test_expectation_before_root(self):
        su, _ = noisy_acc(0.05)
        a = StatsAccumulator(elapsed=1.0, int_ke=1.0 * su.grid.volume, steps=1)
        b = StatsAccumulator(elapsed=1.0, int_ke=9.0 * su.grid.volume, steps=1)
        st = finalize_many([a, b], su.params, su.noise, su.grid)
        assert rel(st.U, math.sqrt(5.0)) <= 1e-12

    def test_stderr(self):
        assert stderr([1.0]) == 0.0
        assert stderr([1.0, 3.0]) == pytest.approx(1.0)


class TestBoundCheck:
    def _st(self, **kw):
        base = dict(eps0=0.1, epsM=0.05, eps=0.15, U=1.0, F=0.2, L=0.7, G2=0.02, Re_nu=7.0, Re_nubar=20.0,
                    tau=0.1, T=10.0, T0=1.0)
        base.update(kw)
        return Statistics(**base)

    def test_undefined_at_zero_velocity(self):
        with pytest.raises(UndefinedStatisticsError):
            bound_check(self._st(U=0.0), FlowParams(0.1, 0.05, 3))

    def test_tolerances_positive(self):
        with pytest.raises(ParameterError):
            bound_check(self._st(), FlowParams(0.1, 0.05, 3), tol_B1=0.0)

    def test_b2_variants(self):
        st = self._st()
        p = FlowParams(0.1, 0.05, 3)
        diff = b2_rhs(st, p, "nu") - b2_rhs(st, p, "nu_bar")
        assert diff == pytest.approx((0.1 - 0.05) * st.U**2 / (3 * st.L**3), rel=1e-12)
        with pytest.raises(ParameterError):
            b2_rhs(st, p, "both")

    def test_b1_residual_formula(self):
        st = self._st()
        br = bound_check(st, FlowParams(0.1, 0.05, 3), FiniteHorizon(energy=0.01))
        assert br.residual_B1 == pytest.approx(0.5 * 0.02 + 0.2 - 0.15 - 0.01, rel=1e-12)

    def test_ratio_cap(self):
        st = self._st(eps=100.0)
        assert not bound_check(st, FlowParams(0.1, 0.05, 3), ratio_cap=4.0).pass_B3

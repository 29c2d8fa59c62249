"""Time stepping, step-size control, trajectory driver and record I/O."""
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import rel, shear
from lssm.audit import step_identity_error
from lssm.checkpoint import Checkpoint, decode, encode
from lssm.dynamics import FlowParams, ForcingSpec
from lssm.errors import ParameterError
from lssm.field import Grid, SpectralVelocity, norm_l2_sq
from lssm.integrate import (
    CSV_COLUMNS,
    DtPolicy,
    InitSpec,
    RunSetup,
    SimState,
    dt_candidates,
    initial_field,
    read_records_csv,
    run_trajectory,
    stable_dt,
    step,
    write_records_csv,
)
from lssm.noise import NoiseSpec


def noisy_setup(T=0.5, n=16, mode="additive"):
    g = Grid(n)
    p = FlowParams(0.1, 0.05, 3, ForcingSpec.single_mode((0, 1, 0), (0.2, 0, 0)))
    ns = NoiseSpec.power_law(g, 0.05, mode=mode)
    return RunSetup(g, p, ns, DtPolicy("fixed", 0.05), T, init=InitSpec("random", energy=1.0, kmax=2))


class TestStepSize:
    def test_advective_candidate(self, grid32):
        p = FlowParams(0.1)
        c = dt_candidates(grid32, p, DtPolicy("cfl", 1.0, c_adv=0.5), 1.0, 1.0)
        assert c["advective"] == pytest.approx(0.5 * (2 * math.pi / 32), rel=1e-9)
        assert c["advective"] == pytest.approx(0.0982, abs=5e-5)
        assert c["viscous"] == math.inf

    def test_power_law_candidate_only_for_r_above_two(self, grid16):
        pol = DtPolicy("cfl", 1.0)
        assert dt_candidates(grid16, FlowParams(0.1, 0.05, 2), pol, 1.0, 1.0)["viscous"] == math.inf
        assert dt_candidates(grid16, FlowParams(0.1, 0.05, 3), pol, 1.0, 1.0)["viscous"] < math.inf

    def test_zero_state_takes_dt_max(self, grid16):
        s = SimState(SpectralVelocity.zeros(grid16))
        assert stable_dt(s, FlowParams(0.1, 0.05, 3), DtPolicy("cfl", 0.07)) == 0.07

    def test_fixed(self, grid16):
        s = SimState(shear(grid16, 100.0))
        assert stable_dt(s, FlowParams(0.1), DtPolicy("fixed", 0.3)) == 0.3

    @pytest.mark.parametrize("kw", [dict(kind="adaptive"), dict(dt_max=0.0), dict(dt_max=-1.0)])
    def test_invalid_policy(self, kw):
        with pytest.raises(ParameterError):
            DtPolicy(**kw)


class TestStep:
    def test_zero_state_stays_zero(self, grid16):
        s = SimState(SpectralVelocity.zeros(grid16))
        s2, rec = step(s, FlowParams(0.1, 0.05, 3), NoiseSpec.off(grid16), 0.1)
        assert np.max(np.abs(s2.u.coeffs)) == 0.0
        assert rec.ke_post == 0.0 and rec.noise_sq == 0.0

    @pytest.mark.parametrize("dt", [1e-3, 0.1, 2.0])
    def test_single_mode_decay_is_exact(self, grid16, dt):
        nu = 0.3
        s = SimState(shear(grid16, 1.5))
        s2, rec = step(s, FlowParams(nu), NoiseSpec.off(grid16), dt)
        assert rel(rec.ke_post, rec.ke_pre * math.exp(-2 * nu * dt)) <= 1e-12
        np.testing.assert_allclose(s2.u.coeffs, math.exp(-nu * dt) * s.u.coeffs, atol=1e-15)

    def test_steady_stokes_is_a_fixed_point(self, grid16):
        F0, nu = 0.1, 0.1
        p = FlowParams(nu, 0.0, 2, ForcingSpec.single_mode((0, 1, 0), (F0, 0, 0)))
        u = shear(grid16, F0 / nu)
        s2, _ = step(SimState(u), p, NoiseSpec.off(grid16), 0.5)
        assert np.max(np.abs(s2.u.coeffs - u.coeffs)) <= 1e-14

    @pytest.mark.parametrize("dt", [0.0, -0.1, math.nan, math.inf])
    def test_rejects_bad_dt(self, grid16, dt):
        with pytest.raises(ParameterError):
            step(SimState(shear(grid16)), FlowParams(0.1), NoiseSpec.off(grid16), dt)

    @pytest.mark.parametrize("mode", ["additive", "multiplicative"])
    def test_discrete_energy_identity(self, mode):
        su = noisy_setup(mode=mode)
        rep = run_trajectory(su, 3, 0)
        assert rep.valid and len(rep.records) == 10
        assert max(step_identity_error(r) for r in rep.records) <= 1e-12

    def test_output_is_solenoidal(self):
        rep = run_trajectory(noisy_setup(), 1, 0)
        assert rep.max_div_residual <= 1e-12
        rep.final.u.check()


class TestTrajectory:
    def test_deterministic(self):
        a = run_trajectory(noisy_setup(), 5, 2)
        b = run_trajectory(noisy_setup(), 5, 2)
        np.testing.assert_array_equal(a.final.u.coeffs, b.final.u.coeffs)
        assert a.acc == b.acc

    def test_indices_are_independent(self):
        a = run_trajectory(noisy_setup(), 5, 0)
        b = run_trajectory(noisy_setup(), 5, 1)
        assert not np.array_equal(a.final.u.coeffs, b.final.u.coeffs)

    def test_restart_is_bitwise(self):
        su = noisy_setup(T=1.0)
        saved = []
        full = run_trajectory(su, 9, 0, checkpoint_every=8,
                              on_checkpoint=lambda s: saved.append(encode(Checkpoint(s.u, s.t, s.step_index, s.rng))))
        ck = decode(saved[0])
        assert ck.step == 8
        rest = run_trajectory(su, 9, 0, start=SimState(ck.u, ck.t, ck.step, ck.rng))
        np.testing.assert_array_equal(rest.final.u.coeffs, full.final.u.coeffs)
        assert rest.final.t == full.final.t
        assert [r.ke_post for r in rest.records] == [r.ke_post for r in full.records[8:]]

    def test_zero_horizon(self):
        rep = run_trajectory(replace(noisy_setup(), T=0.0), 0, 0)
        assert rep.valid and rep.records == [] and rep.acc.elapsed == 0.0
        assert rep.final.t == 0.0

    def test_burn_in_window(self):
        su = replace(noisy_setup(T=0.5), burn_in=0.2)
        rep = run_trajectory(su, 0, 0)
        assert rep.acc_raw.elapsed == pytest.approx(0.5)
        assert rep.acc.elapsed == pytest.approx(0.3)
        assert rep.acc.t_start == pytest.approx(0.2)

    def test_blow_up_is_reported(self):
        g = Grid(16)
        p = FlowParams(1e-3, 0.0, 2)
        su = RunSetup(g, p, NoiseSpec.off(g), DtPolicy("fixed", 50.0), 1000.0,
                      init=InitSpec("random", energy=1e6, kmax=5))
        rep = run_trajectory(su, 0, 0)
        assert not rep.valid and rep.error

    def test_ke_series(self):
        rep = run_trajectory(noisy_setup(), 0, 0)
        t, ke = rep.ke_series()
        assert t[0] == 0.0 and t[-1] == pytest.approx(0.5)
        assert len(ke) == len(rep.records) + 1


class TestInit:
    def test_random_energy(self, grid16):
        u = initial_field(InitSpec("random", energy=2.5, kmax=2), grid16, 1, 3)
        assert rel(norm_l2_sq(u), 2.5) <= 1e-12
        u.check()

    def test_random_depends_on_index(self, grid16):
        a = initial_field(InitSpec("random", energy=1.0), grid16, 1, 0)
        b = initial_field(InitSpec("random", energy=1.0), grid16, 1, 1)
        assert not np.array_equal(a.coeffs, b.coeffs)

    def test_mode_is_projected(self, grid16):
        u = initial_field(InitSpec("mode", modes=(((1, 0, 0), (1.0, 1.0, 0), "sin"),)), grid16)
        u.check()

    @pytest.mark.parametrize("kw", [dict(kind="vortex"), dict(kind="random", energy=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            InitSpec(**kw)


class TestCsv:
    def test_round_trip(self, tmp_path):
        rep = run_trajectory(noisy_setup(), 0, 0)
        path = tmp_path / "r.csv"
        write_records_csv(path, rep.records, {"config_hash": "abc", "version": "0.1.0"})
        assert path.read_text().splitlines()[1] == ",".join(CSV_COLUMNS)
        back = read_records_csv(path, final_ke=rep.records[-1].ke_post)
        for a, b in zip(rep.records, back):
            assert a.csv_row() == b.csv_row()
            assert a.ke_post == b.ke_post

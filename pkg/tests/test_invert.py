import numpy as np
import pytest

from speckleflow.elastic import LameField, MU_FLOOR
from speckleflow.errors import DomainError, ShapeMismatch
from speckleflow.grids import VectorGrid
from speckleflow.invert import (InversionConfig, IterationTrace,
                                boundary_band_mask, field_error, landweber_step,
                                nesterov_alpha, nesterov_iterate,
                                read_trace_csv, stop_discrepancy,
                                stop_heuristic, write_trace_csv)
from speckleflow.phantom import PhantomSpec, make_inclusion_phantom


def small_phantom(seed=0, n=24):
    spec = PhantomSpec(kind="inclusion", nx=n, ny=n, bubble_count=3,
                       bubble_sigma_min=1.0, bubble_sigma_max=1.3,
                       compression_px=2.0, inclusion_radius=n / 6.0,
                       seed=seed, margin=3)
    return make_inclusion_phantom(spec)


class TestLandweberStep:
    def test_fixed_point_at_exact_data(self):
        lame, bc, u_true, *_ = small_phantom(1)
        cfg = InversionConfig(stopping="manual", manual_k=1)
        p0 = LameField(lame.lam.copy(), lame.mu.copy())
        out, omega, rnorm = landweber_step(p0, u_true, bc, cfg)
        assert rnorm <= 1e-9
        np.testing.assert_allclose(out.lam.data, p0.lam.data, atol=1e-8)
        np.testing.assert_allclose(out.mu.data, p0.mu.data, atol=1e-8)

    def test_first_step_reduces_residual(self):
        lame, bc, u_true, *_ = small_phantom(2)
        cfg = InversionConfig(lambda0=490.0, mu0=10.0, stopping="manual",
                              manual_k=1, boundary_mask=None)
        p0 = cfg.initial_for(u_true.nx, u_true.ny)
        p1, omega, r0 = landweber_step(p0, u_true, bc, cfg)
        assert omega > 0
        _, _, r1 = landweber_step(p1, u_true, bc, cfg)
        assert r1 < r0

    def test_masked_pixels_bit_identical(self):
        lame, bc, u_true, *_ = small_phantom(3)
        n = u_true.nx
        mask = boundary_band_mask(n, n, 3)
        cfg = InversionConfig(lambda0=490.0, mu0=10.0, boundary_mask=mask,
                              stopping="manual", manual_k=1)
        p = cfg.initial_for(n, n)
        frozen = mask.data.astype(bool)
        lam0 = p.lam.data.copy()
        mu0 = p.mu.data.copy()
        for _ in range(10):
            p, _, _ = landweber_step(p, u_true, bc, cfg)
        np.testing.assert_array_equal(p.lam.data[frozen], lam0[frozen])
        np.testing.assert_array_equal(p.mu.data[frozen], mu0[frozen])

    def test_iterates_stay_admissible(self):
        lame, bc, u_true, *_ = small_phantom(4)
        cfg = InversionConfig(lambda0=1.0, mu0=1.0, stepsize="constant",
                              omega=50.0, stopping="manual", manual_k=1)
        p = cfg.initial_for(u_true.nx, u_true.ny)
        for _ in range(5):
            p, _, _ = landweber_step(p, u_true, bc, cfg)
            assert np.all(p.lam.data >= 0.0)
            assert np.all(p.mu.data >= MU_FLOOR)


class TestNesterov:
    def test_alpha_values(self):
        assert nesterov_alpha(1) == 0.0
        assert nesterov_alpha(8) == pytest.approx(0.7, abs=1e-15)
        assert nesterov_alpha(2) == pytest.approx(0.25, abs=1e-15)

    def test_first_accelerated_step_is_plain(self):
        lame, bc, u_true, *_ = small_phantom(5)
        n = u_true.nx
        cfg_acc = InversionConfig(lambda0=490.0, mu0=10.0, acceleration=True,
                                  stopping="manual", manual_k=1, max_iter=1)
        cfg_plain = InversionConfig(lambda0=490.0, mu0=10.0, acceleration=False,
                                    stopping="manual", manual_k=1, max_iter=1)
        r_acc, _ = nesterov_iterate(cfg_acc, u_true, bc)
        r_plain, _ = nesterov_iterate(cfg_plain, u_true, bc)
        np.testing.assert_array_equal(r_acc.lam.data, r_plain.lam.data)
        np.testing.assert_array_equal(r_acc.mu.data, r_plain.mu.data)

    def test_acceleration_off_matches_reference_loop(self):
        for seed in range(5):
            lame, bc, u_true, *_ = small_phantom(seed + 10, n=16)
            n = u_true.nx
            steps = 6
            cfg = InversionConfig(lambda0=490.0, mu0=10.0, acceleration=False,
                                  stopping="manual", manual_k=steps,
                                  max_iter=steps)
            result, trace = nesterov_iterate(cfg, u_true, bc)

            p = cfg.initial_for(n, n)
            ref_res, ref_steps = [], []
            for _ in range(steps):
                p, omega, rnorm = landweber_step(p, u_true, bc, cfg)
                ref_res.append(rnorm)
                ref_steps.append(omega)
            np.testing.assert_allclose(trace.residuals[:steps], ref_res,
                                       rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(trace.stepsizes[:steps], ref_steps,
                                       rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(result.mu.data, p.mu.data,
                                       rtol=1e-12, atol=1e-12)

    def test_monotone_residuals_exact_data(self):
        # steepest descent on exact data: residual non-increasing
        for seed in range(5):
            lame, bc, u_true, *_ = small_phantom(seed + 20, n=16)
            cfg = InversionConfig(lambda0=490.0, mu0=10.0, acceleration=False,
                                  stopping="manual", manual_k=50, max_iter=50)
            _, trace = nesterov_iterate(cfg, u_true, bc)
            r = np.array(trace.residuals)
            assert np.all(r[1:] <= r[:-1] + 1e-9 * r[0])

    def test_discrepancy_stopping(self):
        lame, bc, u_true, *_ = small_phantom(6, n=16)
        cfg = InversionConfig(lambda0=490.0, mu0=10.0, tau=1.5, delta=0.05,
                              stopping="discrepancy", max_iter=100)
        result, trace = nesterov_iterate(cfg, u_true, bc)
        assert trace.stopped_by == "discrepancy"
        assert trace.residuals[trace.k_star] <= 1.5 * 0.05

    def test_max_iter_flag_and_best_so_far(self):
        lame, bc, u_true, *_ = small_phantom(7, n=16)
        cfg = InversionConfig(lambda0=490.0, mu0=10.0, tau=1.5, delta=1e-12,
                              stopping="discrepancy", max_iter=3)
        result, trace = nesterov_iterate(cfg, u_true, bc)
        assert trace.stopped_by == "max_iter"
        assert trace.k_star == int(np.argmin(trace.residuals))


class TestStoppingRules:
    def _trace(self, residuals, ks=None):
        t = IterationTrace()
        for i, r in enumerate(residuals):
            t.append(i if ks is None else ks[i], r, 1.0)
        return t

    def test_discrepancy_first_hit(self):
        t = self._trace([5.0, 3.0, 1.0])
        assert stop_discrepancy(t, tau=2.0, delta=1.0) == 2

    def test_discrepancy_none(self):
        t = self._trace([5.0, 3.0])
        assert stop_discrepancy(t, tau=1.1, delta=1.0) is None

    def test_discrepancy_zero_delta(self):
        t = self._trace([5.0, 0.0])
        assert stop_discrepancy(t, tau=1.5, delta=0.0) == 1

    def test_discrepancy_tau_validation(self):
        with pytest.raises(DomainError):
            stop_discrepancy(self._trace([1.0]), tau=1.0, delta=1.0)

    def test_heuristic_example(self):
        t = self._trace([10.0, 1.0, 1.0, 1.0], ks=[1, 2, 3, 4])
        assert stop_heuristic(t) == 2

    def test_heuristic_single_entry(self):
        t = self._trace([3.0], ks=[1])
        assert stop_heuristic(t) == 1

    def test_heuristic_constant_residuals(self):
        t = self._trace([2.0, 2.0, 2.0, 2.0], ks=[1, 2, 3, 4])
        assert stop_heuristic(t) == 1

    def test_heuristic_skips_k_zero(self):
        t = self._trace([0.5, 10.0, 9.0], ks=[0, 1, 2])
        assert stop_heuristic(t) == 1


class TestFieldError:
    def test_identical(self):
        u = VectorGrid(4, 4, np.random.default_rng(0).standard_normal((4, 4, 2)))
        assert field_error(u, u) == (0.0, 0.0, 0.0)

    def test_scaling(self):
        u = VectorGrid(4, 4, np.random.default_rng(1).standard_normal((4, 4, 2)))
        v = VectorGrid(4, 4, 1.1 * u.data)
        tot, ex, ey = field_error(v, u)
        assert tot == pytest.approx(0.1, rel=1e-12)
        assert ex == pytest.approx(0.1, rel=1e-12)

    def test_matches_hand_computed_norms(self):
        rng = np.random.default_rng(2)
        a = VectorGrid(5, 3, rng.standard_normal((3, 5, 2)))
        b = VectorGrid(5, 3, rng.standard_normal((3, 5, 2)))
        tot, ex, ey = field_error(a, b)
        d = a.data - b.data
        assert tot == pytest.approx(np.linalg.norm(d) / np.linalg.norm(b.data),
                                    rel=1e-12)
        assert ex == pytest.approx(np.linalg.norm(d[:, :, 0])
                                   / np.linalg.norm(b.data[:, :, 0]), rel=1e-12)

    def test_zero_truth_rejected(self):
        u = VectorGrid.zeros(3, 3)
        v = VectorGrid(3, 3, np.ones((3, 3, 2)))
        with pytest.raises(DomainError):
            field_error(v, u)

    def test_extent_mismatch(self):
        with pytest.raises(ShapeMismatch):
            field_error(VectorGrid.zeros(3, 3), VectorGrid.zeros(4, 3))


class TestConfigAndTrace:
    def test_config_parsing(self, tmp_path):
        path = tmp_path / "inv.cfg"
        path.write_text("tau = 1.5\ndelta = 0.1\nmax_iter = 50\n"
                        "acceleration = true\nstepsize = constant(2.5)\n"
                        "stopping = manual(12)\nlambda0 = 490\nmu0 = 10\n")
        cfg = InversionConfig.from_config(path)
        assert cfg.stepsize == "constant" and cfg.omega == 2.5
        assert cfg.stopping == "manual" and cfg.manual_k == 12
        assert cfg.acceleration is True

    def test_invalid_stepsize_rejected(self):
        with pytest.raises(DomainError):
            InversionConfig(stepsize="bogus")

    def test_tau_validation_for_discrepancy(self):
        with pytest.raises(DomainError):
            InversionConfig(stopping="discrepancy", tau=0.9)

    def test_trace_csv_roundtrip(self, tmp_path):
        t = IterationTrace()
        for k, r in enumerate([5.0, 3.0, 2.0]):
            t.append(k, r, 0.5 * (k + 1))
        path = tmp_path / "trace.csv"
        write_trace_csv(path, t)
        assert path.read_text().splitlines()[0] == "k,residual,stepsize,heuristic"
        back = read_trace_csv(path)
        assert back.ks == t.ks
        assert back.residuals == t.residuals
        assert back.stepsizes == t.stepsizes

    def test_printed_stepsize_variant_runs(self):
        lame, bc, u_true, *_ = small_phantom(8, n=16)
        cfg = InversionConfig(lambda0=490.0, mu0=10.0, stepsize="printed",
                              acceleration=False, stopping="manual",
                              manual_k=3, max_iter=3)
        result, trace = nesterov_iterate(cfg, u_true, bc)
        assert trace.residuals[1] < trace.residuals[0]

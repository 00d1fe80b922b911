import numpy as np
import pytest

from biphoton.jpd import Jpd, project_minus, project_sum
from biphoton.optics import MediumSpec, ModeGrid, TransferMatrix, dft_matrix, synth_medium
from biphoton.rng import substream
from biphoton.shaping import ShapingProblem, OptimizeResult, objective, optimize_masks, peak_to_background
from biphoton.states import PhaseMask, flat_mask


def diagonal_screen(grid, seed):
    phases = substream(seed, "screen").uniform(0.0, 2.0 * np.pi, grid.n_modes)
    return TransferMatrix(np.diag(np.exp(1j * phases)), grid, grid), phases


def projections_of(problem):
    chain = problem.chain()
    n = chain.shape[1]
    psi_pos = chain @ chain.T / np.sqrt(n)
    f = dft_matrix(problem.medium.out_grid).entries
    psi_mom = f @ psi_pos @ f.T
    h, w = problem.medium.out_grid.height, problem.medium.out_grid.width
    ppos = np.abs(psi_pos) ** 2
    pmom = np.abs(psi_mom) ** 2
    return (
        project_minus(Jpd(ppos / ppos.sum(), w, h, 1)),
        project_sum(Jpd(pmom / pmom.sum(), w, h, 1)),
    )


class TestObjective:
    def test_no_medium_flat_is_maximal(self):
        g = ModeGrid(8, 8, 120e-6)
        ident = TransferMatrix(np.eye(64, dtype=complex), g, g)
        base = objective(ShapingProblem(ident, flat_mask(g)))
        assert base == pytest.approx(2.0)
        rng = substream(1, "probe")
        worse = objective(ShapingProblem(ident, PhaseMask(rng.uniform(0, 2 * np.pi, 64), g)))
        assert worse <= base + 1e-12

    def test_thick_flat_baseline_is_speckle_level(self):
        vals = []
        for seed in range(6):
            g = ModeGrid(8, 8, 120e-6)
            t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=seed))
            vals.append(objective(ShapingProblem(t, flat_mask(g))))
        # raw speckle level ~ 2/n per term for 64 modes
        assert np.mean(vals) < 0.3

    def test_inverse_mask_reaches_closed_form(self):
        g = ModeGrid(8, 8, 120e-6)
        t, phases = diagonal_screen(g, 3)
        inverse = PhaseMask(-phases, g)
        assert objective(ShapingProblem(t, inverse)) == pytest.approx(2.0, abs=1e-9)

    def test_weights(self):
        g = ModeGrid(8, 8, 120e-6)
        t, phases = diagonal_screen(g, 3)
        inverse = PhaseMask(-phases, g)
        assert objective(ShapingProblem(t, inverse, weights=(1.0, 0.0))) == pytest.approx(1.0, abs=1e-9)


class TestOptimize:
    def test_thin_recovers_analytic_optimum(self):
        g = ModeGrid(8, 8, 120e-6)
        t, _ = diagonal_screen(g, 3)
        result = optimize_masks(ShapingProblem(t, flat_mask(g)), budget=64 * 16 * 4)
        assert result.trace[-1] > 0.95 * 2.0

    def test_trace_monotone_and_matches_direct(self):
        g = ModeGrid(8, 8, 120e-6)
        t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=6))
        result = optimize_masks(ShapingProblem(t, flat_mask(g)), budget=64 * 16 * 3)
        assert np.all(np.diff(result.trace) >= -1e-9 * np.abs(result.trace[:-1]))
        direct = objective(ShapingProblem(t, result.mask1))
        assert direct == pytest.approx(result.trace[-1], rel=1e-9)

    def test_two_plane_incremental_matches_direct(self):
        g = ModeGrid(6, 6, 120e-6)
        t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=2))
        problem = ShapingProblem(t, flat_mask(g), flat_mask(g), plane_distance=0.05)
        result = optimize_masks(problem, budget=36 * 16 * 6, max_passes=3)
        direct = objective(ShapingProblem(t, result.mask1, result.mask2, plane_distance=0.05))
        assert direct == pytest.approx(result.trace[-1], rel=1e-9)

    def test_global_phase_invariance(self):
        g = ModeGrid(6, 6, 120e-6)
        t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=2))
        result = optimize_masks(ShapingProblem(t, flat_mask(g)), budget=36 * 16 * 2)
        shifted = PhaseMask(result.mask1.phases + 0.987, g)
        a = objective(ShapingProblem(t, result.mask1))
        b = objective(ShapingProblem(t, shifted))
        assert a == pytest.approx(b, abs=1e-12 * max(a, 1.0))

    def test_budget_validation_and_exhaustion(self):
        g = ModeGrid(6, 6, 120e-6)
        t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=2))
        with pytest.raises(ValueError):
            optimize_masks(ShapingProblem(t, flat_mask(g)), budget=10)
        result = optimize_masks(ShapingProblem(t, flat_mask(g)), budget=40)
        assert result.exhausted_mid_pass
        assert result.evaluations <= 40

    def test_thick_single_mask_refocuses_both_bases(self):
        g = ModeGrid(16, 16, 120e-6)
        ratios = []
        for seed in (4, 5):
            t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=seed))
            result = optimize_masks(ShapingProblem(t, flat_mask(g)), budget=256 * 16 * 10, max_passes=10)
            pm, ps = projections_of(ShapingProblem(t, result.mask1))
            ratios.append(
                (
                    peak_to_background(pm.image, pm.center),
                    peak_to_background(ps.image, (16, 16)),
                )
            )
        for minus_ratio, sum_ratio in ratios:
            assert minus_ratio > 5.0
            assert sum_ratio > 5.0

    def test_second_plane_strictly_improves(self):
        g = ModeGrid(16, 16, 120e-6)
        t = synth_medium(MediumSpec("thick_iid_gaussian", g, seed=4))
        base = ShapingProblem(t, flat_mask(g), flat_mask(g), plane_distance=0.2)
        single = optimize_masks(base, budget=256 * 16 * 14, max_passes=14, sweep=("mask1",))
        resumed = ShapingProblem(t, single.mask1, single.mask2, plane_distance=0.2)
        both = optimize_masks(resumed, budget=256 * 16 * 20, max_passes=20)
        assert both.trace[-1] > single.trace[-1]
        pm1, ps1 = projections_of(ShapingProblem(t, single.mask1, single.mask2, plane_distance=0.2))
        pm2, ps2 = projections_of(ShapingProblem(t, both.mask1, both.mask2, plane_distance=0.2))
        assert peak_to_background(pm2.image, pm2.center) > peak_to_background(pm1.image, pm1.center)
        assert peak_to_background(ps2.image, (16, 16)) > peak_to_background(ps1.image, (16, 16))

    def test_mask_text_round_trip(self, tmp_path):
        g = ModeGrid(4, 4, 120e-6)
        mask = PhaseMask(np.linspace(0, 6.0, 16), g)
        mask.save(tmp_path / "mask.txt")
        back = PhaseMask.load(tmp_path / "mask.txt", g)
        assert np.allclose(back.phases, mask.phases)

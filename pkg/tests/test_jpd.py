import numpy as np
import pytest

from biphoton.jpd import Jpd, Projection, accumulate_jpd, conditional_image, project_minus, project_sum
from biphoton.optics import ModeGrid
from biphoton.spadsim import CHUNK_FRAMES, FrameStack, SensorSpec, dark_stack, simulate_frames
from biphoton.states import GaussianPairSpec, input_state


def stack_from_bits(bits, w, h):
    return FrameStack(w, h, np.packbits(np.asarray(bits, dtype=np.uint8), axis=1), 0)


class TestAccumulate:
    def test_two_identical_frames_cancel(self):
        fr = np.zeros((2, 16), dtype=np.uint8)
        fr[:, [3, 9]] = 1
        j = accumulate_jpd(stack_from_bits(fr, 4, 4))
        assert np.abs(j.gamma).max() == 0.0

    def test_alternating_frames_anticorrelate(self):
        fr = np.zeros((10001, 16), dtype=np.uint8)
        fr[0::2, 3] = 1
        fr[1::2, 9] = 1
        j = accumulate_jpd(stack_from_bits(fr, 4, 4))
        assert j.gamma[3, 9] == pytest.approx(-0.5, abs=1e-3)
        assert j.gamma[9, 3] == pytest.approx(-0.5, abs=1e-3)
        assert j.gamma[3, 3] == 0.0  # same-pixel convention

    def test_requires_two_frames(self):
        with pytest.raises(ValueError):
            accumulate_jpd(stack_from_bits(np.zeros((1, 16), dtype=np.uint8), 4, 4))

    def test_generative_oracle(self):
        # sparse operating point: binary clipping saturates pair coincidences
        # linearly in the rate, so the clean-law comparison needs a low rate
        g = ModeGrid(8, 8, 4.5e-6)
        psi = input_state(g, GaussianPairSpec(sigma_r=4.5e-6, sigma_k=1.5e5))
        stack = simulate_frames(psi, SensorSpec(8, 8, pair_rate=0.5, seed=11), 1_000_000)
        j = accumulate_jpd(stack)
        law = psi.probabilities()
        law = law + law.T
        np.fill_diagonal(law, 0.0)
        law /= law.sum()
        est = j.gamma / j.gamma.sum()
        assert np.linalg.norm(est - law) / np.linalg.norm(law) < 0.1

    def test_unbiased_for_uncorrelated_source(self):
        # independent frames: accidentals cancel in expectation
        sensor = SensorSpec(8, 8, pair_rate=0.0, singles_rate=2.0, dark_rate=0.02, seed=6)
        stack = dark_stack(sensor, 100_000)  # dark-only: no pairs, still uncorrelated
        j = accumulate_jpd(stack)
        # block standard errors
        blocks = 10
        per = stack.n_frames // blocks
        samples = np.array([
            accumulate_jpd(FrameStack(8, 8, stack.packed[i * per : (i + 1) * per], 0)).gamma
            for i in range(blocks)
        ])
        se = samples.std(axis=0, ddof=1) / np.sqrt(blocks)
        mask = se > 0
        z = np.abs(j.gamma[mask]) / se[mask]
        from conftest import family_z

        assert z.max() < family_z(int(mask.sum()), dof=blocks - 1)

    def test_chunk_split_invariance(self):
        rng = np.random.default_rng(4)
        n = CHUNK_FRAMES + 1717  # force a chunk boundary
        fr = (rng.random((n, 36)) < 0.15).astype(np.uint8)
        whole = accumulate_jpd(stack_from_bits(fr, 6, 6))
        # reference: direct single-pass formula
        b = fr.astype(np.float64)
        m = n - 1
        genuine = b[:m].T @ b[:m]
        accidental = b[:m].T @ b[1:]
        ref = (genuine - accidental) / m
        np.fill_diagonal(ref, 0.0)
        assert np.abs(whole.gamma - ref).max() < 1e-12

    def test_sparse_path_matches_dense(self):
        # sensors beyond the dense limit go through lit-pixel lists
        import biphoton.jpd as jpdmod

        rng = np.random.default_rng(8)
        fr = (rng.random((3000, 64)) < 0.1).astype(np.uint8)
        stack = stack_from_bits(fr, 8, 8)
        dense = accumulate_jpd(stack)
        old = jpdmod._DENSE_PIXEL_LIMIT
        jpdmod._DENSE_PIXEL_LIMIT = 1
        try:
            sparse = accumulate_jpd(stack)
        finally:
            jpdmod._DENSE_PIXEL_LIMIT = old
        assert np.abs(dense.gamma - sparse.gamma).max() < 1e-12


class TestProjections:
    def test_parity_support_gives_central_sum_peak(self):
        g = np.zeros((16, 16))
        for x1 in range(4):
            for y1 in range(4):
                x2, y2 = (4 - x1) % 4, (4 - y1) % 4
                g[y1 * 4 + x1, y2 * 4 + x2] = 1.0
        j = Jpd(g, 4, 4, 1)
        p = project_sum(j)
        # wrapped parity pairs sum to 0 or 4 per axis; the unwrapped bulk
        # accumulates at (4, 4)
        assert p.image[4, 4] == 9.0
        assert p.image.sum() == pytest.approx(j.total())

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(12)
        w = h = 8
        gamma = rng.standard_normal((64, 64))
        np.fill_diagonal(gamma, 0.0)
        j = Jpd(gamma, w, h, 1)
        ps = project_sum(j)
        pm = project_minus(j)
        bs = np.zeros_like(ps.image)
        bm = np.zeros_like(pm.image)
        for x1 in range(w):
            for y1 in range(h):
                for x2 in range(w):
                    for y2 in range(h):
                        v = gamma[y1 * w + x1, y2 * w + x2]
                        bs[y1 + y2, x1 + x2] += v
                        bm[y1 - y2 + h - 1, x1 - x2 + w - 1] += v
        assert np.abs(ps.image - bs).max() < 1e-12
        assert np.abs(pm.image - bm).max() < 1e-12

    def test_mass_preservation_exact(self):
        rng = np.random.default_rng(3)
        gamma = rng.standard_normal((36, 36))
        j = Jpd(gamma, 6, 6, 1)
        assert project_sum(j).image.sum() == pytest.approx(j.total(), abs=1e-10)
        assert project_minus(j).image.sum() == pytest.approx(j.total(), abs=1e-10)

    def test_minus_recovers_position_width(self):
        g = ModeGrid(16, 16, 4.5e-6)
        sigma_r = 1.2 * 4.5e-6
        psi = input_state(g, GaussianPairSpec(sigma_r=sigma_r, sigma_k=3e4))
        stack = simulate_frames(psi, SensorSpec(16, 16, pair_rate=1.0, seed=2), 300_000)
        pm = project_minus(accumulate_jpd(stack))
        from biphoton.epr import fit_gaussian_width

        fit = fit_gaussian_width(pm)
        assert fit.width * 4.5e-6 == pytest.approx(sigma_r, rel=0.10)

    def test_dark_minus_projection_flat_without_crosstalk(self):
        sensor = SensorSpec(8, 8, pair_rate=0.0, dark_rate=0.03, seed=14)
        stack = dark_stack(sensor, 120_000)
        pm = project_minus(accumulate_jpd(stack))
        from biphoton.calibration import _minus_projection_se
        from conftest import family_z

        se = _minus_projection_se(stack, blocks=8)
        mask = se > 0
        z = np.abs(pm.image[mask]) / se[mask]
        assert z.max() < family_z(int(mask.sum()), dof=7)

    def test_dark_minus_projection_shows_injected_kernel(self):
        kern = {(1, 0): 0.05, (-1, 0): 0.05}
        sensor = SensorSpec(8, 8, pair_rate=0.0, dark_rate=0.03, crosstalk=kern, seed=14)
        stack = dark_stack(sensor, 120_000)
        pm = project_minus(accumulate_jpd(stack))
        cy, cx = pm.center
        values = pm.image.copy()
        peak_offsets = {(1, 0), (-1, 0)}
        got = {divmod(int(i), pm.image.shape[1]) for i in np.argsort(values.ravel())[::-1][:2]}
        got_offsets = {(x - cx, y - cy) for y, x in got}
        assert {(dx, dy) for (dx, dy) in got_offsets} == peak_offsets

    def test_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        j = Jpd(rng.standard_normal((16, 16)), 4, 4, 7)
        p = project_minus(j)
        path = tmp_path / "proj.csv"
        p.save_csv(path)
        back = Projection.load_csv(path)
        assert back.kind == "minus"
        assert np.allclose(back.image, p.image)


class TestConditional:
    def test_diagonal_gamma_single_spot(self):
        gamma = np.eye(16)
        np.fill_diagonal(gamma, 0.0)
        gamma[5, 5] = 0.0
        gamma[5, 6] = 2.0
        j = Jpd(gamma, 4, 4, 1)
        img = conditional_image(j, (2, 1))  # pixel index 6
        assert img[1, 1] == 2.0  # (x=1, y=1) is index 5
        assert img.sum() == 2.0

    def test_parity_partner_spot(self):
        # strongly entangled widths: tight momentum anti-correlation, broad
        # single-photon momentum spread
        g = ModeGrid(8, 8, 1e-5)
        psi = input_state(g, GaussianPairSpec(sigma_r=0.7e-5, sigma_k=5.5e4))
        from biphoton.optics import dft_matrix
        from biphoton.states import flat_mask, propagate

        out = propagate(psi, dft_matrix(g), flat_mask(g), "momentum")
        stack = simulate_frames(out, SensorSpec(8, 8, pair_rate=1.0, seed=3), 100_000)
        j = accumulate_jpd(stack)
        ref = (3, 3)
        img = conditional_image(j, ref)
        peak = np.unravel_index(np.argmax(img), img.shape)
        # anti-correlated partner: point reflection about the grid center
        assert abs(peak[1] - (8 - ref[0]) % 8) <= 1
        assert abs(peak[0] - (8 - ref[1]) % 8) <= 1

    def test_masked_reference_rejected(self):
        from biphoton.calibration import HotPixelMask

        j = Jpd(np.zeros((16, 16)), 4, 4, 1)
        mask = HotPixelMask(np.zeros((4, 4), dtype=bool), 0.1)
        mask.mask[1, 2] = True
        with pytest.raises(ValueError):
            conditional_image(j, (2, 1), mask)

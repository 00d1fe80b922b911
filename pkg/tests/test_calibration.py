import numpy as np
import pytest

from conftest import family_z

from biphoton.calibration import (
    CrosstalkReference,
    HotPixelMask,
    _minus_projection_se,
    characterize_crosstalk,
    correct_crosstalk,
    find_hot_pixels,
)
from biphoton.jpd import Jpd, accumulate_jpd, project_minus
from biphoton.optics import ModeGrid
from biphoton.spadsim import FrameStack, SensorSpec, dark_stack, default_crosstalk_kernel, simulate_frames
from biphoton.states import GaussianPairSpec, input_state

pytestmark = pytest.mark.filterwarnings("ignore::UserWarning")

KERNEL = default_crosstalk_kernel(0.02)


@pytest.fixture(scope="module")
def dark_reference():
    sensor = SensorSpec(16, 16, pair_rate=0.0, dark_rate=0.02, crosstalk=KERNEL, seed=2)
    stack = dark_stack(sensor, 200_000)
    return stack, characterize_crosstalk(stack)


class TestCharacterize:
    def test_no_crosstalk_sensor_flat(self):
        sensor = SensorSpec(12, 12, pair_rate=0.0, dark_rate=0.03, seed=4)
        stack = dark_stack(sensor, 150_000)
        ref = characterize_crosstalk(stack)
        proj = project_minus(ref.gamma0)
        se = _minus_projection_se(stack, blocks=8)
        mask = se > 0
        z = np.abs(proj.image[mask]) / se[mask]
        assert z.max() < family_z(int(mask.sum()), dof=7)
        assert not ref.support_exceeded

    def test_injected_kernel_recovered(self, dark_reference):
        stack, ref = dark_reference
        proj = project_minus(ref.gamma0)
        cy, cx = proj.center
        se = _minus_projection_se(stack, blocks=8)
        u = 1.0 - np.exp(-0.02)  # primary dark fire probability
        # expected marginal at each offset: trigger probability times the
        # primary fire probability, summed over valid pixel pairs
        for (dx, dy), q in KERNEL.items():
            qq = q + KERNEL.get((-dx, -dy), 0.0)
            n_pairs = (16 - abs(dx)) * (16 - abs(dy))
            expected = n_pairs * u * (1 - u) ** 2 * qq
            got = proj.image[cy + dy, cx + dx]
            s = se[cy + dy, cx + dx]
            if expected > 8 * s:  # resolvable offsets only
                assert abs(got - expected) < 4 * max(s, 1e-12) + 0.1 * expected

    def test_support_violation_flagged(self):
        # plant correlated firing at offset 4, beyond any legal kernel
        rng = np.random.default_rng(9)
        frames = (rng.random((120_000, 64)) < 0.02).astype(np.uint8)
        src = frames[:, 18] == 1
        frames[src, 22] = 1  # pixel (2,2) drags (6,2): dx=4
        stack = FrameStack(8, 8, np.packbits(frames, axis=1), 0)
        ref = characterize_crosstalk(stack)
        assert ref.support_exceeded

    def test_few_frames_warns(self):
        sensor = SensorSpec(8, 8, pair_rate=0.0, dark_rate=0.05, seed=1)
        stack = dark_stack(sensor, 5000)
        with pytest.warns(UserWarning, match="dark frames"):
            characterize_crosstalk(stack)


class TestCorrect:
    def test_dark_self_consistency(self, dark_reference):
        _, ref = dark_reference
        sensor = SensorSpec(16, 16, pair_rate=0.0, dark_rate=0.02, crosstalk=KERNEL, seed=77)
        stack = dark_stack(sensor, 400_000)
        raw = accumulate_jpd(stack)
        corrected = correct_crosstalk(raw, ref, stack.mean_image())
        pm = project_minus(corrected).image
        se_raw = _minus_projection_se(stack, blocks=8)
        # correction noise: the reference has its own estimator noise at the
        # same offsets, larger by the frame-count ratio
        se = np.sqrt(se_raw**2 * (1.0 + 400_000 / 200_000))
        mask = se > 0
        z = np.abs(pm[mask]) / se[mask]
        assert z.max() < family_z(int(mask.sum()), dof=7)

    def test_zero_reference_is_identity(self):
        gamma0 = Jpd(np.zeros((256, 256)), 16, 16, 1000)
        ref = CrosstalkReference(gamma0, np.full((16, 16), 0.02), 1000)
        rng = np.random.default_rng(3)
        raw = Jpd(rng.standard_normal((256, 256)), 16, 16, 500)
        np.fill_diagonal(raw.gamma, 0.0)
        corrected = correct_crosstalk(raw, ref, np.full((16, 16), 0.05))
        assert np.array_equal(corrected.gamma, raw.gamma)

    def test_signal_round_trip_within_noise_floor(self):
        g = ModeGrid(16, 16, 4.5e-6)
        psi = input_state(g, GaussianPairSpec(sigma_r=0.7 * 4.5e-6, sigma_k=0.7 * 2 * np.pi / (16 * 4.5e-6)))
        common = dict(pair_rate=0.3, singles_rate=3.0, dark_rate=0.02)
        n = 400_000
        st_ct = simulate_frames(psi, SensorSpec(16, 16, **common, crosstalk=KERNEL, seed=21), n)
        st_clean = simulate_frames(psi, SensorSpec(16, 16, **common, seed=21), n)  # same primaries
        st_other = simulate_frames(psi, SensorSpec(16, 16, **common, seed=22), n)
        dark = dark_stack(SensorSpec(16, 16, **common, crosstalk=KERNEL, seed=30), 400_000)
        ref = characterize_crosstalk(dark)

        corrected = correct_crosstalk(accumulate_jpd(st_ct), ref, st_ct.mean_image())
        pm_corr = project_minus(corrected).image
        pm_clean = project_minus(accumulate_jpd(st_clean)).image
        pm_other = project_minus(accumulate_jpd(st_other)).image
        floor = np.linalg.norm(pm_clean - pm_other)
        assert np.linalg.norm(pm_corr - pm_clean) < 2.0 * floor

    def test_geometry_mismatch(self, dark_reference):
        _, ref = dark_reference
        with pytest.raises(ValueError):
            correct_crosstalk(Jpd(np.zeros((64, 64)), 8, 8, 10), ref, np.zeros((8, 8)))


class TestHotPixels:
    def test_planted_hot_pixels_exact(self):
        rng = np.random.default_rng(5)
        flat = rng.choice(2048, 32, replace=False)
        hot = tuple(((int(p % 64), int(p // 64)), 0.3) for p in flat)
        sensor = SensorSpec(64, 32, pair_rate=0.0, dark_rate=0.005, hot_pixels=hot, seed=9)
        mask = find_hot_pixels(dark_stack(sensor, 20_000), 0.10)
        assert set(mask.pixels()) == {(int(p % 64), int(p // 64)) for p in flat}
        assert mask.count == 32

    def test_threshold_one_masks_only_max(self):
        sensor = SensorSpec(8, 8, pair_rate=0.0, dark_rate=0.02, hot_pixels=(((5, 5), 1.0),), seed=3)
        mask = find_hot_pixels(dark_stack(sensor, 5000), 1.0)
        assert mask.pixels() == [(5, 5)]

    def test_all_dark_empty_mask(self):
        sensor = SensorSpec(8, 8, pair_rate=0.0, seed=3)
        mask = find_hot_pixels(dark_stack(sensor, 100), 0.10)
        assert mask.count == 0

    def test_uniform_dark_empty_mask(self):
        # defect-free sensor: the threshold cannot separate the bulk, so no
        # pixel is flagged even though all clear 10% of the max
        sensor = SensorSpec(16, 16, pair_rate=0.0, dark_rate=0.05, seed=8)
        mask = find_hot_pixels(dark_stack(sensor, 100_000), 0.10)
        assert mask.count == 0

    def test_mask_zeroes_jpd_rows_and_columns(self):
        mask = HotPixelMask(np.zeros((4, 4), dtype=bool), 0.1)
        mask.mask[2, 1] = True  # pixel index 9
        j = Jpd(np.ones((16, 16)), 4, 4, 10)
        out = mask.apply_to_jpd(j)
        assert np.all(out.gamma[9, :] == 0)
        assert np.all(out.gamma[:, 9] == 0)
        assert out.gamma[0, 1] == 1.0

    def test_text_round_trip(self, tmp_path):
        mask = HotPixelMask(np.zeros((4, 6), dtype=bool), 0.25)
        mask.mask[1, 2] = True
        mask.mask[3, 5] = True
        path = tmp_path / "hot.txt"
        mask.save(path)
        back = HotPixelMask.load(path, 6, 4)
        assert np.array_equal(back.mask, mask.mask)
        assert back.threshold_fraction == 0.25

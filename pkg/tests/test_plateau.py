import numpy as np
import pytest

from biphoton.plateau import DEFAULT_FRAME_COUNTS, PlateauSpec, plateau_curve, save_curve_csv, synth_correlation_pair


class TestSampling:
    def test_large_n_limit(self):
        spec = PlateauSpec(d=45, alpha=1.0 / 45.0, alpha_prime=1e-4, seed=0)
        pos, mom = synth_correlation_pair(spec, 10**12)
        diag = np.diag(pos.counts)
        off = pos.counts[~np.eye(45, dtype=bool)]
        assert np.abs(diag - 1.0 / 45.0).max() < 1e-4
        assert np.abs(off - 1e-4).max() < 1e-4
        assert np.abs(np.diag(mom.counts) - 1.0 / 45.0).max() < 1e-4

    def test_reproducible(self):
        spec = PlateauSpec(seed=5)
        a, _ = synth_correlation_pair(spec, 10**6, trial=3)
        b, _ = synth_correlation_pair(spec, 10**6, trial=3)
        assert np.array_equal(a.counts, b.counts)
        c, _ = synth_correlation_pair(spec, 10**6, trial=4)
        assert not np.array_equal(a.counts, c.counts)

    def test_elementwise_noise_scale(self):
        spec = PlateauSpec(d=45, noise_scale=1.0, seed=2)
        n = 10**4
        draws = np.array([synth_correlation_pair(spec, n, trial=t)[0].counts for t in range(1000)])
        emp = draws.std(axis=0, ddof=1).mean()
        assert emp == pytest.approx(1.0 / np.sqrt(n), rel=0.05)

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            PlateauSpec(alpha=0.01, alpha_prime=0.02)
        with pytest.raises(ValueError):
            PlateauSpec(noise_scale=0.0)
        with pytest.raises(ValueError):
            synth_correlation_pair(PlateauSpec(), 0)


class TestCurve:
    def test_zero_noise_flat_in_n(self):
        # noise_scale cannot be zero by contract; a negligible scale stands in
        spec = PlateauSpec(d=15, alpha=1.0 / 15.0, alpha_prime=0.0, noise_scale=1e-12,
                           frame_counts=(10, 10**6), trials=5, seed=1)
        points = plateau_curve(spec)
        assert points[0].mean_f == pytest.approx(points[1].mean_f, abs=1e-9)
        assert points[0].mean_r == points[1].mean_r == 15

    def test_maximally_entangled_reaches_d(self):
        spec = PlateauSpec(
            d=45, alpha=1.0 / 45.0, alpha_prime=0.0, noise_scale=1.0,
            frame_counts=(10**6, 10**8, 10**10, 10**11), trials=20, seed=3,
        )
        points = plateau_curve(spec)
        fs = [p.mean_f for p in points]
        assert all(b >= a - 1e-12 for a, b in zip(fs, fs[1:]))
        assert points[-1].mean_r == 45.0
        assert points[-2].mean_r == 45.0

    def test_nonmaximal_plateaus_below_d(self):
        spec = PlateauSpec(
            d=45, alpha=1.0 / 45.0, alpha_prime=1e-4, noise_scale=1.0,
            frame_counts=(10**11, 10**12), trials=20, seed=3,
        )
        points = plateau_curve(spec)
        assert points[-1].mean_r < 45.0
        assert points[-1].mean_r == pytest.approx(points[-2].mean_r, abs=0.5)

    def test_csv_format(self, tmp_path):
        spec = PlateauSpec(d=10, alpha=0.1, frame_counts=(10**3, 10**5), trials=3, seed=0)
        points = plateau_curve(spec)
        path = tmp_path / "curve.csv"
        save_curve_csv(points, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "N,mean_F,std_F,mean_r"
        assert len(lines) == 3

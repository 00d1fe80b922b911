"""End-to-end run orchestration: medium, correction, frames, calibration,
estimation, entanglement tests, and report emission.

A run executes the three-arm experiment (no medium / medium with flat mask /
medium with correction mask) for one configured arm: synthesize or load the
medium, build the correction mask from a simulated classical transmission
measurement, propagate the pair state in both detection bases, generate
signal and shutter-closed frame stacks, calibrate (hot pixels, cross-talk),
estimate the coincidence tensor, project it, extract correlation widths for
the uncertainty-product test, and evaluate the two-basis dimension witness.

Every artifact lands in the run directory with a SHA-256 manifest; with a
fixed seed a rerun is byte-identical (timestamps only exist in the side-car
log, which the manifest excludes).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import certify as cert
from . import epr as eprmod
from . import jpd as jpdmod
from . import spadsim
from .optics import MOMENTUM, POSITION, ModeGrid, TransferMatrix, dft_matrix, measure_tm, synth_medium, MediumSpec, save_transfer_matrix
from .rng import substream
from .states import GaussianPairSpec, PhaseMask, TwoPhotonState, condition_scores, correction_mask, flat_mask, input_state, propagate, save_state

log = logging.getLogger("biphoton.pipeline")

SCENARIOS = ("no_medium", "medium_flat", "medium_corrected")


class ConfigError(ValueError):
    """Configuration file is invalid or inconsistent."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs are retained."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunConfig:
    """Full description of one pipeline run.

    Defaults give a 16x16 desk-scale arm with physically motivated noise.
    ``sigma_r_px`` / ``sigma_k_px`` set the pair correlation widths in pixel
    units of each detection plane; the effective focal length is derived so
    that the discrete Fourier bins of the mode grid coincide with the camera
    sampling, keeping generation and analysis units consistent.
    """

    scenario: str = "no_medium"
    seed: int = 0
    grid_size: int = 16
    frames: int = 1_000_000
    dark_frames: int = 200_000
    medium_kind: str = "thin_phase"
    pair_rate: float = 1.0
    singles_rate: float = 0.2
    dark_rate: float = 0.01
    crosstalk_strength: float = 0.0
    hot_pixel_count: int = 2
    hot_pixel_rate: float = 0.5
    sigma_r_px: float = 0.7
    sigma_k_px: float = 0.7
    pixel_set_size: int = 16
    pixel_set_spacing: int = 2
    pixel_pitch: float = 45e-6
    magnification: float = 10.0
    wavelength: float = 810e-9
    hot_threshold: float = 0.10
    frames_curve: tuple = ()
    output: str = "runs/run"

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.grid_size < 4:
            raise ConfigError("grid_size must be at least 4")
        if self.frames < 2 or self.dark_frames < 2:
            raise ConfigError("frames and dark_frames must be at least 2")
        if self.seed is None:
            raise ConfigError("an explicit seed is mandatory (no wall-clock seeding)")
        object.__setattr__(self, "frames_curve", tuple(int(n) for n in self.frames_curve))

    @property
    def crystal_pitch(self) -> float:
        return self.pixel_pitch / self.magnification

    @property
    def effective_focal_length(self) -> float:
        # chosen so one camera pixel in the far field equals one Fourier bin
        # of the source grid: pitch*2pi/(lambda f) == 2pi/(N*crystal_pitch)
        return self.pixel_pitch * self.grid_size * self.crystal_pitch / self.wavelength

    @property
    def momentum_bin(self) -> float:
        return 2.0 * math.pi / (self.grid_size * self.crystal_pitch)

    def calibration(self) -> eprmod.OpticalCalibration:
        return eprmod.OpticalCalibration(
            pixel_pitch=self.pixel_pitch,
            magnification=self.magnification,
            effective_focal_length=self.effective_focal_length,
            wavelength=self.wavelength,
        )

    def to_json(self, exclude_output: bool = False) -> str:
        data = asdict(self)
        if exclude_output:
            # the recorded config describes the run, not where it landed, so
            # reruns into different directories stay byte-identical
            data.pop("output")
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _sensor(config: RunConfig, stream: str) -> spadsim.SensorSpec:
    n = config.grid_size
    rng = substream(config.seed, "hot-pixels")
    hot = []
    if config.hot_pixel_count:
        flat = rng.choice(n * n, config.hot_pixel_count, replace=False)
        hot = [((int(p % n), int(p // n)), config.hot_pixel_rate) for p in sorted(flat)]
    kernel = spadsim.default_crosstalk_kernel(config.crosstalk_strength) if config.crosstalk_strength > 0 else {}
    return spadsim.SensorSpec(
        width=n,
        height=n,
        pair_rate=config.pair_rate,
        singles_rate=config.singles_rate,
        dark_rate=config.dark_rate,
        hot_pixels=tuple(hot),
        crosstalk=kernel,
        # scenario enters the stream so arms compared against each other are
        # independent realizations even under one run seed
        seed=int(substream(config.seed, "sensor", stream, config.scenario).integers(0, 2**63 - 1)),
    )


def _build_medium(config: RunConfig) -> TransferMatrix:
    grid = ModeGrid(config.grid_size, config.grid_size, config.crystal_pitch, POSITION)
    if config.scenario == "no_medium":
        return dft_matrix(grid)  # the imaging optics alone: a clean Fourier map
    spec = MediumSpec(config.medium_kind, grid, seed=int(substream(config.seed, "medium-seed").integers(0, 2**31)))
    return synth_medium(spec)


@dataclass
class RunResult:
    directory: Path
    scores: dict
    epr: eprmod.EprReport
    witness: cert.WitnessReport


def run_pipeline(config: RunConfig) -> RunResult:
    """Execute every stage for one arm and write all artifacts.

    Raises :class:`StageError` on stage failure; artifacts produced before
    the failure stay in place.
    """
    out = Path(config.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json(exclude_output=True))
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    try:
        return _run_stages(config, out)
    finally:
        log.removeHandler(handler)
        handler.close()


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                log.info("stage %s start", name)
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, str(exc)) from exc

        return inner

    return wrap


def _run_stages(config: RunConfig, out: Path) -> RunResult:
    grid = ModeGrid(config.grid_size, config.grid_size, config.crystal_pitch, POSITION)

    medium = _stage("medium")(_build_medium)(config)
    save_transfer_matrix(medium, out / "medium.etmx")

    @_stage("mask")
    def make_mask():
        if config.scenario != "medium_corrected":
            return flat_mask(grid)
        measured = measure_tm(medium, seed=int(substream(config.seed, "tm-measure").integers(0, 2**31)))
        return correction_mask(measured)

    mask = make_mask()
    mask.save(out / "mask.txt")

    @_stage("states")
    def make_states():
        pair_spec = GaussianPairSpec(
            sigma_r=config.sigma_r_px * config.crystal_pitch,
            sigma_k=config.sigma_k_px * config.momentum_bin,
        )
        import warnings as _w

        with _w.catch_warnings():
            _w.simplefilter("ignore")  # sub-pixel widths are intentional here
            psi = input_state(grid, pair_spec)
            psi_m = propagate(psi, medium, mask, MOMENTUM)
            psi_p = propagate(psi, medium, mask, POSITION)
            ident = input_state(grid)
            score2, score3 = condition_scores(
                propagate(ident, medium, mask, MOMENTUM),
                propagate(ident, medium, mask, POSITION),
            )
        return psi_m, psi_p, score2, score3

    psi_m, psi_p, score2, score3 = make_states()
    save_state(psi_m, out / "state_momentum.etpx")
    save_state(psi_p, out / "state_position.etpx")
    scores = {
        "score2_momentum_refocus": score2,
        "score3_position_refocus": score3,
        "transmission_efficiency_momentum": psi_m.efficiency,
        "transmission_efficiency_position": psi_p.efficiency,
    }
    (out / "scores.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n")

    @_stage("frames")
    def make_frames():
        stacks = {}
        for basis, psi in ((MOMENTUM, psi_m), (POSITION, psi_p)):
            stacks[basis] = spadsim.simulate_frames(psi, _sensor(config, basis), config.frames)
            stacks[basis].save(out / f"frames_{basis}.spad")
        dark = spadsim.dark_stack(_sensor(config, "dark"), config.dark_frames)
        dark.save(out / "dark.spad")
        return stacks, dark

    stacks, dark = make_frames()

    @_stage("calibrate")
    def calibrate():
        import warnings as _w

        with _w.catch_warnings():
            _w.simplefilter("ignore")
            hot = cal.find_hot_pixels(dark, config.hot_threshold)
            ref = cal.characterize_crosstalk(dark) if config.crosstalk_strength > 0 else None
        return hot, ref

    hot, ct_ref = calibrate()
    hot.save(out / "hot_pixels.txt")

    @_stage("jpd")
    def estimate(basis: str, stack) -> jpdmod.Jpd:
        raw = jpdmod.accumulate_jpd(stack)
        raw = hot.apply_to_jpd(raw)
        if ct_ref is not None:
            intensity = hot.apply_to_image(stack.mean_image())
            raw = cal.correct_crosstalk(raw, ct_ref, intensity)
            raw = hot.apply_to_jpd(raw)
        return raw

    jpds = {basis: estimate(basis, stack) for basis, stack in stacks.items()}
    for basis, j in jpds.items():
        j.save(out / f"jpd_{basis}.bin")

    @_stage("projections")
    def project():
        projections = {}
        for basis, j in jpds.items():
            projections[(basis, "minus")] = jpdmod.project_minus(j)
            projections[(basis, "sum")] = jpdmod.project_sum(j)
        for (basis, kind), proj in projections.items():
            proj.save_csv(out / f"projection_{basis}_{kind}.csv")
        return projections

    projections = project()

    @_stage("epr")
    def analyse_epr() -> eprmod.EprReport:
        optcal = config.calibration()
        fit_r = eprmod.fit_gaussian_width(projections[(POSITION, "minus")])
        fit_k = eprmod.fit_gaussian_width(projections[(MOMENTUM, "sum")])
        report = eprmod.epr_criterion(
            eprmod.pixel_to_physical(fit_r.width, optcal, POSITION),
            eprmod.pixel_to_physical(fit_k.width, optcal, MOMENTUM),
            eprmod.pixel_to_physical(fit_r.width_err, optcal, POSITION),
            eprmod.pixel_to_physical(fit_k.width_err, optcal, MOMENTUM),
            approximate=fit_r.approximate or fit_k.approximate,
        )
        return report

    epr_report = analyse_epr()
    epr_report.save(out / "epr_report.json")
    epr_report.save(out / "epr_report.txt")

    def witness_from(jpd_by_basis, stack_by_basis, save_dir=None):
        matrices = {}
        for basis in (POSITION, MOMENTUM):
            intensity = hot.apply_to_image(stack_by_basis[basis].mean_image())
            pset = cert.select_pixel_set(intensity, config.pixel_set_size, config.pixel_set_spacing, hot)
            pairing = "direct" if basis == POSITION else "mirror"
            try:
                matrices[basis] = cert.correlation_matrix(jpd_by_basis[basis], pset, pairing=pairing, mask=hot)
            except ValueError:
                # scrambled arms have no real anti-correlation peak, so the
                # inferred symmetry point is speckle noise and partners can
                # leave the sensor; pair about the set centroid instead
                matrices[basis] = cert.correlation_matrix(
                    jpd_by_basis[basis], pset, pairing=pairing, mirror_center=pset.center, mask=hot
                )
            if save_dir is not None:
                matrices[basis].save_csv(save_dir / f"correlation_{basis}.csv")
        try:
            return cert.fidelity_bound(matrices[POSITION], matrices[MOMENTUM])
        except ValueError:
            # scrambled arms can leave a non-positive subtraction-estimator
            # total; clamp the matrices and flag the normalization so the
            # (strongly negative) bound still certifies nothing
            clamped = {
                b: cert.CorrelationMatrix(np.clip(m.counts, 0.0, None), m.basis)
                for b, m in matrices.items()
            }
            report = cert.fidelity_bound(clamped[POSITION], clamped[MOMENTUM])
            report.degenerate_normalization = True
            return report

    @_stage("certify")
    def certify_stage():
        return witness_from(jpds, stacks, save_dir=out)

    witness = certify_stage()
    witness.save(out / "witness.json")
    witness.save(out / "witness.txt")

    if config.frames_curve:

        @_stage("curve")
        def dimension_curve():
            rows = []
            for n in sorted(config.frames_curve):
                if n > config.frames:
                    continue
                sub = {
                    b: spadsim.FrameStack(s.width, s.height, s.packed[:n], s.seed)
                    for b, s in stacks.items()
                }
                sub_jpds = {b: estimate(b, s) for b, s in sub.items()}
                wr = witness_from(sub_jpds, sub)
                rows.append((n, wr.f_tilde, wr.certified_r))
            lines = ["N,F_tilde,certified_r"]
            lines += [f"{n},{f:.10g},{r}" for n, f, r in rows]
            (out / "dimension_vs_frames.csv").write_text("\n".join(lines) + "\n")

        dimension_curve()

    _write_manifest(out)
    log.info("run complete: certified_r=%d epr_violated=%s", witness.certified_r, epr_report.violated)
    return RunResult(out, scores, epr_report, witness)


def _write_manifest(out: Path) -> None:
    entries = []
    for path in sorted(out.rglob("*")):
        if path.is_dir() or path.name in ("manifest.sha256", "run.log"):
            continue
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        entries.append(f"{digest}  {path.relative_to(out).as_posix()}")
    (out / "manifest.sha256").write_text("\n".join(entries) + "\n")


def emit_figures(run_dirs: list[str | Path], out_dir: str | Path, plateau_csv: str | Path | None = None) -> list[Path]:
    """Render report figures (PNG) and collect plot-ready CSV data for one or
    more completed runs, one panel column per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [Path(r) for r in run_dirs]
    for r in runs:
        if not (r / "manifest.sha256").exists():
            raise FileNotFoundError(f"{r} is not a completed run (missing manifest)")
    written: list[Path] = []

    labels = []
    for r in runs:
        cfg = json.loads((r / "config.json").read_text())
        labels.append(cfg.get("scenario", r.name))

    # difference/sum marginal panels, one row per projection kind
    fig, axes = plt.subplots(2, len(runs), figsize=(4 * len(runs), 8), squeeze=False)
    for col, (r, label) in enumerate(zip(runs, labels)):
        for row, (basis, kind) in enumerate((("position", "minus"), ("momentum", "sum"))):
            proj = jpdmod.Projection.load_csv(r / f"projection_{basis}_{kind}.csv")
            ax = axes[row][col]
            im = ax.imshow(proj.image, origin="lower", cmap="inferno")
            ax.set_title(f"{label}\n{basis} {kind}-marginal")
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = out_dir / "projections.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    fig, axes = plt.subplots(2, len(runs), figsize=(4 * len(runs), 8), squeeze=False)
    for col, (r, label) in enumerate(zip(runs, labels)):
        for row, basis in enumerate(("position", "momentum")):
            m = cert.CorrelationMatrix.load_csv(r / f"correlation_{basis}.csv")
            ax = axes[row][col]
            im = ax.imshow(m.counts, cmap="viridis")
            ax.set_title(f"{label}\n{basis} correlations")
            fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    path = out_dir / "correlation_matrices.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    curves = [(r, label) for r, label in zip(runs, labels) if (r / "dimension_vs_frames.csv").exists()]
    if curves or plateau_csv:
        fig, ax = plt.subplots(figsize=(6, 4))
        for r, label in curves:
            rows = [line.split(",") for line in (r / "dimension_vs_frames.csv").read_text().splitlines()[1:]]
            ns = [int(row[0]) for row in rows]
            rs = [int(row[2]) for row in rows]
            ax.semilogx(ns, rs, marker="o", label=label)
        if plateau_csv:
            rows = [line.split(",") for line in Path(plateau_csv).read_text().splitlines()[1:]]
            ax.semilogx([float(r[0]) for r in rows], [float(r[3]) for r in rows], marker="s", label="noise model")
        ax.set_xlabel("frames")
        ax.set_ylabel("certified dimension")
        ax.legend()
        fig.tight_layout()
        path = out_dir / "dimension_vs_frames.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    return written

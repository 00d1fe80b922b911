"""Mode-basis bookkeeping and canonical optical transfer matrices.

Discrete transverse modes live on rectangular grids; linear operators between
mode bases are dense complex matrices. The module provides the unitary 2D
discrete Fourier matrix, a paraxial free-space propagator, synthetic
scattering media (thin phase screen, thick fully-mixing, multi-screen), and a
simulated interferometric transmission-matrix measurement driven by a
classical beacon.

Convention: synthetic media returned by :func:`synth_medium` map the input
(modulator) position basis to the far-field camera plane, i.e. they include
the output Fourier lens. Momentum-basis observables therefore use the medium
matrix directly, while position-basis observables prepend one more Fourier
transform of the output grid.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import substream

POSITION = "position"
MOMENTUM = "momentum"

_ETMX_MAGIC = b"ETMX0001"
_PLANE_CODES = {POSITION: 0, MOMENTUM: 1, "input": 2}
_PLANE_NAMES = {v: k for k, v in _PLANE_CODES.items()}


@dataclass(frozen=True)
class ModeGrid:
    """Rectangular grid of transverse modes.

    ``pitch`` is the mode spacing in the plane's natural unit: meters for a
    position-like plane, rad/m for a momentum-like plane. Linear indices are
    row-major: ``index = y * width + x``.
    """

    width: int
    height: int
    pitch: float
    plane: str = POSITION

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid dimensions must be >= 1, got {self.width}x{self.height}")
        if self.pitch <= 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")
        if self.plane not in _PLANE_CODES:
            raise ValueError(f"unknown plane label {self.plane!r}")

    @property
    def n_modes(self) -> int:
        return self.width * self.height

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def index(self, x: int, y: int) -> int:
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise ValueError(f"mode ({x}, {y}) outside {self.width}x{self.height} grid")
        return y * self.width + x

    def coords(self, index: int) -> tuple[int, int]:
        """Inverse of :meth:`index`: linear index -> (x, y)."""
        return index % self.width, index // self.width

    @property
    def center_index(self) -> int:
        return self.index(self.width // 2, self.height // 2)

    def axis_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical coordinates of mode centers, zero at the grid center."""
        x = (np.arange(self.width) - self.width // 2) * self.pitch
        y = (np.arange(self.height) - self.height // 2) * self.pitch
        return x, y

    def mode_coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (x, y) physical coordinates for all modes in index order."""
        x, y = self.axis_coords()
        xx, yy = np.meshgrid(x, y)
        return xx.ravel(), yy.ravel()


def parity_permutation(grid: ModeGrid) -> np.ndarray:
    """Index map of the point reflection about the grid center.

    Mode (x, y) maps to ((2cx - x) mod W, (2cy - y) mod H) with c the integer
    center. This is exactly the permutation implemented by applying the
    Fourier matrix twice.
    """
    cx, cy = grid.width // 2, grid.height // 2
    x = np.arange(grid.width)
    y = np.arange(grid.height)
    px = (2 * cx - x) % grid.width
    py = (2 * cy - y) % grid.height
    return (py[:, None] * grid.width + px[None, :]).ravel()


@dataclass
class TransferMatrix:
    """Dense complex map from input modes to output modes."""

    entries: np.ndarray
    in_grid: ModeGrid
    out_grid: ModeGrid
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.complex128)
        expected = (self.out_grid.n_modes, self.in_grid.n_modes)
        if self.entries.shape != expected:
            raise ValueError(f"entries shape {self.entries.shape} != (out, in) modes {expected}")
        if not np.all(np.isfinite(self.entries.view(np.float64))):
            raise ValueError("transfer matrix entries must be finite")

    @property
    def n_in(self) -> int:
        return self.in_grid.n_modes

    @property
    def n_out(self) -> int:
        return self.out_grid.n_modes

    def unitarity_defect(self) -> float:
        """max |T T^dag - identity|, a cheap isometry diagnostic."""
        g = self.entries @ self.entries.conj().T
        return float(np.abs(g - np.eye(self.n_out)).max())


def _dft_1d(n: int) -> np.ndarray:
    # Centered phase convention: F[j, k] = exp(-2i pi (j-c)(k-c)/n)/sqrt(n).
    # Symmetric (F = F^t) and F @ F is the index reflection about c = n // 2.
    c = n // 2
    j = np.arange(n) - c
    return np.exp(-2j * np.pi * np.outer(j, j) / n) / np.sqrt(n)


def dft_matrix(grid: ModeGrid) -> TransferMatrix:
    """Unitary 2D discrete Fourier matrix over ``grid``.

    F is symmetric and F @ F equals the parity permutation of
    :func:`parity_permutation`, which makes double transforms behave like an
    ideal image inversion.
    """
    f = np.kron(_dft_1d(grid.height), _dft_1d(grid.width))
    out = replace(grid, plane=MOMENTUM if grid.plane == POSITION else POSITION)
    return TransferMatrix(f, in_grid=grid, out_grid=out)


def free_space_kernel(grid: ModeGrid, distance: float, wavelength: float) -> TransferMatrix:
    """Paraxial free-space propagator over ``distance`` on a sampled grid.

    Built spectrally: diagonal quadratic phase in the Fourier basis, so the
    matrix is exactly unitary, reduces to the identity as distance -> 0, and
    composes exactly (P_d @ P_d = P_2d). The constant on-axis phase of the
    carrier is dropped. When the quadratic spectral phase is undersampled
    (distance beyond ~N*pitch^2/wavelength) the result aliases; that is
    reported as ``meta["aliasing_warning"]``.
    """
    if distance <= 0:
        raise ValueError("distance must be positive")
    if wavelength <= 0:
        raise ValueError("wavelength must be positive")
    fx = (np.arange(grid.width) - grid.width // 2) / (grid.width * grid.pitch)
    fy = (np.arange(grid.height) - grid.height // 2) / (grid.height * grid.pitch)
    f2 = (fy[:, None] ** 2 + fx[None, :] ** 2).ravel()
    phase = np.exp(-1j * np.pi * wavelength * distance * f2)
    f = np.kron(_dft_1d(grid.height), _dft_1d(grid.width))
    p = f.conj().T @ (phase[:, None] * f)
    critical = min(grid.width, grid.height) * grid.pitch**2 / wavelength
    tm = TransferMatrix(p, in_grid=grid, out_grid=grid)
    tm.meta["aliasing_warning"] = bool(distance > critical)
    tm.meta["critical_distance"] = float(critical)
    tm.meta["unitarity_defect"] = tm.unitarity_defect()
    return tm


@dataclass(frozen=True)
class MediumSpec:
    """Parameters of a synthetic scattering medium.

    kinds:
      - ``thin_phase``: single random phase screen conjugate to the modulator
        plane, seen through the output Fourier lens (T = F D_screen). The
        position-basis response F T is then supported on a single permutation,
        i.e. quasi-diagonal.
      - ``thick_iid_gaussian``: fully mixing medium; i.i.d. circular complex
        Gaussian entries, rescaled to unit mean squared singular value.
      - ``multi_screen``: alternating random phase screens and free-space
        propagation, again seen through the output Fourier lens.
    """

    kind: str
    in_grid: ModeGrid
    out_grid: ModeGrid | None = None
    seed: int = 0
    n_screens: int = 2
    screen_spacing: float = 1e-3
    wavelength: float = 810e-9

    def __post_init__(self):
        if self.kind not in ("thin_phase", "thick_iid_gaussian", "multi_screen"):
            raise ValueError(f"unknown medium kind {self.kind!r}")
        if self.kind != "thick_iid_gaussian":
            out = self.out_grid or self.in_grid
            if out.shape != self.in_grid.shape:
                raise ValueError(f"{self.kind} media require matching in/out grids")
        if self.kind == "multi_screen":
            if self.n_screens < 1:
                raise ValueError("multi_screen needs at least one screen")
            if self.screen_spacing <= 0 or self.wavelength <= 0:
                raise ValueError("screen spacing and wavelength must be positive")

    @property
    def resolved_out_grid(self) -> ModeGrid:
        return self.out_grid or replace(self.in_grid, plane=MOMENTUM)


def synth_medium(spec: MediumSpec) -> TransferMatrix:
    """Generate a scattering-medium transfer matrix from ``spec``.

    Bit-reproducible for a fixed seed. The returned matrix maps the input
    position basis to the far-field camera plane (see module docstring).
    """
    rng = substream(spec.seed, "medium", spec.kind)
    out_grid = spec.resolved_out_grid

    if spec.kind == "thick_iid_gaussian":
        m, n = out_grid.n_modes, spec.in_grid.n_modes
        t = (rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n))) / np.sqrt(2)
        # unit mean squared singular value: sum sigma^2 = ||T||_F^2 = min(m, n)
        t *= np.sqrt(min(m, n)) / np.linalg.norm(t)
        return TransferMatrix(t, in_grid=spec.in_grid, out_grid=out_grid, meta={"kind": spec.kind})

    if spec.kind == "thin_phase":
        phases = rng.uniform(0.0, 2.0 * np.pi, spec.in_grid.n_modes)
        f = dft_matrix(spec.in_grid)
        t = f.entries * np.exp(1j * phases)[None, :]
        return TransferMatrix(
            t, in_grid=spec.in_grid, out_grid=out_grid,
            meta={"kind": spec.kind, "screen_phases": phases},
        )

    # multi_screen: screen, propagate, screen, ... then the Fourier lens
    n = spec.in_grid.n_modes
    prop = free_space_kernel(spec.in_grid, spec.screen_spacing, spec.wavelength)
    screens = [rng.uniform(0.0, 2.0 * np.pi, n) for _ in range(spec.n_screens)]
    m = np.diag(np.exp(1j * screens[0]))
    for ph in screens[1:]:
        m = prop.entries @ m
        m = np.exp(1j * ph)[:, None] * m
    t = dft_matrix(spec.in_grid).entries @ m
    return TransferMatrix(
        t, in_grid=spec.in_grid, out_grid=out_grid,
        meta={"kind": spec.kind, "screen_phases": screens, "aliasing_warning": prop.meta["aliasing_warning"]},
    )


def measure_tm(
    medium: TransferMatrix,
    reference_mode: int | None = None,
    counts_per_pixel: float | None = None,
    seed: int = 0,
) -> TransferMatrix:
    """Simulated interferometric transmission-matrix measurement.

    One input mode is held static as a co-propagating reference while every
    probe mode is stepped through the four phases {0, pi/2, pi, 3pi/2}; only
    output intensities are recorded. The estimate equals ``D' @ T`` where D'
    is an unknown output-side diagonal (the reference speckle), which cancels
    for any input-side correction derived from it.

    With ``counts_per_pixel`` set, intensities are Poisson-sampled at that
    mean photon budget per output mode and step.

    Output modes where the reference intensity vanishes carry no interference
    signal; their row indices are reported in ``meta["unreliable_rows"]``.
    """
    t = medium.entries
    ref = medium.in_grid.center_index if reference_mode is None else int(reference_mode)
    if not 0 <= ref < medium.n_in:
        raise ValueError(f"reference mode {ref} outside input basis")
    t_ref = t[:, ref]

    steps = np.array([0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi])
    intensities = []
    rng = substream(seed, "measure_tm") if counts_per_pixel else None
    for theta in steps:
        inten = np.abs(t_ref[:, None] + np.exp(1j * theta) * t) ** 2
        if counts_per_pixel:
            scale = counts_per_pixel / max(float(inten.mean()), 1e-300)
            inten = rng.poisson(inten * scale) / scale
        intensities.append(inten)
    i0, i1, i2, i3 = intensities
    est = (i0 - i2) / 4.0 + 1j * (i3 - i1) / 4.0

    ref_power = np.abs(t_ref) ** 2
    unreliable = np.flatnonzero(ref_power < 1e-12 * max(ref_power.max(), 1e-300))
    return TransferMatrix(
        est, in_grid=medium.in_grid, out_grid=medium.out_grid,
        meta={"measured": True, "reference_mode": ref, "unreliable_rows": unreliable.tolist()},
    )


def _pack_grid(grid: ModeGrid) -> bytes:
    return struct.pack("<IIdB", grid.width, grid.height, grid.pitch, _PLANE_CODES[grid.plane])


def _unpack_grid(buf: bytes, offset: int) -> tuple[ModeGrid, int]:
    width, height, pitch, plane = struct.unpack_from("<IIdB", buf, offset)
    return ModeGrid(width, height, pitch, _PLANE_NAMES[plane]), offset + struct.calcsize("<IIdB")


def save_transfer_matrix(tm: TransferMatrix, path: str | Path) -> None:
    """Container format: magic, two grid descriptors, then row-major complex
    entries as little-endian float64 (re, im) pairs."""
    path = Path(path)
    flat = np.ascontiguousarray(tm.entries, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_ETMX_MAGIC)
        fh.write(_pack_grid(tm.in_grid))
        fh.write(_pack_grid(tm.out_grid))
        fh.write(flat.tobytes())


def load_transfer_matrix(path: str | Path) -> TransferMatrix:
    buf = Path(path).read_bytes()
    if buf[: len(_ETMX_MAGIC)] != _ETMX_MAGIC:
        raise ValueError(f"{path}: not a transfer-matrix container")
    offset = len(_ETMX_MAGIC)
    in_grid, offset = _unpack_grid(buf, offset)
    out_grid, offset = _unpack_grid(buf, offset)
    entries = np.frombuffer(buf, dtype="<c16", offset=offset).reshape(out_grid.n_modes, in_grid.n_modes)
    return TransferMatrix(entries.copy(), in_grid=in_grid, out_grid=out_grid)

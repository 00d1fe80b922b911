"""Discrete two-photon states, propagation through medium + phase mask, and
refocusing quality metrics.

A pair state is a complex matrix over (mode, mode); its squared modulus is the
coincidence probability law. Propagation is the congruence transform
``H psi H^t`` with ``H`` the single-photon transfer chain, so each photon
acquires the programmable mask phase once and the pair acquires it twice.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .optics import (
    MOMENTUM,
    POSITION,
    ModeGrid,
    TransferMatrix,
    _ETMX_MAGIC,
    _pack_grid,
    _unpack_grid,
    dft_matrix,
    parity_permutation,
)

INPUT = "input"


@dataclass
class TwoPhotonState:
    """Joint amplitude of a photon pair over a discrete mode basis.

    ``efficiency`` records the squared-norm fraction surviving the last
    propagation before renormalization (1.0 for freshly constructed states).
    """

    amplitudes: np.ndarray
    grid: ModeGrid
    basis: str = INPUT
    efficiency: float = 1.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.complex128)
        n = self.grid.n_modes
        if self.amplitudes.shape != (n, n):
            raise ValueError(f"state shape {self.amplitudes.shape} != ({n}, {n})")

    @property
    def n_modes(self) -> int:
        return self.grid.n_modes

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def total_probability(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def normalized(self) -> "TwoPhotonState":
        norm = np.sqrt(self.total_probability())
        if norm == 0:
            raise ValueError("cannot normalize a zero state")
        return replace(self, amplitudes=self.amplitudes / norm)

    def exchange_asymmetry(self) -> float:
        return float(np.abs(self.amplitudes - self.amplitudes.T).max())


@dataclass(frozen=True)
class GaussianPairSpec:
    """Double-Gaussian pair amplitude at the source plane.

    ``sigma_r`` is the relative-coordinate (position correlation) width in
    meters, ``sigma_k`` the sum-coordinate (momentum correlation) width in
    rad/m. The amplitude is
    ``A exp(-|r1 - r2|^2 / (4 sigma_r^2)) exp(-|r1 + r2|^2 sigma_k^2 / 4)``.
    """

    sigma_r: float
    sigma_k: float
    amplitude: float = 1.0

    def __post_init__(self):
        if self.sigma_r <= 0 or self.sigma_k <= 0:
            raise ValueError("correlation widths must be positive")


@dataclass
class PhaseMask:
    """Per-macro-pixel phase values of a programmable phase plane."""

    phases: np.ndarray
    grid: ModeGrid

    def __post_init__(self):
        self.phases = np.mod(np.asarray(self.phases, dtype=np.float64), 2.0 * np.pi)
        if self.phases.shape != (self.grid.n_modes,):
            raise ValueError(f"mask length {self.phases.shape} != {self.grid.n_modes} macro-pixels")

    def diagonal(self) -> np.ndarray:
        return np.exp(1j * self.phases)

    def save(self, path: str | Path) -> None:
        """Plain-text phase list (radians), one macro-pixel per line, grid order."""
        Path(path).write_text("".join(f"{p:.17g}\n" for p in self.phases))

    @classmethod
    def load(cls, path: str | Path, grid: ModeGrid) -> "PhaseMask":
        vals = [float(line) for line in Path(path).read_text().split()]
        return cls(np.array(vals), grid)


def flat_mask(grid: ModeGrid) -> PhaseMask:
    return PhaseMask(np.zeros(grid.n_modes), grid)


def input_state(grid: ModeGrid, spec: GaussianPairSpec | None = None) -> TwoPhotonState:
    """Pair state at the source/modulator plane.

    Without a spec the state is the normalized identity matrix: pairs
    perfectly correlated at the macro-pixel scale, appropriate when the pixel
    pitch is much coarser than the physical correlation width. With a
    :class:`GaussianPairSpec` the double-Gaussian amplitude is sampled on the
    grid and normalized.
    """
    n = grid.n_modes
    if spec is None:
        psi = np.eye(n, dtype=np.complex128) / np.sqrt(n)
        return TwoPhotonState(psi, grid=grid, basis=INPUT)

    if spec.sigma_r < grid.pitch:
        warnings.warn(
            f"position correlation width {spec.sigma_r:.3g} m below the grid pitch "
            f"{grid.pitch:.3g} m; correlations are under-resolved",
            stacklevel=2,
        )
    x, y = grid.mode_coords()
    dx = x[:, None] - x[None, :]
    dy = y[:, None] - y[None, :]
    sx = x[:, None] + x[None, :]
    sy = y[:, None] + y[None, :]
    psi = spec.amplitude * np.exp(
        -(dx**2 + dy**2) / (4.0 * spec.sigma_r**2)
        - (sx**2 + sy**2) * spec.sigma_k**2 / 4.0
    )
    state = TwoPhotonState(psi.astype(np.complex128), grid=grid, basis=INPUT)
    return state.normalized()


def propagate(
    psi_in: TwoPhotonState,
    medium: TransferMatrix,
    mask: PhaseMask | None = None,
    basis: str = MOMENTUM,
) -> TwoPhotonState:
    """Send a pair state through mask + medium and detect in the chosen basis.

    The medium maps the input basis to the far-field camera plane, so the
    momentum-basis chain is ``T D`` and the position-basis chain ``F T D``
    with F the Fourier matrix of the output grid. The result is renormalized;
    the surviving squared-norm fraction is stored as ``efficiency``.
    """
    if basis not in (POSITION, MOMENTUM):
        raise ValueError(f"basis must be position or momentum, got {basis!r}")
    if psi_in.n_modes != medium.n_in:
        raise ValueError(f"state has {psi_in.n_modes} modes, medium expects {medium.n_in}")
    h = medium.entries
    if mask is not None:
        if mask.grid.n_modes != medium.n_in:
            raise ValueError(f"mask has {mask.grid.n_modes} pixels, medium expects {medium.n_in}")
        h = h * mask.diagonal()[None, :]
    if basis == POSITION:
        h = dft_matrix(medium.out_grid).entries @ h

    out = h @ psi_in.amplitudes @ h.T
    total_in = psi_in.total_probability()
    total_out = float(np.sum(np.abs(out) ** 2))
    if total_out == 0:
        raise ValueError("propagation annihilated the state (zero medium row?)")
    out_grid = replace(medium.out_grid, plane=basis)
    return TwoPhotonState(
        out / np.sqrt(total_out),
        grid=out_grid,
        basis=basis,
        efficiency=total_out / total_in,
    )


def correction_mask(tm: TransferMatrix, focus_mode: int | None = None) -> PhaseMask:
    """Phase-conjugation mask from one row of a (measured) transfer matrix.

    Phase k is the argument of the conjugated matrix element coupling input
    macro-pixel k to the focus output mode (default: the central camera
    pixel). Any output-side diagonal ambiguity of a measured matrix shifts
    all phases by one constant and is therefore harmless.
    """
    p = tm.out_grid.center_index if focus_mode is None else int(focus_mode)
    if not 0 <= p < tm.n_out:
        raise ValueError(f"focus mode {p} outside output basis")
    row = tm.entries[p, :]
    if np.all(row == 0):
        warnings.warn(f"transfer-matrix row {p} is identically zero; returning a flat mask", stacklevel=2)
        return flat_mask(tm.in_grid)
    return PhaseMask(np.angle(np.conj(row)), tm.in_grid)


def condition_scores(psi_momentum: TwoPhotonState, psi_position: TwoPhotonState) -> tuple[float, float]:
    """Refocusing quality of a pair state in both detection bases.

    score2: probability mass on exact anti-correlated (point-symmetric) pixel
    pairs of the momentum-basis state. score3: mass on exact same-pixel pairs
    of the position-basis state. Both are 1 for a perfectly refocused pair
    and ~1/modes for fully scrambled speckle.
    """
    if psi_momentum.grid.shape != psi_position.grid.shape:
        raise ValueError("both states must share the same grid shape")
    pm = psi_momentum.probabilities()
    pp = psi_position.probabilities()
    par = parity_permutation(psi_momentum.grid)
    idx = np.arange(psi_momentum.n_modes)
    score2 = float(pm[par[idx], idx].sum() / pm.sum())
    score3 = float(np.trace(pp) / pp.sum())
    return score2, score3


_BASIS_CODES = {POSITION: 0, MOMENTUM: 1, INPUT: 2}
_BASIS_NAMES = {v: k for k, v in _BASIS_CODES.items()}


def save_state(state: TwoPhotonState, path: str | Path) -> None:
    """Transfer-matrix container layout with a basis tag byte after the grids."""
    flat = np.ascontiguousarray(state.amplitudes, dtype="<c16")
    with open(path, "wb") as fh:
        fh.write(_ETMX_MAGIC)
        fh.write(_pack_grid(state.grid))
        fh.write(_pack_grid(state.grid))
        fh.write(bytes([_BASIS_CODES[state.basis]]))
        fh.write(flat.tobytes())


def load_state(path: str | Path) -> TwoPhotonState:
    buf = Path(path).read_bytes()
    if buf[: len(_ETMX_MAGIC)] != _ETMX_MAGIC:
        raise ValueError(f"{path}: not a state container")
    offset = len(_ETMX_MAGIC)
    grid, offset = _unpack_grid(buf, offset)
    _, offset = _unpack_grid(buf, offset)
    basis = _BASIS_NAMES[buf[offset]]
    offset += 1
    n = grid.n_modes
    amp = np.frombuffer(buf, dtype="<c16", offset=offset).reshape(n, n)
    return TwoPhotonState(amp.copy(), grid=grid, basis=basis)

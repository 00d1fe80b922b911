"""Phase-mask optimization refocusing photon pairs in two bases at once.

System model (thick medium, one or two programmable phase planes): pairs
start perfectly correlated at the first plane, acquire its mask twice,
propagate a free-space distance to a second plane and mask, then traverse
the medium. Detection happens either directly (position) or behind a Fourier
transform (momentum):

    psi_pos = T D2 P D1^2 P^t D2 T^t / sqrt(n)
    psi_mom = F psi_pos F^t

Here the medium T is a position-to-position operator. The objective is the
pair-coincidence mass refocused at the center of both marginals: the
diagonal of |psi_pos|^2 plus the anti-diagonal (point-symmetric pairs) of
|psi_mom|^2, in the raw (unnormalized) units of the model.

The optimizer is sequential coordinate ascent over macro-pixels with a
discrete phase grid, alternating planes when both are present. Because each
mask enters the pair state through a rank-one column update, candidate
objectives are evaluated incrementally in O(n) instead of O(n^3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optics import TransferMatrix, dft_matrix, free_space_kernel, parity_permutation
from .states import PhaseMask

DEFAULT_PLANE_DISTANCE = 0.2
DEFAULT_FOCAL_LENGTH = 0.5
DEFAULT_PUMP_DIAMETER = 5e-3
DEFAULT_PHOTON_WAVELENGTH = 810e-9


@dataclass
class ShapingProblem:
    """Medium plus mask planes and objective weights.

    ``mask2 is None`` means a single phase plane sitting directly at the
    medium input (no free-space section). ``weights`` balances the position
    against the momentum refocusing term.
    """

    medium: TransferMatrix
    mask1: PhaseMask
    mask2: PhaseMask | None = None
    plane_distance: float = DEFAULT_PLANE_DISTANCE
    wavelength: float = DEFAULT_PHOTON_WAVELENGTH
    weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        n = self.medium.n_in
        if self.mask1.grid.n_modes != n:
            raise ValueError("first mask does not match the medium input basis")
        if self.mask2 is not None and self.mask2.grid.n_modes != n:
            raise ValueError("second mask does not match the medium input basis")
        if self.mask2 is not None and self.medium.in_grid.shape != self.medium.out_grid.shape:
            raise ValueError("two-plane problems need matching in/out grids")

    def chain(self) -> np.ndarray:
        """Single-photon transfer including both masks."""
        if self.mask2 is None:
            return self.medium.entries * self.mask1.diagonal()[None, :]
        p = free_space_kernel(self.medium.in_grid, self.plane_distance, self.wavelength)
        mid = (self.medium.entries * self.mask2.diagonal()[None, :]) @ p.entries
        return mid * self.mask1.diagonal()[None, :]


@dataclass
class OptimizeResult:
    mask1: PhaseMask
    mask2: PhaseMask | None
    trace: np.ndarray
    evaluations: int
    exhausted_mid_pass: bool


def _pair_terms(chain: np.ndarray, f: np.ndarray, par: np.ndarray) -> tuple[float, float]:
    n = chain.shape[1]
    psi_pos = chain @ chain.T / np.sqrt(n)
    psi_mom = f @ psi_pos @ f.T
    idx = np.arange(psi_pos.shape[0])
    pos = float(np.sum(np.abs(np.diag(psi_pos)) ** 2))
    mom = float(np.sum(np.abs(psi_mom[par[idx], idx]) ** 2))
    return pos, mom


def objective(problem: ShapingProblem) -> float:
    """Weighted central coincidence mass of both marginals (raw model units)."""
    f = dft_matrix(problem.medium.out_grid).entries
    par = parity_permutation(problem.medium.out_grid)
    pos, mom = _pair_terms(problem.chain(), f, par)
    w1, w2 = problem.weights
    return w1 * pos + w2 * mom


class _FirstPlaneSweep:
    """Incremental objective for the input-plane mask: the pair state is
    linear in u = exp(2i theta1), through column vectors M[:, k], N[:, k]."""

    def __init__(self, problem: ShapingProblem, theta1, theta2, f, par):
        t = problem.medium.entries
        if problem.mask2 is None:
            a = t
        else:
            p = free_space_kernel(problem.medium.in_grid, problem.plane_distance, problem.wavelength).entries
            a = (t * np.exp(1j * theta2)[None, :]) @ p
        n = a.shape[1]
        self.m = (a * a) / np.sqrt(n)
        b = f @ a
        self.nmat = (b[par, :] * b) / np.sqrt(n)
        self.u = np.exp(2j * theta1)
        self.pos = self.m @ self.u
        self.mom = self.nmat @ self.u
        self.w1, self.w2 = problem.weights

    def value(self) -> float:
        return self.w1 * float(np.sum(np.abs(self.pos) ** 2)) + self.w2 * float(np.sum(np.abs(self.mom) ** 2))

    def candidate_values(self, k: int, new_u: np.ndarray) -> np.ndarray:
        delta = new_u - self.u[k]
        pos_c = self.pos[:, None] + self.m[:, k, None] * delta[None, :]
        mom_c = self.mom[:, None] + self.nmat[:, k, None] * delta[None, :]
        return self.w1 * np.sum(np.abs(pos_c) ** 2, axis=0) + self.w2 * np.sum(np.abs(mom_c) ** 2, axis=0)

    def accept(self, k: int, new_u: complex) -> None:
        delta = new_u - self.u[k]
        self.pos += self.m[:, k] * delta
        self.mom += self.nmat[:, k] * delta
        self.u[k] = new_u


class _SecondPlaneSweep:
    """Incremental objective for the mid-plane mask, which enters the pair
    state quadratically; a single-pixel change is a rank-one update of
    S = T diag(v) G."""

    def __init__(self, problem: ShapingProblem, theta1, theta2, f, par):
        p = free_space_kernel(problem.medium.in_grid, problem.plane_distance, problem.wavelength).entries
        self.g = p @ (np.exp(2j * theta1)[:, None] * p.T)  # symmetric
        self.t = problem.medium.entries
        self.b = f @ self.t
        self.bp = self.b[par, :]
        self.v = np.exp(1j * theta2)
        c = self.t * self.v[None, :]
        cb = self.b * self.v[None, :]
        self.s = c @ self.g
        self.sb = cb @ self.g
        self.sbp = self.sb[par, :]
        self.par = par
        n = self.t.shape[1]
        self.scale = 1.0 / n  # |psi|^2 normalization of the identity input
        self.posvec = np.einsum("ij,ij->i", self.s, c)
        self.momvec = np.einsum("ij,ij->i", self.sbp, cb)
        self.w1, self.w2 = problem.weights

    def value(self) -> float:
        return self.scale * (
            self.w1 * float(np.sum(np.abs(self.posvec) ** 2))
            + self.w2 * float(np.sum(np.abs(self.momvec) ** 2))
        )

    def candidate_values(self, k: int, new_v: np.ndarray) -> np.ndarray:
        delta = new_v - self.v[k]
        gkk = self.g[k, k]
        tk = self.t[:, k]
        pos_lin = 2.0 * self.s[:, k] * tk
        pos_quad = gkk * tk * tk
        bk = self.b[:, k]
        bpk = self.bp[:, k]
        mom_lin = bpk * self.sb[:, k] + self.sbp[:, k] * bk
        mom_quad = gkk * bpk * bk
        pos_c = self.posvec[:, None] + pos_lin[:, None] * delta[None, :] + pos_quad[:, None] * (delta**2)[None, :]
        mom_c = self.momvec[:, None] + mom_lin[:, None] * delta[None, :] + mom_quad[:, None] * (delta**2)[None, :]
        return self.scale * (
            self.w1 * np.sum(np.abs(pos_c) ** 2, axis=0) + self.w2 * np.sum(np.abs(mom_c) ** 2, axis=0)
        )

    def accept(self, k: int, new_v: complex) -> None:
        delta = new_v - self.v[k]
        gkk = self.g[k, k]
        tk = self.t[:, k]
        bk = self.b[:, k]
        bpk = self.bp[:, k]
        self.posvec += 2.0 * delta * self.s[:, k] * tk + delta**2 * gkk * tk * tk
        self.momvec += delta * (bpk * self.sb[:, k] + self.sbp[:, k] * bk) + delta**2 * gkk * bpk * bk
        self.s += np.outer(tk * delta, self.g[k, :])
        self.sb += np.outer(bk * delta, self.g[k, :])
        self.sbp += np.outer(bpk * delta, self.g[k, :])
        self.v[k] = new_v


def optimize_masks(
    problem: ShapingProblem,
    budget: int,
    n_phases: int = 16,
    max_passes: int = 6,
    sweep: tuple = ("mask1", "mask2"),
) -> OptimizeResult:
    """Coordinate ascent over mask pixels with a fixed discrete phase grid.

    Every candidate evaluation costs one unit of ``budget``; a pixel keeps
    its phase unless a candidate strictly improves the objective, so the
    returned trace (one entry per visited pixel) never decreases. Passes
    alternate between the planes selected by ``sweep`` (a plane not listed
    stays frozen at its starting mask). Running out of budget mid-pass
    returns the best masks found so far with ``exhausted_mid_pass`` set.
    """
    n = problem.medium.n_in
    if budget < n:
        raise ValueError(f"budget {budget} below the macro-pixel count {n}")
    f = dft_matrix(problem.medium.out_grid).entries
    par = parity_permutation(problem.medium.out_grid)

    theta1 = problem.mask1.phases.copy()
    theta2 = problem.mask2.phases.copy() if problem.mask2 is not None else None
    grid_phases = 2.0 * np.pi * np.arange(n_phases) / n_phases

    plan = [m for m in sweep if m == "mask1" or (m == "mask2" and theta2 is not None)]
    if not plan:
        raise ValueError("nothing to optimize: sweep selects no present mask")
    spent = 0
    exhausted = False
    trace: list[float] = []

    def run_sweep(which: str) -> bool:
        nonlocal spent, exhausted
        if which == "mask1":
            sweep = _FirstPlaneSweep(problem, theta1, theta2, f, par)
            unit = np.exp(2j * grid_phases)
            target = theta1
        else:
            sweep = _SecondPlaneSweep(problem, theta1, theta2, f, par)
            unit = np.exp(1j * grid_phases)
            target = theta2
        current = sweep.value()
        if not trace:
            trace.append(current)
        for k in range(n):
            if spent + n_phases > budget:
                exhausted = True
                return False
            values = sweep.candidate_values(k, unit)
            spent += n_phases
            best = int(np.argmax(values))
            if values[best] > current * (1.0 + 1e-12) + 1e-300:
                sweep.accept(k, unit[best])
                target[k] = grid_phases[best]
                current = values[best]
            trace.append(current)
        return True

    for _ in range(max_passes):
        before = trace[-1] if trace else None
        for which in plan:
            if not run_sweep(which):
                break
        if exhausted:
            break
        if before is not None and trace[-1] <= before * (1.0 + 1e-9):
            break

    mask1 = PhaseMask(theta1, problem.mask1.grid)
    mask2 = PhaseMask(theta2, problem.mask2.grid) if theta2 is not None else None
    return OptimizeResult(mask1, mask2, np.array(trace), spent, exhausted)


def peak_to_background(image: np.ndarray, center: tuple[int, int], exclude: int = 2) -> float:
    """Central value over the mean of the field away from the center."""
    cy, cx = center
    peak = float(image[cy, cx])
    maskout = np.ones_like(image, dtype=bool)
    maskout[max(0, cy - exclude) : cy + exclude + 1, max(0, cx - exclude) : cx + exclude + 1] = False
    background = float(np.abs(image[maskout]).mean())
    return peak / background if background > 0 else np.inf

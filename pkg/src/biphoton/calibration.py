"""Sensor artifact characterization and removal: cross-talk and hot pixels.

Cross-talk produces genuine-looking coincidences between nearby pixels. It is
characterized once from a shutter-closed acquisition (only dark counts fire,
uniformly) and subtracted from signal data with an intensity-dependent model:

    gamma_corrected[q1, q2] = gamma_raw[q1, q2]
                              - gamma_dark[q1, q2] * alpha[q2] * sqrt(I[q1])

The per-pixel gain alpha is re-fitted on each signal acquisition from entries
at +-3 pixel horizontal separation, which photon correlations cannot reach,
so they are pure cross-talk. The written form of that fit leaves the first
pixel index free; it is resolved here by averaging the full correction-term
ratio over all first pixels with usable reference signal.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .jpd import Jpd, accumulate_jpd, project_minus
from .spadsim import FrameStack

RECOMMENDED_DARK_FRAMES = 100_000
_SUPPORT = 3  # cross-talk reaches at most this many pixels in each direction


@dataclass
class CrosstalkReference:
    """Dark coincidence tensor and mean dark image of a sensor."""

    gamma0: Jpd
    intensity: np.ndarray
    frames_used: int
    support_exceeded: bool = False

    def save(self, path: str | Path) -> None:
        self.gamma0.save(path)

    def offset_mask(self) -> np.ndarray:
        """Boolean (npix, npix) mask of pixel pairs within the +-3 offset box."""
        w, h = self.gamma0.width, self.gamma0.height
        x = np.arange(w)
        y = np.arange(h)
        dx = np.abs(x[:, None] - x[None, :]) <= _SUPPORT
        dy = np.abs(y[:, None] - y[None, :]) <= _SUPPORT
        # pixel index p = y*w + x; pair (p1, p2) in support iff both axes are
        return (dy[:, None, :, None] & dx[None, :, None, :]).reshape(h * w, h * w)


def characterize_crosstalk(dark: FrameStack) -> CrosstalkReference:
    """Estimate the cross-talk coincidence pattern from a shutter-closed stack.

    Flags ``support_exceeded`` when the difference-coordinate marginal shows
    significant mass outside the +-3 pixel box (tested against a block
    bootstrap of the estimator noise at each offset).
    """
    if dark.n_frames < RECOMMENDED_DARK_FRAMES:
        warnings.warn(
            f"only {dark.n_frames} dark frames; at least {RECOMMENDED_DARK_FRAMES} are "
            "recommended for a stable cross-talk reference",
            stacklevel=2,
        )
    gamma0 = accumulate_jpd(dark)
    intensity = dark.mean_image()

    proj = project_minus(gamma0)
    cy, cx = proj.center
    # the out-of-support flag needs only moderate depth; cap its cost
    se_stack = dark
    cap = 8 * 25_000
    if dark.n_frames > cap:
        se_stack = FrameStack(dark.width, dark.height, dark.packed[:cap], dark.seed)
    se = _minus_projection_se(se_stack, blocks=8) * np.sqrt(se_stack.n_frames / dark.n_frames)
    outside = np.ones_like(proj.image, dtype=bool)
    outside[cy - _SUPPORT : cy + _SUPPORT + 1, cx - _SUPPORT : cx + _SUPPORT + 1] = False
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(se > 0, np.abs(proj.image) / se, 0.0)
    support_exceeded = bool(np.any(z[outside] > 6.0))
    return CrosstalkReference(gamma0, intensity, dark.n_frames, support_exceeded)


def _minus_projection_se(stack: FrameStack, blocks: int = 8) -> np.ndarray:
    """Standard error of the difference-coordinate marginal, from disjoint
    sub-stacks of the acquisition."""
    per_block = stack.n_frames // blocks
    if per_block < 2:
        return np.zeros((2 * stack.height - 1, 2 * stack.width - 1))
    images = []
    for b in range(blocks):
        sub = FrameStack(stack.width, stack.height, stack.packed[b * per_block : (b + 1) * per_block], stack.seed)
        images.append(project_minus(accumulate_jpd(sub)).image)
    return np.std(images, axis=0, ddof=1) / np.sqrt(blocks)


def correct_crosstalk(raw: Jpd, ref: CrosstalkReference, intensity: np.ndarray) -> Jpd:
    """Subtract the intensity-scaled dark cross-talk pattern from a signal JPD.

    ``intensity`` is the mean image of the signal acquisition. The correction
    is confined to the +-3 offset support. Second-pixel columns without any
    usable +-3 reference fall back to the acquisition-global gain; they are
    listed in the returned tensor's ``meta["alpha_fallback_pixels"]``.
    """
    if (raw.width, raw.height) != (ref.gamma0.width, ref.gamma0.height):
        raise ValueError("signal and reference geometries differ")
    if intensity.shape != (raw.height, raw.width):
        raise ValueError("intensity image has wrong shape")

    w, h = raw.width, raw.height
    npix = w * h
    sqrt_i = np.sqrt(np.clip(intensity, 0.0, None)).ravel()
    g0 = ref.gamma0.gamma * ref.offset_mask()

    graw = raw.gamma
    alpha = np.zeros(npix)
    support = ref.offset_mask()

    # Reference entries for the gain fit: coincidences of the +-3-shifted
    # columns with first pixels at Chebyshev separation exactly 3, where
    # photon correlations (width << 3 pixels) cannot reach, so the entries
    # are cross-talk only. Masks are geometric, never value-based, keeping
    # the sums unbiased under estimator noise.
    x = np.arange(w)
    y = np.arange(h)
    chev = np.maximum(
        np.abs(y[:, None, None, None] - y[None, None, :, None]),
        np.abs(x[None, :, None, None] - x[None, None, None, :]),
    ).reshape(npix, npix)
    ring = support & (chev == _SUPPORT)

    xs = np.arange(npix) % w
    num_col = np.zeros(npix)
    den_col = np.zeros(npix)
    den_weight = np.zeros(npix)  # sum over used entries of I (for the noise gate)
    for ok, shift in ((xs >= _SUPPORT, -_SUPPORT), (xs < w - _SUPPORT, +_SUPPORT)):
        cols = np.flatnonzero(ok)
        use = ring[:, cols + shift]
        num_col[cols] += (graw[:, cols + shift] * use).sum(axis=0)
        den_col[cols] += (g0[:, cols + shift] * use * sqrt_i[:, None]).sum(axis=0)
        den_weight[cols] += (use * (sqrt_i**2)[:, None]).sum(axis=0)

    # per-(i,j) correction-term ratios num / (den sqrt(I)) averaged with
    # weight den sqrt(I) reduce to these ratios of sums; a column only gets
    # its own gain when its reference clears the estimator noise floor,
    # otherwise it falls back to the acquisition-global ratio
    sigma_ref = float(np.std(ref.gamma0.gamma[~support])) if np.any(~support) else 0.0
    den_sigma = sigma_ref * np.sqrt(den_weight)
    den_all = float(den_col.sum())
    den_all_sigma = sigma_ref * np.sqrt(float(den_weight.sum()))
    if den_all > max(5.0 * den_all_sigma, 0.0) and den_all > 0:
        global_alpha = float(num_col.sum()) / den_all
    else:
        global_alpha = 0.0  # reference carries no significant cross-talk
    has = den_col > 5.0 * den_sigma
    alpha[has] = num_col[has] / den_col[has]
    alpha[~has] = global_alpha
    fallback = np.flatnonzero(~has).tolist()

    corrected = graw - g0 * alpha[None, :] * sqrt_i[:, None]
    np.fill_diagonal(corrected, 0.0)
    return Jpd(corrected, w, h, raw.frames_used,
               meta={"alpha_fallback_pixels": fallback, "global_alpha": global_alpha})


@dataclass
class HotPixelMask:
    """Defective-pixel map; masked pixels are zeroed in downstream analysis."""

    mask: np.ndarray
    threshold_fraction: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def pixels(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.mask)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]

    def apply_to_jpd(self, jpd: Jpd) -> Jpd:
        """Zero every coincidence row and column touching a masked pixel."""
        flat = self.mask.ravel()
        gamma = jpd.gamma.copy()
        gamma[flat, :] = 0.0
        gamma[:, flat] = 0.0
        return Jpd(gamma, jpd.width, jpd.height, jpd.frames_used)

    def apply_to_image(self, image: np.ndarray) -> np.ndarray:
        out = np.array(image, dtype=np.float64)
        out[self.mask] = 0.0
        return out

    def save(self, path: str | Path) -> None:
        """Plain-text pixel list: one "x y" pair per line, preceded by the
        threshold used."""
        lines = [f"# threshold_fraction={self.threshold_fraction:.17g}"]
        lines += [f"{x} {y}" for x, y in self.pixels()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path, width: int, height: int) -> "HotPixelMask":
        mask = np.zeros((height, width), dtype=bool)
        threshold = 0.0
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                threshold = float(line.split("=", 1)[1])
                continue
            x, y = (int(v) for v in line.split())
            mask[y, x] = True
        return cls(mask, threshold)


def find_hot_pixels(dark: FrameStack, threshold_fraction: float = 0.10) -> HotPixelMask:
    """Threshold the summed dark image at a fraction of its maximum.

    Pixels at or above ``threshold_fraction * max`` are flagged. The rule
    presumes genuine hot pixels sit far above the uniform dark level; when
    the threshold does not separate outliers from the bulk (the median pixel
    itself clears it, as on a defect-free sensor) nothing is flagged.
    """
    if not 0 < threshold_fraction <= 1:
        raise ValueError("threshold_fraction must be in (0, 1]")
    counts = dark.sum_image()
    peak = counts.max()
    level = threshold_fraction * peak
    if peak == 0 or np.median(counts) >= level:
        return HotPixelMask(np.zeros((dark.height, dark.width), dtype=bool), threshold_fraction)
    return HotPixelMask(counts >= level, threshold_fraction)

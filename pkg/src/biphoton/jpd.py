"""Joint probability distribution estimation from binary frame streams.

The 4-index coincidence tensor between pixels (i, j) and (k, l) is stored as
a dense (n_pixels, n_pixels) matrix over flat row-major pixel indices. The
estimator removes accidental coincidences with the product of consecutive
frames:

    gamma = (1/M) sum_l [ I_l (x) I_l  -  I_l (x) I_{l+1} ]

over M = n_frames - 1 terms. Same-pixel entries are unobservable on a binary
camera and are held at zero. Entries can be negative; they are probability
*excesses*, not probabilities.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spadsim import CHUNK_FRAMES, FrameStack

_JPD_MAGIC = b"EJPD0001"

# above this many pixels the dense frame x frame matmul gets replaced by
# per-frame lit-pixel lists (the O(pixels^2) memory wall moves elsewhere)
_DENSE_PIXEL_LIMIT = 1024


@dataclass
class Jpd:
    """Coincidence-excess tensor plus the geometry it was estimated on."""

    gamma: np.ndarray
    width: int
    height: int
    frames_used: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        npix = self.width * self.height
        if self.gamma.shape != (npix, npix):
            raise ValueError(f"gamma shape {self.gamma.shape} != ({npix}, {npix})")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def as_4d(self) -> np.ndarray:
        """View indexed [y1, x1, y2, x2]."""
        h, w = self.height, self.width
        return self.gamma.reshape(h, w, h, w)

    def symmetrized(self) -> "Jpd":
        """Pair-swap symmetric version, (gamma + gamma^t) / 2."""
        return Jpd((self.gamma + self.gamma.T) / 2.0, self.width, self.height, self.frames_used)

    def total(self) -> float:
        return float(self.gamma.sum())

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_JPD_MAGIC)
            fh.write(struct.pack("<IIQ", self.width, self.height, self.frames_used))
            fh.write(np.ascontiguousarray(self.gamma, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Jpd":
        buf = Path(path).read_bytes()
        if buf[: len(_JPD_MAGIC)] != _JPD_MAGIC:
            raise ValueError(f"{path}: not a coincidence-tensor container")
        width, height, frames_used = struct.unpack_from("<IIQ", buf, len(_JPD_MAGIC))
        npix = width * height
        offset = len(_JPD_MAGIC) + struct.calcsize("<IIQ")
        gamma = np.frombuffer(buf, dtype="<f8", offset=offset).reshape(npix, npix)
        return cls(gamma.copy(), width, height, frames_used)


@dataclass
class Projection:
    """2D marginal of the coincidence tensor over sum or difference coordinates.

    The image spans the full coordinate range, (2H-1) x (2W-1). For the
    difference projection the zero-offset pixel sits at (H-1, W-1) and, like
    the tensor diagonal it sums, excludes same-pixel coincidences.
    """

    image: np.ndarray
    kind: str
    width: int
    height: int

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.kind not in ("sum", "minus"):
            raise ValueError(f"projection kind must be sum or minus, got {self.kind!r}")
        if self.image.shape != (2 * self.height - 1, 2 * self.width - 1):
            raise ValueError("projection image has wrong shape")

    @property
    def center(self) -> tuple[int, int]:
        """(row, col) of zero offset (minus) / doubled grid center (sum)."""
        if self.kind == "minus":
            return (self.height - 1, self.width - 1)
        return (self.height, self.width)

    def save_csv(self, path: str | Path) -> None:
        header = f"kind={self.kind} width={self.width} height={self.height}"
        np.savetxt(path, self.image, delimiter=",", header=header)

    @classmethod
    def load_csv(cls, path: str | Path) -> "Projection":
        with open(path) as fh:
            header = fh.readline().lstrip("# ").split()
        fields = dict(item.split("=") for item in header)
        image = np.loadtxt(path, delimiter=",", skiprows=1)
        return cls(np.atleast_2d(image), fields["kind"], int(fields["width"]), int(fields["height"]))


def accumulate_jpd(stack: FrameStack) -> Jpd:
    """Single-pass coincidence accumulation over a frame stack.

    Streams the stack in chunks, keeping O(pixels^2) memory. The last frame
    only serves as the accidental partner of its predecessor, so M+1 frames
    yield M estimator terms. The chunked reduction is associative with a
    fixed chunk grid, making the result independent of how work is split.
    """
    if stack.n_frames < 2:
        raise ValueError("need at least two frames")
    npix = stack.n_pixels
    m = stack.n_frames - 1

    genuine = np.zeros((npix, npix), dtype=np.float64)
    accidental = np.zeros((npix, npix), dtype=np.float64)

    if npix <= _DENSE_PIXEL_LIMIT:
        prev = None  # last frame of the previous chunk, still awaiting its accidental partner
        for start in range(0, stack.n_frames, CHUNK_FRAMES):
            stop = min(start + CHUNK_FRAMES, stack.n_frames)
            block = stack.unpack(start, stop).astype(np.float32)
            if prev is not None:
                accidental += np.outer(prev, block[0])
            n_own = min(stop, m) - start  # frames contributing their own estimator term
            if n_own > 0:
                own = block[:n_own]
                genuine += (own.T @ own).astype(np.float64)
                k = min(n_own, block.shape[0] - 1)  # own frames whose successor is in this chunk
                if k > 0:
                    accidental += (block[:k].T @ block[1 : k + 1]).astype(np.float64)
            prev = block[-1].astype(np.float64) if stop - 1 < m else None
    else:
        prev_pixels = None
        for start in range(0, stack.n_frames, CHUNK_FRAMES):
            stop = min(start + CHUNK_FRAMES, stack.n_frames)
            block = stack.unpack(start, stop)
            rows, cols = np.nonzero(block)
            bounds = np.searchsorted(rows, np.arange(block.shape[0] + 1))
            for local in range(block.shape[0]):
                pixels = cols[bounds[local] : bounds[local + 1]]
                if prev_pixels is not None:
                    np.add.at(accidental, (prev_pixels[:, None], pixels[None, :]), 1.0)
                prev_pixels = pixels if start + local < m else None
                if prev_pixels is not None:
                    np.add.at(genuine, (pixels[:, None], pixels[None, :]), 1.0)

    gamma = (genuine - accidental) / m
    np.fill_diagonal(gamma, 0.0)
    return Jpd(gamma, stack.width, stack.height, m)


def project_sum(jpd: Jpd) -> Projection:
    """Marginal over the pixel-sum coordinate (pairs emitted symmetrically
    about a point pile up in one peak). Mass-preserving; out-of-range index
    combinations do not occur in the forward accumulation."""
    h, w = jpd.height, jpd.width
    g4 = jpd.as_4d()
    canvas = np.zeros((2 * h - 1, 2 * w - 1))
    for y2 in range(h):
        for x2 in range(w):
            canvas[y2 : y2 + h, x2 : x2 + w] += g4[:, :, y2, x2]
    return Projection(canvas, "sum", w, h)


def project_minus(jpd: Jpd) -> Projection:
    """Marginal over the pixel-difference coordinate (oriented separation
    between the two detections). The center collects the tensor diagonal,
    whose same-pixel entries are zero by construction."""
    h, w = jpd.height, jpd.width
    g4 = jpd.as_4d()
    canvas = np.zeros((2 * h - 1, 2 * w - 1))
    for y2 in range(h):
        for x2 in range(w):
            canvas[h - 1 - y2 : 2 * h - 1 - y2, w - 1 - x2 : 2 * w - 1 - x2] += g4[:, :, y2, x2]
    return Projection(canvas, "minus", w, h)


def conditional_image(jpd: Jpd, ref_pixel: tuple[int, int], hot_mask=None) -> np.ndarray:
    """Coincidence image conditioned on one detection at ``ref_pixel`` (x, y)."""
    x, y = ref_pixel
    if not (0 <= x < jpd.width and 0 <= y < jpd.height):
        raise ValueError(f"reference pixel ({x}, {y}) outside sensor")
    if hot_mask is not None and hot_mask.mask[y, x]:
        raise ValueError(f"reference pixel ({x}, {y}) is masked as hot")
    return jpd.gamma[:, y * jpd.width + x].reshape(jpd.height, jpd.width).copy()

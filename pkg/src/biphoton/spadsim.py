"""Synthetic binary single-photon-camera frame streams.

Each frame is a {0,1} image: pixels fire on photon pairs drawn from a joint
probability law, uncorrelated singles, dark counts, and hot-pixel excess;
lit pixels can then trigger neighbours through a short-range cross-talk
kernel. The camera has no photon-number resolution, so everything clips to
one bit per pixel and same-pixel pair hits are unobservable.

Generation is chunked with one RNG substream per (chunk, process) pair, in a
fixed chunk grid, so output is bit-identical regardless of worker count and
the photon/dark realization does not change when cross-talk is toggled.
"""

from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import substream
from .states import TwoPhotonState

_STACK_MAGIC = b"SPADSTK1"
CHUNK_FRAMES = 8192
WORKERS_ENV = "BIPHOTON_WORKERS"

Kernel = dict[tuple[int, int], float]


def default_crosstalk_kernel(strength: float = 0.01) -> Kernel:
    """Short-range kernel peaked on nearest neighbours and decaying with
    distance but still measurable at 3 pixels, the reach typical of charge
    leakage between avalanche pixels."""
    kernel: Kernel = {}
    for dy in range(-3, 4):
        for dx in range(-3, 4):
            if dx == 0 and dy == 0:
                continue
            r = np.hypot(dx, np.sqrt(2.0) * dy)
            kernel[(dx, dy)] = float(strength * np.exp(-(r - 1.0) / 1.3))
    return kernel


@dataclass(frozen=True)
class SensorSpec:
    """Binary camera geometry, noise rates, and defect model.

    Rates are per frame: ``pair_rate`` mean detected pairs, ``singles_rate``
    mean uncorrelated single detections (uniform over the sensor),
    ``dark_rate`` mean dark counts per pixel. ``hot_pixels`` lists
    ((x, y), excess_rate) defects. ``crosstalk`` maps (dx, dy) offsets within
    +-3 pixels to trigger probabilities.
    """

    width: int
    height: int
    pair_rate: float = 1.0
    singles_rate: float = 0.0
    dark_rate: float = 0.0
    hot_pixels: tuple = ()
    crosstalk: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor dimensions must be positive")
        for rate in (self.pair_rate, self.singles_rate, self.dark_rate):
            if rate < 0:
                raise ValueError("rates must be non-negative")
        object.__setattr__(self, "hot_pixels", tuple(((int(x), int(y)), float(r)) for (x, y), r in self.hot_pixels))
        items = dict(self.crosstalk) if not isinstance(self.crosstalk, dict) else self.crosstalk
        for (dx, dy), p in items.items():
            if dx == 0 and dy == 0:
                raise ValueError("cross-talk kernel must vanish at zero offset")
            if abs(dx) > 3 or abs(dy) > 3:
                raise ValueError(f"cross-talk offset ({dx}, {dy}) outside the +-3 pixel support")
            if not 0 <= p <= 1:
                raise ValueError("cross-talk probabilities must be in [0, 1]")
        object.__setattr__(self, "crosstalk", tuple(sorted(((int(dx), int(dy)), float(p)) for (dx, dy), p in items.items())))
        for (x, y), r in self.hot_pixels:
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"hot pixel ({x}, {y}) outside sensor")
            if r < 0:
                raise ValueError("hot-pixel rates must be non-negative")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def kernel_dict(self) -> Kernel:
        return dict(self.crosstalk)


@dataclass
class FrameStack:
    """Ordered, bit-packed binary frames plus acquisition metadata.

    Frame order is acquisition order; the consecutive-frame accidental
    estimator depends on it. Bits are packed row-major, one bit per pixel,
    each frame byte-aligned.
    """

    width: int
    height: int
    packed: np.ndarray
    seed: int
    source_digest: str = ""

    def __post_init__(self):
        self.packed = np.ascontiguousarray(self.packed, dtype=np.uint8)
        if self.packed.ndim != 2 or self.packed.shape[1] != self.bytes_per_frame:
            raise ValueError("packed array shape does not match sensor geometry")

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def bytes_per_frame(self) -> int:
        return (self.n_pixels + 7) // 8

    @property
    def n_frames(self) -> int:
        return self.packed.shape[0]

    def unpack(self, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Frames [start, stop) as a (count, n_pixels) uint8 array."""
        stop = self.n_frames if stop is None else stop
        bits = np.unpackbits(self.packed[start:stop], axis=1, count=self.n_pixels)
        return bits

    def frame(self, i: int) -> np.ndarray:
        return self.unpack(i, i + 1).reshape(self.height, self.width)

    def mean_image(self) -> np.ndarray:
        """Per-pixel empirical fire probability as an image."""
        total = np.zeros(self.n_pixels, dtype=np.float64)
        for start in range(0, self.n_frames, CHUNK_FRAMES):
            total += self.unpack(start, min(start + CHUNK_FRAMES, self.n_frames)).sum(axis=0)
        return (total / max(self.n_frames, 1)).reshape(self.height, self.width)

    def sum_image(self) -> np.ndarray:
        """Per-pixel total counts as an image."""
        total = np.zeros(self.n_pixels, dtype=np.int64)
        for start in range(0, self.n_frames, CHUNK_FRAMES):
            total += self.unpack(start, min(start + CHUNK_FRAMES, self.n_frames)).sum(axis=0, dtype=np.int64)
        return total.reshape(self.height, self.width)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_STACK_MAGIC)
            fh.write(struct.pack("<IIQQ", self.width, self.height, self.n_frames, self.seed & 0xFFFFFFFFFFFFFFFF))
            fh.write(self.packed.tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "FrameStack":
        buf = Path(path).read_bytes()
        if buf[: len(_STACK_MAGIC)] != _STACK_MAGIC:
            raise ValueError(f"{path}: not a frame-stack container")
        width, height, n_frames, seed = struct.unpack_from("<IIQQ", buf, len(_STACK_MAGIC))
        bpf = (width * height + 7) // 8
        offset = len(_STACK_MAGIC) + struct.calcsize("<IIQQ")
        packed = np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(n_frames, bpf)
        return cls(width, height, packed.copy(), seed)


def _worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _generate_chunk(
    sensor: SensorSpec,
    chunk_index: int,
    count: int,
    pair_cdf: np.ndarray | None,
    mode_to_pixel: np.ndarray | None,
    dark_enabled: bool,
) -> np.ndarray:
    rng = substream(sensor.seed, "frames", chunk_index, 0)
    rng_ct = substream(sensor.seed, "frames", chunk_index, 1)
    npix = sensor.n_pixels
    frames = np.zeros((count, npix), dtype=bool)

    if pair_cdf is not None and sensor.pair_rate > 0:
        n_pairs = rng.poisson(sensor.pair_rate, count)
        total = int(n_pairs.sum())
        if total:
            joint = np.searchsorted(pair_cdf, rng.random(total), side="right")
            n_modes = mode_to_pixel.shape[0]
            rows = np.repeat(np.arange(count), n_pairs)
            frames[rows, mode_to_pixel[joint // n_modes]] = True
            frames[rows, mode_to_pixel[joint % n_modes]] = True

    if pair_cdf is not None and sensor.singles_rate > 0:
        n_singles = rng.poisson(sensor.singles_rate, count)
        total = int(n_singles.sum())
        if total:
            rows = np.repeat(np.arange(count), n_singles)
            frames[rows, rng.integers(0, npix, total)] = True

    if dark_enabled and sensor.dark_rate > 0:
        p_fire = -np.expm1(-sensor.dark_rate)
        frames |= rng.random((count, npix)) < p_fire

    for (x, y), excess in sensor.hot_pixels:
        if excess > 0:
            frames[:, y * sensor.width + x] |= rng.random(count) < -np.expm1(-excess)

    kernel = sensor.kernel_dict()
    if kernel:
        primary = frames.reshape(count, sensor.height, sensor.width)
        secondary = np.zeros_like(primary)
        # one generation deep: triggered neighbours do not re-trigger
        for (dx, dy), p in sorted(kernel.items()):
            fired = primary & (rng_ct.random(primary.shape) < p)
            ys = slice(max(0, dy), sensor.height + min(0, dy))
            xs = slice(max(0, dx), sensor.width + min(0, dx))
            ys_src = slice(max(0, -dy), sensor.height + min(0, -dy))
            xs_src = slice(max(0, -dx), sensor.width + min(0, -dx))
            secondary[:, ys, xs] |= fired[:, ys_src, xs_src]
        frames = (primary | secondary).reshape(count, npix)

    return frames


def _generate(sensor: SensorSpec, frames: int, pair_cdf, mode_to_pixel, dark_enabled, digest) -> FrameStack:
    if frames < 2:
        raise ValueError("at least two frames are required (the estimator pairs consecutive frames)")
    chunks = [(i, min(CHUNK_FRAMES, frames - i * CHUNK_FRAMES)) for i in range((frames + CHUNK_FRAMES - 1) // CHUNK_FRAMES)]

    def run(args):
        idx, count = args
        raw = _generate_chunk(sensor, idx, count, pair_cdf, mode_to_pixel, dark_enabled)
        return np.packbits(raw, axis=1)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            packed_chunks = list(pool.map(run, chunks))
    else:
        packed_chunks = [run(c) for c in chunks]
    return FrameStack(sensor.width, sensor.height, np.concatenate(packed_chunks, axis=0), sensor.seed, digest)


def simulate_frames(psi: TwoPhotonState, sensor: SensorSpec, frames: int) -> FrameStack:
    """Draw binary frames from a pair state's coincidence law.

    Per frame: Poisson(pair_rate) pairs with joint pixel law |psi|^2, Poisson
    uncorrelated singles and dark counts, hot-pixel excess, then one round of
    cross-talk triggering and binary clipping. The grid is embedded centered
    in the sensor.
    """
    prob = psi.probabilities().ravel()
    total = prob.sum()
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"|psi|^2 must be normalized (got total {total:.6g})")
    grid = psi.grid
    if grid.width > sensor.width or grid.height > sensor.height:
        raise ValueError(f"state grid {grid.width}x{grid.height} does not fit sensor {sensor.width}x{sensor.height}")
    ox = (sensor.width - grid.width) // 2
    oy = (sensor.height - grid.height) // 2
    mx, my = np.meshgrid(np.arange(grid.width), np.arange(grid.height))
    mode_to_pixel = ((my + oy) * sensor.width + (mx + ox)).ravel()

    cdf = np.cumsum(prob / total)
    cdf[-1] = 1.0
    digest = hashlib.sha256(np.ascontiguousarray(psi.amplitudes).tobytes()).hexdigest()
    return _generate(sensor, frames, cdf, mode_to_pixel, dark_enabled=True, digest=digest)


def dark_stack(sensor: SensorSpec, frames: int) -> FrameStack:
    """Shutter-closed acquisition: dark counts, hot pixels, and cross-talk only."""
    return _generate(sensor, frames, None, None, dark_enabled=True, digest="dark")

"""Synthetic motion sequences with exact flow, and a flicker simulator.

Motion is a fixed per-frame affine map ``M`` (3x3 homogeneous): content at
frame-1 position ``b`` sits at ``M^(t-1) b`` in frame ``t``. Frames are
rendered from a base texture large enough that every frame is fully covered.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .video_data import FlowField, FrameSequence, Mask

TEXTURE_RANGE = (0.1, 0.8)


class MotionError(ValueError):
    pass


@dataclass(frozen=True)
class MotionSpec:
    num_frames: int = 10
    height: int = 48
    width: int = 48
    translation: tuple[float, float] = (0.0, 0.0)
    # optional 2x2 linear part of the per-frame affine motion (row-major)
    linear: tuple[float, float, float, float] | None = None
    base: str = "noise"
    seed: int = 0
    texture_sigma: float = 1.5

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.height < 8 or self.width < 8:
            raise ValueError("frames must be at least 8x8")
        vals = list(self.translation) + list(self.linear or ())
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("motion parameters must be finite")

    @property
    def is_integer_translation(self) -> bool:
        return self.linear is None and all(float(v).is_integer() for v in self.translation)

    def step_matrix(self) -> np.ndarray:
        m = np.eye(3)
        if self.linear is not None:
            m[:2, :2] = np.asarray(self.linear, dtype=np.float64).reshape(2, 2)
        m[0, 2], m[1, 2] = self.translation
        return m

    def transform(self, t: int) -> np.ndarray:
        """Map from frame-1 coordinates to frame-``t`` coordinates."""
        if self.linear is None:
            m = np.eye(3)
            m[0, 2] = (t - 1) * self.translation[0]
            m[1, 2] = (t - 1) * self.translation[1]
            return m
        return np.linalg.matrix_power(self.step_matrix(), t - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MotionSpec":
        d = dict(d)
        d["translation"] = tuple(d["translation"])
        if d.get("linear") is not None:
            d["linear"] = tuple(d["linear"])
        return cls(**d)


@dataclass(frozen=True)
class FlickerSpec:
    mode: str = "sinusoid"
    amplitude: float = 0.2
    period: float = 4.0
    phase: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("sinusoid", "jitter", "gamma"):
            raise ValueError(f"unknown flicker mode {self.mode!r}")
        if not 0 <= self.amplitude < 1:
            raise ValueError("amplitude must lie in [0, 1)")
        if self.mode == "sinusoid" and self.period <= 0:
            raise ValueError("period must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FlickerSchedule:
    """Per-frame photometric parameters, row ``t - 1`` for frame ``t``."""

    gains: np.ndarray      # (T, 3)
    biases: np.ndarray     # (T, 3)
    gammas: np.ndarray     # (T,), all ones unless mode == "gamma"

    def apply(self, frame: np.ndarray, t: int) -> np.ndarray:
        x = frame.astype(np.float64)
        if not np.all(self.gammas == 1.0):
            x = np.power(x, self.gammas[t - 1])
        return np.clip(self.gains[t - 1] * x + self.biases[t - 1], 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"gains": self.gains.tolist(), "biases": self.biases.tolist(), "gammas": self.gammas.tolist()}


def flicker_schedule(spec: FlickerSpec, num_frames: int) -> FlickerSchedule:
    t = np.arange(1, num_frames + 1, dtype=np.float64)
    gains = np.ones((num_frames, 3))
    biases = np.zeros((num_frames, 3))
    gammas = np.ones(num_frames)
    if spec.mode == "sinusoid":
        g = 1.0 + spec.amplitude * np.sin(2 * np.pi * t / spec.period + spec.phase)
        gains[:] = g[:, None]
    elif spec.mode == "jitter":
        rng = np.random.default_rng(spec.seed)
        gains = 1.0 + spec.amplitude * rng.uniform(-1, 1, size=(num_frames, 3))
        biases = 0.25 * spec.amplitude * rng.uniform(-1, 1, size=(num_frames, 3))
    else:
        rng = np.random.default_rng(spec.seed)
        gammas = 1.0 + spec.amplitude * rng.uniform(-1, 1, size=num_frames)
    return FlickerSchedule(gains, biases, gammas)


def apply_flicker(seq: FrameSequence, spec: FlickerSpec) -> tuple[FrameSequence, FlickerSchedule]:
    sched = flicker_schedule(spec, len(seq))
    if spec.amplitude == 0:
        return FrameSequence(seq.frames.copy()), sched
    frames = np.stack([sched.apply(seq[t], t) for t in range(1, len(seq) + 1)])
    return FrameSequence(frames.astype(seq.frames.dtype)), sched


def ideal_output(seq: FrameSequence, sched: FlickerSchedule) -> FrameSequence:
    """Every frame given frame 1's photometric transform: flicker-free, ``O_1 = P_1``."""
    frames = np.stack([sched.apply(seq[t], 1) for t in range(1, len(seq) + 1)])
    return FrameSequence(frames.astype(seq.frames.dtype))


# --- textures --------------------------------------------------------------

def make_texture(kind: str, height: int, width: int, seed: int = 0, sigma: float = 1.5) -> np.ndarray:
    lo, hi = TEXTURE_RANGE
    if kind == "noise":
        rng = np.random.default_rng(seed)
        raw = rng.standard_normal((height, width, 3))
        tex = ndimage.gaussian_filter(raw, sigma=(sigma, sigma, 0), mode="wrap")
        # coarse component so large regions differ in brightness
        coarse = ndimage.gaussian_filter(rng.standard_normal((height, width, 3)), sigma=(4 * sigma, 4 * sigma, 0),
                                         mode="wrap")
        tex = tex / (tex.std() + 1e-12) + 2 * coarse / (coarse.std() + 1e-12)
        tex = (tex - tex.min()) / (tex.max() - tex.min() + 1e-12)
    elif kind == "checkerboard":
        yy, xx = np.mgrid[:height, :width]
        board = ((yy // 8 + xx // 8) % 2).astype(np.float64)
        tex = np.stack([board, 1 - board, 0.5 + 0.5 * board], axis=-1)
    else:
        from .video_data import _read_image

        img = _read_image(Path(kind)).astype(np.float64)
        reps = (math.ceil(height / img.shape[0]), math.ceil(width / img.shape[1]), 1)
        tex = np.tile(img, reps)[:height, :width]
        return tex
    return lo + (hi - lo) * tex


# --- geometry ----------------------------------------------------------------

def _pixel_grid(h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[:h, :w].astype(np.float64)
    return np.stack([xs, ys, np.ones_like(xs)], axis=0).reshape(3, -1)


def _map_pixels(spec: MotionSpec, t: int, ref: int) -> np.ndarray:
    """Positions in frame ``ref`` of every pixel of frame ``t``, shape (2, H*W)."""
    m = spec.transform(ref) @ np.linalg.inv(spec.transform(t))
    return (m @ _pixel_grid(spec.height, spec.width))[:2]


def analytic_flow(spec: MotionSpec, t: int, ref: int) -> FlowField:
    """Exact displacement from pixels of frame ``t`` to their position in frame ``ref``."""
    for k in (t, ref):
        if not 1 <= k <= spec.num_frames:
            raise IndexError(f"frame {k} outside generated range 1..{spec.num_frames}")
    h, w = spec.height, spec.width
    if spec.linear is None:
        du = (ref - t) * spec.translation[0]
        dv = (ref - t) * spec.translation[1]
        return FlowField.constant(h, w, du, dv, "backward" if ref < t else "forward")
    pos = _map_pixels(spec, t, ref)
    grid = _pixel_grid(h, w)[:2]
    uv = (pos - grid).reshape(2, h, w).transpose(1, 2, 0).astype(np.float32)
    return FlowField(uv, "backward" if ref < t else "forward")


def analytic_occlusion(spec: MotionSpec, t: int, ref: int) -> Mask:
    """1 where pixel of frame ``t`` has a source inside frame ``ref``."""
    pos = _map_pixels(spec, t, ref)
    h, w = spec.height, spec.width
    ok = (pos[0] >= 0) & (pos[0] <= w - 1) & (pos[1] >= 0) & (pos[1] <= h - 1)
    return Mask(ok.reshape(h, w).astype(np.float32), kind="occlusion")


def generate_sequence(spec: MotionSpec):
    """Render frames; return ``(seq, flows, occ)``.

    ``flows`` and ``occ`` are keyed by ``(t, ref)`` for the pairs
    ``(t, t-1)``, ``(t-1, t)``, ``(t, 1)`` and ``(1, t)``.
    """
    h, w, T = spec.height, spec.width, spec.num_frames
    grid = _pixel_grid(h, w)
    # frame-1 coordinates sampled by each frame
    sources = [(np.linalg.inv(spec.transform(t)) @ grid)[:2] for t in range(1, T + 1)]
    lo = np.floor(np.min([s.min(axis=1) for s in sources], axis=0)).astype(int) - 1
    hi = np.ceil(np.max([s.max(axis=1) for s in sources], axis=0)).astype(int) + 1
    base_w, base_h = hi[0] - lo[0] + 1, hi[1] - lo[1] + 1
    texture = make_texture(spec.base, base_h, base_w, spec.seed, spec.texture_sigma)

    frames = []
    for s in sources:
        x = s[0] - lo[0]
        y = s[1] - lo[1]
        if spec.is_integer_translation:
            xi = np.rint(x).astype(int)
            yi = np.rint(y).astype(int)
            frame = texture[yi, xi].reshape(h, w, 3)
        else:
            frame = np.stack([ndimage.map_coordinates(texture[..., c], [y, x], order=1, mode="nearest")
                              for c in range(3)], axis=-1).reshape(h, w, 3)
        frames.append(frame)
    seq = FrameSequence(np.stack(frames).astype(np.float32))

    flows, occ = {}, {}
    for t in range(2, T + 1):
        for pair in ((t, t - 1), (t - 1, t), (t, 1), (1, t)):
            if pair in flows:
                continue
            flows[pair] = analytic_flow(spec, *pair)
            occ[pair] = analytic_occlusion(spec, *pair)
            if not occ[pair].values.any():
                raise MotionError(f"frames {pair[0]} and {pair[1]} share no content; reduce the motion")
    return seq, flows, occ

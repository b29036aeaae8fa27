"""Optical flow providers and forward-backward occlusion masks.

All providers answer ``get_flow(seq, t, ref)``: a field ``F`` such that pixel
``x`` of frame ``t`` corresponds to ``x + F(x)`` in frame ``ref``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .synth import MotionSpec, analytic_flow
from .video_data import DimensionMismatchError, FlowField, FrameSequence, Mask, read_flo, write_flo
from .warping import bilinear_warp, flow_in_bounds

OCCLUSION_REL_TOL = 0.01
OCCLUSION_ABS_TOL = 0.5


class FlowUnavailableError(LookupError):
    pass


def flow_filename(t: int, ref: int) -> str:
    return f"flow_t{t}_ref{ref}.flo"


def occlusion_mask(fw: FlowField, bw: FlowField, rel_tol: float = OCCLUSION_REL_TOL,
                   abs_tol: float = OCCLUSION_ABS_TOL) -> Mask:
    """Forward-backward consistency mask on the grid of frame ``t``.

    ``fw`` is the flow ``ref => t`` and ``bw`` the flow ``t => ref``. A pixel is
    occluded (0) when ``|fw(x + bw(x)) + bw(x)|^2`` exceeds
    ``rel_tol * (|fw(x + bw(x))|^2 + |bw(x)|^2) + abs_tol``.
    """
    if fw.shape != bw.shape:
        raise DimensionMismatchError(f"flow size mismatch: {fw.shape} vs {bw.shape}")
    fw_t = fw.tensor(torch.float64)
    bw_t = bw.tensor(torch.float64)
    fw_warped = bilinear_warp(fw_t, bw_t)
    lhs = ((fw_warped + bw_t) ** 2).sum(0)
    rhs = rel_tol * ((fw_warped ** 2).sum(0) + (bw_t ** 2).sum(0)) + abs_tol
    return Mask((lhs <= rhs).numpy().astype(np.float32), kind="occlusion")


class FlowProvider:
    """Base class; subclasses implement :meth:`get_flow`."""

    backend = "abstract"

    def get_flow(self, seq: FrameSequence | None, t: int, ref: int) -> FlowField:
        raise NotImplementedError

    def get_backward_flow(self, seq: FrameSequence | None, t: int, ref: int) -> FlowField:
        n = len(seq) if seq is not None else None
        if not (1 <= ref < t) or (n is not None and t > n):
            raise IndexError(f"need 1 <= ref < t <= T, got t={t}, ref={ref}, T={n}")
        return self.get_flow(seq, t, ref)

    def occlusion(self, seq: FrameSequence | None, t: int, ref: int) -> Mask:
        """Binary validity mask on frame ``t`` for correspondences into ``ref``.

        Combines the forward-backward test with a check that ``x + F(x)``
        stays inside the frame.
        """
        bw = self.get_flow(seq, t, ref)
        fw = self.get_flow(seq, ref, t)
        consistent = occlusion_mask(fw, bw).values
        inside = flow_in_bounds(bw.tensor(torch.float64)).numpy()
        return Mask((consistent * inside).astype(np.float32), kind="occlusion")

    @property
    def name(self) -> str:
        return self.backend


class AnalyticFlowProvider(FlowProvider):
    backend = "analytic"

    def __init__(self, motion: MotionSpec):
        self.motion = motion

    def get_flow(self, seq, t, ref):
        if not (1 <= t <= self.motion.num_frames and 1 <= ref <= self.motion.num_frames):
            raise FlowUnavailableError(f"frames ({t}, {ref}) outside generated range 1..{self.motion.num_frames}")
        return analytic_flow(self.motion, t, ref)


class FileFlowProvider(FlowProvider):
    """Reads ``flow_t{t}_ref{ref}.flo`` files from one directory."""

    backend = "file"

    def __init__(self, directory):
        self.directory = Path(directory)

    def get_flow(self, seq, t, ref):
        path = self.directory / flow_filename(t, ref)
        if not path.is_file():
            raise FlowUnavailableError(f"missing flow file {path}")
        return read_flo(path, "backward" if ref < t else "forward")


@dataclass(frozen=True)
class EstimatorParams:
    levels: int = 4
    iterations: int = 100
    smoothness: float = 0.05
    warps: int = 3

    def __post_init__(self):
        if self.levels < 1 or self.iterations < 1 or self.warps < 1:
            raise ValueError("levels, iterations and warps must be >= 1")
        if self.smoothness <= 0:
            raise ValueError("smoothness must be positive")


class EstimatedFlowProvider(FlowProvider):
    backend = "estimated"

    def __init__(self, params: EstimatorParams = EstimatorParams()):
        self.params = params

    def get_flow(self, seq, t, ref):
        if seq is None:
            raise FlowUnavailableError("estimated flow needs the frame sequence")
        f = estimate_flow(seq[ref], seq[t], self.params)
        return FlowField(f.uv, "backward" if ref < t else "forward")


def write_flow_dir(flows: dict, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for (t, ref), field in flows.items():
        write_flo(field, directory / flow_filename(t, ref))


# --- classical estimator ---------------------------------------------------

_AVG_KERNEL = np.array([[1, 2, 1], [2, 0, 2], [1, 2, 1]], dtype=np.float64) / 12.0


def _gray(frame: np.ndarray) -> np.ndarray:
    return frame.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _warp_np(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.mgrid[:h, :w].astype(np.float64)
    return ndimage.map_coordinates(img, [ys + v, xs + u], order=1, mode="nearest")


def _resize_flow(u, v, shape):
    zy, zx = shape[0] / u.shape[0], shape[1] / u.shape[1]
    u = ndimage.zoom(u, (zy, zx), order=1)[: shape[0], : shape[1]] * zx
    v = ndimage.zoom(v, (zy, zx), order=1)[: shape[0], : shape[1]] * zy
    return u, v


def estimate_flow(a: np.ndarray, b: np.ndarray, params: EstimatorParams = EstimatorParams()) -> FlowField:
    """Coarse-to-fine Horn-Schunck estimate of the backward flow ``b => a``.

    Best effort only: ``a(x + F(x)) ~ b(x)`` on textured regions.
    """
    if a.shape != b.shape:
        raise DimensionMismatchError(f"frame size mismatch: {a.shape} vs {b.shape}")
    ga, gb = _gray(a), _gray(b)
    pyr = [(ga, gb)]
    for _ in range(params.levels - 1):
        pa, pb = pyr[-1]
        if min(pa.shape) < 16:
            break
        pyr.append((ndimage.gaussian_filter(pa, 1.0)[::2, ::2], ndimage.gaussian_filter(pb, 1.0)[::2, ::2]))

    alpha2 = params.smoothness ** 2
    u = v = None
    for la, lb in reversed(pyr):
        if u is None:
            u = np.zeros_like(la)
            v = np.zeros_like(la)
        else:
            u, v = _resize_flow(u, v, la.shape)
        for _ in range(params.warps):
            aw = _warp_np(la, u, v)
            iy, ix = np.gradient(aw)
            it = aw - lb
            u0, v0 = u.copy(), v.copy()
            denom = alpha2 + ix ** 2 + iy ** 2
            for _ in range(params.iterations):
                ub = ndimage.convolve(u, _AVG_KERNEL, mode="nearest")
                vb = ndimage.convolve(v, _AVG_KERNEL, mode="nearest")
                r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
                u = ub - ix * r
                v = vb - iy * r
    uv = np.stack([u, v], axis=-1).astype(np.float32)
    uv[~np.isfinite(uv)] = 0.0
    return FlowField(uv, "backward")

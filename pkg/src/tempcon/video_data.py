"""In-memory video, flow and mask containers plus their file I/O.

Frames are stored as ``(T, H, W, 3)`` float arrays in ``[0, 1]``.  Time
indices are 1-based everywhere in the public API: ``seq[1]`` is the
reference frame.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
MIN_SIZE = 8


class DimensionMismatchError(ValueError):
    pass


class SequenceTooShortError(ValueError):
    pass


class FlowFormatError(ValueError):
    pass


class IncompleteReportError(ValueError):
    pass


def _check_frame_array(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DimensionMismatchError(f"frame must be H x W x 3, got {arr.shape}")
    if arr.shape[0] < MIN_SIZE or arr.shape[1] < MIN_SIZE:
        raise DimensionMismatchError(f"frame must be at least {MIN_SIZE}x{MIN_SIZE}, got {arr.shape[:2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("frame contains non-finite values")
    return arr


@dataclass
class FrameSequence:
    """Ordered frames sharing one size, indexed from 1."""

    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 4:
            raise DimensionMismatchError(f"expected (T, H, W, 3) array, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise SequenceTooShortError("sequence too short: need at least 2 frames")
        for f in frames:
            _check_frame_array(f)
        if not np.issubdtype(frames.dtype, np.floating):
            frames = frames.astype(np.float32)
        self.frames = np.clip(frames, 0.0, 1.0)

    @classmethod
    def from_frames(cls, frames: Iterable[np.ndarray]) -> "FrameSequence":
        frames = list(frames)
        shapes = {f.shape for f in frames}
        if len(shapes) > 1:
            raise DimensionMismatchError(f"frames have inconsistent dimensions: {sorted(shapes)}")
        if len(frames) < 2:
            raise SequenceTooShortError("sequence too short: need at least 2 frames")
        return cls(np.stack(frames))

    @classmethod
    def from_tensor(cls, tensor) -> "FrameSequence":
        """Build from a ``(T, 3, H, W)`` torch tensor."""
        return cls(tensor.detach().cpu().numpy().transpose(0, 2, 3, 1).copy())

    def __len__(self) -> int:
        return self.frames.shape[0]

    def __getitem__(self, t: int) -> np.ndarray:
        if not 1 <= t <= len(self):
            raise IndexError(f"frame index {t} outside 1..{len(self)}")
        return self.frames[t - 1]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def num_pixels(self) -> int:
        return self.height * self.width

    def tensor(self, dtype=None):
        """Frames as a ``(T, 3, H, W)`` torch tensor."""
        import torch

        t = torch.from_numpy(np.ascontiguousarray(self.frames.transpose(0, 3, 1, 2)))
        return t if dtype is None else t.to(dtype)


@dataclass
class FlowField:
    """Per-pixel displacement ``(u, v)`` in pixels, stored as ``(H, W, 2)``.

    A backward field for frame ``t`` relative to ``ref`` maps pixel ``x`` of
    frame ``t`` to position ``x + F(x)`` in frame ``ref``.
    """

    uv: np.ndarray
    direction: str = "backward"

    def __post_init__(self):
        uv = np.asarray(self.uv)
        if uv.ndim != 3 or uv.shape[2] != 2:
            raise DimensionMismatchError(f"flow must be H x W x 2, got {uv.shape}")
        if not np.all(np.isfinite(uv)):
            raise ValueError("flow contains non-finite values")
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"unknown flow direction {self.direction!r}")
        self.uv = uv

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float, direction: str = "backward") -> "FlowField":
        uv = np.empty((height, width, 2), dtype=np.float32)
        uv[..., 0] = u
        uv[..., 1] = v
        return cls(uv, direction)

    @classmethod
    def from_tensor(cls, tensor, direction: str = "backward") -> "FlowField":
        return cls(tensor.detach().cpu().numpy().transpose(1, 2, 0).copy(), direction)

    @property
    def u(self) -> np.ndarray:
        return self.uv[..., 0]

    @property
    def v(self) -> np.ndarray:
        return self.uv[..., 1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.uv.shape[:2]

    def tensor(self, dtype=None):
        """Flow as a ``(2, H, W)`` torch tensor."""
        import torch

        t = torch.from_numpy(np.ascontiguousarray(self.uv.transpose(2, 0, 1)))
        return t if dtype is None else t.to(dtype)


@dataclass
class Mask:
    values: np.ndarray
    kind: str = "visibility"

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DimensionMismatchError(f"mask must be H x W, got {values.shape}")
        if self.kind == "occlusion":
            if not np.all((values == 0) | (values == 1)):
                raise ValueError("occlusion mask must be binary")
        elif self.kind == "visibility":
            if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
                raise ValueError("visibility mask must lie in [0, 1]")
        else:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        self.values = values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# --- frame directories -----------------------------------------------------

def _pattern_regex(pattern: str) -> re.Pattern:
    m = re.search(r"%0?(\d*)d", pattern)
    if m is None:
        raise ValueError(f"pattern {pattern!r} has no integer field such as %05d")
    head, tail = pattern[: m.start()], pattern[m.end():]
    return re.compile("^" + re.escape(head) + r"(\d+)" + re.escape(tail) + "$")


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im).astype(np.float64)
            arr = np.repeat(arr[..., None], 3, axis=2)
            maxval = 65535.0
        else:
            arr = np.asarray(im.convert("RGB"))
            maxval = float(np.iinfo(arr.dtype).max)
    return np.clip(arr.astype(np.float32) / np.float32(maxval), 0.0, 1.0)


def load_frame_sequence(path, pattern: str = "%05d.png") -> FrameSequence:
    """Load every file in ``path`` whose name matches ``pattern``, sorted by index."""
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"frame directory not found: {path}")
    rx = _pattern_regex(pattern)
    indexed = []
    for p in path.iterdir():
        m = rx.match(p.name)
        if m:
            indexed.append((int(m.group(1)), p))
    indexed.sort()
    if len(indexed) < 2:
        raise SequenceTooShortError(f"sequence too short: found {len(indexed)} frame(s) in {path}")
    frames = [_read_image(p) for _, p in indexed]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise DimensionMismatchError(f"frames in {path} have inconsistent dimensions: {sorted(shapes)}")
    return FrameSequence(np.stack(frames))


def save_frame_sequence(seq: FrameSequence, path, pattern: str = "%05d.png", start: int = 1) -> list[Path]:
    """Write frames as 8-bit PNGs; values are rounded to the nearest code."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    written = []
    for i, frame in enumerate(seq.frames):
        out = path / (pattern % (start + i))
        codes = np.round(np.clip(frame, 0, 1) * 255.0).astype(np.uint8)
        Image.fromarray(codes, mode="RGB").save(out)
        written.append(out)
    return written


# --- Middlebury .flo -------------------------------------------------------

def write_flo(field: FlowField, path) -> None:
    uv = np.asarray(field.uv)
    if not np.all(np.isfinite(uv)):
        raise ValueError("refusing to write non-finite flow")
    h, w = uv.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.ascontiguousarray(uv, dtype="<f4").tofile(f)


def read_flo(path, direction: str = "backward") -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFormatError(f"{path}: truncated header")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = (int(x) for x in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FlowFormatError(f"{path}: invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) < expected:
        raise FlowFormatError(f"{path}: truncated payload ({len(data)} of {expected} bytes)")
    uv = np.frombuffer(data, dtype="<f4", count=2 * w * h, offset=12).reshape(h, w, 2).astype(np.float32)
    return FlowField(uv, direction)


# --- reports ---------------------------------------------------------------

_REQUIRED_REPORT_FIELDS = ("e_warp", "d_perceptual", "pair_errors")


def _report_dict(report: Any) -> dict:
    if hasattr(report, "to_dict"):
        return report.to_dict()
    return dict(report)


def save_report(report, path) -> tuple[Path, Path]:
    """Write a key/value text report and a JSON companion next to it.

    Returns the text and JSON paths.
    """
    d = _report_dict(report)
    missing = [k for k in _REQUIRED_REPORT_FIELDS if d.get(k) is None]
    if missing or not d.get("pair_errors"):
        raise IncompleteReportError(f"incomplete report: missing {missing or ['pair_errors']}")

    path = Path(path)
    json_path = path.with_suffix(".json")
    if json_path == path:
        json_path = path.with_name(path.name + ".json")

    lines = []
    for key, value in d.get("metadata", {}).items():
        lines.append(f"{key}: {value}")
    lines.append(f"E_warp: {float(d['e_warp'])!r}")
    lines.append(f"D_perceptual: {float(d['d_perceptual'])!r}")
    lines.append("")
    lines.append("# warp error per frame pair")
    lines.append(f"{'t':>5} {'t+1':>5} {'E_warp':>14} degenerate")
    flags = d.get("pair_degenerate") or [False] * len(d["pair_errors"])
    for i, (err, deg) in enumerate(zip(d["pair_errors"], flags), start=1):
        lines.append(f"{i:>5} {i + 1:>5} {err:>14.8g} {'yes' if deg else 'no'}")
    frame_d = d.get("frame_distances")
    if frame_d:
        lines.append("")
        lines.append("# perceptual distance per frame (first frame excluded)")
        lines.append(f"{'t':>5} {'D':>14}")
        for i, dist in enumerate(frame_d, start=2):
            lines.append(f"{i:>5} {dist:>14.8g}")

    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")
        json_path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return path, json_path


def load_report_dict(path) -> dict:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    return json.loads(path.read_text())

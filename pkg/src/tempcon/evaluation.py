"""Temporal warping error and perceptual distance of a video."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from .flow import FlowProvider
from .perception import PerceptualMetric, frame_distances
from .video_data import DimensionMismatchError, FrameSequence
from .warping import bilinear_warp


class PairError(NamedTuple):
    value: float
    degenerate: bool


@dataclass
class MetricsReport:
    pair_errors: list[float]
    pair_degenerate: list[bool]
    e_warp: float
    d_perceptual: float
    frame_distances: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.e_warp < 0 or self.d_perceptual < 0:
            raise ValueError("metrics must be non-negative")
        if len(self.pair_errors) != len(self.pair_degenerate):
            raise ValueError("pair_errors and pair_degenerate differ in length")

    @property
    def num_frames(self) -> int:
        return len(self.pair_errors) + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(**{k: d[k] for k in ("pair_errors", "pair_degenerate", "e_warp", "d_perceptual",
                                        "frame_distances", "metadata") if k in d})


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float64)
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[-1] in (2, 3):
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(arr))


def warp_error_pair(v_t, v_next, flow, occ) -> PairError:
    """Occlusion-masked mean squared error between ``v_t`` and the aligned ``v_next``.

    ``flow`` maps pixels of ``v_t`` into ``v_next`` (``t => t+1``) and ``occ``
    is the binary non-occlusion mask on ``v_t``'s grid. Arrays may be numpy
    ``(H, W, C)`` or tensors ``(C, H, W)``. Returns ``(0.0, True)`` when every
    pixel is occluded.
    """
    v_t, v_next = _as_tensor(v_t), _as_tensor(v_next)
    flow = _as_tensor(getattr(flow, "uv", flow))
    occ = _as_tensor(getattr(occ, "values", occ))
    if v_t.shape != v_next.shape or flow.shape[-2:] != v_t.shape[-2:] or occ.shape[-2:] != v_t.shape[-2:]:
        raise DimensionMismatchError("frames, flow and mask must share H x W")
    if not torch.all((occ == 0) | (occ == 1)):
        raise ValueError("occlusion mask must be binary")
    occ = occ.reshape(v_t.shape[-2:])
    n_valid = float(occ.sum())
    if n_valid == 0:
        return PairError(0.0, True)
    warped = bilinear_warp(v_next, flow)
    sq = ((v_t - warped) ** 2).sum(dim=0)
    return PairError(float((occ * sq).sum()) / n_valid, False)


def warp_error_video(video: FrameSequence, provider: FlowProvider,
                     flow_source: FrameSequence | None = None) -> tuple[float, list[PairError]]:
    """Mean pair warp error over ``t = 1 .. T-1``.

    Flows come from ``provider`` evaluated on ``flow_source`` (defaults to
    ``video`` itself).
    """
    if len(video) < 2:
        raise ValueError("need at least 2 frames")
    src = flow_source if flow_source is not None else video
    pairs = []
    for t in range(1, len(video)):
        flow = provider.get_flow(src, t, t + 1)
        occ = provider.occlusion(src, t, t + 1)
        pairs.append(warp_error_pair(video[t], video[t + 1], flow, occ))
    return float(np.mean([p.value for p in pairs])), pairs


def evaluate(outputs: FrameSequence, processed: FrameSequence, provider: FlowProvider,
             metric: PerceptualMetric, flow_source: FrameSequence | None = None,
             sequence_id: str = "") -> MetricsReport:
    if len(outputs) != len(processed) or outputs.frames.shape != processed.frames.shape:
        raise DimensionMismatchError("output and processed sequences are not aligned")
    e_warp, pairs = warp_error_video(outputs, provider, flow_source)
    dists = frame_distances(processed.tensor(torch.float32), outputs.tensor(torch.float32), metric)
    return MetricsReport(
        pair_errors=[p.value for p in pairs],
        pair_degenerate=[p.degenerate for p in pairs],
        e_warp=e_warp,
        d_perceptual=float(dists.mean()),
        frame_distances=[float(d) for d in dists],
        metadata={"sequence_id": sequence_id, "flow_backend": provider.name, "metric": metric.name,
                  "num_frames": len(outputs)},
    )


def plot_tradeoff(rows: list[dict], path, baseline: dict | None = None) -> None:
    """Scatter of E_warp against D_perceptual, one point per ratio ``r``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    xs = [r["d_perceptual"] for r in rows]
    ys = [r["e_warp"] for r in rows]
    ax.plot(xs, ys, "o-")
    for r in rows:
        ax.annotate(f"r={r['r']:g}", (r["d_perceptual"], r["e_warp"]), fontsize=8)
    if baseline:
        ax.plot([baseline["d_perceptual"]], [baseline["e_warp"]], "rs", label="processed")
        ax.legend()
    ax.set_xlabel("D_perceptual")
    ax.set_ylabel("E_warp")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)

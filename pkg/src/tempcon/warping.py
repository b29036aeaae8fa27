"""Differentiable bilinear backward warping and the visibility mask."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

DEFAULT_ALPHA = 50.0


@dataclass(frozen=True)
class WarpConfig:
    alpha: float = DEFAULT_ALPHA
    border: str = "clamp"
    detach_mask: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be finite and positive, got {self.alpha}")
        if self.border != "clamp":
            raise ValueError(f"unsupported border mode {self.border!r}")


def _check_dims(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"dimension mismatch between {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def bilinear_warp(frame: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Sample ``frame`` at ``x + flow(x)`` with bilinear interpolation.

    ``frame`` is ``(..., C, H, W)`` and ``flow`` is ``(..., 2, H, W)`` holding
    horizontal then vertical displacement in pixels. Sample coordinates are
    clamped to the image rectangle. At integer coordinates the cell to the
    right/below is used, so the flow gradient there is the forward difference.
    """
    _check_dims(frame, flow, "frame and flow")
    if flow.shape[-3] != 2:
        raise ValueError(f"flow must have 2 channels, got {flow.shape[-3]}")
    if not torch.isfinite(flow).all():
        raise ValueError("flow contains non-finite values")

    *lead, C, H, W = frame.shape
    flow_lead = flow.shape[:-3]
    batch = torch.broadcast_shapes(tuple(lead), tuple(flow_lead))
    frame = frame.expand(*batch, C, H, W).reshape(-1, C, H * W)
    flow = flow.expand(*batch, 2, H, W).reshape(-1, 2, H, W)

    dtype = flow.dtype
    ys = torch.arange(H, dtype=dtype).view(H, 1)
    xs = torch.arange(W, dtype=dtype).view(1, W)
    x = (xs + flow[:, 0]).clamp(0, W - 1)
    y = (ys + flow[:, 1]).clamp(0, H - 1)

    x0 = torch.floor(x).clamp(max=max(W - 2, 0))
    y0 = torch.floor(y).clamp(max=max(H - 2, 0))
    wx = (x - x0).unsqueeze(1)
    wy = (y - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    def gather(yi, xi):
        idx = (yi * W + xi).view(-1, 1, H * W).expand(-1, C, -1)
        return torch.gather(frame, 2, idx).view(-1, C, H, W)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.view(*batch, C, H, W)


def visibility_mask(i_t: torch.Tensor, warped_prev: torch.Tensor, cfg: WarpConfig | None = None) -> torch.Tensor:
    """``exp(-alpha * sum_c (i_t - warped)^2)`` per pixel, shape ``(..., 1, H, W)``."""
    cfg = cfg or WarpConfig()
    if i_t.shape != warped_prev.shape:
        raise ValueError(f"dimension mismatch: {tuple(i_t.shape)} vs {tuple(warped_prev.shape)}")
    sq = ((i_t - warped_prev) ** 2).sum(dim=-3, keepdim=True)
    mask = torch.exp(-cfg.alpha * sq)
    return mask.detach() if cfg.detach_mask else mask


def flow_in_bounds(flow: torch.Tensor) -> torch.Tensor:
    """1 where ``x + flow(x)`` lands inside the image rectangle, else 0."""
    H, W = flow.shape[-2:]
    ys = torch.arange(H, dtype=flow.dtype).view(H, 1)
    xs = torch.arange(W, dtype=flow.dtype).view(1, W)
    x = xs + flow[..., 0, :, :]
    y = ys + flow[..., 1, :, :]
    ok = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    return ok.to(flow.dtype)

"""Short-term, long-term and overall training losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .warping import bilinear_warp


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 10.0
    lambda_st: float = 100.0
    lambda_lt: float = 100.0

    def __post_init__(self):
        for name in ("lambda_p", "lambda_st", "lambda_lt"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_p == 0 and self.lambda_st == 0 and self.lambda_lt == 0:
            raise ValueError("at least one loss weight must be positive")

    @classmethod
    def from_ratio(cls, lambda_t: float, lambda_p: float) -> "LossWeights":
        return cls(lambda_p=lambda_p, lambda_st=lambda_t, lambda_lt=lambda_t)

    @property
    def ratio(self) -> float | None:
        """Temporal-to-perceptual ratio, defined when both temporal weights agree."""
        if self.lambda_p > 0 and self.lambda_st == self.lambda_lt:
            return ((self.lambda_st + self.lambda_lt) / 2) / self.lambda_p
        return None

    def scaled(self, c: float) -> "LossWeights":
        return LossWeights(self.lambda_p * c, self.lambda_st * c, self.lambda_lt * c)


def _reduce(total: torch.Tensor, count: int, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / count
    raise ValueError(f"unknown reduction {reduction!r}")


def short_term_loss(o_t: torch.Tensor, o_prev: torch.Tensor, flow: torch.Tensor, mask: torch.Tensor,
                    reduction: str = "sum") -> torch.Tensor:
    """Masked L1 between ``o_t`` and ``o_prev`` warped by the backward flow.

    ``mask`` broadcasts against ``(..., 1, H, W)``. With ``reduction="mean"``
    the sum is divided by the number of pixel-channel elements.
    """
    if o_t.shape != o_prev.shape:
        raise ValueError(f"dimension mismatch: {tuple(o_t.shape)} vs {tuple(o_prev.shape)}")
    if mask.shape[-2:] != o_t.shape[-2:]:
        raise ValueError(f"mask size {tuple(mask.shape[-2:])} does not match frames {tuple(o_t.shape[-2:])}")
    warped = bilinear_warp(o_prev, flow)
    total = (mask * (o_t - warped).abs()).sum()
    return _reduce(total, o_t.numel(), reduction)


def long_term_loss(outputs: torch.Tensor, flows_to_first: Sequence[torch.Tensor], masks: Sequence[torch.Tensor],
                   reduction: str = "sum") -> torch.Tensor:
    """Masked L1 between every output frame ``t >= 2`` and the warped first output.

    ``outputs`` is ``(T, 3, H, W)`` or ``(B, T, 3, H, W)``; ``flows_to_first[k]``
    and ``masks[k]`` belong to frame ``t = k + 2``.
    """
    T = outputs.shape[-4]
    if len(flows_to_first) != T - 1 or len(masks) != T - 1:
        raise ValueError(f"need {T - 1} flows and masks, got {len(flows_to_first)} and {len(masks)}")
    first = outputs[..., 0, :, :, :]
    total = outputs.new_zeros(())
    for k in range(T - 1):
        total = total + short_term_loss(outputs[..., k + 1, :, :, :], first, flows_to_first[k], masks[k])
    return _reduce(total, outputs[..., 1:, :, :, :].numel(), reduction)


def total_loss(l_p, l_st, l_lt, w: LossWeights):
    """Weighted sum of the three components; each must be non-negative."""
    for name, v in (("L_p", l_p), ("L_st", l_st), ("L_lt", l_lt)):
        if float(v.detach() if isinstance(v, torch.Tensor) else v) < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    return w.lambda_p * l_p + w.lambda_st * l_st + w.lambda_lt * l_lt

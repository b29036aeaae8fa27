"""Unrolled recurrent training, checkpoint/resume, and the loss-ratio sweep."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch

from .evaluation import evaluate
from .flow import FlowProvider
from .losses import LossWeights, long_term_loss, short_term_loss, total_loss
from .network import NetworkConfig, TransformNet, process_video, read_checkpoint, save_params
from .perception import FeatureExtractor, PerceptualMetric, perceptual_loss, resolve_kind
from .video_data import FrameSequence
from .warping import WarpConfig, bilinear_warp, visibility_mask

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    unroll: int = 10
    batch_size: int = 2
    crop_size: int = 48
    iterations: int = 2000
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_p: float = 10.0
    lambda_st: float = 100.0
    lambda_lt: float = 100.0
    alpha: float = 50.0
    reduction: str = "mean"
    detach_mask: bool = True
    truncate_temporal_grad: bool = False
    base_channels: int = 32
    num_blocks: int = 5
    extractor: str = "auto"
    extractor_seed: int = 0
    extractor_weights: str | None = None
    metric_seed: int = 1
    flow_backend: str = "analytic"
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.unroll < 2:
            raise ValueError("unroll must be >= 2")
        for name in ("batch_size", "crop_size", "checkpoint_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_p, self.lambda_st, self.lambda_lt)

    @property
    def network(self) -> NetworkConfig:
        return NetworkConfig(base_channels=self.base_channels, num_blocks=self.num_blocks, seed=self.seed)

    @property
    def warp(self) -> WarpConfig:
        return WarpConfig(alpha=self.alpha, detach_mask=self.detach_mask)

    @property
    def extractor_kind(self) -> str:
        return resolve_kind(self.extractor, self.extractor_weights)

    def make_extractor(self) -> FeatureExtractor:
        return FeatureExtractor(self.extractor_kind, seed=self.extractor_seed, weights=self.extractor_weights)

    def make_metric(self) -> PerceptualMetric:
        return PerceptualMetric(FeatureExtractor(self.extractor_kind, seed=self.metric_seed,
                                                 weights=self.extractor_weights))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown training config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class VideoSample:
    """Aligned original/processed sequences plus a flow source for them."""

    name: str
    inputs: FrameSequence
    processed: FrameSequence
    provider: FlowProvider
    _flow_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.inputs.frames.shape != self.processed.frames.shape:
            raise ValueError(f"{self.name}: inputs and processed frames are not aligned")
        self._inputs_t = self.inputs.tensor(torch.float32)
        self._processed_t = self.processed.tensor(torch.float32)

    def __len__(self) -> int:
        return len(self.inputs)

    def flow(self, t: int, ref: int) -> torch.Tensor:
        key = (t, ref)
        if key not in self._flow_cache:
            self._flow_cache[key] = self.provider.get_flow(self.inputs, t, ref).tensor(torch.float32)
        return self._flow_cache[key]


class Window(NamedTuple):
    inputs: torch.Tensor       # (B, T, 3, h, w)
    processed: torch.Tensor    # (B, T, 3, h, w)
    flows_prev: torch.Tensor   # (B, T-1, 2, h, w): frame t => t-1, t = 2..T
    flows_first: torch.Tensor  # (B, T-1, 2, h, w): frame t => 1


class LossComponents(NamedTuple):
    l_p: float
    l_st: float
    l_lt: float
    total: float


def make_window(samples: Sequence[VideoSample], picks: Sequence[tuple[int, int, int, int]], unroll: int,
                crop: int | None) -> Window:
    """Stack windows given ``(sample index, start frame, top, left)`` picks."""
    ins, procs, fprev, ffirst = [], [], [], []
    for idx, start, top, left in picks:
        s = samples[idx]
        if not 1 <= start <= len(s) - unroll + 1:
            raise ValueError(f"window [{start}, {start + unroll - 1}] crosses the end of {s.name}")
        h, w = s.inputs.height, s.inputs.width
        ch, cw = (h, w) if crop is None else (min(crop, h), min(crop, w))
        ys, xs = slice(top, top + ch), slice(left, left + cw)
        frames = slice(start - 1, start - 1 + unroll)
        ins.append(s._inputs_t[frames, :, ys, xs])
        procs.append(s._processed_t[frames, :, ys, xs])
        ts = range(start + 1, start + unroll)
        fprev.append(torch.stack([s.flow(t, t - 1)[:, ys, xs] for t in ts]))
        ffirst.append(torch.stack([s.flow(t, start)[:, ys, xs] for t in ts]))
    return Window(torch.stack(ins), torch.stack(procs), torch.stack(fprev), torch.stack(ffirst))


def compute_losses(model: TransformNet, window: Window, extractor: FeatureExtractor, cfg: TrainingConfig):
    """Forward pass over a window; returns ``(l_p, l_st, l_lt, total)`` tensors."""
    I, P = window.inputs, window.processed
    T = I.shape[1]
    O = process_video(model, I, P)
    warp_cfg = cfg.warp

    prev_masks, first_masks = [], []
    with torch.no_grad() if cfg.detach_mask else torch.enable_grad():
        for k in range(T - 1):
            i_t = I[:, k + 1]
            prev_masks.append(visibility_mask(i_t, bilinear_warp(I[:, k], window.flows_prev[:, k]), warp_cfg))
            first_masks.append(visibility_mask(i_t, bilinear_warp(I[:, 0], window.flows_first[:, k]), warp_cfg))

    O_ref = O.detach() if cfg.truncate_temporal_grad else O
    l_st = O.new_zeros(())
    for k in range(T - 1):
        l_st = l_st + short_term_loss(O[:, k + 1], O_ref[:, k], window.flows_prev[:, k], prev_masks[k])
    if cfg.reduction == "mean":
        l_st = l_st / O[:, 1:].numel()

    O_lt = torch.cat([O_ref[:, :1], O[:, 1:]], dim=1)
    l_lt = long_term_loss(O_lt, [window.flows_first[:, k] for k in range(T - 1)], first_masks, cfg.reduction)
    l_p = perceptual_loss(O, P, extractor, cfg.reduction)
    total = total_loss(l_p.double(), l_st.double(), l_lt.double(), cfg.weights)
    return l_p, l_st, l_lt, total


def unroll_window(model: TransformNet, window: Window, extractor: FeatureExtractor, cfg: TrainingConfig,
                  backward: bool = True) -> tuple[LossComponents, dict[str, torch.Tensor]]:
    """Losses over one unrolled window and gradients w.r.t. every parameter."""
    if window.inputs.shape[1] != cfg.unroll:
        raise ValueError(f"window length {window.inputs.shape[1]} != unroll {cfg.unroll}")
    model.zero_grad(set_to_none=True)
    l_p, l_st, l_lt, total = compute_losses(model, window, extractor, cfg)
    grads = {}
    if backward:
        total.backward()
        grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                 for n, p in model.named_parameters()}
    comps = LossComponents(l_p.item(), l_st.item(), l_lt.item(), total.item())
    return comps, grads


# --- training loop ---------------------------------------------------------

def _sample_picks(rng: np.random.Generator, samples: Sequence[VideoSample], cfg: TrainingConfig):
    picks = []
    for _ in range(cfg.batch_size):
        idx = int(rng.integers(len(samples)))
        s = samples[idx]
        start = int(rng.integers(1, len(s) - cfg.unroll + 2))
        top = int(rng.integers(0, max(s.inputs.height - cfg.crop_size, 0) + 1))
        left = int(rng.integers(0, max(s.inputs.width - cfg.crop_size, 0) + 1))
        picks.append((idx, start, top, left))
    return picks


def _save_training_checkpoint(path, model, optimizer, rng, iteration, cfg, log_records=None):
    save_params(model, path, extra={
        "optimizer": optimizer.state_dict(),
        "rng_state": rng.bit_generator.state,
        "iteration": iteration,
        "training_config": cfg.to_dict(),
    })


def train(cfg: TrainingConfig, samples: Sequence[VideoSample], checkpoint_dir=None, resume=None,
          log_path=None, callback: Callable[[int, LossComponents], None] | None = None):
    """Train a fresh model (or resume one); returns ``(model, log records)``.

    Bit-reproducible for a fixed config and seed when torch runs single-threaded.
    """
    if not samples:
        raise ValueError("dataset is empty")
    if not any(len(s) >= cfg.unroll for s in samples):
        raise ValueError(f"no sequence has at least {cfg.unroll} frames")
    samples = [s for s in samples if len(s) >= cfg.unroll]

    model = TransformNet(cfg.network)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    rng = np.random.default_rng(cfg.seed)
    start = 0
    if resume is not None:
        payload = read_checkpoint(resume)
        model.load_state_dict(payload["params"])
        optimizer.load_state_dict(payload["optimizer"])
        rng.bit_generator.state = payload["rng_state"]
        start = int(payload["iteration"])

    extractor = cfg.make_extractor()
    log.info("training with %s features", cfg.extractor_kind)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
    if checkpoint_dir:
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "a") if log_path else None
    records = []
    try:
        for it in range(start, cfg.iterations):
            window = make_window(samples, _sample_picks(rng, samples, cfg), cfg.unroll, cfg.crop_size)
            optimizer.zero_grad(set_to_none=True)
            l_p, l_st, l_lt, total = compute_losses(model, window, extractor, cfg)
            if not torch.isfinite(total):
                if checkpoint_dir:
                    _save_training_checkpoint(checkpoint_dir / "diverged.pt", model, optimizer, rng, it, cfg)
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it + 1}: L_p={l_p.item()}, L_st={l_st.item()}, L_lt={l_lt.item()}")
            total.backward()
            optimizer.step()

            comps = LossComponents(l_p.item(), l_st.item(), l_lt.item(), total.item())
            rec = {"iteration": it + 1, **comps._asdict()}
            records.append(rec)
            if log_file:
                log_file.write(json.dumps(rec) + "\n")
            if callback:
                callback(it + 1, comps)
            if checkpoint_dir and ((it + 1) % cfg.checkpoint_every == 0 or it + 1 == cfg.iterations):
                _save_training_checkpoint(checkpoint_dir / f"iter_{it + 1:06d}.pt", model, optimizer, rng, it + 1, cfg)
                _save_training_checkpoint(checkpoint_dir / "latest.pt", model, optimizer, rng, it + 1, cfg)
    finally:
        if log_file:
            log_file.close()
    if checkpoint_dir and cfg.iterations == start:
        _save_training_checkpoint(checkpoint_dir / "latest.pt", model, optimizer, rng, start, cfg)
    return model, records


# --- inference / evaluation helpers -----------------------------------------

@torch.no_grad()
def run_model(model: TransformNet, inputs: FrameSequence, processed: FrameSequence) -> FrameSequence:
    dtype = next(model.parameters()).dtype
    out = process_video(model, inputs.tensor(dtype), processed.tensor(dtype))
    out = out.clamp(0, 1)
    out[0] = processed.tensor(dtype)[0]
    return FrameSequence.from_tensor(out.to(torch.float32))


def evaluate_model(model: TransformNet, samples: Sequence[VideoSample], metric: PerceptualMetric):
    """Per-video reports plus unweighted means of both metrics."""
    reports = []
    for s in samples:
        out = run_model(model, s.inputs, s.processed)
        reports.append(evaluate(out, s.processed, s.provider, metric, flow_source=s.inputs, sequence_id=s.name))
    e = float(np.mean([r.e_warp for r in reports]))
    d = float(np.mean([r.d_perceptual for r in reports]))
    return e, d, reports


@dataclass(frozen=True)
class SweepSpec:
    pairs: tuple[tuple[float, float], ...]   # (lambda_t, lambda_p)
    base: TrainingConfig = TrainingConfig()

    def __post_init__(self):
        if len(self.pairs) < 2:
            raise ValueError("a sweep needs at least 2 (lambda_t, lambda_p) pairs")
        for lt, lp in self.pairs:
            if lp <= 0 or lt < 0:
                raise ValueError(f"invalid weight pair ({lt}, {lp})")


def run_sweep(spec: SweepSpec, train_set: Sequence[VideoSample], eval_set: Sequence[VideoSample],
              progress: Callable[[str], None] | None = None) -> list[dict]:
    """Train one model per weight pair and evaluate it; rows sorted by ``r``."""
    if not eval_set:
        raise ValueError("evaluation set is empty")
    rows = []
    for lambda_t, lambda_p in spec.pairs:
        cfg = replace(spec.base, lambda_p=lambda_p, lambda_st=lambda_t, lambda_lt=lambda_t)
        model, records = train(cfg, train_set)
        e, d, _ = evaluate_model(model, eval_set, cfg.make_metric())
        row = {"lambda_t": lambda_t, "lambda_p": lambda_p, "r": lambda_t / lambda_p, "e_warp": e, "d_perceptual": d}
        if progress:
            progress(f"lambda_t={lambda_t:g} lambda_p={lambda_p:g} r={row['r']:g}: E_warp={e:.6f} D={d:.6f}")
        rows.append(row)
    rows.sort(key=lambda r: r["r"])
    return rows

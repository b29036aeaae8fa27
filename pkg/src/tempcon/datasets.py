"""Synthetic flicker datasets: in-memory construction, disk layout and manifests.

On disk a dataset is a directory holding ``manifest.json`` and one folder per
sequence::

    seq000/input/00001.png ...      original frames
    seq000/processed/00001.png ...  flickered frames
    seq000/ideal/00001.png ...      flicker-free reference (frame-1 photometry)
    seq000/flow/flow_t2_ref1.flo ...
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .flow import AnalyticFlowProvider, EstimatedFlowProvider, FileFlowProvider, FlowProvider, write_flow_dir
from .synth import (
    FlickerSchedule,
    FlickerSpec,
    MotionSpec,
    analytic_flow,
    apply_flicker,
    generate_sequence,
    ideal_output,
)
from .training import VideoSample
from .video_data import FrameSequence, load_frame_sequence, save_frame_sequence

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    num_sequences: int = 8
    num_frames: int = 20
    height: int = 48
    width: int = 48
    max_shift: int = 2
    base: str = "noise"
    flicker_mode: str = "sinusoid"
    amplitude: float = 0.2
    period: float = 4.0
    seed: int = 0
    flow_span: int = 9

    def __post_init__(self):
        if self.num_sequences < 1:
            raise ValueError("num_sequences must be >= 1")
        if self.max_shift < 0 or self.flow_span < 1:
            raise ValueError("max_shift must be >= 0 and flow_span >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown synth config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class SyntheticVideo:
    name: str
    motion: MotionSpec
    flicker: FlickerSpec
    inputs: FrameSequence
    processed: FrameSequence
    ideal: FrameSequence
    schedule: FlickerSchedule

    def sample(self) -> VideoSample:
        return VideoSample(self.name, self.inputs, self.processed, AnalyticFlowProvider(self.motion))


def make_flicker_dataset(cfg: SynthConfig) -> list[SyntheticVideo]:
    """Integer-translation sequences with seeded per-sequence motion."""
    rng = np.random.default_rng(cfg.seed)
    videos = []
    for i in range(cfg.num_sequences):
        shift = tuple(int(x) for x in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=2))
        tex_seed = int(rng.integers(2**31))
        motion = MotionSpec(num_frames=cfg.num_frames, height=cfg.height, width=cfg.width,
                            translation=shift, base=cfg.base, seed=tex_seed)
        flicker = FlickerSpec(cfg.flicker_mode, cfg.amplitude, cfg.period, seed=int(rng.integers(2**31)))
        seq, _, _ = generate_sequence(motion)
        processed, sched = apply_flicker(seq, flicker)
        videos.append(SyntheticVideo(f"seq{i:03d}", motion, flicker, seq, processed, ideal_output(seq, sched), sched))
    return videos


def write_dataset(videos: list[SyntheticVideo], root, flow_span: int = 9, extra: dict | None = None) -> Path:
    """Write frames, flow files and ``manifest.json``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for v in videos:
        d = root / v.name
        save_frame_sequence(v.inputs, d / "input")
        save_frame_sequence(v.processed, d / "processed")
        save_frame_sequence(v.ideal, d / "ideal")
        T = len(v.inputs)
        pairs = {(t, r) for t in range(1, T + 1) for r in range(1, T + 1)
                 if t != r and (abs(t - r) <= flow_span or 1 in (t, r))}
        write_flow_dir({p: analytic_flow(v.motion, *p) for p in sorted(pairs)}, d / "flow")
        entries.append({
            "name": v.name,
            "input_dir": f"{v.name}/input",
            "processed_dir": f"{v.name}/processed",
            "ideal_dir": f"{v.name}/ideal",
            "flow_dir": f"{v.name}/flow",
            "pattern": "%05d.png",
            "flow": {"backend": "analytic", "motion": v.motion.to_dict()},
            "flicker": v.flicker.to_dict(),
            "schedule": v.schedule.to_dict(),
        })
    manifest = {"version": MANIFEST_VERSION, "sequences": entries, **(extra or {})}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def provider_from_entry(entry: dict, root: Path, backend: str | None = None) -> FlowProvider:
    flow = entry.get("flow") or {"backend": "estimated"}
    backend = backend or flow["backend"]
    if backend == "analytic":
        if "motion" not in flow:
            raise ValueError(f"{entry['name']}: analytic flow requested but no motion recorded")
        return AnalyticFlowProvider(MotionSpec.from_dict(flow["motion"]))
    if backend == "file":
        return FileFlowProvider(root / entry.get("flow_dir", flow.get("dir", "")))
    if backend == "estimated":
        return EstimatedFlowProvider()
    raise ValueError(f"unknown flow backend {backend!r}")


def load_manifest(path, backend: str | None = None) -> list[VideoSample]:
    """Load every sequence listed in a manifest, optionally forcing a flow backend."""
    path = Path(path)
    root = path.parent
    manifest = json.loads(path.read_text())
    samples = []
    for entry in manifest["sequences"]:
        pattern = entry.get("pattern", "%05d.png")
        inputs = load_frame_sequence(root / entry["input_dir"], pattern)
        processed = load_frame_sequence(root / entry["processed_dir"], pattern)
        samples.append(VideoSample(entry["name"], inputs, processed, provider_from_entry(entry, root, backend)))
    return samples

"""Feature extractors for the content loss and the perceptual-distance surrogate.

Three extractor kinds share one interface:

* ``identity``: the frame itself is the feature map.
* ``random``: a seed-pinned stack of three stride-2 conv + ReLU stages. This is
  the default for tests and desk-scale experiments.
* ``vgg19``: ImageNet VGG-19 activations (``relu4_3`` by default). Needs a
  weight file; nothing is downloaded.

The distance computed by :func:`perceptual_distance` is an *uncalibrated*
surrogate of learned perceptual metrics: unit-normalized features compared
with a squared distance, no learned channel weights.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

WEIGHTS_ENV = "TEMPCON_WEIGHTS_DIR"
VGG19_FILENAME = "vgg19-dcbb9e9d.pth"

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightsUnavailableError(RuntimeError):
    pass


def _vgg19_layer_names() -> list[str]:
    # torchvision vgg19 "features": conv/relu pairs per block, max-pool between blocks
    names = []
    for block, convs in enumerate((2, 2, 4, 4, 4), start=1):
        for i in range(1, convs + 1):
            names += [f"conv{block}_{i}", f"relu{block}_{i}"]
        names.append(f"pool{block}")
    return names


VGG19_LAYERS = _vgg19_layer_names()


def _find_vgg_weights(weights: str | os.PathLike | None) -> Path:
    candidates = []
    if weights:
        candidates.append(Path(weights))
    if os.environ.get(WEIGHTS_ENV):
        candidates.append(Path(os.environ[WEIGHTS_ENV]) / VGG19_FILENAME)
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / VGG19_FILENAME)
    for c in candidates:
        if c.is_file():
            return c
    raise WeightsUnavailableError(
        "pretrained VGG-19 weights not found (looked in: "
        + ", ".join(str(c) for c in candidates)
        + "); pass a weight file, set $" + WEIGHTS_ENV + ", or use kind='random'"
    )


def resolve_kind(kind: str, weights: str | os.PathLike | None = None) -> str:
    """``"auto"`` means VGG-19 when its weights can be found, else the random stack."""
    if kind != "auto":
        return kind
    try:
        _find_vgg_weights(weights)
    except WeightsUnavailableError:
        return "random"
    return "vgg19"


class FeatureExtractor(nn.Module):
    """Frozen, deterministic feature extractor.

    ``forward`` takes ``(N, 3, H, W)`` frames in ``[0, 1]`` and returns a list
    with one feature map per requested layer.
    """

    def __init__(self, kind: str = "random", layers: Sequence[str] = ("relu4_3",), seed: int = 0,
                 weights: str | os.PathLike | None = None, channels: Sequence[int] = (16, 32, 64)):
        super().__init__()
        self.kind = kind
        self.seed = seed
        self.layers = tuple(layers)
        if kind == "identity":
            self.net = None
        elif kind == "random":
            self.net = self._random_stack(seed, channels)
            # random stack exposes only its last stage
            self.layers = ("stage3",)
            self._taps = [len(self.net) - 1]
        elif kind == "vgg19":
            self.net = self._vgg19(weights)
            for name in self.layers:
                if name not in VGG19_LAYERS:
                    raise ValueError(f"unknown VGG-19 layer {name!r}")
            self._taps = sorted(VGG19_LAYERS.index(n) for n in self.layers)
            self.net = self.net[: self._taps[-1] + 1]
            self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
            self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        else:
            raise ValueError(f"unknown extractor kind {kind!r}")
        self.requires_grad_(False)
        self.eval()

    @staticmethod
    def _random_stack(seed: int, channels: Sequence[int]) -> nn.Sequential:
        gen = torch.Generator().manual_seed(seed)
        layers: list[nn.Module] = []
        cin = 3
        for cout in channels:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            fan_in = cin * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
            layers += [conv, nn.ReLU()]
            cin = cout
        return nn.Sequential(*layers)

    @staticmethod
    def _vgg19(weights) -> nn.Sequential:
        from torchvision.models.vgg import cfgs, make_layers

        path = _find_vgg_weights(weights)
        # only the convolutional trunk is needed; skip building the classifier
        features = make_layers(cfgs["E"])
        state = torch.load(path, map_location="cpu", weights_only=True)
        trunk = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
        features.load_state_dict(trunk)
        return features

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.kind == "identity":
            return [x]
        if self.kind == "random":
            x = (x - 0.5) / 0.25
        else:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        feats = []
        taps = set(self._taps)
        for i, layer in enumerate(self.net):
            x = layer(x)
            if i in taps:
                feats.append(x)
        return feats


def extract(fe: FeatureExtractor, frame: torch.Tensor) -> torch.Tensor | list[torch.Tensor]:
    """Feature map(s) of ``frame`` (``(3, H, W)`` or ``(N, 3, H, W)``)."""
    single = frame.dim() == 3
    feats = fe(frame.unsqueeze(0) if single else frame)
    if single:
        feats = [f.squeeze(0) for f in feats]
    return feats[0] if len(feats) == 1 else feats


def _check_pair(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"sequence length/dimension mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-4] < 2:
        raise ValueError("sequences need at least 2 frames")


def _flatten_time(x: torch.Tensor) -> torch.Tensor:
    # (..., T, 3, H, W) -> (N, 3, H, W) with frame 1 dropped
    return x[..., 1:, :, :, :].reshape(-1, *x.shape[-3:])


def perceptual_loss(outputs: torch.Tensor, processed: torch.Tensor, fe: FeatureExtractor,
                    reduction: str = "sum") -> torch.Tensor:
    """L1 distance between features of output and processed frames, frames 2..T.

    Inputs are ``(T, 3, H, W)`` or ``(B, T, 3, H, W)``. ``reduction="mean"``
    divides the sum by the number of feature elements compared.
    """
    _check_pair(outputs, processed)
    fo = fe(_flatten_time(outputs))
    with torch.no_grad():
        fp = fe(_flatten_time(processed))
    total = outputs.new_zeros(())
    count = 0
    for a, b in zip(fo, fp):
        total = total + (a - b).abs().sum()
        count += a.numel()
    if reduction == "mean":
        return total / count
    if reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


@dataclass(frozen=True)
class PerceptualMetric:
    extractor: FeatureExtractor
    eps: float = 1e-10

    @property
    def name(self) -> str:
        fe = self.extractor
        suffix = f"-seed{fe.seed}" if fe.kind == "random" else ""
        return f"unit-feature-l2-surrogate[{fe.kind}{suffix}:{','.join(fe.layers) if fe.kind != 'identity' else 'pixels'}]"


def _unit_normalize(f: torch.Tensor, eps: float) -> torch.Tensor:
    norm = torch.sqrt((f * f).sum(dim=1, keepdim=True))
    return f / (norm + eps)


def frame_distances(processed: torch.Tensor, outputs: torch.Tensor, metric: PerceptualMetric) -> torch.Tensor:
    """Per-frame surrogate distance for frames 2..T of ``(T, 3, H, W)`` inputs.

    Features are normalized to unit length along channels at every position;
    the distance is the squared difference summed over channels and averaged
    over positions (and summed over layers).
    """
    _check_pair(outputs, processed)
    if outputs.dim() != 4:
        raise ValueError("expected (T, 3, H, W) sequences")
    with torch.no_grad():
        fo = metric.extractor(outputs[1:])
        fp = metric.extractor(processed[1:])
        d = outputs.new_zeros(outputs.shape[0] - 1)
        for a, b in zip(fo, fp):
            diff = _unit_normalize(a, metric.eps) - _unit_normalize(b, metric.eps)
            d = d + (diff * diff).sum(dim=1).mean(dim=(1, 2))
    return d


def perceptual_distance(processed: torch.Tensor, outputs: torch.Tensor, metric: PerceptualMetric) -> float:
    """Mean of :func:`frame_distances` over frames 2..T."""
    return float(frame_distances(processed, outputs, metric).mean())

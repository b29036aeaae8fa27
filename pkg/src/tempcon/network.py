"""Recurrent two-stream image transformation network.

Layout (``c`` = base channels)::

    stream A: (P_t, O_{t-1}) -> conv c/2 -> conv s2 c -> conv s2 c      (skips from here)
    stream B: (I_t, I_{t-1}) -> conv c/2 -> conv s2 c -> conv s2 c
    concat (2c) -> B residual blocks -> ConvLSTM (2c)
    -> deconv s2 c (+ A half-res) -> deconv s2 c/2 (+ A full-res) -> conv 3 (zero init)
    O_t = P_t + residual

Channel counts, the LSTM kernel and the absence of normalization layers are
defaults chosen for CPU-scale training, not published values.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_VERSION = 2


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    num_blocks: int = 5
    kernel_size: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("base_channels must be an even number >= 2")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")


class RecurrentState(NamedTuple):
    hidden: torch.Tensor
    cell: torch.Tensor


def _padded_size(n: int) -> int:
    return -(-n // 4) * 4


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, k: int):
        super().__init__()
        self.conv1 = _conv(ch, ch, k)
        self.conv2 = _conv(ch, ch, k)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ConvLSTMCell(nn.Module):
    def __init__(self, cin: int, hidden: int, k: int):
        super().__init__()
        self.hidden = hidden
        self.gates = _conv(cin + hidden, 4 * hidden, k)

    def forward(self, x, state: RecurrentState) -> RecurrentState:
        g = self.gates(torch.cat([x, state.hidden], dim=1))
        i, f, o, c = g.chunk(4, dim=1)
        cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(c)
        hidden = torch.sigmoid(o) * torch.tanh(cell)
        return RecurrentState(hidden, cell)


class _Encoder(nn.Module):
    def __init__(self, c: int, k: int):
        super().__init__()
        self.conv0 = _conv(6, c // 2, k)
        self.conv1 = _conv(c // 2, c, k, stride=2)
        self.conv2 = _conv(c, c, k, stride=2)

    def forward(self, x):
        e0 = F.relu(self.conv0(x))
        e1 = F.relu(self.conv1(e0))
        e2 = F.relu(self.conv2(e1))
        return e0, e1, e2


class TransformNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig()):
        super().__init__()
        self.cfg = cfg
        c, k = cfg.base_channels, cfg.kernel_size
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.enc_processed = _Encoder(c, k)
            self.enc_input = _Encoder(c, k)
            self.blocks = nn.Sequential(*[ResidualBlock(2 * c, k) for _ in range(cfg.num_blocks)])
            self.lstm = ConvLSTMCell(2 * c, 2 * c, k)
            self.up1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
            self.up2 = nn.ConvTranspose2d(c, c // 2, 4, stride=2, padding=1)
            self.out = _conv(c // 2, 3, k)
        finally:
            torch.random.set_rng_state(gen_state)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def state_channels(self) -> int:
        return 2 * self.cfg.base_channels

    def init_state(self, height: int, width: int, batch: int = 1, dtype=None) -> RecurrentState:
        if height < 1 or width < 1:
            raise ValueError(f"invalid frame size {height}x{width}")
        dtype = dtype or self.out.weight.dtype
        shape = (batch, self.state_channels, _padded_size(height) // 4, _padded_size(width) // 4)
        return RecurrentState(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))

    def step(self, i_t, i_prev, p_t, o_prev, state: RecurrentState | None = None):
        """One recurrent step on ``(N, 3, H, W)`` frames; returns ``(O_t, state')``."""
        shapes = {tuple(x.shape) for x in (i_t, i_prev, p_t, o_prev)}
        if len(shapes) != 1:
            raise ValueError(f"frame shape mismatch: {sorted(shapes)}")
        N, _, H, W = p_t.shape
        if state is None:
            state = self.init_state(H, W, N, p_t.dtype)
        Hp, Wp = _padded_size(H), _padded_size(W)
        if state.hidden.shape[-2:] != (Hp // 4, Wp // 4) or state.hidden.shape[0] != N:
            raise ValueError(f"state shape {tuple(state.hidden.shape)} does not match input {H}x{W}")

        a = torch.cat([p_t, o_prev], dim=1)
        b = torch.cat([i_t, i_prev], dim=1)
        if (Hp, Wp) != (H, W):
            pad = (0, Wp - W, 0, Hp - H)
            a = F.pad(a, pad, mode="reflect")
            b = F.pad(b, pad, mode="reflect")

        a0, a1, a2 = self.enc_processed(a)
        _, _, b2 = self.enc_input(b)
        x = self.blocks(torch.cat([a2, b2], dim=1))
        state = self.lstm(x, state)
        x = F.relu(self.up1(state.hidden)) + a1
        x = F.relu(self.up2(x)) + a0
        residual = self.out(x)[..., :H, :W]
        return p_t + residual, state

    def forward(self, inputs: torch.Tensor, processed: torch.Tensor) -> torch.Tensor:
        return process_video(self, inputs, processed)


def process_video(model: TransformNet, inputs: torch.Tensor, processed: torch.Tensor,
                  detach_outputs: bool = False) -> torch.Tensor:
    """Run the network over a whole sequence with ``O_1 = P_1``.

    ``inputs``/``processed`` are ``(T, 3, H, W)`` or ``(B, T, 3, H, W)``.
    With ``detach_outputs`` the fed-back previous output carries no gradient.
    """
    if inputs.shape != processed.shape:
        raise ValueError(f"length/size mismatch: {tuple(inputs.shape)} vs {tuple(processed.shape)}")
    unbatched = processed.dim() == 4
    if unbatched:
        inputs, processed = inputs.unsqueeze(0), processed.unsqueeze(0)
    T = processed.shape[1]
    if T == 1:
        warnings.warn("single-frame sequence: output is the processed frame", stacklevel=2)
    outputs = [processed[:, 0]]
    state = None
    for t in range(1, T):
        o_prev = outputs[-1].detach() if detach_outputs else outputs[-1]
        o_t, state = model.step(inputs[:, t], inputs[:, t - 1], processed[:, t], o_prev, state)
        outputs.append(o_t)
    out = torch.stack(outputs, dim=1)
    return out[0] if unbatched else out


def save_params(model: TransformNet, path, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "params": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def read_checkpoint(path) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        if isinstance(version, int) and version < CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format v{version} is older than v{CHECKPOINT_VERSION}; "
                "re-export it with a matching release or retrain"
            )
        raise CheckpointError(f"{path}: unsupported checkpoint format {version!r}")
    return payload


def load_params(path) -> TransformNet:
    payload = read_checkpoint(path)
    model = TransformNet(NetworkConfig(**payload["config"]))
    expected = model.state_dict()
    params = payload["params"]
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{path}: missing parameters: {', '.join(missing)}")
    unexpected = sorted(set(params) - set(expected))
    if unexpected:
        raise CheckpointError(f"{path}: unexpected parameters: {', '.join(unexpected)}")
    model.load_state_dict(params)
    dtype = next(iter(params.values())).dtype
    return model.to(dtype)

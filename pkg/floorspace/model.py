"""
Multi-task encoder-decoder for building footprint and height, plus the
FSM1 checkpoint container.

FSM1 layout (little-endian):
    magic "FSM1" | u32 config length | config JSON (UTF-8) | u32 parameter count
    | per parameter: u32 name length, name, u32 ndim, ndim x u32 dims, f32 payload
"""

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadMagicError, FormatError, ShapeError, TruncatedPayloadError, ValidationError

logger = logging.getLogger(__name__)

HEADS = ("multitask", "footprint_only", "height_only")

MAGIC = b"FSM1"
_U32 = struct.Struct("<I")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 6
    depth: int = 3
    base_channels: int = 16
    head: str = "multitask"

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValidationError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValidationError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.head not in HEADS:
            raise ValidationError(f"unknown head {self.head!r}; choose from {HEADS}")

    @property
    def has_footprint(self) -> bool:
        return self.head in ("multitask", "footprint_only")

    @property
    def has_height(self) -> bool:
        return self.head in ("multitask", "height_only")


Trace = Optional[List[torch.Tensor]]


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by ReLU"""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor, trace: Trace = None) -> torch.Tensor:
        for conv in (self.conv1, self.conv2):
            x = conv(x)
            if trace is not None:
                trace.append(x > 0)
            x = F.relu(x)
        return x


class FloorspaceModel(nn.Module):
    """
    Encoder-decoder with skip connections and two 1x1 heads

    Encoder: depth x (ConvBlock, 2x2 max-pool); a ConvBlock bottleneck;
    decoder mirrors with nearest x2 upsampling and skip concatenation.
    The footprint head returns logits, the height head raw normalized
    heights (clamped only at inference).

    `meta` carries the checkpoint manifest (band stats, normalizer,
    band set, two-stage composition) and travels with save_model/load_model.
    """

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, meta: Optional[Dict[str, Any]] = None):
        super().__init__()
        self.config = config
        self.meta: Dict[str, Any] = dict(meta or {})

        widths = [config.base_channels * 2 ** i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        in_ch = config.in_channels
        for w in widths[:-1]:
            self.encoders.append(ConvBlock(in_ch, w))
            in_ch = w
        self.bottleneck = ConvBlock(widths[-2], widths[-1])
        self.decoders = nn.ModuleList(
            ConvBlock(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(config.depth))
        )
        self.footprint_head = nn.Conv2d(widths[0], 1, kernel_size=1) if config.has_footprint else None
        self.height_head = nn.Conv2d(widths[0], 1, kernel_size=1) if config.has_height else None

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.reset_parameters()

    def reset_parameters(self):
        """Kaiming-uniform (fan-in) kernels, zero biases"""
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_uniform_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)

    def check_input(self, x: torch.Tensor):
        if x.dim() != 4:
            raise ShapeError(f"expected (batch, channels, height, width) input, got {tuple(x.shape)}")
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"channels: expected {self.config.in_channels}, got {x.shape[1]}")
        step = 2 ** self.config.depth
        for name, size in (("height", x.shape[2]), ("width", x.shape[3])):
            if size % step:
                raise ShapeError(f"{name} {size} not divisible by {step} (depth {self.config.depth})")

    def forward(self, x: torch.Tensor, trace: Trace = None) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """
        Run the network

        Args:
            x: (B, in_channels, H, W) input
            trace: Optional list collecting ReLU sign masks and max-pool
                indices (used by the gradient check to detect kinks)

        Returns:
            (footprint logits, normalized height), each (B, 1, H, W) or None
            when the head is absent
        """
        self.check_input(x)
        skips = []
        for block in self.encoders:
            x = block(x, trace)
            skips.append(x)
            if trace is not None:
                x, indices = F.max_pool2d(x, 2, return_indices=True)
                trace.append(indices)
            else:
                x = F.max_pool2d(x, 2)
        x = self.bottleneck(x, trace)
        for block, skip in zip(self.decoders, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1), trace)

        fp_logits = self.footprint_head(x) if self.footprint_head is not None else None
        h_norm = self.height_head(x) if self.height_head is not None else None
        return fp_logits, h_norm

    @torch.no_grad()
    def infer(self, x: torch.Tensor) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor]]:
        """Footprint probability and height clamped to [0, 1]"""
        was_training = self.training
        self.eval()
        fp_logits, h_norm = self(x)
        self.train(was_training)
        prob = torch.sigmoid(fp_logits) if fp_logits is not None else None
        height = h_norm.clamp(0.0, 1.0) if h_norm is not None else None
        return prob, height


# Checkpoint container ------------------------------------------------------

def encode_model(model: FloorspaceModel) -> bytes:
    """Serialize config, manifest and float32 parameters to FSM1 bytes"""
    header = json.dumps({"model": asdict(model.config), "meta": model.meta}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, _U32.pack(len(header)), header]

    state = model.state_dict()
    parts.append(_U32.pack(len(state)))
    for name, tensor in state.items():
        array = tensor.detach().cpu().numpy().astype("<f4")
        raw_name = name.encode("utf-8")
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(array.ndim)]
        parts += [_U32.pack(d) for d in array.shape]
        parts.append(array.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedPayloadError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_model(blob: bytes) -> FloorspaceModel:
    """Rebuild a model from FSM1 bytes"""
    if blob[:4] != MAGIC:
        raise BadMagicError(f"not an FSM1 checkpoint (magic {blob[:4]!r})")
    reader = _Reader(blob)
    reader.take(4)
    try:
        header = json.loads(reader.take(reader.u32()).decode("utf-8"))
        config = ModelConfig(**header["model"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"unreadable checkpoint config block: {e}") from None

    state = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        dims = [reader.u32() for _ in range(reader.u32())]
        count = int(np.prod(dims)) if dims else 1
        array = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(dims)
        state[name] = torch.from_numpy(array.astype(np.float32))
    if reader.pos != len(blob):
        raise FormatError(f"{len(blob) - reader.pos} trailing bytes after checkpoint parameters")

    model = FloorspaceModel(config, meta=header.get("meta"))
    expected = set(model.state_dict())
    if set(state) != expected:
        raise FormatError(f"checkpoint parameters do not match config: {sorted(expected ^ set(state))}")
    model.load_state_dict(state)
    return model


def save_model(model: FloorspaceModel, path: Union[str, Path]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_model(model))
    logger.info("saved checkpoint %s (%d parameters)", path, sum(p.numel() for p in model.parameters()))


def load_model(path: Union[str, Path]) -> FloorspaceModel:
    return decode_model(Path(path).read_bytes())

"""Randomly initialized U-shaped encoder-decoder mapping fixed noise to RGB + normalized disparity."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class NonFiniteParameterError(FloatingPointError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    input_channels: int = 16
    encoder_channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernel: int = 3
    output_channels: int = 4
    upsample: str = "bilinear"
    leaky_slope: float = 0.2
    noise_skip: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        if not self.encoder_channels:
            raise ValueError("encoder_channels must not be empty")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.output_channels != 4:
            raise ValueError("the generator predicts exactly RGB + disparity (4 channels)")

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    def digest(self) -> bytes:
        """SHA-256 of the architecture fields (seed excluded)."""
        fields = asdict(self)
        fields.pop("seed")
        fields["encoder_channels"] = list(fields["encoder_channels"])
        return hashlib.sha256(json.dumps(fields, sort_keys=True).encode()).digest()


class ConvUnit(nn.Module):
    """Reflection-padded convolution, per-channel spatial normalization, leaky ReLU."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int, slope: float):
        super().__init__()
        self.pad = kernel // 2
        self.conv = nn.Conv2d(cin, cout, kernel, stride=stride)
        self.norm = nn.InstanceNorm2d(cout, affine=True)
        self.slope = slope

    def forward(self, x):
        if self.pad:
            x = F.pad(x, (self.pad,) * 4, mode="reflect")
        return F.leaky_relu(self.norm(self.conv(x)), self.slope)


class Generator(nn.Module):
    """Encoder of stride-2 blocks, mirrored bilinear-upsampling decoder, concatenated skips.

    Skips join at matching scales; the full-resolution block has no encoder
    counterpart and sees only upsampled features unless ``noise_skip`` adds the
    raw input there (a per-pixel path that lets holes be filled with noise).
    """

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        k, slope = config.kernel, config.leaky_slope
        chans = config.encoder_channels
        self.encoder = nn.ModuleList()
        cin = config.input_channels
        for c in chans:
            self.encoder.append(nn.Sequential(ConvUnit(cin, c, k, 2, slope), ConvUnit(c, c, k, 1, slope)))
            cin = c
        skips = (config.input_channels if config.noise_skip else 0,) + chans[:-1]
        outs = (chans[0],) + chans[:-1]
        self.decoder = nn.ModuleList()
        for level in reversed(range(config.depth)):
            cout = outs[level]
            self.decoder.append(
                nn.Sequential(ConvUnit(cin + skips[level], cout, k, 1, slope), ConvUnit(cout, cout, k, 1, slope))
            )
            cin = cout
        self.head = nn.Conv2d(cin, config.output_channels, 1)

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        feats = [noise]
        h = noise
        for block in self.encoder:
            h = block(h)
            feats.append(h)
        feats.pop()
        for block in self.decoder:
            skip = feats.pop()
            h = F.interpolate(h, size=skip.shape[-2:], mode=self.config.upsample, align_corners=False)
            if skip is not noise or self.config.noise_skip:
                h = torch.cat([h, skip], dim=1)
            h = block(h)
        return torch.sigmoid(self.head(h))


def make_noise(m: int, n: int, channels: int = 16, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    """Fixed network input: (channels, m, n) uniform on [0, 0.1]."""
    gen = torch.Generator().manual_seed(seed)
    return (torch.rand(channels, m, n, generator=gen, dtype=torch.float64) * 0.1).to(dtype)


def init_generator(config: GeneratorConfig, dtype=torch.float32) -> Generator:
    """Build the generator with seeded He-normal convolution weights and zero biases."""
    net = Generator(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, nn.Conv2d):
                fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
                std = (2.0 / fan_in) ** 0.5
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen, dtype=torch.float64) * std)
                module.bias.zero_()
            elif isinstance(module, nn.InstanceNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
    return net.to(dtype)


def padded_size(size: int, levels: int) -> int:
    """Smallest multiple of 2**levels that keeps the bottleneck at least 2 pixels wide."""
    step = 2**levels
    return max(-(-size // step) * step, 2 * step)


def _extend(x: torch.Tensor, size: int, dim: int) -> torch.Tensor:
    # repeated reflection handles targets more than twice the input size
    while x.shape[dim] < size:
        step = min(size - x.shape[dim], x.shape[dim] - 1)
        mode = "reflect"
        if step <= 0:  # a single row/column cannot be reflected
            step, mode = size - x.shape[dim], "replicate"
        pad = [0, 0, 0, 0]
        pad[1 if dim == -1 else 3] = step
        x = F.pad(x, tuple(pad), mode=mode)
    return x


def _reflect_extend(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    return _extend(_extend(x, height, -2), width, -1)


def check_finite(params: Generator) -> None:
    for name, p in params.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteParameterError(f"non-finite values in generator parameter '{name}'")


def forward(params: Generator, config: GeneratorConfig, noise: torch.Tensor, check: bool = True):
    """Run the generator on (C, m, n) noise.

    Returns ``(rgb, disparity)`` with shapes (m, n, 3) and (m, n), both in (0, 1).
    """
    if check:
        check_finite(params)
    if noise.ndim != 3 or noise.shape[0] != config.input_channels:
        raise ValueError(f"noise must be ({config.input_channels}, m, n), got {tuple(noise.shape)}")
    _, m, n = noise.shape
    x = _reflect_extend(noise.unsqueeze(0), padded_size(m, config.depth), padded_size(n, config.depth))
    out = params(x)[0, :, :m, :n]
    return out[:3].permute(1, 2, 0), out[3]


def parameter_count(params: Generator) -> int:
    return sum(p.numel() for p in params.parameters())


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"DDPRIOR\0"
#   u32       format version (1)
#   32 bytes  SHA-256 of the architecture config (GeneratorConfig.digest)
#   u32       byte length L of the config JSON, then L bytes of UTF-8 JSON
#   u32       tensor count T
#   T times:  u16 name length, name bytes (UTF-8), u8 dtype code (0=f32, 1=f64),
#             u8 ndim, ndim x u32 dims, raw little-endian values in C order

_MAGIC = b"DDPRIOR\0"
_VERSION = 1
_DTYPES = {torch.float32: (0, "<f4"), torch.float64: (1, "<f8")}
_CODES = {0: torch.float32, 1: torch.float64}


def save_checkpoint(params: Generator, path) -> None:
    config = params.config
    cfg = asdict(config)
    cfg["encoder_channels"] = list(cfg["encoder_channels"])
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode()
    state = params.state_dict()
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<I", _VERSION) + config.digest())
        f.write(struct.pack("<I", len(cfg_bytes)) + cfg_bytes)
        f.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            code, fmt = _DTYPES[tensor.dtype]
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(tensor.detach().contiguous().numpy().astype(fmt).tobytes())


def load_checkpoint(path) -> Generator:
    import numpy as np

    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a generator checkpoint")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    digest = blob[12:44]
    (cfg_len,) = struct.unpack_from("<I", blob, 44)
    pos = 48 + cfg_len
    config = GeneratorConfig(**json.loads(blob[48:pos]))
    if config.digest() != digest:
        raise ValueError(f"{path}: config hash mismatch")
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    dtype = torch.float32
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        dtype = _CODES[code]
        fmt = _DTYPES[dtype][1]
        size = int(np.prod(shape)) * np.dtype(fmt).itemsize
        if pos + size > len(blob):
            raise ValueError(f"{path}: truncated tensor '{name}'")
        state[name] = torch.from_numpy(np.frombuffer(blob[pos : pos + size], dtype=fmt).reshape(shape).copy())
        pos += size
    net = Generator(config).to(dtype)
    net.load_state_dict(state)
    return net

"""Lightweight attribute-map restoration network.

LdcUnet is a U-Net over depthwise-separable residual blocks: each block
runs two DSC layers on the residual branch, squeezes a global context
vector from it, and gates the residual per channel before the skip-add.
Block count per scale is halved relative to the heavier residual baseline,
which together with the DSC factorization cuts the parameter count by
roughly 10×. A standard-convolution baseline with 4 residual blocks per
scale is included for size/quality comparisons.

Checkpoints are a single .npz holding a JSON config string plus named
parameter arrays. Keys follow the module structure:
``stem``, ``enc{s}.block{i}.*``, ``down{s}``, ``up{s}``,
``dec{s}.block{i}.*``, ``head`` (the deepest ``enc`` scale is the
bottleneck).
"""

from __future__ import annotations

import io
import json
from collections import OrderedDict
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import CHECKPOINT_FORMAT_VERSION
from .errors import ContractError, FormatError


@dataclass(frozen=True)
class LdcUnetConfig:
    in_channels: int = 4          # RGB + occupancy
    out_channels: int = 3
    scales: int = 4
    base_channels: tuple[int, ...] = (64, 128, 256, 512)
    blocks_per_scale: int = 2
    context_reduction: int = 8
    residual_output: bool = True

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(self.base_channels))
        if self.scales != len(self.base_channels):
            raise ContractError(
                f"scales={self.scales} but {len(self.base_channels)} channel widths")
        if self.blocks_per_scale < 1:
            raise ContractError("blocks_per_scale must be >= 1")
        for c in self.base_channels:
            if c % self.context_reduction:
                raise ContractError(
                    f"channel width {c} not divisible by context_reduction "
                    f"{self.context_reduction}")

    @property
    def size_multiple(self) -> int:
        """H and W must be padded to a multiple of this before forward."""
        return 1 << (self.scales - 1)


@dataclass(frozen=True)
class TensorSpec:
    """Declared shape and value-range contract for one pipeline tensor."""

    shape: tuple
    role: str = "feature"        # "input" | "mask" | "feature" | "output"

    def check(self, t: torch.Tensor) -> None:
        if tuple(t.shape) != tuple(self.shape):
            raise ContractError(
                f"{self.role} tensor shape {tuple(t.shape)} != declared {self.shape}")


def dsc_forward(x: torch.Tensor, depth_kernel: torch.Tensor,
                point_kernel: torch.Tensor,
                depth_bias: torch.Tensor | None = None,
                point_bias: torch.Tensor | None = None) -> torch.Tensor:
    """Depthwise separable convolution as an explicit functional op.

    depth_kernel: (C_in, k, k) per-channel spatial filter, k odd,
    same-padded. point_kernel: (C_out, C_in) channel mixer.
    """
    if x.ndim != 4:
        raise ContractError(f"expected N×C×H×W input, got shape {tuple(x.shape)}")
    c_in, kh, kw = depth_kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ContractError(f"depth kernel must be square with odd size, got {kh}×{kw}")
    if x.shape[1] != c_in:
        raise ContractError(f"input has {x.shape[1]} channels, kernel expects {c_in}")
    if point_kernel.shape[1] != c_in:
        raise ContractError(
            f"point kernel mixes {point_kernel.shape[1]} channels, expected {c_in}")
    y = F.conv2d(x, depth_kernel.unsqueeze(1), bias=depth_bias,
                 padding=kh // 2, groups=c_in)
    return F.conv2d(y, point_kernel.unsqueeze(-1).unsqueeze(-1), bias=point_bias)


class DscLayer(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel_size: int = 3):
        super().__init__()
        self.dw = nn.Conv2d(c_in, c_in, kernel_size, padding=kernel_size // 2,
                            groups=c_in)
        self.pw = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x):
        return self.pw(self.dw(x))


class ContextGate(nn.Module):
    """Global-average context → bottleneck → per-channel sigmoid gate."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.fc1 = nn.Conv2d(channels, channels // reduction, 1)
        self.fc2 = nn.Conv2d(channels // reduction, channels, 1)

    def forward(self, r):
        g = r.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.fc2(F.relu(self.fc1(g))))


class LrBlock(nn.Module):
    """Residual block: DSC→ReLU→DSC, context-gated before the skip-add."""

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        self.dsc1 = DscLayer(channels, channels)
        self.dsc2 = DscLayer(channels, channels)
        self.gate = ContextGate(channels, reduction)

    def forward(self, x):
        r = self.dsc2(F.relu(self.dsc1(x)))
        return x + self.gate(r) * r


class ResBlock(nn.Module):
    """Plain two-conv residual block (baseline building brick, bias-free)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class _Unet(nn.Module):
    """Shared encoder/decoder skeleton; block factory decides the flavor."""

    def __init__(self, cfg: LdcUnetConfig, make_block):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1, bias=False)
        for s in range(cfg.scales):
            blocks = nn.Sequential(OrderedDict(
                (f"block{i}", make_block(ch[s])) for i in range(cfg.blocks_per_scale)))
            setattr(self, f"enc{s}", blocks)
            if s < cfg.scales - 1:
                setattr(self, f"down{s}",
                        nn.Conv2d(ch[s], ch[s + 1], 2, stride=2, bias=False))
        for s in range(cfg.scales - 1):
            setattr(self, f"up{s}",
                    nn.ConvTranspose2d(ch[s + 1], ch[s], 2, stride=2, bias=False))
            blocks = nn.Sequential(OrderedDict(
                (f"block{i}", make_block(ch[s])) for i in range(cfg.blocks_per_scale)))
            setattr(self, f"dec{s}", blocks)
        self.head = nn.Conv2d(ch[0], cfg.out_channels, 3, padding=1, bias=False)

    def forward(self, x, debug_shapes: bool = False):
        cfg = self.cfg
        n, _, h, w = x.shape
        if h % cfg.size_multiple or w % cfg.size_multiple:
            raise ContractError(
                f"input {h}×{w} not a multiple of {cfg.size_multiple}; pad first")
        if debug_shapes:
            TensorSpec((n, cfg.in_channels, h, w), "input").check(x)
        feats = self.stem(x)
        skips = []
        for s in range(cfg.scales - 1):
            feats = getattr(self, f"enc{s}")(feats)
            if debug_shapes:
                TensorSpec((n, cfg.base_channels[s], h >> s, w >> s)).check(feats)
            skips.append(feats)
            feats = getattr(self, f"down{s}")(feats)
        feats = getattr(self, f"enc{cfg.scales - 1}")(feats)
        if debug_shapes:
            s = cfg.scales - 1
            TensorSpec((n, cfg.base_channels[s], h >> s, w >> s)).check(feats)
        for s in reversed(range(cfg.scales - 1)):
            feats = getattr(self, f"up{s}")(feats) + skips[s]
            feats = getattr(self, f"dec{s}")(feats)
            if debug_shapes:
                TensorSpec((n, cfg.base_channels[s], h >> s, w >> s)).check(feats)
        out = self.head(feats)
        if cfg.residual_output:
            out = out + x[:, : cfg.out_channels]
        if debug_shapes:
            TensorSpec((n, cfg.out_channels, h, w), "output").check(out)
        return out


@dataclass
class ModelHandle:
    """A built network plus its config and verified parameter count."""

    config: LdcUnetConfig
    net: _Unet
    param_count: int = field(init=False)
    arch: str = "ldc"
    trained_phases: tuple[int, ...] = ()

    def __post_init__(self):
        self.param_count = count_params(self)

    @property
    def weights(self) -> dict[str, torch.Tensor]:
        return self.net.state_dict()


def count_params(m: ModelHandle) -> int:
    """Exact number of scalar weights and biases in the built network."""
    return sum(p.numel() for p in m.net.parameters())


def _init_weights(net: nn.Module, seed: int) -> None:
    """Kaiming fan-in init, zero biases; the gate-final bias starts at zero
    (gates open halfway) and the head starts at zero so a fresh
    residual-output network is exactly the identity on its RGB channels."""
    gen = torch.Generator().manual_seed(seed)
    for mod in net.modules():
        if isinstance(mod, (nn.Conv2d, nn.ConvTranspose2d)):
            fan_in = mod.weight.shape[1] * mod.weight.shape[2] * mod.weight.shape[3]
            if isinstance(mod, nn.Conv2d) and mod.groups > 1:
                fan_in = mod.weight.shape[2] * mod.weight.shape[3]
            std = (2.0 / max(fan_in, 1)) ** 0.5
            with torch.no_grad():
                mod.weight.normal_(0.0, std, generator=gen)
                if mod.bias is not None:
                    mod.bias.zero_()
    for mod in net.modules():
        if isinstance(mod, ContextGate):
            with torch.no_grad():
                mod.fc2.bias.zero_()
    if isinstance(net, _Unet) and net.cfg.residual_output:
        with torch.no_grad():
            net.head.weight.zero_()


def build_ldc_unet(cfg: LdcUnetConfig = LdcUnetConfig(), seed: int = 0) -> ModelHandle:
    net = _Unet(cfg, lambda c: LrBlock(c, cfg.context_reduction))
    _init_weights(net, seed)
    net.eval()
    return ModelHandle(config=cfg, net=net, arch="ldc")


def build_drunet_baseline(seed: int = 0) -> ModelHandle:
    """Heavier reference net: 4 bias-free two-conv residual blocks per scale."""
    cfg = LdcUnetConfig(blocks_per_scale=4, residual_output=False)
    net = _Unet(cfg, ResBlock)
    _init_weights(net, seed)
    net.eval()
    return ModelHandle(config=cfg, net=net, arch="baseline")


_BLOCK_FACTORY = {
    "ldc": lambda cfg: (lambda c: LrBlock(c, cfg.context_reduction)),
    "baseline": lambda cfg: ResBlock,
}


def save_checkpoint(m: ModelHandle, path) -> None:
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "arch": m.arch,
        "config": asdict(m.config),
        "trained_phases": list(m.trained_phases),
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in m.net.state_dict().items()}
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelHandle:
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise FormatError(f"{path}: not a model checkpoint (missing __meta__)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"{path}: unsupported checkpoint version {meta.get('format_version')!r}")
        cfg_d = dict(meta["config"])
        cfg_d["base_channels"] = tuple(cfg_d["base_channels"])
        cfg = LdcUnetConfig(**cfg_d)
        arch = meta.get("arch", "ldc")
        net = _Unet(cfg, _BLOCK_FACTORY[arch](cfg))
        state = {k: torch.from_numpy(np.array(data[k]))
                 for k in data.files if k != "__meta__"}
    net.load_state_dict(state)
    net.eval()
    return ModelHandle(config=cfg, net=net, arch=arch,
                       trained_phases=tuple(meta.get("trained_phases", [])))


def _reflect_pad_to_multiple(arr: np.ndarray, mult: int) -> np.ndarray:
    h, w = arr.shape[:2]
    ph, pw = -h % mult, -w % mult
    if not ph and not pw:
        return arr
    pad = ((0, ph), (0, pw)) + ((0, 0),) * (arr.ndim - 2)
    return np.pad(arr, pad, mode="reflect")


def _forward_chunk(m: ModelHandle, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return m.net(x)


def _tiled_forward(m: ModelHandle, x: torch.Tensor, tile: int,
                   overlap: int = 16) -> torch.Tensor:
    """Deterministic overlap-blend tiling for inputs too large to run whole.

    Tiles are laid on a fixed grid with `overlap` pixels shared between
    neighbors; contributions are feathered with a linear ramp and
    normalized, so the result does not depend on tile visit order.
    """
    _, _, h, w = x.shape
    step = tile - 2 * overlap
    if step <= 0:
        raise ContractError(f"tile {tile} too small for overlap {overlap}")

    def starts(extent):
        if extent <= tile:
            return [0]
        s = list(range(0, extent - tile, step))
        s.append(extent - tile)
        return s

    out = torch.zeros((x.shape[0], m.config.out_channels, h, w), dtype=x.dtype)
    weight = torch.zeros((1, 1, h, w), dtype=x.dtype)

    def ramp(n, lo_taper, hi_taper):
        v = torch.ones(n, dtype=x.dtype)
        if lo_taper:
            v[:overlap] = torch.linspace(1.0 / overlap, 1.0, overlap, dtype=x.dtype)
        if hi_taper:
            v[-overlap:] = torch.linspace(1.0, 1.0 / overlap, overlap, dtype=x.dtype)
        return v

    for y0 in starts(h):
        for x0 in starts(w):
            th = min(tile, h - y0)
            tw = min(tile, w - x0)
            piece = _forward_chunk(m, x[:, :, y0:y0 + th, x0:x0 + tw])
            wy = ramp(th, y0 > 0, y0 + th < h)
            wx = ramp(tw, x0 > 0, x0 + tw < w)
            wmap = (wy[:, None] * wx[None, :])[None, None]
            out[:, :, y0:y0 + th, x0:x0 + tw] += piece * wmap
            weight[:, :, y0:y0 + th, x0:x0 + tw] += wmap
    return out / weight


def enhance(m: ModelHandle, attribute: np.ndarray, occupancy: np.ndarray,
            max_dim: int = 1024, tile: int = 512) -> np.ndarray:
    """Run the network over one attribute map.

    Input is normalized to [0,1] with occupancy as a binary extra channel,
    reflect-padded to the scale multiple, forwarded (tiled when a side
    exceeds `max_dim`), cropped, and re-quantized. Unoccupied pixels are
    passed through from the input: enhancement only applies to content.
    """
    attribute = np.asarray(attribute)
    occupancy = np.asarray(occupancy).astype(bool)
    if attribute.ndim != 3 or attribute.shape[2] != 3 or attribute.dtype != np.uint8:
        raise ContractError(
            f"expected uint8 H×W×3 attribute map, got {attribute.dtype} "
            f"{attribute.shape}")
    if occupancy.shape != attribute.shape[:2]:
        raise ContractError(
            f"occupancy shape {occupancy.shape} != attribute {attribute.shape[:2]}")
    h, w, _ = attribute.shape
    mult = m.config.size_multiple
    rgb = _reflect_pad_to_multiple(attribute.astype(np.float32) / 255.0, mult)
    occ = _reflect_pad_to_multiple(occupancy.astype(np.float32), mult)
    x = torch.from_numpy(
        np.concatenate([rgb, occ[:, :, None]], axis=2).transpose(2, 0, 1)[None])
    if max(x.shape[2], x.shape[3]) > max_dim:
        tile = (tile // mult) * mult
        y = _tiled_forward(m, x, tile)
    else:
        y = _forward_chunk(m, x)
    out = y[0].numpy().transpose(1, 2, 0)[:h, :w]
    out = np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8)
    out[~occupancy] = attribute[~occupancy]
    return out

"""Dual-stream registration network with cross-modal spatial attention.

Each modality has its own encoder (no parameter sharing).  At every level a
conv block is followed by cross-modal spatial attention (CMSA) in both
directions, then max pooling:

    att   = sigmoid(W3 * relu(W1 * F1 + W2 * F2 + b12) + b3)
    F2hat = att * F2

where F2 is the stream being refined, F1 the other stream, and the W are
1x1x1 convolutions.  Fused skips (concat + conv block) feed a decoder of
nearest-neighbour upsampling + concat + conv block; a zero-initialised 3³
conv regresses the displacement field in voxel units of the input grid.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError
from .runtime import atomic_torch_save, load_checkpoint, seed_everything

CHANNELS_LITERAL = (16, 32, 32, 32)
CHANNELS_DOUBLING = (16, 32, 64, 128)
CHANNEL_PRESETS = {"literal": CHANNELS_LITERAL, "doubling": CHANNELS_DOUBLING, "desk": (8, 16, 16, 16)}
LEAKY_SLOPE = 0.01


@dataclass
class RegConfig:
    grid_size: int = 128
    channels: tuple = CHANNELS_LITERAL
    use_cmsa: bool = True
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.channels, str):
            if self.channels not in CHANNEL_PRESETS:
                raise ConfigurationError(f"unknown channel preset {self.channels!r}")
            self.channels = CHANNEL_PRESETS[self.channels]
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) < 1 or any(c < 2 or c % 2 for c in self.channels):
            raise ConfigurationError("channels must be even and >= 2")
        if self.grid_size % 2 ** len(self.channels):
            raise ConfigurationError(f"grid_size must be divisible by {2 ** len(self.channels)}")


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(nn.Conv3d(in_ch, out_ch, 3, padding=1), nn.LeakyReLU(LEAKY_SLOPE))


class CMSA(nn.Module):
    """Attention over ``F2`` computed from ``(F1, F2)``; returns ``(att, F2hat)``."""

    def __init__(self, channels, enabled=True):
        super().__init__()
        if channels % 2:
            raise ValueError("CMSA needs an even channel count")
        self.channels = channels
        self.enabled = enabled
        self.w1 = nn.Conv3d(channels, channels // 2, 1, bias=False)
        self.w2 = nn.Conv3d(channels, channels // 2, 1, bias=True)  # bias is b12
        self.w3 = nn.Conv3d(channels // 2, 1, 1, bias=True)  # bias is b3

    def forward(self, f1, f2):
        if f1.shape != f2.shape:
            raise ValueError(f"CMSA inputs differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
        if f1.shape[1] != self.channels:
            raise ValueError(f"CMSA expects {self.channels} channels, got {f1.shape[1]}")
        if not self.enabled:
            att = torch.ones_like(f2[:, :1])
        else:
            att = torch.sigmoid(self.w3(torch.relu(self.w1(f1) + self.w2(f2))))
            # keep the open interval in floating point: sigmoid rounds to 0/1 for |z| > ~37 in float64
            eps = torch.finfo(att.dtype).eps
            att = att.clamp(eps, 1 - eps)
        return att, att * f2


def cmsa_forward(f1, f2, block):
    return block(f1, f2)


class RegNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config
        ch = config.channels
        ins = (1,) + ch[:-1]
        self.enc_fixed = nn.ModuleList(ConvBlock(i, o) for i, o in zip(ins, ch))
        self.enc_moving = nn.ModuleList(ConvBlock(i, o) for i, o in zip(ins, ch))
        # cmsa_fixed refines the fixed stream with the moving one as context
        self.cmsa_fixed = nn.ModuleList(CMSA(c, config.use_cmsa) for c in ch)
        self.cmsa_moving = nn.ModuleList(CMSA(c, config.use_cmsa) for c in ch)
        self.fusion = nn.ModuleList(ConvBlock(2 * c, c) for c in ch)
        self.bottleneck = ConvBlock(2 * ch[-1], ch[-1])
        ups = ch[1:] + (ch[-1],)
        self.decoder = nn.ModuleList(ConvBlock(u + c, c) for u, c in zip(ups, ch))
        # He init keeps activations O(1) through the ~10 conv blocks on the
        # decoder path; the framework default shrinks them ~2.5x per block
        for mod in self.modules():
            if isinstance(mod, ConvBlock):
                nn.init.kaiming_normal_(mod[0].weight, a=LEAKY_SLOPE, nonlinearity="leaky_relu")
                nn.init.zeros_(mod[0].bias)
        self.head = nn.Conv3d(ch[0], 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, fixed, moving):
        return regnet_forward(self, fixed, moving)


def _check_inputs(model, fixed, moving):
    G = model.config.grid_size
    for name, x in (("fixed", fixed), ("moving", moving)):
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != (G, G, G):
            raise ValueError(f"{name} input must be (N, 1, {G}, {G}, {G}), got {tuple(x.shape)}")
    if fixed.shape != moving.shape:
        raise ValueError("fixed and moving batches differ in shape")


def encoder_forward(model, fixed, moving, return_attention=False):
    """Per-level refined (pre-pool) features ``[(F_fixed, F_moving), ...]`` and pooled outputs."""
    _check_inputs(model, fixed, moving)
    xf, xm = fixed, moving
    feats, atts = [], []
    for conv_f, conv_m, cm_f, cm_m in zip(model.enc_fixed, model.enc_moving,
                                            model.cmsa_fixed, model.cmsa_moving):
        ff, fm = conv_f(xf), conv_m(xm)
        att_f, ff_hat = cm_f(fm, ff)
        att_m, fm_hat = cm_m(ff, fm)
        feats.append((ff_hat, fm_hat))
        atts.append((att_f, att_m))
        xf, xm = F.max_pool3d(ff_hat, 2), F.max_pool3d(fm_hat, 2)
    out = (feats, (xf, xm))
    return out + (atts,) if return_attention else out


def decoder_forward(model, feats, pooled, fused_hook=None):
    """Displacement (N, 3, G, G, G) in voxel units from encoder outputs."""
    fused = [fuse(torch.cat(pair, dim=1)) for fuse, pair in zip(model.fusion, feats)]
    if fused_hook is not None:
        fused = fused_hook(fused)
    y = model.bottleneck(torch.cat(pooled, dim=1))
    for level in range(len(fused) - 1, -1, -1):
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        y = model.decoder[level](torch.cat([y, fused[level]], dim=1))
    return model.head(y)


def regnet_forward(model, fixed, moving):
    feats, pooled = encoder_forward(model, fixed, moving)
    return decoder_forward(model, feats, pooled)


def build_model(config):
    seed_everything(config.seed, threads=0)
    # float32 whatever the global default; callers cast with .double() for checks
    return RegNet(config).float()


def save_model(model, path, extra=None):
    payload = {"config": asdict(model.config), "state": model.state_dict(), "seed": model.config.seed}
    if extra:
        payload.update(extra)
    atomic_torch_save(payload, path)


def load_model(path):
    ck = load_checkpoint(path)
    cfg = ck["config"]
    cfg["channels"] = tuple(cfg["channels"])
    model = RegNet(RegConfig(**cfg))
    model.to(next(iter(ck["state"].values())).dtype)
    model.load_state_dict(ck["state"])
    model.eval()
    return model, ck

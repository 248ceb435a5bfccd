"""Frozen feature extraction, guidance assembly, the trainable decoder and
its loss, plus checkpoint handling. Only decoder parameters ever receive
gradients; backbones are frozen adapters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ccm import CorrelationStack
from .core import FeatureMap, ShapeMismatchError


class ConfigHashMismatchError(RuntimeError):
    """Checkpoint was produced under a different pipeline configuration."""


# ---------------------------------------------------------------------------
# backbones


@dataclass
class BackboneConfig:
    backend: str = "toy_conv"        # or "external_pretrained"
    in_channels: int = 12
    out_channels: int = 12
    n_layers: int = 0                # 0: synthetic feature grids pass through untouched
    stride: int = 1
    seed: int = 0
    two_level_concat: bool = False   # fuse the last two taps instead of one


class ToyConvBackbone(nn.Module):
    """Small frozen convolutional stack with seeded random weights.

    With ``n_layers == 0`` it is the identity and simply treats the input grid
    as the feature map, which is how synthetic feature-grid datasets are
    consumed. Otherwise it applies ``n_layers`` 3x3 convolutions (ReLU in
    between), folding the configured stride into the leading layers. All
    parameters are frozen at construction.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.n_layers == 0:
            if cfg.stride != 1 or cfg.in_channels != cfg.out_channels:
                raise ValueError("identity backbone requires stride 1 and matching channels")
            self.layers = nn.ModuleList()
        else:
            gen = torch.Generator().manual_seed(cfg.seed)
            remaining = cfg.stride
            layers = []
            chans = cfg.in_channels
            for i in range(cfg.n_layers):
                step = 2 if remaining > 1 else 1
                remaining //= step
                conv = nn.Conv2d(chans, cfg.out_channels, 3, stride=step, padding=1)
                with torch.no_grad():
                    fan_in = chans * 9
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen)
                                      * (2.0 / fan_in) ** 0.5)
                    conv.bias.zero_()
                layers.append(conv)
                chans = cfg.out_channels
            if remaining > 1:
                raise ValueError(f"stride {cfg.stride} needs more than {cfg.n_layers} layers")
            self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    @property
    def out_stride(self) -> int:
        return self.cfg.stride

    @property
    def feature_channels(self) -> int:
        if self.cfg.n_layers == 0:
            return self.cfg.out_channels
        return self.cfg.out_channels * (2 if self.cfg.two_level_concat else 1)

    def forward(self, image: torch.Tensor) -> FeatureMap:
        """(C, H, W) image tensor -> FeatureMap at the configured stride."""
        if not self.layers:
            return FeatureMap(image, stride=1)
        x = image.unsqueeze(0)
        taps = []
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i + 1 < len(self.layers):
                x = F.relu(x)
            taps.append(x)
        out = taps[-1]
        if self.cfg.two_level_concat and len(taps) >= 2:
            prev = taps[-2]
            if prev.shape[-2:] != out.shape[-2:]:
                prev = F.interpolate(prev, size=out.shape[-2:], mode="bilinear",
                                     align_corners=False)
            out = torch.cat([prev, out], dim=1)
        return FeatureMap(out[0], stride=self.cfg.stride)


class ExternalBackbone(nn.Module):
    """Adapter around a user-supplied pretrained module.

    The wrapped module must map a (1, C_in, H, W) batch to a (1, C_out, h, w)
    feature batch at the declared stride. It is frozen on wrap; weights are
    the caller's responsibility.
    """

    def __init__(self, module: nn.Module, out_channels: int, out_stride: int):
        super().__init__()
        self.module = module
        self._channels = out_channels
        self._stride = out_stride
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()

    @property
    def out_stride(self) -> int:
        return self._stride

    @property
    def feature_channels(self) -> int:
        return self._channels

    def forward(self, image: torch.Tensor) -> FeatureMap:
        out = self.module(image.unsqueeze(0))
        return FeatureMap(out[0], stride=self._stride)


def build_backbone(cfg: BackboneConfig, external: nn.Module | None = None):
    if cfg.backend == "toy_conv":
        return ToyConvBackbone(cfg)
    if cfg.backend == "external_pretrained":
        if external is None:
            raise ValueError("external_pretrained backend needs a wrapped module")
        return ExternalBackbone(external, cfg.out_channels, cfg.stride)
    raise ValueError(f"unknown backbone backend {cfg.backend!r}")


def parameter_fingerprint(module: nn.Module) -> str:
    """Hash of all parameter bytes; used to prove frozen weights never move."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# guidance assembly


def assemble_guidance(feat_q: torch.Tensor, assoc: torch.Tensor,
                      corr: CorrelationStack) -> torch.Tensor:
    """Concatenate query features, association map and the correlation pair.

    Channel layout is fixed: C feature channels, then the association map,
    then rcm, then fcm, giving C + 3 channels.
    """
    if assoc.shape != feat_q.shape[1:]:
        raise ShapeMismatchError("assemble_guidance: association map size mismatch")
    return torch.cat([feat_q, assoc.unsqueeze(0), corr.stacked()], dim=0)


# ---------------------------------------------------------------------------
# decoder


@dataclass
class DecoderConfig:
    mid_channels: int = 16
    aspp_rates: tuple = (1, 6, 12)
    seed: int = 0


class Decoder(nn.Module):
    """Dilated-pyramid head producing a soft mask at feature resolution.

    One block of parallel 3x3 convolutions at the configured dilation rates
    (fused by a 1x1 convolution), three plain 3x3 convolution blocks, and a
    single-channel head with a logistic output.
    """

    def __init__(self, in_channels: int, cfg: DecoderConfig | None = None):
        super().__init__()
        cfg = cfg or DecoderConfig()
        self.cfg = cfg
        self.in_channels = in_channels
        mid = cfg.mid_channels
        self.branches = nn.ModuleList([
            nn.Conv2d(in_channels, mid, 3, padding=r, dilation=r)
            for r in cfg.aspp_rates
        ])
        self.fuse = nn.Conv2d(mid * len(cfg.aspp_rates), mid, 1)
        self.blocks = nn.ModuleList([
            nn.Conv2d(mid, mid, 3, padding=1) for _ in range(3)
        ])
        self.head = nn.Conv2d(mid, 1, 1)
        self._seeded_init(cfg.seed)

    def _seeded_init(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                with torch.no_grad():
                    m.weight.copy_(torch.randn(m.weight.shape, generator=gen)
                                   * (2.0 / fan_in) ** 0.5)
                    m.bias.zero_()

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """(C_in, h, w) guidance stack -> (h, w) soft mask in [0, 1]."""
        if stack.dim() != 3 or stack.shape[0] != self.in_channels:
            raise ShapeMismatchError(
                f"decoder expects ({self.in_channels},h,w), got {tuple(stack.shape)}")
        x = stack.unsqueeze(0)
        x = F.relu(torch.cat([b(x) for b in self.branches], dim=1))
        x = F.relu(self.fuse(x))
        for block in self.blocks:
            x = F.relu(block(x))
        return torch.sigmoid(self.head(x))[0, 0]

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def expected_decoder_params(in_channels: int, cfg: DecoderConfig) -> int:
    """Closed-form parameter count for the decoder architecture."""
    mid = cfg.mid_channels
    n_rates = len(cfg.aspp_rates)
    total = n_rates * (in_channels * mid * 9 + mid)   # pyramid branches
    total += mid * n_rates * mid * 1 + mid            # 1x1 fuse
    total += 3 * (mid * mid * 9 + mid)                # plain blocks
    total += mid * 1 * 1 + 1                          # head
    return total


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred: torch.Tensor, target: torch.Tensor,
             eps: float = 1e-7) -> torch.Tensor:
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps]."""
    if pred.shape != target.shape:
        raise ShapeMismatchError("bce_loss: prediction/target shape mismatch")
    p = pred.clamp(eps, 1.0 - eps)
    return -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p)).mean()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = 1


def config_hash(payload: dict) -> str:
    """Stable short hash of the pipeline-defining configuration sections."""
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(path, decoder: Decoder, optimizer, step: int,
                    cfg_hash: str, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_FORMAT,
        "config_hash": cfg_hash,
        "step": step,
        "decoder_state": decoder.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng_state": torch.get_rng_state(),
        "numpy_rng_state": np.random.get_state(),
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, decoder: Decoder, optimizer=None,
                    cfg_hash: str | None = None) -> dict:
    """Restore decoder (and optimizer) state; refuses on config-hash mismatch."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    payload = torch.load(path, weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT:
        raise ConfigHashMismatchError(
            f"unsupported checkpoint format {payload.get('format_version')!r}")
    if cfg_hash is not None and payload["config_hash"] != cfg_hash:
        raise ConfigHashMismatchError(
            f"checkpoint was built for config {payload['config_hash']}, "
            f"current config is {cfg_hash}")
    decoder.load_state_dict(payload["decoder_state"])
    if optimizer is not None and payload["optimizer_state"] is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    torch.set_rng_state(payload["torch_rng_state"])
    np.random.set_state(payload["numpy_rng_state"])
    return payload

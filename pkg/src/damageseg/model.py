"""Siamese encoder-decoder segmentation models.

A single shared encoder produces feature pyramids at strides [2, 4, 8, 16, 32]
for the pre and post images; the two pyramids are fused per stride by channel
concatenation or element-wise subtraction and fed to a UNet or FPN decoder
that outputs 5-class logits at full input resolution. The input-concat
baseline instead stacks the pair into one 6-channel tensor before a single
encoder pass.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import NUM_CLASSES
from .exceptions import ConfigError
from .metrics import EvalResult

STRIDES = (2, 4, 8, 16, 32)
MODES = ("input-concat", "siamese-concat", "siamese-subtract")
CHECKPOINT_FORMAT_VERSION = 1

# name -> per-level channel counts at strides 2..32
ENCODER_CHANNELS = {
    "tiny-a": (16, 32, 64, 128, 256),
    "tiny-b": (32, 64, 128, 256, 512),
}
_EXTERNAL_ENCODERS = {}


def register_encoder(name: str, factory, channels) -> None:
    """Expose an external 5-level backbone under the registry interface.

    factory(in_channels) must return an nn.Module mapping a (B, C, H, W)
    tensor to a list of 5 feature maps at strides 2, 4, 8, 16, 32.
    """
    _EXTERNAL_ENCODERS[name] = (factory, tuple(channels))


def encoder_channels(name: str):
    if name in ENCODER_CHANNELS:
        return ENCODER_CHANNELS[name]
    if name in _EXTERNAL_ENCODERS:
        return _EXTERNAL_ENCODERS[name][1]
    raise ConfigError(f"unknown encoder {name!r}; registered: "
                      f"{sorted(ENCODER_CHANNELS) + sorted(_EXTERNAL_ENCODERS)}")


@dataclass
class ModelConfig:
    mode: str = "siamese-concat"
    encoder: str = "tiny-a"
    decoder: str = "unet"
    decoder_width: int = 16
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.decoder not in ("unet", "fpn"):
            raise ConfigError(f"unknown decoder {self.decoder!r}; choose unet or fpn")
        if self.num_classes != NUM_CLASSES:
            raise ConfigError("num_classes is fixed at 5")

    @property
    def in_channels(self) -> int:
        return 6 if self.mode == "input-concat" else 3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FeaturePyramid:
    """Five feature maps at strides 2..32; tensors are (B, C, H/s, W/s)."""

    levels: list

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ValueError(f"pyramid needs exactly 5 levels, got {len(self.levels)}")

    @property
    def channels(self):
        return tuple(int(t.shape[1]) for t in self.levels)


def fuse_pyramids(a: FeaturePyramid, b: FeaturePyramid, mode: str) -> FeaturePyramid:
    """Per-stride fusion: 'concat' stacks channels (a first), 'subtract' is a - b."""
    if mode not in ("concat", "subtract"):
        raise ConfigError(f"fusion mode must be concat or subtract, got {mode!r}")
    for i, (fa, fb) in enumerate(zip(a.levels, b.levels)):
        if fa.shape != fb.shape:
            raise ValueError(f"pyramid shape mismatch at level {i} (stride {STRIDES[i]}): "
                             f"{tuple(fa.shape)} vs {tuple(fb.shape)}")
    if mode == "concat":
        return FeaturePyramid([torch.cat([fa, fb], dim=1)
                               for fa, fb in zip(a.levels, b.levels)])
    return FeaturePyramid([fa - fb for fa, fb in zip(a.levels, b.levels)])


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.LeakyReLU(0.1, inplace=True),
    )


class TinyEncoder(nn.Module):
    """Strided-conv backbone emitting 5 feature maps at strides 2..32."""

    def __init__(self, channels, in_channels: int = 3):
        super().__init__()
        self.channels = tuple(channels)
        stages = []
        cin = in_channels
        for cout in channels:
            stages.append(nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.1, inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.1, inplace=True),
            ))
            cin = cout
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class UnetDecoder(nn.Module):
    """Top-down decoder with skip connections from the fused pyramid.

    Each pyramid level is first projected 1x1 to the decoder width for its
    stride (this also restores the width after concat fusion), then merged
    top-down with upsampling; a final bilinear x2 upsample plus one conv
    brings the head to full resolution.
    """

    def __init__(self, in_channels, width: int, num_classes: int):
        super().__init__()
        self.in_channels = tuple(in_channels)
        widths = [width * (2 ** i) for i in range(5)]
        self.proj = nn.ModuleList(
            nn.Conv2d(c, w, 1) for c, w in zip(in_channels, widths))
        self.merge = nn.ModuleList(
            _conv_block(widths[i] + widths[i + 1], widths[i]) for i in range(4))
        self.head = nn.Sequential(_conv_block(widths[0], widths[0]),
                                  nn.Conv2d(widths[0], num_classes, 1))

    def forward(self, levels):
        x = self.proj[4](levels[4])
        for i in range(3, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = self.merge[i](torch.cat([self.proj[i](levels[i]), x], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.head(x)


class FpnDecoder(nn.Module):
    """Lateral 1x1 projections to one width, top-down addition, merged heads."""

    def __init__(self, in_channels, width: int, num_classes: int):
        super().__init__()
        self.in_channels = tuple(in_channels)
        fpn_width = width * 4
        self.lateral = nn.ModuleList(nn.Conv2d(c, fpn_width, 1) for c in in_channels)
        self.smooth = nn.ModuleList(_conv_block(fpn_width, fpn_width // 2)
                                    for _ in in_channels)
        self.head = nn.Sequential(_conv_block(fpn_width // 2, fpn_width // 2),
                                  nn.Conv2d(fpn_width // 2, num_classes, 1))

    def forward(self, levels):
        laterals = [lat(f) for lat, f in zip(self.lateral, levels)]
        for i in range(3, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(
                laterals[i + 1], size=laterals[i].shape[-2:], mode="nearest")
        target = laterals[0].shape[-2:]
        merged = sum(
            F.interpolate(s(l), size=target, mode="bilinear", align_corners=False)
            if l.shape[-2:] != target else s(l)
            for s, l in zip(self.smooth, laterals))
        merged = F.interpolate(merged, scale_factor=2, mode="bilinear",
                               align_corners=False)
        return self.head(merged)


class SegmentationModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        channels = encoder_channels(config.encoder)
        if config.encoder in _EXTERNAL_ENCODERS:
            self.encoder = _EXTERNAL_ENCODERS[config.encoder][0](config.in_channels)
        else:
            self.encoder = TinyEncoder(channels, in_channels=config.in_channels)
        if config.mode == "siamese-concat":
            dec_in = tuple(2 * c for c in channels)
        else:
            dec_in = channels
        dec_cls = UnetDecoder if config.decoder == "unet" else FpnDecoder
        self.decoder = dec_cls(dec_in, config.decoder_width, config.num_classes)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        """Run the shared encoder; image is (B, C, H, W) with H, W % 32 == 0."""
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"input size {w}x{h} must be divisible by 32")
        if image.shape[1] != self.config.in_channels:
            raise ValueError(f"mode {self.config.mode} expects "
                             f"{self.config.in_channels}-channel input, got {image.shape[1]}")
        return FeaturePyramid(self.encoder(image))

    def decode(self, pyramid: FeaturePyramid) -> torch.Tensor:
        if pyramid.channels != self.decoder.in_channels:
            raise ConfigError(f"pyramid channels {pyramid.channels} do not match "
                              f"decoder input {self.decoder.in_channels}")
        return self.decoder(pyramid.levels)

    def forward(self, pre: torch.Tensor, post: torch.Tensor) -> torch.Tensor:
        if pre.shape != post.shape:
            raise ValueError(f"pre/post shape mismatch: {tuple(pre.shape)} vs "
                             f"{tuple(post.shape)}")
        if self.config.mode == "input-concat":
            pyramid = self.encode(torch.cat([pre, post], dim=1))
        else:
            fusion = "concat" if self.config.mode == "siamese-concat" else "subtract"
            pyramid = fuse_pyramids(self.encode(pre), self.encode(post), fusion)
        return self.decode(pyramid)


def build_model(config: ModelConfig, seed: int) -> SegmentationModel:
    """Construct a model with deterministic initialization per seed."""
    torch.manual_seed(seed)
    return SegmentationModel(config)


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    arr = np.ascontiguousarray(image, dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0)


@torch.no_grad()
def predict_pair(model: SegmentationModel, pre: np.ndarray, post: np.ndarray):
    """Inference on one uint8 H x W x 3 pair; returns (logits, probabilities) as
    H x W x 5 float32 arrays."""
    model.eval()
    logits = model(_to_tensor(pre), _to_tensor(post))
    probs = torch.softmax(logits, dim=1)
    to_np = lambda t: t.squeeze(0).permute(1, 2, 0).cpu().numpy()
    return to_np(logits), to_np(probs)


def save_checkpoint(path: str, model: SegmentationModel, epoch: int,
                    val_result: EvalResult | None = None, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        "val_result": val_result.to_dict() if val_result else None,
    }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)


def load_checkpoint(path: str):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format in {path}")
    model = SegmentationModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    return model, payload

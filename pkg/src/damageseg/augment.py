"""Paired augmentation engine for pre/post image pairs and their masks.

Three op groups with strict scoping:

  post-only spatial   small rotation/shift/scale jitter, applied to the post
                      image only (simulates misregistration)
  shared spatial      crop, rescale, flips, rot90, transpose, grid shuffle and
                      mask dropout, drawn once and applied identically to pre,
                      post and mask
  color               brightness/contrast/gamma and HSV/RGB shifts, drawn
                      independently for pre and post, never touching the mask

Images are resampled bilinearly, masks with nearest-neighbor. Every applied
op is appended to a JSON-serializable log with its concrete parameters;
`replay_ops` re-applies a log verbatim.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np

from .dataset import RasterPair
from .exceptions import ConfigError

PRESETS = ("none", "color", "medium", "hard")


@dataclass
class PostSpatialParams:
    enabled: bool = False
    max_rotation_deg: float = 3.0
    max_shift_px: float = 10.0
    max_scale_pct: float = 2.0


@dataclass
class SharedSpatialParams:
    crop: int = 512
    random_crop: bool = False
    scale_min: float = 1.0
    scale_max: float = 1.0
    hflip_prob: float = 0.0
    rot90_prob: float = 0.0
    transpose_prob: float = 0.0
    grid_shuffle_prob: float = 0.0
    grid_size: int = 4
    mask_dropout_prob: float = 0.0
    instance_drop_prob: float = 0.05


@dataclass
class ColorParams:
    enabled: bool = False
    max_brightness: float = 0.2
    max_contrast: float = 0.2
    max_gamma: float = 0.2
    max_hsv_shift: float = 10.0
    max_rgb_shift: float = 12.0


@dataclass
class AugmentationPolicy:
    preset: str
    post_spatial: PostSpatialParams = field(default_factory=PostSpatialParams)
    shared_spatial: SharedSpatialParams = field(default_factory=SharedSpatialParams)
    color: ColorParams = field(default_factory=ColorParams)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AugmentedSample:
    pre: np.ndarray
    post: np.ndarray
    mask: np.ndarray
    applied_ops: list


def _preset_policy(preset: str) -> AugmentationPolicy:
    if preset == "none":
        return AugmentationPolicy(preset=preset)
    if preset == "color":
        return AugmentationPolicy(preset=preset, color=ColorParams(enabled=True))
    medium = AugmentationPolicy(
        preset=preset,
        post_spatial=PostSpatialParams(enabled=True),
        shared_spatial=SharedSpatialParams(
            random_crop=True, scale_min=0.8, scale_max=1.2,
            hflip_prob=0.5, rot90_prob=0.5, transpose_prob=0.5),
        color=ColorParams(enabled=True),
    )
    if preset == "medium":
        return medium
    if preset == "hard":
        medium.shared_spatial.grid_shuffle_prob = 0.3
        medium.shared_spatial.mask_dropout_prob = 0.3
        return medium
    raise ConfigError(f"unknown augmentation preset {preset!r}; choose from {PRESETS}")


def build_policy(preset: str, overrides: dict | None = None) -> AugmentationPolicy:
    """Return the named preset with an optional nested override map merged in."""
    policy = _preset_policy(preset)
    for group_name, group_overrides in (overrides or {}).items():
        if not hasattr(policy, group_name) or group_name == "preset":
            raise ConfigError(f"unknown augmentation group {group_name!r}")
        group = getattr(policy, group_name)
        for key, value in group_overrides.items():
            if not hasattr(group, key):
                raise ConfigError(f"unknown augmentation parameter {group_name}.{key}")
            setattr(group, key, value)
    for group in (policy.post_spatial, policy.shared_spatial, policy.color):
        for key, value in asdict(group).items():
            if isinstance(value, (int, float)) and not isinstance(value, bool) and value < 0:
                raise ValueError(f"augmentation magnitude {key} must be non-negative")
    if policy.shared_spatial.scale_min > policy.shared_spatial.scale_max:
        raise ValueError("scale_min must not exceed scale_max")
    return policy


# ---------------------------------------------------------------- primitives

def _affine(img: np.ndarray, angle: float, dx: float, dy: float, scale: float,
            nearest: bool = False) -> np.ndarray:
    h, w = img.shape[:2]
    mat = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), angle, scale)
    mat[:, 2] += (dx, dy)
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.warpAffine(img, mat, (w, h), flags=interp,
                          borderMode=cv2.BORDER_REFLECT_101)


def _crop_resize(img: np.ndarray, x: int, y: int, window: int, out: int,
                 nearest: bool = False) -> np.ndarray:
    patch = img[y:y + window, x:x + window]
    if window == out:
        return patch.copy()
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    return cv2.resize(patch, (out, out), interpolation=interp)


def _grid_shuffle(img: np.ndarray, grid: int, perm: list) -> np.ndarray:
    h, w = img.shape[:2]
    ch, cw = h // grid, w // grid
    cells = [img[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw]
             for r in range(grid) for c in range(grid)]
    out = np.empty_like(img)
    for dst, src in enumerate(perm):
        r, c = divmod(dst, grid)
        out[r * ch:(r + 1) * ch, c * cw:(c + 1) * cw] = cells[src]
    return out


def _apply_color(img: np.ndarray, params: dict) -> np.ndarray:
    out = img.astype(np.float32)
    out = out * (1.0 + params["brightness"])
    mean = out.mean()
    out = (out - mean) * (1.0 + params["contrast"]) + mean
    out = np.clip(out, 0, 255)
    out = 255.0 * (out / 255.0) ** (1.0 + params["gamma"])
    out = np.clip(out, 0, 255).astype(np.uint8)
    if params["space"] == "hsv":
        hsv = cv2.cvtColor(out, cv2.COLOR_RGB2HSV).astype(np.int16)
        hsv[..., 0] = (hsv[..., 0] + int(params["shift"][0])) % 180
        hsv[..., 1] = np.clip(hsv[..., 1] + int(params["shift"][1]), 0, 255)
        hsv[..., 2] = np.clip(hsv[..., 2] + int(params["shift"][2]), 0, 255)
        out = cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)
    else:
        shifted = out.astype(np.int16) + np.int16(params["shift"])
        out = np.clip(shifted, 0, 255).astype(np.uint8)
    return out


# ----------------------------------------------------------------- execution

def _execute_op(pre, post, mask, op):
    name, params = op["op"], op.get("params", {})
    if name == "post_affine":
        post = _affine(post, params["angle"], params["dx"], params["dy"], params["scale"])
    elif name == "crop_resize":
        x, y, window, out = params["x"], params["y"], params["window"], params["out"]
        pre = _crop_resize(pre, x, y, window, out)
        post = _crop_resize(post, x, y, window, out)
        mask = _crop_resize(mask, x, y, window, out, nearest=True)
    elif name == "hflip":
        pre, post, mask = pre[:, ::-1].copy(), post[:, ::-1].copy(), mask[:, ::-1].copy()
    elif name == "rot90":
        k = params["k"]
        pre = np.rot90(pre, k).copy()
        post = np.rot90(post, k).copy()
        mask = np.rot90(mask, k).copy()
    elif name == "transpose":
        pre = pre.transpose(1, 0, 2).copy()
        post = post.transpose(1, 0, 2).copy()
        mask = mask.T.copy()
    elif name == "grid_shuffle":
        grid, perm = params["grid"], params["perm"]
        pre = _grid_shuffle(pre, grid, perm)
        post = _grid_shuffle(post, grid, perm)
        mask = _grid_shuffle(mask, grid, perm)
    elif name == "mask_dropout":
        _, labels = cv2.connectedComponents((mask > 0).astype(np.uint8), connectivity=8)
        mask = mask.copy()
        for lab in params["dropped"]:
            mask[labels == lab] = 0
    elif name == "color":
        if op["group"] == "color_pre":
            pre = _apply_color(pre, params)
        else:
            post = _apply_color(post, params)
    else:
        raise ConfigError(f"unknown op {name!r} in augmentation log")
    return pre, post, mask


def apply_paired(policy: AugmentationPolicy, pair: RasterPair, seed: int) -> AugmentedSample:
    """Run the policy on a pair; deterministic per (policy, pair, seed)."""
    h, w = pair.mask.shape
    crop = policy.shared_spatial.crop
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than image {w}x{h}")
    rng = np.random.default_rng(seed)
    pre, post, mask = pair.pre, pair.post, pair.mask
    log = []

    def run(op):
        nonlocal pre, post, mask
        pre, post, mask = _execute_op(pre, post, mask, op)
        log.append(op)

    ps = policy.post_spatial
    if ps.enabled:
        run({"op": "post_affine", "group": "post_spatial", "params": {
            "angle": float(rng.uniform(-ps.max_rotation_deg, ps.max_rotation_deg)),
            "dx": float(rng.uniform(-ps.max_shift_px, ps.max_shift_px)),
            "dy": float(rng.uniform(-ps.max_shift_px, ps.max_shift_px)),
            "scale": float(1.0 + rng.uniform(-ps.max_scale_pct, ps.max_scale_pct) / 100.0),
        }})

    ss = policy.shared_spatial
    scale = float(rng.uniform(ss.scale_min, ss.scale_max))
    window = int(np.clip(round(crop / scale), 1, min(h, w)))
    if ss.random_crop:
        x = int(rng.integers(0, w - window + 1))
        y = int(rng.integers(0, h - window + 1))
    else:
        x, y = (w - window) // 2, (h - window) // 2
    run({"op": "crop_resize", "group": "shared_spatial",
         "params": {"x": x, "y": y, "window": window, "out": crop}})
    if rng.random() < ss.hflip_prob:
        run({"op": "hflip", "group": "shared_spatial", "params": {}})
    if rng.random() < ss.rot90_prob:
        run({"op": "rot90", "group": "shared_spatial",
             "params": {"k": int(rng.integers(1, 4))}})
    if rng.random() < ss.transpose_prob:
        run({"op": "transpose", "group": "shared_spatial", "params": {}})
    if ss.grid_shuffle_prob > 0 and rng.random() < ss.grid_shuffle_prob \
            and crop % ss.grid_size == 0:
        perm = [int(i) for i in rng.permutation(ss.grid_size ** 2)]
        run({"op": "grid_shuffle", "group": "shared_spatial",
             "params": {"grid": ss.grid_size, "perm": perm}})
    if ss.mask_dropout_prob > 0 and rng.random() < ss.mask_dropout_prob:
        n_comp, _ = cv2.connectedComponents((mask > 0).astype(np.uint8), connectivity=8)
        dropped = [lab for lab in range(1, n_comp)
                   if rng.random() < ss.instance_drop_prob]
        run({"op": "mask_dropout", "group": "shared_spatial",
             "params": {"dropped": dropped}})

    if policy.color.enabled:
        cp = policy.color
        for group in ("color_pre", "color_post"):
            space = "hsv" if rng.random() < 0.5 else "rgb"
            mag = cp.max_hsv_shift if space == "hsv" else cp.max_rgb_shift
            run({"op": "color", "group": group, "params": {
                "brightness": float(rng.uniform(-cp.max_brightness, cp.max_brightness)),
                "contrast": float(rng.uniform(-cp.max_contrast, cp.max_contrast)),
                "gamma": float(rng.uniform(-cp.max_gamma, cp.max_gamma)),
                "space": space,
                "shift": [float(s) for s in rng.uniform(-mag, mag, size=3)],
            }})

    return AugmentedSample(pre=pre, post=post, mask=mask, applied_ops=log)


def replay_ops(pair: RasterPair, ops: list) -> AugmentedSample:
    """Re-apply a logged op sequence verbatim to a pair."""
    pre, post, mask = pair.pre, pair.post, pair.mask
    for op in ops:
        pre, post, mask = _execute_op(pre, post, mask, op)
    return AugmentedSample(pre=pre, post=post, mask=mask, applied_ops=copy.deepcopy(ops))

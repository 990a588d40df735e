"""Class-weighted cross-entropy for the 5-class damage masks.

Default weights put 1.0 on the two common classes (background, no-damage)
and 3.0 on minor/major/destroyed. The reduction normalizes by the summed
per-pixel weights, so uniform weights reduce to plain mean cross-entropy
and rescaling all weights leaves the loss unchanged.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import NUM_CLASSES

DEFAULT_CLASS_WEIGHTS = (1.0, 1.0, 3.0, 3.0, 3.0)


def weighted_cross_entropy(logits: torch.Tensor, target: torch.Tensor,
                           weights=DEFAULT_CLASS_WEIGHTS) -> torch.Tensor:
    """Weighted CE over pixels: sum(w[target] * ce) / sum(w[target]).

    logits: (5, H, W) or (B, 5, H, W); target: matching (H, W) or (B, H, W)
    integer mask with values 0..4.
    """
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if w.numel() != NUM_CLASSES or (w < 0).any():
        raise ValueError("need 5 non-negative class weights")
    if not (w > 0).any():
        raise ValueError("class weights must not all be zero")
    if logits.dim() == 3:
        logits = logits.unsqueeze(0)
        target = target.unsqueeze(0)
    if logits.shape[1] != NUM_CLASSES or logits.shape[0] != target.shape[0] \
            or logits.shape[2:] != target.shape[1:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs "
                         f"target {tuple(target.shape)}")
    target = target.long()
    if target.numel() and (target.min() < 0 or target.max() >= NUM_CLASSES):
        raise ValueError("target mask holds values outside 0..4")
    # weighted 'mean' reduction in F.cross_entropy is sum(w*ce)/sum(w)
    return F.cross_entropy(logits, target, weight=w, reduction="mean")


def weighted_cross_entropy_np(logits: np.ndarray, target: np.ndarray,
                              weights=DEFAULT_CLASS_WEIGHTS) -> float:
    """Convenience wrapper for numpy H x W x 5 logits (channel-last)."""
    t = torch.from_numpy(np.ascontiguousarray(logits, dtype=np.float64))
    t = t.permute(2, 0, 1)
    return float(weighted_cross_entropy(t, torch.from_numpy(np.ascontiguousarray(target)),
                                        weights))

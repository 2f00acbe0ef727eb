"""Class-evidence heatmaps from the last convolutional activations.

The map for class c is relu(sum_k alpha_k A_k) with alpha_k the spatial mean
of d(logit_c)/dA_k, bilinearly upsampled to the input size and normalized by
its max (an all-zero map stays all-zero).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DefectClass
from .errors import UnsupportedArchitectureError, ValidationError


@dataclass
class HeatMap:
    values: np.ndarray  # (H, W) in [0, 1]
    target_class: DefectClass
    image_id: str = ""

    def validate(self) -> None:
        v = self.values
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValidationError("heatmap values outside [0, 1]")
        if v.max() not in (0.0,) and not np.isclose(v.max(), 1.0):
            raise ValidationError("non-zero heatmap must peak at 1")


def grad_cam(model, image: np.ndarray, target_class: DefectClass, image_id: str = "") -> HeatMap:
    """Gradient-weighted class activation map for one [0,1] grayscale image."""
    if not hasattr(model, "forward_with_conv"):
        raise UnsupportedArchitectureError(
            "model exposes no convolutional activation block (needs forward_with_conv)"
        )
    arr = np.asarray(image, dtype=np.float32)
    x = torch.from_numpy(arr).reshape(1, 1, *arr.shape)
    model.eval()
    logits, conv = model.forward_with_conv(x)
    if conv.ndim != 4:
        raise UnsupportedArchitectureError(
            f"activation block must be 4-D (got shape {tuple(conv.shape)})"
        )
    target = logits[0, int(target_class)]
    (grad,) = torch.autograd.grad(target, conv)

    alpha = grad.mean(dim=(2, 3), keepdim=True)  # (1, K, 1, 1)
    raw = F.relu((alpha * conv).sum(dim=1, keepdim=True))
    up = F.interpolate(raw, size=arr.shape, mode="bilinear", align_corners=False)
    cam = up[0, 0].detach().numpy().astype(np.float64)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return HeatMap(values=cam, target_class=target_class, image_id=image_id)


def overlay(heatmap: HeatMap, image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a blue-to-red rendering of the map onto the grayscale image.

    Returns an (H, W, 3) uint8 RGB image. alpha=0 reproduces the input
    rendered as RGB.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.shape != heatmap.values.shape:
        raise ValidationError(
            f"image shape {arr.shape} != heatmap shape {heatmap.values.shape}"
        )
    v = heatmap.values
    colored = np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)
    gray = np.repeat(arr[:, :, None], 3, axis=2)
    blended = (1.0 - alpha) * gray + alpha * colored
    return np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)


def save_overlay_png(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")


def _masked(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = image.copy()
    out[mask] = float(image.mean())
    return out


def occlusion_drops(
    model,
    image: np.ndarray,
    target_class: DefectClass,
    rng: np.random.Generator,
    fraction: float = 0.10,
    heatmap: Optional[HeatMap] = None,
) -> tuple[float, float]:
    """(drop when masking top-CAM pixels, drop when masking a random square).

    Both masks cover the same pixel count and are filled with the image mean.
    """
    from .classifier import predict_proba

    h, w = image.shape
    k = max(int(round(fraction * h * w)), 1)
    if heatmap is None:
        heatmap = grad_cam(model, image, target_class)

    flat = heatmap.values.ravel()
    thresh_idx = np.argpartition(flat, -k)[-k:]
    cam_mask = np.zeros(h * w, dtype=bool)
    cam_mask[thresh_idx] = True
    cam_mask = cam_mask.reshape(h, w)

    side = max(int(round(np.sqrt(k))), 1)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    rand_mask = np.zeros((h, w), dtype=bool)
    rand_mask[top : top + side, left : left + side] = True

    p_base = predict_proba(model, image)[int(target_class)]
    p_cam = predict_proba(model, _masked(image, cam_mask))[int(target_class)]
    p_rand = predict_proba(model, _masked(image, rand_mask))[int(target_class)]
    return float(p_base - p_cam), float(p_base - p_rand)

"""Training objective: alpha * L_rec + (L_ssim + L_smooth + L_grad).

Images are torch tensors shaped (B, 1, H, W) or (H, W) with values in [0, 1].
Every term is mean-reduced so alpha keeps the same meaning across resolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Sequence

import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

def as_batch(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 2:
        return img[None, None]
    if img.dim() == 3:
        return img[:, None]
    if img.dim() == 4 and img.shape[1] == 1:
        return img
    raise ValueError(f"expected HxW, BxHxW or Bx1xHxW, got {tuple(img.shape)}")


def _check_same(*imgs: torch.Tensor) -> None:
    shapes = {tuple(t.shape) for t in imgs}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def sobel_gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable twin of :func:`sspfusion.structmap.sobel_gradients`."""
    p = F.pad(as_batch(img), (1, 1, 1, 1), mode="replicate")
    dx = p[..., :, 2:] - p[..., :, :-2]
    dy = p[..., 2:, :] - p[..., :-2, :]
    gx = dx[..., :-2, :] + 2 * dx[..., 1:-1, :] + dx[..., 2:, :]
    gy = dy[..., :, :-2] + 2 * dy[..., :, 1:-1] + dy[..., :, 2:]
    return gx, gy


def sobel_magnitude(img: torch.Tensor) -> torch.Tensor:
    gx, gy = sobel_gradients(img)
    sq = gx * gx + gy * gy
    # sqrt has an infinite slope at 0; flat regions get a zero subgradient instead of NaN
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> torch.Tensor:
    """Mean SSIM per batch element over the valid (unpadded) window positions."""
    a, b = as_batch(a), as_batch(b)
    _check_same(a, b)
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"image {tuple(a.shape[-2:])} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window(dtype=a.dtype).to(a.device)[None, None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = F.conv2d(a, w)
    mu_b = F.conv2d(b, w)
    var_a = F.conv2d(a * a, w) - mu_a * mu_a
    var_b = F.conv2d(b * b, w) - mu_b * mu_b
    cov = F.conv2d(a * b, w) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
    return smap.mean(dim=(1, 2, 3))


def charbonnier_rec(pred: Sequence[torch.Tensor], gt: Sequence[torch.Tensor], epsilon: float = 1.0) -> torch.Tensor:
    """Mean of sqrt((pred - gt)^2 + eps^2) over every element of every level given.

    Pass the levels of both modalities concatenated, e.g. ``soft_ir + soft_vi``.
    """
    if len(pred) != len(gt) or not pred:
        raise ValueError(f"need matching non-empty level lists, got {len(pred)} and {len(gt)}")
    total = 0.0
    count = 0
    for p, g in zip(pred, gt):
        g = torch.as_tensor(g, dtype=p.dtype, device=p.device)
        if tuple(p.shape) != tuple(g.shape):
            raise ValueError(f"level shape mismatch: {tuple(p.shape)} vs {tuple(g.shape)}")
        total = total + torch.sqrt((p - g) ** 2 + epsilon**2).sum()
        count += p.numel()
    return total / count


def ssim_loss(fused: torch.Tensor, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
    _check_same(fused, ir, vi)
    return (1 - 0.5 * (ssim(fused, ir) + ssim(fused, vi))).mean()


def smooth_loss(fused: torch.Tensor, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
    _check_same(fused, ir, vi)
    return (fused - torch.maximum(ir, vi)).abs().mean()


def grad_loss(fused: torch.Tensor, ir: torch.Tensor, vi: torch.Tensor) -> torch.Tensor:
    _check_same(fused, ir, vi)
    target = torch.maximum(sobel_magnitude(ir), sobel_magnitude(vi))
    return (sobel_magnitude(fused) - target).abs().mean()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    rec: torch.Tensor
    ssim: torch.Tensor
    smooth: torch.Tensor
    grad: torch.Tensor
    alpha: float = 0.01
    epsilon: float = 1.0

    @property
    def fus(self) -> torch.Tensor:
        return self.ssim + self.smooth + self.grad

    def as_floats(self) -> dict[str, float]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        return out


def total_loss(rec, ssim_term, smooth, grad, alpha: float = 0.01, epsilon: float = 1.0) -> LossBreakdown:
    if alpha < 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be finite and >= 0, got {alpha}")
    rec, ssim_term, smooth, grad = (
        t if isinstance(t, torch.Tensor) else torch.as_tensor(t, dtype=torch.float64) for t in (rec, ssim_term, smooth, grad)
    )
    total = alpha * rec + ssim_term + smooth + grad
    return LossBreakdown(total, rec, ssim_term, smooth, grad, alpha, epsilon)


def fusion_objective(
    fused: torch.Tensor,
    ir: torch.Tensor,
    vi: torch.Tensor,
    soft_ir: Sequence[torch.Tensor] | None = None,
    soft_vi: Sequence[torch.Tensor] | None = None,
    gt_ir: Sequence[torch.Tensor] | None = None,
    gt_vi: Sequence[torch.Tensor] | None = None,
    alpha: float = 0.01,
    epsilon: float = 1.0,
) -> LossBreakdown:
    """Full objective; without soft predictions the reconstruction term is reported as 0."""
    if soft_ir is not None and soft_vi is not None:
        rec = charbonnier_rec(list(soft_ir) + list(soft_vi), list(gt_ir) + list(gt_vi), epsilon)
    else:
        rec = torch.zeros((), dtype=fused.dtype, device=fused.device)
    return total_loss(
        rec,
        ssim_loss(fused, ir, vi),
        smooth_loss(fused, ir, vi),
        grad_loss(fused, ir, vi),
        alpha,
        epsilon,
    )

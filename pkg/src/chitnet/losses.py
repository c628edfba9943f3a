"""Training objectives.

Every function accepts tensors shaped ``(..., H, W)``; leading dimensions are
treated as independent images. The L1 norm is mean-normalised throughout so
loss weights do not depend on patch size.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .blocks import ShapeError

EPS = 1e-8
LAPLACIAN_KERNEL = ((0.0, 1.0, 0.0), (1.0, -4.0, 1.0), (0.0, 1.0, 0.0))


def _same_shape(*xs: torch.Tensor) -> None:
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"shape mismatch: {tuple(shape)} vs {tuple(x.shape)}")


def laplacian(img: torch.Tensor) -> torch.Tensor:
    """4-neighbour Laplacian with replicate padding; output has img's shape."""
    h, w = img.shape[-2:]
    flat = img.reshape(-1, 1, h, w)
    kernel = torch.tensor(LAPLACIAN_KERNEL, dtype=img.dtype, device=img.device).view(1, 1, 3, 3)
    out = F.conv2d(F.pad(flat, (1, 1, 1, 1), mode="replicate"), kernel)
    return out.reshape(img.shape)


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b)
    return (a - b).abs().mean()


@torch.no_grad()
def histogram_contrast(img: torch.Tensor) -> torch.Tensor:
    """Per-pixel histogram-contrast saliency on the 0..255 scale.

    ``S(x) = sum_j p_j * |255 * I(x) - j|`` with ``p`` the image's own normalised
    256-bin histogram. Evaluated exactly through prefix sums of the histogram.
    """
    h, w = img.shape[-2:]
    v = (img.reshape(-1, h * w).double() * 255.0).clamp(0.0, 255.0)
    bins = torch.round(v).long()
    hist = torch.zeros(v.shape[0], 256, dtype=torch.float64, device=img.device)
    hist.scatter_add_(1, bins, torch.ones_like(v))
    hist /= h * w
    levels = torch.arange(256, dtype=torch.float64, device=img.device)
    mass = hist.cumsum(1)
    moment = (hist * levels).cumsum(1)
    total_moment = moment[:, -1:]
    f = torch.floor(v).long().clamp(0, 255)
    mass_lo = mass.gather(1, f)
    moment_lo = moment.gather(1, f)
    s = v * mass_lo - moment_lo + (total_moment - moment_lo) - v * (1.0 - mass_lo)
    return s.clamp_min(0.0).reshape(img.shape).to(img.dtype)


@torch.no_grad()
def saliency_weights(i_ir: torch.Tensor, i_vis: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    _same_shape(i_ir, i_vis)
    s_ir = histogram_contrast(i_ir)
    s_vis = histogram_contrast(i_vis)
    w_ir = s_ir / (s_ir + s_vis + EPS)
    return w_ir, 1.0 - w_ir


def signed_max_gradient(i_ir: torch.Tensor, i_vis: torch.Tensor) -> torch.Tensor:
    """Pick, per pixel, the Laplacian with the larger magnitude, keeping its sign.
    Ties go to the infrared value."""
    _same_shape(i_ir, i_vis)
    g_ir, g_vis = laplacian(i_ir), laplacian(i_vis)
    return torch.where(g_ir.abs() >= g_vis.abs(), g_ir, g_vis)


def saliency_blend(i_ir: torch.Tensor, i_vis: torch.Tensor) -> torch.Tensor:
    # w_ir*ir + (1-w_ir)*vis, written so equal sources blend to themselves exactly
    w_ir, _ = saliency_weights(i_ir, i_vis)
    return i_vis + w_ir * (i_ir - i_vis)


def loss_jgrad(i_fused, i_ir, i_vis):
    _same_shape(i_fused, i_ir, i_vis)
    return l1_mean(signed_max_gradient(i_ir, i_vis), laplacian(i_fused))


def loss_int(i_fused, i_ir, i_vis):
    _same_shape(i_fused, i_ir, i_vis)
    return l1_mean(saliency_blend(i_ir, i_vis), i_fused)


def loss_mit(i_fused, i_ir, i_vis, lambda_jg: float) -> dict[str, torch.Tensor]:
    if lambda_jg < 0:
        raise ValueError("lambda_jg must be >= 0")
    li = loss_int(i_fused, i_ir, i_vis)
    lg = loss_jgrad(i_fused, i_ir, i_vis)
    return {"int": li, "jgrad": lg, "mit_total": li + lambda_jg * lg}


def loss_rec(rec1, rec2, i_ir, i_vis):
    return l1_mean(rec1, i_ir) + l1_mean(rec2, i_vis)


def loss_grad(edge1, edge2, i_ir, i_vis):
    _same_shape(edge1, i_ir)
    _same_shape(edge2, i_vis)
    return l1_mean(laplacian(edge1), laplacian(i_ir)) + l1_mean(laplacian(edge2), laplacian(i_vis))


def loss_en_terms(rec_en, i_ir, i_vis) -> tuple[torch.Tensor, torch.Tensor]:
    """(content, edge) parts of the enhancement loss."""
    _same_shape(rec_en, i_ir, i_vis)
    content = l1_mean(saliency_blend(i_ir, i_vis), rec_en)
    edge = l1_mean(signed_max_gradient(i_ir, i_vis), laplacian(rec_en))
    return content, edge


def loss_en(rec_en, i_ir, i_vis, lambda_edge: float):
    content, edge = loss_en_terms(rec_en, i_ir, i_vis)
    return content + lambda_edge * edge


def loss_siphia(rec=0.0, grad=0.0, en=0.0):
    return rec + grad + en


def siphia_bundle(out, i_ir, i_vis, lambda_edge: float, use_rec: bool = True,
                  use_grad: bool = True, use_en: bool = True) -> dict[str, torch.Tensor]:
    """Loss terms of one auxiliary-branch instance; disabled terms are zero."""
    zero = i_ir.new_zeros(())
    rec = loss_rec(out.rec1, out.rec2, i_ir, i_vis) if use_rec else zero
    grad = loss_grad(out.edge1, out.edge2, i_ir, i_vis) if use_grad else zero
    en = loss_en(out.rec_en, i_ir, i_vis, lambda_edge) if use_en else zero
    return {"rec": rec, "grad": grad, "en": en, "siphia_total": loss_siphia(rec, grad, en)}


def _as_distribution(img: torch.Tensor) -> torch.Tensor:
    h, w = img.shape[-2:]
    flat = img.reshape(-1, h * w) + EPS
    return flat / flat.sum(dim=1, keepdim=True)


def kl_images(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """KL(target || pred) with each image normalised to a distribution over
    its pixels; averaged over leading dimensions."""
    _same_shape(target, pred)
    p, q = _as_distribution(target), _as_distribution(pred)
    return (p * (p.log() - q.log())).sum(dim=1).mean()


def loss_inter(i_fused, rec_en_ir, rec_en_vis):
    """Pull both enhanced reconstructions toward the (detached) fused image."""
    label = i_fused.detach()
    return kl_images(label, rec_en_ir) + kl_images(label, rec_en_vis)

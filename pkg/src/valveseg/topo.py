"""Differentiable surface and volume consistency between cardiac phases.

All quantities are computed on a logistic surrogate of the 0.5-thresholded
mask so that gradients reach the probability map. ``hard_*`` helpers give the
evaluation-only values on the true binarization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class TCRConfig:
    lam: float = 0.01
    eps: float = 1e-6
    tau: float = 0.05
    # support-weight threshold and temperature, in units of 1/spacing
    g0: float = 0.05
    tau_g: float = 0.005
    mode: str = "normalized"  # or "mass": raw gradient mass without the support division
    detach_reference: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.eps <= 0 or self.tau <= 0 or self.tau_g <= 0:
            raise ValueError("eps, tau and tau_g must be positive")
        if self.mode not in ("normalized", "mass"):
            raise ValueError(f"unknown surface mode {self.mode!r}")


def sobel_kernels(dtype=torch.float64) -> torch.Tensor:
    """(3, 1, 3, 3, 3) stencils; kernel ``a`` differentiates along array axis ``a``."""
    d = torch.tensor([-1.0, 0.0, 1.0], dtype=dtype)
    s = torch.tensor([1.0, 2.0, 1.0], dtype=dtype)
    k0 = d[:, None, None] * s[None, :, None] * s[None, None, :]
    k1 = s[:, None, None] * d[None, :, None] * s[None, None, :]
    k2 = s[:, None, None] * s[None, :, None] * d[None, None, :]
    return torch.stack([k0, k1, k2])[:, None]


def soft_binarize(P: torch.Tensor, tau: float) -> torch.Tensor:
    return torch.sigmoid((P - 0.5) / tau)


def _safe_norm(g: torch.Tensor, dim: int) -> torch.Tensor:
    # exact zero at zero with a zero (not NaN) subgradient
    sq = (g * g).sum(dim)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def sobel_gradient_magnitude(B: torch.Tensor, spacing: float) -> torch.Tensor:
    """Per-voxel Sobel gradient norm, scaled so a unit step reads 1/spacing.

    Borders are edge-replicated so a constant field has no gradient anywhere.
    """
    x = F.pad(B.reshape(1, 1, *B.shape[-3:]), (1,) * 6, mode="replicate")
    g = F.conv3d(x, sobel_kernels(B.dtype).to(B.device))[0]
    return _safe_norm(g, 0) / (16.0 * spacing)


def _grad_field(P, spacing, cfg):
    return sobel_gradient_magnitude(soft_binarize(P, cfg.tau), spacing)


def surface_measure(P: torch.Tensor, spacing: float, cfg: TCRConfig = TCRConfig()) -> torch.Tensor:
    """Normalized surface: gradient mass over soft count of gradient-support voxels.

    In ``mass`` mode the raw gradient mass (mm^2-weighted) is returned instead.
    """
    G = _grad_field(P, spacing, cfg)
    dA = spacing ** 2
    mass = (G * dA).sum()
    if cfg.mode == "mass":
        return mass
    w = torch.sigmoid((G - cfg.g0 / spacing) / (cfg.tau_g / spacing))
    return mass / ((w * dA).sum() + cfg.eps)


# Face-count area / (gradient mass * spacing / 2) on a hard 8^3 cube. The
# norm of the smoothed Sobel response under-reads at sharp edges.
AREA_CALIBRATION = 1.0 / 0.8825378616390721


def surface_area_estimate(P: torch.Tensor, spacing: float, cfg: TCRConfig = TCRConfig()) -> torch.Tensor:
    """Physical area (mm^2) from gradient mass; a sharp step responds on two voxel layers."""
    G = _grad_field(P, spacing, cfg)
    return (G * spacing ** 2).sum() * spacing / 2.0 * AREA_CALIBRATION


def volume_measure(P: torch.Tensor, cfg: TCRConfig = TCRConfig()) -> torch.Tensor:
    """Soft voxel count of the 0.5-thresholded mask."""
    return soft_binarize(P, cfg.tau).sum()


def dual_term(q_t, q_1, lam: float, eps: float = 1e-6):
    """Relative plus absolute mismatch of a phase quantity against the labeled phase.

    The relative term is |q_t - q_1| / (q_1 + eps), so it vanishes exactly at equality.
    """
    diff = torch.abs(q_t - q_1)
    return diff / (q_1 + eps) + lam * diff


def tcr_loss(P_labeled, P_u1, P_u2, spacing: float, cfg: TCRConfig = TCRConfig()):
    """Return (l_surf, l_vol, l_tcp) comparing both unlabeled maps to the labeled one."""
    if not (P_labeled.shape == P_u1.shape == P_u2.shape):
        raise ValueError(f"shape mismatch: {P_labeled.shape}, {P_u1.shape}, {P_u2.shape}")
    ref = P_labeled.detach() if cfg.detach_reference else P_labeled
    lam_vol = cfg.lam
    lam_surf = cfg.lam / spacing ** 2
    s1 = surface_measure(ref, spacing, cfg)
    v1 = volume_measure(ref, cfg)
    l_surf = sum(dual_term(surface_measure(P, spacing, cfg), s1, lam_surf, cfg.eps) for P in (P_u1, P_u2))
    l_vol = sum(dual_term(volume_measure(P, cfg), v1, lam_vol, cfg.eps) for P in (P_u1, P_u2))
    return l_surf, l_vol, l_surf + l_vol


# evaluation-only, on the hard indicator


def hard_volume(P) -> int:
    return int((np.asarray(P) > 0.5).sum())


def hard_surface(P, spacing: float, eps: float = 1e-6) -> float:
    B = torch.as_tensor((np.asarray(P) > 0.5).astype(np.float64))
    G = sobel_gradient_magnitude(B, spacing)
    dA = spacing ** 2
    return float((G * dA).sum() / ((G > 0).double() * dA).sum().add(eps))

"""Dual-level feature fusion: part pooling, local attention, global+local fusion, L_D."""

from dataclasses import dataclass

import torch
from torch import nn

from backbone import BNMode, Modality, batchnorm, classify
from diff_core import DTYPE, check_shape, softmax
from errors import ConfigError, ShapeError
from losses import fused_id_loss


@dataclass(frozen=True)
class DFFConfig:
    """``shared_attention`` uses one ω for both streams (an extension; off by default)."""

    parts: int = 4
    shared_attention: bool = False

    def validate(self, feature_height: int) -> None:
        if self.parts <= 0 or feature_height % self.parts:
            raise ConfigError(
                f"P={self.parts} parts do not divide feature height H={feature_height}"
            )


class AttentionWeights(nn.Module):
    """Learnable part logits ω, one vector per modality unless shared."""

    def __init__(self, parts: int, shared: bool = False):
        super().__init__()
        self.parts = parts
        self.shared = shared
        keys = ["shared"] if shared else [m.value for m in Modality]
        self.omega = nn.ParameterDict({
            key: nn.Parameter(torch.zeros(parts, dtype=DTYPE)) for key in keys
        })

    def forward(self, modality: Modality) -> torch.Tensor:
        key = "shared" if self.shared else Modality(modality).value
        return self.omega[key]


def pap(f: torch.Tensor, parts: int) -> torch.Tensor:
    """Patch-wise average pooling; (..., C, H, W) -> (..., P, C).

    Part p averages rows [p*H/P, (p+1)*H/P) over all columns.
    """
    height = f.shape[-2]
    if parts <= 0 or height % parts:
        raise ConfigError(f"P={parts} parts do not divide feature height H={height}")
    bands = f.unflatten(-2, (parts, height // parts))
    return bands.mean(dim=(-2, -1)).transpose(-1, -2)


def attention(omega: torch.Tensor) -> torch.Tensor:
    """softmax(ω): the normalized part weights."""
    return softmax(omega, dim=-1)


def local_attention_fuse(parts: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """f* = sum_p softmax(ω)_p * part_p; (..., P, C) -> (..., C)."""
    if parts.shape[-2] != omega.shape[-1]:
        raise ShapeError("part count vs attention length", (omega.shape[-1],), parts.shape[-2:-1])
    return torch.einsum("...pc,p->...c", parts, attention(omega))


def dual_fuse(
    global_embedding: torch.Tensor,
    f_star: torch.Tensor,
    bn: nn.BatchNorm1d,
    mode: BNMode,
) -> torch.Tensor:
    """f~ = BN(f^g) + f*."""
    check_shape("dual fusion operands", global_embedding.shape, f_star.shape)
    return batchnorm(global_embedding, bn, mode) + f_star


def dff_loss(
    fused_rgb: torch.Tensor,
    fused_ir: torch.Tensor,
    labels_rgb: torch.Tensor,
    labels_ir: torch.Tensor,
    classifier: nn.Linear,
) -> torch.Tensor:
    """L_D: per-modality mean cross-entropy of the fused embeddings, summed."""
    return fused_id_loss(
        classify(fused_rgb, classifier), classify(fused_ir, classifier), labels_rgb, labels_ir
    )

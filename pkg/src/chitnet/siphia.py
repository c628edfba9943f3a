"""Per-modality auxiliary branch: channel shuffle/split with supervised group
reconstruction, group cross-attention, edge encoders and the enhanced-feature
decoder."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import (AttentionProjector, ConvTanhDecoder, EdgeEncoder, ShapeError, attend,
                     conv, enhance_residual)


class SiphiaOutputs(NamedTuple):
    f_ed: torch.Tensor
    f_en: torch.Tensor
    rec1: torch.Tensor
    rec2: torch.Tensor
    edge1: torch.Tensor
    edge2: torch.Tensor
    rec_en: torch.Tensor


def check_permutation(perm: Sequence[int], channels: int | None = None) -> list[int]:
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(len(perm))):
        raise ShapeError(f"not a permutation of 0..{len(perm) - 1}: {perm}")
    if len(perm) % 2:
        raise ShapeError(f"channel count must be even, got {len(perm)}")
    if channels is not None and len(perm) != channels:
        raise ShapeError(f"permutation of length {len(perm)} for {channels} channels")
    return perm


def shuffle_split(f: torch.Tensor, perm: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
    c = f.shape[1]
    if c % 2:
        raise ShapeError(f"channel count must be even, got {c}")
    perm = check_permutation(perm, c)
    shuffled = f[:, perm]
    return shuffled[:, : c // 2], shuffled[:, c // 2:]


def sip_enhance(grp1: torch.Tensor, grp2: torch.Tensor,
                proj1: AttentionProjector, proj2: AttentionProjector,
                enh21: nn.Conv2d, enh12: nn.Conv2d) -> tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(en21, en12)``: group 2's query against group 1's key/value
    (skip = grp1) and the mirror image (skip = grp2)."""
    if grp1.shape != grp2.shape:
        raise ShapeError(f"groups differ in shape: {tuple(grp1.shape)} vs {tuple(grp2.shape)}")
    att21 = attend(proj2.query(grp2), proj1.key(grp1), proj1.value(grp1))
    att12 = attend(proj1.query(grp1), proj2.key(grp2), proj2.value(grp2))
    return enhance_residual(att21, grp1, enh21), enhance_residual(att12, grp2, enh12)


class Siphia(nn.Module):
    """One instance per modality; instances never share weights."""

    def __init__(self, channels: int, perm: Sequence[int]):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"channel count must be even, got {channels}")
        self.channels = channels
        half = channels // 2
        self.register_buffer("perm", torch.tensor(check_permutation(perm, channels)), persistent=False)
        self.dec_rec1 = ConvTanhDecoder(half)
        self.dec_rec2 = ConvTanhDecoder(half)
        self.proj1 = AttentionProjector(half)
        self.proj2 = AttentionProjector(half)
        self.enh21 = conv(half, half, 1)
        self.enh12 = conv(half, half, 1)
        self.enc_ed1 = EdgeEncoder(half)
        self.enc_ed2 = EdgeEncoder(half)
        self.dec_ed1 = ConvTanhDecoder(half)
        self.dec_ed2 = ConvTanhDecoder(half)
        self.dec_en = ConvTanhDecoder(channels)

    @property
    def permutation(self) -> list[int]:
        return self.perm.tolist()

    def hiassi_reconstruct(self, grp1, grp2):
        return self.dec_rec1(grp1), self.dec_rec2(grp2)

    def sip_enhance(self, grp1, grp2):
        return sip_enhance(grp1, grp2, self.proj1, self.proj2, self.enh21, self.enh12)

    def sip_edge(self, en21, en12):
        ed21 = self.enc_ed1(en21)
        ed12 = self.enc_ed2(en12)
        return ed21, ed12, self.dec_ed1(ed21), self.dec_ed2(ed12)

    def forward(self, f_transferred: torch.Tensor) -> SiphiaOutputs:
        grp1, grp2 = shuffle_split(f_transferred, self.permutation)
        rec1, rec2 = self.hiassi_reconstruct(grp1, grp2)
        en21, en12 = self.sip_enhance(grp1, grp2)
        ed21, ed12, edge1, edge2 = self.sip_edge(en21, en12)
        f_ed = torch.cat([ed12, ed21], dim=1)
        f_en = torch.cat([en12, en21], dim=1)
        return SiphiaOutputs(f_ed, f_en, rec1, rec2, edge1, edge2, self.dec_en(f_en))


def sample_permutation(channels: int, rng: np.random.Generator) -> list[int]:
    return rng.permutation(channels).tolist()

"""Mutual information transfer: dual encoders, cross-modal channel attention
and the final fusion decoder."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn

from .blocks import (RDB, AttentionProjector, ConvTanhDecoder, ShallowExtract, ShapeError,
                     attend, conv, enhance_residual)

MODALITIES = ("ir", "vis")


class MitOutputs(NamedTuple):
    f_ir: torch.Tensor
    f_vis: torch.Tensor
    f_vis2ir: torch.Tensor
    f_ir2vis: torch.Tensor


class Encoder(nn.Module):
    def __init__(self, channels: int, rdb_layers: int = 4, growth: int | None = None):
        super().__init__()
        self.shallow = ShallowExtract(channels)
        self.rdb = RDB(channels, rdb_layers, growth)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.rdb(self.shallow(x))


def mutual_transfer(f_ir: torch.Tensor, f_vis: torch.Tensor,
                    proj_ir: AttentionProjector, proj_vis: AttentionProjector,
                    enh_vis2ir: nn.Conv2d, enh_ir2vis: nn.Conv2d) -> MitOutputs:
    """Represent each modality through the other's values.

    The affinity of one modality (its own Q and K) re-weights the channels of
    the other modality's V; the result is enhanced by a 1x1 conv and added
    back onto the original modality's features.
    """
    if f_ir.shape != f_vis.shape:
        raise ShapeError(f"f_ir {tuple(f_ir.shape)} and f_vis {tuple(f_vis.shape)} differ")
    vis2ir = attend(proj_ir.query(f_ir), proj_ir.key(f_ir), proj_vis.value(f_vis))
    ir2vis = attend(proj_vis.query(f_vis), proj_vis.key(f_vis), proj_ir.value(f_ir))
    return MitOutputs(f_ir, f_vis,
                      enhance_residual(vis2ir, f_ir, enh_vis2ir),
                      enhance_residual(ir2vis, f_vis, enh_ir2vis))


def fuse(m: MitOutputs, f_ir_ed: torch.Tensor | None, f_ir_en: torch.Tensor | None,
         f_vis_ed: torch.Tensor | None, f_vis_en: torch.Tensor | None,
         decoder: ConvTanhDecoder) -> torch.Tensor:
    """Concatenate ``[vis2ir, ir_ed, ir_en, ir2vis, vis_ed, vis_en]`` and decode.

    With all four auxiliary maps set to ``None`` only the two transferred maps
    are concatenated (the branch-ablated 2C layout).
    """
    aux = (f_ir_ed, f_ir_en, f_vis_ed, f_vis_en)
    if all(a is None for a in aux):
        parts = [m.f_vis2ir, m.f_ir2vis]
    elif any(a is None for a in aux):
        raise ShapeError("either all or none of the auxiliary feature maps must be given")
    else:
        parts = [m.f_vis2ir, f_ir_ed, f_ir_en, m.f_ir2vis, f_vis_ed, f_vis_en]
    size = m.f_vis2ir.shape[-2:]
    for p in parts:
        if p.shape[-2:] != size or p.shape[0] != m.f_vis2ir.shape[0]:
            raise ShapeError(f"feature map {tuple(p.shape)} does not match {tuple(m.f_vis2ir.shape)}")
    x = torch.cat(parts, dim=1)
    if x.shape[1] != decoder.in_channels:
        raise ShapeError(f"fusion decoder expects {decoder.in_channels} channels, got {x.shape[1]}")
    return decoder(x)


class MutualTransferBranch(nn.Module):
    """Everything updated during phase M: encoders, projectors, enhancement
    convs and the fusion decoder."""

    def __init__(self, channels: int, rdb_layers: int = 4, growth: int | None = None,
                 use_mit: bool = True, use_siphia: bool = True):
        super().__init__()
        self.channels = channels
        self.use_mit = use_mit
        self.enc_ir = Encoder(channels, rdb_layers, growth)
        self.enc_vis = Encoder(channels, rdb_layers, growth)
        self.proj_ir = AttentionProjector(channels)
        self.proj_vis = AttentionProjector(channels)
        self.enh_vis2ir = conv(channels, channels, 1)
        self.enh_ir2vis = conv(channels, channels, 1)
        self.dec_fuse = ConvTanhDecoder((6 if use_siphia else 2) * channels)

    def encode(self, x: torch.Tensor, which: str) -> torch.Tensor:
        if which == "ir":
            return self.enc_ir(x)
        if which == "vis":
            return self.enc_vis(x)
        raise ValueError(f"unknown modality {which!r}; expected one of {MODALITIES}")

    def transfer(self, f_ir: torch.Tensor, f_vis: torch.Tensor) -> MitOutputs:
        if not self.use_mit:
            return MitOutputs(f_ir, f_vis, f_ir, f_vis)
        return mutual_transfer(f_ir, f_vis, self.proj_ir, self.proj_vis,
                               self.enh_vis2ir, self.enh_ir2vis)

    def forward(self, ir_dual: torch.Tensor, vis_dual: torch.Tensor) -> MitOutputs:
        return self.transfer(self.encode(ir_dual, "ir"), self.encode(vis_dual, "vis"))

    def fuse(self, m: MitOutputs, f_ir_ed=None, f_ir_en=None, f_vis_ed=None, f_vis_en=None):
        return fuse(m, f_ir_ed, f_ir_en, f_vis_ed, f_vis_en, self.dec_fuse)

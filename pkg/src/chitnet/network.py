"""The full two-branch fusion network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn

from .blocks import init_weights
from .imaging import make_dual_input
from .mit import MitOutputs, MutualTransferBranch
from .siphia import Siphia, SiphiaOutputs, sample_permutation


@dataclass(frozen=True)
class NetSpec:
    channels: int = 32
    rdb_layers: int = 4
    growth: int | None = None
    use_mit: bool = True
    use_siphia: bool = True


class NetOutputs(NamedTuple):
    fused: torch.Tensor
    mit: MitOutputs
    siphia_ir: SiphiaOutputs | None
    siphia_vis: SiphiaOutputs | None


class CHITNet(nn.Module):
    def __init__(self, spec: NetSpec = NetSpec(), seed: int = 0,
                 perms: Sequence[Sequence[int]] | None = None):
        super().__init__()
        self.spec = spec
        c = spec.channels
        self.mit = MutualTransferBranch(c, spec.rdb_layers, spec.growth, spec.use_mit, spec.use_siphia)
        if spec.use_siphia:
            if perms is None:
                rng = np.random.default_rng(seed)
                perms = (sample_permutation(c, rng), sample_permutation(c, rng))
            self.siphia_ir = Siphia(c, perms[0])
            self.siphia_vis = Siphia(c, perms[1])
        else:
            self.siphia_ir = None
            self.siphia_vis = None
        gen = torch.Generator().manual_seed(seed)
        init_weights(self, gen)

    @property
    def permutations(self) -> list[list[int]]:
        if self.siphia_ir is None:
            return []
        return [self.siphia_ir.permutation, self.siphia_vis.permutation]

    def siphia_modules(self) -> list[nn.Module]:
        return [m for m in (self.siphia_ir, self.siphia_vis) if m is not None]

    def forward(self, ir_dual: torch.Tensor, vis_dual: torch.Tensor) -> NetOutputs:
        m = self.mit(ir_dual, vis_dual)
        if self.siphia_ir is None:
            return NetOutputs(self.mit.fuse(m), m, None, None)
        s_ir = self.siphia_ir(m.f_vis2ir)
        s_vis = self.siphia_vis(m.f_ir2vis)
        fused = self.mit.fuse(m, s_ir.f_ed, s_ir.f_en, s_vis.f_ed, s_vis.f_en)
        return NetOutputs(fused, m, s_ir, s_vis)


def to_dual_batch(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack gray images into a ``(B, 2, H, W)`` tensor of (image, 1 - image)."""
    return torch.from_numpy(np.stack([make_dual_input(np.asarray(im, dtype=np.float64)) for im in images])).to(dtype)


@torch.no_grad()
def fuse_pair(model: CHITNet, ir: np.ndarray, vis: np.ndarray) -> tuple[np.ndarray, NetOutputs]:
    """Run inference on one full-size pair; returns the fused image as float64."""
    if ir.shape != vis.shape:
        raise ValueError(f"ir {ir.shape} and vis {vis.shape} differ in size")
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = model(to_dual_batch([ir], dtype), to_dual_batch([vis], dtype))
    model.train(was_training)
    return out.fused[0, 0].double().numpy(), out

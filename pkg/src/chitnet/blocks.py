"""Learnable building blocks shared by the transfer and auxiliary branches.

All tensors are batched ``(B, C, H, W)``. Convolutions use replicate padding so
spatial size is preserved everywhere.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

LRELU_SLOPE = 0.2


class ShapeError(ValueError):
    pass


def conv(in_ch: int, out_ch: int, kernel_size: int = 3, bias: bool = True) -> nn.Conv2d:
    if kernel_size == 1:
        return nn.Conv2d(in_ch, out_ch, 1, bias=bias)
    return nn.Conv2d(in_ch, out_ch, kernel_size, padding=kernel_size // 2,
                     padding_mode="replicate", bias=bias)


def init_weights(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Kaiming-uniform (fan-in) kernels and zero biases for every conv.

    Uses the leaky-ReLU gain with slope sqrt(5), i.e. a bound of 1/sqrt(fan_in);
    the ReLU gain saturates the Tanh decoders at initialisation.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5), mode="fan_in", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def _check_channels(x: torch.Tensor, expected: int, what: str) -> None:
    if x.dim() != 4:
        raise ShapeError(f"{what}: expected a (B, C, H, W) tensor, got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ShapeError(f"{what}: expected {expected} channels, got {x.shape[1]}")


class ShallowExtract(nn.Module):
    """3x3 conv + LeakyReLU on the stacked (image, inverted image) input."""

    def __init__(self, channels: int, in_channels: int = 2):
        super().__init__()
        self.in_channels = in_channels
        self.conv = conv(in_channels, channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "shallow_extract")
        return F.leaky_relu(self.conv(x), LRELU_SLOPE)


class RDB(nn.Module):
    """Residual dense block: densely connected conv+ReLU layers, 1x1 local
    feature fusion back to ``channels`` and a residual skip of the input."""

    def __init__(self, channels: int, layers: int = 4, growth: int | None = None):
        super().__init__()
        growth = growth or channels
        self.channels = channels
        self.layers = nn.ModuleList(conv(channels + i * growth, growth, 3) for i in range(layers))
        self.lff = conv(channels + layers * growth, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "rdb")
        feats = x
        for layer in self.layers:
            feats = torch.cat([feats, F.relu(layer(feats))], dim=1)
        return self.lff(feats) + x


class AttentionProjector(nn.Module):
    """1x1 query/key/value projections, C -> C, without bias."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.wq = conv(channels, channels, 1, bias=False)
        self.wk = conv(channels, channels, 1, bias=False)
        self.wv = conv(channels, channels, 1, bias=False)

    def query(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "query")
        return self.wq(x)

    def key(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "key")
        return self.wk(x)

    def value(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "value")
        return self.wv(x)


def channel_affinity(q: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Row-softmax of Q K^T / sqrt(H*W); returns (B, C, C)."""
    if q.shape != k.shape:
        raise ShapeError(f"query {tuple(q.shape)} and key {tuple(k.shape)} differ")
    b, c, h, w = q.shape
    scores = q.reshape(b, c, h * w) @ k.reshape(b, c, h * w).transpose(1, 2)
    return torch.softmax(scores / math.sqrt(h * w), dim=-1)


def attend(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Mix the channels of ``v`` by the channel affinity of already-projected q, k."""
    if v.shape != q.shape:
        raise ShapeError(f"value {tuple(v.shape)} and query {tuple(q.shape)} differ")
    b, c, h, w = v.shape
    return (channel_affinity(q, k) @ v.reshape(b, c, h * w)).reshape(b, c, h, w)


def channel_attention(q_src: torch.Tensor, k_src: torch.Tensor, v_src: torch.Tensor,
                      proj: AttentionProjector) -> torch.Tensor:
    if not (q_src.shape == k_src.shape == v_src.shape):
        raise ShapeError("q_src, k_src and v_src must share (B, C, H, W)")
    return attend(proj.query(q_src), proj.key(k_src), proj.value(v_src))


def enhance_residual(attended: torch.Tensor, skip: torch.Tensor, conv1x1: nn.Conv2d) -> torch.Tensor:
    if attended.shape != skip.shape:
        raise ShapeError(f"attended {tuple(attended.shape)} and skip {tuple(skip.shape)} differ")
    return conv1x1(attended) + skip


class ConvTanhDecoder(nn.Module):
    """3x3 conv to one channel, Tanh, remapped to [0, 1]."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.conv = conv(in_channels, 1, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.in_channels, "conv_tanh_decode")
        return (torch.tanh(self.conv(x)) + 1.0) / 2.0


class EdgeEncoder(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv = conv(channels, channels, 3)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "edge_encoder")
        return torch.tanh(self.conv(x))


def set_frozen(module: nn.Module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)

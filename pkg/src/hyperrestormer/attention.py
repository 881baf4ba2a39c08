"""Spectral-wise and window-based self-attention.

Both mechanisms are exposed twice: as pure functions of (input, parameters),
which is what the oracles and gradient checks exercise, and as thin
``nn.Module`` wrappers that own the learnable arrays.

Feature maps are ``B x C x H x W`` tensors; the functional entry points also
accept a single ``C x H x W`` map and return the same rank they were given.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, NumericError

__all__ = [
    "WindowLayout",
    "spectral_self_attention",
    "spectral_attention_matrix",
    "window_attention_matrices",
    "window_partition",
    "window_merge",
    "relative_position_index",
    "relative_position_bias",
    "window_self_attention",
    "attention_mac_count",
    "effective_window",
    "SpectralSelfAttention",
    "WindowSelfAttention",
]


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ConfigurationError(f"expected a C x H x W or B x C x H x W feature map, got shape {tuple(x.shape)}")


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} produced non-finite values")


# --------------------------------------------------------------------------
# Spectral-wise self-attention


def spectral_self_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    sigma: torch.Tensor | float,
    heads: int = 1,
) -> torch.Tensor:
    """Attention whose tokens are channels.

    With ``X`` the ``HW x C`` flattening of ``x`` and ``Q, K, V = XW^Q, XW^K,
    XW^V``, returns ``V @ softmax(sigma * K^T Q)`` where the softmax runs down
    each column of the ``C x C`` logit matrix. Output channel ``j`` is thus a
    convex combination of the value channels.

    With ``heads > 1`` the channels are split into equal groups and each group
    attends within itself using its own entry of ``sigma``.
    """
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    for name, mat in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
        if mat.shape != (c, c):
            raise ConfigurationError(f"{name} must be {c}x{c} for {c} input channels, got {tuple(mat.shape)}")
    if heads < 1 or c % heads:
        raise ConfigurationError(f"channel count {c} is not divisible by heads={heads}")

    tokens = xb.reshape(b, c, h * w).transpose(1, 2)  # B x HW x C
    q = tokens @ w_q
    k = tokens @ w_k
    v = tokens @ w_v
    ch = c // heads
    # B x heads x HW x ch
    q = q.reshape(b, h * w, heads, ch).transpose(1, 2)
    k = k.reshape(b, h * w, heads, ch).transpose(1, 2)
    v = v.reshape(b, h * w, heads, ch).transpose(1, 2)

    attn = _spectral_weights(q, k, sigma, heads)
    out = v @ attn  # B x heads x HW x ch
    out = out.transpose(1, 2).reshape(b, h * w, c).transpose(1, 2).reshape(b, c, h, w)
    _check_finite(out, "spectral self-attention")
    return out[0] if squeeze else out


def _spectral_weights(q: torch.Tensor, k: torch.Tensor, sigma, heads: int) -> torch.Tensor:
    sigma = torch.as_tensor(sigma, dtype=q.dtype, device=q.device).reshape(-1)
    if sigma.numel() not in (1, heads):
        raise ConfigurationError(f"sigma must have 1 or {heads} entries, got {sigma.numel()}")
    logits = sigma.reshape(1, -1, 1, 1) * (k.transpose(-2, -1) @ q)  # B x heads x ch x ch
    return torch.softmax(logits, dim=-2)


def spectral_attention_matrix(
    x: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, sigma: torch.Tensor | float, heads: int = 1
) -> torch.Tensor:
    """The ``heads x ch x ch`` column-stochastic mixing matrices (batched: leading ``B``)."""
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    ch = c // heads
    tokens = xb.reshape(b, c, h * w).transpose(1, 2)
    q = (tokens @ w_q).reshape(b, h * w, heads, ch).transpose(1, 2)
    k = (tokens @ w_k).reshape(b, h * w, heads, ch).transpose(1, 2)
    attn = _spectral_weights(q, k, sigma, heads)
    return attn[0] if squeeze else attn


# --------------------------------------------------------------------------
# Window partitioning


@dataclass(frozen=True)
class WindowLayout:
    """Bookkeeping needed to invert :func:`window_partition`."""

    window_size: int
    height: int
    width: int
    pad_h: int
    pad_w: int

    @property
    def rows(self) -> int:
        return (self.height + self.pad_h) // self.window_size

    @property
    def cols(self) -> int:
        return (self.width + self.pad_w) // self.window_size

    @property
    def n_windows(self) -> int:
        return self.rows * self.cols


def window_partition(x: torch.Tensor, window_size: int) -> tuple[torch.Tensor, WindowLayout]:
    """Split a feature map into non-overlapping ``M x M`` windows.

    Sizes that are not multiples of ``M`` are reflect-padded at the bottom and
    right first. Returns windows shaped ``N x M^2 x C`` (``B x N x M^2 x C``
    for batched input) in raster order, and the layout that undoes it.
    """
    if window_size < 1:
        raise ConfigurationError(f"window size must be positive, got {window_size}")
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    m = window_size
    pad_h = (-h) % m
    pad_w = (-w) % m
    if pad_h or pad_w:
        if pad_h >= h or pad_w >= w:
            raise ConfigurationError(
                f"cannot reflect-pad a {h}x{w} map to a multiple of window size {m}; use a window no larger than the map"
            )
        xb = F.pad(xb, (0, pad_w, 0, pad_h), mode="reflect")
    layout = WindowLayout(m, h, w, pad_h, pad_w)
    rows, cols = layout.rows, layout.cols
    win = xb.reshape(b, c, rows, m, cols, m).permute(0, 2, 4, 3, 5, 1)
    win = win.reshape(b, rows * cols, m * m, c)
    return (win[0] if squeeze else win), layout


def window_merge(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    """Left inverse of :func:`window_partition` (padding is cropped)."""
    squeeze = windows.dim() == 3
    wb = windows.unsqueeze(0) if squeeze else windows
    if wb.dim() != 4:
        raise ConfigurationError(f"windows must be N x M^2 x C or B x N x M^2 x C, got {tuple(windows.shape)}")
    b, n, mm, c = wb.shape
    m = layout.window_size
    if n != layout.n_windows or mm != m * m:
        raise ConfigurationError(
            f"layout expects {layout.n_windows} windows of {m * m} pixels, got {n} windows of {mm}"
        )
    x = wb.reshape(b, layout.rows, layout.cols, m, m, c).permute(0, 5, 1, 3, 2, 4)
    x = x.reshape(b, c, layout.rows * m, layout.cols * m)[:, :, : layout.height, : layout.width]
    return x[0] if squeeze else x


# --------------------------------------------------------------------------
# Relative position bias


def relative_position_index(window_size: int, table_window: int | None = None) -> torch.Tensor:
    """``M^2 x M^2`` lookup into a ``(2T-1)^2`` bias table (``T >= M``).

    Entry ``(a, b)`` indexes the relative offset ``(row_a - row_b, col_a -
    col_b)`` between raster positions ``a`` and ``b`` of the window.
    """
    m = window_size
    t = m if table_window is None else table_window
    if m < 1 or t < m:
        raise ConfigurationError(f"window {m} does not fit a bias table built for window {t}")
    coords = torch.stack(torch.meshgrid(torch.arange(m), torch.arange(m), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]  # 2 x M^2 x M^2
    return (rel[0] + t - 1) * (2 * t - 1) + (rel[1] + t - 1)


def relative_position_bias(bias_table: torch.Tensor, window_size: int) -> torch.Tensor:
    """Expand a bias table into the ``M^2 x M^2`` additive logit bias.

    ``bias_table`` is either ``(2T-1)^2`` long or ``heads x (2T-1)^2``; the
    table's own window ``T`` may exceed ``window_size``, in which case only
    the offsets that fit the smaller window are read.
    """
    n = bias_table.shape[-1]
    t = math.isqrt(n)
    if t * t != n or t % 2 == 0:
        raise ConfigurationError(f"bias table length {n} is not (2M-1)^2 for any window size M")
    t = (t + 1) // 2
    if window_size > t:
        raise ConfigurationError(f"bias table for window {t} cannot serve window {window_size}")
    idx = relative_position_index(window_size, t).to(bias_table.device)
    return bias_table[..., idx]


# --------------------------------------------------------------------------
# Window-based self-attention


def effective_window(window_size: int, height: int, width: int) -> int:
    """Window actually used on an ``height x width`` map (clamped to the map)."""
    return max(1, min(window_size, height, width))


def window_self_attention(
    x: torch.Tensor,
    w_q: torch.Tensor,
    w_k: torch.Tensor,
    w_v: torch.Tensor,
    bias_table: torch.Tensor,
    window_size: int,
    heads: int = 1,
) -> torch.Tensor:
    """Self-attention restricted to non-overlapping spatial windows.

    For every window ``X^i`` (``M^2 x C``) computes
    ``softmax(X^i W^Q (X^i W^K)^T + B) X^i W^V`` with a row-wise softmax and
    ``B`` read from the relative position table, then merges the windows
    back. The output has ``w_v.shape[1]`` channels.

    Windows larger than the map are clamped to the map size.
    """
    xb, squeeze = _batched(x)
    b, c, h, w = xb.shape
    if w_q.shape[0] != c or w_k.shape[0] != c or w_v.shape[0] != c:
        raise ConfigurationError(
            f"projection input widths {w_q.shape[0]}/{w_k.shape[0]}/{w_v.shape[0]} do not match {c} channels"
        )
    if w_q.shape != w_k.shape:
        raise ConfigurationError(f"query and key projections differ in shape: {tuple(w_q.shape)} vs {tuple(w_k.shape)}")
    d_v = w_v.shape[1]
    if heads < 1 or w_q.shape[1] % heads or d_v % heads:
        raise ConfigurationError(f"projection widths {w_q.shape[1]}/{d_v} are not divisible by heads={heads}")
    table = bias_table if bias_table.dim() == 2 else bias_table.unsqueeze(0)
    if table.shape[0] not in (1, heads):
        raise ConfigurationError(f"bias table has {table.shape[0]} rows for {heads} heads")

    m = effective_window(window_size, h, w)
    windows, layout = window_partition(xb, m)  # B x N x m^2 x C
    n = layout.n_windows
    dq = w_q.shape[1] // heads
    dv = d_v // heads
    q = (windows @ w_q).reshape(b, n, m * m, heads, dq).transpose(2, 3)
    k = (windows @ w_k).reshape(b, n, m * m, heads, dq).transpose(2, 3)
    v = (windows @ w_v).reshape(b, n, m * m, heads, dv).transpose(2, 3)  # B x N x heads x m^2 x dv

    attn = torch.softmax(q @ k.transpose(-2, -1) + relative_position_bias(table, m), dim=-1)
    out = (attn @ v).transpose(2, 3).reshape(b, n, m * m, d_v)
    out = window_merge(out, layout)
    _check_finite(out, "window self-attention")
    return out[0] if squeeze else out


def window_attention_matrices(
    x: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, bias_table: torch.Tensor, window_size: int, heads: int = 1
) -> torch.Tensor:
    """Row-stochastic ``N x heads x M^2 x M^2`` attention of every window (single map)."""
    if x.dim() != 3:
        raise ConfigurationError("window_attention_matrices expects a single C x H x W map")
    c, h, w = x.shape
    m = effective_window(window_size, h, w)
    windows, layout = window_partition(x, m)
    dq = w_q.shape[1] // heads
    n = layout.n_windows
    q = (windows @ w_q).reshape(n, m * m, heads, dq).transpose(1, 2)
    k = (windows @ w_k).reshape(n, m * m, heads, dq).transpose(1, 2)
    table = bias_table if bias_table.dim() == 2 else bias_table.unsqueeze(0)
    return torch.softmax(q @ k.transpose(-2, -1) + relative_position_bias(table, m), dim=-1)


# --------------------------------------------------------------------------
# Operation counts


def attention_mac_count(
    kind: str,
    channels: int,
    height: int,
    width: int,
    window_size: int | None = None,
    d_qk: int = 1,
    d_v: int | None = None,
    heads: int = 1,
) -> int:
    """Multiply-accumulates of the attention core, projections excluded.

    spectral: logits plus aggregation, ``2 * HW * C^2 / heads``.
    window: ``N * M^4 * (heads * d_qk + d_v)`` with ``N`` windows after the
    clamp/pad rules of :func:`window_self_attention`.
    """
    if min(channels, height, width, heads) < 1:
        raise ConfigurationError("attention dimensions must be positive")
    hw = height * width
    if kind == "spectral":
        if channels % heads:
            raise ConfigurationError(f"channel count {channels} is not divisible by heads={heads}")
        return 2 * hw * channels * channels // heads
    if kind == "window":
        if window_size is None or window_size < 1:
            raise ConfigurationError("window attention needs a positive window size")
        dv = channels if d_v is None else d_v
        m = effective_window(window_size, height, width)
        n = math.ceil(height / m) * math.ceil(width / m)
        return n * m**4 * (heads * d_qk + dv)
    raise ConfigurationError(f"unknown attention kind {kind!r}")


# --------------------------------------------------------------------------
# Modules


class SpectralSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"width {dim} is not divisible by heads={heads}")
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(dim, dim))
        self.w_k = nn.Parameter(torch.empty(dim, dim))
        self.w_v = nn.Parameter(torch.empty(dim, dim))
        self.sigma = nn.Parameter(torch.ones(heads))
        bound = 1.0 / math.sqrt(dim)
        for p in (self.w_q, self.w_k, self.w_v):
            nn.init.uniform_(p, -bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return spectral_self_attention(x, self.w_q, self.w_k, self.w_v, self.sigma, self.heads)


class WindowSelfAttention(nn.Module):
    def __init__(self, dim: int, window_size: int, d_qk: int = 1, d_v: int | None = None, heads: int = 1):
        super().__init__()
        d_v = dim if d_v is None else d_v
        if d_v % heads:
            raise ConfigurationError(f"value width {d_v} is not divisible by heads={heads}")
        self.window_size = window_size
        self.heads = heads
        self.w_q = nn.Parameter(torch.empty(dim, heads * d_qk))
        self.w_k = nn.Parameter(torch.empty(dim, heads * d_qk))
        self.w_v = nn.Parameter(torch.empty(dim, d_v))
        self.bias_table = nn.Parameter(torch.zeros(heads, (2 * window_size - 1) ** 2))
        bound = 1.0 / math.sqrt(dim)
        for p in (self.w_q, self.w_k, self.w_v):
            nn.init.uniform_(p, -bound, bound)

    @property
    def out_channels(self) -> int:
        return self.w_v.shape[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return window_self_attention(
            x, self.w_q, self.w_k, self.w_v, self.bias_table, self.window_size, self.heads
        )

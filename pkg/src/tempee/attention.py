"""Full-grid multi-head self-attention and the multi-level spatio-temporal variant.

Both forwards take feature maps laid out ``(..., c, h, w)``; any leading axes
are treated as batch. Tokens are spatial cells carrying ``c`` features.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError
from .tensor import (
    ReshapePermute,
    Tensor,
    matmul,
    permute,
    pool2d,
    reshape,
    softmax_lastdim,
    upsample_nearest2d,
)

_U64_MAX = 2**64 - 1


@dataclass
class AttentionConfig:
    heads: int = 4
    g: int = 8
    g_prime: int = 2
    alpha: float = 1.0
    beta: float = 1.0
    # None -> sqrt of the per-head feature width
    d_scale: float | None = None
    residual: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.g < 1 or self.g_prime < 1:
            raise ConfigError(f"heads, g and g_prime must be positive: {self}")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError(f"pooling coefficients must be non-negative: alpha={self.alpha}, beta={self.beta}")

    def scale_for(self, head_width: int) -> float:
        return math.sqrt(self.d_scale if self.d_scale is not None else head_width)


@dataclass
class MHSAWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wp: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wp": self.wp}


@dataclass
class MSTAWeights:
    q1: Tensor
    k1: Tensor
    v1: Tensor
    q2: Tensor
    k2: Tensor
    v2: Tensor
    m: Tensor
    n: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("q1", "k1", "v1", "q2", "k2", "v2", "m", "n")}


def _square(rng: np.random.Generator, c: int, scale: float | None = None) -> Tensor:
    std = 1.0 / math.sqrt(c) if scale is None else scale
    return Tensor(rng.normal(0.0, std, size=(c, c)), requires_grad=True)


def init_mhsa(c: int, rng: np.random.Generator, zero_output: bool = False) -> MHSAWeights:
    wp = Tensor(np.zeros((c, c)), requires_grad=True) if zero_output else _square(rng, c)
    return MHSAWeights(_square(rng, c), _square(rng, c), _square(rng, c), wp)


def init_msta(c: int, rng: np.random.Generator, zero_output: bool = False) -> MSTAWeights:
    n = Tensor(np.zeros((c, c)), requires_grad=True) if zero_output else _square(rng, c)
    return MSTAWeights(*(_square(rng, c) for _ in range(7)), n)


def identity_mhsa(c: int) -> MHSAWeights:
    eye = np.eye(c)
    return MHSAWeights(*(Tensor(eye, requires_grad=True) for _ in range(4)))


# ---------------------------------------------------------------- attention core


def multihead_attention(
    tokens: Tensor,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    heads: int,
    cfg: AttentionConfig,
    return_weights: bool = False,
):
    """Scaled dot-product attention over the second-to-last axis.

    ``tokens`` is ``(..., L, c)``. Each head uses a ``c / heads`` slice of
    the projected queries, keys and values; head outputs are laid side by
    side along the channel axis, giving ``(..., L, c)``.
    """
    c = tokens.shape[-1]
    if c % heads:
        raise ConfigError(f"channel count {c} is not divisible by {heads} heads")
    dh = c // heads
    lead = tokens.shape[:-2]
    length = tokens.shape[-2]
    nl = len(lead)

    def split(t: Tensor) -> Tensor:
        t = reshape(t, lead + (length, heads, dh))
        return permute(t, tuple(range(nl)) + (nl + 1, nl, nl + 2))

    q = split(matmul(tokens, wq))
    k = split(matmul(tokens, wk))
    v = split(matmul(tokens, wv))
    kt = permute(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = matmul(q, kt) * (1.0 / cfg.scale_for(dh))
    att = softmax_lastdim(scores)
    out = matmul(att, v)
    out = permute(out, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    out = reshape(out, lead + (length, c))
    return (out, att) if return_weights else out


def _check_heads(c: int, cfg: AttentionConfig) -> None:
    if c % cfg.heads:
        raise ConfigError(f"channel count {c} is not divisible by {cfg.heads} heads")


def _to_tokens(x: Tensor) -> tuple[Tensor, tuple[int, ...]]:
    """(..., c, h, w) -> (..., h*w, c)."""
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    nl = len(lead)
    t = reshape(x, lead + (c, h * w))
    return permute(t, tuple(range(nl)) + (nl + 1, nl)), (c, h, w)


def _from_tokens(t: Tensor, chw: tuple[int, int, int]) -> Tensor:
    lead = t.shape[:-2]
    nl = len(lead)
    t = permute(t, tuple(range(nl)) + (nl + 1, nl))
    return reshape(t, lead + chw)


def mhsa_forward(
    x: Tensor,
    weights: MHSAWeights,
    cfg: AttentionConfig,
    skip: Tensor | None = None,
    return_weights: bool = False,
):
    """Conventional MHSA over every spatial cell of a ``(..., c, h, w)`` map.

    The output is ``A @ W^p`` plus a residual: ``skip`` when given, otherwise
    ``x`` itself. ``cfg.residual = False`` drops the residual.
    """
    if x.ndim < 3:
        raise ShapeError(f"mhsa_forward expects (..., c, h, w), got {x.shape}")
    _check_heads(x.shape[-3], cfg)
    tokens, chw = _to_tokens(x)
    a, att = multihead_attention(tokens, weights.wq, weights.wk, weights.wv, cfg.heads, cfg, return_weights=True)
    out = _from_tokens(matmul(a, weights.wp), chw)
    if cfg.residual:
        out = out + (x if skip is None else skip)
    return (out, att) if return_weights else out


def window_spec(shape: tuple[int, ...], g: int) -> ReshapePermute:
    """Partition ``(..., c, h, w)`` into ``(..., (h/g)*(w/g), g*g, c)`` windows.

    Window ``(a, b)`` (row-major index ``a * w/g + b``) holds cells
    ``(a*g + i, b*g + j)`` with in-window token index ``i*g + j``.
    """
    lead = tuple(shape[:-3])
    c, h, w = shape[-3:]
    if h % g:
        raise ShapeError(f"height {h} is not divisible by window size g={g}")
    if w % g:
        raise ShapeError(f"width {w} is not divisible by window size g={g}")
    nl = len(lead)
    pre = lead + (c, h // g, g, w // g, g)
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl + 2, nl + 4, nl)
    post = lead + ((h // g) * (w // g), g * g, c)
    return ReshapePermute(pre, axes, post)


def _check_msta_shape(x: Tensor, cfg: AttentionConfig) -> None:
    if x.ndim < 3:
        raise ShapeError(f"msta_forward expects (..., c, h, w), got {x.shape}")
    h, w = x.shape[-2:]
    for name, extent in (("height", h), ("width", w)):
        if extent % cfg.g:
            raise ShapeError(f"msta: {name} {extent} is not divisible by g={cfg.g}")
        if extent % cfg.g_prime:
            raise ShapeError(f"msta: {name} {extent} is not divisible by g_prime={cfg.g_prime}")


def msta_forward(
    x: Tensor,
    weights: MSTAWeights,
    cfg: AttentionConfig,
    skip: Tensor | None = None,
    return_levels: bool = False,
):
    """Two-level attention: windowed local attention, then pooled coarse-grid attention.

    Level 1 attends among the ``g*g`` cells of each window and adds ``x``.
    Level 2 mixes max- and average-pooled level-1 maps, attends among the
    ``(h/g')*(w/g')`` coarse cells and is replicated back to full size. The
    sum of both levels goes through ``W^m W^n`` and the residual is added.
    """
    _check_msta_shape(x, cfg)
    _check_heads(x.shape[-3], cfg)
    lead = x.shape[:-3]
    c, h, w = x.shape[-3:]
    nl = len(lead)
    gp = cfg.g_prime

    spec = window_spec(x.shape, cfg.g)
    win = spec.apply(x)
    att1 = multihead_attention(win, weights.q1, weights.k1, weights.v1, cfg.heads, cfg)
    att1 = spec.inverse(x.shape).apply(att1) + x

    pooled = (pool2d(att1, gp, "max") * cfg.alpha + pool2d(att1, gp, "avg") * cfg.beta) * 0.5
    coarse, chw = _to_tokens(pooled)
    att2 = multihead_attention(coarse, weights.q2, weights.k2, weights.v2, cfg.heads, cfg)
    att2 = upsample_nearest2d(_from_tokens(att2, chw), gp)

    fused, _ = _to_tokens(att1 + att2)
    fused = matmul(matmul(fused, weights.m), weights.n)
    out = _from_tokens(fused, (c, h, w))
    if cfg.residual:
        out = out + (x if skip is None else skip)
    if return_levels:
        return out, {"att1": att1, "pooled": pooled, "att2": att2}
    return out


# ---------------------------------------------------------------- complexity


def _positive_ints(**kw) -> None:
    for name, v in kw.items():
        if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")


def _u64(value: int) -> int:
    if value > _U64_MAX:
        raise NumericError(f"flop count {value} overflows 64-bit unsigned range")
    return value


def complexity_mhsa(c: int, h: int, w: int) -> int:
    """FLOP count ``2*c*h^2*w^2 + 3*h*w*c^2`` of full-grid attention."""
    _positive_ints(c=c, h=h, w=w)
    c, h, w = int(c), int(h), int(w)
    return _u64(2 * c * h * h * w * w + 3 * h * w * c * c)


def complexity_msta(c: int, h: int, w: int, g_prime: int) -> int:
    """FLOP count ``c*h*w*(2g'^2 + 4c) + (2chw/g'^2)(c + hw)`` of the two-level attention."""
    _positive_ints(c=c, h=h, w=w, g_prime=g_prime)
    c, h, w, gp = int(c), int(h), int(w), int(g_prime)
    if h % gp or w % gp:
        raise ShapeError(f"g_prime={gp} must divide h={h} and w={w}")
    hw = h * w
    return _u64(c * hw * (2 * gp * gp + 4 * c) + (2 * c * hw // (gp * gp)) * (c + hw))


@dataclass(frozen=True)
class ComplexityReport:
    c: int
    h: int
    w: int
    g_prime: int
    flops_mhsa: int
    flops_msta: int

    @property
    def ratio(self) -> float:
        return self.flops_msta / self.flops_mhsa


def complexity_report(c: int, h: int, w: int, g_prime: int) -> ComplexityReport:
    return ComplexityReport(c, h, w, g_prime, complexity_mhsa(c, h, w), complexity_msta(c, h, w, g_prime))

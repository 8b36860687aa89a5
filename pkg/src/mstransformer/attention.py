"""Scaled dot-product attention: full-sequence and scale-aware (windowed).

A head's scale is its *total* odd window width ``w``; position ``j`` attends
to rows ``j - r .. j + r`` with ``r = (w - 1) // 2``, clipped to the
sequence. Clipping means no padding rows and no fake logits take part in
the softmax. Logits are divided by ``sqrt(head_dim)``.

All kernels take stacked head tensors shaped ``(..., heads, N, head_dim)``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import autograd as ag
from . import kernels
from .autograd import Tensor

_RATIO = re.compile(r"^\s*[Nn]\s*/\s*(\d+)\s*$")


@dataclass(frozen=True)
class ScaleSpec:
    """Either a fixed odd width or a fraction ``N/denominator`` of the length."""

    kind: str
    value: int

    def __post_init__(self):
        if self.kind == "fixed":
            if self.value < 1 or self.value % 2 == 0:
                raise ValueError(f"fixed scale must be an odd integer >= 1, got {self.value}")
        elif self.kind == "ratio":
            if self.value < 1:
                raise ValueError(f"ratio denominator must be >= 1, got {self.value}")
        else:
            raise ValueError(f"unknown scale kind {self.kind!r}")

    @classmethod
    def fixed(cls, width: int) -> "ScaleSpec":
        return cls("fixed", int(width))

    @classmethod
    def ratio(cls, denominator: int) -> "ScaleSpec":
        return cls("ratio", int(denominator))

    def __str__(self) -> str:
        return str(self.value) if self.kind == "fixed" else f"N/{self.value}"


def parse_scale(token: str) -> ScaleSpec:
    """``"3"`` -> fixed width 3, ``"N/16"`` -> sixteenth of the length."""
    m = _RATIO.match(token)
    if m:
        return ScaleSpec.ratio(int(m.group(1)))
    tok = token.strip()
    if not tok.isdigit():
        raise ValueError(f"bad scale token {token!r}; expected an odd integer or N/k")
    return ScaleSpec.fixed(int(tok))


def parse_scales(text: str) -> list[ScaleSpec]:
    if not text.strip():
        raise ValueError("empty scale list")
    tokens = text.split(",")
    if any(not t.strip() for t in tokens):
        raise ValueError(f"empty entry in scale list {text!r}")
    return [parse_scale(t) for t in tokens]


def resolve_scale(spec: Union[ScaleSpec, int], n: int) -> int:
    """Odd window width for sequence length ``n``, capped at ``2n - 1``.

    Ratios are rounded half up, then bumped to the next odd number if even.
    """
    if n < 1:
        raise ValueError(f"sequence length must be >= 1, got {n}")
    if isinstance(spec, int):
        spec = ScaleSpec.fixed(spec)
    if spec.kind == "fixed":
        w = spec.value
    else:
        den = spec.value
        w = (2 * n + den) // (2 * den)  # floor(n/den + 1/2) in integers
        if w % 2 == 0:
            w += 1
    return min(w, 2 * n - 1)


@dataclass
class HeadParams:
    """Projections ``D -> head_dim`` for one head."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    @property
    def head_dim(self) -> int:
        return self.wq.shape[-1]


def extract_context(x: Tensor, j: int, width: int) -> Tensor:
    """Rows of ``x`` inside the clipped window of width ``width`` centred on ``j``."""
    n = x.shape[-2]
    if not 0 <= j < n:
        raise IndexError(f"position {j} outside sequence of length {n}")
    r = (width - 1) // 2
    return ag.slice_rows(x, max(j - r, 0), min(j + r, n - 1) + 1)


# -- stacked-head kernels ------------------------------------------------------

def project_heads(h: Tensor, w: Tensor) -> Tensor:
    """``(..., N, D) x (heads, D, Dh) -> (..., heads, N, Dh)``."""
    heads, d, dh = w.shape
    flat = ag.reshape(ag.swapaxes(w, 0, 1), (d, heads * dh))
    y = ag.matmul(h, flat)
    y = ag.reshape(y, h.shape[:-1] + (heads, dh))
    return ag.swapaxes(y, -3, -2)


def merge_heads(x: Tensor) -> Tensor:
    """``(..., heads, N, Dh) -> (..., N, heads*Dh)``, head-major feature order."""
    *lead, heads, n, dh = x.shape
    t = ag.swapaxes(x, -3, -2)
    return ag.reshape(t, tuple(lead) + (n, heads * dh))


def full_attention(q: Tensor, k: Tensor, v: Tensor, retain: bool = False):
    """Every query attends to every key. Returns ``(out, weights or None)``."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = ag.mul(ag.matmul(q, ag.transpose_last(k)), scale)
    attn = ag.softmax_rows(logits)
    out = ag.matmul(attn, v)
    return out, (attn.data.copy() if retain else None)


def band_mask(n: int, width: int) -> np.ndarray:
    """``(n, n)`` boolean map: key ``k`` lies in query ``j``'s clipped window."""
    r = (width - 1) // 2
    idx = np.arange(n)
    return np.abs(idx[:, None] - idx[None, :]) <= r


def windowed_attention(q: Tensor, k: Tensor, v: Tensor, width: int, retain: bool = False,
                       method: str = "auto"):
    """Each query attends to its clipped window. Returns ``(out, weights or None)``.

    ``method`` picks the evaluation strategy; all of them compute the same function:

    * ``"band"`` walks the ``width`` offsets, touching only in-window keys.
    * ``"dense"`` forms all ``N x N`` logits with one batched product and
      gives off-window keys weight exactly 0.
    * ``"fused"`` runs the compiled kernel in :mod:`.kernels`.
    * ``"auto"`` means ``fused``.

    Retained weights are dense ``(..., N, N)`` maps, zero outside the window.
    """
    n = q.shape[-2]
    if width < 1 or width % 2 == 0:
        raise ValueError(f"window width must be odd and >= 1, got {width}")
    width = min(width, 2 * n - 1)
    if method in ("auto", "fused"):
        return _fused_attention(q, k, v, [width] * q.shape[-3] if q.ndim >= 3 else [width], retain)
    if method == "band":
        return _band_attention(q, k, v, width, retain)
    if method != "dense":
        raise ValueError(f"unknown attention method {method!r}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = ag.mul(ag.matmul(q, ag.transpose_last(k)), scale)
    mask = None if width == 2 * n - 1 else band_mask(n, width)
    attn = ag.softmax_rows(logits, mask=mask)
    return ag.matmul(attn, v), (attn.data.copy() if retain else None)


def _band_attention(q: Tensor, k: Tensor, v: Tensor, width: int, retain: bool):
    n, dh = q.shape[-2], q.shape[-1]
    r = (width - 1) // 2
    scale = 1.0 / math.sqrt(dh)
    qd = np.ascontiguousarray(q.data)
    pad = [(0, 0)] * (qd.ndim - 2) + [(r, r), (0, 0)]
    kp, vp = np.pad(k.data, pad), np.pad(v.data, pad)
    pos = np.arange(n)[:, None] + np.arange(-r, r + 1)[None, :]
    mask = (pos >= 0) & (pos < n)

    logits = np.empty(qd.shape[:-1] + (width,), dtype=np.float64)
    for c in range(width):
        logits[..., c] = np.einsum("...d,...d->...", qd, kp[..., c : c + n, :])
    logits *= scale
    logits = np.where(mask, logits, -np.inf)
    logits -= logits.max(axis=-1, keepdims=True)
    attn = np.exp(logits)
    attn /= attn.sum(axis=-1, keepdims=True)
    a_cast = attn.astype(qd.dtype, copy=False)

    out = np.zeros_like(qd)
    for c in range(width):
        out += a_cast[..., c, None] * vp[..., c : c + n, :]

    def backward(g):
        gattn = np.empty_like(attn)
        gkp, gvp = np.zeros_like(kp), np.zeros_like(vp)
        for c in range(width):
            gattn[..., c] = np.einsum("...d,...d->...", g, vp[..., c : c + n, :])
            gvp[..., c : c + n, :] += a_cast[..., c, None] * g
        glog = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True)) * scale
        glog = glog.astype(qd.dtype, copy=False)
        gq = np.zeros_like(qd)
        for c in range(width):
            gq += glog[..., c, None] * kp[..., c : c + n, :]
            gkp[..., c : c + n, :] += glog[..., c, None] * qd
        return gq, gkp[..., r : r + n, :], gvp[..., r : r + n, :]

    result = ag._result(out, (q, k, v), backward)
    weights = window_weights_to_dense(attn, width) if retain else None
    return result, weights


def _fused_attention(q: Tensor, k: Tensor, v: Tensor, widths: Sequence[int], retain: bool):
    """``(..., H, N, Dh)`` inputs, one width per head, via the compiled kernel."""
    shape = q.shape
    n, dh = shape[-2], shape[-1]
    if q.ndim < 3:
        q, k, v = (ag.reshape(t, (1,) + t.shape) for t in (q, k, v))
        return _first_head_2d(_fused_attention(q, k, v, widths, retain))
    heads = shape[-3]
    if len(widths) != heads:
        raise ag.ShapeError(f"{len(widths)} widths for {heads} heads")
    batch = int(np.prod(shape[:-3], dtype=np.int64))
    radii = np.tile(np.array([(min(w, 2 * n - 1) - 1) // 2 for w in widths], dtype=np.int64), batch)
    flat = (batch * heads, n, dh)
    qd, kd, vd = (t.data.reshape(flat) for t in (q, k, v))
    out, attn = kernels.window_forward(qd, kd, vd, radii)

    def backward(g):
        grads = kernels.window_backward(qd, kd, vd, radii, attn, g.reshape(flat))
        return tuple(x.reshape(shape) for x in grads)

    result = ag._result(out.reshape(shape), (q, k, v), backward)
    maps = kernels.window_to_dense(attn, radii).reshape(shape[:-1] + (n,)) if retain else None
    return result, maps


def _first_head_2d(pair):
    out, maps = pair
    return ag.reshape(out, out.shape[1:]), (maps[0] if maps is not None else None)


def window_weights_to_dense(weights: np.ndarray, width: int) -> np.ndarray:
    """Scatter ``(..., N, width)`` window weights into ``(..., N, N)`` maps."""
    n = weights.shape[-2]
    r = (width - 1) // 2
    dense = np.zeros(weights.shape[:-1] + (n,), dtype=weights.dtype)
    rows = np.arange(n)
    for c in range(width):
        cols = rows + c - r
        ok = (cols >= 0) & (cols < n)
        dense[..., rows[ok], cols[ok]] = weights[..., rows[ok], c]
    return dense


def scale_aware_heads(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, width: int,
                      retain: bool = False, method: str = "auto"):
    """Stacked heads sharing one window width: ``(..., N, D) -> (..., heads, N, Dh)``."""
    q, k, v = project_heads(h, wq), project_heads(h, wk), project_heads(h, wv)
    return windowed_attention(q, k, v, width, retain, method)


def multi_scale_attention(h: Tensor, wq: Tensor, wk: Tensor, wv: Tensor,
                          widths: Sequence[int], retain: bool = False, method: str = "auto"):
    """All heads of one layer, head ``i`` using window width ``widths[i]``.

    ``wq``/``wk``/``wv`` are stacked ``(heads, D, Dh)``. Returns the merged
    ``(..., N, heads*Dh)`` head outputs and, when ``retain``, ``(..., heads, N, N)``
    attention maps.
    """
    heads = wq.shape[0]
    if len(widths) != heads:
        raise ag.ShapeError(f"{len(widths)} widths for {heads} heads")
    n = h.shape[-2]
    widths = [min(w, 2 * n - 1) for w in widths]
    qkv = project_heads(h, ag.concat([wq, wk, wv], axis=0))
    q, k, v = (ag.take(qkv, -3, i * heads, (i + 1) * heads) for i in range(3))
    if method in ("auto", "fused"):
        out, maps = _fused_attention(q, k, v, widths, retain)
        return merge_heads(out), maps
    if method == "dense":
        scale = 1.0 / math.sqrt(q.shape[-1])
        logits = ag.mul(ag.matmul(q, ag.transpose_last(k)), scale)
        full = all(w == 2 * n - 1 for w in widths)
        mask = None if full else np.stack([band_mask(n, w) for w in widths])
        attn = ag.softmax_rows(logits, mask=mask)
        out = ag.matmul(attn, v)
        return merge_heads(out), (attn.data.copy() if retain else None)
    outs, maps = [], []
    start = 0
    while start < heads:
        stop = start
        while stop < heads and widths[stop] == widths[start]:
            stop += 1
        o, a = windowed_attention(
            ag.take(q, -3, start, stop), ag.take(k, -3, start, stop), ag.take(v, -3, start, stop),
            widths[start], retain, method,
        )
        outs.append(o)
        maps.append(a)
        start = stop
    out = outs[0] if len(outs) == 1 else ag.concat(outs, axis=-3)
    return merge_heads(out), (np.concatenate(maps, axis=-3) if retain else None)


# -- single-sequence reference API ---------------------------------------------

def _stack(heads: Sequence[HeadParams]):
    return (
        ag.stack([p.wq for p in heads]),
        ag.stack([p.wk for p in heads]),
        ag.stack([p.wv for p in heads]),
    )


def sasa_head(h: Tensor, params: HeadParams, width: int, method: str = "auto") -> Tensor:
    """One scale-aware head: ``(N, D) -> (N, head_dim)``."""
    if width < 1 or width % 2 == 0:
        raise ValueError(f"window width must be odd and >= 1, got {width}")
    wq, wk, wv = _stack([params])
    out, _ = scale_aware_heads(h, wq, wk, wv, width, method=method)
    return _first_head(out)


def _first_head(x: Tensor) -> Tensor:
    # (..., 1, N, Dh) -> (..., N, Dh)
    return ag.reshape(x, x.shape[:-3] + x.shape[-2:])


def msmsa(h: Tensor, heads: Sequence[tuple], wo: Tensor, retain: bool = False):
    """Multi-scale multi-head attention.

    ``heads`` is a sequence of ``(HeadParams, scale)`` where ``scale`` is a
    ``ScaleSpec`` or an already resolved odd width. Head outputs are
    concatenated in the given order and projected by ``wo``.

    Returns the ``(N, D)`` output, or ``(output, weights)`` when ``retain``,
    with ``weights`` a ``(heads, N, N)`` array.
    """
    if not heads:
        raise ValueError("msmsa needs at least one head")
    n = h.shape[-2]
    dh = heads[0][0].head_dim
    if len(heads) * dh != wo.shape[0]:
        raise ag.ShapeError(
            f"msmsa: {len(heads)} heads x {dh} units does not match output projection {wo.shape}"
        )
    widths = [resolve_scale(s, n) for _, s in heads]
    wq, wk, wv = _stack([p for p, _ in heads])
    merged, maps = multi_scale_attention(h, wq, wk, wv, widths, retain)
    y = ag.matmul(merged, wo)
    return (y, maps) if retain else y


def msa_standard(h: Tensor, heads: Sequence[HeadParams], wo: Tensor, retain: bool = False):
    """Full-sequence multi-head self-attention, concatenated heads times ``wo``."""
    if not heads:
        raise ValueError("msa_standard needs at least one head")
    dh = heads[0].head_dim
    if len(heads) * dh != wo.shape[0]:
        raise ag.ShapeError(
            f"msa_standard: {len(heads)} heads x {dh} units does not match {wo.shape}"
        )
    if h.shape[-1] != heads[0].wq.shape[0]:
        raise ag.ShapeError(f"msa_standard: input {h.shape} vs projection {heads[0].wq.shape}")
    wq, wk, wv = _stack(heads)
    out, attn = full_attention(project_heads(h, wq), project_heads(h, wk), project_heads(h, wv),
                               retain)
    y = ag.matmul(merge_heads(out), wo)
    return (y, attn) if retain else y


def init_head(rng: np.random.Generator, d: int, dh: int, dtype=np.float64) -> HeadParams:
    bound = 1.0 / math.sqrt(d)
    mk = lambda: ag.parameter(rng.uniform(-bound, bound, (d, dh)), dtype=dtype)  # noqa: E731
    return HeadParams(mk(), mk(), mk())


"""Primitive differentiable operations.

Each constructor accepts Nodes or plain arrays (arrays become constants),
computes the forward value in float64 where accumulation matters, stores the
result as float32, and attaches exact vector-Jacobian products.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Node, constant
from . import tensor as _tensor
from .tensor import DTYPE, as_tensor


def _store(arr) -> np.ndarray:
    """Round an op output to the active storage dtype (float32 normally)."""
    return np.asarray(arr, dtype=_tensor.storage_dtype())


def asnode(x) -> Node:
    return x if isinstance(x, Node) else constant(np.asarray(x, dtype=DTYPE))


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Node:
    a, b = asnode(a), asnode(b)
    out = a.value + b.value
    return Node(
        out,
        parents=(
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ),
        op="add",
    )


def mul(a, b) -> Node:
    a, b = asnode(a), asnode(b)
    out = a.value * b.value
    av, bv = a.value, b.value
    return Node(
        out,
        parents=(
            (a, lambda g: _unbroadcast(g * bv, av.shape)),
            (b, lambda g: _unbroadcast(g * av, bv.shape)),
        ),
        op="mul",
    )


def neg(a) -> Node:
    return scale(a, -1.0)


def sub(a, b) -> Node:
    return add(a, neg(b))


def scale(a, c: float) -> Node:
    a = asnode(a)
    c = float(c)
    out = _store(np.asarray(a.value, dtype=np.float64) * c) if _tensor._PRECISE else as_tensor(a.value * c)
    return Node(out, parents=((a, lambda g: g * c),), op="scale")


def relu(a) -> Node:
    a = asnode(a)
    mask = a.value > 0
    out = np.where(mask, a.value, DTYPE(0))
    return Node(out, parents=((a, lambda g: g * mask),), op="relu")


def sigmoid(a) -> Node:
    a = asnode(a)
    s64 = 1.0 / (1.0 + np.exp(-a.value.astype(np.float64)))
    out = _store(s64)
    return Node(out, parents=((a, lambda g: g * s64 * (1.0 - s64)),), op="sigmoid")


def exp(a) -> Node:
    a = asnode(a)
    e64 = np.exp(a.value.astype(np.float64))
    out = _store(e64)
    return Node(out, parents=((a, lambda g: g * e64),), op="exp")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Node:
    """2D matrix product with float64 accumulation."""
    a, b = asnode(a), asnode(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError(f"matmul expects 2D operands, got {a.value.shape} @ {b.value.shape}")
    a64 = a.value.astype(np.float64)
    b64 = b.value.astype(np.float64)
    out = _store(a64 @ b64)
    return Node(
        out,
        parents=(
            (a, lambda g: g @ b64.T),
            (b, lambda g: a64.T @ g),
        ),
        op="matmul",
    )


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Node:
    """2D cross-correlation over HWC input with (kh, kw, Cin, Cout) weights."""
    x, w = asnode(x), asnode(w)
    bn = asnode(b) if b is not None else None
    xv, wv = x.value, w.value
    if xv.ndim != 3 or wv.ndim != 4:
        raise ValueError(f"conv2d expects HWC input and khkwCiCo weights, got {xv.shape}, {wv.shape}")
    kh, kw, ci, co = wv.shape
    if xv.shape[2] != ci:
        raise ValueError(f"conv2d channel mismatch: input {xv.shape[2]} != weight {ci}")
    h, wdt = xv.shape[:2]
    p, s = int(padding), int(stride)
    ho = (h + 2 * p - kh) // s + 1
    wo = (wdt + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d output would be empty for input {xv.shape}, kernel {kh}x{kw}")

    xp = np.pad(xv, ((p, p), (p, p), (0, 0))) if p else xv
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::s, ::s]  # (ho, wo, ci, kh, kw)
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * ci).astype(np.float64)
    wmat = wv.reshape(kh * kw * ci, co).astype(np.float64)
    out64 = cols @ wmat
    if bn is not None:
        out64 = out64 + bn.value.astype(np.float64)
    out = _store(out64.reshape(ho, wo, co))

    def vjp_x(g):
        gmat = g.reshape(ho * wo, co)
        dcols = (gmat @ wmat.T).reshape(ho, wo, kh, kw, ci)
        dxp = np.zeros((h + 2 * p, wdt + 2 * p, ci), dtype=np.float64)
        for di in range(kh):
            for dj in range(kw):
                dxp[di : di + ho * s : s, dj : dj + wo * s : s] += dcols[:, :, di, dj, :]
        return dxp[p : p + h, p : p + wdt] if p else dxp

    def vjp_w(g):
        gmat = g.reshape(ho * wo, co)
        return (cols.T @ gmat).reshape(kh, kw, ci, co)

    parents = [(x, vjp_x), (w, vjp_w)]
    if bn is not None:
        parents.append((bn, lambda g: g.sum(axis=(0, 1))))
    return Node(out, parents=tuple(parents), op="conv2d")


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def bilinear_sample(src, coords) -> tuple[Node, np.ndarray]:
    """Sample ``src`` (H,W,C) at continuous pixel coords (H',W',2), x then y.

    Integer coordinates land exactly on source pixels. Out-of-range
    coordinates clamp to the border; the returned boolean mask is False there.
    """
    src = asnode(src)
    coords = asnode(coords)
    sv = src.value
    cv = coords.value.astype(np.float64)
    if sv.ndim != 3 or sv.size == 0:
        raise ValueError(f"bilinear_sample needs a non-empty HWC source, got shape {sv.shape}")
    if cv.ndim != 3 or cv.shape[-1] != 2:
        raise ValueError(f"coords must be (H',W',2), got {cv.shape}")
    h, w = sv.shape[:2]
    xs, ys = cv[..., 0], cv[..., 1]
    # 1e-6 px tolerance: warp chains leave border coords a few ulps outside
    eps = 1e-6
    mask = (xs >= -eps) & (xs <= w - 1 + eps) & (ys >= -eps) & (ys <= h - 1 + eps)

    cx = np.clip(xs, 0.0, w - 1.0)
    cy = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(cx), max(w - 2, 0)).astype(np.intp)
    y0 = np.minimum(np.floor(cy), max(h - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (cx - x0)[..., None]
    fy = (cy - y0)[..., None]

    s64 = sv.astype(np.float64)
    v00, v01 = s64[y0, x0], s64[y0, x1]
    v10, v11 = s64[y1, x0], s64[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    out64 = top * (1 - fy) + bot * fy
    out = _store(out64)

    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy

    def vjp_src(g):
        d = np.zeros_like(s64)
        np.add.at(d, (y0, x0), g * w00)
        np.add.at(d, (y0, x1), g * w01)
        np.add.at(d, (y1, x0), g * w10)
        np.add.at(d, (y1, x1), g * w11)
        return d

    # clamp saturates the gradient per component, not jointly
    inside_x = (xs >= 0) & (xs <= w - 1)
    inside_y = (ys >= 0) & (ys <= h - 1)

    def vjp_coords(g):
        dx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy) * g
        dy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx) * g
        return np.stack(
            [dx.sum(axis=-1) * inside_x, dy.sum(axis=-1) * inside_y], axis=-1
        )

    node = Node(out, parents=((src, vjp_src), (coords, vjp_coords)), op="bilinear_sample")
    return node, mask


def sample_grid(out_h: int, out_w: int, src_h: int, src_w: int) -> np.ndarray:
    """Coordinate grid mapping an out_h x out_w raster onto a src raster.

    Align-corners mapping so grid corners land on source corners; collapses
    to the source center when an output extent is 1.
    """
    if out_w > 1:
        xs = np.linspace(0.0, src_w - 1.0, out_w)
    else:
        xs = np.array([(src_w - 1) / 2.0])
    if out_h > 1:
        ys = np.linspace(0.0, src_h - 1.0, out_h)
    else:
        ys = np.array([(src_h - 1) / 2.0])
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1).astype(DTYPE)


def upsample_bilinear(x, out_h: int, out_w: int) -> Node:
    """Resize an HWC node with bilinear interpolation (align-corners)."""
    x = asnode(x)
    h, w = x.value.shape[:2]
    node, _ = bilinear_sample(x, sample_grid(out_h, out_w, h, w))
    return node


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------

def reshape(x, shape) -> Node:
    x = asnode(x)
    old = x.value.shape
    out = np.ascontiguousarray(x.value.reshape(shape))
    return Node(out, parents=((x, lambda g: g.reshape(old)),), op="reshape")


def transpose(x, axes) -> Node:
    x = asnode(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.value.transpose(axes))
    return Node(out, parents=((x, lambda g: g.transpose(inv)),), op="transpose")


def concat(parts, axis: int = -1) -> Node:
    parts = [asnode(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one operand")
    out = np.concatenate([p.value for p in parts], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis
    sizes = [p.value.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return Node(out, parents=tuple((p, make_vjp(i)) for i, p in enumerate(parts)), op="concat")


def slice_(x, key) -> Node:
    """Basic (non-strided) slicing; key is a tuple of slices/ints."""
    x = asnode(x)
    out = np.ascontiguousarray(x.value[key])
    shape = x.value.shape

    def vjp(g):
        d = np.zeros(shape, dtype=np.float64)
        d[key] = g
        return d

    return Node(out, parents=((x, vjp),), op="slice")


def pad2d(x, top: int, bottom: int, left: int, right: int) -> Node:
    """Zero-pad the two leading spatial axes of an HWC node."""
    x = asnode(x)
    h, w, c = x.value.shape
    parts_rows = []
    if top:
        parts_rows.append(constant(np.zeros((top, w, c), dtype=DTYPE)))
    parts_rows.append(x)
    if bottom:
        parts_rows.append(constant(np.zeros((bottom, w, c), dtype=DTYPE)))
    out = concat(parts_rows, axis=0) if len(parts_rows) > 1 else x
    hh = h + top + bottom
    parts_cols = []
    if left:
        parts_cols.append(constant(np.zeros((hh, left, c), dtype=DTYPE)))
    parts_cols.append(out)
    if right:
        parts_cols.append(constant(np.zeros((hh, right, c), dtype=DTYPE)))
    return concat(parts_cols, axis=1) if len(parts_cols) > 1 else out


# ---------------------------------------------------------------------------
# Softmax, normalization, reductions
# ---------------------------------------------------------------------------

def softmax_last(x) -> Node:
    """Numerically stable softmax along the last axis."""
    x = asnode(x)
    if x.value.shape[-1] < 1:
        raise ValueError("softmax_last needs a non-empty last axis")
    x64 = x.value.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s64 = e / e.sum(axis=-1, keepdims=True)
    out = _store(s64)

    def vjp(g):
        dot = (g * s64).sum(axis=-1, keepdims=True)
        return s64 * (g - dot)

    return Node(out, parents=((x, vjp),), op="softmax_last")


def normalize(x, mode: str = "l2", eps: float = 1e-6) -> Node:
    """Normalize the last axis: 'l2' length or 'standard' (zero mean, unit std)."""
    x = asnode(x)
    x64 = x.value.astype(np.float64)
    if mode == "l2":
        sq = (x64 * x64).sum(axis=-1, keepdims=True)
        r = 1.0 / np.sqrt(sq + eps)
        out64 = x64 * r

        def vjp(g):
            gx = (g * x64).sum(axis=-1, keepdims=True)
            return r * g - (r ** 3) * x64 * gx

    elif mode == "standard":
        n = x64.shape[-1]
        mu = x64.mean(axis=-1, keepdims=True)
        xc = x64 - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        out64 = xc * inv
        y = out64

        def vjp(g):
            gm = g.mean(axis=-1, keepdims=True)
            gy = (g * y).mean(axis=-1, keepdims=True)
            return inv * (g - gm - y * gy)

    else:
        raise ValueError(f"unknown normalize mode {mode!r}")
    return Node(_store(out64), parents=((x, vjp),), op=f"normalize:{mode}")


def sum_last(x) -> Node:
    x = asnode(x)
    x64 = x.value.astype(np.float64)
    out = _store(x64.sum(axis=-1))
    d = x.value.shape[-1]
    return Node(
        out,
        parents=((x, lambda g: np.repeat(g[..., None], d, axis=-1)),),
        op="sum_last",
    )


def wsum_last(x, w) -> Node:
    """Weighted sum along the last axis: sum(x * w)."""
    return sum_last(mul(x, w))


def sum_all(x) -> Node:
    x = asnode(x)
    total = x.value.astype(np.float64).sum()
    shape = x.value.shape
    node = Node(
        _store(np.array([total])),
        parents=((x, lambda g: np.full(shape, float(np.asarray(g).sum()), dtype=np.float64)),),
        op="sum_all",
    )
    node.aux = float(total)
    return node


def mean_all(x) -> Node:
    x = asnode(x)
    mean = x.value.astype(np.float64).mean()
    shape = x.value.shape
    n = x.value.size
    node = Node(
        _store(np.array([mean])),
        parents=((x, lambda g: np.full(shape, float(np.asarray(g).sum()) / n, dtype=np.float64)),),
        op="mean_all",
    )
    node.aux = float(mean)
    return node


# ---------------------------------------------------------------------------
# Composed helpers (not primitives)
# ---------------------------------------------------------------------------

def clamp(x, lo: float, hi: float) -> Node:
    """lo + relu(x - lo) - relu(x - hi), exact clamp away from the kinks."""
    x = asnode(x)
    return add(
        sub(relu(add(x, -float(lo))), relu(add(x, -float(hi)))),
        float(lo),
    )


def mse(a, b) -> Node:
    d = sub(asnode(a), asnode(b))
    return mean_all(mul(d, d))


def affine(x, weight, bias) -> Node:
    """x @ weight + bias for 2D x."""
    return add(matmul(x, weight), bias)

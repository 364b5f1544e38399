"""Trainable building blocks composed from the numerics primitive vocabulary.

Weight init is centered uniform scaled by 1/sqrt(fan_in). Blocks register
their Parameters so optimizers and gradient suites can enumerate them.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import Node, Parameter, leaf, ops
from .numerics.tensor import DTYPE, uniform_init


class Block:
    """Parameter registry base; children and parameters found by attribute."""

    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        stack = [self]
        while stack:
            obj = stack.pop()
            for value in vars(obj).values():
                if isinstance(value, Parameter):
                    if id(value) not in seen:
                        seen.add(id(value))
                        out.append(value)
                elif isinstance(value, Block):
                    stack.append(value)
                elif isinstance(value, (list, tuple)):
                    stack.extend(v for v in value if isinstance(v, Block))
        return out

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv2dLayer(Block):
    def __init__(self, in_ch, out_ch, k=3, stride=1, padding=None, bias=True,
                 rng=None, zero_init=False, name="conv"):
        self.stride = stride
        self.padding = (k // 2) if padding is None else padding
        fan_in = k * k * in_ch
        if zero_init:
            w = np.zeros((k, k, in_ch, out_ch), dtype=DTYPE)
        else:
            w = uniform_init(rng, (k, k, in_ch, out_ch), fan_in)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_ch, dtype=DTYPE), name=f"{name}.bias") if bias else None

    def __call__(self, x: Node) -> Node:
        b = leaf(self.bias) if self.bias is not None else None
        return ops.conv2d(x, leaf(self.weight), b, stride=self.stride, padding=self.padding)


class Linear(Block):
    def __init__(self, in_dim, out_dim, rng, zero_init=False, name="linear"):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=DTYPE)
        else:
            w = uniform_init(rng, (in_dim, out_dim), in_dim)
        self.weight = Parameter(w, name=f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=DTYPE), name=f"{name}.bias")

    def __call__(self, x: Node) -> Node:
        return ops.affine(x, leaf(self.weight), leaf(self.bias))


class ResBlock(Block):
    """conv-relu-conv with an identity skip; 1x1 shortcut on width change."""

    def __init__(self, in_ch, out_ch, rng, name="res"):
        self.conv1 = Conv2dLayer(in_ch, out_ch, rng=rng, name=f"{name}.conv1")
        self.conv2 = Conv2dLayer(out_ch, out_ch, rng=rng, name=f"{name}.conv2")
        self.short = (
            None
            if in_ch == out_ch
            else Conv2dLayer(in_ch, out_ch, k=1, padding=0, rng=rng, name=f"{name}.short")
        )

    def __call__(self, x: Node) -> Node:
        h = self.conv2(ops.relu(self.conv1(x)))
        skip = x if self.short is None else self.short(x)
        return ops.add(skip, h)


def _window_mask(hp, wp, h, w, ws):
    """Per-window additive key masks: 0 for real tokens, -1e9 for padding."""
    real = np.zeros((hp, wp), dtype=DTYPE)
    real[h:, :] = 1.0
    real[:, w:] = 1.0
    masks = {}
    for wi in range(hp // ws):
        for wj in range(wp // ws):
            tile = real[wi * ws : (wi + 1) * ws, wj * ws : (wj + 1) * ws]
            masks[(wi, wj)] = (-1e9 * tile.reshape(-1)).astype(DTYPE)
    return masks


class WindowAttention(Block):
    """Non-overlapping local-window attention; window >= map means dense.

    With ``kv`` given, queries come from ``x`` and keys/values from the
    co-located window of ``kv`` (cross-attention).
    """

    def __init__(self, dim, window, rng, heads=1, name="attn"):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.window = window
        self.heads = heads
        self.dim = dim
        self.q = Linear(dim, dim, rng, name=f"{name}.q")
        self.k = Linear(dim, dim, rng, name=f"{name}.k")
        self.v = Linear(dim, dim, rng, name=f"{name}.v")
        self.out = Linear(dim, dim, rng, name=f"{name}.out")
        self.captured_attn = None  # set to a list to record softmax outputs

    def _attend(self, q: Node, k: Node, v: Node, mask: np.ndarray) -> Node:
        dh = self.dim // self.heads
        outs = []
        for h in range(self.heads):
            sl = (slice(None), slice(h * dh, (h + 1) * dh))
            qh, kh, vh = ops.slice_(q, sl), ops.slice_(k, sl), ops.slice_(v, sl)
            logits = ops.scale(ops.matmul(qh, ops.transpose(kh, (1, 0))), 1.0 / math.sqrt(dh))
            if mask.any():
                logits = ops.add(logits, mask[None, :])
            attn = ops.softmax_last(logits)
            if self.captured_attn is not None:
                self.captured_attn.append(attn.value.copy())
            outs.append(ops.matmul(attn, vh))
        return outs[0] if len(outs) == 1 else ops.concat(outs, axis=-1)

    def __call__(self, x: Node, kv: Node | None = None) -> Node:
        h, w, c = x.value.shape
        ws = min(self.window, max(h, w))
        hp = math.ceil(h / ws) * ws
        wp = math.ceil(w / ws) * ws
        src = x if kv is None else kv
        xp = ops.pad2d(x, 0, hp - h, 0, wp - w)
        sp = xp if kv is None else ops.pad2d(src, 0, hp - h, 0, wp - w)
        masks = _window_mask(hp, wp, h, w, ws)

        rows = []
        for wi in range(hp // ws):
            cols = []
            for wj in range(wp // ws):
                key = (slice(wi * ws, (wi + 1) * ws), slice(wj * ws, (wj + 1) * ws))
                xt = ops.reshape(ops.slice_(xp, key), (ws * ws, c))
                st = xt if kv is None else ops.reshape(ops.slice_(sp, key), (ws * ws, c))
                got = self._attend(self.q(xt), self.k(st), self.v(st), masks[(wi, wj)])
                cols.append(ops.reshape(self.out(got), (ws, ws, c)))
            rows.append(cols[0] if len(cols) == 1 else ops.concat(cols, axis=1))
        full = rows[0] if len(rows) == 1 else ops.concat(rows, axis=0)
        if hp != h or wp != w:
            full = ops.slice_(full, (slice(0, h), slice(0, w)))
        return full


class SelfAttention2d(Block):
    """Dense self-attention over all spatial positions of an HWC map."""

    def __init__(self, dim, rng, name="sattn"):
        self.inner = WindowAttention(dim, window=1 << 30, rng=rng, name=name)

    def __call__(self, x: Node) -> Node:
        return self.inner(x)


class UNet(Block):
    """Encoder-decoder over HWC maps.

    ``stages`` resolution levels (stages-1 downsamplings), channel widths
    base*mults, optional dense self-attention on the bottleneck, bilinear
    upsampling with skip concatenation on the way back up. ``zero_init_out``
    makes the whole net output exactly zero at init.
    """

    def __init__(self, in_ch, base, mults, out_ch, rng, attn_bottleneck=True,
                 zero_init_out=False, name="unet"):
        if len(mults) < 1:
            raise ValueError("need at least one stage")
        widths = [base * m for m in mults]
        self.stem = Conv2dLayer(in_ch, widths[0], rng=rng, name=f"{name}.stem")
        self.enc = [
            ResBlock(widths[i], widths[i], rng, name=f"{name}.enc{i}")
            for i in range(len(widths))
        ]
        self.down = [
            Conv2dLayer(widths[i], widths[i + 1], stride=2, rng=rng, name=f"{name}.down{i}")
            for i in range(len(widths) - 1)
        ]
        self.mid = ResBlock(widths[-1], widths[-1], rng, name=f"{name}.mid")
        self.attn = SelfAttention2d(widths[-1], rng, name=f"{name}.attn") if attn_bottleneck else None
        self.fuse = [
            Conv2dLayer(widths[i + 1] + widths[i], widths[i], k=1, padding=0, rng=rng,
                        name=f"{name}.fuse{i}")
            for i in range(len(widths) - 1)
        ]
        self.dec = [
            ResBlock(widths[i], widths[i], rng, name=f"{name}.dec{i}")
            for i in range(len(widths) - 1)
        ]
        self.head = Conv2dLayer(widths[0], out_ch, rng=rng, zero_init=zero_init_out,
                                name=f"{name}.head")
        if zero_init_out:
            pass  # head weight and bias start at zero; output is exactly zero

    def __call__(self, x: Node) -> Node:
        h = self.stem(x)
        skips = []
        for i, enc in enumerate(self.enc):
            h = enc(h)
            skips.append(h)
            if i < len(self.down):
                h = self.down[i](h)
        h = self.mid(h)
        if self.attn is not None:
            h = ops.add(h, self.attn(ops.normalize(h, "standard")))
        for i in reversed(range(len(self.fuse))):
            target = skips[i].value.shape
            h = ops.upsample_bilinear(h, target[0], target[1])
            h = self.fuse[i](ops.concat([h, skips[i]], axis=-1))
            h = self.dec[i](h)
        return self.head(h)

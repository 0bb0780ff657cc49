"""Differentiable operations over `Tensor`.

Each op computes its forward value with numpy and, when a graph is
active and any input participates in differentiation, records a node
whose backward rule maps the upstream gradient to per-input gradients.

Shape discipline is deliberately narrow: dense tensors, no broadcasting
except bias addition along the batch axis (`bias_add`, conv bias).
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, DegenerateBatchError, DimensionError
from .tensor import Graph, Tensor, participates

BCE_EPS = 1e-7


def _apply(kind, inputs, out_data, bwd) -> Tensor:
    out = Tensor(out_data)
    g = Graph.active()
    if g is not None and any(participates(t) for t in inputs):
        g.record(kind, inputs, out, bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product [m,k] @ [k,n] -> [m,n]."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    a_data, b_data = a.data, b.data

    def bwd(gout):
        return gout @ b_data.T, a_data.T @ gout

    return _apply("matmul", (a, b), a_data @ b_data, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a rank-1 bias to every row of a [batch, n] tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"bias_add: incompatible shapes {x.data.shape} and {b.data.shape}")

    def bwd(gout):
        return gout, gout.sum(axis=0)

    return _apply("bias_add", (x, b), x.data + b.data, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def bwd(gout):
        return gout, gout

    return _apply("add", (a, b), a.data + b.data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data

    def bwd(gout):
        return gout * b_data, gout * a_data

    return _apply("mul", (a, b), a_data * b_data, bwd)


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Two-branch form avoids exp overflow for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_array(x.data)

    def bwd(gout):
        return (gout * s * (1.0 - s),)

    return _apply("sigmoid", (x,), s, bwd)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def bwd(gout):
        return (gout * (1.0 - t * t),)

    return _apply("tanh", (x,), t, bwd)


def relu(x: Tensor) -> Tensor:
    x_data = x.data

    def bwd(gout):
        return (gout * (x_data > 0),)

    return _apply("relu", (x,), np.maximum(x_data, 0.0), bwd)


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "add": add, "mul": mul}


def elementwise(kind: str, *operands: Tensor) -> Tensor:
    """Dispatch to a named elementwise op: sigmoid|tanh|relu|add|mul."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ConfigurationError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature axis: rank-1 vectors or [batch, n] rows."""
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat: rank mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.ndim == 1:
        m = a.data.shape[0]
        axis = 0
    elif a.data.ndim == 2:
        if a.data.shape[0] != b.data.shape[0]:
            raise DimensionError(f"concat: batch mismatch {a.data.shape} vs {b.data.shape}")
        m = a.data.shape[1]
        axis = 1
    else:
        raise DimensionError(f"concat: unsupported rank {a.data.ndim}")

    def bwd(gout):
        if axis == 0:
            return gout[:m], gout[m:]
        return gout[:, :m], gout[:, m:]

    return _apply("concat", (a, b), np.concatenate([a.data, b.data], axis=axis), bwd)


def concat_rows(parts: list[Tensor]) -> Tensor:
    """Stack [b_i, n] tensors along the batch axis -> [sum(b_i), n]."""
    if not parts:
        raise DimensionError("concat_rows: empty part list")
    n = parts[0].data.shape[1]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[1] != n:
            raise DimensionError(f"concat_rows: expected [*, {n}], got {p.data.shape}")
    sizes = [p.data.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(gout):
        return tuple(gout[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _apply("concat_rows", tuple(parts), np.concatenate([p.data for p in parts], axis=0), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice of a [batch, n] tensor; backward scatters into zeros."""
    if x.data.ndim != 2:
        raise DimensionError(f"slice_cols: expected rank 2, got {x.data.shape}")
    shape = x.data.shape

    def bwd(gout):
        g = np.zeros(shape)
        g[:, start:stop] = gout
        return (g,)

    return _apply("slice_cols", (x,), x.data[:, start:stop].copy(), bwd)


def squeeze_row(x: Tensor) -> Tensor:
    """[1, n] -> [n]."""
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise DimensionError(f"squeeze_row: expected a single-row tensor, got {x.data.shape}")

    def bwd(gout):
        return (gout[None],)

    return _apply("squeeze_row", (x,), x.data[0].copy(), bwd)


def unsqueeze_row(x: Tensor) -> Tensor:
    """[n] -> [1, n]."""
    if x.data.ndim != 1:
        raise DimensionError(f"unsqueeze_row: expected rank 1, got {x.data.shape}")

    def bwd(gout):
        return (gout[0],)

    return _apply("unsqueeze_row", (x,), x.data[None].copy(), bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape

    def bwd(gout):
        return (np.full(shape, float(gout)),)

    return _apply("sum_all", (x,), np.sum(x.data), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[batch, c, h, w] -> [batch, c] spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected rank 4, got {x.data.shape}")
    h, w = x.data.shape[2], x.data.shape[3]
    shape = x.data.shape

    def bwd(gout):
        return (np.broadcast_to(gout[:, :, None, None] / (h * w), shape),)

    return _apply("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, h_out: int, w_out: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, h_out, w_out),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(b, c * kh * kw, h_out * w_out)


def conv2d(x: Tensor, kernels: Tensor, stride: int = 1, bias: Tensor | None = None) -> Tensor:
    """Strided cross-correlation with symmetric zero padding of (k-1)/2.

    `x` is [c_in, h, w] or [batch, c_in, h, w]; `kernels` is
    [c_out, c_in, kh, kw] with odd kh/kw. Optional [c_out] bias.
    """
    if kernels.data.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be rank 4, got {kernels.data.shape}")
    c_out, c_in, kh, kw = kernels.data.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: even kernel size {kh}x{kw} is unsupported")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")

    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise DimensionError(
            f"conv2d: input shape {x.data.shape} incompatible with kernels {kernels.data.shape}"
        )
    b, _, h, w = xd.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w + 2 * pw - kw) // stride + 1

    xp = np.zeros((b, c_in, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = xd
    cols = _im2col(xp, kh, kw, stride, h_out, w_out)  # [b, ckk, n]
    wmat = kernels.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols).reshape(b, c_out, h_out, w_out)
    if bias is not None:
        if bias.data.shape != (c_out,):
            raise DimensionError(f"conv2d: bias shape {bias.data.shape}, expected ({c_out},)")
        out = out + bias.data[None, :, None, None]

    padded_shape = xp.shape
    has_bias = bias is not None

    def bwd(gout):
        if squeeze:
            gout = gout[None]
        go = gout.reshape(b, c_out, h_out * w_out)
        gw = np.matmul(go, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernels.data.shape)
        gcols = np.matmul(wmat.T, go).reshape(b, c_in, kh, kw, h_out, w_out)
        gxp = np.zeros(padded_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if squeeze:
            gx = gx[0]
        gb = gout.sum(axis=(0, 2, 3)) if has_bias else None
        return (gx, gw, gb) if has_bias else (gx, gw)

    inputs = (x, kernels, bias) if has_bias else (x, kernels)
    return _apply("conv2d", inputs, out[0] if squeeze else out, bwd)


def bce_loss(predictions: Tensor, targets: Tensor, mask: Tensor | None = None) -> Tensor:
    """Mean binary cross-entropy over unmasked entries.

    Predictions are clamped to [eps, 1-eps] before the logs; a mask entry
    of 0 removes that slot from both the sum and the count.
    """
    p, y = predictions.data, targets.data
    if p.shape != y.shape:
        raise DimensionError(f"bce_loss: shape mismatch {p.shape} vs {y.shape}")
    if mask is not None and mask.data.shape != p.shape:
        raise DimensionError(f"bce_loss: mask shape {mask.data.shape} vs {p.shape}")
    m = mask.data if mask is not None else None

    count = float(m.sum()) if m is not None else float(p.size)
    if count == 0:
        raise DegenerateBatchError("bce_loss: every entry is masked out")

    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    terms = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    if m is not None:
        loss = float((terms * m).sum()) / count
    else:
        loss = float(terms.sum()) / count

    def bwd(gout):
        # Clamped entries sit on a constant branch: no gradient flows there.
        inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
        gp = (-(y / pc) + (1.0 - y) / (1.0 - pc)) * inside / count
        if m is not None:
            gp = gp * m
        gp = gp * float(gout)
        return (gp, None) if m is None else (gp, None, None)

    inputs = (predictions, targets) if m is None else (predictions, targets, mask)
    return _apply("bce_loss", inputs, np.float64(loss), bwd)

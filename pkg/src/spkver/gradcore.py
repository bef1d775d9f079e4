"""A small reverse-mode autodiff engine over numpy arrays.

Ops only record onto a :class:`Tape` while one is active, so evaluation code
pays nothing for the graph::

    with Tape() as tape:
        loss = tsum(mul(x, x))
    tape.backward(loss)      # x.grad == 2 * x.data

A tape can be consumed by exactly one backward pass.
"""

from __future__ import annotations

import json
import struct
import threading
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError, ShapeError, TapeError

_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops; records are already in topological order."""

    def __init__(self):
        self.records = []
        self.consumed = False

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.remove(self)
        return False

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        out._tape = self
        self.records.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        if self.consumed:
            raise TapeError("backward called twice on the same tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self.consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, backward_fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = backward_fn(g)
            for t, gi in zip(inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._tape is self:
                    key = id(t)
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
        self.records.clear()


def make_op(data, inputs, backward_fn, name=None):
    """Wrap ``data`` as the output of an op; record it when a tape is active.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {name or 'op'}")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward_fn)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise -------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return make_op(out, (x,), lambda g: (g * (out > 0),), "relu")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(x: Tensor, c: float) -> Tensor:
    return make_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def tsum(x: Tensor) -> Tensor:
    return make_op(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def reshape(x: Tensor, shape) -> Tensor:
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


# -- dense -------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` for x [N, D], w [K, D], b [K]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} does not match w {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data
        gw = g.T @ x.data
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(out, inputs, backward, "linear")


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by max(||row||, eps)."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize expects [N, D], got {x.shape}")
    norm = np.linalg.norm(x.data, axis=1, keepdims=True)
    clipped = norm > eps
    denom = np.where(clipped, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = np.sum(y * g, axis=1, keepdims=True)
        return (np.where(clipped, (g - y * proj) / denom, g / eps),)

    return make_op(y, (x,), backward, "l2_normalize")


# -- convolution -------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x [N, C, H, W] with w [O, C, kH, kW]."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match w {w.shape}")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: input {H}x{W} too small for kernel {kh}x{kw}")

    # channel-major copy so every kernel tap is a plain tensordot
    xc = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3))
    if pad:
        xc = np.pad(xc, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hspan, wspan = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1

    def tap(i, j):
        return xc[:, :, i : i + hspan : stride, j : j + wspan : stride]

    out = np.zeros((O, N, Ho, Wo), dtype=np.result_type(x.data, w.data))
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w.data[:, :, i, j], tap(i, j), axes=([1], [0]))
    if b is not None:
        out += b.data[:, None, None, None]
    result = out.transpose(1, 0, 2, 3)

    def backward(g):
        gc = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        gw = np.empty_like(w.data)
        gxc = np.zeros_like(xc) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gw[:, :, i, j] = np.tensordot(gc, tap(i, j), axes=([1, 2, 3], [1, 2, 3]))
                if gxc is not None:
                    gxc[:, :, i : i + hspan : stride, j : j + wspan : stride] += np.tensordot(
                        w.data[:, :, i, j], gc, axes=([0], [0])
                    )
        gx = None
        if gxc is not None:
            if pad:
                gxc = gxc[:, :, pad : pad + H, pad : pad + W]
            gx = gxc.transpose(1, 0, 2, 3)
        if b is None:
            return gx, gw
        return gx, gw, gc.sum(axis=(1, 2, 3))

    inputs = (x, w) if b is None else (x, w, b)
    return make_op(np.ascontiguousarray(result), inputs, backward, "conv2d")


# -- batch norm --------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch norm over (N, H, W).

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place as ``(1 - momentum) * old + momentum * batch``,
    using the unbiased batch variance for the running estimate.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm2d: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    C = x.shape[1]
    g_ = gamma.data.reshape(1, C, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        mul_ = (gamma.data * inv).reshape(1, C, 1, 1)
        xhat = (x.data - running_mean.reshape(1, C, 1, 1)) * inv.reshape(1, C, 1, 1)
        out = x.data * mul_ + (beta.data - running_mean * gamma.data * inv).reshape(1, C, 1, 1)

        def backward_eval(g):
            return g * mul_, np.sum(g * xhat, axis=(0, 2, 3)), np.sum(g, axis=(0, 2, 3))

        return make_op(out, (x, gamma, beta), backward_eval, "batchnorm2d")

    m = x.data.size // C
    if m == 0:
        raise ValueError("batchnorm2d: empty batch in training mode")
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, C, 1, 1)
    var = np.mean(centered**2, axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv.reshape(1, C, 1, 1)
    out = xhat * g_ + beta.data.reshape(1, C, 1, 1)

    running_mean *= 1.0 - momentum
    running_mean += momentum * mean
    unbiased = var * m / (m - 1) if m > 1 else var
    running_var *= 1.0 - momentum
    running_var += momentum * unbiased

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = np.sum(g * xhat, axis=(0, 2, 3))
        gxhat = g * g_
        gx = (inv.reshape(1, C, 1, 1) / m) * (
            m * gxhat
            - gxhat.sum(axis=(0, 2, 3)).reshape(1, C, 1, 1)
            - xhat * np.sum(gxhat * xhat, axis=(0, 2, 3)).reshape(1, C, 1, 1)
        )
        return gx, ggamma, gbeta

    return make_op(out, (x, gamma, beta), backward, "batchnorm2d")


# -- checkpoint container ----------------------------------------------------

CKPT_MAGIC = b"SPKCKPT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def save_container(path, tensors: dict, metadata: dict | None = None) -> None:
    """Write named arrays plus a JSON metadata block.

    Layout (little-endian): magic, u64 metadata length, metadata JSON, u32 count,
    then per tensor: u32 name length, name, u8 dtype code, u32 ndim, u64 dims, data.
    """
    meta = json.dumps(metadata or {}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BI", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_container(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    pos = 8
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    metadata = json.loads(blob[pos : pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos : pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BI", blob, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).astype(dt.newbyteorder("="))
        pos += n * dt.itemsize
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes in container")
    return tensors, metadata

"""Reverse-mode automatic differentiation on float64 numpy buffers.

Ops record onto an active ``Tape`` whenever an input requires gradients.
Every backward rule is itself written in terms of the recorded ops, so a
reverse sweep run with ``create_graph=True`` appends its own computation to
the tape and the returned gradients stay differentiable (gradients of
gradients, as needed by variance-of-gradient penalties).

Broadcasting is limited to size-1 axes; anything else raises ``ShapeError``.
All data is float64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class GradError(ValueError):
    """Invalid differentiation request (e.g. non-scalar output)."""


_ACTIVE_TAPE = None
_RECORDING = True


class Tape:
    """Ordered record of primitive ops, replayable in reverse for gradients.

    Used as a context manager; ops executed inside the block are recorded
    when any of their inputs requires gradients.
    """

    def __init__(self):
        self.entries = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class _NoRecord:
    def __enter__(self):
        global _RECORDING
        self._saved = _RECORDING
        _RECORDING = False

    def __exit__(self, *exc):
        global _RECORDING
        _RECORDING = self._saved
        return False


def no_record():
    """Context that evaluates ops without recording them."""
    return _NoRecord()


class _Entry:
    __slots__ = ("inputs", "output", "vjp")

    def __init__(self, inputs, output, vjp):
        self.inputs = inputs
        self.output = output
        self.vjp = vjp  # called as vjp(grad_out, out); out is the recorded output


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_tape", "_entry_index")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._entry_index = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __getitem__(self, key):
        return tslice(self, key)

    def reshape(self, shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _should_record(inputs):
    return (
        _ACTIVE_TAPE is not None
        and _RECORDING
        and any(t.requires_grad for t in inputs)
    )


def _emit(inputs, out_data, vjp):
    out = Tensor(out_data)
    if _should_record(inputs):
        out.requires_grad = True
        out._tape = _ACTIVE_TAPE
        _ACTIVE_TAPE.entries.append(_Entry(tuple(inputs), out, vjp))
        out._entry_index = len(_ACTIVE_TAPE.entries) - 1
    return out


def _check_broadcast(a_shape, b_shape):
    try:
        return np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {a_shape} with {b_shape}") from None


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to ``shape`` (sum over expanded axes)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.data.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and grad.shape[i + extra] != 1
    )
    g = tsum(grad, axis=axes, keepdims=False) if axes else grad
    return reshape(g, shape)


# -- elementwise binary ops -------------------------------------------


def add(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g, out):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit([a, b], a.data + b.data, vjp)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g, out):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _emit([a, b], a.data - b.data, vjp)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g, out):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _emit([a, b], a.data * b.data, vjp)


def div(a, b):
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape)

    def vjp(g, out):
        ga = _unbroadcast(div(g, b), a.shape)
        gb = _unbroadcast(neg(div(mul(g, out), b)), b.shape)
        return ga, gb

    return _emit([a, b], a.data / b.data, vjp)


def neg(a):
    a = _lift(a)

    def vjp(g, out):
        return (neg(g),)

    return _emit([a], -a.data, vjp)


# -- linear algebra ----------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul expects compatible 2D operands, got {a.shape} @ {b.shape}")

    def vjp(g, out):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _emit([a, b], a.data @ b.data, vjp)


def transpose(a):
    a = _lift(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose expects a 2D tensor")

    def vjp(g, out):
        return (transpose(g),)

    return _emit([a], a.data.T.copy(), vjp)


# -- structural ops ----------------------------------------------------


def reshape(a, shape):
    a = _lift(a)
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if not isinstance(shape, tuple) else shape
    old = a.shape

    def vjp(g, out):
        return (reshape(g, old),)

    return _emit([a], a.data.reshape(shape), vjp)


def concat(tensors, axis=0):
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty list")
    sizes = [t.shape[axis] for t in ts]

    def vjp(g, out):
        grads, off = [], 0
        for n in sizes:
            key = [slice(None)] * g.data.ndim
            key[axis] = slice(off, off + n)
            grads.append(tslice(g, tuple(key)))
            off += n
        return tuple(grads)

    return _emit(ts, np.concatenate([t.data for t in ts], axis=axis), vjp)


def tslice(a, key):
    """Basic slicing (ints and slices only, so the vjp scatter never overlaps)."""
    a = _lift(a)
    full_shape = a.shape

    def vjp(g, out):
        return (_unslice(g, key, full_shape),)

    return _emit([a], a.data[key].copy(), vjp)


def _unslice(g, key, shape):
    g = _lift(g)

    def vjp(gg, out):
        return (tslice(gg, key),)

    out = np.zeros(shape, dtype=np.float64)
    out[key] = g.data
    return _emit([g], out, vjp)


def gather_rows(a, index):
    """Select rows ``a[index]`` along axis 0; index is a constant int array."""
    a = _lift(a)
    idx = np.asarray(index, dtype=np.int64)
    n_rows = a.shape[0]

    def vjp(g, out):
        return (scatter_rows(g, idx, n_rows),)

    return _emit([a], a.data[idx], vjp)  # fancy indexing already copies


def scatter_rows(a, index, n_rows):
    """Sum rows of ``a`` into ``n_rows`` output slots given by ``index``."""
    a = _lift(a)
    idx = np.asarray(index, dtype=np.int64)

    def vjp(g, out):
        return (gather_rows(g, idx),)

    out = np.zeros((int(n_rows),) + a.shape[1:], dtype=np.float64)
    np.add.at(out, idx, a.data)
    return _emit([a], out, vjp)


def _expand(a, shape):
    """Broadcast size-1 axes of ``a`` up to ``shape``."""
    a = _lift(a)
    target = tuple(int(s) for s in shape)
    if _check_broadcast(a.shape, target) != target:
        raise ShapeError(f"cannot expand {a.shape} to {target}")
    src = a.shape

    def vjp(g, out):
        return (_unbroadcast(g, src),)

    return _emit([a], np.broadcast_to(a.data, target).copy(), vjp)


# -- reductions --------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    src_shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src_shape))

    def vjp(g, out):
        gk = reshape(g, kept) if not keepdims else g
        return (_expand(gk, src_shape),)

    return _emit([a], np.sum(a.data, axis=axes or None, keepdims=keepdims), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _lift(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def variance(a):
    """Population variance over all elements (composed, hence differentiable
    to any order)."""
    a = _lift(a)
    centered = sub(a, _expand(reshape(tmean(a), (1,) * a.data.ndim), a.shape))
    return tmean(square(centered))


# -- elementwise nonlinearities ----------------------------------------


def tanh(a):
    a = _lift(a)

    def vjp(g, out):
        return (mul(g, sub(1.0, square(out))),)

    return _emit([a], np.tanh(a.data), vjp)


def sigmoid(a):
    a = _lift(a)
    z = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))

    def vjp(g, out):
        return (mul(g, mul(out, sub(1.0, out))),)

    return _emit([a], out_data, vjp)


def relu(a):
    a = _lift(a)
    mask = Tensor((a.data > 0).astype(np.float64))

    def vjp(g, out):
        return (mul(g, mask),)

    return _emit([a], np.maximum(a.data, 0.0), vjp)


def softplus(a):
    a = _lift(a)

    def vjp(g, out):
        return (mul(g, sigmoid(a)),)

    return _emit([a], np.logaddexp(0.0, a.data), vjp)


def softmax(a):
    """Softmax over the last axis."""
    a = _lift(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def vjp(g, out):
        gy = mul(g, out)
        return (sub(gy, mul(out, tsum(gy, axis=-1, keepdims=True))),)

    return _emit([a], out_data, vjp)


def square(a):
    a = _lift(a)

    def vjp(g, out):
        return (mul(g, mul(a, 2.0)),)

    return _emit([a], np.square(a.data), vjp)


def sqrt(a):
    a = _lift(a)

    def vjp(g, out):
        return (div(mul(g, 0.5), out),)

    return _emit([a], np.sqrt(a.data), vjp)


# -- differentiation ---------------------------------------------------


def grad(output, wrt, create_graph=False, through=None):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the reverse sweep is itself recorded on the
    active tape, so the returned gradients can be differentiated again.
    Tensors unreachable from ``output`` get a zero gradient.

    ``through`` optionally restricts the sweep to entries whose value
    depends on one of the given tensors. Adjoints can only reach those
    tensors along such entries (dependence is transitive), so the result
    is exact while skipping unrelated branches of the tape.
    """
    if output.size != 1:
        raise GradError(f"grad expects a scalar output, got shape {output.shape}")
    adjoints = {id(output): Tensor(np.ones(output.shape))}
    tape = output._tape
    entries = tape.entries[: output._entry_index + 1] if tape is not None else []

    dependent = None
    if through is not None:
        dependent = {id(t) for t in through}
        for entry in entries:
            if any(id(inp) in dependent for inp in entry.inputs):
                dependent.add(id(entry.output))

    ctx = _NoRecord() if not create_graph else _NullCtx()
    with ctx:
        for entry in reversed(entries):
            if dependent is not None and id(entry.output) not in dependent:
                continue
            g_out = adjoints.get(id(entry.output))
            if g_out is None:
                continue
            contribs = entry.vjp(g_out, entry.output)
            for inp, c in zip(entry.inputs, contribs):
                if not inp.requires_grad or c is None:
                    continue
                if dependent is not None and id(inp) not in dependent:
                    continue
                prev = adjoints.get(id(inp))
                adjoints[id(inp)] = c if prev is None else add(prev, c)

    result = []
    for w in wrt:
        g = adjoints.get(id(w))
        result.append(g if g is not None else Tensor(np.zeros(w.shape)))
    return result


class _NullCtx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# -- parameter checkpoint format ----------------------------------------

_MAGIC = "oxyrecon-params-v1"


def save_params(path_prefix, params, extra=None):
    """Write a JSON manifest (names, shapes) plus a little-endian f64 blob.

    ``params`` maps name -> Tensor or ndarray; iteration order is preserved
    in both files. Returns (manifest_path, blob_path).
    """
    prefix = Path(path_prefix)
    manifest = {"format": _MAGIC, "params": [], "extra": extra or {}}
    blob = bytearray()
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
        manifest["params"].append({"name": name, "shape": list(arr.shape)})
        blob.extend(struct.pack(f"<{arr.size}d", *arr.ravel().tolist()))
    mpath = prefix.with_suffix(".json")
    bpath = prefix.with_suffix(".bin")
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    bpath.write_bytes(bytes(blob))
    return mpath, bpath


def load_params(path_prefix, requires_grad=False):
    """Inverse of :func:`save_params`; returns (params dict, extra dict)."""
    prefix = Path(path_prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("format") != _MAGIC:
        raise ValueError(f"not a parameter checkpoint: {prefix}")
    raw = prefix.with_suffix(".bin").read_bytes()
    params, off = {}, 0
    for spec in manifest["params"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        vals = struct.unpack_from(f"<{n}d", raw, off)
        off += 8 * n
        params[spec["name"]] = Tensor(
            np.array(vals, dtype=np.float64).reshape(shape), requires_grad=requires_grad
        )
    return params, manifest.get("extra", {})

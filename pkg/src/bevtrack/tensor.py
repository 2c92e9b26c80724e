"""Minimal dense tensor library with reverse-mode automatic differentiation.

Provides exactly the operators the BEV detection networks need: 2D/3D
convolution, a shared-weight temporal collapse, max-pooling, sigmoid/relu,
the two loss terms, and Adam. Everything is float64 and single-threaded;
tensors are immutable values once created.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"BTCK"
CHECKPOINT_VERSION = 1


class TensorError(ValueError):
    """Raised on shape mismatches, domain violations and tape misuse."""


class Tensor:
    """Dense float64 array recorded (optionally) on a gradient tape."""

    __slots__ = ("data", "tape", "grad", "_parents", "_vjp", "name")

    def __init__(self, data, tape=None, parents=(), vjp=None, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.tape = tape
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.name = name
        if tape is not None:
            tape._record(self)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tape={self.tape is not None})"


class Tape:
    """Ordered record of a forward pass; replayed backward exactly once."""

    def __init__(self):
        self._nodes = []
        self._consumed = False
        self.param_grads = {}

    def _record(self, tensor):
        if self._consumed:
            raise TensorError("tape already consumed by backward()")
        self._nodes.append(tensor)

    def parameter(self, name, value):
        t = Tensor(value, tape=self, name=name)
        return t


def _result_tape(*tensors):
    tapes = {id(t.tape): t.tape for t in tensors if isinstance(t, Tensor) and t.tape is not None}
    if len(tapes) > 1:
        raise TensorError("operands recorded on different tapes")
    return next(iter(tapes.values())) if tapes else None


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def backward(loss, tape):
    """Accumulate d(loss)/d(t) for every tensor on the tape.

    Parameter gradients end up in ``tape.param_grads`` keyed by name.
    A second call on the same tape is rejected.
    """
    if not isinstance(loss, Tensor) or loss.tape is not tape:
        raise TensorError("backward() target was not recorded on this tape")
    if tape._consumed:
        raise TensorError("backward() called twice on the same tape")
    if loss.data.size != 1:
        raise TensorError("backward() requires a scalar loss")
    tape._consumed = True

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        if node.grad is None or node._vjp is None:
            continue
        for parent, pgrad in zip(node._parents, node._vjp(node.grad)):
            if pgrad is None:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += pgrad
    for node in tape._nodes:
        if node.name is not None:
            tape.param_grads[node.name] = (
                node.grad if node.grad is not None else np.zeros_like(node.data)
            )
    return tape.param_grads


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def _unary(x, fwd, make_vjp):
    tape = _result_tape(x)
    y = fwd(_as_array(x))
    if tape is None:
        return Tensor(y)
    return Tensor(y, tape=tape, parents=(x,), vjp=make_vjp(_as_array(x), y))


def relu(x):
    def make(xd, y):
        return lambda g: ((xd > 0.0) * g,)

    return _unary(x, lambda d: np.maximum(d, 0.0), make)


def sigmoid(x):
    def fwd(d):
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    def make(xd, y):
        return lambda g: (y * (1.0 - y) * g,)

    return _unary(x, fwd, make)


def add(a, b):
    tape = _result_tape(a, b)
    ad, bd = _as_array(a), _as_array(b)
    if ad.shape != bd.shape:
        raise TensorError(f"add shape mismatch {ad.shape} vs {bd.shape}")
    y = ad + bd
    if tape is None:
        return Tensor(y)
    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    grads = lambda g: tuple(g for t in (a, b) if isinstance(t, Tensor))
    return Tensor(y, tape=tape, parents=parents, vjp=grads)


def mul(a, b):
    tape = _result_tape(a, b)
    ad, bd = _as_array(a), _as_array(b)
    if ad.shape != bd.shape:
        raise TensorError(f"mul shape mismatch {ad.shape} vs {bd.shape}")
    y = ad * bd

    if tape is None:
        return Tensor(y)

    def vjp(g):
        out = []
        if isinstance(a, Tensor):
            out.append(g * bd)
        if isinstance(b, Tensor):
            out.append(g * ad)
        return tuple(out)

    parents = tuple(t for t in (a, b) if isinstance(t, Tensor))
    return Tensor(y, tape=tape, parents=parents, vjp=vjp)


def scale(x, c):
    c = float(c)

    def make(xd, y):
        return lambda g: (c * g,)

    return _unary(x, lambda d: c * d, make)


def tensor_sum(x):
    def make(xd, y):
        return lambda g: (np.full_like(xd, float(g.reshape(()))),)

    return _unary(x, lambda d: np.asarray(d.sum()), make)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)
    xd = _as_array(x)
    if int(np.prod(shape)) != xd.size:
        raise TensorError(f"cannot reshape {xd.shape} to {shape}")

    def make(orig, y):
        return lambda g: (g.reshape(orig.shape),)

    return _unary(x, lambda d: d.reshape(shape), make)


# ---------------------------------------------------------------------------
# convolution


def _im2col(x, kh, kw, stride, pad):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # [C, oh, ow, kh, kw]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, oh * ow)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(cols, x_shape, kh, kw, stride, pad, oh, ow):
    c, h, w = x_shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, i : i + oh * stride : stride, j : j + ow * stride : stride] += cols[:, i, j]
    if pad:
        return xp[:, pad : pad + h, pad : pad + w]
    return xp


def conv2d(x, weights, bias, stride=1, pad=0):
    """Cross-correlation of [C_in,H,W] with [C_out,C_in,kH,kW] plus bias."""
    xd, wd, bd = _as_array(x), _as_array(weights), _as_array(bias)
    if xd.ndim != 3:
        raise TensorError(f"conv2d input must be [C,H,W], got {xd.shape}")
    if wd.ndim != 4:
        raise TensorError(f"conv2d weights must be [C_out,C_in,kH,kW], got {wd.shape}")
    c_out, c_in, kh, kw = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[0] != c_in:
        raise TensorError(f"conv2d channel mismatch: input C={xd.shape[0]}, weights C_in={c_in}")
    if bd.shape != (c_out,):
        raise TensorError(f"conv2d bias must have shape ({c_out},), got {bd.shape}")
    if stride < 1:
        raise TensorError("conv2d stride must be >= 1")
    _, h, w = xd.shape
    if (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise TensorError(f"conv2d output extent not integral for H={h}, W={w}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise TensorError(f"conv2d kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{w + 2 * pad}")

    cols, oh, ow = _im2col(xd, kh, kw, stride, pad)
    wmat = wd.reshape(c_out, c_in * kh * kw)
    y = (wmat @ cols).reshape(c_out, oh, ow) + bd[:, None, None]

    tape = _result_tape(x, weights, bias)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        gmat = g.reshape(c_out, oh * ow)
        out = []
        if isinstance(x, Tensor):
            gcols = wmat.T @ gmat
            out.append(_col2im(gcols, xd.shape, kh, kw, stride, pad, oh, ow))
        if isinstance(weights, Tensor):
            out.append((gmat @ cols.T).reshape(wd.shape))
        if isinstance(bias, Tensor):
            out.append(gmat.sum(axis=1))
        return tuple(out)

    parents = tuple(t for t in (x, weights, bias) if isinstance(t, Tensor))
    return Tensor(y, tape=tape, parents=parents, vjp=vjp)


def conv3d(x, weights, bias, spatial_pad=0):
    """Spatio-temporal cross-correlation; padding applies to H,W only.

    Input is [C_in,T,H,W]; the temporal extent shrinks by kT-1.
    """
    xd, wd, bd = _as_array(x), _as_array(weights), _as_array(bias)
    if xd.ndim != 4:
        raise TensorError(f"conv3d input must be [C,T,H,W], got {xd.shape}")
    if wd.ndim != 5:
        raise TensorError(f"conv3d weights must be [C_out,C_in,kT,kH,kW], got {wd.shape}")
    c_out, c_in, kt, kh, kw = wd.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError(f"conv3d spatial kernel extents must be odd, got {kh}x{kw}")
    if xd.shape[0] != c_in:
        raise TensorError(f"conv3d channel mismatch: input C={xd.shape[0]}, weights C_in={c_in}")
    c, t, h, w = xd.shape
    if t < kt:
        raise TensorError(f"conv3d needs temporal extent >= {kt}, got {t}")
    if bd.shape != (c_out,):
        raise TensorError(f"conv3d bias must have shape ({c_out},), got {bd.shape}")
    pad = spatial_pad
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise TensorError("conv3d spatial kernel exceeds padded input")

    t_out = t - kt + 1
    oh = h + 2 * pad - kh + 1
    ow = w + 2 * pad - kw + 1
    wmat = wd.transpose(0, 2, 1, 3, 4).reshape(c_out, kt, c_in * kh * kw)
    cols = [None] * t
    y = np.empty((c_out, t_out, oh, ow))
    for to in range(t_out):
        acc = np.zeros((c_out, oh * ow))
        for dt in range(kt):
            ti = to + dt
            if cols[ti] is None:
                cols[ti], _, _ = _im2col(xd[:, ti], kh, kw, 1, pad)
            acc += wmat[:, dt] @ cols[ti]
        y[:, to] = acc.reshape(c_out, oh, ow)
    y += bd[:, None, None, None]

    tape = _result_tape(x, weights, bias)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        out = []
        if isinstance(x, Tensor):
            gx = np.zeros_like(xd)
            for to in range(t_out):
                gmat = g[:, to].reshape(c_out, oh * ow)
                for dt in range(kt):
                    gcols = wmat[:, dt].T @ gmat
                    gx[:, to + dt] += _col2im(gcols, (c, h, w), kh, kw, 1, pad, oh, ow)
            out.append(gx)
        if isinstance(weights, Tensor):
            gw = np.zeros((c_out, kt, c_in * kh * kw))
            for to in range(t_out):
                gmat = g[:, to].reshape(c_out, oh * ow)
                for dt in range(kt):
                    gw[:, dt] += gmat @ cols[to + dt].T
            out.append(gw.reshape(c_out, kt, c_in, kh, kw).transpose(0, 2, 1, 3, 4))
        if isinstance(bias, Tensor):
            out.append(g.sum(axis=(1, 2, 3)))
        return tuple(out)

    parents = tuple(t_ for t_ in (x, weights, bias) if isinstance(t_, Tensor))
    return Tensor(y, tape=tape, parents=parents, vjp=vjp)


def temporal_group_conv(x, weights):
    """Weighted sum over the leading time axis, weights shared by all channels."""
    xd, wd = _as_array(x), _as_array(weights)
    if xd.ndim != 4:
        raise TensorError(f"temporal_group_conv input must be [T,C,H,W], got {xd.shape}")
    if wd.shape != (xd.shape[0],):
        raise TensorError(
            f"temporal weight count {wd.shape} does not match temporal extent {xd.shape[0]}"
        )
    y = np.tensordot(wd, xd, axes=(0, 0))

    tape = _result_tape(x, weights)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        out = []
        if isinstance(x, Tensor):
            out.append(wd[:, None, None, None] * g[None])
        if isinstance(weights, Tensor):
            out.append(np.tensordot(xd, g, axes=((1, 2, 3), (0, 1, 2))))
        return tuple(out)

    parents = tuple(t for t in (x, weights) if isinstance(t, Tensor))
    return Tensor(y, tape=tape, parents=parents, vjp=vjp)


def maxpool2d(x, k=2, stride=2):
    """Max pooling with floor truncation; gradient routes to the lowest-index max."""
    xd = _as_array(x)
    if xd.ndim != 3:
        raise TensorError(f"maxpool2d input must be [C,H,W], got {xd.shape}")
    if k != stride:
        raise TensorError("maxpool2d supports k == stride only")
    c, h, w = xd.shape
    oh, ow = h // k, w // k
    if oh == 0 or ow == 0:
        raise TensorError(f"maxpool2d window {k} exceeds input {h}x{w}")
    trimmed = xd[:, : oh * k, : ow * k]
    win = trimmed.reshape(c, oh, k, ow, k).transpose(0, 1, 3, 2, 4).reshape(c, oh, ow, k * k)
    arg = win.argmax(axis=3)  # first occurrence == lowest flat index
    y = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    tape = _result_tape(x)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        gx = np.zeros_like(xd)
        ci, oi, oj = np.meshgrid(np.arange(c), np.arange(oh), np.arange(ow), indexing="ij")
        hi = oi * k + arg // k
        wi = oj * k + arg % k
        np.add.at(gx, (ci, hi, wi), g)
        return (gx,)

    return Tensor(y, tape=tape, parents=(x,), vjp=vjp)


# ---------------------------------------------------------------------------
# losses


def bce_loss(p, q, mask):
    """Masked binary cross-entropy; p must lie strictly inside (0,1)."""
    pd = _as_array(p)
    qd = np.asarray(q, dtype=np.float64)
    md = np.asarray(mask, dtype=np.float64)
    if pd.shape != qd.shape or pd.shape != md.shape:
        raise TensorError(
            f"bce_loss shape mismatch: p{pd.shape} q{qd.shape} mask{md.shape}"
        )
    if np.any((pd <= 0.0) | (pd >= 1.0)):
        raise TensorError("bce_loss probabilities must lie strictly in (0,1)")
    y = -np.sum(md * (qd * np.log(pd) + (1.0 - qd) * np.log(1.0 - pd)))

    tape = _result_tape(p)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        s = float(np.asarray(g).reshape(()))
        return (s * md * ((1.0 - qd) / (1.0 - pd) - qd / pd),)

    return Tensor(np.asarray(y), tape=tape, parents=(p,), vjp=vjp)


def smooth_l1(pred, target, mask):
    """Masked sum of the huber-style penalty: 0.5 x^2 below 1, |x|-0.5 above."""
    pd = _as_array(pred)
    td = np.asarray(target, dtype=np.float64)
    md = np.asarray(mask, dtype=np.float64)
    if pd.shape != td.shape or pd.shape != md.shape:
        raise TensorError(
            f"smooth_l1 shape mismatch: pred{pd.shape} target{td.shape} mask{md.shape}"
        )
    d = pd - td
    small = np.abs(d) < 1.0
    phi = np.where(small, 0.5 * d * d, np.abs(d) - 0.5)
    y = np.sum(md * phi)

    tape = _result_tape(pred)
    if tape is None:
        return Tensor(y)

    def vjp(g):
        s = float(np.asarray(g).reshape(()))
        return (s * md * np.where(small, d, np.sign(d)),)

    return Tensor(np.asarray(y), tape=tape, parents=(pred,), vjp=vjp)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction; deterministic."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise TensorError(f"adam_step gradient shape mismatch for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params, config=None):
    """Write parameters (ordered) plus an optional config dict to one file.

    Layout: magic, version, length-prefixed JSON header, then raw
    little-endian float64 data in header order. Byte-exact round trip.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "params": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
        "config": config,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for v in params.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (params dict in saved order, config)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise TensorError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise TensorError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * n)
            if len(raw) != 8 * n:
                raise TensorError(f"checkpoint truncated while reading {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = f.read(1)
        if trailing:
            raise TensorError("checkpoint has trailing bytes")
    return params, header.get("config")

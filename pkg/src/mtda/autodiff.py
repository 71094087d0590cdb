"""Dense float64 tensors with a tape-based reverse-mode backward pass.

Everything the transfer and task networks need lives here: convolution,
fully-connected, instance normalization, ReLU, the loss functions, and a
handful of structural ops (concat/slice on channels, nearest upsampling,
channel-wise affine modulation, global average pooling).  Each op computes
its forward value with numpy and, when a :class:`Tape` is active, records a
vector-Jacobian closure.  ``Tape.backward`` replays the records in exact
reverse execution order and accumulates gradients on every participating
tensor that has ``requires_grad`` set.

No broadcasting beyond what these ops need, no views escape into user code,
and every op is deterministic for identical inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an op receives tensors with incompatible shapes."""


class TapeError(RuntimeError):
    """Raised when backward() is asked about a value the tape never saw."""


class Tensor:
    """N-dimensional float64 array with optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small operator surface for assembling losses and elementwise algebra.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of executed ops, replayed backwards for gradients."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        out._tape = self
        out._node = len(self._records)
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(t) into t.grad for every recorded tensor.

        Repeated calls keep accumulating, so the gradient of a sum of losses
        can equally be obtained by one backward per term.
        """
        if loss._tape is not self:
            raise TapeError("loss tensor was not produced on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records[: loss._node + 1]):
            g = pending.pop(id(out), None)
            holders.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                _add_grad(out, g)
            for t, gi in zip(inputs, vjp(g)):
                if gi is None:
                    continue
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gi
                else:
                    pending[key] = gi
                    holders[key] = t
        # whatever is left never came off a record: leaf inputs and parameters
        for key, g in pending.items():
            t = holders[key]
            if t.requires_grad:
                _add_grad(t, g)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _add_grad(t: Tensor, g: np.ndarray) -> None:
    g = np.broadcast_to(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        tape._record(out, inputs, vjp)
    return out


class LayerParams:
    """Weights + bias of one layer, tagged by kind.

    kind 'conv2d' and 'conv1x1': weights (out_ch, in_ch, kH, kW), bias (out_ch,).
    kind 'fc': weights (out_dim, in_dim), bias (out_dim,).
    """

    KINDS = ("conv2d", "fc", "conv1x1")

    def __init__(self, kind: str, weights: Tensor, bias: Tensor):
        if kind not in self.KINDS:
            raise ValueError(f"unknown layer kind {kind!r}")
        if kind in ("conv2d", "conv1x1"):
            if weights.data.ndim != 4:
                raise ShapeError(f"{kind} weights must be 4-d, got {weights.shape}")
            if kind == "conv1x1" and weights.shape[2:] != (1, 1):
                raise ShapeError(f"conv1x1 kernel must be 1x1, got {weights.shape}")
        else:
            if weights.data.ndim != 2:
                raise ShapeError(f"fc weights must be 2-d, got {weights.shape}")
        if bias.data.ndim != 1 or bias.shape[0] != weights.shape[0]:
            raise ShapeError(
                f"bias length {bias.shape} does not match output size {weights.shape[0]}"
            )
        self.kind = kind
        self.weights = weights
        self.bias = bias

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


# ---------------------------------------------------------------------------
# layer ops


def conv2d(x: Tensor, p: LayerParams, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation (no kernel flip) with zero padding."""
    if p.kind not in ("conv2d", "conv1x1"):
        raise ValueError(f"conv2d needs conv params, got kind {p.kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (B,C,H,W), got {x.shape}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    B, C, H, W = x.shape
    Co, Ci, kh, kw = p.weights.shape
    if C != Ci:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ci}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if H + 2 * pad < kh or W + 2 * pad < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit padded input {H + 2 * pad}x{W + 2 * pad}"
        )

    w, b = p.weights, p.bias
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # one contiguous im2col gather, shared by forward and both backward gemms
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    w2d = w.data.reshape(Co, -1)
    out = (col @ w2d.T).reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2).copy()
    out += b.data[None, :, None, None]

    tape = _active_tape()
    need_dx = x.requires_grad or (tape is not None and x._tape is tape)

    def vjp(g: np.ndarray):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, Co)
        db = g2d.sum(axis=0)
        dw = (g2d.T @ col).reshape(Co, C, kh, kw)
        if not need_dx:
            return None, dw, db
        dcol = (g2d @ w2d).reshape(B, Ho, Wo, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (Ho - 1) + 1 : stride,
                    j : j + stride * (Wo - 1) + 1 : stride] += dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, pad : pad + H, pad : pad + W] if pad else dxp
        return dx, dw, db

    return _emit(out, (x, w, b), vjp)


def fully_connected(v: Tensor, p: LayerParams) -> Tensor:
    """out = v @ W.T + b, per batch row."""
    if p.kind != "fc":
        raise ValueError(f"fully_connected needs fc params, got kind {p.kind!r}")
    if v.data.ndim != 2:
        raise ShapeError(f"fully_connected input must be (B,D), got {v.shape}")
    if v.shape[1] != p.in_dim:
        raise ShapeError(f"fully_connected: input dim {v.shape[1]} != weight in_dim {p.in_dim}")
    w, b = p.weights, p.bias
    out = v.data @ w.data.T + b.data[None, :]

    def vjp(g: np.ndarray):
        return g @ w.data, g.T @ v.data, g.sum(axis=0)

    return _emit(out, (v, w, b), vjp)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per (batch, channel): zero spatial mean, unit spatial variance (up to eps)."""
    if x.data.ndim != 4:
        raise ShapeError(f"instance_norm input must be (B,C,H,W), got {x.shape}")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    m = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - m
    v = (xc * xc).mean(axis=(2, 3), keepdims=True)
    istd = 1.0 / np.sqrt(v + eps)
    y = xc * istd

    def vjp(g: np.ndarray):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gy = (g * y).mean(axis=(2, 3), keepdims=True)
        return istd * (g - gm - y * gy),

    return _emit(y, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def vjp(g: np.ndarray):
        return g * mask,

    return _emit(np.where(mask, x.data, 0.0), (x,), vjp)


def clamp_unit(x: Tensor) -> Tensor:
    """Clamp to [-1, 1]; gradient passes only through the interior."""
    mask = (x.data > -1.0) & (x.data < 1.0)

    def vjp(g: np.ndarray):
        return g * mask,

    return _emit(np.clip(x.data, -1.0, 1.0), (x,), vjp)


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    out = a.data + b.data

    def vjp(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g: np.ndarray):
        return -g,

    return _emit(-a.data, (a,), vjp)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = _as_tensor(b)
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g: np.ndarray):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _emit(out, (a, b), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def tensor_sum(x: Tensor) -> Tensor:
    def vjp(g: np.ndarray):
        return np.full(x.shape, float(g)),

    return _emit(np.asarray(x.data.sum()), (x,), vjp)


def channel_affine(x: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """y = x * scale + bias with (B,C) or (1,C) scale/bias broadcast over space."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_affine input must be (B,C,H,W), got {x.shape}")
    B, C = x.shape[:2]
    for name, t in (("scale", scale), ("bias", bias)):
        if t.data.ndim != 2 or t.shape[1] != C or t.shape[0] not in (1, B):
            raise ShapeError(
                f"channel_affine {name} must be (1,{C}) or ({B},{C}), got {t.shape}"
            )
    s4 = scale.data[:, :, None, None]
    out = x.data * s4 + bias.data[:, :, None, None]
    xd = x.data

    def vjp(g: np.ndarray):
        dx = g * s4
        ds = (g * xd).sum(axis=(2, 3))
        db = g.sum(axis=(2, 3))
        if scale.shape[0] == 1 and B > 1:
            ds = ds.sum(axis=0, keepdims=True)
        if bias.shape[0] == 1 and B > 1:
            db = db.sum(axis=0, keepdims=True)
        return dx, ds, db

    return _emit(out, (x, scale, bias), vjp)


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    base = parts[0].shape
    for t in parts[1:]:
        if t.data.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: {t.shape} incompatible with {base}")
    sizes = [t.shape[1] for t in parts]
    out = np.concatenate([t.data for t in parts], axis=1)
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=1))

    return _emit(out, tuple(parts), vjp)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels input must be (B,C,H,W), got {x.shape}")
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeError(f"slice_channels [{start}:{stop}] out of range for C={x.shape[1]}")
    out = x.data[:, start:stop].copy()

    def vjp(g: np.ndarray):
        dx = np.zeros(x.shape)
        dx[:, start:stop] = g
        return dx,

    return _emit(out, (x,), vjp)


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g: np.ndarray):
        return g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),

    return _emit(out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool input must be (B,C,H,W), got {x.shape}")
    B, C, H, W = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g: np.ndarray):
        return np.broadcast_to(g[:, :, None, None] / (H * W), x.shape).copy(),

    return _emit(out, (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"l1_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g: np.ndarray):
        da = np.sign(diff) * (float(g) / n)
        return da, -da

    return _emit(np.asarray(np.abs(diff).mean()), (a, b), vjp)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse_loss: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size

    def vjp(g: np.ndarray):
        da = diff * (2.0 * float(g) / n)
        return da, -da

    return _emit(np.asarray((diff * diff).mean()), (a, b), vjp)


IGNORE_VALUE = 255


def softmax_cross_entropy(pred: Tensor, target: np.ndarray,
                          ignore_value: int = IGNORE_VALUE) -> Tensor:
    """Mean of -log softmax(pred)[target] over non-ignored positions.

    pred is (B,K) with integer target (B,), or (B,K,H,W) with target (B,H,W).
    Positions whose target equals ignore_value contribute neither to the loss
    nor to the gradient; if everything is ignored the loss is 0 with zero
    gradients.
    """
    target = np.asarray(target)
    if not np.issubdtype(target.dtype, np.integer):
        raise TypeError("cross-entropy target must be an integer label map")
    squeeze = pred.data.ndim == 2
    z = pred.data[:, :, None, None] if squeeze else pred.data
    t = target[:, None, None] if squeeze else target
    if z.ndim != 4:
        raise ShapeError(f"cross-entropy pred must be (B,K) or (B,K,H,W), got {pred.shape}")
    B, K, H, W = z.shape
    if t.shape != (B, H, W):
        raise ShapeError(f"cross-entropy target shape {target.shape} does not match pred {pred.shape}")

    keep = t != ignore_value
    bad = keep & ((t < 0) | (t >= K))
    if bad.any():
        raise ValueError(
            f"cross-entropy labels outside [0,{K}) and != ignore {ignore_value}: "
            f"{np.unique(t[bad])}"
        )
    n_kept = int(keep.sum())

    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(sez)
    tk = np.where(keep, t, 0)
    picked = np.take_along_axis(logp, tk[:, None, :, :], axis=1)[:, 0]
    loss = -(picked[keep]).sum() / n_kept if n_kept else 0.0

    def vjp(g: np.ndarray):
        if n_kept == 0:
            return np.zeros(pred.shape),
        p = ez / sez
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tk[:, None, :, :], 1.0, axis=1)
        dz = (p - onehot) * (keep[:, None, :, :] * (float(g) / n_kept))
        return dz[:, :, 0, 0] if squeeze else dz,

    return _emit(np.asarray(loss), (pred,), vjp)


def sigmoid_bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against targets in [0,1]."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ShapeError(f"bce: target shape {t.shape} != logits shape {logits.shape}")
    z = logits.data
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size

    def vjp(g: np.ndarray):
        sig = 1.0 / (1.0 + np.exp(-z))
        return (sig - t) * (float(g) / n),

    return _emit(np.asarray(loss.mean()), (logits,), vjp)

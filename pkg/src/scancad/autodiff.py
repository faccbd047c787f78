"""Dense-tensor reverse-mode autodiff covering exactly what the nets need.

Define-by-run: every op builds the graph as it executes, backward() walks
it once in reverse topological order and accumulates gradients (summing
over fan-out). Values are numpy arrays; 32-bit floats by default, with a
64-bit mode for tight finite-difference testing.

Volumetric tensors use the canonical 5-axis layout (batch, channels,
depth, height, width). Convolution weights are (out_ch, in_ch, k, k, k);
transposed-convolution weights are (in_ch, out_ch, k, k, k).

Also home to the SCCK checkpoint format (named parameters plus Adam
moments) since parameters and optimizer state live here.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass

import numpy as np

_DEFAULT_DTYPE = np.float32

BCE_CLAMP = 1e-7


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def dtype_mode(dtype):
    """Temporarily switch the default dtype (used by 64-bit gradient tests)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """A dense array plus its place in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the value outside the graph; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar tensor."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(order):
            if t._backward_fn is not None and t.grad is not None:
                t._backward_fn(t.grad)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, grad={'set' if self.grad is not None else 'none'})"


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# --- elementwise ops ---

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        _accumulate(a, c * g)

    return _make(a.data * a.data.dtype.type(c), (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    # np.maximum rather than where(mask, ...): a NaN input must stay NaN
    return _make(np.maximum(x.data, x.data.dtype.type(0)), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign for stability; exp only ever sees non-positive arguments
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _make(out, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _make(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), backward)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 1 (channels); gradient scatters back into place."""
    if x.data.ndim < 2:
        raise ValueError("slice_channels needs a channel axis")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"bad channel slice [{start}:{stop}] for {x.shape[1]} channels")

    def backward(g):
        if not x.requires_grad:
            return
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += g

    return _make(np.ascontiguousarray(x.data[:, start:stop]), (x,), backward)


# --- convolution machinery (shared by conv3d and its transpose) ---

# forward im2col matrices at or below this size are kept for the weight
# gradient; above it the backward pass recomputes them to bound memory
_COL_CACHE_LIMIT = 64 * 1024 * 1024


def _im2col(xp: np.ndarray, k: tuple[int, int, int], s: int) -> tuple[np.ndarray, tuple[int, int, int]]:
    """Padded input (N,C,D,H,W) -> column matrix (C*prod(k), N*P), P output positions.

    Tap-major layout: the materializing copy then runs along the output
    row axis (long contiguous spans) instead of the tiny kernel axes.
    """
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=(2, 3, 4))
    if s > 1:
        win = win[:, :, ::s, ::s, ::s]
    n, c, do, ho, wo = win.shape[:5]
    cols = win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(
        c * k[0] * k[1] * k[2], n * do * ho * wo
    )
    return cols, (do, ho, wo)


def _pad_spatial(x: np.ndarray, amounts) -> np.ndarray:
    """Pad (positive) or crop (negative) each spatial axis; amounts are (lo, hi) pairs."""
    pads = [(0, 0), (0, 0)]
    slices = [slice(None), slice(None)]
    any_pad = False
    for lo, hi in amounts:
        pads.append((max(lo, 0), max(hi, 0)))
        any_pad = any_pad or lo > 0 or hi > 0
        start = -min(lo, 0)
        stop = min(hi, 0) or None
        slices.append(slice(start, stop))
    x = x[tuple(slices)]
    return np.pad(x, pads) if any_pad else x


def _corr(x: np.ndarray, w: np.ndarray, s: int, p, *, keep_cols: bool = False):
    """Strided cross-correlation; x (N,Ci,D,H,W), w (Co,Ci,kz,ky,kx).

    ``p`` is a single symmetric amount or three (lo, hi) pairs. Returns the
    output, and the im2col matrix too when ``keep_cols`` asks for it.
    """
    n = x.shape[0]
    co = w.shape[0]
    k = w.shape[2:]
    if isinstance(p, int):
        p = ((p, p),) * 3
    cols, (do, ho, wo) = _im2col(_pad_spatial(x, p), k, s)
    out = w.reshape(co, -1) @ cols
    out = np.ascontiguousarray(out.reshape(co, n, do, ho, wo).transpose(1, 0, 2, 3, 4))
    if keep_cols:
        return out, cols
    return out


def _corr_dw(x: np.ndarray, dy: np.ndarray, s: int, p: int, k: int,
             cols: np.ndarray | None = None) -> np.ndarray:
    """Weight gradient of _corr; returns (Co, Ci, k, k, k)."""
    ci = x.shape[1]
    co = dy.shape[1]
    if cols is None:
        cols, _ = _im2col(_pad_spatial(x, ((p, p),) * 3), (k, k, k), s)
    dy_mat = dy.reshape(dy.shape[0], co, -1).transpose(1, 0, 2).reshape(co, -1)
    return (dy_mat @ cols.T).reshape(co, ci, k, k, k)


def _corr_dx(dy: np.ndarray, w: np.ndarray, s: int, p: int) -> np.ndarray:
    """Input gradient of _corr, also the forward map of the transposed conv.

    Logically: dilate dy by the stride, pad by k-1-p, correlate with the
    flipped channel-transposed kernel. Materializing the dilation wastes
    s^3-fold work on zeros, so for s > 1 the output is split by residue
    class mod s instead; each phase is a small stride-1 correlation of the
    undilated dy against a sub-kernel.
    """
    k = w.shape[2]
    wf = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)  # (Ci, Co, k, k, k)
    shift = k - 1 - p
    if s == 1:
        return _corr(dy, np.ascontiguousarray(wf), 1, shift)

    n, co = dy.shape[:2]
    ci = w.shape[1]
    d_in = dy.shape[2:]
    d_out = tuple((d - 1) * s - 2 * p + k for d in d_in)
    out = np.zeros((n, ci) + d_out, dtype=dy.dtype)
    for phase in np.ndindex(s, s, s):
        # output cells X = phase + s*q take kernel taps t = t0 + s*r and
        # dy cells q + r - off, with everything integral by construction
        t0 = tuple((shift - ph) % s for ph in phase)
        if any(t >= k for t in t0):
            continue  # no taps land on this residue class
        off = tuple((shift - ph - t) // s for ph, t in zip(phase, t0))
        q_len = tuple(-(-(o - ph) // s) for o, ph in zip(d_out, phase))
        if any(q <= 0 for q in q_len):
            continue
        sub = np.ascontiguousarray(wf[:, :, t0[0]::s, t0[1]::s, t0[2]::s])
        kk = sub.shape[2:]
        pads = tuple(
            (of, q - 1 + kq - 1 - of - (d - 1))
            for of, q, kq, d in zip(off, q_len, kk, d_in)
        )
        out[:, :, phase[0]::s, phase[1]::s, phase[2]::s] = _corr(dy, sub, 1, pads)
    return out


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int, transposed: bool):
    if x.data.ndim != 5:
        raise ValueError(f"input must be (batch, channels, d, h, w), got shape {x.shape}")
    if w.data.ndim != 5:
        raise ValueError(f"weight must be 5-d, got shape {w.shape}")
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ValueError(f"kernel must be cubic, got {w.shape[2:]}")
    in_axis = 0 if transposed else 1
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {w.shape[in_axis]}")
    out_ch = w.shape[1] if transposed else w.shape[0]
    if b.data.shape != (out_ch,):
        raise ValueError(f"bias must have shape ({out_ch},), got {b.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"bad stride/pad: {stride}/{pad}")
    return k, out_ch


def conv3d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation over the three spatial axes plus per-channel bias.

    Output spatial size (D + 2*pad - k)/stride + 1 must be a positive
    integer; anything else is a configuration error, not an implicit floor.
    """
    k, co = _check_conv_args(x, w, b, stride, pad, transposed=False)
    for d in x.shape[2:]:
        span = d + 2 * pad - k
        if span < 0 or span % stride != 0:
            raise ValueError(
                f"conv3d size {d} with k={k} s={stride} p={pad} has no integral output"
            )

    out, cols = _corr(x.data, w.data, stride, pad, keep_cols=True)
    out += b.data.reshape(1, co, 1, 1, 1)
    cached = cols if (w.requires_grad and cols.nbytes <= _COL_CACHE_LIMIT) else None

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, _corr_dx(g, w.data, stride, pad))
        if w.requires_grad:
            _accumulate(w, _corr_dw(x.data, g, stride, pad, k, cols=cached))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    return _make(out, (x, w, b), backward)


def conv3d_transposed(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Gradient-of-conv3d semantics: output size (D-1)*stride - 2*pad + k."""
    k, co = _check_conv_args(x, w, b, stride, pad, transposed=True)
    for d in x.shape[2:]:
        if (d - 1) * stride - 2 * pad + k < 1:
            raise ValueError(
                f"conv3d_transposed size {d} with k={k} s={stride} p={pad} has empty output"
            )

    # forward of the transpose == input-gradient of a conv whose weight is
    # this weight read as (out=in_ch, in=out_ch)
    out = _corr_dx(x.data, w.data, stride, pad)
    out += b.data.reshape(1, co, 1, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g)
        if x.requires_grad:
            _accumulate(x, _corr(g, w.data, stride, pad))
        if w.requires_grad:
            _accumulate(w, _corr_dw(g, x.data, stride, pad, k))
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3, 4)))

    return _make(out, (x, w, b), backward)


# --- losses ---

def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} targets.

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs; the clamp
    blocks gradient outside that range, as a clamp should.
    """
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != tgt.shape:
        raise ValueError(f"bce shape mismatch: {pred.shape} vs {tgt.shape}")
    dt = pred.data.dtype
    lo = dt.type(BCE_CLAMP)
    hi = dt.type(1.0 - BCE_CLAMP)
    p = np.clip(pred.data, lo, hi)
    t = tgt.astype(dt, copy=False)
    n = p.size
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).sum() / n

    def backward(g):
        if not pred.requires_grad:
            return
        inside = (pred.data >= lo) & (pred.data <= hi)
        dp = np.where(inside, (p - t) / (p * (1.0 - p)), dt.type(0)) * (g / n)
        _accumulate(pred, dp.astype(dt, copy=False))

    return _make(np.asarray(loss, dtype=dt), (pred,), backward)


def _as_rows(t: Tensor) -> np.ndarray:
    if t.data.ndim == 1:
        return t.data.reshape(1, -1)
    if t.data.ndim == 2:
        return t.data
    raise ValueError(f"embedding tensor must be 1-d or 2-d, got shape {t.shape}")


def triplet_loss(fs: Tensor, gp: Tensor, gn: Tensor, margin: float) -> Tensor:
    """Hinge on anchor-positive vs anchor-negative Euclidean distance.

    Single vectors give the plain per-triplet value; (batch, dim) inputs
    give the mean over rows. Subgradient is 0 wherever the hinge is
    inactive, and 0 for a zero-length difference vector.
    """
    if not (fs.shape == gp.shape == gn.shape):
        raise ValueError(f"triplet shape mismatch: {fs.shape} / {gp.shape} / {gn.shape}")
    a, p, n = _as_rows(fs), _as_rows(gp), _as_rows(gn)
    dt = a.dtype
    diff_p = a - p
    diff_n = a - n
    d_pos = np.sqrt((diff_p * diff_p).sum(axis=1))
    d_neg = np.sqrt((diff_n * diff_n).sum(axis=1))
    hinge = d_pos - d_neg + dt.type(margin)
    active = hinge > 0
    rows = a.shape[0]
    loss = np.where(active, hinge, dt.type(0)).sum() / rows

    def backward(g):
        gr = g / rows
        safe_p = np.where(d_pos > 0, d_pos, dt.type(1))
        safe_n = np.where(d_neg > 0, d_neg, dt.type(1))
        u_p = diff_p / safe_p[:, None] * ((active & (d_pos > 0))[:, None])
        u_n = diff_n / safe_n[:, None] * ((active & (d_neg > 0))[:, None])
        if fs.requires_grad:
            _accumulate(fs, (gr * (u_p - u_n)).reshape(fs.shape))
        if gp.requires_grad:
            _accumulate(gp, (-gr * u_p).reshape(gp.shape))
        if gn.requires_grad:
            _accumulate(gn, (gr * u_n).reshape(gn.shape))

    return _make(np.asarray(loss, dtype=dt), (fs, gp, gn), backward)


def embedding_distance(fs: Tensor, gp: Tensor) -> Tensor:
    """Mean Euclidean distance between paired rows (positive-only pull loss)."""
    if fs.shape != gp.shape:
        raise ValueError(f"shape mismatch: {fs.shape} vs {gp.shape}")
    a, p = _as_rows(fs), _as_rows(gp)
    dt = a.dtype
    diff = a - p
    d = np.sqrt((diff * diff).sum(axis=1))
    rows = a.shape[0]
    loss = d.sum() / rows

    def backward(g):
        safe = np.where(d > 0, d, dt.type(1))
        u = diff / safe[:, None] * ((d > 0)[:, None])
        if fs.requires_grad:
            _accumulate(fs, (g / rows * u).reshape(fs.shape))
        if gp.requires_grad:
            _accumulate(gp, (-g / rows * u).reshape(gp.shape))

    return _make(np.asarray(loss, dtype=dt), (fs, gp), backward)


# --- optimizer ---

@dataclass
class AdamState:
    """First/second-moment accumulators mirroring the parameter shapes."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    # short second-moment horizon: the training loops here run thousands of
    # small full batches, not millions of large ones, and a 100-step window
    # absorbs gradient-scale swings that a 1000-step window amplifies
    beta2: float = 0.99
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            **hyper,
        )


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place on the parameter tensors."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.data.dtype, copy=False)
    return params, state


# --- SCCK checkpoint format ---
#
# magic "SCCK" | u32 version | u64 iteration | u32 param count | per param:
# u16 name length, UTF-8 name, u8 rank, rank x u32 dims, float32 values |
# then per param in the same order: float32 first moments, float32 second
# moments. Little-endian throughout; parameters sorted by name so the
# layout is canonical. The optimizer step counter is the stored iteration
# (they advance in lockstep, one update per training iteration).

SCCK_MAGIC = b"SCCK"
SCCK_VERSION = 1


def write_checkpoint(
    path, iteration: int, params: dict[str, Tensor], adam: AdamState | None = None
) -> None:
    names = sorted(params)
    chunks = [SCCK_MAGIC, struct.pack("<IQI", SCCK_VERSION, iteration, len(names))]
    for name in names:
        data = np.ascontiguousarray(params[name].data, dtype=np.float32)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    for name in names:
        shape = params[name].data.shape
        for bank in ("m", "v"):
            if adam is None:
                mom = np.zeros(shape, dtype=np.float32)
            else:
                mom = np.ascontiguousarray(getattr(adam, bank)[name], dtype=np.float32)
            chunks.append(mom.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_checkpoint(path) -> tuple[int, dict[str, Tensor], AdamState]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SCCK_MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {blob[:4]!r}")
    version, iteration, count = struct.unpack_from("<IQI", blob, 4)
    if version != SCCK_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + 16
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        params[name] = Tensor(values.astype(np.float32), requires_grad=True)
    state = AdamState(m={}, v={}, step=iteration)
    for name in sorted(params):
        size = params[name].data.size
        shape = params[name].data.shape
        for bank in (state.m, state.v):
            mom = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            bank[name] = mom.astype(np.float32)
    if off != len(blob):
        raise ValueError(f"checkpoint has {len(blob) - off} trailing bytes")
    return iteration, params, state


# --- finite-difference checking ---

def finite_difference_check(
    build_loss,
    params: dict[str, Tensor],
    *,
    h: float | None = None,
    sample: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss()`` must re-run the forward pass against the live param
    tensors. When ``sample`` is given, that many parameter entries are
    drawn across all tensors instead of sweeping every entry.
    """
    dtypes = {p.data.dtype for p in params.values()}
    is64 = dtypes == {np.dtype(np.float64)}
    if h is None:
        h = 1e-5 if is64 else 1e-3

    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    entries = [(name, idx) for name, p in params.items() for idx in range(p.data.size)]
    if sample is not None and sample < len(entries):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(entries), size=sample, replace=False)
        entries = [entries[i] for i in chosen]

    worst = 0.0
    for name, idx in entries:
        data = params[name].data
        nd = np.unravel_index(idx, data.shape)
        orig = data[nd]
        data[nd] = orig + h
        up = build_loss().item()
        data[nd] = orig - h
        down = build_loss().item()
        data[nd] = orig
        fd = (up - down) / (2.0 * h)
        ad = float(analytic[name][nd])
        err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
        worst = max(worst, err)
    return worst

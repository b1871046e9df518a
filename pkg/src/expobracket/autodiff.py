"""A small reverse-mode differentiation engine on top of numpy.

Only the operators needed by the fusion network and its losses are provided.
Every operation on tensors that require gradients appends a node to the
active :class:`Tape`; :func:`backward` walks that tape once, in exact reverse
order, and the tape is then retired.

Training runs in float32. Gradient checks switch the whole engine to float64
with :func:`precision`.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericalError, ParameterError, ShapeError, UsageError

_state = {"dtype": np.float32, "grad_enabled": True}
# branch decisions of non-smooth ops, collected while grad_check probes a point
_branches = {"log": None}


def _note_branch(mask) -> None:
    if _branches["log"] is not None:
        _branches["log"].append(np.asarray(mask))


def default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype}")
    _state["dtype"] = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the engine's floating point type (e.g. ``np.float64``)."""
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording anything on the tape."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


class Tape:
    """Ordered record of operations; inputs always precede outputs."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)


_current = {"tape": Tape()}


def current_tape() -> Tape:
    return _current["tape"]


def reset_tape() -> Tape:
    """Drop everything recorded so far and start a fresh tape."""
    _current["tape"] = Tape()
    return _current["tape"]


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        dtype = dtype or _state["dtype"]
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def stop_gradient(x: Tensor) -> Tensor:
    return x.detach()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, inputs, backward_fn) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        tape = _current["tape"]
        if tape.consumed:
            tape = reset_tape()
        out.requires_grad = True
        out._node = _Node(op, inputs, out, backward_fn)
        out._tape = tape
        tape.nodes.append(out._node)
    return out


def backward(loss: Tensor) -> dict:
    """Back-propagate from a scalar ``loss``.

    Populates ``.grad`` on every leaf tensor that requires gradients and was
    reached, and returns a ``{leaf: gradient}`` map. A tape can be walked only
    once; calling again without a fresh forward pass raises ``UsageError``.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad or loss._node is None:
        raise UsageError("loss does not depend on any tensor that requires gradients")
    tape = loss._tape
    if tape.consumed:
        raise UsageError("tape already consumed; run the forward pass again")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._node is None:
                leaves[key] = t
    tape.consumed = True
    # nodes and their outputs reference each other; break the cycles so the
    # recorded activations are freed now rather than at the next GC pass
    for node in tape.nodes:
        node.inputs, node.output, node.backward_fn = (), None, None
    tape.nodes = []
    if tape is _current["tape"]:
        reset_tape()
    result = {}
    for key, t in leaves.items():
        t.grad = grads[key]
        result[t] = t.grad
    return result


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    s = x.data.dtype.type(slope)
    pos = x.data > 0
    _note_branch(pos)
    out = np.where(pos, x.data, x.data * s)
    return _record("leaky_relu", out, (x,), lambda g: (np.where(pos, g, g * s),))


def tonemap(x: Tensor, mu: float = 5000.0) -> Tensor:
    """Differentiable mu-law tone map; negative inputs are clamped to zero."""
    if mu <= 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    dt = x.data.dtype.type
    xc = np.maximum(x.data, 0)
    _note_branch(x.data >= 0)
    denom = dt(np.log1p(mu))
    out = np.log1p(dt(mu) * xc) / denom

    def bwd(g):
        d = dt(mu) / ((1 + dt(mu) * xc) * denom)
        return (np.where(x.data >= 0, g * d, 0).astype(g.dtype),)

    return _record("tonemap", out, (x,), bwd)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = x.shape, x.data.dtype
    return _record("sum", np.asarray(x.data.sum(), dtype=dt), (x,), lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    shape, dt, n = x.shape, x.data.dtype, x.size
    return _record("mean", np.asarray(x.data.mean(), dtype=dt), (x,), lambda g: (np.full(shape, g / n, dtype=dt),))


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference; the subgradient at ties is zero."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "l1_mean")
    diff = a.data - b.data
    _note_branch(np.sign(diff))
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def bwd(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _record("l1_mean", out, (a, b), bwd)


# ---------------------------------------------------------------- structure


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return _record("concat", out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Depth-to-space: ``(N, C*r*r, H, W) -> (N, C, H*r, W*r)``."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def bwd(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return _record("pixel_shuffle", out, (x,), bwd)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Space-to-depth, the inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial size {h}x{w} not divisible by {r}")
    ho, wo = h // r, w // r
    out = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def bwd(g):
        return (g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return _record("pixel_unshuffle", out, (x,), bwd)


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + ho, j : j + wo]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = shape
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + ho, j : j + wo] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    if ic != c:
        raise ShapeError(f"conv2d: weight expects {ic} input channels, input has {c}")
    if bias is not None and bias.shape != (oc,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {oc} outputs")
    cols = _im2col(x.data, kh, kw, padding)
    w2 = w.data.reshape(oc, -1)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    ho, wo = h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1
    out = out.reshape(n, oc, ho, wo)
    inputs = (x, w) if bias is None else (x, w, bias)

    def bwd(g):
        g2 = g.reshape(n, oc, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            gx = _col2im(np.matmul(w2.T, g2), x.shape, kh, kw, padding)
        if w.requires_grad:
            # batched product on a transposed view; tensordot would copy both operands
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _record("conv2d", out, inputs, bwd)


def residual_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, slope: float = 0.1) -> Tensor:
    """``x + conv(leaky_relu(conv(x)))``."""
    y = conv2d(leaky_relu(conv2d(x, w1, b1), slope), w2, b2)
    if y.shape != x.shape:
        raise ShapeError(f"residual_block: branch output {y.shape} does not match input {x.shape}")
    return add(x, y)


# ---------------------------------------------------------------- warping


def _bilinear_taps(flow: np.ndarray, h: int, w: int):
    """Flat indices and weights of the four bilinear taps for each output pixel."""
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = xs[None] + flow[:, 0]
    py = ys[None] + flow[:, 1]
    x0 = np.floor(px)
    y0 = np.floor(py)
    fx = px - x0
    fy = py - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0).reshape(flow.shape[0], -1)
        taps.append((idx, (wt * valid).reshape(flow.shape[0], -1)))
    return taps


def bilinear_warp(x: Tensor, flow) -> Tensor:
    """Sample ``x`` at ``p + flow(p)`` with bilinear weights, zero outside.

    ``flow`` has shape ``(N, 2, H, W)`` with the horizontal displacement in
    channel 0 and the vertical one in channel 1. It is a constant: no gradient
    flows into it.
    """
    flow = np.asarray(flow.data if isinstance(flow, Tensor) else flow, dtype=np.float64)
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"bilinear_warp: flow shape {flow.shape} does not match {(n, 2, h, w)}")
    dt = x.data.dtype
    taps = _bilinear_taps(flow, h, w)
    xf = x.data.reshape(n, c, h * w)
    out = np.zeros((n, c, h * w), dtype=dt)
    for idx, wt in taps:
        out += np.take_along_axis(xf, np.broadcast_to(idx[:, None, :], (n, c, h * w)), axis=2) * wt[:, None, :].astype(dt)

    def bwd(g):
        gf = g.reshape(n, c, h * w)
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
        gx = np.zeros(n * c * h * w, dtype=np.float64)
        for idx, wt in taps:
            flat = (base + idx[:, None, :]).ravel()
            gx += np.bincount(flat, weights=(gf * wt[:, None, :]).ravel(), minlength=gx.size)
        return (gx.reshape(n, c, h, w).astype(dt),)

    return _record("bilinear_warp", out.reshape(n, c, h, w), (x,), bwd)


# ---------------------------------------------------------------- verification


def _evaluate(f, xs):
    """Loss value and the branch pattern of every non-smooth op it passed."""
    prev = _branches["log"]
    _branches["log"] = []
    try:
        value = f(*xs)
        return value, _branches["log"]
    finally:
        _branches["log"] = prev


def _same_branches(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


def grad_check(f, x, eps: float = 1e-6, coords: int | None = None, rng=None, details: bool = False):
    """Compare :func:`backward` against central differences.

    ``f`` maps the tensor(s) ``x`` to a scalar tensor. Returns the maximum
    relative error over the checked coordinates, where differences are scaled
    by ``max(|analytic|, |numeric|)`` floored at 1e-3 of the largest gradient
    magnitude. ``coords`` limits the check to that many random coordinates
    per tensor.

    A central difference is only meaningful where the function is smooth on
    ``[x - eps, x + eps]``. Coordinates whose perturbed evaluations take a
    different branch of a leaky ReLU, tone-map clamp or L1 sign than the
    unperturbed one are skipped and replaced by other draws. With
    ``details`` the result is ``(max_error, checked, skipped)``.
    """
    if eps <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {eps}")
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    rng = rng or np.random.default_rng(0)
    for t in xs:
        t.requires_grad = True
        t.grad = None
    reset_tape()
    loss, base = _evaluate(f, xs)
    backward(loss)
    analytic, numeric = [], []
    skipped = 0
    for t in xs:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        order = np.arange(flat.size)
        if coords is not None and coords < flat.size:
            order = rng.permutation(flat.size)
        wanted = flat.size if coords is None else min(coords, flat.size)
        done = 0
        with no_grad():
            for k in order:
                if done == wanted:
                    break
                orig = flat[k]
                flat[k] = orig + eps
                fp, bp = _evaluate(f, xs)
                flat[k] = orig - eps
                fm, bm = _evaluate(f, xs)
                flat[k] = orig
                if not (_same_branches(bp, base) and _same_branches(bm, base)):
                    skipped += 1
                    continue
                numeric.append((fp.item() - fm.item()) / (2 * eps))
                analytic.append(g.reshape(-1)[k])
                done += 1
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale_ = max(np.abs(analytic).max(initial=0), np.abs(numeric).max(initial=0))
    err = 0.0
    if scale_ > 0:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale_)
        err = float(np.max(np.abs(analytic - numeric) / denom))
    return (err, len(analytic), skipped) if details else err


# ---------------------------------------------------------------- optimizer


def cosine_lr(step: int, t_max: int, lr0: float, lr_min: float = 1e-6) -> float:
    """Cosine annealing from ``lr0`` at step 0 to ``lr_min`` at ``t_max``."""
    if t_max <= 0:
        return lr0
    t = min(max(step, 0), t_max)
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + np.cos(np.pi * t / t_max))


@dataclass
class OptimState:
    """AdamW moments and hyperparameters."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optim_step(params: dict, grads: dict, state: OptimState, lr: float | None = None) -> OptimState:
    """One AdamW update applied in place to ``params`` (name -> Tensor).

    ``grads`` maps parameter names to arrays; missing entries count as zero.
    The learning rate defaults to ``state.lr`` (pass the scheduled value).
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r} ({bad} entries) at step {state.step}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, p in params.items():
        dt = p.data.dtype.type
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[name]
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data
        if state.weight_decay:
            data = data - dt(lr * state.weight_decay) * data
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        p.data = (data - dt(lr) * update).astype(p.data.dtype)
    return state


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"BRKW"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict) -> None:
    """Write ``name -> array`` records in the BRKW checkpoint layout."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path) -> dict:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a BRKW checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(data):
                raise FormatError(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out

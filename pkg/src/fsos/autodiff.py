"""Reverse-mode automatic differentiation over dense float64 arrays.

A small tape-based engine: primitives compute forward values eagerly with
numpy and, when a Tape is active, record a backward closure. One backward
pass over the tape populates ``grad`` on every ``requires_grad`` tensor the
loss depends on. Everything is float64 and deterministic.

Primitive kinds: affine, relu, sigmoid, softmax_xent, bce, squared_distance,
mean_rows, conv3x3_pool, dot, scale_shift. The distance/dot primitives also
accept matrix operands (row-pairwise forms), mean_rows supports grouped row
blocks, and scale_shift broadcasts scalar gamma/beta; these batched forms keep
episode graphs to a handful of tape entries.
"""

import threading

import numpy as np


class PrimitiveError(ValueError):
    """Bad shapes or an unknown kind passed to a primitive."""

    def __init__(self, primitive, detail):
        self.primitive = primitive
        self.detail = detail
        super().__init__(f"{primitive}: {detail}")


class TapeError(RuntimeError):
    """Backward called on a consumed tape or with an off-tape loss."""


# Sigmoid outputs are clipped into the open interval (0, 1) so downstream
# logs and complements stay finite even at saturating inputs.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` is None until
    a backward pass (or manual write) populates it; gradients accumulate
    until an optimizer step clears them.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ValueError(f"item() needs a scalar tensor, got shape {self.data.shape}")

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeEntry:
    __slots__ = ("kind", "inputs", "output", "backward_fn")

    def __init__(self, kind, inputs, output, backward_fn):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications, in execution order.

    Execution order is a topological order by construction: every operand of
    an entry was produced by an earlier entry or is a leaf. A tape is
    single-threaded and consumed by its one backward pass.
    """

    def __init__(self):
        self.entries = []
        self._produced = set()
        self.consumed = False

    def record(self, kind, inputs, output, backward_fn):
        self.entries.append(_TapeEntry(kind, inputs, output, backward_fn))
        self._produced.add(id(output))

    def produced(self, tensor):
        return id(tensor) in self._produced

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.entries)


def _finish(kind, inputs, out_data, backward_fn):
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None:
        tape.record(kind, tuple(inputs), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives


def affine(x, w, b=None):
    """x @ w + b for x of shape [d] or [n, d], w [d, m], b [m].

    b may be omitted for bias-free layers.
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    xd, wd = x.data, w.data
    if wd.ndim != 2:
        raise PrimitiveError("affine", f"weight must be 2-d, got shape {wd.shape}")
    if xd.ndim not in (1, 2) or xd.shape[-1] != wd.shape[0]:
        raise PrimitiveError(
            "affine", f"input shape {xd.shape} does not match weight shape {wd.shape}"
        )
    if b is not None and b.data.shape != (wd.shape[1],):
        raise PrimitiveError(
            "affine", f"bias shape {b.data.shape} does not match output dim {wd.shape[1]}"
        )
    y = xd @ wd
    if b is not None:
        y = y + b.data

    def backward_fn(g):
        if xd.ndim == 1:
            gx = g @ wd.T
            gw = np.outer(xd, g)
            gb = g if b is not None else None
        else:
            gx = g @ wd.T
            gw = xd.T @ g
            gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _finish("affine", inputs, y, backward_fn)


def relu(x):
    x = as_tensor(x)
    xd = x.data
    y = np.maximum(xd, 0.0)

    def backward_fn(g):
        return (g * (xd > 0.0),)

    return _finish("relu", (x,), y, backward_fn)


def sigmoid(x):
    x = as_tensor(x)
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    y = np.clip(y, _SIG_LO, _SIG_HI)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    return _finish("sigmoid", (x,), y, backward_fn)


def softmax_xent(logits, labels):
    """Mean cross-entropy of row-wise softmax against integer labels.

    logits: [m, n] (or [n], treated as one row); labels: [m] class indices.
    Labels are data, not a differentiable input.
    """
    logits, labels = as_tensor(logits), as_tensor(labels)
    z = logits.data
    if z.ndim == 1:
        z = z[None, :]
    if z.ndim != 2:
        raise PrimitiveError("softmax_xent", f"logits must be 1-d or 2-d, got {logits.data.shape}")
    idx = labels.data.reshape(-1)
    if idx.shape[0] != z.shape[0]:
        raise PrimitiveError(
            "softmax_xent", f"{idx.shape[0]} labels for {z.shape[0]} logit rows"
        )
    ints = idx.astype(np.int64)
    if np.any(ints != idx) or np.any(ints < 0) or np.any(ints >= z.shape[1]):
        raise PrimitiveError("softmax_xent", "labels must be integers in [0, n_classes)")
    m = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1)) + zmax[:, 0]
    picked = z[np.arange(m), ints]
    loss = np.float64((lse - picked).mean())

    def backward_fn(g):
        soft = np.exp(shifted)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(m), ints] -= 1.0
        gz = (float(g) / m) * soft
        if logits.data.ndim == 1:
            gz = gz[0]
        return (gz, None)

    return _finish("softmax_xent", (logits, labels), loss, backward_fn)


def bce(logits, targets):
    """Mean binary cross-entropy from logits, computed in log space.

    Elementwise on any matching shapes; targets in [0, 1] are data, not a
    differentiable input. Uses max(z,0) - z*y + log1p(exp(-|z|)), which never
    overflows.
    """
    logits, targets = as_tensor(logits), as_tensor(targets)
    z, y = logits.data, targets.data
    if z.shape != y.shape:
        raise PrimitiveError("bce", f"logits shape {z.shape} != targets shape {y.shape}")
    if z.size == 0:
        raise PrimitiveError("bce", "empty operands")
    loss = np.float64((np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean())

    def backward_fn(g):
        p = np.empty_like(z)
        pos = z >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        p[~pos] = ez / (1.0 + ez)
        return ((float(g) / z.size) * (p - y), None)

    return _finish("bce", (logits, targets), loss, backward_fn)


def squared_distance(a, b):
    """Squared Euclidean distance.

    Vector form: a[d], b[d] -> scalar. Pairwise form: a[m, d], b[n, d] ->
    [m, n] of distances between every row pair.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 1:
        if ad.shape != bd.shape:
            raise PrimitiveError(
                "squared_distance", f"length mismatch {ad.shape} vs {bd.shape}"
            )
        diff = ad - bd
        out = np.float64(np.dot(diff, diff))

        def backward_fn(g):
            gd = 2.0 * float(g) * diff
            return (gd, -gd)

        return _finish("squared_distance", (a, b), out, backward_fn)
    if ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[1]:
        diff = ad[:, None, :] - bd[None, :, :]  # [m, n, d]
        out = np.einsum("mnd,mnd->mn", diff, diff)

        def backward_fn(g):
            gd = 2.0 * g[:, :, None] * diff
            return (gd.sum(axis=1), -gd.sum(axis=0))

        return _finish("squared_distance", (a, b), out, backward_fn)
    raise PrimitiveError(
        "squared_distance", f"unsupported operand shapes {ad.shape} and {bd.shape}"
    )


def row_block_mean(values, groups=1):
    """Column means over consecutive row blocks, order-independent.

    Summands are sorted before reduction, so the result depends only on the
    multiset of rows: permuting examples leaves a prototype bit-identical.
    Shared by the mean_rows primitive and every prototype computation.
    """
    n, d = values.shape
    block = n // groups
    return np.sort(values.reshape(groups, block, d), axis=1).mean(axis=1)


def mean_rows(x, groups=1):
    """Mean over rows of x[n, d] -> [d].

    With groups=g (n divisible by g), means each consecutive block of n/g
    rows independently -> [g, d]; used for per-class prototypes from a
    class-ordered stack of embeddings.
    """
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 2 or xd.shape[0] == 0:
        raise PrimitiveError("mean_rows", f"need a non-empty [n, d] matrix, got {xd.shape}")
    n, d = xd.shape
    if groups < 1 or n % groups != 0:
        raise PrimitiveError("mean_rows", f"{n} rows not divisible into {groups} groups")
    block = n // groups
    grouped = row_block_mean(xd, groups)
    out = grouped[0] if groups == 1 else grouped

    def backward_fn(g):
        gm = g.reshape(groups, 1, d) / block
        return (np.broadcast_to(gm, (groups, block, d)).reshape(n, d).copy(),)

    return _finish("mean_rows", (x,), out, backward_fn)


def conv3x3_pool(x, kernel, bias):
    """One conv block: 3x3 conv (stride 1, zero pad 1), ReLU, 2x2 max-pool.

    x: [c, h, w] or batched [n, c, h, w] with h, w even and >= 2;
    kernel: [oc, c, 3, 3]; bias: [oc]. Output spatial dims halve.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    xd, kd, bd = x.data, kernel.data, bias.data
    single = xd.ndim == 3
    xb = xd[None] if single else xd
    if xb.ndim != 4:
        raise PrimitiveError("conv3x3_pool", f"input must be [c,h,w] or [n,c,h,w], got {xd.shape}")
    if kd.ndim != 4 or kd.shape[2:] != (3, 3) or kd.shape[1] != xb.shape[1]:
        raise PrimitiveError(
            "conv3x3_pool", f"kernel shape {kd.shape} does not fit input {xd.shape}"
        )
    if bd.shape != (kd.shape[0],):
        raise PrimitiveError("conv3x3_pool", f"bias shape {bd.shape} != ({kd.shape[0]},)")
    nb, _, h, w = xb.shape
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise PrimitiveError("conv3x3_pool", f"spatial dims must be even and >= 2, got {h}x{w}")
    oc = kd.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    conv = np.zeros((nb, oc, h, w))
    for di in range(3):
        for dj in range(3):
            conv += np.einsum(
                "oc,nchw->nohw", kd[:, :, di, dj], xp[:, :, di : di + h, dj : dj + w]
            )
    conv += bd[None, :, None, None]
    act = np.maximum(conv, 0.0)
    h2, w2 = h // 2, w // 2
    windows = act.reshape(nb, oc, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        nb, oc, h2, w2, 4
    )
    arg = windows.argmax(axis=-1)  # first max wins ties, deterministic
    pooled = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]
    out = pooled[0] if single else pooled

    def backward_fn(g):
        gb4 = g[None] if single else g
        gwin = np.zeros((nb, oc, h2, w2, 4))
        np.put_along_axis(gwin, arg[..., None], gb4[..., None], axis=-1)
        gact = gwin.reshape(nb, oc, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            nb, oc, h, w
        )
        gconv = gact * (conv > 0.0)
        gbias = gconv.sum(axis=(0, 2, 3))
        gk = np.empty_like(kd)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di : di + h, dj : dj + w]
                gk[:, :, di, dj] = np.einsum("nohw,nchw->oc", gconv, patch)
                gxp[:, :, di : di + h, dj : dj + w] += np.einsum(
                    "oc,nohw->nchw", kd[:, :, di, dj], gconv
                )
        gx = gxp[:, :, 1:-1, 1:-1]
        return ((gx[0] if single else gx), gk, gbias)

    return _finish("conv3x3_pool", (x, kernel, bias), out, backward_fn)


def dot(a, b):
    """Dot product a[d] . b[d] -> scalar, or pairwise a[m, d], b[n, d] ->
    [m, n] of row dot products."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 1 and bd.ndim == 1:
        if ad.shape != bd.shape:
            raise PrimitiveError("dot", f"length mismatch {ad.shape} vs {bd.shape}")
        out = np.float64(np.dot(ad, bd))

        def backward_fn(g):
            return (float(g) * bd, float(g) * ad)

        return _finish("dot", (a, b), out, backward_fn)
    if ad.ndim == 2 and bd.ndim == 2 and ad.shape[1] == bd.shape[1]:
        out = ad @ bd.T

        def backward_fn(g):
            return (g @ bd, g.T @ ad)

        return _finish("dot", (a, b), out, backward_fn)
    raise PrimitiveError("dot", f"unsupported operand shapes {ad.shape} and {bd.shape}")


def scale_shift(x, gamma, beta):
    """Per-channel affine gamma * x + beta.

    gamma/beta of size 1 broadcast over every element; otherwise they must
    match the channel axis (axis 1 for batched [n, c, h, w] images, axis 0
    for anything else).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd, gd, bd = x.data, gamma.data, beta.data
    if gd.shape != bd.shape:
        raise PrimitiveError("scale_shift", f"gamma shape {gd.shape} != beta shape {bd.shape}")
    if gd.size == 1:
        axes = tuple(range(xd.ndim))
        shape = (1,) * xd.ndim

        def reduce_param(g):
            return g.sum().reshape(gd.shape)

    else:
        channel_axis = 1 if xd.ndim == 4 else 0
        if xd.ndim == 0 or gd.shape != (xd.shape[channel_axis],):
            raise PrimitiveError(
                "scale_shift",
                f"gamma shape {gd.shape} does not match channel axis of input {xd.shape}",
            )
        shape = [1] * xd.ndim
        shape[channel_axis] = gd.shape[0]
        shape = tuple(shape)
        axes = tuple(i for i in range(xd.ndim) if i != channel_axis)

        def reduce_param(g):
            return g.sum(axis=axes) if axes else g.copy()

    gb = gd.reshape(shape) if xd.ndim else gd.reshape(())
    bb = bd.reshape(shape) if xd.ndim else bd.reshape(())
    out = gb * xd + bb

    def backward_fn(g):
        ggamma = reduce_param(g * xd)
        gbeta = reduce_param(g)
        return (g * gb, ggamma.reshape(gd.shape), gbeta.reshape(bd.shape))

    return _finish("scale_shift", (x, gamma, beta), out, backward_fn)


def reshape(x, shape):
    """Row-major reshape; structural plumbing (flattening conv features)."""
    x = as_tensor(x)
    xd = x.data
    try:
        out = xd.reshape(shape).copy()
    except ValueError:
        raise PrimitiveError("reshape", f"cannot reshape {xd.shape} into {shape}")

    def backward_fn(g):
        return (g.reshape(xd.shape),)

    return _finish("reshape", (x,), out, backward_fn)


_PRIMITIVES = {
    "affine": affine,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax_xent": softmax_xent,
    "bce": bce,
    "squared_distance": squared_distance,
    "mean_rows": mean_rows,
    "conv3x3_pool": conv3x3_pool,
    "dot": dot,
    "scale_shift": scale_shift,
}


def apply_primitive(kind, *inputs):
    """Dispatch a primitive by kind name; unknown kinds are an error."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise PrimitiveError(kind, f"unknown primitive kind {kind!r}")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# backward & gradient checking


def backward(tape, loss):
    """Populate grad on every requires_grad ancestor of a scalar loss.

    The tape is consumed: a second backward on it raises. Gradients
    accumulate into existing grad buffers (optimizers clear them).
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise TapeError("loss must be a scalar tensor")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True
    grads = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g_out = grads.pop(id(entry.output), None)
        if g_out is None:
            continue
        if not any(t.requires_grad for t in entry.inputs):
            continue
        input_grads = entry.backward_fn(g_out)
        for tensor, g in zip(entry.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            if tape.produced(tensor):
                acc = grads.get(id(tensor))
                if acc is None:
                    grads[id(tensor)] = np.array(g, dtype=np.float64, copy=True)
                else:
                    acc += g
            else:
                tensor.accumulate_grad(np.asarray(g, dtype=np.float64))


class GradientCheckReport:
    """Per-parameter max relative error of backward() vs central differences."""

    def __init__(self, errors, tolerance):
        self.errors = list(errors)
        self.tolerance = tolerance
        self.passed = all(e <= tolerance for e in self.errors)

    @property
    def max_error(self):
        return max(self.errors) if self.errors else 0.0

    def __repr__(self):
        return f"GradientCheckReport(max_error={self.max_error:.3e}, passed={self.passed})"


def gradient_check(builder, point, tolerance=1e-4, step=1e-5):
    """Compare backward() gradients with central finite differences.

    builder maps a list of parameter Tensors to a scalar loss Tensor and must
    be deterministic; point is the list of parameter arrays to check at.
    Relative error uses a 1e-6 floor so exact zeros compare as zero.
    """
    params = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in point]
    with Tape() as tape:
        loss = builder(params)
    if loss.data.size != 1:
        raise TapeError("gradient_check builder must return a scalar loss")
    if tape.produced(loss):
        backward(tape, loss)

    def eval_loss():
        out = builder(params)
        return float(out.data.reshape(-1)[0])

    errors = []
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus = eval_loss()
            flat[j] = orig - step
            f_minus = eval_loss()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.reshape(-1)[j])
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
        errors.append(worst)
    return GradientCheckReport(errors, tolerance)

"""Minimal reverse-mode autodiff engine on float64 numpy arrays.

Tensors are rank 1..4, row-major. The graph is rebuilt each step
(define-by-run); backward walks nodes in reverse topological order and
accumulates gradients additively, so reusing a tensor twice doubles its
gradient as expected.
"""

import numpy as np


class ShapeMismatchError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if not 1 <= arr.ndim <= 4:
        raise ShapeMismatchError(f"tensor rank must be 1..4, got shape {arr.shape}")
    return arr


def _unbroadcast(grad, shape):
    """Sum-reduce a gradient back to `shape` (trailing-dimension broadcast)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, (g, s) in enumerate(zip(grad.shape, shape)):
        if s == 1 and g != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_track")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._track = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def detach(self):
        out = Tensor(self.data)
        return out

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    @staticmethod
    def _result(data, parents, backward_fn):
        out = Tensor(data)
        if any(p._track for p in parents):
            out._track = True
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    # ---- elementwise ----

    def _binary(self, other, op_kind):
        if not isinstance(other, Tensor):
            other = Tensor(np.full(1, float(other)))
        a, b = self.data, other.data
        try:
            result_shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            result_shape = None
        if result_shape != a.shape:
            raise ShapeMismatchError(
                f"{op_kind}: second operand {b.shape} does not broadcast to first operand {a.shape}")
        if op_kind == "add":
            data = a + b
        elif op_kind == "sub":
            data = a - b
        elif op_kind == "mul":
            data = a * b
        else:
            raise ValueError(f"unknown elementwise op {op_kind!r}")

        def backward(out):
            g = out.grad
            if op_kind == "add":
                ga, gb = g, g
            elif op_kind == "sub":
                ga, gb = g, -g
            else:
                ga, gb = g * b, g * a
            if self._track:
                self._accumulate(_unbroadcast(ga, a.shape))
            if other._track:
                other._accumulate(_unbroadcast(gb, b.shape))

        return Tensor._result(data, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, "add")

    def __sub__(self, other):
        return self._binary(other, "sub")

    def __mul__(self, other):
        return self._binary(other, "mul")

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    # ---- shape ops ----

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.data.shape
        data = self.data.reshape(shape)
        if not 1 <= data.ndim <= 4:
            raise ShapeMismatchError(f"reshape target rank out of range: {data.shape}")

        def backward(out):
            if self._track:
                self._accumulate(out.grad.reshape(old_shape))

        return Tensor._result(data, (self,), backward)

    def sum(self):
        data = np.array([self.data.sum()])

        def backward(out):
            if self._track:
                self._accumulate(np.full_like(self.data, out.grad[0]))

        return Tensor._result(data, (self,), backward)

    # ---- matmul ----

    def matmul(self, other):
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeMismatchError(f"matmul expects 2-D tensors, got {a.shape} and {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
        data = a @ b

        def backward(out):
            g = out.grad
            if self._track:
                self._accumulate(g @ b.T)
            if other._track:
                other._accumulate(a.T @ g)

        return Tensor._result(data, (self, other), backward)

    def __matmul__(self, other):
        return self.matmul(other)

    # ---- activations ----

    def relu(self):
        mask = self.data > 0
        data = np.where(mask, self.data, 0.0)

        def backward(out):
            if self._track:
                self._accumulate(out.grad * mask)

        return Tensor._result(data, (self,), backward)

    def leaky_relu(self, alpha=0.2):
        mask = self.data > 0
        data = np.where(mask, self.data, alpha * self.data)

        def backward(out):
            if self._track:
                self._accumulate(out.grad * np.where(mask, 1.0, alpha))

        return Tensor._result(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)

        def backward(out):
            if self._track:
                self._accumulate(out.grad * (1.0 - data * data))

        return Tensor._result(data, (self,), backward)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))

        def backward(out):
            if self._track:
                self._accumulate(out.grad * data * (1.0 - data))

        return Tensor._result(data, (self,), backward)

    # ---- backward entry point ----

    def backward(self):
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)


def activation(kind, x, alpha=0.2):
    """Dispatch by name; `alpha` only applies to leaky_relu."""
    if kind == "relu":
        return x.relu()
    if kind == "tanh":
        return x.tanh()
    if kind == "sigmoid":
        return x.sigmoid()
    if kind == "leaky_relu":
        return x.leaky_relu(alpha)
    raise ValueError(f"unknown activation {kind!r}")


def elementwise(op_kind, a, b):
    return a._binary(b, op_kind)


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t._track:
                sl = [slice(None)] * data.ndim
                sl[axis] = slice(start, stop)
                t._accumulate(out.grad[tuple(sl)])

    return Tensor._result(data, tuple(tensors), backward)


# ---- convolution ----

def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # n, c, ho, wo, kh, kw
    cols = windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, pad, ho, wo):
    n, c, h, w = x_shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


def _check_conv_shapes(x, w, stride, pad):
    n, c_in, h, wd = x.shape
    c_out, ck, kh, kw = w.shape
    if ck != c_in:
        raise ShapeMismatchError(
            f"conv2d: input channels {c_in} do not match kernel channels {ck}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeMismatchError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation. x: (C,H,W) or (N,C,H,W); w: (C_out,C_in,kH,kW)."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    _check_conv_shapes(xd, wd, stride, padding)
    n = xd.shape[0]
    c_out, _, kh, kw = wd.shape
    cols, ho, wo = _im2col(xd, kh, kw, stride, padding)
    w2 = wd.reshape(c_out, -1)
    y = np.matmul(w2, cols).reshape(n, c_out, ho, wo)

    def backward(out):
        g = out.grad
        gy = (g[None] if squeeze else g).reshape(n, c_out, ho * wo)
        if x._track:
            gcols = np.matmul(w2.T, gy)
            gx = _col2im(gcols, xd.shape, kh, kw, stride, padding, ho, wo)
            x._accumulate(gx[0] if squeeze else gx)
        if w._track:
            gw = np.matmul(gy, cols.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(gw.reshape(wd.shape))

    return Tensor._result(y[0] if squeeze else y, (x, w), backward)


def conv2d_transpose(x, w, stride=1, padding=0, out_hw=None):
    """Adjoint of conv2d with the same kernels/stride/padding.

    x has conv2d's output channels; the result has conv2d's input channels.
    `out_hw` disambiguates the output size when stride > 1 (default takes
    the minimal consistent size (H-1)*stride + kH - 2*padding).
    """
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    wd = w.data
    n, c, h, wid = xd.shape
    c_out, c_in, kh, kw = wd.shape
    if c != c_out:
        raise ShapeMismatchError(
            f"conv2d_transpose: input channels {c} do not match kernel output channels {c_out}")
    if out_hw is None:
        out_hw = ((h - 1) * stride + kh - 2 * padding,
                  (wid - 1) * stride + kw - 2 * padding)
    oh, ow = out_hw
    if _conv_out_size(oh, kh, stride, padding) != h or _conv_out_size(ow, kw, stride, padding) != wid:
        raise ShapeMismatchError(
            f"conv2d_transpose: output size {out_hw} inconsistent with input {h}x{wid}")
    w2 = wd.reshape(c_out, -1)
    xflat = xd.reshape(n, c_out, h * wid)
    cols = np.matmul(w2.T, xflat)
    y = _col2im(cols, (n, c_in, oh, ow), kh, kw, stride, padding, h, wid)

    def backward(out):
        g = out.grad
        gy = g[None] if squeeze else g
        gcols, _, _ = _im2col(gy, kh, kw, stride, padding)
        if x._track:
            gx = np.matmul(w2, gcols).reshape(n, c_out, h, wid)
            x._accumulate(gx[0] if squeeze else gx)
        if w._track:
            gw = np.matmul(xflat, gcols.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(gw.reshape(wd.shape))

    return Tensor._result(y[0] if squeeze else y, (x, w), backward)


# ---- losses ----

def softmax_cross_entropy(logits, target_classes):
    """Mean over rows of -log softmax(logits)[target]. logits: (N, C)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeMismatchError(f"softmax_cross_entropy expects (N, C) logits, got {z.shape}")
    n, c = z.shape
    targets = np.asarray(target_classes, dtype=np.int64)
    if targets.shape != (n,):
        raise IndexError(f"expected {n} target classes, got shape {targets.shape}")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"target class out of range [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = np.array([(lse - shifted[np.arange(n), targets]).mean()])

    def backward(out):
        if logits._track:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            logits._accumulate(out.grad[0] * p / n)

    return Tensor._result(loss, (logits,), backward)


def mse_loss(pred, target):
    """Half mean-over-batch squared Euclidean distance.

    The leading axis is the batch axis for rank >= 2; rank-1 inputs count
    as a single sample.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    p = pred.data
    if p.shape != t.shape:
        raise ShapeMismatchError(f"mse_loss shapes differ: {p.shape} vs {t.shape}")
    n = p.shape[0] if p.ndim >= 2 else 1
    diff = p - t
    loss = np.array([0.5 * (diff * diff).sum() / n])

    def backward(out):
        if pred._track:
            pred._accumulate(out.grad[0] * diff / n)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return Tensor._result(loss, parents, backward)


# ---- optimizers ----

class MissingGradientError(RuntimeError):
    pass


class Optimizer:
    def step(self, named_params):
        raise NotImplementedError

    def state_tensors(self):
        """Named float64 arrays that belong in a checkpoint."""
        return {}

    def load_state_tensors(self, tensors):
        pass


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, learning_rate):
        self.learning_rate = learning_rate
        self.step_count = 0

    def step(self, named_params):
        for name, p in named_params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            p.data -= self.learning_rate * p.grad
            p.grad = None
        self.step_count += 1

    def state_tensors(self):
        return {"step_count": np.array([float(self.step_count)])}

    def load_state_tensors(self, tensors):
        self.step_count = int(tensors["step_count"][0])


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, learning_rate=2e-4, beta1=0.5, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self, named_params):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in named_params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter {name!r} has no gradient")
            g = p.grad
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)
            p.grad = None

    def state_tensors(self):
        out = {"step_count": np.array([float(self.step_count)])}
        for name in sorted(self._m):
            out[f"m/{name}"] = self._m[name]
            out[f"v/{name}"] = self._v[name]
        return out

    def load_state_tensors(self, tensors):
        self.step_count = int(tensors["step_count"][0])
        self._m = {}
        self._v = {}
        for name, arr in tensors.items():
            if name.startswith("m/"):
                self._m[name[2:]] = arr.copy()
            elif name.startswith("v/"):
                self._v[name[2:]] = arr.copy()


# ---- gradient checking ----

def gradient_check(build_loss, named_params, step=1e-5, max_coords_per_tensor=None, rng=None):
    """Central finite differences against the analytic gradient.

    `build_loss` rebuilds the scalar loss from the current parameter
    values. Returns the max relative error over checked coordinates.
    """
    for p in named_params.values():
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named_params.items()}
    worst = 0.0
    for name, p in named_params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        aflat = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = build_loss().data[0]
            flat[i] = orig - step
            lo = build_loss().data[0]
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = aflat[i]
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    for p in named_params.values():
        p.grad = None
    return worst

"""Tape-based reverse-mode differentiation over dense numpy arrays.

The operation set is small and closed: affine maps, elementwise activations,
broadcasted arithmetic, gather/scatter over constant index arrays, sparse
aggregation, reshapes, and reductions.  That is everything the rollout,
decoder, and loss need, so a general expression-graph engine is unnecessary.

All arithmetic is float64.  Forward evaluation is deterministic; replaying a
tape reproduces outputs bit-exactly because every primitive is a pure numpy
computation on cached inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class Tape:
    """Recorded sequence of primitive operations, in creation (topological) order."""

    def __init__(self):
        self.nodes = []

    def append(self, var):
        self.nodes.append(var)


class Var:
    """One tape node: a float64 array value plus a backward rule."""

    __slots__ = ("value", "grad", "tape", "_parents", "_backward", "_slice_cache")

    # Make numpy defer binary operations to the reflected Var methods instead
    # of broadcasting over the object.
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.tape = tape
        self._parents = parents
        self._backward = backward
        self._slice_cache = None
        if tape is not None:
            tape.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _lift(other, self.tape)
        out = Var(self.value + other.value, self.tape, (self, other))
        out._backward = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _lift(other, self.tape)
        out = Var(self.value - other.value, self.tape, (self, other))
        out._backward = lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))
        return out

    def __rsub__(self, other):
        return _lift(other, self.tape) - self

    def __mul__(self, other):
        other = _lift(other, self.tape)
        out = Var(self.value * other.value, self.tape, (self, other))
        out._backward = lambda g: (
            _unbroadcast(g * other.value, self.shape),
            _unbroadcast(g * self.value, other.shape),
        )
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other, self.tape)
        out = Var(self.value / other.value, self.tape, (self, other))
        out._backward = lambda g: (
            _unbroadcast(g / other.value, self.shape),
            _unbroadcast(-g * self.value / other.value**2, other.shape),
        )
        return out

    def __neg__(self):
        out = Var(-self.value, self.tape, (self,))
        out._backward = lambda g: (-g,)
        return out

    def __matmul__(self, other):
        other = _lift(other, self.tape)
        a, b = self.value, other.value
        out = Var(a @ b, self.tape, (self, other))

        def backward(g):
            if a.ndim == 1:
                ga = g @ b.T if b.ndim == 2 else np.outer(g, b)
            else:
                ga = g @ np.swapaxes(b, -1, -2) if b.ndim >= 2 else np.einsum("...i,j->...ij", g, b)
            if b.ndim == 1:
                gb = np.swapaxes(a, -1, -2) @ g if a.ndim >= 2 else a * g
                gb = _unbroadcast(gb, b.shape)
            else:
                ga_shape_a = a
                gb = np.swapaxes(ga_shape_a, -1, -2) @ g if a.ndim >= 2 else np.outer(a, g)
                gb = _unbroadcast(gb, b.shape)
            return _unbroadcast(ga, a.shape), gb

        out._backward = backward
        return out

    def __getitem__(self, idx):
        out = Var(self.value[idx], self.tape, (self,))

        def backward(g):
            full = np.zeros_like(self.value)
            np.add.at(full, idx, g)
            return (full,)

        out._backward = backward
        return out

    # -- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        out = Var(self.value.reshape(*shape), self.tape, (self,))
        out._backward = lambda g: (g.reshape(self.shape),)
        return out

    def sum(self, axis=None, keepdims=False):
        out = Var(self.value.sum(axis=axis, keepdims=keepdims), self.tape, (self,))

        def backward(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        count = self.value.size if axis is None else np.prod(
            [self.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _lift(x, tape):
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=np.float64), tape)


def _unbroadcast(g, shape):
    """Sum gradient g down to the given (possibly broadcast-expanded) shape."""
    g = np.asarray(g, dtype=np.float64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# -- activations and elementwise functions ------------------------------


def tanh(x):
    if not isinstance(x, Var):
        return np.tanh(x)
    y = np.tanh(x.value)
    out = Var(y, x.tape, (x,))
    out._backward = lambda g: (g * (1.0 - y**2),)
    return out


def elu(x):
    """ELU: x for x >= 0, exp(x) - 1 otherwise; C1 at the origin."""
    if not isinstance(x, Var):
        x = np.asarray(x, dtype=np.float64)
        return np.where(x >= 0.0, x, np.expm1(x))
    v = x.value
    y = np.where(v >= 0.0, v, np.expm1(v))
    out = Var(y, x.tape, (x,))
    out._backward = lambda g: (g * np.where(v >= 0.0, 1.0, y + 1.0),)
    return out


def identity(x):
    return x


ACTIVATIONS = {"tanh": tanh, "elu": elu, "identity": identity}


def exp(x):
    if not isinstance(x, Var):
        return np.exp(x)
    y = np.exp(x.value)
    out = Var(y, x.tape, (x,))
    out._backward = lambda g: (g * y,)
    return out


def absval(x):
    """|x| with subgradient 0 at exactly 0."""
    if not isinstance(x, Var):
        return np.abs(x)
    out = Var(np.abs(x.value), x.tape, (x,))
    out._backward = lambda g: (g * np.sign(x.value),)
    return out


def concat(vars_, axis=0):
    tape = next(v.tape for v in vars_ if isinstance(v, Var))
    vars_ = [_lift(v, tape) for v in vars_]
    out = Var(np.concatenate([v.value for v in vars_], axis=axis), tape, tuple(vars_))
    sizes = [v.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]
    out._backward = lambda g: tuple(np.split(g, splits, axis=axis))
    return out


def sparse_matmul(matrix, x, axis=-2):
    """Multiply a constant sparse matrix along the node axis of x.

    x has shape (..., N, c); output (..., M, c).  Used for neighbor-mean
    aggregation where matrix is the row-normalized adjacency.
    """
    def apply(m, arr):
        if arr.ndim == 2:
            return m @ arr
        # One sparse multiply for the whole batch: move the node axis first and
        # flatten the rest into columns.
        moved = np.moveaxis(arr, -2, 0)
        out = m @ moved.reshape(arr.shape[-2], -1)
        out = out.reshape((m.shape[0],) + moved.shape[1:])
        return np.moveaxis(out, 0, -2)

    if not isinstance(x, Var):
        return apply(matrix, np.asarray(x, dtype=np.float64))
    out = Var(apply(matrix, x.value), x.tape, (x,))
    mt = matrix.T.tocsr()
    out._backward = lambda g: (apply(mt, g),)
    return out


def scatter_add(x, index, num_segments, axis=-2):
    """Sum slices of x into num_segments bins given by a constant index array.

    x has shape (..., E, c) and index has length E; output (..., num_segments, c).
    """
    index = np.asarray(index)

    def apply(arr):
        out_shape = arr.shape[:-2] + (num_segments, arr.shape[-1])
        out = np.zeros(out_shape, dtype=np.float64)
        np.add.at(out, (..., index, slice(None)), arr)
        return out

    if not isinstance(x, Var):
        return apply(np.asarray(x, dtype=np.float64))
    out = Var(apply(x.value), x.tape, (x,))
    out._backward = lambda g: (np.ascontiguousarray(g[..., index, :]),)
    return out


def gather(x, index, axis=-2):
    """Take slices of x along the node axis with a constant index array."""
    index = np.asarray(index)
    if not isinstance(x, Var):
        return np.asarray(x, dtype=np.float64)[..., index, :]
    out = Var(x.value[..., index, :], x.tape, (x,))

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (..., index, slice(None)), g)
        return (full,)

    out._backward = backward
    return out


def backward(tape, seed_var):
    """Reverse accumulation from a scalar loss node over the whole tape."""
    if seed_var.value.ndim != 0 and seed_var.value.size != 1:
        raise ValidationError("backward seed must be a scalar")
    for node in tape.nodes:
        node.grad = None
    seed_var.grad = np.ones_like(seed_var.value)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is not None:
                parent._accum(g)


# -- parameter vectors and MLPs -----------------------------------------


@dataclass
class MlpSpec:
    """Fully connected network shape with one activation between layers."""

    layer_sizes: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.layer_sizes) < 2:
            raise ValidationError("an MLP needs at least two layer sizes")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    def param_count(self):
        sizes = self.layer_sizes
        return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))

    def blocks(self, prefix):
        """Named (weight, bias) block shapes in layer order."""
        out = []
        sizes = self.layer_sizes
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            out.append((f"{prefix}.layer{k}.W", (b, a)))
            out.append((f"{prefix}.layer{k}.b", (b,)))
        return out


class ParamVector:
    """Flat float64 weight array with a named, serialization-stable block layout."""

    def __init__(self, layout):
        # layout: ordered list of (name, shape)
        self.layout = []
        offset = 0
        for name, shape in layout:
            size = int(np.prod(shape)) if shape else 1
            self.layout.append((name, tuple(shape), offset, size))
            offset += size
        self.data = np.zeros(offset, dtype=np.float64)
        self._index = {name: (off, shape) for name, shape, off, _ in self.layout}

    @property
    def size(self):
        return self.data.size

    def block(self, name):
        off, shape = self._index[name]
        size = int(np.prod(shape)) if shape else 1
        return self.data[off : off + size].reshape(shape)

    def set_block(self, name, value):
        self.block(name)[...] = value

    def block_names(self):
        return [name for name, _, _, _ in self.layout]

    def slice_of(self, flat_var, name):
        """Taped view of one block from a flat Var holding all parameters.

        Slices are cached per flat Var so repeated uses of the same block on
        one tape share a single node (the node's gradient then accumulates
        across uses instead of scattering into a full-size array every time).
        """
        if flat_var._slice_cache is None:
            flat_var._slice_cache = {}
        cached = flat_var._slice_cache.get(name)
        if cached is not None:
            return cached
        off, shape = self._index[name]
        size = int(np.prod(shape)) if shape else 1
        out = Var(flat_var.value[off : off + size].reshape(shape), flat_var.tape, (flat_var,))

        def backward(g):
            full = np.zeros_like(flat_var.value)
            full[off : off + size] = np.asarray(g).reshape(-1)
            return (full,)

        out._backward = backward
        flat_var._slice_cache[name] = out
        return out

    def copy(self):
        out = ParamVector([(n, s) for n, s, _, _ in self.layout])
        out.data[:] = self.data
        return out

    def initialize(self, rng):
        """Glorot-uniform weights, zero biases; paper-silent, recorded default."""
        for name, shape, off, size in self.layout:
            if name.endswith(".W") and len(shape) == 2:
                fan_out, fan_in = shape
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                self.data[off : off + size] = rng.uniform(-bound, bound, size)
            else:
                self.data[off : off + size] = 0.0


def mlp_forward(spec, params, flat, input_, prefix):
    """Evaluate an MLP: affine-activation chain, identity on the output layer.

    flat is the taped Var over params.data (or None for a plain numpy pass);
    input_ may be a Var or array of shape (..., layer_sizes[0]).
    """
    act = ACTIVATIONS[spec.activation]
    x = input_
    in_dim = x.shape[-1] if hasattr(x, "shape") else np.asarray(x).shape[-1]
    if in_dim != spec.layer_sizes[0]:
        raise ValidationError(
            f"MLP input size {in_dim} != first layer size {spec.layer_sizes[0]}"
        )
    n_layers = len(spec.layer_sizes) - 1
    for k in range(n_layers):
        w_name, b_name = f"{prefix}.layer{k}.W", f"{prefix}.layer{k}.b"
        if flat is not None:
            w = params.slice_of(flat, w_name)
            b = params.slice_of(flat, b_name)
            x = _matmul_wt(x, w) + b
        else:
            x = x @ params.block(w_name).T + params.block(b_name)
        if k < n_layers - 1:
            x = act(x)
    return x


def _matmul_wt(x, w):
    """x @ w.T for a taped weight block w of shape (out, in).

    The weight gradient contracts all leading (batch) axes of x against those
    of the output cotangent.
    """
    def w_grad(g, xv):
        batch_axes = tuple(range(g.ndim - 1))
        return np.tensordot(g, xv, axes=(batch_axes, batch_axes))

    if isinstance(x, Var):
        out = Var(x.value @ w.value.T, w.tape, (x, w))
        out._backward = lambda g: (g @ w.value, w_grad(g, x.value))
    else:
        xv = np.asarray(x, dtype=np.float64)
        out = Var(xv @ w.value.T, w.tape, (w,))
        out._backward = lambda g: (w_grad(g, xv),)
    return out


def l1_norm(x):
    """Sum of absolute values; works on Var or numpy input."""
    if isinstance(x, Var):
        return absval(x).sum()
    return float(np.abs(x).sum())


def finite_diff_grad(loss_fn, params, step=1e-6):
    """Central-difference gradient oracle; test-only by design."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    for i in range(params.size):
        p = params.copy()
        p[i] += step
        hi = loss_fn(p)
        p[i] -= 2 * step
        lo = loss_fn(p)
        grad[i] = (hi - lo) / (2 * step)
    return grad

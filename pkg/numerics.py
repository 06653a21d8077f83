"""Dense 64-bit arrays with tape-based reverse-mode differentiation.

Every differentiable operation computes its value with numpy and, when a
``TapeContext`` is active and one of its inputs requires a gradient, records
a closure that maps the output adjoint to the input adjoints. ``backward``
replays those closures in exact reverse execution order.
"""

import logging
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ArgumentError, DimensionError, TapeStateError, VersionError

logger = logging.getLogger(__name__)

CHECKPOINT_HEADER = "ilnet-checkpoint 1"

_local = threading.local()


def _tape_stack() -> List["TapeContext"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional["TapeContext"]:
    """The innermost active tape of the calling thread, if any"""
    stack = _tape_stack()
    return stack[-1] if stack else None


class DenseArray:
    """Row-major float64 array that participates in differentiation"""

    __slots__ = ("data", "requires_grad", "tape", "name")
    # numpy defers binary operators to DenseArray so ndarray + DenseArray records too
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, copy: bool = True):
        if copy:
            self.data = np.array(data, dtype=np.float64)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape: Optional[TapeContext] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"DenseArray(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


ArrayLike = Union[DenseArray, np.ndarray, float, int, Sequence]
Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class TapeEntry:
    op: str
    output: DenseArray
    inputs: Tuple[DenseArray, ...]
    adjoint: Adjoint


class TapeContext:
    """Ordered record of executed differentiable operations.

    Use as a context manager; operations run inside the block are recorded
    on this tape. A tape can be replayed by ``backward`` exactly once.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.consumed = False

    def __enter__(self) -> "TapeContext":
        if self.consumed:
            raise TapeStateError("tape was already consumed by backward; start a new forward pass")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, output: DenseArray, inputs: Tuple[DenseArray, ...], adjoint: Adjoint):
        if self.consumed:
            raise TapeStateError("cannot record on a consumed tape")
        self.entries.append(TapeEntry(op, output, inputs, adjoint))

    def gradients(self, loss: DenseArray) -> Dict[int, np.ndarray]:
        """Adjoints of every recorded leaf keyed by ``id``; consumes the tape"""
        if self.consumed:
            raise TapeStateError("backward called twice without a new forward pass")
        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = adjoints.pop(id(entry.output), None)
            if g is None:
                continue
            for node, gx in zip(entry.inputs, entry.adjoint(g)):
                if gx is None or not node.requires_grad:
                    continue
                key = id(node)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + gx
                else:
                    adjoints[key] = gx
        self.consumed = True
        return adjoints


def as_dense(x: ArrayLike) -> DenseArray:
    if isinstance(x, DenseArray):
        return x
    return DenseArray(x, copy=False)


def _result(op: str, data: np.ndarray, inputs: Tuple[DenseArray, ...], adjoint: Adjoint) -> DenseArray:
    out = DenseArray(data, copy=False)
    tape = current_tape()
    if tape is not None and any(x.requires_grad for x in inputs):
        out.requires_grad = True
        out.tape = tape
        tape.record(op, out, inputs, adjoint)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: DenseArray, b: DenseArray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# element-wise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a: ArrayLike, b: ArrayLike) -> DenseArray:
    a, b = as_dense(a), as_dense(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    y = ad / bd
    return _result("div", y, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * y / bd, bd.shape)))


def neg(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    return _result("neg", -x.data, (x,), lambda g: (-g,))


def square(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    xd = x.data
    return _result("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def exp(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    y = np.exp(x.data)
    return _result("exp", y, (x,), lambda g: (g * y,))


def log(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    xd = x.data
    return _result("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    y = np.sqrt(x.data)
    return _result("sqrt", y, (x,), lambda g: (0.5 * g / y,))


def sigmoid(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    y = 1.0 / (1.0 + np.exp(-x.data))
    return _result("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: ArrayLike) -> DenseArray:
    """x * sigmoid(x); smooth everywhere, so finite differences stay kink-free"""
    x = as_dense(x)
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _result("silu", xd * s, (x,), lambda g: (g * (s + xd * s * (1.0 - s)),))


def tanh(x: ArrayLike) -> DenseArray:
    x = as_dense(x)
    y = np.tanh(x.data)
    return _result("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def reduce_sum(x: ArrayLike, axis=None, keepdims: bool = False) -> DenseArray:
    x = as_dense(x)
    shape = x.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.sum(x.data, axis=axis, keepdims=keepdims), (x,), adjoint)


def reduce_mean(x: ArrayLike, axis=None, keepdims: bool = False) -> DenseArray:
    x = as_dense(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / max(count, 1))


def reshape(x: ArrayLike, shape: Sequence[int]) -> DenseArray:
    x = as_dense(x)
    original = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view shape {original} as {tuple(shape)}")
    return _result("reshape", y, (x,), lambda g: (g.reshape(original),))


def transpose(x: ArrayLike, axes: Sequence[int]) -> DenseArray:
    x = as_dense(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inverse),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(x: ArrayLike, key) -> DenseArray:
    x = as_dense(x)
    shape = x.shape
    basic = _is_basic_index(key)

    def adjoint(g):
        z = np.zeros(shape)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _result("getitem", np.array(x.data[key]), (x,), adjoint)


def gather_rows(x: ArrayLike, index: np.ndarray) -> DenseArray:
    """x[index] along axis 0; repeated indices accumulate in the adjoint"""
    x = as_dense(x)
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def adjoint(g):
        z = np.zeros(shape)
        np.add.at(z, index, g)
        return (z,)

    return _result("gather_rows", x.data[index], (x,), adjoint)


def scatter_add(src: ArrayLike, index: np.ndarray, size: int) -> DenseArray:
    """Sum rows of ``src`` into ``size`` destination rows, in row order"""
    src = as_dense(src)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != src.shape[0]:
        raise DimensionError(f"scatter_add: {index.shape[0]} indices for source shape {src.shape}")
    out = np.zeros((size,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return _result("scatter_add", out, (src,), lambda g: (g[index],))


def concat(xs: Sequence[ArrayLike], axis: int = -1) -> DenseArray:
    xs = tuple(as_dense(x) for x in xs)
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}")
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _result("concat", data, xs, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(xs: Sequence[ArrayLike], axis: int = -1) -> DenseArray:
    xs = tuple(as_dense(x) for x in xs)
    try:
        data = np.stack([x.data for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: incompatible shapes {[x.shape for x in xs]}")
    return _result("stack", data, xs,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(xs))))


# ---------------------------------------------------------------------------
# neural primitives
# ---------------------------------------------------------------------------

def forward_linear(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None) -> DenseArray:
    """y[.., j] = sum_i x[.., i] * w[i, j] + b[j]"""
    x, w = as_dense(x), as_dense(w)
    if w.ndim != 2 or x.ndim == 0 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} does not match weight shape {w.shape}")
    din, dout = w.shape
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, din)
    y2 = x2 @ wd
    inputs: Tuple[DenseArray, ...] = (x, w)
    if b is not None:
        b = as_dense(b)
        if b.shape != (dout,):
            raise DimensionError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
        y2 = y2 + b.data
        inputs = (x, w, b)

    def adjoint(g):
        g2 = g.reshape(-1, dout)
        grads = ((g2 @ wd.T).reshape(xd.shape), x2.T @ g2)
        if len(inputs) == 3:
            grads = grads + (g2.sum(axis=0),)
        return grads

    return _result("linear", y2.reshape(xd.shape[:-1] + (dout,)), inputs, adjoint)


def softmax(x: ArrayLike, axis: int = -1) -> DenseArray:
    x = as_dense(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)
    return _result("softmax", y, (x,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def log_softmax(x: ArrayLike, axis: int = -1) -> DenseArray:
    x = as_dense(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    y = z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    p = np.exp(y)
    return _result("log_softmax", y, (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def segment_softmax(scores: ArrayLike, segments: np.ndarray, num_segments: int) -> DenseArray:
    """Softmax over rows of ``scores`` that share a segment id"""
    scores = as_dense(scores)
    seg = np.asarray(segments, dtype=np.int64)
    s = scores.data
    if seg.shape[0] != s.shape[0]:
        raise DimensionError(f"segment_softmax: {seg.shape[0]} segment ids for scores of shape {s.shape}")
    peak = np.full((num_segments,) + s.shape[1:], -np.inf)
    np.maximum.at(peak, seg, s)
    e = np.exp(s - peak[seg])
    total = np.zeros_like(peak)
    np.add.at(total, seg, e)
    a = e / total[seg]

    def adjoint(g):
        ga = g * a
        acc = np.zeros_like(peak)
        np.add.at(acc, seg, ga)
        return (ga - a * acc[seg],)

    return _result("segment_softmax", a, (scores,), adjoint)


def conv2d(x: ArrayLike, weight: ArrayLike, bias: Optional[ArrayLike] = None) -> DenseArray:
    """Valid cross-correlation of [C, L, W] or [B, C, L, W] with weight [O, C, kl, kw]"""
    x, weight = as_dense(x), as_dense(weight)
    if weight.ndim != 4 or x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: unsupported input shape {x.shape} / weight shape {weight.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    wd = weight.data
    out_ch, in_ch, kl, kw = wd.shape
    batch, channels, length, width = xd.shape
    if channels != in_ch:
        raise DimensionError(f"conv2d: input shape {x.shape} has {channels} channels, weight {wd.shape} expects {in_ch}")
    if kl > length or kw > width:
        raise DimensionError(f"conv2d: kernel ({kl}, {kw}) larger than input extent ({length}, {width})")
    lo, wo = length - kl + 1, width - kw + 1
    out = np.zeros((batch, out_ch, lo, wo))
    inputs: Tuple[DenseArray, ...] = (x, weight)
    if bias is not None:
        bias = as_dense(bias)
        if bias.shape != (out_ch,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} for {out_ch} output channels")
        out += bias.data[None, :, None, None]
        inputs = (x, weight, bias)
    for i in range(kl):
        for j in range(kw):
            out += np.einsum("oc,bclw->bolw", wd[:, :, i, j], xd[:, :, i:i + lo, j:j + wo])

    def adjoint(g):
        g4 = g[None] if unbatched else g
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for i in range(kl):
            for j in range(kw):
                gx[:, :, i:i + lo, j:j + wo] += np.einsum("oc,bolw->bclw", wd[:, :, i, j], g4)
                gw[:, :, i, j] = np.einsum("bolw,bclw->oc", g4, xd[:, :, i:i + lo, j:j + wo])
        grads = (gx[0] if unbatched else gx, gw)
        if len(inputs) == 3:
            grads = grads + (g4.sum(axis=(0, 2, 3)),)
        return grads

    return _result("conv2d", out[0] if unbatched else out, inputs, adjoint)


def huber(pred: ArrayLike, target: ArrayLike, delta: float = 1.0) -> DenseArray:
    """Element-wise Huber penalty of pred - target"""
    pred, target = as_dense(pred), as_dense(target)
    if pred.shape != target.shape:
        raise DimensionError(f"huber: prediction shape {pred.shape} does not match target shape {target.shape}")
    r = pred.data - target.data
    a = np.abs(r)
    quadratic = a <= delta
    value = np.where(quadratic, 0.5 * r * r, delta * (a - 0.5 * delta))
    slope = np.where(quadratic, r, delta * np.sign(r))
    return _result("huber", value, (pred, target), lambda g: (g * slope, -g * slope))


def loss_huber(pred: ArrayLike, target: ArrayLike, delta: float = 1.0) -> DenseArray:
    return reduce_mean(huber(pred, target, delta))


def loss_cross_entropy(logits: ArrayLike, target_index: int) -> DenseArray:
    logits = as_dense(logits)
    if logits.ndim != 1:
        raise DimensionError(f"cross entropy expects logits of shape [K], got {logits.shape}")
    if not 0 <= int(target_index) < logits.shape[0]:
        raise ArgumentError(f"target index {target_index} outside [0, {logits.shape[0]})")
    return neg(getitem(log_softmax(logits, axis=0), int(target_index)))


# ---------------------------------------------------------------------------
# parameters, backward, checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Named learnable arrays with gradient slots, kept in creation order"""

    def __init__(self):
        self._values: Dict[str, DenseArray] = {}
        self._grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> DenseArray:
        if name in self._values:
            raise ArgumentError(f"duplicate parameter name '{name}'")
        param = DenseArray(value, requires_grad=True, name=name)
        if param.ndim == 0:
            raise DimensionError(f"parameter '{name}' must have at least one dimension")
        self._values[name] = param
        self._grads[name] = np.zeros_like(param.data)
        return param

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> DenseArray:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> List[str]:
        return list(self._values)

    def items(self) -> Iterable[Tuple[str, DenseArray]]:
        return self._values.items()

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: p.shape for name, p in self._values.items()}

    def num_parameters(self, prefix: str = "") -> int:
        return int(sum(p.size for name, p in self._values.items() if name.startswith(prefix)))

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self):
        for g in self._grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Mapping[str, np.ndarray], scale: float = 1.0):
        """Add gradients in parameter creation order"""
        for name in self._values:
            g = grads.get(name)
            if g is not None:
                self._grads[name] += g * scale

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self._values.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]):
        """Copy values in place so modules holding parameter references see them"""
        if list(arrays) != list(self._values):
            missing = sorted(set(self._values) - set(arrays))
            extra = sorted(set(arrays) - set(self._values))
            raise VersionError(f"parameter names differ from the model (missing {missing[:5]}, unexpected {extra[:5]})")
        for name, value in arrays.items():
            param = self._values[name]
            if value.shape != param.shape:
                raise VersionError(f"parameter '{name}' has shape {value.shape}, model expects {param.shape}")
            param.data[...] = value


def param_gradients(loss: DenseArray, params: ParamStore) -> Dict[str, np.ndarray]:
    """d loss / d param for every parameter reached by the loss's tape"""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise TapeStateError("loss was not produced by tape-recorded operations")
    adjoints = loss.tape.gradients(loss)
    return {name: adjoints[id(p)] for name, p in params.items() if id(p) in adjoints}


def backward(loss: DenseArray, params: ParamStore):
    params.accumulate(param_gradients(loss, params))


def first_non_finite(named: Iterable[Tuple[str, ArrayLike]]) -> Optional[str]:
    for name, value in named:
        data = value.data if isinstance(value, DenseArray) else np.asarray(value)
        if not np.all(np.isfinite(data)):
            return name
    return None


def write_array_blob(arrays: Mapping[str, np.ndarray], manifest_path: Path, blob_path: Path):
    """Text manifest of names and shapes plus one little-endian float64 blob"""
    lines = [CHECKPOINT_HEADER]
    chunks = []
    for name, value in arrays.items():
        value = np.asarray(value)
        lines.append(f"{name}\t{' '.join(str(d) for d in value.shape)}")
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    Path(manifest_path).write_text("\n".join(lines) + "\n")
    Path(blob_path).write_bytes(b"".join(chunks))


def read_array_blob(manifest_path: Path, blob_path: Path) -> Dict[str, np.ndarray]:
    lines = Path(manifest_path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        found = lines[0] if lines else "<empty>"
        raise VersionError(f"{manifest_path}: expected header '{CHECKPOINT_HEADER}', found '{found}'")
    blob = np.frombuffer(Path(blob_path).read_bytes(), dtype="<f8")
    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for line in lines[1:]:
        if not line.strip():
            continue
        name, _, dims = line.partition("\t")
        shape = tuple(int(d) for d in dims.split())
        count = int(np.prod(shape)) if shape else 1
        if offset + count > blob.size:
            raise VersionError(f"{blob_path}: blob shorter than manifest requires")
        arrays[name] = blob[offset:offset + count].astype(np.float64).reshape(shape)
        offset += count
    if offset != blob.size:
        raise VersionError(f"{blob_path}: {blob.size - offset} trailing values not described by the manifest")
    return arrays


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _directional_difference(loss_fn: Callable[[], DenseArray], value: np.ndarray,
                            direction: np.ndarray, eps: float) -> float:
    original = value.copy()
    try:
        value[...] = original + eps * direction
        plus = float(loss_fn().data)
        value[...] = original - eps * direction
        minus = float(loss_fn().data)
    finally:
        value[...] = original
    return (plus - minus) / (2.0 * eps)


def gradient_check(loss_fn: Callable[[], DenseArray], params: ParamStore, names: Optional[Sequence[str]] = None,
                   eps: float = 1e-5, entries_per_tensor: int = 2, seed: int = 0,
                   floor: float = 1e-3, full: bool = False) -> Dict[str, float]:
    """Worst relative error per parameter between backward and central differences.

    Each tensor is probed along one random unit direction and at a few
    sampled entries, or at every entry when ``full`` is set.
    """
    params.zero_grad()
    with TapeContext():
        loss = loss_fn()
    backward(loss, params)
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for name in names if names is not None else params.names():
        value = params[name].data
        grad = params.grad(name).copy()
        direction = rng.standard_normal(value.shape)
        direction /= np.linalg.norm(direction)
        errors = [relative_error(float(np.sum(grad * direction)),
                                 _directional_difference(loss_fn, value, direction, eps), floor)]
        if full:
            entries = range(value.size)
        else:
            entries = rng.choice(value.size, size=min(entries_per_tensor, value.size), replace=False)
        for flat in entries:
            unit = np.zeros(value.shape)
            unit.flat[flat] = 1.0
            numeric = _directional_difference(loss_fn, value, unit, eps)
            errors.append(relative_error(float(grad.flat[flat]), numeric, floor))
        worst[name] = max(errors)
        logger.debug(f"gradient check {name}: worst relative error {worst[name]:.3e} over {len(errors)} probes")
    return worst

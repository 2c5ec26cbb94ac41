"""N-dimensional tensors with define-by-run reverse-mode differentiation.

Every value in the package is a `Tensor`: a C-contiguous float64 numpy array plus
gradient bookkeeping. Operations whose inputs require gradients are recorded on a
per-thread `Tape`; `backward()` replays the recorded entries reachable from a
scalar loss in exact reverse recording order.

There is no implicit broadcasting. Elementwise operations demand equal shapes and
`expand()` is the only way to repeat a tensor along new or unit axes.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np

from .exceptions import GradientError, NumericalError, ShapeError, ValidationError
from .logger import logger

Array = np.ndarray
Axis = Union[None, int, Tuple[int, ...]]
Scalar = Union[int, float]
BackwardRule = Callable[[Array], Sequence[Optional[Array]]]


@dataclass(eq=False)
class TapeEntry:
    """One recorded operation and the rule mapping dOutput to dInputs."""

    seq: int
    op: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    rule: BackwardRule


class Tape:
    """Ordered record of operations executed since they were last consumed."""

    def __init__(self) -> None:
        self.entries: List[TapeEntry] = []
        self.enabled = True
        self._next_seq = 0

    def record(
        self,
        op: str,
        inputs: Tuple["Tensor", ...],
        output: "Tensor",
        rule: BackwardRule,
    ) -> TapeEntry:
        """Append an operation; inputs always precede it in recording order."""
        entry = TapeEntry(self._next_seq, op, inputs, output, rule)
        self._next_seq += 1
        self.entries.append(entry)
        return entry

    def clear(self) -> None:
        """Drop every recorded entry and detach the tensors they produced."""
        for entry in self.entries:
            entry.output._entry = None
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def get_tape() -> Tape:
    """Get the calling thread's tape, creating it on first use."""
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = Tape()
        _local.tape = tape
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on the calling thread's tape."""
    tape = get_tape()
    previous = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = previous


class Tensor:
    """N-dimensional real array that can participate in differentiation."""

    def __init__(self, data: Any, requires_grad: bool = False) -> None:
        array = np.array(data, dtype=np.float64)
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got {array.shape}")
        self.data: Array = array
        self.requires_grad = requires_grad
        self.grad: Optional[Array] = None
        self._entry: Optional[TapeEntry] = None

    @classmethod
    def _wrap(cls, array: Array) -> "Tensor":
        out = cls.__new__(cls)
        array = np.ascontiguousarray(array, dtype=np.float64)
        if any(extent <= 0 for extent in array.shape):
            raise ShapeError(f"Tensor extents must be positive, got {array.shape}")
        out.data = array
        out.requires_grad = False
        out.grad = None
        out._entry = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._entry is None

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def update_(self, values: Any) -> None:
        """Replace the values in place (parameter updates only)."""
        array = np.array(values, dtype=np.float64)
        if array.shape != self.data.shape:
            raise ShapeError(
                f"update_ expects shape {self.shape}, got {tuple(array.shape)}"
            )
        self.data = array

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Scalar) -> "Tensor":
        return add(self, other)

    def __sub__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Scalar) -> "Tensor":
        return add(scale(self, -1.0), other)

    def __mul__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Scalar) -> "Tensor":
        return mul(self, other)

    def __truediv__(self, other: Union["Tensor", Scalar]) -> "Tensor":
        return div(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def tensor(shape: Sequence[int], values: Sequence[float]) -> Tensor:
    """Build a tensor from an explicit shape and row-major values."""
    shape = tuple(int(extent) for extent in shape)
    if any(extent <= 0 for extent in shape):
        raise ShapeError(f"Tensor extents must be positive, got {shape}")
    values = list(values)
    if int(np.prod(shape)) != len(values):
        raise ShapeError(
            f"Shape {shape} needs {int(np.prod(shape))} values, got {len(values)}"
        )
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))


def parameter(values: Any) -> Tensor:
    """Wrap values as a leaf tensor that requires gradients."""
    return Tensor(values, requires_grad=True)


def apply_op(
    op: str, data: Array, inputs: Sequence[Tensor], rule: BackwardRule
) -> Tensor:
    """Wrap an op's result and record it when any input requires gradients.

    Args:
        op: Operation name (for diagnostics)
        data: Forward result
        inputs: Tensors the result depends on
        rule: Maps the output gradient to one gradient (or None) per input

    Returns:
        Output tensor, on the tape when recording applies

    Raises:
        NumericalError: If the forward result is not finite
    """
    out = Tensor._wrap(data)
    if not np.all(np.isfinite(out.data)):
        raise NumericalError(f"{op} produced non-finite values")
    tape = get_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = tape.record(op, tuple(inputs), out, rule)
    return out


def _reachable(loss: Tensor) -> Set[int]:
    seen: Set[int] = set()
    if loss._entry is None:
        return seen
    stack = [loss._entry]
    seen.add(id(loss._entry))
    while stack:
        entry = stack.pop()
        for inp in entry.inputs:
            parent = inp._entry
            if parent is not None and id(parent) not in seen:
                seen.add(id(parent))
                stack.append(parent)
    return seen


def _accumulate(t: Tensor, g: Array) -> None:
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every tensor that requires gradients reachable from `loss`.

    Gradients accumulate additively, both across fan-out inside one graph and
    across separate calls. Consumed tape entries are removed.

    Raises:
        GradientError: If `loss` is not a scalar or does not depend on the tape
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor that requires grad")

    seed = np.ones_like(loss.data)
    if loss._entry is None:
        _accumulate(loss, seed)
        return

    tape = get_tape()
    reachable = _reachable(loss)
    grads: Dict[int, Array] = {id(loss): seed}
    leaves: Dict[int, Tensor] = {}

    for entry in reversed(tape.entries):
        if id(entry) not in reachable:
            continue
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        _accumulate(entry.output, g)
        input_grads = entry.rule(g)
        for inp, ig in zip(entry.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.data.shape:
                raise GradientError(
                    f"{entry.op} backward produced shape {ig.shape} for input "
                    f"of shape {inp.shape}"
                )
            key = id(inp)
            grads[key] = grads[key] + ig if key in grads else ig
            if inp._entry is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        if key in grads:
            _accumulate(leaf, grads[key])

    consumed = [e for e in tape.entries if id(e) in reachable]
    tape.entries = [e for e in tape.entries if id(e) not in reachable]
    for entry in consumed:
        entry.output._entry = None
    logger.debug(f"backward replayed {len(consumed)} ops, {len(tape)} remain")


def _as_float(value: Union[Tensor, float, int]) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> Tensor:
    """Central-difference estimate of d f / d x.

    Perturbs `x` in place one element at a time and restores it afterwards.
    With `indices`, only those flat positions are estimated; the rest stay zero.

    Raises:
        ValidationError: If eps is not positive
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    estimate = np.zeros(x.size, dtype=np.float64)
    positions = range(x.size) if indices is None else indices
    with no_grad():
        for i in positions:
            original = flat[i]
            flat[i] = original + eps
            plus = _as_float(f(x))
            flat[i] = original - eps
            minus = _as_float(f(x))
            flat[i] = original
            estimate[i] = (plus - minus) / (2.0 * eps)
    return Tensor(estimate.reshape(x.shape))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ "
            "(no implicit broadcasting, use expand)"
        )


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("add", a, b)
        return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))
    c = float(b)
    return apply_op("add", a.data + c, (a,), lambda g: (g,))


def sub(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape("sub", a, b)
        return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))
    c = float(b)
    return apply_op("sub", a.data - c, (a,), lambda g: (g,))


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return apply_op("scale", a.data * c, (a,), lambda g: (g * c,))


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, 1.0 / float(b))
    _check_same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return apply_op("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return apply_op("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permute axes {axes} invalid for {a.ndim}-D tensor")
    inverse = tuple(int(i) for i in np.argsort(axes))
    data = np.transpose(a.data, axes)
    return apply_op("permute", data, (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D tensor, got {a.shape}")
    return permute(a, (1, 0))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(tuple(shape)).copy()
    except ValueError as e:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from e
    in_shape = a.data.shape
    return apply_op("reshape", data, (a,), lambda g: (g.reshape(in_shape),))


def _unbroadcast(g: Array, shape: Tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicitly repeat `a` along new leading axes and unit axes."""
    shape = tuple(int(extent) for extent in shape)
    if a.ndim > len(shape):
        raise ShapeError(f"cannot expand {a.shape} to fewer dimensions {shape}")
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"cannot expand {a.shape} to {shape}") from e
    in_shape = a.shape
    return apply_op("expand", data, (a,), lambda g: (_unbroadcast(g, in_shape),))


def _normalize_axes(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    normalized = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-D tensor")
        normalized.append(ax % ndim)
    return tuple(sorted(set(normalized)))


def _restore_reduced(
    g: Array, in_shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool
) -> Array:
    if not keepdims:
        g = np.reshape(
            g, tuple(1 if i in axes else n for i, n in enumerate(in_shape))
        )
    return np.broadcast_to(g, in_shape).copy()


def reduce_sum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    in_shape = a.shape
    data = a.data.sum(axis=axes, keepdims=keepdims)
    return apply_op(
        "sum",
        data,
        (a,),
        lambda g: (_restore_reduced(g, in_shape, axes, keepdims),),
    )


def reduce_mean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    in_shape = a.shape
    data = a.data.sum(axis=axes, keepdims=keepdims) / count
    return apply_op(
        "mean",
        data,
        (a,),
        lambda g: (_restore_reduced(g / count, in_shape, axes, keepdims),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return apply_op("log", out, (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return apply_op("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return apply_op("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-D tensor")
    return axis % ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed after subtracting the per-slice maximum."""
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g: Array) -> Tuple[Array]:
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def rule(g: Array) -> Tuple[Array]:
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an existing axis."""
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    first = tensors[0]
    axis = _check_axis(axis, first.ndim)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise ShapeError(
                f"concat: {t.shape} incompatible with {first.shape} on axis {axis}"
            )
    if len(tensors) == 1:
        return first
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return apply_op(
        "concat",
        data,
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack equal-shape tensors along a new axis."""
    if not tensors:
        raise ShapeError("stack needs at least one tensor")
    ndim = tensors[0].ndim + 1
    axis = _check_axis(axis, ndim)
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis, 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


def getitem(a: Tensor, index: Any) -> Tensor:
    """Basic slicing (ints and slices only)."""
    key = index if isinstance(index, tuple) else (index,)
    for part in key:
        if not isinstance(part, (int, slice, type(Ellipsis))):
            raise ShapeError(f"only basic slicing is supported, got {type(part)}")
    in_shape = a.shape
    data = a.data[key]

    def rule(g: Array) -> Tuple[Array]:
        full = np.zeros(in_shape, dtype=np.float64)
        full[key] = g
        return (full,)

    return apply_op("getitem", np.array(data), (a,), rule)


def pad(a: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero-pad each axis by (before, after)."""
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    if len(widths) != a.ndim or any(lo < 0 or hi < 0 for lo, hi in widths):
        raise ShapeError(f"invalid pad widths {widths} for shape {a.shape}")
    data = np.pad(a.data, widths, mode="constant")
    key = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return apply_op("pad", data, (a,), lambda g: (g[key],))

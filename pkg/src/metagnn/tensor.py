"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors that belong to it.
Tensors without a tape are constants; primitives over constants only are
evaluated eagerly and nothing is recorded. Parameters enter a tape through
:meth:`Tape.watch`, which returns one leaf tensor per parameter name.

Broadcasting is deliberately narrow: ``scalar_mul`` scales by a Python
float, and ``add``/``sub`` accept a row vector as their second operand
(bias addition). Every other binary primitive requires identical shapes.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

__all__ = [
    "Tape",
    "Tensor",
    "ParamSet",
    "PRIMITIVES",
    "apply_primitive",
    "constant",
    "backward",
    "sgd_step",
    "finite_diff_check",
    "dumps_exact",
    "paramset_to_document",
    "paramset_from_document",
]


class Tape:
    """Ordered record of primitive applications.

    Node ``i`` stores the backward closure of the primitive that produced it
    and the node ids of its tape-resident inputs; leaves store ``None``.
    Ids are assigned in creation order, so the list is topologically sorted.
    """

    def __init__(self):
        self._backward: list[Callable | None] = []
        self._inputs: list[tuple[int | None, ...]] = []

    def __len__(self):
        return len(self._backward)

    def _record(self, backward_fn, input_ids) -> int:
        self._backward.append(backward_fn)
        self._inputs.append(tuple(input_ids))
        return len(self._backward) - 1

    def leaf(self, array) -> Tensor:
        data = np.array(array, dtype=np.float64)
        return Tensor(data, self, self._record(None, ()))

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.leaf(value) for name, value in params.items()}


class Tensor:
    """A float64 array plus its position on a tape (``node_id``)."""

    __slots__ = ("data", "tape", "node_id")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: Tape | None = None, node_id: int | None = None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        where = "const" if self.tape is None else f"node={self.node_id}"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other)])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], scale=float(other))
        return apply_primitive("mul", [self, _as_tensor(other)])

    __rmul__ = __mul__

    def __truediv__(self, other):
        return apply_primitive("div", [self, _as_tensor(other)])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, _as_tensor(other)])

    def __neg__(self):
        return apply_primitive("scalar_mul", [self], scale=-1.0)


def constant(array) -> Tensor:
    """Wrap ``array`` as a detached float64 tensor."""
    return Tensor(np.array(array, dtype=np.float64))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# ---------------------------------------------------------------------------
# primitives
#
# Each forward returns ``(value, backward)`` where ``backward(g)`` yields one
# gradient (or None) per input.


def _require(cond, kind, message):
    if not cond:
        raise DimensionError(f"{kind}: {message}")


def _is_row_bias(a_shape, b_shape):
    if len(a_shape) != 2:
        return False
    return b_shape == (a_shape[1],) or b_shape == (1, a_shape[1])


def _matmul(a, b):
    _require(a.ndim == 2 and b.ndim == 2, "matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
    _require(a.shape[1] == b.shape[0], "matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


def _add_like(kind, sign):
    def forward(a, b):
        if a.shape == b.shape:
            return a + sign * b, lambda g: (g, sign * g)
        _require(_is_row_bias(a.shape, b.shape), kind, f"shapes {a.shape} and {b.shape} do not conform")
        return a + sign * b, lambda g: (g, (sign * g.sum(axis=0)).reshape(b.shape))

    return forward


def _mul(a, b):
    _require(a.shape == b.shape, "mul", f"shapes differ: {a.shape} vs {b.shape}")
    return a * b, lambda g: (g * b, g * a)


def _scalar_mul(a, *, scale):
    return a * scale, lambda g: (g * scale,)


def _div(a, b):
    _require(a.shape == b.shape, "div", f"shapes differ: {a.shape} vs {b.shape}")
    if np.any(b == 0.0):
        raise DomainError("div: division by zero")
    out = a / b
    return out, lambda g: (g / b, -g * out / b)


def _concat(*arrays, axis=1):
    _require(len(arrays) >= 1, "concat", "needs at least one input")
    ref = arrays[0]
    for arr in arrays[1:]:
        _require(arr.ndim == ref.ndim, "concat", "rank mismatch")
        other = [d for i, d in enumerate(arr.shape) if i != axis % arr.ndim]
        mine = [d for i, d in enumerate(ref.shape) if i != axis % ref.ndim]
        _require(other == mine, "concat", f"shapes {ref.shape} and {arr.shape} differ off axis {axis}")
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
    return out, lambda g: tuple(np.split(g, bounds, axis=axis))


def _relu(a):
    mask = a > 0.0
    return np.where(mask, a, 0.0), lambda g: (g * mask,)


def _leaky_relu(a, *, slope=0.2):
    factor = np.where(a > 0.0, 1.0, slope)
    return a * factor, lambda g: (g * factor,)


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out, lambda g: (g * out * (1.0 - out),)


def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _log(a):
    if np.any(a <= 0.0):
        raise DomainError("log: argument must be positive")
    return np.log(a), lambda g: (g / a,)


def _square(a):
    return a * a, lambda g: (2.0 * a * g,)


def _sqrt(a):
    if np.any(a < 0.0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a)

    def back(g):
        if np.any(out == 0.0):
            raise DomainError("sqrt: derivative undefined at zero")
        return (g / (2.0 * out),)

    return out, back


def _sum_reduce(a, *, axis=None):
    out = np.sum(a, axis=axis)
    if axis is None:
        return out, lambda g: (np.broadcast_to(g, a.shape).copy(),)
    return out, lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)


def _mean_reduce(a, *, axis=None):
    count = a.size if axis is None else a.shape[axis]
    if count == 0:
        raise DomainError("mean_reduce: mean over an empty axis")
    out, back = _sum_reduce(a, axis=axis)
    return out / count, lambda g: (back(g)[0] / count,)


def _max_reduce(a, *, axis=None):
    if a.size == 0:
        raise DomainError("max_reduce: max over an empty tensor")
    if axis is None:
        idx = int(np.argmax(a))  # first occurrence in row-major order

        def back(g):
            grad = np.zeros(a.size, dtype=a.dtype)
            grad[idx] = float(g)
            return (grad.reshape(a.shape),)

        return a.reshape(-1)[idx], back

    arg = np.argmax(a, axis=axis)
    out = np.take_along_axis(a, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        grad = np.zeros_like(a)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return out, back


def _check_segments(kind, a, segment_ids, num_segments):
    segment_ids = np.asarray(segment_ids, dtype=np.int64)
    _require(segment_ids.ndim == 1 and len(segment_ids) == a.shape[0], kind,
             f"need one segment id per row ({a.shape[0]} rows, {segment_ids.shape} ids)")
    if len(segment_ids) and (segment_ids.min() < 0 or segment_ids.max() >= num_segments):
        raise DimensionError(f"{kind}: segment id out of range [0, {num_segments})")
    return segment_ids


def _segment_sum(a, *, segment_ids, num_segments):
    ids = _check_segments("segment_sum", a, segment_ids, num_segments)
    out = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(out, ids, a)
    return out, lambda g: (g[ids],)


def _segment_max(a, *, segment_ids, num_segments):
    """Per-segment maximum; empty segments yield zeros.

    The backward pass routes each output entry's gradient to the
    lowest-index row attaining the maximum.
    """
    ids = _check_segments("segment_max", a, segment_ids, num_segments)
    n = a.shape[0]
    flat = a.reshape(n, int(np.prod(a.shape[1:])))
    out = np.full((num_segments, flat.shape[1]), -np.inf, dtype=a.dtype)
    np.maximum.at(out, ids, flat)
    empty = np.ones(num_segments, dtype=bool)
    empty[ids] = False
    out[empty] = 0.0
    winner = np.full(out.shape, n, dtype=np.int64)
    rows, cols = np.nonzero(flat == out[ids])
    np.minimum.at(winner, (ids[rows], cols), rows)
    seg, col = np.nonzero(winner < n)
    src = winner[seg, col]

    def back(g):
        grad = np.zeros_like(flat)
        grad[src, col] = g.reshape(num_segments, flat.shape[1])[seg, col]
        return (grad.reshape(a.shape),)

    return out.reshape((num_segments,) + a.shape[1:]), back


def _gather(a, *, rows):
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise DimensionError(f"gather: row index out of range [0, {a.shape[0]})")

    def back(g):
        grad = np.zeros_like(a)
        np.add.at(grad, rows, g)
        return (grad,)

    return a[rows], back


def _softmax_over_segments(a, *, segment_ids, num_segments):
    """Softmax of ``a`` taken independently within each segment of rows."""
    ids = _check_segments("softmax_over_segments", a, segment_ids, num_segments)
    peak = np.full((num_segments,) + a.shape[1:], -np.inf, dtype=a.dtype)
    np.maximum.at(peak, ids, a)
    e = np.exp(a - peak[ids])
    denom = np.zeros_like(peak)
    np.add.at(denom, ids, e)
    out = e / denom[ids]

    def back(g):
        inner = np.zeros_like(peak)
        np.add.at(inner, ids, g * out)
        return (out * (g - inner[ids]),)

    return out, back


PRIMITIVES: dict[str, Callable] = {
    "matmul": _matmul,
    "add": _add_like("add", 1.0),
    "sub": _add_like("sub", -1.0),
    "mul": _mul,
    "scalar_mul": _scalar_mul,
    "div": _div,
    "concat": _concat,
    "relu": _relu,
    "leaky_relu": _leaky_relu,
    "sigmoid": _sigmoid,
    "exp": _exp,
    "log": _log,
    "square": _square,
    "sqrt": _sqrt,
    "sum_reduce": _sum_reduce,
    "mean_reduce": _mean_reduce,
    "max_reduce": _max_reduce,
    "segment_sum": _segment_sum,
    "segment_max": _segment_max,
    "gather": _gather,
    "softmax_over_segments": _softmax_over_segments,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate primitive ``kind`` and record it on the inputs' tape.

    Keyword attributes carry non-differentiable arguments (``axis``,
    ``slope``, ``segment_ids`` ...). Raises :class:`DomainError` if a
    finite input produces a non-finite output.
    """
    try:
        forward = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    inputs = [_as_tensor(x) for x in inputs]
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError(f"{kind}: inputs live on different tapes")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        value, back = forward(*(t.data for t in inputs), **attrs)
    value = np.asarray(value)
    if value.dtype.kind != "f":
        value = value.astype(np.float64)
    if not np.all(np.isfinite(value)):
        raise DomainError(f"{kind}: produced non-finite values")
    if not tapes:
        return Tensor(value)
    tape = next(iter(tapes.values()))
    node = tape._record(back, [t.node_id for t in inputs])
    return Tensor(value, tape, node)


def backward(loss: Tensor, leaves: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to each named leaf.

    Leaves the loss does not depend on receive zero gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        return {name: np.zeros_like(t.data) for name, t in leaves.items()}
    grads: list[np.ndarray | None] = [None] * (loss.node_id + 1)
    grads[loss.node_id] = np.ones_like(loss.data)
    for node in range(loss.node_id, -1, -1):
        g = grads[node]
        fn = tape._backward[node]
        if g is None or fn is None:
            continue
        for src, gi in zip(tape._inputs[node], fn(g)):
            if src is None or gi is None:
                continue
            grads[src] = gi if grads[src] is None else grads[src] + gi
        grads[node] = None
    out = {}
    for name, t in leaves.items():
        if t.tape is not tape or t.node_id > loss.node_id or grads[t.node_id] is None:
            out[name] = np.zeros_like(t.data)
        else:
            out[name] = np.array(grads[t.node_id]).reshape(t.shape)
    return out


# ---------------------------------------------------------------------------
# parameter sets


class ParamSet(Mapping):
    """Immutable mapping from parameter name to a read-only float64 array."""

    __slots__ = ("_arrays",)

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        frozen = {}
        for name, value in (arrays or {}).items():
            arr = np.array(value, dtype=np.float64)
            arr.setflags(write=False)
            frozen[name] = arr
        self._arrays = frozen

    def __getitem__(self, name) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self):
        return len(self._arrays)

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )

    __hash__ = None

    def __repr__(self):
        return f"ParamSet({len(self)} tensors, {self.num_scalars()} scalars)"

    def num_scalars(self) -> int:
        return int(sum(a.size for a in self._arrays.values()))

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: a.shape for k, a in self._arrays.items()}

    def replace(self, **updates) -> ParamSet:
        merged = dict(self._arrays)
        for name, value in updates.items():
            if name not in merged:
                raise ContractError(f"unknown parameter {name!r}")
            merged[name] = value
        return ParamSet(merged)


def sgd_step(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """Return ``params - lr * grads``; ``params`` is left untouched."""
    if not lr >= 0.0:
        raise ContractError(f"learning rate must be non-negative, got {lr}")
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"missing gradient for {missing}")
    new = {}
    for name, value in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != value.shape:
            raise DimensionError(f"gradient for {name!r} has shape {g.shape}, expected {value.shape}")
        new[name] = value - lr * g
    return ParamSet(new)


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    probe_count: int = 100,
    eps: float = 1e-5,
    seed: int = 0,
    extended: bool = True,
    kink_tol: float | None = 1e-5,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` maps named tensors to a scalar loss tensor. ``probe_count``
    scalar coordinates are drawn uniformly without replacement (with
    replacement when there are fewer coordinates than probes). The relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``extended`` the perturbed losses are evaluated in ``np.longdouble``.
    In float64 a coordinate whose exact gradient is zero (a bias cancelled by
    a following normalization, say) shows ~1e-11 of rounding noise at
    ``eps=1e-5``, which the 1e-8 floor turns into a spurious 1e-3 error.

    ReLU and max make losses piecewise smooth, and a central difference that
    straddles a kink is meaningless. Each probe also evaluates ``+-eps/2``;
    on a smooth stretch the three second differences over the five points
    agree to O(eps^3), while a kink anywhere in ``[-eps, eps]`` makes their
    spread, divided by ``2 eps``, at least a quarter of the error it causes.
    A probe whose scaled spread exceeds ``kink_tol`` relative to its central
    difference is replaced by an untried coordinate (at most ``probe_count``
    replacements). ``kink_tol=None`` keeps every probe.
    """
    if probe_count < 1:
        raise ContractError("probe_count must be >= 1")
    if not 0.0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    tape = Tape()
    leaves = tape.watch(params)
    analytic = backward(loss_fn(leaves), leaves)

    names = list(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    probes = rng.choice(total, size=probe_count, replace=probe_count > total)
    dtype = np.longdouble if extended else np.float64
    base = {n: params[n].astype(dtype) for n in names}
    step = dtype(eps)

    def evaluate(name, flat_index, delta):
        arr = base[name].copy()
        arr.reshape(-1)[flat_index] += delta
        perturbed = {n: Tensor(arr if n == name else base[n]) for n in names}
        value = loss_fn(perturbed).data.reshape(-1)[0]
        if not np.isfinite(value):
            raise DomainError(f"non-finite loss at perturbed coordinate of {name!r}")
        return value

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    centre = loss_fn({n: Tensor(base[n]) for n in names}).data.reshape(-1)[0]
    half = step / 2
    worst = 0.0
    tried = set(int(i) for i in probes)
    spare = iter([int(i) for i in rng.permutation(total) if int(i) not in tried][:probe_count])
    queue = list(probes)
    while queue:
        probe = queue.pop(0)
        which = int(np.searchsorted(offsets, probe, side="right") - 1)
        name, local = names[which], int(probe - offsets[which])
        up, down = evaluate(name, local, step), evaluate(name, local, -step)
        numeric = float((up - down) / (2 * step))
        if kink_tol is not None:
            f = [down, evaluate(name, local, -half), centre, evaluate(name, local, half), up]
            second = [f[i] - 2 * f[i + 1] + f[i + 2] for i in range(3)]
            spread = float((max(second) - min(second)) / (2 * step))
            if spread / max(abs(numeric), 1e-8) > kink_tol:
                replacement = next(spare, None)
                if replacement is not None:
                    queue.append(replacement)
                    continue
        exact = float(analytic[name].reshape(-1)[local])
        worst = max(worst, abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# persistence


def dumps_exact(obj) -> str:
    """JSON text with every float written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        if not math.isfinite(obj):
            raise DomainError(f"cannot serialize non-finite float {obj}")
        return format(float(obj), ".17g")
    if isinstance(obj, np.ndarray):
        return dumps_exact(obj.tolist())
    if isinstance(obj, Mapping):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps_exact(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps_exact(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _tensor_doc(arr):
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _tensor_from_doc(name, doc):
    try:
        shape = tuple(int(d) for d in doc["shape"])
        data = np.asarray(doc["data"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"tensor {name!r}: malformed entry ({exc})") from None
    if data.size != math.prod(shape):
        raise DimensionError(f"tensor {name!r}: {data.size} values for shape {shape}")
    return data.reshape(shape)


def paramset_to_document(arch: str, hyperparams: Mapping, params: ParamSet,
                         buffers: ParamSet | None = None) -> dict:
    """Plain-dict form of a parameter document (serialize with :func:`dumps_exact`)."""
    doc = {
        "arch": arch,
        "hyperparams": dict(hyperparams),
        "params": {name: _tensor_doc(arr) for name, arr in params.items()},
    }
    if buffers:
        doc["buffers"] = {name: _tensor_doc(arr) for name, arr in buffers.items()}
    return doc


def paramset_from_document(doc: Mapping) -> tuple[str, dict, ParamSet, ParamSet]:
    for key in ("arch", "hyperparams", "params"):
        if key not in doc:
            raise ContractError(f"parameter document lacks {key!r}")
    params = ParamSet({k: _tensor_from_doc(k, v) for k, v in doc["params"].items()})
    buffers = ParamSet({k: _tensor_from_doc(k, v) for k, v in doc.get("buffers", {}).items()})
    return str(doc["arch"]), dict(doc["hyperparams"]), params, buffers

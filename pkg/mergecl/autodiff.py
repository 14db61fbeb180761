"""Reverse-mode differentiation over dense float64 arrays.

The engine is deliberately small: it covers what a feed-forward softmax
classifier, its per-example log-likelihood gradients and the EWC penalty need.
Operations record themselves on the `GradTape` owning their inputs; values
that were never watched by a tape are plain constants.
"""

import logging
from collections.abc import Callable, Iterable, Iterator, Mapping, Sequence
from typing import Optional, Union

import numpy as np
from numpy.typing import ArrayLike

from mergecl.errors import AlignmentError, InputError, UsageError

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ParamSet(Mapping[str, np.ndarray]):
    """Named float64 arrays kept in lexicographic name order.

    Arrays are copied on construction and frozen, so a ParamSet can be shared
    freely and every update produces a new one.
    """

    __slots__ = ("_entries",)

    def __init__(
        self,
        entries: Union[Mapping[str, ArrayLike], Iterable[tuple[str, ArrayLike]]] = (),
    ):
        items = entries.items() if isinstance(entries, Mapping) else entries
        built: dict[str, np.ndarray] = {}
        for name, values in items:
            if name in built:
                raise InputError(f"duplicate parameter name {name!r}")
            array = np.array(values, dtype=np.float64)
            array.setflags(write=False)
            built[name] = array
        self._entries = {name: built[name] for name in sorted(built)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.signature() == other.signature() and all(
            self[name].tobytes() == other[name].tobytes() for name in self
        )

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        shapes = ", ".join(f"{name}{list(shape)}" for name, shape in self.signature())
        return f"{type(self).__name__}({shapes})"

    @property
    def size(self) -> int:
        return sum(array.size for array in self._entries.values())

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, array.shape) for name, array in self._entries.items()]

    def is_aligned(self, other: "ParamSet") -> bool:
        return self.signature() == other.signature()

    def check_aligned(self, other: Mapping[str, np.ndarray], what: str = "operands") -> None:
        """Raise AlignmentError naming the first entry where the two sets differ."""
        names = sorted(set(self) | set(other))
        for name in names:
            if name not in self or name not in other:
                raise AlignmentError(f"{what} not aligned: entry {name!r} missing on one side")
            if self[name].shape != np.shape(other[name]):
                raise AlignmentError(
                    f"{what} not aligned: entry {name!r} has shapes "
                    f"{self[name].shape} and {np.shape(other[name])}"
                )

    def subset(self, names: Iterable[str]) -> "ParamSet":
        return ParamSet((name, self._entries[name]) for name in names)

    def updated(self, changes: Mapping[str, ArrayLike]) -> "ParamSet":
        """Copy with some entries replaced; shapes must match the entries replaced."""
        for name, values in changes.items():
            if name not in self._entries:
                raise AlignmentError(f"cannot update unknown entry {name!r}")
            if np.shape(values) != self._entries[name].shape:
                raise AlignmentError(f"shape change on entry {name!r}")
        merged = dict(self._entries)
        merged.update(changes)
        return type(self)(merged)

    def flat(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([array.ravel() for array in self._entries.values()])

    @classmethod
    def from_flat(cls, vector: np.ndarray, like: "ParamSet") -> "ParamSet":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (like.size,):
            raise AlignmentError(f"flat vector of length {vector.size} does not fit {like.size} values")
        entries = {}
        offset = 0
        for name, shape in like.signature():
            count = int(np.prod(shape, dtype=np.int64))
            entries[name] = vector[offset : offset + count].reshape(shape)
            offset += count
        return cls(entries)

    def zeros_like(self) -> "ParamSet":
        return ParamSet((name, np.zeros(array.shape)) for name, array in self._entries.items())


class Tensor:
    """A float64 array, optionally tied to the tape that recorded it."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data: ArrayLike, tape: Optional["GradTape"] = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "constant"
        return f"Tensor(shape={list(self.shape)}, {taped})"


class GradTape:
    """Operation graph of one forward pass.

    A tape watches exactly one ParamSet. `backward` consumes it; `vjp` may be
    called repeatedly, which is what per-class Fisher gradients rely on.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Optional[Vjp]] = []
        self._shapes: list[tuple[int, ...]] = []
        self._watched: Optional[ParamSet] = None
        self._leaves: dict[str, Tensor] = {}
        self._consumed = False

    def __len__(self) -> int:
        return len(self._parents)

    def watch(self, params: ParamSet) -> dict[str, Tensor]:
        if self._consumed:
            raise UsageError("tape already consumed by backward")
        if self._watched is not None:
            if self._watched is params:
                return dict(self._leaves)
            raise UsageError("tape already watches a different parameter set")
        self._watched = params
        for name, array in params.items():
            node = self._push((), None, array.shape)
            self._leaves[name] = Tensor(array, self, node)
        return dict(self._leaves)

    def _push(self, parents: tuple[int, ...], vjp: Optional[Vjp], shape: tuple[int, ...]) -> int:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(shape)
        return len(self._parents) - 1

    def record(self, data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
        if self._consumed:
            raise UsageError("tape already consumed by backward")
        parents = tuple(t.node if t.tape is self else -1 for t in inputs)
        node = self._push(parents, vjp, data.shape)
        return Tensor(data, self, node)

    def vjp(self, output: Tensor, cotangent: ArrayLike) -> ParamSet:
        """Vector-Jacobian product of `output` against every watched entry."""
        if self._consumed:
            raise UsageError("tape already consumed by backward")
        if output.tape is not self:
            raise UsageError("value was not recorded by this tape")
        if self._watched is None:
            raise UsageError("tape watches no parameters")
        seed = np.broadcast_to(np.asarray(cotangent, dtype=np.float64), output.shape)
        grads: list[Optional[np.ndarray]] = [None] * (output.node + 1)
        grads[output.node] = np.array(seed)
        for node in range(output.node, -1, -1):
            grad = grads[node]
            vjp = self._vjps[node]
            if grad is None or vjp is None:
                continue
            for parent, parent_grad in zip(self._parents[node], vjp(grad)):
                if parent < 0 or parent_grad is None:
                    continue
                grads[parent] = parent_grad if grads[parent] is None else grads[parent] + parent_grad
        result = {}
        for name, leaf in self._leaves.items():
            grad = grads[leaf.node] if leaf.node < len(grads) else None
            result[name] = np.zeros(leaf.shape) if grad is None else grad
        return ParamSet(result)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[GradTape]:
    tape = None
    for tensor in inputs:
        if tensor.tape is None:
            continue
        if tape is not None and tensor.tape is not tape:
            raise UsageError("operands recorded on different tapes")
        tape = tensor.tape
    return tape


def _record(data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp) -> Tensor:
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(values: ArrayLike) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64))


def backward(tape: GradTape, loss: Tensor) -> ParamSet:
    """Gradient of a scalar loss with respect to the tape's watched ParamSet."""
    if loss.tape is not tape:
        raise UsageError("backward called on a value this tape did not record")
    if loss.shape != ():
        raise InputError(f"backward expects a scalar loss, got shape {loss.shape}")
    grads = tape.vjp(loss, 1.0)
    tape._consumed = True
    return grads


def forward_linear(inputs: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """inputs[batch×d_in] @ weight[d_in×d_out] + bias[d_out]."""
    x, w, b = inputs.data, weight.data, bias.data
    if x.ndim != 2 or w.ndim != 2 or b.ndim != 1 or x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise AlignmentError(
            f"linear layer shapes do not conform: input {x.shape}, weight {w.shape}, bias {b.shape}"
        )
    out = x @ w + b

    def vjp(grad: np.ndarray):
        return grad @ w.T, x.T @ grad, grad.sum(axis=0)

    return _record(out, (inputs, weight, bias), vjp)


def tanh(value: Tensor) -> Tensor:
    out = np.tanh(value.data)
    return _record(out, (value,), lambda grad: (grad * (1.0 - out * out),))


def relu(value: Tensor) -> Tensor:
    active = value.data > 0.0
    out = np.where(active, value.data, 0.0)
    return _record(out, (value,), lambda grad: (np.where(active, grad, 0.0),))


def stack(values: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not values:
        raise InputError("cannot stack an empty sequence")
    out = np.stack([v.data for v in values], axis=axis)

    def vjp(grad: np.ndarray):
        return [np.take(grad, i, axis=axis) for i in range(len(values))]

    return _record(out, tuple(values), vjp)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise AlignmentError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda grad: (grad, grad))


def sub(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda grad: (grad, -grad))


def mul(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_shape(a, b, "mul")
    x, y = a.data, b.data
    return _record(x * y, (a, b), lambda grad: (grad * y, grad * x))


def scale(value: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _record(value.data * factor, (value,), lambda grad: (grad * factor,))


def square(value: Tensor) -> Tensor:
    x = value.data
    return _record(x * x, (value,), lambda grad: (2.0 * x * grad,))


def total(value: Tensor) -> Tensor:
    """Sum of every element, as a scalar."""
    shape = value.shape
    return _record(np.asarray(value.data.sum()), (value,), lambda grad: (np.full(shape, float(grad)),))


def _shifted_logsumexp(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-max-shifted logits and their log-sum-exp.

    The row maximum contributes exactly 1 to the sum, so the remaining mass
    goes through log1p and stays accurate when it is tiny.
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    exps[np.arange(len(shifted)), shifted.argmax(axis=1)] = 0.0
    return shifted, np.log1p(exps.sum(axis=1))


def log_prob(logits: Tensor) -> Tensor:
    """Row-wise log-softmax."""
    if logits.data.ndim != 2:
        raise AlignmentError(f"log_prob expects batch×K logits, got shape {logits.shape}")
    shifted, lse = _shifted_logsumexp(logits.data)
    out = shifted - lse[:, None]
    probs = np.exp(out)

    def vjp(grad: np.ndarray):
        return (grad - probs * grad.sum(axis=1, keepdims=True),)

    return _record(out, (logits,), vjp)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted, lse = _shifted_logsumexp(np.atleast_2d(np.asarray(logits, dtype=np.float64)))
    return np.exp(shifted - lse[:, None])


def softmax_cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise AlignmentError(f"cross entropy expects batch×K logits, got shape {logits.shape}")
    batch, num_classes = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise AlignmentError(f"{labels.shape[0] if labels.ndim else 0} labels for a batch of {batch}")
    if batch and (labels.min() < 0 or labels.max() >= num_classes):
        raise InputError(f"label out of range [0, {num_classes})")
    labels = labels.astype(np.int64)
    rows = np.arange(batch)
    shifted, lse = _shifted_logsumexp(logits.data)
    loss = np.asarray(np.mean(lse - shifted[rows, labels]))
    probs = np.exp(shifted - lse[:, None])

    def vjp(grad: np.ndarray):
        delta = probs.copy()
        delta[rows, labels] -= 1.0
        return (delta * (float(grad) / batch),)

    return _record(loss, (logits,), vjp)


def normalize_rows(value: Tensor, temperature: float) -> Tensor:
    """Divide every row by its Euclidean norm, then multiply by `temperature`."""
    x = value.data
    if x.ndim != 2:
        raise AlignmentError(f"normalize_rows expects a matrix, got shape {x.shape}")
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    out = temperature * x / norms

    def vjp(grad: np.ndarray):
        dot = (x * grad).sum(axis=1, keepdims=True)
        return (temperature * (grad / norms - x * dot / norms**3),)

    return _record(out, (value,), vjp)

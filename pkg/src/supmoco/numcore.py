"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient. The active
tape lives in a :mod:`contextvars` variable, so independent training runs in
separate threads never share mutable state.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(mul(w, w))
    >>> backward(tape, loss)
    >>> w.grad
    array([6.])
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

NORM_EPS = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "supmoco_active_tape", default=None
)


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DegenerateVectorError(ValueError):
    """A vector too close to zero was normalised."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = ""):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"


@dataclass
class _Node:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, hence every node's inputs were
    produced by earlier nodes (or are leaves).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


@contextlib.contextmanager
def no_record():
    """Suspend recording on the active tape inside the block."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(values: np.ndarray, inputs: Sequence[Tensor], back) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=track)
    if track:
        tape.nodes.append(_Node(out, tuple(inputs), back))
    return out


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def affine(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """``W @ x + b`` for a vector ``x``, or row-wise for a matrix of inputs."""
    W, b, X = weights.values, bias.values, x.values
    if W.ndim != 2 or b.shape != (W.shape[0],) or X.ndim not in (1, 2) or X.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine: weights {W.shape}, bias {b.shape}, input {X.shape} do not conform"
        )
    out = X @ W.T + b

    def back(g):
        if X.ndim == 1:
            return np.outer(g, X), g, W.T @ g
        return g.T @ X, g.sum(axis=0), g @ W

    return _emit(out, (weights, bias, x), back)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the derivative at exactly 0 is taken as 0."""
    X = x.values
    active = X > 0
    return _emit(np.where(active, X, 0.0), (x,), lambda g: (g * active,))


def l2_normalize(v: Tensor, epsilon: float = NORM_EPS) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit Euclidean norm."""
    V = v.values
    norms = np.sqrt((V * V).sum(axis=-1, keepdims=True))
    if np.any(norms < epsilon):
        raise DegenerateVectorError(f"cannot normalise vector with norm < {epsilon}")
    U = V / norms

    def back(g):
        # d(v/|v|) = (g - u (u.g)) / |v|
        return ((g - U * (U * g).sum(axis=-1, keepdims=True)) / norms,)

    return _emit(U, (v,), back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    A, B = a.values, b.values
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul: {A.shape} @ {B.shape}")
    return _emit(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got {a.shape}")
    return _emit(a.values.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _emit(a.values.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _emit(a.values + b.values, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return _emit(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    A, B = a.values, b.values
    return _emit(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.values * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit(np.array(a.values.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two equally shaped matrices (or two vectors)."""
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot: {a.shape} vs {b.shape}")
    A, B = a.values, b.values
    out = (A * B).sum(axis=-1)

    def back(g):
        g = np.asarray(g)[..., None] if A.ndim == 2 else np.asarray(g)
        return g * B, g * A

    return _emit(out, (a, b), back)


def masked_nll(logits: Tensor, pos: np.ndarray, den: np.ndarray, *, per_row: bool = False):
    """Mean over rows of the multi-positive softmax NLL.

    Row ``i`` contributes ``-(1/|P_i|) * sum_{j in P_i} log softmax_{D_i}(logits[i])_j``
    where ``P_i``/``D_i`` are the ``True`` columns of ``pos``/``den``. Every
    row needs at least one positive and positives must lie inside ``D_i``.

    With ``per_row=True`` also returns the per-row losses as an array.
    """
    L = logits.values
    if L.ndim == 1:
        L = L[None, :]
    pos = np.asarray(pos, dtype=bool).reshape(L.shape)
    den = np.asarray(den, dtype=bool).reshape(L.shape)
    if L.shape[0] == 0:
        raise ContractError("masked_nll needs at least one row")
    if not pos.any(axis=1).all():
        raise ContractError("every row needs at least one positive")
    if (pos & ~den).any():
        raise ContractError("positives must be part of the denominator")
    rows, grad = kernels.masked_nll(L, pos, den)
    n = L.shape[0]
    shape = logits.shape
    out = _emit(np.array(rows.mean()), (logits,), lambda g: ((float(g) / n) * grad.reshape(shape),))
    if per_row:
        return out, rows
    return out


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of integer ``targets`` over rows of ``logits``."""
    L = logits.values if logits.values.ndim == 2 else logits.values[None, :]
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    pos = np.zeros(L.shape, dtype=bool)
    pos[np.arange(L.shape[0]), targets] = True
    return masked_nll(logits, pos, np.ones(L.shape, dtype=bool))


# ---------------------------------------------------------------------------
# Reverse pass
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every ``requires_grad`` tensor used on ``tape``.

    Leaf tensors that appear on the tape but do not influence ``loss`` end
    with an all-zero gradient. Gradients overwrite any previous value.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    seen: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad:
                seen[id(t)] = t
        seen[id(node.output)] = node.output
    if id(loss) not in seen:
        raise ContractError("loss was not produced on this tape")
    grads[id(loss)] = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64).reshape(t.shape)
    for key, t in seen.items():
        g = grads.get(key)
        t.grad = np.zeros_like(t.values) if g is None else g


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    worst: tuple[int, int] | None = None  # (param index, flat coordinate)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int | None = 100,
    rng: np.random.Generator | None = None,
    analytic: Sequence[np.ndarray] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` with central differences.

    ``fn`` takes no arguments and rebuilds the loss from the current values
    of ``params``; it is evaluated once under a tape for the analytic
    gradient (unless ``analytic`` is given) and twice per sampled
    coordinate. ``n_coords=None`` checks every coordinate.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        with Tape() as tape:
            loss = fn()
        backward(tape, loss)
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
    coords = [(pi, j) for pi, p in enumerate(params) for j in range(p.size)]
    if n_coords is not None and n_coords < len(coords):
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]
    worst_err, worst = 0.0, None
    with no_record():
        for pi, j in coords:
            flat = params[pi].values.reshape(-1)
            orig = flat[j]
            flat[j] = orig + step
            fp = fn().item()
            flat[j] = orig - step
            fm = fn().item()
            flat[j] = orig
            num = (fp - fm) / (2 * step)
            a = float(np.asarray(analytic[pi]).reshape(-1)[j])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            if err > worst_err or worst is None:
                worst_err, worst = err, (pi, j)
    return GradCheckReport(worst_err, len(coords), tol, worst)


# ---------------------------------------------------------------------------
# Seeded randomness
# ---------------------------------------------------------------------------


def seeded_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional substream path.

    Substreams are derived with :class:`numpy.random.SeedSequence` spawn
    keys, so ``seeded_rng(s, 3, 7)`` is independent of ``seeded_rng(s, 3, 8)``
    and of ``seeded_rng(s)``. Streams are stable across platforms.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.PCG64(ss))


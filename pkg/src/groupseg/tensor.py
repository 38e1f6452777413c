"""Dense tensors, the reverse-mode tape, and seeded random streams.

Every differentiable primitive in :mod:`groupseg.ops` produces its output
through :func:`record`, which performs the finite check demanded by the
fail-fast NaN policy and appends a vector-Jacobian callback to the innermost
active :class:`Tape`.  Replaying a tape backward visits primitives in exact
reverse execution order; gradients accumulate additively across fan-out.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericError, UsageError

DEFAULT_DTYPE = np.float64


class Tensor:
    """A shaped block of real values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives with their VJP callbacks.

    Use as a context manager around the forward computation, then call
    :meth:`backward` on a scalar loss.  A tape is single-owner and consumed
    by backward; recording and backward must not run concurrently.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] | None = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.pop()

    def _append(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable) -> None:
        if self._records is None:
            raise UsageError("tape already consumed by backward")
        self._records.append((out, parents, vjp))

    def __len__(self) -> int:
        return 0 if self._records is None else len(self._records)

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(tensor) into .grad of every requires_grad leaf."""
        if self._records is None:
            raise UsageError("tape already consumed by backward")
        if loss.data.shape != ():
            raise UsageError(f"loss must be a scalar, got shape {loss.data.shape}")
        records = self._records
        self._records = None  # consumed

        flowing: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        produced = {id(out) for out, _, _ in records}
        for out, parents, vjp in reversed(records):
            g = flowing.pop(id(out), None)
            if g is None:
                continue
            parent_grads = vjp(g)
            for p, pg in zip(parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError("non-finite gradient encountered in backward")
                acc = flowing.get(id(p))
                flowing[id(p)] = pg if acc is None else acc + pg
        # whatever remains belongs to leaves (tensors not produced on this tape)
        leaves: dict[int, Tensor] = {}
        for _, parents, _ in records:
            for p in parents:
                if p.requires_grad and id(p) not in produced:
                    leaves[id(p)] = p
        for tid, g in flowing.items():
            leaf = leaves.get(tid)
            if leaf is None:
                continue
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(out_data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Finish a primitive: finite-check the output and register its VJP.

    `vjp(g)` must return one gradient array (or None) per parent, in order.
    """
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"primitive '{op}' produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape._append(out, tuple(parents), vjp)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


class Rng:
    """Counter-based random stream (Philox): same seed, same draws, any platform."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed + (self.stream << 32)))

    def child(self, stream: int) -> "Rng":
        """Independent stream derived from the same seed."""
        return Rng(self.seed, stream)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def trunc_normal(self, shape, std: float = 0.02, clip: float = 2.0) -> np.ndarray:
        """Normal(0, std) with draws beyond clip*std rejected and redrawn."""
        out = self._gen.normal(0.0, 1.0, size=shape)
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > clip
        return out * std

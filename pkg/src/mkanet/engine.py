"""Reverse-mode differentiable tensors over numpy storage.

Values are stored as float32; arithmetic inside every op upcasts to float64
so that reductions accumulate in 64-bit and results are reproducible
run-to-run. Gradients are held in float64 throughout the backward pass.

A tensor produced by an op is immutable by convention. Graph edges are
recorded per op via a closure; `Tensor.backward` walks the graph in reverse
topological order. Only the op set needed by the network is differentiable;
there is no general expression autodiff.
"""

from __future__ import annotations

import contextlib

import numpy as np

IGNORE = 255


class ShapeError(ValueError):
    """Tensor extents incompatible with the requested operation."""


class ConfigError(ValueError):
    """Invalid hyperparameter or operation configuration."""


class DataError(ValueError):
    """Input data violates a value-domain contract (e.g. label out of range)."""


class NumericError(ArithmeticError):
    """A non-finite value was produced or consumed."""


# Storage dtype is switchable so gradient checking can run the whole graph in
# float64; normal operation stores float32.
_state = {"dtype": np.float32, "grad_enabled": True, "kink_watch": None}


def storage_dtype():
    return _state["dtype"]


def grad_enabled() -> bool:
    return _state["grad_enabled"]


@contextlib.contextmanager
def double_precision():
    """Store op results in float64 (used by the gradient checker)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    """Skip graph construction; forward values only."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def watch_kinks():
    """Record how close relu inputs come to 0 (finite differences are only
    trustworthy when the graph is smooth within the probe step)."""
    prev = _state["kink_watch"]
    _state["kink_watch"] = watch = []
    try:
        yield watch
    finally:
        _state["kink_watch"] = prev


def kink_watch_active() -> bool:
    return _state["kink_watch"] is not None


def note_kink_margin(margin: float) -> None:
    watch = _state["kink_watch"]
    if watch is not None:
        watch.append(float(margin))


def as_f64(a: np.ndarray) -> np.ndarray:
    return a if a.dtype == np.float64 else a.astype(np.float64)


def to_storage(a: np.ndarray) -> np.ndarray:
    dt = storage_dtype()
    return a if a.dtype == dt else a.astype(dt)


def check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A node in the computation graph.

    `data` is the stored value (float32 unless double_precision is active),
    `parents` the input nodes, and `backprop` a closure mapping the upstream
    float64 gradient to one float64 gradient per parent (or None where no
    gradient flows).
    """

    __slots__ = ("data", "parents", "backprop", "grad")

    def __init__(self, data, parents=(), backprop=None):
        self.data = to_storage(np.asarray(data))
        self.parents = tuple(parents)
        self.backprop = backprop
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dims(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def add_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.data.shape, dtype=np.float64)
        self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable node's `.grad`.

        `seed` is the upstream gradient of `self` (defaults to ones). Leaf
        gradients accumulate across calls until `zero_grad`.
        """
        if seed is None:
            seed = np.ones(self.data.shape, dtype=np.float64)
        seed = as_f64(np.asarray(seed))
        if seed.shape != self.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")
        order = self._topo_order()
        self.add_grad(seed)
        for node in reversed(order):
            if node.backprop is None or node.grad is None:
                continue
            parent_grads = node.backprop(node.grad)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is not None:
                    parent.add_grad(pg)

    def _topo_order(self):
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order


class Parameter(Tensor):
    """Named leaf tensor with persistent float32 storage.

    `trainable=False` marks state that is checkpointed but never stepped by
    the optimizer (batch-norm running statistics). `decay` opts the parameter
    out of weight decay (norm affine terms, biases).
    """

    __slots__ = ("name", "trainable", "decay")

    def __init__(self, name: str, data: np.ndarray, trainable: bool = True, decay: bool = True):
        # parameters always live in float32, independent of the storage switch
        self.data = np.asarray(data, dtype=np.float32)
        self.parents = ()
        self.backprop = None
        self.grad = None
        self.name = name
        self.trainable = trainable
        self.decay = decay

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def result(data: np.ndarray, parents, backprop, what: str = "op output") -> Tensor:
    """Wrap an op result, dropping graph edges under no_grad.

    Every op output must be finite; a NaN/Inf (including float32 overflow on
    the storage cast) is an error state, not a value.
    """
    out = Tensor(data, parents, backprop) if grad_enabled() else Tensor(data)
    check_finite(out.data, what)
    return out

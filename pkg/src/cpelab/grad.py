"""A small reverse-mode tape over 2-D float64 arrays.

Nodes are recorded in evaluation order, so reverse insertion order is a valid
topological order for the backward sweep. Only the operations listed in
``SUPPORTED_OPS`` have vector-Jacobian products.
"""

import numpy as np

from . import kernels
from .errors import InvalidInputError, UnsupportedOpError

SUPPORTED_OPS = frozenset(
    {
        "leaf",
        "matmul",
        "transpose",
        "add",
        "scale",
        "softmax_columns",
        "logistic",
        "diag_scale",
        "frobenius_norm",
        "squared_frobenius",
        "mean",
    }
)


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "attr")

    def __init__(self, tape, op, inputs, value, attr=None):
        self.tape = tape
        self.id = len(tape.nodes)
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attr = attr

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return self.tape.transpose(self)

    def __add__(self, other):
        return self.tape.add(self, other)

    def __sub__(self, other):
        return self.tape.add(self, self.tape.scale(other, -1.0))

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __mul__(self, c):
        return self.tape.scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def item(self):
        return float(self.value[0, 0])

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self):
        self.nodes = []
        self.params = {}

    def _push(self, op, inputs, value, attr=None):
        node = Node(self, op, inputs, value, attr)
        self.nodes.append(node)
        return node

    def _node(self, x):
        if isinstance(x, Node):
            if x.tape is not self:
                raise InvalidInputError("node belongs to a different tape")
            return x
        return self.const(x)

    def param(self, name, value):
        """Register a trainable leaf. Vectors are stored as 1 x n rows."""
        if name in self.params:
            raise InvalidInputError(f"parameter {name!r} registered twice")
        node = self._push("leaf", (), _as2d(value).copy(), attr=name)
        self.params[name] = node.id
        return node

    def const(self, value):
        return self._push("leaf", (), _as2d(value))

    def record(self, op, inputs, value, attr=None):
        """Append an arbitrary node; backward rejects ops it cannot differentiate."""
        return self._push(op, tuple(self._node(i) for i in inputs), _as2d(value), attr)

    def matmul(self, a, b):
        a, b = self._node(a), self._node(b)
        if a.shape[1] != b.shape[0]:
            raise InvalidInputError(f"matmul shape mismatch {a.shape} @ {b.shape}")
        return self._push("matmul", (a, b), a.value @ b.value)

    def transpose(self, a):
        a = self._node(a)
        return self._push("transpose", (a,), a.value.T.copy())

    def add(self, a, b):
        a, b = self._node(a), self._node(b)
        if a.shape != b.shape:
            raise InvalidInputError(f"add shape mismatch {a.shape} + {b.shape}")
        return self._push("add", (a, b), a.value + b.value)

    def scale(self, a, c):
        a = self._node(a)
        c = float(c)
        return self._push("scale", (a,), a.value * c, attr=c)

    def softmax_columns(self, a):
        a = self._node(a)
        return self._push("softmax_columns", (a,), kernels.softmax_columns(a.value))

    def logistic(self, a):
        a = self._node(a)
        return self._push("logistic", (a,), kernels.logistic(a.value))

    def diag_scale(self, a, g):
        """``a @ diag(g)`` for a 1 x n row ``g``: scales column j of ``a`` by g[j]."""
        a, g = self._node(a), self._node(g)
        if g.shape != (1, a.shape[1]):
            raise InvalidInputError(f"diag_scale needs a 1 x {a.shape[1]} gate, got {g.shape}")
        return self._push("diag_scale", (a, g), a.value * g.value)

    def frobenius_norm(self, a):
        a = self._node(a)
        return self._push("frobenius_norm", (a,), np.array([[np.sqrt(np.sum(a.value * a.value))]]))

    def squared_frobenius(self, a):
        a = self._node(a)
        return self._push("squared_frobenius", (a,), np.array([[np.sum(a.value * a.value)]]))

    def mean(self, a):
        """Mean of all entries of ``a``."""
        a = self._node(a)
        return self._push("mean", (a,), np.array([[a.value.mean()]]))

    def sum(self, nodes):
        """Left-to-right sum of same-shaped nodes (fixed reduction order)."""
        nodes = list(nodes)
        if not nodes:
            raise InvalidInputError("cannot sum an empty list")
        total = self._node(nodes[0])
        for n in nodes[1:]:
            total = self.add(total, n)
        return total

    def average(self, nodes):
        nodes = list(nodes)
        return self.scale(self.sum(nodes), 1.0 / len(nodes))


def _as2d(value):
    a = np.asarray(value, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise InvalidInputError(f"tape values must be at most 2-D, got shape {a.shape}")
    return a


def _vjp(node, g):
    op = node.op
    ins = node.inputs
    if op == "matmul":
        a, b = ins
        return (g @ b.value.T, a.value.T @ g)
    if op == "transpose":
        return (g.T,)
    if op == "add":
        return (g, g)
    if op == "scale":
        return (g * node.attr,)
    if op == "softmax_columns":
        return (kernels.softmax_columns_backward(node.value, g),)
    if op == "logistic":
        s = node.value
        return (g * s * (1.0 - s),)
    if op == "diag_scale":
        a, gate = ins
        return (g * gate.value, np.sum(g * a.value, axis=0, keepdims=True))
    if op == "frobenius_norm":
        (a,) = ins
        nrm = node.value[0, 0]
        if nrm == 0.0:
            # subgradient choice at the kink
            return (np.zeros_like(a.value),)
        return (g[0, 0] * a.value / nrm,)
    if op == "squared_frobenius":
        return (2.0 * g[0, 0] * ins[0].value,)
    if op == "mean":
        a = ins[0].value
        return (np.full_like(a, g[0, 0] / a.size),)
    raise UnsupportedOpError(f"no derivative rule for op {op!r}")


def backward(tape, loss):
    """Gradients of scalar ``loss`` with respect to every registered parameter.

    Parameters the loss does not depend on get exact zeros.
    """
    if loss.tape is not tape:
        raise InvalidInputError("loss node belongs to a different tape")
    if loss.shape != (1, 1):
        raise InvalidInputError(f"loss must be scalar, got shape {loss.shape}")
    for node in tape.nodes[: loss.id + 1]:
        if node.op not in SUPPORTED_OPS:
            raise UnsupportedOpError(f"no derivative rule for op {node.op!r}")
    grads = [None] * (loss.id + 1)
    grads[loss.id] = np.ones((1, 1))
    for node in reversed(tape.nodes[: loss.id + 1]):
        g = grads[node.id]
        if g is None or not node.inputs:
            continue
        for inp, gi in zip(node.inputs, _vjp(node, g)):
            if grads[inp.id] is None:
                grads[inp.id] = gi
            else:
                grads[inp.id] = grads[inp.id] + gi
    out = {}
    for name, nid in tape.params.items():
        g = grads[nid] if nid < len(grads) else None
        out[name] = np.zeros_like(tape.nodes[nid].value) if g is None else g
    return out


def grad_check(build_loss, params, fd_step=1e-6):
    """Largest elementwise relative gap between tape gradients and central differences.

    ``build_loss(tape, nodes)`` receives a fresh tape and a dict of parameter
    nodes and returns the scalar loss node. ``params`` maps names to arrays.
    The relative error of each entry uses ``max(|a|, |b|, 1e-8)`` as
    denominator.
    """
    if fd_step <= 0:
        raise InvalidInputError("fd_step must be positive")
    params = {k: _as2d(v).copy() for k, v in params.items()}

    def evaluate(values):
        tape = Tape()
        nodes = {k: tape.param(k, v) for k, v in values.items()}
        return tape, build_loss(tape, nodes)

    tape, loss = evaluate(params)
    analytic = backward(tape, loss)
    worst = 0.0
    for name, value in params.items():
        for idx in np.ndindex(value.shape):
            orig = value[idx]
            value[idx] = orig + fd_step
            plus = evaluate(params)[1].item()
            value[idx] = orig - fd_step
            minus = evaluate(params)[1].item()
            value[idx] = orig
            numeric = (plus - minus) / (2.0 * fd_step)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

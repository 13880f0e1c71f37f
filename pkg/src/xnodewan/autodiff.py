"""Scalar tape-based reverse-mode automatic differentiation.

Every scalar operation appends a node to an :class:`AdTape`. Reverse sweeps
walk the tape backwards once. In tangent mode each primal node also gets a
tangent node that is itself recorded on the tape, so reverse-mode through
the tangent yields mixed derivatives such as d/dtheta (du/dx)
(forward-over-reverse).

This engine is the reference implementation: exact, slow, and used to verify
the batched torch path and for small-scale gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

OPS = (
    "constant", "leaf", "add", "sub", "mul", "div", "neg", "powi",
    "exp", "log", "sin", "cos", "tanh", "relu", "sqrt",
)
_UNARY = {"neg", "powi", "exp", "log", "sin", "cos", "tanh", "relu", "sqrt"}
_BINARY = {"add", "sub", "mul", "div"}


class AdDomainError(ArithmeticError):
    """An operand is outside the primitive's domain."""

    def __init__(self, message: str, node_id: int):
        super().__init__(f"{message} (node {node_id})")
        self.node_id = node_id


class TangentModeError(RuntimeError):
    """Tangent requested while tangent mode is off."""


@dataclass(frozen=True)
class AdNode:
    id: int
    op: str
    parents: tuple
    value: float
    tangent: Optional[float]


class AdTape:
    """Append-only record of scalar operations."""

    def __init__(self, tangent_mode: bool = False):
        self.ops: List[str] = []
        self.parents: List[tuple] = []
        self.values: List[float] = []
        self.aux: List[Optional[int]] = []
        self.tangent_ids: List[Optional[int]] = []
        self.leaf_ids: List[int] = []
        self.tangent_mode = tangent_mode
        self._suspended = False
        self._zero = None
        if tangent_mode:
            self._zero = self._push("constant", (), 0.0)

    def __len__(self) -> int:
        return len(self.values)

    def reset(self) -> None:
        self.__init__(self.tangent_mode)

    # -- recording -----------------------------------------------------------

    def _push(self, op, parents, value, aux=None, tangent_id=None) -> int:
        nid = len(self.values)
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.values.append(value)
        self.aux.append(aux)
        self.tangent_ids.append(tangent_id)
        return nid

    @property
    def _recording_tangents(self) -> bool:
        return self.tangent_mode and not self._suspended

    def const(self, value: float) -> "Var":
        nid = self._push("constant", (), float(value))
        if self._recording_tangents:
            self.tangent_ids[nid] = self._zero
        return Var(self, nid)

    def leaf(self, value: float, seed: float = 0.0) -> "Var":
        """A differentiable input. ``seed`` is its tangent in tangent mode."""
        nid = self._push("leaf", (), float(value))
        self.leaf_ids.append(nid)
        if self._recording_tangents:
            if seed == 0.0:
                self.tangent_ids[nid] = self._zero
            else:
                self._suspended = True
                self.tangent_ids[nid] = self._push("constant", (), float(seed))
                self._suspended = False
        return Var(self, nid)

    def node(self, nid: int) -> AdNode:
        tid = self.tangent_ids[nid]
        tangent = None if tid is None else self.values[tid]
        return AdNode(nid, self.ops[nid], self.parents[nid], self.values[nid], tangent)

    def tangent(self, var: "Var") -> "Var":
        """The tangent of ``var`` as a tape node (differentiable)."""
        if not self.tangent_mode:
            raise TangentModeError("tangent mode is not active on this tape")
        tid = self.tangent_ids[var.id]
        if tid is None:
            raise TangentModeError(f"node {var.id} has no tangent (recorded as a tangent itself)")
        return Var(self, tid)


def record(tape: AdTape, op: str, operands: Sequence[int], aux: Optional[int] = None) -> int:
    """Append ``op`` applied to node ids ``operands``; returns the new node id."""
    if op not in _UNARY and op not in _BINARY:
        raise ValueError(f"unknown operation {op!r}")
    n = len(tape.values)
    for p in operands:
        if not 0 <= p < n:
            raise IndexError(f"operand id {p} not on tape")
    vals = [tape.values[p] for p in operands]
    nid = n
    if op == "add":
        v = vals[0] + vals[1]
    elif op == "sub":
        v = vals[0] - vals[1]
    elif op == "mul":
        v = vals[0] * vals[1]
    elif op == "div":
        if vals[1] == 0.0:
            raise AdDomainError("division by zero", nid)
        v = vals[0] / vals[1]
    elif op == "neg":
        v = -vals[0]
    elif op == "powi":
        if aux < 0 and vals[0] == 0.0:
            raise AdDomainError("negative power of zero", nid)
        v = vals[0] ** aux
    elif op == "exp":
        v = math.exp(vals[0])
    elif op == "log":
        if vals[0] <= 0.0:
            raise AdDomainError("log of non-positive value", nid)
        v = math.log(vals[0])
    elif op == "sin":
        v = math.sin(vals[0])
    elif op == "cos":
        v = math.cos(vals[0])
    elif op == "tanh":
        v = math.tanh(vals[0])
    elif op == "relu":
        v = vals[0] if vals[0] > 0.0 else 0.0
    else:  # sqrt
        if vals[0] < 0.0:
            raise AdDomainError("sqrt of negative value", nid)
        v = math.sqrt(vals[0])
    nid = tape._push(op, operands, v, aux)
    if tape._recording_tangents:
        tape.tangent_ids[nid] = _tangent_rule(tape, op, operands, nid, aux)
    return nid


def _tangent_rule(tape: AdTape, op, operands, nid, aux) -> int:
    """Record the tangent of node ``nid`` (chain rule) with tangent mode suspended."""
    zero = tape._zero
    dts = [tape.tangent_ids[p] for p in operands]
    if all(d == zero for d in dts):
        return zero
    tape._suspended = True
    try:
        V = lambda i: Var(tape, i)  # noqa: E731
        a = V(operands[0])
        da = V(dts[0])
        if op in ("add", "sub"):
            db = V(dts[1])
            if dts[0] == zero:
                out = db if op == "add" else -db
            elif dts[1] == zero:
                out = da
            else:
                out = da + db if op == "add" else da - db
        elif op == "mul":
            b = V(operands[1])
            terms = []
            if dts[0] != zero:
                terms.append(da * b)
            if dts[1] != zero:
                terms.append(a * V(dts[1]))
            out = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        elif op == "div":
            b = V(operands[1])
            y = V(nid)
            if dts[1] == zero:
                out = da / b
            elif dts[0] == zero:
                out = -(y * V(dts[1])) / b
            else:
                out = (da - y * V(dts[1])) / b
        elif op == "neg":
            out = -da
        elif op == "powi":
            if aux == 0:
                return zero
            out = da * (a.powi(aux - 1) * float(aux)) if aux != 1 else da
        elif op == "exp":
            out = V(nid) * da
        elif op == "log":
            out = da / a
        elif op == "sin":
            out = cos(a) * da
        elif op == "cos":
            out = -(sin(a) * da)
        elif op == "tanh":
            y = V(nid)
            out = (1.0 - y * y) * da
        elif op == "relu":
            out = da * (1.0 if tape.values[operands[0]] > 0.0 else 0.0)
        else:  # sqrt
            out = da / (2.0 * V(nid))
        return out.id
    finally:
        tape._suspended = False


def _local_partials(tape: AdTape, nid: int):
    op, ps = tape.ops[nid], tape.parents[nid]
    vals = tape.values
    if op == "add":
        return (1.0, 1.0)
    if op == "sub":
        return (1.0, -1.0)
    if op == "mul":
        return (vals[ps[1]], vals[ps[0]])
    if op == "div":
        b = vals[ps[1]]
        return (1.0 / b, -vals[nid] / b)
    if op == "neg":
        return (-1.0,)
    if op == "powi":
        n = tape.aux[nid]
        return (0.0,) if n == 0 else (n * vals[ps[0]] ** (n - 1),)
    if op == "exp":
        return (vals[nid],)
    if op == "log":
        return (1.0 / vals[ps[0]],)
    if op == "sin":
        return (math.cos(vals[ps[0]]),)
    if op == "cos":
        return (-math.sin(vals[ps[0]]),)
    if op == "tanh":
        y = vals[nid]
        return (1.0 - y * y,)
    if op == "relu":
        return (1.0 if vals[ps[0]] > 0.0 else 0.0,)
    if op == "sqrt":
        y = vals[nid]
        return (0.5 / y if y > 0.0 else math.inf,)
    return ()


def backward_all(tape: AdTape, output_id: int) -> np.ndarray:
    """Adjoint of every node, d(output)/d(node)."""
    n = len(tape.values)
    if not 0 <= output_id < n:
        raise IndexError(f"output id {output_id} out of range for tape of {n} nodes")
    adj = np.zeros(n)
    adj[output_id] = 1.0
    for nid in range(output_id, -1, -1):
        g = adj[nid]
        if g == 0.0:
            continue
        for p, dp in zip(tape.parents[nid], _local_partials(tape, nid)):
            adj[p] += g * dp
    return adj


def backward(tape: AdTape, output_id: int) -> np.ndarray:
    """Adjoints of the tape leaves (in ``tape.leaf_ids`` order)."""
    adj = backward_all(tape, output_id)
    return adj[tape.leaf_ids]


def grad(output: "Var", wrt: Sequence["Var"]) -> np.ndarray:
    adj = backward_all(output.tape, output.id)
    return np.array([adj[v.id] for v in wrt])


class Var:
    """Handle to a tape node with operator overloading."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: AdTape, nid: int):
        self.tape = tape
        self.id = nid

    @property
    def value(self) -> float:
        return self.tape.values[self.id]

    def _lift(self, other) -> "Var":
        if isinstance(other, Var):
            return other
        return self.tape.const(float(other))

    def _bin(self, op, other, swap=False):
        other = self._lift(other)
        a, b = (other, self) if swap else (self, other)
        return Var(self.tape, record(self.tape, op, (a.id, b.id)))

    def __add__(self, o):
        return self._bin("add", o)

    def __radd__(self, o):
        return self._bin("add", o, swap=True)

    def __sub__(self, o):
        return self._bin("sub", o)

    def __rsub__(self, o):
        return self._bin("sub", o, swap=True)

    def __mul__(self, o):
        return self._bin("mul", o)

    def __rmul__(self, o):
        return self._bin("mul", o, swap=True)

    def __truediv__(self, o):
        return self._bin("div", o)

    def __rtruediv__(self, o):
        return self._bin("div", o, swap=True)

    def __neg__(self):
        return Var(self.tape, record(self.tape, "neg", (self.id,)))

    def powi(self, n: int) -> "Var":
        return Var(self.tape, record(self.tape, "powi", (self.id,), aux=int(n)))

    def __pow__(self, n):
        if isinstance(n, int):
            return self.powi(n)
        # general real powers are composed from exp and log
        return exp(log(self) * n)

    def __repr__(self):
        return f"Var(id={self.id}, value={self.value!r})"


def _unary(op):
    def f(x: Var) -> Var:
        return Var(x.tape, record(x.tape, op, (x.id,)))
    f.__name__ = op
    return f


exp = _unary("exp")
log = _unary("log")
sin = _unary("sin")
cos = _unary("cos")
tanh = _unary("tanh")
relu = _unary("relu")
sqrt = _unary("sqrt")


def forward_tangent_then_backward(
    f: Callable, inputs: Sequence[float], params: Sequence[float], direction: int
) -> np.ndarray:
    """Gradient w.r.t. ``params`` of the directional derivative of ``f`` along input ``direction``.

    ``f(tape, xs, ws)`` records a scalar computation from input Vars ``xs``
    and parameter Vars ``ws``.
    """
    tape = AdTape(tangent_mode=True)
    xs = [tape.leaf(v, seed=1.0 if i == direction else 0.0) for i, v in enumerate(inputs)]
    ws = [tape.leaf(v) for v in params]
    out = f(tape, xs, ws)
    return grad(tape.tangent(out), ws)


def grad_check(f: Callable, point: Sequence[float], step: float = 1e-5) -> float:
    """Max over coordinates of ``|ad - fd| / max(1, |ad|)`` against central differences.

    ``f(tape, xs)`` records a scalar from the leaf Vars ``xs``.
    """
    point = [float(v) for v in point]

    def evaluate(values):
        tape = AdTape()
        return f(tape, [tape.leaf(v) for v in values]).value

    tape = AdTape()
    xs = [tape.leaf(v) for v in point]
    g = grad(f(tape, xs), xs)
    worst = 0.0
    for i in range(len(point)):
        up = list(point)
        dn = list(point)
        up[i] += step
        dn[i] -= step
        fd = (evaluate(up) - evaluate(dn)) / (2.0 * step)
        worst = max(worst, abs(g[i] - fd) / max(1.0, abs(g[i])))
    return worst

"""Dense float64 math with a reverse-mode tape and a first-class stop-gradient edge.

Values live in plain numpy arrays whose last axis is the feature axis, so each
operation accepts a single vector ``(d,)`` or a batch of rows ``(B, d)``.
A ``Tape`` records every forward call as (output, edges); an edge carries the
backward rule and a ``blocked`` flag.  ``stop_gradient`` is an exact identity
forward whose single edge is blocked: backward skips it entirely, so the
upstream contribution is exactly 0.0, not merely small.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray

PROB_EPS = 1e-12  # clamp for log(p) in cross-entropy


def as_f64(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Node:
    """A value in the computation graph; ``grad`` is filled during backward."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = as_f64(value)
        self.grad: Array | None = None


class Parameter(Node):
    """Leaf node with a persistent, preallocated gradient buffer."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, value, trainable: bool = True):
        super().__init__(value)
        self.name = name
        self.trainable = trainable
        self.grad = np.zeros_like(self.value)


class ParamStore:
    """Named parameters with accumulated gradients.

    Iteration order is insertion order; initializers rely on this as the
    documented draw order.
    """

    def __init__(self):
        self._entries: dict[str, Parameter] = {}

    def add(self, name: str, value, trainable: bool = True) -> Parameter:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        p = Parameter(name, value, trainable)
        self._entries[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def parameters(self) -> list[Parameter]:
        return list(self._entries.values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self._entries.values() if p.trainable]

    def zero_grads(self) -> None:
        for p in self._entries.values():
            p.grad = np.zeros_like(p.value)

    def num_scalars(self) -> int:
        return sum(p.value.size for p in self._entries.values())

    def values_copy(self) -> dict[str, Array]:
        return {k: p.value.copy() for k, p in self._entries.items()}

    def load_values(self, values: dict[str, Array]) -> None:
        for k, p in self._entries.items():
            v = as_f64(values[k])
            if v.shape != p.value.shape:
                raise ShapeError(
                    f"parameter {k}: stored shape {v.shape} != expected {p.value.shape}"
                )
            p.value = v.copy()


# A tape edge: (input node, vector-Jacobian product, blocked flag).
Edge = tuple[Node, Callable[[Array], Array], bool]


class Tape:
    """Ordered record of forward operations with explicit backward rules."""

    def __init__(self):
        self._records: list[tuple[Node, tuple[Edge, ...]]] = []

    def _push(self, out: Node, edges: tuple[Edge, ...]) -> None:
        self._records.append((out, edges))

    def __len__(self) -> int:
        return len(self._records)

    # ------------------------------------------------------------------ ops

    def affine(self, x: Node, w: Node, b: Node | None = None) -> Node:
        """y = x @ w.T + b for x of shape (d,) or (B, d), w of shape (out, d)."""
        xv, wv = x.value, w.value
        if xv.ndim not in (1, 2) or wv.ndim != 2 or xv.shape[-1] != wv.shape[1]:
            raise ShapeError(f"affine: input {xv.shape} incompatible with weight {wv.shape}")
        y = xv @ wv.T
        if b is not None:
            bv = b.value
            if bv.shape != (wv.shape[0],):
                raise ShapeError(f"affine: bias {bv.shape} incompatible with weight {wv.shape}")
            y = y + bv
        out = Node(y)

        def d_x(g: Array) -> Array:
            return g @ wv

        def d_w(g: Array) -> Array:
            return np.outer(g, xv) if xv.ndim == 1 else g.T @ xv

        edges: list[Edge] = [(x, d_x, False), (w, d_w, False)]
        if b is not None:
            edges.append((b, (lambda g: g if g.ndim == 1 else g.sum(axis=0)), False))
        self._push(out, tuple(edges))
        return out

    def relu(self, x: Node) -> Node:
        """Elementwise max(0, x); the subgradient at exactly 0 passes zero."""
        xv = x.value
        out = Node(np.maximum(xv, 0.0))
        mask = (xv > 0.0).astype(np.float64)
        self._push(out, ((x, (lambda g: g * mask), False),))
        return out

    def softmax(self, x: Node) -> Node:
        """Row-wise softmax over the last axis, max-shifted for stability."""
        xv = x.value
        if xv.size == 0 or xv.shape[-1] == 0:
            raise ShapeError(f"softmax: empty input of shape {xv.shape}")
        z = xv - xv.max(axis=-1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=-1, keepdims=True)
        out = Node(p)

        def d_x(g: Array) -> Array:
            return p * (g - (g * p).sum(axis=-1, keepdims=True))

        self._push(out, ((x, d_x, False),))
        return out

    def sigmoid(self, x: Node) -> Node:
        """Elementwise logistic function, stable for large |x|."""
        zv = x.value
        e = np.exp(-np.abs(zv))
        v = np.where(zv >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        out = Node(v)
        self._push(out, ((x, (lambda g: g * v * (1.0 - v)), False),))
        return out

    def add(self, a: Node, b: Node) -> Node:
        if a.value.shape != b.value.shape:
            raise ShapeError(f"add: shapes {a.value.shape} and {b.value.shape} differ")
        out = Node(a.value + b.value)
        ident = lambda g: g
        self._push(out, ((a, ident, False), (b, ident, False)))
        return out

    def add_n(self, nodes: Sequence[Node]) -> Node:
        """Sum of same-shaped nodes (used to total per-task losses)."""
        if not nodes:
            raise ShapeError("add_n: empty input")
        shape = nodes[0].value.shape
        for n in nodes:
            if n.value.shape != shape:
                raise ShapeError(f"add_n: shapes {shape} and {n.value.shape} differ")
        total = nodes[0].value
        for n in nodes[1:]:
            total = total + n.value
        out = Node(total)
        ident = lambda g: g
        self._push(out, tuple((n, ident, False) for n in nodes))
        return out

    def scale(self, x: Node, c: float) -> Node:
        out = Node(x.value * c)
        self._push(out, ((x, (lambda g: g * c), False),))
        return out

    def mul(self, a: Node, b: Node) -> Node:
        """Elementwise product of same-shaped nodes."""
        av, bv = a.value, b.value
        if av.shape != bv.shape:
            raise ShapeError(f"mul: shapes {av.shape} and {bv.shape} differ")
        out = Node(av * bv)
        self._push(out, ((a, (lambda g: g * bv), False), (b, (lambda g: g * av), False)))
        return out

    def sum_all(self, x: Node) -> Node:
        """Sum of all entries, as a scalar node."""
        xv = x.value
        out = Node(xv.sum())
        self._push(out, ((x, (lambda g: np.broadcast_to(g, xv.shape).copy()), False),))
        return out

    def mean_axis0(self, x: Node) -> Node:
        """Mean over rows of a batch: (B, d) -> (d,) or (B,) -> scalar."""
        xv = x.value
        n = xv.shape[0]
        out = Node(xv.mean(axis=0))
        self._push(out, ((x, (lambda g: np.broadcast_to(g / n, xv.shape).copy()), False),))
        return out

    def concat(self, parts: Sequence[Node]) -> Node:
        """Concatenate along the last axis."""
        if not parts:
            raise ShapeError("concat: empty input")
        out = Node(np.concatenate([p.value for p in parts], axis=-1))
        edges: list[Edge] = []
        off = 0
        for p in parts:
            w = p.value.shape[-1]
            edges.append((p, (lambda g, a=off, b=off + w: g[..., a:b]), False))
            off += w
        self._push(out, tuple(edges))
        return out

    def lookup(self, table: Node, ids: Array) -> Node:
        """Gather rows ``table[ids]``; backward scatter-adds into the table."""
        tv = table.value
        ids = np.asarray(ids)
        if tv.ndim != 2:
            raise ShapeError(f"lookup: table must be 2-D, got {tv.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
            raise IndexError(
                f"lookup: row index out of bounds for table with {tv.shape[0]} rows "
                f"(got range [{ids.min()}, {ids.max()}])"
            )
        out = Node(tv[ids])

        def d_table(g: Array) -> Array:
            contrib = np.zeros_like(tv)
            np.add.at(contrib, ids.ravel(), g.reshape(-1, tv.shape[1]))
            return contrib

        self._push(out, ((table, d_table, False),))
        return out

    def weighted_sum(self, vectors: Sequence[Node], weights: Node) -> Node:
        """sum_i weights[..., i] * vectors[i] over same-shaped vectors."""
        if not vectors:
            raise ShapeError("weighted_sum: no vectors")
        shape = vectors[0].value.shape
        for v in vectors:
            if v.value.shape != shape:
                raise ShapeError(f"weighted_sum: shapes {shape} and {v.value.shape} differ")
        wv = weights.value
        if wv.shape[-1] != len(vectors):
            raise ShapeError(
                f"weighted_sum: {len(vectors)} vectors but weights shape {wv.shape}"
            )
        acc = np.zeros(shape)
        for i, v in enumerate(vectors):
            acc += wv[..., i, None] * v.value
        out = Node(acc)

        edges: list[Edge] = [
            (v, (lambda g, i=i: g * wv[..., i, None]), False) for i, v in enumerate(vectors)
        ]
        vals = [v.value for v in vectors]

        def d_weights(g: Array) -> Array:
            return np.stack([(g * vals[i]).sum(axis=-1) for i in range(len(vals))], axis=-1)

        edges.append((weights, d_weights, False))
        self._push(out, tuple(edges))
        return out

    def stop_gradient(self, x: Node) -> Node:
        """Identity forward; the single tape edge back to ``x`` is blocked."""
        out = Node(x.value)
        self._push(out, ((x, (lambda g: g), True),))
        return out

    def bce(self, pred: Node, labels: Array, weight: float = 1.0) -> Node:
        """Mean binary cross-entropy of predicted probabilities against 0/1 labels.

        Probabilities are clamped into [PROB_EPS, 1 - PROB_EPS] inside the log;
        the clamp is treated as piecewise-constant in the backward rule.
        """
        p = pred.value
        y = as_f64(labels)
        if p.shape != y.shape:
            raise ShapeError(f"bce: predictions {p.shape} vs labels {y.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise NumericError("bce: predictions outside [0, 1]")
        pt = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
        val = weight * float(np.mean(-(y * np.log(pt) + (1.0 - y) * np.log1p(-pt))))
        out = Node(val)
        active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)

        def d_pred(g: Array) -> Array:
            inner = np.where(active, (pt - y) / (pt * (1.0 - pt)), 0.0)
            return g * (weight / p.size) * inner

        self._push(out, ((pred, d_pred, False),))
        return out

    def row_l2(self, table: Node, rows: Array, lam: float) -> Node:
        """lam * sum of squared norms of the selected table rows."""
        rows = np.asarray(rows)
        sub = table.value[rows]
        out = Node(lam * float(np.sum(sub * sub)))

        def d_table(g: Array) -> Array:
            contrib = np.zeros_like(table.value)
            contrib[rows] = g * 2.0 * lam * sub
            return contrib

        self._push(out, ((table, d_table, False),))
        return out

    # ------------------------------------------------------------- backward

    def backward(self, out: Node, seed: float = 1.0) -> None:
        """Accumulate d(out)/d(leaf) into every reachable node's ``grad``.

        Records are replayed in exact reverse forward order; blocked edges are
        skipped, so they contribute exactly zero.
        """
        seed_arr = np.broadcast_to(as_f64(seed), out.value.shape)
        out.grad = seed_arr.copy() if out.grad is None else out.grad + seed_arr
        for rec_out, edges in reversed(self._records):
            g = rec_out.grad
            if g is None:
                continue
            for node, vjp, blocked in edges:
                if blocked:
                    continue
                contrib = vjp(g)
                node.grad = contrib if node.grad is None else node.grad + contrib


# ------------------------------------------------------------- grad checking

@dataclass
class GradCheckEntry:
    name: str
    status: str  # "ok" | "fail" | "sg_excluded"
    max_abs_err: float
    max_rel_err: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.status != "fail" for e in self.entries)

    def sg_excluded(self) -> list[str]:
        return [e.name for e in self.entries if e.status == "sg_excluded"]

    def failed(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.status == "fail"]


def grad_check(
    loss_fn: Callable[[], tuple[Tape, Node]],
    params: ParamStore,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
    fd_step: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` rebuilds the forward pass from current parameter values and
    returns ``(tape, scalar loss node)``.  A parameter whose tape gradient is
    exactly zero while finite differences see signal is classified
    ``sg_excluded`` (reachable only through blocked edges), not a failure.
    """
    params.zero_grads()
    tape, loss = loss_fn()
    if not np.all(np.isfinite(loss.value)):
        raise NumericError("grad_check: non-finite loss at the base point")
    tape.backward(loss)
    tape_grads = {name: p.grad.copy() for name, p in params.items() if p.trainable}

    def eval_loss(pname: str) -> float:
        v = float(loss_fn()[1].value)
        if not np.isfinite(v):
            raise NumericError(f"grad_check: non-finite loss while perturbing {pname}")
        return v

    report = GradCheckReport()
    for name, p in params.items():
        if not p.trainable:
            continue
        fd = np.zeros_like(p.value)
        flat_v = p.value.ravel()
        flat_fd = fd.ravel()
        for i in range(flat_v.size):
            orig = flat_v[i]
            flat_v[i] = orig + fd_step
            lo_hi = eval_loss(name)
            flat_v[i] = orig - fd_step
            lo_lo = eval_loss(name)
            flat_v[i] = orig
            flat_fd[i] = (lo_hi - lo_lo) / (2.0 * fd_step)
        tg = tape_grads[name]
        abs_err = np.abs(tg - fd)
        denom = np.maximum(np.maximum(np.abs(tg), np.abs(fd)), 1e-300)
        rel_err = abs_err / denom
        if np.all(tg == 0.0) and np.any(np.abs(fd) > abs_tol):
            status = "sg_excluded"
        elif np.all((abs_err <= abs_tol) | (rel_err <= rel_tol)):
            status = "ok"
        else:
            status = "fail"
        report.entries.append(
            GradCheckEntry(name, status, float(abs_err.max()), float(rel_err.max()))
        )
    return report

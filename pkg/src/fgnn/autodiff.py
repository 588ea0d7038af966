"""A minimal reverse-mode gradient tape over numpy arrays.

Only the operations an FGNN forward pass needs are supported. Nodes are
recorded in forward order; :meth:`Tape.backward` walks them in reverse
once and the tape is then spent.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import TapeError


def bilinear_weights(w: np.ndarray, b: np.ndarray, m: int, n: int) -> np.ndarray:
    """Rearrange a linear Q net (rows a*n+j) into an (n, (dt+1)*m) matrix."""
    w3 = np.concatenate([w.reshape(m, n, -1), b.reshape(m, n, 1)], axis=2)
    return np.ascontiguousarray(w3.transpose(1, 2, 0)).reshape(n, -1)


class Var:
    __slots__ = ("value", "grad", "needs_grad", "_backward", "_parents")

    def __init__(self, value, parents=(), backward=None, needs_grad=False):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad or any(p.needs_grad for p in parents)
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape


def _accum(v: Var, g):
    if not v.needs_grad:
        return
    v.grad = g if v.grad is None else v.grad + g


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.consumed = False
        # smallest gap between the two largest entries of any max aggregation
        self.margin = np.inf
        self._pattern = hashlib.sha256()

    @property
    def signature(self) -> str:
        """Digest of every relu mask and max-aggregation winner recorded so far.

        Two forward passes with equal signatures lie in the same linear
        piece of the network.
        """
        return self._pattern.hexdigest()

    def _record(self, value, parents, backward) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        v = Var(value, parents, backward)
        if v.needs_grad:
            self.nodes.append(v)
        return v

    def leaf(self, value) -> Var:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        return Var(np.asarray(value, dtype=np.float64), needs_grad=True)

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64))

    # -- operations ---------------------------------------------------------

    def affine(self, x: Var, w: Var, b: Var) -> Var:
        out = x.value @ w.value.T + b.value

        def back(g):
            if x.needs_grad:
                _accum(x, g @ w.value)
            _accum(w, g.T @ x.value)
            _accum(b, g.sum(axis=0))
        return self._record(out, (x, w, b), back)

    def relu(self, x: Var) -> Var:
        mask = x.value > 0
        self._pattern.update(np.packbits(mask).tobytes())

        def back(g):
            _accum(x, g * mask)
        return self._record(np.where(mask, x.value, 0.0), (x,), back)

    def add(self, a: Var, b: Var) -> Var:
        def back(g):
            _accum(a, g)
            _accum(b, g)
        return self._record(a.value + b.value, (a, b), back)

    def concat(self, a: Var, b: Var) -> Var:
        k = a.value.shape[1]

        def back(g):
            _accum(a, g[:, :k])
            _accum(b, g[:, k:])
        return self._record(np.concatenate([a.value, b.value], axis=1), (a, b), back)

    def gather(self, x: Var, idx: np.ndarray) -> Var:
        def back(g):
            dx = np.zeros_like(x.value)
            np.add.at(dx, idx, g)
            _accum(x, dx)
        return self._record(x.value[idx], (x,), back)

    def edge_matvec(self, q: Var, mv: Var, m: int, n: int) -> Var:
        """Row-wise ``reshape(q[e], (m, n)) @ mv[e]``."""
        qm = q.value.reshape(-1, m, n)
        out = np.einsum("emn,en->em", qm, mv.value)

        def back(g):
            if q.needs_grad:
                _accum(q, np.einsum("em,en->emn", g, mv.value).reshape(q.value.shape))
            if mv.needs_grad:
                _accum(mv, np.einsum("em,emn->en", g, qm))
        return self._record(out, (q, mv), back)

    def edge_bilinear(self, t: Var, mv: Var, w: Var, b: Var, m: int, n: int) -> Var:
        """``edge_matvec`` fused with a linear Q net ``q = t @ w.T + b``.

        Written as dense products against the stacked matrices of ``w``
        so no per-edge m x n matrix is formed.
        """
        if t.needs_grad:
            raise TapeError("edge features must be constants")
        wcat = bilinear_weights(w.value, b.value, m, n)
        tt = np.concatenate([t.value, np.ones((t.value.shape[0], 1))], axis=1)
        k = tt.shape[1]
        prod = (mv.value @ wcat).reshape(-1, k, m)
        out = np.matmul(tt[:, None, :], prod)[:, 0, :]

        def back(g):
            dprod = (tt[:, :, None] * g[:, None, :]).reshape(-1, k * m)
            if mv.needs_grad:
                _accum(mv, dprod @ wcat.T)
            dw3 = (mv.value.T @ dprod).reshape(n, k, m).transpose(2, 0, 1)
            _accum(w, dw3[:, :, :-1].reshape(m * n, k - 1))
            _accum(b, dw3[:, :, -1].reshape(m * n))
        return self._record(out, (mv, w, b), back)

    def segment_max(self, x: Var, order: np.ndarray, starts: np.ndarray) -> Var:
        """Max over row segments; the gradient goes to the first maximal
        row of each segment in edge order."""
        xs = x.value[order]
        out = np.maximum.reduceat(xs, starts, axis=0)
        n_rows = xs.shape[0]
        seg = np.repeat(np.arange(starts.size), np.diff(np.r_[starts, n_rows]))
        rows = np.where(xs == out[seg], np.arange(n_rows)[:, None], n_rows)
        first = np.minimum.reduceat(rows, starts, axis=0)
        self._pattern.update(first.tobytes())
        # gap to the runner-up, used to detect ties
        masked = xs.copy()
        masked[first, np.arange(xs.shape[1])[None, :].repeat(starts.size, 0)] = -np.inf
        second = np.maximum.reduceat(masked, starts, axis=0)
        gaps = (out - second)[np.isfinite(second)]
        if gaps.size:
            self.margin = min(self.margin, float(gaps.min()))

        def back(g):
            dxs = np.zeros_like(xs)
            dxs[first, np.arange(xs.shape[1])[None, :].repeat(starts.size, 0)] = g
            dx = np.zeros_like(x.value)
            dx[order] = dxs
            _accum(x, dx)
        return self._record(out, (x,), back)

    def softmax_xent(self, logits: Var, labels: np.ndarray) -> Var:
        """Mean over rows of -log softmax(logits)[label]."""
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = labels.size
        loss = -logp[np.arange(n), labels].mean()

        def back(g):
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            _accum(logits, g * p / n)
        return self._record(np.asarray(loss), (logits,), back)

    # -- reverse sweep ------------------------------------------------------

    def backward(self, out: Var) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward")
        self.consumed = True
        out.grad = np.ones_like(out.value)
        for v in reversed(self.nodes):
            if v._backward is not None and v.grad is not None:
                v._backward(v.grad)

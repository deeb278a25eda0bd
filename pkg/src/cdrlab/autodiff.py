"""Reverse-mode automatic differentiation over dense float64 arrays.

Tape-based: operations executed inside a ``Graph`` context append one
record each, and ``backward`` replays the tape in reverse. Because the
tape order is the construction order, gradient accumulation order is
fixed and backward is bitwise deterministic. Outside any ``Graph``
context the same operations run as plain numpy with no recording, which
is what evaluation code uses.

Only the operations the encoder and the training losses need are
provided: rank 0/1/2 tensors, no general broadcasting.
"""

import numpy as np

from .errors import (
    ContractViolation,
    DegenerateInputError,
    NumericError,
    ShapeError,
)

# Rows with Euclidean norm below this are refused rather than clamped,
# so that encoder collapse surfaces as an error instead of a silent NaN.
EPS_NORM = 1e-12


class Tensor:
    """Dense float64 array node.

    Values are treated as immutable after creation (the finite-difference
    verifier is the one sanctioned exception; it restores what it pokes).
    ``grad`` is filled by backward for every tensor with requires_grad.
    """

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        vals = np.asarray(values, dtype=np.float64)
        if not vals.flags["C_CONTIGUOUS"]:
            vals = np.ascontiguousarray(vals)
        self.values = vals
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        if self.values.size != 1:
            raise ContractViolation(f"item() needs a scalar, got shape {self.shape}")
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class OpRecord:
    """One tape entry: inputs, output, and the local gradient rule.

    ``grad_fn`` maps the output gradient to one gradient (or None) per
    input, evaluated at the recorded values.
    """

    __slots__ = ("inputs", "output", "grad_fn")

    def __init__(self, inputs, output, grad_fn):
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_ACTIVE_GRAPHS = []


class Graph:
    """Operation tape for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)``. A graph instance must not be shared across
    concurrent executions; construction and backward are single-threaded.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_GRAPHS.pop()
        assert popped is self
        return False

    def backward(self, loss):
        """Populate ``grad`` for every requires_grad tensor reachable from loss.

        Visits each record exactly once, in reverse construction order.
        Leaf gradients accumulate (callers reset between steps); scratch
        gradients of intermediate tensors are cleared on entry, so calling
        backward twice after a grad reset gives bit-identical results.
        """
        if not isinstance(loss, Tensor):
            raise ContractViolation("backward expects a Tensor loss")
        if loss.values.size != 1:
            raise ContractViolation(
                f"backward expects a scalar loss, got shape {loss.shape}"
            )
        produced = {id(rec.output) for rec in self.records}
        if self.records and id(loss) not in produced and not loss.requires_grad:
            raise ContractViolation("loss is not reachable from this graph")

        for rec in self.records:
            rec.output.grad = None
        seed = np.ones_like(loss.values)
        loss.grad = seed if loss.grad is None else loss.grad + seed

        for rec in reversed(self.records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            input_grads = rec.grad_fn(out_grad)
            for tensor, grad in zip(rec.inputs, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.array(grad, dtype=np.float64)
                else:
                    tensor.grad = tensor.grad + grad


def backward(graph, loss):
    """Module-level alias for ``Graph.backward``."""
    graph.backward(loss)


def _emit(values, inputs, grad_fn):
    out = Tensor(values)
    if _ACTIVE_GRAPHS and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE_GRAPHS[-1].records.append(OpRecord(tuple(inputs), out, grad_fn))
    return out


def _require_matrix(t, name):
    if t.values.ndim != 2:
        raise ShapeError(f"{name} must be a matrix, got shape {t.shape}")


# ---------------------------------------------------------------------------
# basic arithmetic


def matmul(a, b):
    """Matrix product a @ b for 2-d tensors."""
    _require_matrix(a, "matmul lhs")
    _require_matrix(b, "matmul rhs")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def grad_fn(g):
        return g @ bv.T, av.T @ g

    return _emit(av @ bv, (a, b), grad_fn)


def transpose(a):
    _require_matrix(a, "transpose input")

    def grad_fn(g):
        return (g.T.copy(),)

    return _emit(a.values.T.copy(), (a,), grad_fn)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")

    def grad_fn(g):
        return g, g

    return _emit(a.values + b.values, (a, b), grad_fn)


def mul(a, b):
    """Elementwise product of same-shape tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes differ, {a.shape} vs {b.shape}")
    av, bv = a.values, b.values

    def grad_fn(g):
        return g * bv, g * av

    return _emit(av * bv, (a, b), grad_fn)


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)

    def grad_fn(g):
        return (c * g,)

    return _emit(c * a.values, (a,), grad_fn)


def add_bias(a, b):
    """Add a length-n bias vector to every row of an m-by-n matrix."""
    _require_matrix(a, "add_bias input")
    if b.values.ndim != 1 or b.values.shape[0] != a.shape[1]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not fit rows of {a.shape}")

    def grad_fn(g):
        return g, g.sum(axis=0)

    return _emit(a.values + b.values, (a, b), grad_fn)


def tanh(a):
    out_vals = np.tanh(a.values)

    def grad_fn(g):
        return (g * (1.0 - out_vals * out_vals),)

    return _emit(out_vals, (a,), grad_fn)


def exp(a):
    out_vals = np.exp(a.values)

    def grad_fn(g):
        return (g * out_vals,)

    return _emit(out_vals, (a,), grad_fn)


def concat_rows(a, b):
    """Stack two matrices with equal column counts."""
    _require_matrix(a, "concat_rows lhs")
    _require_matrix(b, "concat_rows rhs")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"concat_rows: column counts differ, {a.shape} vs {b.shape}")
    m = a.shape[0]

    def grad_fn(g):
        return g[:m], g[m:]

    return _emit(np.concatenate([a.values, b.values], axis=0), (a, b), grad_fn)


def sum_all(a):
    shape = a.values.shape

    def grad_fn(g):
        return (np.full(shape, float(g)),)

    return _emit(np.asarray(a.values.sum()), (a,), grad_fn)


def mean_all(a):
    size = a.values.size
    shape = a.values.shape

    def grad_fn(g):
        return (np.full(shape, float(g) / size),)

    return _emit(np.asarray(a.values.mean()), (a,), grad_fn)


def diag_part(a):
    """Extract the main diagonal of a square matrix as a vector."""
    _require_matrix(a, "diag_part input")
    m, n = a.shape
    if m != n:
        raise ShapeError(f"diag_part needs a square matrix, got {a.shape}")

    def grad_fn(g):
        return (np.diagflat(g),)

    return _emit(np.diagonal(a.values).copy(), (a,), grad_fn)


def take_per_row(a, indices):
    """Pick one entry per row: out[i] = a[i, indices[i]]."""
    _require_matrix(a, "take_per_row input")
    idx = np.asarray(indices, dtype=np.intp)
    m, n = a.shape
    if idx.shape != (m,):
        raise ShapeError(f"take_per_row: need {m} indices, got shape {idx.shape}")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= n:
        raise ContractViolation("take_per_row: index out of range")
    rows = np.arange(m)

    def grad_fn(g):
        full = np.zeros((m, n))
        full[rows, idx] = g
        return (full,)

    return _emit(a.values[rows, idx].copy(), (a,), grad_fn)


# ---------------------------------------------------------------------------
# normalization and distribution ops


def row_l2_normalize(a):
    """Scale every row of a matrix to unit Euclidean norm.

    Rows with norm below EPS_NORM raise rather than clamp; a collapsing
    encoder should fail loudly.
    """
    _require_matrix(a, "row_l2_normalize input")
    norms = np.linalg.norm(a.values, axis=1)
    bad = np.flatnonzero(norms < EPS_NORM)
    if bad.size:
        raise DegenerateInputError(
            f"row {bad[0]} has norm {norms[bad[0]]:.3e} < {EPS_NORM:g}"
        )
    out_vals = a.values / norms[:, None]

    def grad_fn(g):
        # d(x/r)/dx = (I - y y^T)/r per row, y the normalized row
        dot = (g * out_vals).sum(axis=1, keepdims=True)
        return ((g - dot * out_vals) / norms[:, None],)

    return _emit(out_vals, (a,), grad_fn)


def log_softmax_rows(a):
    """Row-wise log-softmax with max-subtraction stabilization."""
    _require_matrix(a, "log_softmax_rows input")
    if not np.isfinite(a.values).all():
        raise NumericError("log_softmax_rows: non-finite input")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_vals = shifted - lse
    probs = np.exp(out_vals)

    def grad_fn(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _emit(out_vals, (a,), grad_fn)


def softmax_rows(a):
    """Row-wise softmax, as exp(log_softmax); rows sum to 1 within 1e-9."""
    return exp(log_softmax_rows(a))


def _check_prob_rows(t, name):
    if (t.values < 0).any():
        raise ContractViolation(f"{name}: negative entries are not probabilities")
    sums = t.values.sum(axis=1)
    off = np.abs(sums - 1.0)
    bad = np.flatnonzero(off > 1e-6)
    if bad.size:
        raise ContractViolation(
            f"{name}: row {bad[0]} sums to {sums[bad[0]]:.9f}, not 1"
        )


def entropy_rows(p):
    """Shannon entropy of each row (natural log), 0*ln 0 taken as 0."""
    _require_matrix(p, "entropy_rows input")
    _check_prob_rows(p, "entropy_rows")
    pv = p.values
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(pv > 0, pv * np.log(np.where(pv > 0, pv, 1.0)), 0.0)
    out_vals = -plogp.sum(axis=1)

    def grad_fn(g):
        # -(ln p + 1) on the support; zero entries stay zero
        with np.errstate(divide="ignore"):
            local = np.where(pv > 0, -(np.log(np.where(pv > 0, pv, 1.0)) + 1.0), 0.0)
        return (local * g[:, None],)

    return _emit(out_vals, (p,), grad_fn)


def kl_rows(p, q):
    """Row-wise KL divergence sum_j p*ln(p/q); terms with p=0 contribute 0."""
    _require_matrix(p, "kl_rows p")
    _require_matrix(q, "kl_rows q")
    if p.shape != q.shape:
        raise ShapeError(f"kl_rows: shapes differ, {p.shape} vs {q.shape}")
    _check_prob_rows(p, "kl_rows p")
    _check_prob_rows(q, "kl_rows q")
    pv, qv = p.values, q.values
    undefined = (pv > 0) & (qv == 0)
    if undefined.any():
        i, j = np.argwhere(undefined)[0]
        raise ContractViolation(
            f"kl_rows undefined: q[{i},{j}] = 0 where p[{i},{j}] > 0"
        )
    support = pv > 0
    safe_p = np.where(support, pv, 1.0)
    safe_q = np.where(support, qv, 1.0)
    log_ratio = np.log(safe_p) - np.log(safe_q)
    out_vals = np.where(support, pv * log_ratio, 0.0).sum(axis=1)

    def grad_fn(g):
        dp = np.where(support, log_ratio + 1.0, 0.0) * g[:, None]
        dq = np.where(support, -pv / safe_q, 0.0) * g[:, None]
        return dp, dq

    return _emit(out_vals, (p, q), grad_fn)


# ---------------------------------------------------------------------------
# verification harness


def finite_diff_check(fn, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from scratch on every call (it closes
    over ``params``); the analytic side runs once inside a fresh Graph,
    the numeric side perturbs one coordinate at a time. Relative error is
    |analytic - central| / max(1, |central|), maximized over every
    coordinate of every parameter.
    """
    if step <= 0:
        raise ContractViolation(f"finite_diff_check: step must be positive, got {step}")

    for p in params:
        p.zero_grad()
    with Graph() as g:
        loss = fn()
        if not np.isfinite(loss.values).all():
            raise NumericError("finite_diff_check: non-finite loss")
        g.backward(loss)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.values) for p in params
    ]
    for p in params:
        p.zero_grad()

    worst = 0.0
    for p, ag in zip(params, analytic):
        flat_vals = p.values.reshape(-1)
        flat_grad = ag.reshape(-1)
        for i in range(flat_vals.size):
            orig = flat_vals[i]
            flat_vals[i] = orig + step
            f_plus = fn().item()
            flat_vals[i] = orig - step
            f_minus = fn().item()
            flat_vals[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("finite_diff_check: non-finite perturbed loss")
            central = (f_plus - f_minus) / (2.0 * step)
            err = abs(flat_grad[i] - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst

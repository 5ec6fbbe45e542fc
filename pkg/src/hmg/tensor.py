"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Every differentiable operation goes through ``forward(kind, inputs, **params)``.
When a ``Tape`` is active (``with Tape() as tape:``) and any input requires a
gradient, a record is appended; ``backward`` then replays the tape in reverse,
visiting each record exactly once.  The op set is exactly what the model
needs: dense linear algebra, the usual activations, masked/segmented
softmaxes, batch norm, dropout, cross entropy, and row gather/scatter plus a
fused edge-weighted aggregation for message passing.

Aggregating kernels (segment sums, scatter-adds, the fused aggregation) all
accumulate in ascending destination-index order, so results are bit-exact
reproducible across runs.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from hmg import kernels


class ShapeError(ValueError):
    """An op received inputs whose shapes violate its contract."""

    def __init__(self, op: str, detail: str, shapes: Sequence[tuple] = ()):
        self.op = op
        self.shapes = tuple(shapes)
        msg = f"{op}: {detail}"
        if shapes:
            msg += f" (got shapes {list(self.shapes)})"
        super().__init__(msg)


class UnknownOpError(ValueError):
    """``forward`` was asked for an op kind that is not registered."""


_ids = itertools.count()


class Tensor:
    """A dense row-major float64 array plus a requires-grad flag."""

    __slots__ = ("_data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        # numpy quietly collapses 0-d arrays to immutable scalars in
        # arithmetic; always pin a real ndarray here
        self._data = np.asarray(value, dtype=np.float64)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple  # Tensor refs, in op order
    output: Tensor
    ctx: dict


class Tape:
    """Ordered record of ops; inputs always precede their consumers."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self.records)


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# Op registry.  Forward functions return (out_array, ctx); backward functions
# map (ctx, grad_out) to per-input gradients (None for inputs that do not
# need one).  Shape checks raise ShapeError naming the op.
# ---------------------------------------------------------------------------

@dataclass
class OpDef:
    forward: Callable
    backward: Callable


OPS: dict[str, OpDef] = {}


def _register(name: str):
    def deco(pair):
        fwd, bwd = pair()
        OPS[name] = OpDef(fwd, bwd)
        return pair
    return deco


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach ``grad.shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


@_register("matmul")
def _op_matmul():
    def fwd(arrays, params):
        a, b = arrays
        if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", "inner dimensions must agree", (a.shape, b.shape))
        return a @ b, {"a": a, "b": b}

    def bwd(ctx, g):
        a, b = ctx["a"], ctx["b"]
        if b.ndim == 1:
            return np.outer(g, b), a.T @ g
        return g @ b.T, a.T @ g

    return fwd, bwd


def _binary(op_name, f, dfa, dfb):
    def fwd(arrays, params):
        a, b = arrays
        try:
            out = f(a, b)
        except ValueError:
            raise ShapeError(op_name, "operands are not broadcastable", (a.shape, b.shape))
        return out, {"a": a, "b": b}

    def bwd(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return _unbroadcast(dfa(a, b, g), a.shape), _unbroadcast(dfb(a, b, g), b.shape)

    return fwd, bwd


@_register("add")
def _op_add():
    return _binary("add", lambda a, b: a + b, lambda a, b, g: g, lambda a, b, g: g)


@_register("mul")
def _op_mul():
    return _binary("mul", lambda a, b: a * b, lambda a, b, g: g * b, lambda a, b, g: g * a)


@_register("scale")
def _op_scale():
    def fwd(arrays, params):
        x, s = arrays
        if s.size != 1:
            raise ShapeError("scale", "scale factor must be a single value", (x.shape, s.shape))
        return x * s.reshape(()), {"x": x, "s": s}

    def bwd(ctx, g):
        x, s = ctx["x"], ctx["s"]
        return g * s.reshape(()), np.sum(g * x).reshape(s.shape)

    return fwd, bwd


@_register("concat")
def _op_concat():
    def fwd(arrays, params):
        axis = params["axis"]
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ShapeError("concat", f"inputs not stackable along axis {axis}",
                             [a.shape for a in arrays])
        return out, {"sizes": [a.shape[axis] for a in arrays], "axis": axis}

    def bwd(ctx, g):
        splits = np.cumsum(ctx["sizes"])[:-1]
        return tuple(np.split(g, splits, axis=ctx["axis"]))

    return fwd, bwd


@_register("reshape")
def _op_reshape():
    def fwd(arrays, params):
        (x,) = arrays
        shape = params["shape"]
        try:
            out = x.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", f"cannot reshape to {shape}", (x.shape,))
        return out, {"shape": x.shape}

    def bwd(ctx, g):
        return (g.reshape(ctx["shape"]),)

    return fwd, bwd


def _reduction(op_name, f, df):
    def fwd(arrays, params):
        (x,) = arrays
        if "row" in op_name and x.ndim != 2:
            raise ShapeError(op_name, "expects a 2-d input", (x.shape,))
        return f(x), {"x": x}

    def bwd(ctx, g):
        return (df(ctx["x"], g),)

    return fwd, bwd


@_register("sum")
def _op_sum():
    return _reduction("sum", lambda x: np.sum(x),
                      lambda x, g: np.broadcast_to(g, x.shape).copy())


@_register("mean")
def _op_mean():
    return _reduction("mean", lambda x: np.mean(x),
                      lambda x, g: np.broadcast_to(g / x.size, x.shape).copy())


@_register("row-sum")
def _op_row_sum():
    return _reduction("row-sum", lambda x: x.sum(axis=1),
                      lambda x, g: np.repeat(g[:, None], x.shape[1], axis=1))


@_register("row-mean")
def _op_row_mean():
    return _reduction("row-mean", lambda x: x.mean(axis=1),
                      lambda x, g: np.repeat(g[:, None] / x.shape[1], x.shape[1], axis=1))


def _unary(f, df_from_ctx):
    def fwd(arrays, params):
        (x,) = arrays
        out = f(x, params)
        return out, {"x": x, "out": out, "params": params}

    def bwd(ctx, g):
        return (df_from_ctx(ctx, g),)

    return fwd, bwd


@_register("exp")
def _op_exp():
    return _unary(lambda x, p: np.exp(x), lambda ctx, g: g * ctx["out"])


@_register("relu")
def _op_relu():
    return _unary(lambda x, p: np.maximum(x, 0.0),
                  lambda ctx, g: g * (ctx["x"] > 0.0))


@_register("leaky-relu")
def _op_leaky_relu():
    def f(x, p):
        s = p["slope"]
        return np.where(x > 0.0, x, s * x)

    def df(ctx, g):
        s = ctx["params"]["slope"]
        return g * np.where(ctx["x"] > 0.0, 1.0, s)

    return _unary(f, df)


@_register("sigmoid")
def _op_sigmoid():
    def f(x, p):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    return _unary(f, lambda ctx, g: g * ctx["out"] * (1.0 - ctx["out"]))


@_register("clip")
def _op_clip():
    def f(x, p):
        return np.clip(x, p["lo"], p["hi"])

    def df(ctx, g):
        x, p = ctx["x"], ctx["params"]
        return g * ((x > p["lo"]) & (x < p["hi"]))

    return _unary(f, df)


@_register("masked-row-softmax")
def _op_masked_row_softmax():
    def fwd(arrays, params):
        (logits,) = arrays
        squeeze = logits.ndim == 1
        z = logits[None, :] if squeeze else logits
        if z.ndim != 2:
            raise ShapeError("masked-row-softmax", "expects a 1-d or 2-d input", (logits.shape,))
        mask = params.get("mask")
        if mask is None:
            mask = np.ones(z.shape, dtype=bool)
        else:
            mask = np.asarray(mask, dtype=bool)
            if squeeze and mask.ndim == 1:
                mask = mask[None, :]
            if mask.shape != z.shape:
                raise ShapeError("masked-row-softmax", "mask shape must match logits",
                                 (logits.shape, mask.shape))
        if not mask.any(axis=1).all():
            raise ShapeError("masked-row-softmax", "every row needs at least one unmasked entry")
        neg = np.where(mask, z, -np.inf)
        m = neg.max(axis=1, keepdims=True)
        e = np.exp(neg - m)
        e[~mask] = 0.0
        out = e / e.sum(axis=1, keepdims=True)
        if squeeze:
            out = out[0]
        return out, {"out": out, "squeeze": squeeze}

    def bwd(ctx, g):
        s = ctx["out"]
        if ctx["squeeze"]:
            s = s[None, :]
            g = g[None, :]
        inner = (g * s).sum(axis=1, keepdims=True)
        gx = s * (g - inner)
        if ctx["squeeze"]:
            gx = gx[0]
        return (gx,)

    return fwd, bwd


@_register("segment-softmax")
def _op_segment_softmax():
    def fwd(arrays, params):
        (logits,) = arrays
        indptr = np.asarray(params["indptr"], dtype=np.int64)
        if logits.ndim != 1 or indptr[-1] != logits.shape[0]:
            raise ShapeError("segment-softmax", "indptr must cover a 1-d logit vector",
                             (logits.shape,))
        out = np.empty_like(logits)
        kernels.segment_softmax_fwd(logits, indptr, out)
        return out, {"out": out, "indptr": indptr}

    def bwd(ctx, g):
        gx = np.empty_like(g)
        kernels.segment_softmax_bwd(ctx["out"], g, ctx["indptr"], gx)
        return (gx,)

    return fwd, bwd


class BatchNormState:
    """Running statistics for one batch-norm site (one node type, one layer)."""

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)

    def copy(self) -> "BatchNormState":
        fresh = BatchNormState(self.mean.shape[0])
        fresh.mean = self.mean.copy()
        fresh.var = self.var.copy()
        return fresh


@_register("batch-norm")
def _op_batch_norm():
    def fwd(arrays, params):
        x, gamma, beta = arrays
        if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError("batch-norm", "expects (m,n) input with (n,) affine params",
                             (x.shape, gamma.shape, beta.shape))
        state: BatchNormState = params["state"]
        eps = params["eps"]
        if params["mode"] == "train" and x.shape[0] > 0:
            mu = x.mean(axis=0)
            var = x.var(axis=0)  # biased, also used for the running estimate
            mom = params["momentum"]
            # in place: the arrays are aliased as ParamStore buffers
            state.mean *= 1.0 - mom
            state.mean += mom * mu
            state.var *= 1.0 - mom
            state.var += mom * var
        else:
            mu = state.mean
            var = state.var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu) * inv
        out = gamma * xhat + beta
        effective = "train" if (params["mode"] == "train" and x.shape[0] > 0) else "eval"
        return out, {"xhat": xhat, "inv": inv, "gamma": gamma, "mode": effective,
                     "m": x.shape[0]}

    def bwd(ctx, g):
        xhat, inv, gamma = ctx["xhat"], ctx["inv"], ctx["gamma"]
        ggamma = (g * xhat).sum(axis=0)
        gbeta = g.sum(axis=0)
        if ctx["mode"] == "train":
            m = ctx["m"]
            gx = (gamma * inv) * (g - gbeta / m - xhat * (ggamma / m))
        else:
            gx = g * (gamma * inv)
        return gx, ggamma, gbeta

    return fwd, bwd


@_register("dropout")
def _op_dropout():
    def fwd(arrays, params):
        (x,) = arrays
        p = params["p"]
        keep = 1.0 - p
        mask = params["rng"].random(x.shape) >= p
        return x * mask / keep, {"mask": mask, "keep": keep}

    def bwd(ctx, g):
        return (g * ctx["mask"] / ctx["keep"],)

    return fwd, bwd


@_register("cross-entropy-with-logits")
def _op_cross_entropy():
    def fwd(arrays, params):
        (logits,) = arrays
        labels = np.asarray(params["labels"], dtype=np.int64)
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError("cross-entropy-with-logits",
                             "expects (m,C) logits and m labels", (logits.shape,))
        if logits.shape[0] == 0:
            raise ShapeError("cross-entropy-with-logits", "empty batch")
        if labels.min() < 0 or labels.max() >= logits.shape[1]:
            raise ShapeError("cross-entropy-with-logits", "label outside class range")
        m = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(m).sum(axis=1)) + logits.max(axis=1)
        per_row = lse - logits[np.arange(len(labels)), labels]
        cw = params.get("class_weights")
        if cw is not None:
            w = np.asarray(cw, dtype=np.float64)[labels]
        else:
            w = np.ones(len(labels))
        wsum = w.sum()
        out = np.float64((per_row * w).sum() / wsum)
        return out, {"logits": logits, "labels": labels, "w": w, "wsum": wsum}

    def bwd(ctx, g):
        logits, labels = ctx["logits"], ctx["labels"]
        m = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(m)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(len(labels)), labels] -= 1.0
        p *= (ctx["w"] / ctx["wsum"])[:, None]
        return (p * g,)

    return fwd, bwd


@_register("gather-rows")
def _op_gather_rows():
    def fwd(arrays, params):
        (x,) = arrays
        idx = np.asarray(params["indices"], dtype=np.int64)
        if x.ndim not in (1, 2):
            raise ShapeError("gather-rows", "expects a 1-d or 2-d input", (x.shape,))
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError("gather-rows", "index out of range", (x.shape,))
        return x[idx], {"idx": idx, "n": x.shape[0], "ndim": x.ndim,
                        "cols": x.shape[1] if x.ndim == 2 else 0}

    def bwd(ctx, g):
        idx, n = ctx["idx"], ctx["n"]
        if ctx["ndim"] == 1:
            return (np.bincount(idx, weights=g, minlength=n),)
        gx = np.zeros((n, ctx["cols"]))
        np.add.at(gx, idx, g)
        return (gx,)

    return fwd, bwd


@_register("scatter-add-rows")
def _op_scatter_add_rows():
    def fwd(arrays, params):
        (x,) = arrays
        idx = np.asarray(params["indices"], dtype=np.int64)
        n = int(params["num_rows"])
        if idx.shape != (x.shape[0],):
            raise ShapeError("scatter-add-rows", "one index per input row",
                             (x.shape, idx.shape))
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError("scatter-add-rows", "destination index out of range")
        if x.ndim == 1:
            out = np.bincount(idx, weights=x, minlength=n)
        elif x.ndim == 2:
            out = np.zeros((n, x.shape[1]))
            np.add.at(out, idx, x)  # ufunc.at applies in index order: ascending per dest
        else:
            raise ShapeError("scatter-add-rows", "expects a 1-d or 2-d input", (x.shape,))
        return out, {"idx": idx}

    def bwd(ctx, g):
        return (g[ctx["idx"]],)

    return fwd, bwd


@_register("edge-weighted-sum")
def _op_edge_weighted_sum():
    """out[i] = sum over edges e with dst(e)=i of w[e] * values[src[e]].

    Edges arrive grouped by destination through ``indptr`` (one segment per
    output row, ascending), which fixes the accumulation order.
    """

    def fwd(arrays, params):
        values, w = arrays
        src = np.asarray(params["src"], dtype=np.int64)
        indptr = np.asarray(params["indptr"], dtype=np.int64)
        if values.ndim != 2 or w.ndim != 1 or w.shape[0] != src.shape[0]:
            raise ShapeError("edge-weighted-sum", "expects (n,d) values and per-edge weights",
                             (values.shape, w.shape))
        if indptr[-1] != src.shape[0]:
            raise ShapeError("edge-weighted-sum", "indptr must cover all edges")
        out = np.zeros((indptr.shape[0] - 1, values.shape[1]))
        kernels.edge_weighted_sum_fwd(w, src, indptr, values, out)
        return out, {"values": values, "w": w, "src": src, "indptr": indptr}

    def bwd(ctx, g):
        values, w, src, indptr = ctx["values"], ctx["w"], ctx["src"], ctx["indptr"]
        gvalues = np.zeros_like(values)
        kernels.edge_weighted_sum_bwd_values(w, src, indptr, g, gvalues)
        gw = np.empty_like(w)
        kernels.edge_dot(values, g, src, indptr, gw)
        return gvalues, gw

    return fwd, bwd


# ---------------------------------------------------------------------------
# Public op entry points.
# ---------------------------------------------------------------------------

def forward(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Run one op, recording it on the active tape when gradients are needed."""
    op = OPS.get(kind)
    if op is None:
        raise UnknownOpError(f"unknown op kind {kind!r}")
    tensors = [as_tensor(x) for x in inputs]
    out_arr, ctx = op.forward([t.data for t in tensors], params)
    needs_grad = any(t.requires_grad for t in tensors)
    out = Tensor(out_arr, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.records.append(TapeRecord(kind, tuple(tensors), out, ctx))
    return out


def matmul(a, b) -> Tensor:
    return forward("matmul", [a, b])


def add(a, b) -> Tensor:
    return forward("add", [a, b])


def mul(a, b) -> Tensor:
    return forward("mul", [a, b])


def scale(x, s) -> Tensor:
    return forward("scale", [x, s])


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    return forward("concat", list(tensors), axis=axis)


def reshape(x, shape) -> Tensor:
    return forward("reshape", [x], shape=tuple(shape))


def sum_all(x) -> Tensor:
    return forward("sum", [x])


def mean_all(x) -> Tensor:
    return forward("mean", [x])


def row_sum(x) -> Tensor:
    return forward("row-sum", [x])


def row_mean(x) -> Tensor:
    return forward("row-mean", [x])


def exp(x) -> Tensor:
    return forward("exp", [x])


def relu(x) -> Tensor:
    return forward("relu", [x])


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return forward("leaky-relu", [x], slope=slope)


def sigmoid(x) -> Tensor:
    return forward("sigmoid", [x])


def clip(x, lo: float, hi: float) -> Tensor:
    return forward("clip", [x], lo=lo, hi=hi)


def masked_row_softmax(logits, mask=None) -> Tensor:
    return forward("masked-row-softmax", [logits], mask=mask)


def segment_softmax(logits, indptr) -> Tensor:
    return forward("segment-softmax", [logits], indptr=indptr)


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str,
               eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"batch-norm mode must be 'train' or 'eval', got {mode!r}")
    return forward("batch-norm", [x, gamma, beta], state=state, mode=mode,
                   eps=eps, momentum=momentum)


def dropout(x, p: float, mode: str, rng: np.random.Generator | None = None) -> Tensor:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if mode == "eval" or p == 0.0:
        return as_tensor(x)  # identity: gradient flows through the input itself
    if mode != "train":
        raise ValueError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ValueError("dropout in train mode needs an RNG")
    return forward("dropout", [x], p=p, rng=rng)


def cross_entropy_with_logits(logits, labels, class_weights=None) -> Tensor:
    return forward("cross-entropy-with-logits", [logits], labels=labels,
                   class_weights=class_weights)


def gather_rows(x, indices) -> Tensor:
    return forward("gather-rows", [x], indices=indices)


def scatter_add_rows(x, indices, num_rows: int) -> Tensor:
    return forward("scatter-add-rows", [x], indices=indices, num_rows=num_rows)


def edge_weighted_sum(values, weights, src, indptr) -> Tensor:
    return forward("edge-weighted-sum", [values, weights], src=src, indptr=indptr)


# ---------------------------------------------------------------------------
# Parameters and gradients.
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus non-trainable buffers (e.g. BN stats).

    Every trainable parameter has a same-shaped gradient slot; slots are
    zeroed between optimizer steps by the training loop.
    """

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value, dtype=np.float64)
        return self.buffers[name]

    def names(self) -> list[str]:
        return list(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(t.data) for name, t in self.params.items()}

    def snapshot(self) -> dict[str, np.ndarray]:
        out = {name: t.data.copy() for name, t in self.params.items()}
        out.update({name: b.copy() for name, b in self.buffers.items()})
        return out

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            t.data = snap[name].copy()
        for name, buf in self.buffers.items():
            buf[...] = snap[name]  # in place: callers may hold aliases (BN states)

    def num_scalars(self) -> int:
        return sum(t.data.size for t in self.params.values())


def backward(loss: Tensor, tape: Tape, params: ParamStore) -> dict[str, np.ndarray]:
    """Reverse-sweep the tape from a scalar loss.

    Returns one gradient per trainable parameter; parameters unreachable from
    the loss get an exact zero array.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward", "loss must be scalar", (loss.data.shape,))
    if not tape.records:
        raise ValueError("backward on an empty tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output.id, None)
        if g is None:
            continue
        input_grads = OPS[rec.kind].backward(rec.ctx, g)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            slot = grads.get(t.id)
            if slot is None:
                grads[t.id] = gi if gi.shape == t.data.shape else gi.reshape(t.data.shape)
            else:
                grads[t.id] = slot + gi
    return {name: grads.get(t.id, np.zeros_like(t.data))
            for name, t in params.params.items()}


def finite_diff_grad(f: Callable[[ParamStore], float], params: ParamStore,
                     eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient estimate, one scalar parameter at a time.

    ``f`` must be deterministic (dropout off / fixed masks, batch norm in eval
    mode) because it is evaluated 2 * num_scalars times.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    table = {}
    for name, t in params.params.items():
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(params)
            flat[i] = orig - eps
            lo = f(params)
            flat[i] = orig
            g[i] = (hi - lo) / (2.0 * eps)
        table[name] = g.reshape(t.data.shape)
    return table


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)

"""Tape-based reverse-mode autodiff over dense float64 arrays.

Every value lives on a tape as a node recording the op that produced it.
``backward`` walks the tape in reverse and accumulates cotangents.
``jvp`` replays a recorded computation forward with a tangent, emitting the
tangent arithmetic as ordinary tape ops, so a Jacobian assembled from JVP
probes is itself differentiable by ``backward`` (one extra derivative order,
which is all the Jacobian-matching losses need).
"""

from __future__ import annotations

import numpy as np


class AdGraphError(Exception):
    pass


class ShapeError(AdGraphError):
    pass


class NonFiniteError(AdGraphError):
    pass


class MissingTangentRule(AdGraphError):
    pass


class Node:
    __slots__ = ("op", "inputs", "params", "value")

    def __init__(self, op, inputs, params, value):
        self.op = op
        self.inputs = inputs
        self.params = params
        self.value = value

    def __repr__(self):
        return f"Node({self.op}, inputs={self.inputs}, shape={self.value.shape})"


class Value:
    """Handle into a tape node. Immutable once recorded."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape, nid):
        self.tape = tape
        self.nid = nid

    @property
    def data(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Value(nid={self.nid}, shape={self.shape})"

    def __add__(self, other):
        return record(self.tape, "add", [self, other])

    def __sub__(self, other):
        return record(self.tape, "sub", [self, other])

    def __mul__(self, other):
        return record(self.tape, "mul", [self, other])

    def __matmul__(self, other):
        return record(self.tape, "matmul", [self, other])

    def __neg__(self):
        return record(self.tape, "scale", [self], c=-1.0)


class Tape:
    """Append-only op record; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._aux_cache: dict = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, params, value) -> Value:
        self.nodes.append(Node(op, inputs, params, value))
        return Value(self, len(self.nodes) - 1)

    def leaf(self, data) -> Value:
        """Register an input/parameter/constant array as a leaf node."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("non-finite leaf value")
        return self._append("leaf", (), None, arr)

    def value_of(self, nid: int) -> Value:
        return Value(self, nid)


# ---------------------------------------------------------------------------
# forward rules


def _both_2d(a, b):
    return a.ndim == 2 and b.ndim == 2


def _fw_add(xs, p):
    x, y = xs
    if x.shape != y.shape:
        raise ShapeError(f"add: {x.shape} vs {y.shape}")
    return x + y


def _fw_sub(xs, p):
    x, y = xs
    if x.shape != y.shape:
        raise ShapeError(f"sub: {x.shape} vs {y.shape}")
    return x - y


def _fw_mul(xs, p):
    x, y = xs
    if x.shape != y.shape:
        raise ShapeError(f"mul: {x.shape} vs {y.shape}")
    return x * y


def _fw_matmul(xs, p):
    x, y = xs
    if x.ndim not in (1, 2) or y.ndim not in (1, 2):
        raise ShapeError(f"matmul: ranks {x.ndim} and {y.ndim} unsupported")
    if x.shape[-1] != y.shape[0]:
        raise ShapeError(f"matmul: {x.shape} @ {y.shape}")
    return x @ y


def _fw_tanh(xs, p):
    return np.tanh(xs[0])


def _fw_sum(xs, p):
    return np.asarray(np.sum(xs[0]))


def _fw_mean(xs, p):
    return np.asarray(np.mean(xs[0]))


def _fw_square(xs, p):
    return np.square(xs[0])


def _fw_concat(xs, p):
    base = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != base:
            raise ShapeError(f"concat: leading dims differ {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=-1)


def _fw_slice(xs, p):
    x = xs[0]
    start, stop = p["start"], p["stop"]
    if not (0 <= start < stop <= x.shape[-1]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for {x.shape}")
    return np.ascontiguousarray(x[..., start:stop])


def _fw_scale(xs, p):
    return xs[0] * p["c"]


def _fw_broadcast(xs, p):
    x = xs[0]
    return np.broadcast_to(x, (p["n"],) + x.shape).copy()


def _fw_l2norm(xs, p):
    x = xs[0]
    if p.get("batched"):
        if x.ndim < 2:
            raise ShapeError(f"batched l2norm needs rank>=2, got {x.shape}")
        return np.sqrt(np.sum(np.square(x.reshape(x.shape[0], -1)), axis=1))
    return np.asarray(np.sqrt(np.sum(np.square(x))))


def _fw_exp(xs, p):
    return np.exp(xs[0])


def _fw_softplus(xs, p):
    return np.logaddexp(0.0, xs[0])


def _fw_softmax(xs, p):
    x = xs[0]
    z = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _fw_reshape(xs, p):
    x = xs[0]
    shape = tuple(p["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape {x.shape} -> {shape}")
    return x.reshape(shape)


def _fw_sin(xs, p):
    return np.sin(xs[0])


def _fw_cos(xs, p):
    return np.cos(xs[0])


# ---------------------------------------------------------------------------
# backward (VJP) rules: given cotangent g of the output, return per-input
# cotangents as plain arrays.


def _bw_add(xs, out, p, g):
    return [g, g]


def _bw_sub(xs, out, p, g):
    return [g, -g]


def _bw_mul(xs, out, p, g):
    x, y = xs
    return [g * y, g * x]


def _bw_matmul(xs, out, p, g):
    x, y = xs
    if _both_2d(x, y):
        return [g @ y.T, x.T @ g]
    if x.ndim == 2 and y.ndim == 1:
        return [np.outer(g, y), x.T @ g]
    if x.ndim == 1 and y.ndim == 2:
        return [y @ g, np.outer(x, g)]
    raise ShapeError("matmul vjp: unsupported ranks")


def _bw_tanh(xs, out, p, g):
    return [g * (1.0 - out * out)]


def _bw_sum(xs, out, p, g):
    return [np.broadcast_to(g, xs[0].shape).copy()]


def _bw_mean(xs, out, p, g):
    x = xs[0]
    return [np.broadcast_to(g / x.size, x.shape).copy()]


def _bw_square(xs, out, p, g):
    return [2.0 * xs[0] * g]


def _bw_concat(xs, out, p, g):
    outs = []
    ofs = 0
    for x in xs:
        w = x.shape[-1]
        outs.append(np.ascontiguousarray(g[..., ofs:ofs + w]))
        ofs += w
    return outs


def _bw_slice(xs, out, p, g):
    gx = np.zeros_like(xs[0])
    gx[..., p["start"]:p["stop"]] = g
    return [gx]


def _bw_scale(xs, out, p, g):
    return [g * p["c"]]


def _bw_broadcast(xs, out, p, g):
    return [np.sum(g, axis=0)]


def _bw_l2norm(xs, out, p, g):
    x = xs[0]
    if p.get("batched"):
        safe = np.where(out > 0.0, out, 1.0)
        coef = np.where(out > 0.0, g / safe, 0.0)
        return [coef.reshape((x.shape[0],) + (1,) * (x.ndim - 1)) * x]
    if out == 0.0:
        return [np.zeros_like(x)]
    return [(g / out) * x]


def _bw_exp(xs, out, p, g):
    return [g * out]


def _bw_softplus(xs, out, p, g):
    return [g * _sigmoid_np(xs[0])]


def _bw_softmax(xs, out, p, g):
    dot = np.sum(g * out, axis=-1, keepdims=True)
    return [out * (g - dot)]


def _bw_reshape(xs, out, p, g):
    return [g.reshape(xs[0].shape)]


def _bw_sin(xs, out, p, g):
    return [g * np.cos(xs[0])]


def _bw_cos(xs, out, p, g):
    return [-g * np.sin(xs[0])]


def _sigmoid_np(x):
    # matches the tanh-based tangent rule bit-for-bit
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


# ---------------------------------------------------------------------------
# tangent (JVP) rules: build the directional derivative of the node output
# from the input tangents, recording ordinary ops on the same tape. ``None``
# tangents mean identically zero. Rules may stash probe-independent
# auxiliaries in the tape-level cache keyed by node id.


def _aux(tape, nid, key, builder):
    k = (nid, key)
    got = tape._aux_cache.get(k)
    if got is None:
        got = builder()
        tape._aux_cache[k] = got
    return got


def _tg_add(tape, node, ins, ts, out):
    dx, dy = ts
    if dx is None:
        return dy
    if dy is None:
        return dx
    return dx + dy


def _tg_sub(tape, node, ins, ts, out):
    dx, dy = ts
    if dx is None:
        return -dy
    if dy is None:
        return dx
    return dx - dy


def _tg_mul(tape, node, ins, ts, out):
    x, y = ins
    dx, dy = ts
    parts = []
    if dx is not None:
        parts.append(dx * y)
    if dy is not None:
        parts.append(x * dy)
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _tg_matmul(tape, node, ins, ts, out):
    x, y = ins
    dx, dy = ts
    parts = []
    if dx is not None:
        parts.append(dx @ y)
    if dy is not None:
        parts.append(x @ dy)
    return parts[0] if len(parts) == 1 else parts[0] + parts[1]


def _tg_tanh(tape, node, ins, ts, out):
    sech2 = _aux(tape, out.nid, "sech2",
                 lambda: tape.leaf(np.ones(out.shape)) - square(out))
    return ts[0] * sech2


def _tg_sum(tape, node, ins, ts, out):
    return reduce_sum(ts[0])


def _tg_mean(tape, node, ins, ts, out):
    return reduce_mean(ts[0])


def _tg_square(tape, node, ins, ts, out):
    two_x = _aux(tape, out.nid, "2x", lambda: scale(ins[0], 2.0))
    return ts[0] * two_x


def _tg_concat(tape, node, ins, ts, out):
    parts = []
    for v, t in zip(ins, ts):
        parts.append(t if t is not None else tape.leaf(np.zeros(v.shape)))
    return concat(parts)


def _tg_slice(tape, node, ins, ts, out):
    return take_slice(ts[0], node.params["start"], node.params["stop"])


def _tg_scale(tape, node, ins, ts, out):
    return scale(ts[0], node.params["c"])


def _tg_broadcast(tape, node, ins, ts, out):
    return broadcast_rows(ts[0], node.params["n"])


def _tg_exp(tape, node, ins, ts, out):
    return ts[0] * out


def _tg_softplus(tape, node, ins, ts, out):
    def build():
        half = tape.leaf(np.full(ins[0].shape, 0.5))
        return (tanh(scale(ins[0], 0.5)) + tape.leaf(np.ones(ins[0].shape))) * half
    sig = _aux(tape, out.nid, "sigmoid", build)
    return ts[0] * sig


def _tg_reshape(tape, node, ins, ts, out):
    return reshape(ts[0], node.params["shape"])


def _tg_sin(tape, node, ins, ts, out):
    cos_x = _aux(tape, out.nid, "cos", lambda: cos(ins[0]))
    return ts[0] * cos_x


def _tg_cos(tape, node, ins, ts, out):
    msin = _aux(tape, out.nid, "msin", lambda: -sin(ins[0]))
    return ts[0] * msin


_OPS = {
    "add": (_fw_add, _bw_add, _tg_add),
    "sub": (_fw_sub, _bw_sub, _tg_sub),
    "mul": (_fw_mul, _bw_mul, _tg_mul),
    "matmul": (_fw_matmul, _bw_matmul, _tg_matmul),
    "tanh": (_fw_tanh, _bw_tanh, _tg_tanh),
    "sum": (_fw_sum, _bw_sum, _tg_sum),
    "mean": (_fw_mean, _bw_mean, _tg_mean),
    "square": (_fw_square, _bw_square, _tg_square),
    "concat": (_fw_concat, _bw_concat, _tg_concat),
    "slice": (_fw_slice, _bw_slice, _tg_slice),
    "scale": (_fw_scale, _bw_scale, _tg_scale),
    "broadcast": (_fw_broadcast, _bw_broadcast, _tg_broadcast),
    "l2norm": (_fw_l2norm, _bw_l2norm, None),
    "exp": (_fw_exp, _bw_exp, _tg_exp),
    "softplus": (_fw_softplus, _bw_softplus, _tg_softplus),
    "softmax": (_fw_softmax, _bw_softmax, None),
    "reshape": (_fw_reshape, _bw_reshape, _tg_reshape),
    "sin": (_fw_sin, _bw_sin, _tg_sin),
    "cos": (_fw_cos, _bw_cos, _tg_cos),
}


def record(tape: Tape, op: str, inputs, **params) -> Value:
    """Run one primitive forward and append it to the tape."""
    if op not in _OPS:
        raise AdGraphError(f"unknown op kind '{op}'")
    vals = []
    for v in inputs:
        if not isinstance(v, Value):
            raise AdGraphError(f"{op}: inputs must be Values, got {type(v)}")
        if v.tape is not tape:
            raise AdGraphError(f"{op}: input from a different tape")
        vals.append(v)
    arrays = [v.data for v in vals]
    out = _OPS[op][0](arrays, params)
    out = np.asarray(out, dtype=np.float64)
    # a single reduction: any NaN/Inf element makes the sum non-finite
    if not np.isfinite(np.sum(out)):
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite output of op '{op}'")
    return tape._append(op, tuple(v.nid for v in vals), params or None, out)


# convenience wrappers

def tanh(x: Value) -> Value:
    return record(x.tape, "tanh", [x])


def reduce_sum(x: Value) -> Value:
    return record(x.tape, "sum", [x])


def reduce_mean(x: Value) -> Value:
    return record(x.tape, "mean", [x])


def square(x: Value) -> Value:
    return record(x.tape, "square", [x])


def concat(xs) -> Value:
    return record(xs[0].tape, "concat", list(xs))


def take_slice(x: Value, start: int, stop: int) -> Value:
    return record(x.tape, "slice", [x], start=start, stop=stop)


def scale(x: Value, c: float) -> Value:
    return record(x.tape, "scale", [x], c=float(c))


def broadcast_rows(x: Value, n: int) -> Value:
    return record(x.tape, "broadcast", [x], n=int(n))


def l2_norm(x: Value, batched: bool = False) -> Value:
    return record(x.tape, "l2norm", [x], batched=batched)


def exp(x: Value) -> Value:
    return record(x.tape, "exp", [x])


def softplus(x: Value) -> Value:
    return record(x.tape, "softplus", [x])


def softmax(x: Value) -> Value:
    return record(x.tape, "softmax", [x])


def reshape(x: Value, shape) -> Value:
    return record(x.tape, "reshape", [x], shape=tuple(int(s) for s in shape))


def sin(x: Value) -> Value:
    return record(x.tape, "sin", [x])


def cos(x: Value) -> Value:
    return record(x.tape, "cos", [x])


def rowsum(x: Value) -> Value:
    """Sum along the last axis via matmul with a ones vector."""
    ones = x.tape.leaf(np.ones(x.shape[-1]))
    return x @ ones


# ---------------------------------------------------------------------------
# backward


class GradMap:
    """node-id -> cotangent array; missing entries mean zero."""

    def __init__(self, tape: Tape, cot: dict):
        self._tape = tape
        self._cot = cot

    def get(self, v: Value) -> np.ndarray:
        g = self._cot.get(v.nid)
        if g is None:
            return np.zeros(v.shape)
        return g

    def __contains__(self, v: Value) -> bool:
        return v.nid in self._cot

    def by_id(self) -> dict:
        return self._cot


def backward(tape: Tape, root: Value) -> GradMap:
    """Reverse accumulation of d(root)/d(node) for every node feeding root."""
    if root.tape is not tape:
        raise AdGraphError("backward: root not on this tape")
    if root.size != 1:
        raise AdGraphError(f"backward: root must be scalar-shaped, got {root.shape}")
    nodes = tape.nodes
    cot: dict = {root.nid: np.ones(nodes[root.nid].value.shape)}
    for nid in range(root.nid, -1, -1):
        g = cot.get(nid)
        if g is None:
            continue
        node = nodes[nid]
        if node.op == "leaf":
            continue
        ins = [nodes[i].value for i in node.inputs]
        gs = _OPS[node.op][1](ins, node.value, node.params or {}, g)
        for i, gi in zip(node.inputs, gs):
            if gi is None:
                continue
            acc = cot.get(i)
            cot[i] = gi if acc is None else acc + gi
        if nid != root.nid:
            del cot[nid]
        # keep leaf cotangents; interior ones are no longer needed
    return GradMap(tape, cot)


# ---------------------------------------------------------------------------
# forward-mode on the tape


def _jvp_sweep(tape: Tape, output: Value, tangent_map: dict) -> Value:
    nodes = tape.nodes
    stop = output.nid
    for nid in range(stop + 1):
        node = nodes[nid]
        if node.op == "leaf" or nid in tangent_map:
            continue
        ts = [tangent_map.get(i) for i in node.inputs]
        if all(t is None for t in ts):
            continue
        rule = _OPS[node.op][2]
        if rule is None:
            raise MissingTangentRule(f"op '{node.op}' has no tangent rule")
        ins = [Value(tape, i) for i in node.inputs]
        tangent_map[nid] = rule(tape, node, ins, ts, Value(tape, nid))
    t = tangent_map.get(stop)
    if t is None:
        t = tape.leaf(np.zeros(output.shape))
    return t


def jvp(tape: Tape, output: Value, inputs, tangent) -> Value:
    """(d output / d inputs) . tangent, recorded on the tape.

    ``tangent`` is one flat vector laid out like the concatenation of the
    inputs; it may be an ndarray or an on-tape Value.
    """
    total = sum(v.size for v in inputs)
    if isinstance(tangent, Value):
        tv = tangent
    else:
        tv = tape.leaf(tangent)
    if tv.size != total:
        raise ShapeError(f"tangent size {tv.size} != total input size {total}")
    tmap = {}
    ofs = 0
    flat = tv if tv.shape == (total,) else reshape(tv, (total,))
    for v in inputs:
        part = take_slice(flat, ofs, ofs + v.size)
        if part.shape != v.shape:
            part = reshape(part, v.shape)
        tmap[v.nid] = part
        ofs += v.size
    return _jvp_sweep(tape, output, tmap)


def jvp_parts(tape: Tape, output: Value, inputs, tangents) -> Value:
    """Like jvp but with one tangent per input, shapes matching the inputs."""
    tmap = {}
    for v, t in zip(inputs, tangents):
        if t is None:
            continue
        tv = t if isinstance(t, Value) else tape.leaf(t)
        if tv.shape != v.shape:
            raise ShapeError(f"tangent shape {tv.shape} != input shape {v.shape}")
        tmap[v.nid] = tv
    return _jvp_sweep(tape, output, tmap)


def jacobian(tape: Tape, output: Value, inputs) -> Value:
    """n x d Jacobian of a vector output w.r.t. 1-D inputs, on the tape."""
    for v in inputs:
        if len(v.shape) != 1:
            raise ShapeError(f"jacobian inputs must be 1-D, got {v.shape}")
    if len(output.shape) != 1:
        raise ShapeError(f"jacobian output must be 1-D, got {output.shape}")
    d = sum(v.size for v in inputs)
    n = output.size
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        col = jvp(tape, output, inputs, e)
        cols.append(reshape(col, (n, 1)))
    return concat(cols)


def batched_jacobian(tape: Tape, output: Value, inputs) -> Value:
    """Per-sample Jacobians of a batched map, shape (B, n, d_total).

    ``output`` is (B, n) and each input is (B, d_i) with rows independent
    (true for row-wise programs: dense layers, elementwise ops, concat).
    One JVP sweep per input coordinate covers the whole batch.
    """
    if len(output.shape) != 2:
        raise ShapeError(f"batched_jacobian output must be 2-D, got {output.shape}")
    bsz, n = output.shape
    for v in inputs:
        if len(v.shape) != 2 or v.shape[0] != bsz:
            raise ShapeError(f"batched_jacobian input shape {v.shape} vs batch {bsz}")
    cols = []
    for i, v in enumerate(inputs):
        for j in range(v.shape[1]):
            tangents = [None] * len(inputs)
            e = np.zeros((bsz, v.shape[1]))
            e[:, j] = 1.0
            tangents[i] = e
            col = jvp_parts(tape, output, inputs, tangents)
            cols.append(reshape(col, (bsz, n, 1)))
    return concat(cols)

"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops in float64 and counts each
scalar multiplication as it happens, so it shares no code with the kernels
under test.
"""

from __future__ import annotations

import numpy as np

from evnet.graph import LayerSpec, build_graph


class Counter:
    def __init__(self):
        self.mults = 0

    def mul(self, a, b):
        self.mults += 1
        return a * b


def conv2d_loops(x, w, b=None, stride=1, pad=0, counter=None):
    counter = counter or Counter()
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, ho, wo))
    for co in range(cout):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0 if b is None else float(b[co])
                for ci in range(cin):
                    for ky in range(kh):
                        for kx in range(kw):
                            iy, ix = oy * stride + ky - pad, ox * stride + kx - pad
                            if 0 <= iy < h and 0 <= ix < wd:
                                v = float(x[ci, iy, ix])
                            else:
                                v = 0.0
                            acc += counter.mul(float(w[co, ci, ky, kx]), v)
                out[co, oy, ox] = acc
    return out, counter.mults


def pool_loops(x, k, stride, op):
    cin, h, wd = x.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((cin, ho, wo))
    for c in range(cin):
        for oy in range(ho):
            for ox in range(wo):
                vals = [float(x[c, oy * stride + i, ox * stride + j]) for i in range(k) for j in range(k)]
                out[c, oy, ox] = op(vals)
    return out


def delta_macs_loops(layer: LayerSpec, in_shape, delta: np.ndarray) -> int:
    """Scalar products an entry-by-entry delta application performs.

    Walks every nonzero input entry and every output it could influence,
    counting one multiplication per (entry, output) pair reached.
    """
    count = 0
    flat = delta.reshape(-1)
    nz = [i for i in range(flat.size) if flat[i] != 0]
    if layer.kind == "fully_connected":
        return len(nz) * layer.weights["weight"].shape[0]
    if layer.kind == "affine":
        return len(nz)
    if layer.kind in ("add", "concat"):
        return 0
    if layer.kind == "conv2d":
        w = layer.weights["weight"]
        cout, _, kh, kw = w.shape
        stride, pad = int(layer.params.get("stride", 1)), int(layer.params.get("padding", 0))
    else:
        win = layer.params["window"]
        kh = kw = win if isinstance(win, int) else win[0]
        stride = layer.params.get("stride", kh)
        stride = stride if isinstance(stride, int) else stride[0]
        pad, cout = 0, 1
    _, h, wd = in_shape
    ho, wo = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    for i in nz:
        _, y, x = np.unravel_index(i, in_shape)
        for oy in range(ho):
            for ox in range(wo):
                ky, kx = y + pad - oy * stride, x + pad - ox * stride
                if 0 <= ky < kh and 0 <= kx < kw:
                    count += cout
    return count


# -- layer and graph builders --------------------------------------------------

def f32(a):
    return np.asarray(a, dtype=np.float32)


def conv_layer(rng, cin, cout, k, stride=1, pad=0, lid="conv", inputs=("x",), bias=True):
    w = {"weight": f32(rng.standard_normal((cout, cin, k, k)))}
    if bias:
        w["bias"] = f32(rng.standard_normal(cout))
    return LayerSpec(lid, "conv2d", tuple(inputs), {"stride": stride, "padding": pad}, w)


def fc_layer(rng, n_in, n_out, lid="fc", inputs=("x",)):
    return LayerSpec(lid, "fully_connected", tuple(inputs), {},
                     {"weight": f32(rng.standard_normal((n_out, n_in))), "bias": f32(rng.standard_normal(n_out))})


def affine_layer(rng, c, lid="aff", inputs=("x",)):
    return LayerSpec(lid, "affine", tuple(inputs), {},
                     {"scale": f32(rng.uniform(0.5, 2.0, c)), "shift": f32(rng.standard_normal(c))})


def chain(input_shape, *layers):
    """Build a graph input -> layers in order -> output, rewiring each layer's input."""
    specs = [LayerSpec("input", "input", (), {"shape": list(input_shape)})]
    prev = "input"
    for layer in layers:
        specs.append(LayerSpec(layer.id, layer.kind, (prev,), layer.params, layer.weights))
        prev = layer.id
    specs.append(LayerSpec("output", "output", (prev,)))
    return build_graph(specs)


def sparse_delta(rng, shape, density=0.3):
    d = rng.standard_normal(shape) * (rng.random(shape) < density)
    return f32(d)


def random_linear_triple(rng, kind):
    """A random LINEAR layer with input values and a sparse input change.

    Returns ``(layer, in_shapes, xs, deltas)`` with one entry per input.
    """
    c = int(rng.integers(1, 4))
    h, w = int(rng.integers(3, 8)), int(rng.integers(3, 8))
    shape = (c, h, w)
    if kind == "conv2d":
        k = int(rng.integers(1, min(h, w, 3) + 1))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k))
        layer = conv_layer(rng, c, int(rng.integers(1, 5)), k, stride, pad)
        shapes = [shape]
    elif kind == "fully_connected":
        layer = fc_layer(rng, c * h * w, int(rng.integers(1, 9)))
        shapes = [shape]
    elif kind == "avg_pool":
        k = int(rng.integers(1, min(h, w) + 1))
        layer = LayerSpec("pool", "avg_pool", ("x",), {"window": k, "stride": int(rng.integers(1, k + 3))})
        shapes = [shape]
    elif kind == "affine":
        layer = affine_layer(rng, c)
        shapes = [shape]
    elif kind == "add":
        n = int(rng.integers(2, 4))
        layer = LayerSpec("add", "add", tuple(f"x{i}" for i in range(n)))
        shapes = [shape] * n
    elif kind == "concat":
        n = int(rng.integers(2, 4))
        axis = int(rng.integers(0, 3))
        shapes = []
        for _ in range(n):
            s = list(shape)
            s[axis] = int(rng.integers(1, 4))
            shapes.append(tuple(s))
        layer = LayerSpec("cat", "concat", tuple(f"x{i}" for i in range(n)), {"axis": axis})
    else:
        raise ValueError(kind)
    xs = [f32(rng.standard_normal(s)) for s in shapes]
    deltas = [sparse_delta(rng, s, float(rng.uniform(0.05, 0.6))) for s in shapes]
    return layer, shapes, xs, deltas


LINEAR_KIND_LIST = ("conv2d", "fully_connected", "avg_pool", "affine", "add", "concat")


def random_dag(rng, steps=None, allow_exclude=True):
    """A random small valid DAG over (C, H, W) tensors ending in fully connected heads.

    Every intermediate node is consumed; dangling branches each get their
    own head and the heads are summed.
    """
    c, h, w = int(rng.integers(1, 3)), int(rng.integers(4, 7)), int(rng.integers(4, 7))
    specs = [LayerSpec("input", "input", (), {"shape": [c, h, w]})]
    shapes = {"input": (c, h, w)}
    open_ids = ["input"]
    steps = int(rng.integers(2, 7)) if steps is None else steps
    for n in range(steps):
        lid = f"n{n}"
        src = open_ids[int(rng.integers(len(open_ids)))] if rng.random() < 0.7 else \
            list(shapes)[int(rng.integers(len(shapes)))]
        cs, hs, ws = shapes[src]
        kind = rng.choice(["conv2d", "relu", "affine", "avg_pool", "max_pool", "add", "concat"])
        params: dict = {}
        weights: dict = {}
        inputs = [src]
        if kind == "conv2d":
            cout = int(rng.integers(1, 4))
            weights = {"weight": f32(rng.standard_normal((cout, cs, 3, 3)) * 0.5), "bias": f32(rng.standard_normal(cout))}
            params = {"padding": 1}
            shape = (cout, hs, ws)
        elif kind in ("avg_pool", "max_pool"):
            if min(hs, ws) < 2:
                kind, shape = "relu", (cs, hs, ws)
            else:
                params = {"window": 2, "stride": 1}
                shape = (cs, hs - 1, ws - 1)
        elif kind == "affine":
            weights = {"scale": f32(rng.uniform(0.5, 2.0, cs)), "shift": f32(rng.standard_normal(cs))}
            shape = (cs, hs, ws)
        elif kind in ("add", "concat"):
            same = [k for k, s in shapes.items() if k != src and
                    (s == (cs, hs, ws) if kind == "add" else s[1:] == (hs, ws))]
            if not same:
                kind, shape = "relu", (cs, hs, ws)
            else:
                other = same[int(rng.integers(len(same)))]
                inputs.append(other)
                params = {"axis": 0} if kind == "concat" else {}
                shape = (cs + shapes[other][0], hs, ws) if kind == "concat" else (cs, hs, ws)
        else:
            shape = (cs, hs, ws)
        if allow_exclude and kind in ("relu", "conv2d") and rng.random() < 0.1:
            params["exclude"] = True
        specs.append(LayerSpec(lid, str(kind), tuple(inputs), params, weights))
        shapes[lid] = shape
        for i in inputs:
            if i in open_ids:
                open_ids.remove(i)
        open_ids.append(lid)
    heads = []
    for i, src in enumerate(open_ids):
        n_in = int(np.prod(shapes[src]))
        heads.append(f"head{i}")
        specs.append(LayerSpec(f"head{i}", "fully_connected", (src,), {},
                               {"weight": f32(rng.standard_normal((3, n_in)) / np.sqrt(n_in))}))
    last = heads[0]
    if len(heads) > 1:
        specs.append(LayerSpec("sum", "add", tuple(heads)))
        last = "sum"
    specs.append(LayerSpec("output", "output", (last,)))
    return build_graph(specs)

"""Per-layer kernels in dense (conventional) and event (sparse delta) form.

Every kernel returns the exact number of scalar multiply-accumulates it
performed. Layers are executed single-threaded; the engine guarantees one
writer per state region (see :class:`evnet.convert.EventState`).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ClassificationError, SchemaError, ShapeError
from .graph import LayerSpec, _window
from .tensor import DTYPE, INDEX_DTYPE, DeltaPacket


def _pool_geometry(layer: LayerSpec) -> tuple[int, int, int, int]:
    kh, kw = _window(layer.params)
    sh, sw = _window(layer.params, "stride") if "stride" in layer.params else (kh, kw)
    return kh, kw, sh, sw


def _conv_geometry(layer: LayerSpec) -> tuple[int, int]:
    return int(layer.params.get("stride", 1)), int(layer.params.get("padding", 0))


def conv2d_dense(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    kh, kw = weight.shape[2:]
    # (C, Ho', Wo', kh, kw) then subsample by stride
    patches = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(weight, patches, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias[:, None, None]
    return out.astype(DTYPE, copy=False)


def _pool_windows(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    kh, kw, sh, sw = _pool_geometry(layer)
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]


def dense_forward(layer: LayerSpec, inputs: Sequence[np.ndarray]) -> tuple[np.ndarray, int]:
    """Conventional evaluation of one layer, bias included.

    Returns the output and its MAC count. Nonlinear layers, ``add`` and
    ``concat`` perform no multiplications and report 0; their comparison
    and addition work is tallied by :func:`dense_nonlinear_ops`.
    """
    kind, w = layer.kind, layer.weights
    if kind in ("input", "output"):
        return np.asarray(inputs[0], dtype=DTYPE), 0
    if kind == "conv2d":
        x = inputs[0]
        weight = w["weight"]
        if x.ndim != 3 or x.shape[0] != weight.shape[1]:
            raise ShapeError(f"conv2d {layer.id!r}: input {x.shape} vs weight {weight.shape}")
        stride, pad = _conv_geometry(layer)
        out = conv2d_dense(x, weight, w.get("bias"), stride, pad)
        return out, out.size * int(np.prod(weight.shape[1:]))
    if kind == "fully_connected":
        weight = w["weight"]
        flat = np.asarray(inputs[0], dtype=DTYPE).reshape(-1)
        if flat.size != weight.shape[1]:
            raise ShapeError(f"fully_connected {layer.id!r}: {flat.size} inputs vs weight {weight.shape}")
        out = weight @ flat
        if "bias" in w:
            out = out + w["bias"]
        return out.astype(DTYPE, copy=False), int(weight.size)
    if kind == "avg_pool":
        kh, kw, _, _ = _pool_geometry(layer)
        win = _pool_windows(inputs[0], layer)
        out = (win.sum(axis=(3, 4), dtype=DTYPE) * DTYPE(1.0 / (kh * kw))).astype(DTYPE)
        return out, out.size * kh * kw
    if kind == "affine":
        x = inputs[0]
        if x.shape[0] != w["scale"].shape[0]:
            raise ShapeError(f"affine {layer.id!r}: {x.shape[0]} channels vs {w['scale'].shape[0]}")
        bshape = (-1,) + (1,) * (x.ndim - 1)
        out = x * w["scale"].reshape(bshape)
        if "shift" in w:
            out = out + w["shift"].reshape(bshape)
        return out.astype(DTYPE, copy=False), x.size
    if kind == "add":
        if any(i.shape != inputs[0].shape for i in inputs):
            raise ShapeError(f"add {layer.id!r}: input shapes differ")
        out = inputs[0].astype(DTYPE, copy=True)
        for extra in inputs[1:]:
            out += extra
        return out, 0
    if kind == "concat":
        return np.concatenate(inputs, axis=int(layer.params.get("axis", 0))).astype(DTYPE), 0
    if kind == "relu":
        return np.maximum(inputs[0], DTYPE(0)).astype(DTYPE, copy=False), 0
    if kind == "max_pool":
        return _pool_windows(inputs[0], layer).max(axis=(3, 4)).astype(DTYPE), 0
    raise SchemaError(f"unknown layer kind {kind!r}")


def dense_nonlinear_ops(layer: LayerSpec, out_shape: Sequence[int], n_inputs: int = 1) -> int:
    """Non-MAC work of a dense pass: relu evaluations, pool comparisons, tensor adds."""
    n_out = int(np.prod(out_shape))
    if layer.kind == "relu":
        return n_out
    if layer.kind == "max_pool":
        kh, kw, _, _ = _pool_geometry(layer)
        return n_out * kh * kw
    if layer.kind == "add":
        return n_out * (n_inputs - 1)
    return 0


# -- event mode ---------------------------------------------------------------

def _fan_counts(extent_in: int, extent_out: int, k: int, stride: int, pad: int) -> np.ndarray:
    """For each input coordinate, how many (offset, output) pairs it reaches."""
    counts = np.zeros(extent_in, dtype=INDEX_DTYPE)
    pos = np.arange(extent_in)
    for off in range(k):
        t = pos + pad - off
        counts += (t % stride == 0) & (t >= 0) & (t // stride < extent_out)
    return counts


def _scatter_window(layer_id, idx, vals, in_shape, out_shape, kh, kw, stride, pad, weight_fn):
    """Scatter each input entry to every output position whose window covers it.

    ``weight_fn(c, ky, kx)`` yields an array (n_out_channels_hit, n) of
    weights and the matching output channel indices.
    """
    c, y, x = np.unravel_index(idx, in_shape)
    _, ho, wo = out_shape
    out_idx, out_val = [], []
    macs = 0
    for ky in range(kh):
        ty = y + pad - ky
        ok_y = (ty % stride == 0) & (ty >= 0) & (ty // stride < ho)
        for kx in range(kw):
            tx = x + pad - kx
            ok = ok_y & (tx % stride == 0) & (tx >= 0) & (tx // stride < wo)
            if not ok.any():
                continue
            sel = np.flatnonzero(ok)
            oy, ox = ty[sel] // stride, tx[sel] // stride
            w, oc = weight_fn(c[sel], ky, kx)  # w: (n_oc, n_sel), oc: (n_oc, n_sel)
            prod = w * vals[sel]
            macs += prod.size
            out_idx.append(((oc * ho + oy) * wo + ox).reshape(-1))
            out_val.append(prod.reshape(-1))
    size = int(np.prod(out_shape))
    if not out_idx:
        return DeltaPacket.empty(layer_id, size=size), 0
    return DeltaPacket.from_unsorted(layer_id, np.concatenate(out_idx),
                                     np.concatenate(out_val), size=size), macs


def delta_forward_linear(layer: LayerSpec, din: DeltaPacket | Sequence[DeltaPacket],
                         in_shapes: Sequence[int] | Sequence[Sequence[int]]) -> tuple[DeltaPacket, int]:
    """Image of a sparse input delta under the homogeneous (bias-free) part of ``layer``.

    ``in_shapes`` is the input shape, or one shape per input for ``add`` and
    ``concat``. The MAC count equals the number of scalar products formed.
    """
    if not layer.linear:
        raise ClassificationError(f"layer {layer.id!r} ({layer.kind}) is not linear")
    dins = [din] if isinstance(din, DeltaPacket) else list(din)
    if in_shapes and isinstance(in_shapes[0], (int, np.integer)):
        in_shapes = [tuple(in_shapes)]
    in_shapes = [tuple(s) for s in in_shapes]
    if len(dins) != len(in_shapes):
        raise ShapeError(f"{layer.id!r}: {len(dins)} packets for {len(in_shapes)} inputs")
    for packet, shape in zip(dins, in_shapes):
        if len(packet) and packet.indices[-1] >= int(np.prod(shape)):
            raise ShapeError(f"{layer.id!r}: packet index out of range for input {shape}")

    kind, w = layer.kind, layer.weights
    first = dins[0]
    if kind == "conv2d":
        weight = w["weight"]
        stride, pad = _conv_geometry(layer)
        shape = in_shapes[0]
        cout, _, kh, kw = weight.shape
        ho = (shape[1] + 2 * pad - kh) // stride + 1
        wo = (shape[2] + 2 * pad - kw) // stride + 1
        oc_col = np.arange(cout)[:, None]

        def conv_weights(c, ky, kx):
            return weight[:, c, ky, kx], np.broadcast_to(oc_col, (cout, c.size))

        return _scatter_window(layer.id, first.indices, first.values, shape, (cout, ho, wo),
                               kh, kw, stride, pad, conv_weights)
    if kind == "avg_pool":
        kh, kw, sh, sw = _pool_geometry(layer)
        if sh != sw:
            raise ShapeError(f"avg_pool {layer.id!r}: anisotropic stride unsupported in event mode")
        shape = in_shapes[0]
        out_shape = (shape[0], (shape[1] - kh) // sh + 1, (shape[2] - kw) // sw + 1)
        coef = DTYPE(1.0 / (kh * kw))

        def pool_weights(c, ky, kx):
            return np.full((1, c.size), coef, dtype=DTYPE), c[None, :]

        return _scatter_window(layer.id, first.indices, first.values, shape, out_shape,
                               kh, kw, sh, 0, pool_weights)
    if kind == "fully_connected":
        weight = w["weight"]
        size = weight.shape[0]
        if not len(first):
            return DeltaPacket.empty(layer.id, size=size), 0
        out = weight[:, first.indices] @ first.values
        nz = np.flatnonzero(out)
        return DeltaPacket(layer.id, nz, out[nz], size=size), weight.shape[0] * len(first)
    if kind == "affine":
        shape = in_shapes[0]
        per_channel = int(np.prod(shape[1:]))
        scale = w["scale"][first.indices // per_channel]
        out = (first.values * scale).astype(DTYPE)
        keep = out != 0
        return DeltaPacket(layer.id, first.indices[keep], out[keep], size=int(np.prod(shape))), len(first)
    if kind == "add":
        size = int(np.prod(in_shapes[0]))
        return DeltaPacket.from_unsorted(
            layer.id,
            np.concatenate([p.indices for p in dins]),
            np.concatenate([p.values for p in dins]),
            size=size,
        ), 0
    if kind == "concat":
        axis = int(layer.params.get("axis", 0))
        out_shape = list(in_shapes[0])
        out_shape[axis] = sum(s[axis] for s in in_shapes)
        idx_parts, val_parts = [], []
        offset = 0
        for packet, shape in zip(dins, in_shapes):
            if len(packet):
                coords = list(np.unravel_index(packet.indices, shape))
                coords[axis] = coords[axis] + offset
                idx_parts.append(np.ravel_multi_index(coords, out_shape))
                val_parts.append(packet.values)
            offset += shape[axis]
        size = int(np.prod(out_shape))
        if not idx_parts:
            return DeltaPacket.empty(layer.id, size=size), 0
        return DeltaPacket.from_unsorted(layer.id, np.concatenate(idx_parts),
                                         np.concatenate(val_parts), size=size), 0
    raise ClassificationError(f"no event kernel for {kind!r}")


def linear_fan_out(layer: LayerSpec, in_shape: Sequence[int], indices: np.ndarray) -> np.ndarray:
    """Per-entry MAC cost of injecting a delta at each of ``indices``."""
    kind = layer.kind
    in_shape = tuple(in_shape)
    if kind == "conv2d":
        weight = layer.weights["weight"]
        stride, pad = _conv_geometry(layer)
        cout, _, kh, kw = weight.shape
        ho = (in_shape[1] + 2 * pad - kh) // stride + 1
        wo = (in_shape[2] + 2 * pad - kw) // stride + 1
        _, y, x = np.unravel_index(indices, in_shape)
        cy = _fan_counts(in_shape[1], ho, kh, stride, pad)
        cx = _fan_counts(in_shape[2], wo, kw, stride, pad)
        return cout * cy[y] * cx[x]
    if kind == "avg_pool":
        kh, kw, sh, _ = _pool_geometry(layer)
        ho, wo = (in_shape[1] - kh) // sh + 1, (in_shape[2] - kw) // sh + 1
        _, y, x = np.unravel_index(indices, in_shape)
        return _fan_counts(in_shape[1], ho, kh, sh, 0)[y] * _fan_counts(in_shape[2], wo, kw, sh, 0)[x]
    if kind == "fully_connected":
        return np.full(len(indices), layer.weights["weight"].shape[0], dtype=INDEX_DTYPE)
    if kind == "affine":
        return np.ones(len(indices), dtype=INDEX_DTYPE)
    if kind in ("add", "concat"):
        return np.zeros(len(indices), dtype=INDEX_DTYPE)
    raise ClassificationError(f"layer {layer.id!r} ({kind}) is not linear")


def pointwise_recompute(kind: str, values: np.ndarray) -> tuple[np.ndarray, int]:
    """Apply a pointwise nonlinearity to the touched values only; one op per value."""
    values = np.asarray(values, dtype=DTYPE)
    if kind == "relu":
        return np.maximum(values, DTYPE(0)), int(values.size)
    if kind == "identity":
        return values.copy(), int(values.size)
    raise ClassificationError(f"{kind!r} is not a pointwise nonlinearity")


def maxpool_event(layer: LayerSpec, buffer_x: np.ndarray,
                  din: DeltaPacket | np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Recompute every pool window that contains a touched buffer element.

    ``buffer_x`` must already hold the updated input values. Returns
    ``(window_indices, window_values, comparisons)`` where each recomputed
    window costs one comparison per element it covers.
    """
    touched = din.indices if isinstance(din, DeltaPacket) else np.asarray(din, dtype=INDEX_DTYPE)
    kh, kw, sh, sw = _pool_geometry(layer)
    cin, h, w = buffer_x.shape
    ho, wo = (h - kh) // sh + 1, (w - kw) // sw + 1
    if not touched.size:
        return np.empty(0, INDEX_DTYPE), np.empty(0, DTYPE), 0
    if touched.min() < 0 or touched.max() >= buffer_x.size:
        raise ShapeError(f"max_pool {layer.id!r}: touched index outside buffer")
    c, y, x = np.unravel_index(touched, buffer_x.shape)
    hits = []
    for ky in range(kh):
        ty = y - ky
        ok_y = (ty % sh == 0) & (ty >= 0) & (ty // sh < ho)
        for kx in range(kw):
            tx = x - kx
            ok = ok_y & (tx % sw == 0) & (tx >= 0) & (tx // sw < wo)
            hits.append(((c * ho + ty // sh) * wo + tx // sw)[ok])
    windows = np.unique(np.concatenate(hits))
    if not windows.size:  # touched elements fall between windows when stride > window
        return np.empty(0, INDEX_DTYPE), np.empty(0, DTYPE), 0
    wc, wy, wx = np.unravel_index(windows, (cin, ho, wo))
    gy = wy[:, None] * sh + np.arange(kh)[None, :]
    gx = wx[:, None] * sw + np.arange(kw)[None, :]
    block = buffer_x[wc[:, None, None], gy[:, :, None], gx[:, None, :]]
    values = block.reshape(windows.size, -1).max(axis=1).astype(DTYPE)
    return windows.astype(INDEX_DTYPE), values, int(windows.size * kh * kw)

"""Differentiable layers over sparse tensors, with tape-based reverse mode.

The tape records one closure per op during the forward pass and replays them
in reverse for backward.  It is not a general autodiff system: it handles the
fixed feed-forward graph family the filter model builds (chains, fan-out,
concat, residual adds), relying on every op producing fresh output arrays so
feature gradients can be keyed by array identity.

Parameters live in a flat {name: float64 array} dict shared by the layers,
the optimizer, and the weight-file serializer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse


class Tape:
    """Backward-pass recorder for one forward evaluation."""

    def __init__(self):
        self._ops = []
        self._feat_grads = {}
        self._keep = {}
        self.param_grads: dict[str, np.ndarray] = {}

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def accumulate(self, feats: np.ndarray, grad: np.ndarray):
        """Add grad to the gradient bucket of a feature array."""
        key = id(feats)
        if key in self._feat_grads:
            self._feat_grads[key] += grad
        else:
            self._feat_grads[key] = np.array(grad, dtype=np.float64)
            self._keep[key] = feats

    def grad(self, feats: np.ndarray) -> np.ndarray | None:
        return self._feat_grads.get(id(feats))

    def add_param_grad(self, name: str, grad: np.ndarray):
        if name in self.param_grads:
            self.param_grads[name] += grad
        else:
            self.param_grads[name] = grad

    def backward(self, feats: np.ndarray, grad: np.ndarray):
        """Seed the output gradient and run all recorded closures in reverse."""
        self.accumulate(feats, grad)
        for fn in reversed(self._ops):
            fn()


def relu(tape: Tape | None, t: sparse.SparseTensor) -> sparse.SparseTensor:
    out = t.with_feats(np.maximum(t.feats, 0.0))
    if tape is not None:
        in_feats, out_feats = t.feats, out.feats
        mask = in_feats > 0.0

        def backward():
            g = tape.grad(out_feats)
            if g is not None:
                tape.accumulate(in_feats, g * mask)

        tape.record(backward)
    return out


def concat(tape: Tape | None, tensors) -> sparse.SparseTensor:
    """Channel-wise concatenation of tensors sharing one geometry."""
    base = tensors[0]
    for t in tensors[1:]:
        same = t.keys is base.keys or np.array_equal(t.coords, base.coords)
        if not same or t.stride != base.stride:
            raise ValueError("concat requires identical coordinate sets")
    out = base.with_feats(np.concatenate([t.feats for t in tensors], axis=1))
    if tape is not None:
        out_feats = out.feats
        parts = [(t.feats, t.num_channels) for t in tensors]

        def backward():
            g = tape.grad(out_feats)
            if g is None:
                return
            start = 0
            for feats, width in parts:
                tape.accumulate(feats, g[:, start : start + width])
                start += width

        tape.record(backward)
    return out


def add(tape: Tape | None, a: sparse.SparseTensor, b: sparse.SparseTensor):
    """Element-wise sum of two tensors on the same geometry."""
    if a.feats.shape != b.feats.shape:
        raise ValueError("add requires matching feature shapes")
    out = a.with_feats(a.feats + b.feats)
    if tape is not None:
        out_feats, a_feats, b_feats = out.feats, a.feats, b.feats

        def backward():
            g = tape.grad(out_feats)
            if g is not None:
                tape.accumulate(a_feats, g)
                tape.accumulate(b_feats, g)

        tape.record(backward)
    return out


def sub(tape: Tape | None, a: sparse.SparseTensor, b: sparse.SparseTensor):
    """Element-wise difference a - b on a shared geometry."""
    if a.feats.shape != b.feats.shape:
        raise ValueError("sub requires matching feature shapes")
    out = a.with_feats(a.feats - b.feats)
    if tape is not None:
        out_feats, a_feats, b_feats = out.feats, a.feats, b.feats

        def backward():
            g = tape.grad(out_feats)
            if g is not None:
                tape.accumulate(a_feats, g)
                tape.accumulate(b_feats, -g)

        tape.record(backward)
    return out


def avg_pool(tape: Tape | None, t: sparse.SparseTensor, k: int = 3, s: int = 2):
    coarse, inverse, counts = sparse.sparse_avg_pool(t, k, s)
    if tape is not None:
        in_feats, out_feats = t.feats, coarse.feats

        def backward():
            g = tape.grad(out_feats)
            if g is not None:
                tape.accumulate(in_feats, sparse.sparse_avg_pool_backward(g, inverse, counts))

        tape.record(backward)
    return coarse


def upsample(tape: Tape | None, coarse, fine_coords, k: int = 3, s: int = 2):
    fine, inverse = sparse.sparse_upsample(coarse, fine_coords, k, s)
    if tape is not None:
        in_feats, out_feats = coarse.feats, fine.feats
        n_coarse = coarse.num_voxels

        def backward():
            g = tape.grad(out_feats)
            if g is not None:
                tape.accumulate(
                    in_feats, sparse.sparse_upsample_backward(g, inverse, n_coarse)
                )

        tape.record(backward)
    return fine


@dataclass
class Conv:
    """Sparse 3D convolution layer (optionally strided or transposed).

    Weights are stored as (k^3, c_in, c_out) in kernel-offset order; the
    transposed variant upsamples through the adjoint operator and therefore
    carries no bias.
    """

    name: str
    c_in: int
    c_out: int
    kernel_size: int = 3
    stride: int = 1
    transposed: bool = False
    bias: bool = True

    def __post_init__(self):
        if self.transposed:
            self.bias = False

    @property
    def weight_name(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias_name(self) -> str:
        return f"{self.name}.bias"

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {self.weight_name: (self.kernel_size**3, self.c_in, self.c_out)}
        if self.bias:
            shapes[self.bias_name] = (self.c_out,)
        return shapes

    def init(self, rng, params: dict, weight_scale: float = 1.0):
        fan_in = self.c_in * self.kernel_size**3
        std = weight_scale * np.sqrt(2.0 / fan_in)
        params[self.weight_name] = rng.normal(
            0.0, std, size=(self.kernel_size**3, self.c_in, self.c_out)
        )
        if self.bias:
            params[self.bias_name] = np.zeros(self.c_out)

    def apply(self, params, tape, t, kmap=None):
        w = params[self.weight_name]
        if self.transposed:
            return self._apply_transposed(w, tape, t, kmap)
        b = params[self.bias_name] if self.bias else None
        if self.kernel_size == 1 and self.stride == 1:
            return self._apply_pointwise(w, b, tape, t)
        if kmap is None:
            raise ValueError(f"{self.name}: kernel map required")
        out = sparse.sparse_conv(t, w, b, kmap)
        if tape is not None:
            in_t, out_feats = t, out.feats

            def backward():
                g = tape.grad(out_feats)
                if g is None:
                    return
                g_in, g_w, g_b = sparse.sparse_conv_backward(in_t, w, kmap, g)
                tape.accumulate(in_t.feats, g_in)
                tape.add_param_grad(self.weight_name, g_w)
                if self.bias:
                    tape.add_param_grad(self.bias_name, g_b)

            tape.record(backward)
        return out

    def _apply_pointwise(self, w, b, tape, t):
        # k=1 stride=1 needs no kernel map: it is a per-voxel linear layer
        feats = t.feats @ w[0]
        if b is not None:
            feats = feats + b
        out = t.with_feats(feats)
        if tape is not None:
            in_feats, out_feats = t.feats, out.feats

            def backward():
                g = tape.grad(out_feats)
                if g is None:
                    return
                tape.accumulate(in_feats, g @ w[0].T)
                tape.add_param_grad(self.weight_name, (in_feats.T @ g)[None])
                if self.bias:
                    tape.add_param_grad(self.bias_name, g.sum(axis=0))

            tape.record(backward)
        return out

    def _apply_transposed(self, w, tape, t, kmap):
        if kmap is None:
            raise ValueError(f"{self.name}: kernel map required")
        # sparse_conv_transpose wants the downsampling conv's weight layout,
        # (k^3, fine channels, coarse channels); this layer stores
        # (k^3, coarse in, fine out), so swap the channel axes.
        wt = np.ascontiguousarray(w.transpose(0, 2, 1))
        out = sparse.sparse_conv_transpose(t, wt, kmap)
        if tape is not None:
            in_t, out_feats = t, out.feats

            def backward():
                g = tape.grad(out_feats)
                if g is None:
                    return
                g_in, g_wt = sparse.sparse_conv_transpose_backward(in_t, wt, kmap, g)
                tape.accumulate(in_t.feats, g_in)
                tape.add_param_grad(self.weight_name, g_wt.transpose(0, 2, 1))

            tape.record(backward)
        return out


class InceptionResidualBlock:
    """Three parallel branches, concatenated and added back to the input.

    For C channels (C divisible by 4), the branches produce C/2 + C/4 + C/4
    channels:

        b1:  3^3 conv, C -> C/2
        b2:  3^3 conv C -> C/4, ReLU, 3^3 conv C/4 -> C/4
        b3:  1^3 conv C -> C/4, ReLU, 3^3 conv C/4 -> C/4, ReLU,
             1^3 conv C/4 -> C/4

    ReLU sits only between stacked convs inside a branch; branch outputs and
    the residual sum stay linear.
    """

    def __init__(self, name: str, channels: int):
        if channels % 4:
            raise ValueError("channel count must be divisible by 4")
        q = channels // 4
        self.name = name
        self.channels = channels
        self.b1 = Conv(f"{name}.b1", channels, 2 * q, 3)
        self.b2a = Conv(f"{name}.b2a", channels, q, 3)
        self.b2b = Conv(f"{name}.b2b", q, q, 3)
        self.b3a = Conv(f"{name}.b3a", channels, q, 1)
        self.b3b = Conv(f"{name}.b3b", q, q, 3)
        self.b3c = Conv(f"{name}.b3c", q, q, 1)

    def convs(self):
        return [self.b1, self.b2a, self.b2b, self.b3a, self.b3b, self.b3c]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for c in self.convs():
            shapes.update(c.param_shapes())
        return shapes

    def init(self, rng, params, weight_scale: float = 1.0):
        for c in self.convs():
            c.init(rng, params, weight_scale)

    def apply(self, params, tape, t, kmap3):
        y1 = self.b1.apply(params, tape, t, kmap3)
        y2 = self.b2a.apply(params, tape, t, kmap3)
        y2 = self.b2b.apply(params, tape, relu(tape, y2), kmap3)
        y3 = self.b3a.apply(params, tape, t)
        y3 = self.b3b.apply(params, tape, relu(tape, y3), kmap3)
        y3 = self.b3c.apply(params, tape, relu(tape, y3))
        return add(tape, t, concat(tape, [y1, y2, y3]))


class Adam:
    """Adam with bias correction; steps with non-finite gradients are skipped.

    Parameters are updated in place so the same dict stays shared with the
    model.  skipped counts rejected steps; t counts applied ones.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.skipped = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> bool:
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict):
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)

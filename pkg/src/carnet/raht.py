"""Simplified hierarchical attribute transform codec (the distorter).

Stands in for a lossy attribute coder: a region-adaptive Haar transform over
occupied voxels, uniform coefficient quantization, exact inverse, and a
zeroth-order-entropy rate estimate.  Pairs of occupied nodes are merged along
x, then y, then z per level; a pair with accumulated point counts w1, w2 maps
values v1, v2 to

    low  = (sqrt(w1) v1 + sqrt(w2) v2) / sqrt(w1 + w2)
    high = (-sqrt(w2) v1 + sqrt(w1) v2) / sqrt(w1 + w2)

which is orthonormal, so energy is preserved and the inverse is the
transpose.  Internally each node carries its region mean m = v / sqrt(w);
the equivalent mean-space update m = m1 + w2 (m2 - m1) / (w1 + w2) makes
constant fields propagate bitwise exactly, so their high-pass coefficients
are exactly zero and all-zero AC always reconstructs an exactly constant
field.  The emitted coefficient vector is all high-pass values in merge
order followed by the root DC, m_root * sqrt(N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import pack_coords


@dataclass
class _Pass:
    order: np.ndarray  # permutation sorting nodes by (reduced coord, parity)
    pairs: np.ndarray  # positions p in the sorted array pairing with p+1
    singles: np.ndarray
    w1: np.ndarray
    w2: np.ndarray
    n_in: int

    @property
    def tot(self):
        return self.w1 + self.w2

    @property
    def hcoef(self):
        # sqrt(w1 w2 / (w1 + w2)): high = hcoef * (m2 - m1)
        return np.sqrt(self.w1 * self.w2 / (self.w1 + self.w2))


@dataclass
class RahtPlan:
    """Geometry-only merge schedule, reusable across channels and frames."""

    n: int
    passes: list

    @property
    def num_coeffs(self) -> int:
        return self.n


def build_plan(coords: np.ndarray) -> RahtPlan:
    """Plan the merge schedule for one voxel geometry."""
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {coords.shape}")
    if len(coords) == 0:
        raise ValueError("empty frame")
    if coords.min() < 0:
        raise ValueError("voxel coordinates must be non-negative")
    if len(np.unique(pack_coords(coords))) != len(coords):
        raise ValueError("duplicate coordinates")

    passes = []
    weights = np.ones(len(coords), dtype=np.float64)
    axis = 0
    while len(coords) > 1:
        reduced = coords.copy()
        reduced[:, axis] //= 2
        parity = coords[:, axis] & 1
        key = pack_coords(reduced)
        order = np.lexsort((parity, key))
        key_s = key[order]
        eq = key_s[:-1] == key_s[1:]
        pairs = np.nonzero(eq)[0]
        mask = np.ones(len(coords), dtype=bool)
        mask[pairs] = False
        mask[pairs + 1] = False
        singles = np.nonzero(mask)[0]

        w_s = weights[order]
        reduced_s = reduced[order]
        passes.append(
            _Pass(order, pairs, singles, w_s[pairs], w_s[pairs + 1], len(coords))
        )
        coords = np.concatenate([reduced_s[pairs], reduced_s[singles]])
        weights = np.concatenate([w_s[pairs] + w_s[pairs + 1], w_s[singles]])
        axis = (axis + 1) % 3
    return RahtPlan(n=len(weights) + sum(len(p.pairs) for p in passes), passes=passes)


def forward(plan: RahtPlan, values: np.ndarray) -> np.ndarray:
    """Transform (N, C) values to (N, C) coefficients: highs then root DC."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or len(values) != plan.n:
        raise ValueError("values do not match the plan's point count")
    m = values
    root_weight = float(plan.n)
    highs = []
    for p in plan.passes:
        ms = m[p.order]
        m1 = ms[p.pairs]
        m2 = ms[p.pairs + 1]
        diff = m2 - m1
        highs.append(p.hcoef[:, None] * diff)
        merged = m1 + (p.w2 / p.tot)[:, None] * diff
        m = np.concatenate([merged, ms[p.singles]])
    dc = m * np.sqrt(root_weight)
    return np.concatenate(highs + [dc]) if highs else dc


def inverse(plan: RahtPlan, coeffs: np.ndarray) -> np.ndarray:
    """Exact inverse of forward."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 2 or len(coeffs) != plan.n:
        raise ValueError("coefficient count does not match the plan")
    splits = []
    pos = 0
    for p in plan.passes:
        splits.append(coeffs[pos : pos + len(p.pairs)])
        pos += len(p.pairs)
    m = coeffs[pos:] / np.sqrt(float(plan.n))
    for p, high in zip(reversed(plan.passes), reversed(splits)):
        n_pairs = len(p.pairs)
        merged = m[:n_pairs]
        single_vals = m[n_pairs:]
        diff = high / p.hcoef[:, None]
        m1 = merged - (p.w2 / p.tot)[:, None] * diff
        m2 = m1 + diff
        ms = np.empty((p.n_in, coeffs.shape[1]), dtype=np.float64)
        ms[p.pairs] = m1
        ms[p.pairs + 1] = m2
        ms[p.singles] = single_vals
        prev = np.empty_like(ms)
        prev[p.order] = ms
        m = prev
    return m


def entropy_bits(symbols: np.ndarray) -> float:
    """Empirical zeroth-order entropy in bits per symbol."""
    symbols = np.asarray(symbols).ravel()
    if len(symbols) == 0:
        return 0.0
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-np.sum(p * np.log2(p)))


def distort(
    coords: np.ndarray, attrs: np.ndarray, q: float, peak: float = 255.0
) -> tuple[np.ndarray, float]:
    """Compress-and-reconstruct attributes; returns (attrs_hat, bpp).

    attrs is (N, C) in [0, peak].  Each channel is normalized, transformed,
    uniformly quantized at step q (q <= 0 means the lossless limit: no
    quantization), inverse transformed, clamped, and rescaled.  The root DC
    passes through unquantized, so a constant field survives any step
    exactly.  The rate estimate is the summed per-channel zeroth-order
    entropy of the quantized high-pass coefficients, in bits per point.
    """
    attrs = np.asarray(attrs, dtype=np.float64)
    if attrs.ndim != 2:
        raise ValueError("expected (N, C) attributes")
    plan = build_plan(coords)
    out = np.empty_like(attrs)
    total_bits = 0.0
    for ch in range(attrs.shape[1]):
        coeffs = forward(plan, attrs[:, ch : ch + 1] / peak)
        if q > 0:
            ints = np.round(coeffs[:-1] / q)
            deq = np.concatenate([ints * q, coeffs[-1:]])
            symbols = ints.astype(np.int64)
        else:
            deq = coeffs
            symbols = coeffs[:-1]
        rec = inverse(plan, deq)[:, 0]
        out[:, ch] = np.clip(rec, 0.0, 1.0) * peak
        total_bits += entropy_bits(symbols) * len(symbols)
    return out, total_bits / plan.n


DEFAULT_STEPS = (0.02, 0.05, 0.10, 0.20)

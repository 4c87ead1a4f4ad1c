"""Independent reference implementations used to check the fast paths.

Everything here favors obviousness over speed: dense arrays, dict lookups,
and explicit Python loops, with none of the packed-key or sparse-matrix
machinery from the package under test.
"""

import itertools

import numpy as np


def random_geometry(rng, n, box=8, stride=1):
    """n unique voxel coordinates inside a box^3 grid, scaled by stride."""
    n = min(n, box**3)
    flat = rng.choice(box**3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (box, box, box)), axis=1)
    return coords.astype(np.int64) * stride


def dense_conv_oracle(coords, feats, weights, bias, kernel_size, stride, in_stride=1):
    """Convolution via a zero-padded dense embedding.

    Embeds the sparse field in a dense grid (unoccupied sites are zero),
    evaluates the convolution with explicit loops at every output site, and
    returns {output coordinate: value}.  Output sites follow the generalized
    sparse convention: the input set for stride 1, the coarsened set
    2*in_stride * floor(c / (2*in_stride)) for stride 2.
    """
    coords = np.asarray(coords, dtype=np.int64)
    feats = np.asarray(feats, dtype=np.float64)
    r = kernel_size // 2
    lo = coords.min(axis=0) - (r + 1) * in_stride
    hi = coords.max(axis=0) + (r + 1) * in_stride
    shape = tuple((hi - lo) // in_stride + 1)
    c_in = feats.shape[1]
    c_out = weights.shape[2]
    grid = np.zeros(shape + (c_in,), dtype=np.float64)
    idx = (coords - lo) // in_stride
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = feats

    if stride == 1:
        out_coords = coords
    else:
        step = 2 * in_stride
        out_coords = np.unique((coords // step) * step, axis=0)

    offsets = list(itertools.product(range(-r, r + 1), repeat=3))
    result = {}
    for q in out_coords:
        acc = np.zeros(c_out) if bias is None else bias.astype(np.float64).copy()
        base = (q - lo) // in_stride
        for oi, off in enumerate(offsets):
            p = base + np.asarray(off)
            acc = acc + grid[p[0], p[1], p[2]] @ weights[oi]
        result[tuple(int(v) for v in q)] = acc
    return result


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f with respect to array x.

    f must re-read x on every call; x is perturbed in place entry by entry.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_rel_err(got, want, floor=1.0):
    """Max |got - want| / max(|want|, floor) over all entries."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    if got.size == 0:
        return 0.0
    return float(np.max(np.abs(got - want) / denom))


def bd_rate_oracle(anchor, test, samples=10000):
    """Re-derive BD-Rate with explicit Vandermonde fits and trapezoid sums."""
    lo = max(anchor.psnrs.min(), test.psnrs.min())
    hi = min(anchor.psnrs.max(), test.psnrs.max())
    avg = []
    for curve in (anchor, test):
        p = curve.psnrs
        vand = np.stack([p**3, p**2, p, np.ones_like(p)], axis=1)
        coef, *_ = np.linalg.lstsq(vand, np.log10(curve.rates), rcond=None)
        xs = np.linspace(lo, hi, samples + 1)
        ys = coef[0] * xs**3 + coef[1] * xs**2 + coef[2] * xs + coef[3]
        dx = (hi - lo) / samples
        integral = float(np.sum((ys[:-1] + ys[1:]) * 0.5 * dx))
        avg.append(integral / (hi - lo))
    return 100.0 * (10.0 ** (avg[1] - avg[0]) - 1.0)

"""Sparse voxel tensors and generalized sparse convolution.

Geometry is a set of occupied integer voxel coordinates; features live only
on occupied voxels.  Coordinates are always stored in global fine-lattice
units: a tensor at stride s holds coordinates divisible by s, and a stride-2
convolution maps a tensor at stride s to one at stride 2s on the coarsened
coordinate set 2s * floor(c / 2s).

All feature arrays are float64, shaped (N, C) with rows matching the
coordinate rows.  Coordinate rows are kept lexicographically sorted so that
every operation is reproducible bit for bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Packed-key bias: coordinates must satisfy |c| < 2**20 per axis, which is
# far beyond any voxelized frame we handle (12-bit geometry tops out at 4096).
_KEY_BIAS = 1 << 20
_KEY_SHIFT = 21


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Pack integer (N, 3) coordinates into sortable int64 keys.

    Lexicographic order on (x, y, z) equals numeric order on the keys.
    """
    coords = np.asarray(coords, dtype=np.int64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got {coords.shape}")
    if coords.size and np.abs(coords).max() >= _KEY_BIAS:
        raise ValueError("coordinate magnitude exceeds packing range (2**20)")
    x, y, z = (coords + _KEY_BIAS).T
    return (x << (2 * _KEY_SHIFT)) | (y << _KEY_SHIFT) | z


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    """Inverse of pack_coords."""
    mask = (1 << _KEY_SHIFT) - 1
    z = (keys & mask) - _KEY_BIAS
    y = ((keys >> _KEY_SHIFT) & mask) - _KEY_BIAS
    x = (keys >> (2 * _KEY_SHIFT)) - _KEY_BIAS
    return np.stack([x, y, z], axis=1)


def lexsort_rows(coords: np.ndarray) -> np.ndarray:
    """Return the permutation that sorts coordinate rows lexicographically."""
    return np.argsort(pack_coords(coords), kind="stable")


def build_index(coords: np.ndarray) -> dict[tuple[int, int, int], int]:
    """Map each coordinate tuple to its row.  Rows must be unique."""
    index = {tuple(int(v) for v in row): i for i, row in enumerate(coords)}
    if len(index) != len(coords):
        raise ValueError("duplicate coordinates in sparse tensor")
    return index


@dataclass(eq=False)
class SparseTensor:
    """Occupied voxel coordinates with per-voxel feature rows.

    coords: (N, 3) int64, lexicographically sorted, unique, divisible by stride.
    feats:  (N, C) float64.
    stride: lattice spacing in fine units (1 at the input level).
    """

    coords: np.ndarray
    feats: np.ndarray
    stride: int = 1
    _keys: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64)
        self.feats = np.asarray(self.feats, dtype=np.float64)
        if self.feats.ndim != 2 or len(self.feats) != len(self.coords):
            raise ValueError("feats must be (N, C) matching coords rows")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.coords.size and np.any(self.coords % self.stride):
            raise ValueError("coordinates not divisible by stride")
        keys = pack_coords(self.coords)
        if np.any(np.diff(keys) <= 0):
            raise ValueError("coordinates must be sorted and unique")
        self._keys = keys

    @classmethod
    def from_points(cls, coords, feats, stride: int = 1) -> "SparseTensor":
        """Build a tensor from unordered rows, sorting them canonically."""
        coords = np.asarray(coords, dtype=np.int64)
        feats = np.asarray(feats, dtype=np.float64)
        order = lexsort_rows(coords)
        return cls(coords[order], feats[order], stride)

    @property
    def keys(self) -> np.ndarray:
        return self._keys

    @property
    def num_voxels(self) -> int:
        return len(self.coords)

    @property
    def num_channels(self) -> int:
        return self.feats.shape[1]

    def rows_of(self, coords: np.ndarray) -> np.ndarray:
        """Row of each query coordinate, or -1 where unoccupied."""
        q = pack_coords(coords)
        pos = np.searchsorted(self._keys, q)
        pos_c = np.minimum(pos, len(self._keys) - 1) if len(self._keys) else pos
        hit = np.zeros(len(q), dtype=bool) if not len(self._keys) else (
            self._keys[pos_c] == q) & (pos < len(self._keys))
        out = np.where(hit, pos_c, -1)
        return out.astype(np.int64)

    def with_feats(self, feats: np.ndarray) -> "SparseTensor":
        """Same geometry, new features."""
        t = SparseTensor.__new__(SparseTensor)
        t.coords = self.coords
        t.feats = np.asarray(feats, dtype=np.float64)
        if t.feats.ndim != 2 or len(t.feats) != len(self.coords):
            raise ValueError("feats must be (N, C) matching coords rows")
        t.stride = self.stride
        t._keys = self._keys
        return t


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Centered cubic kernel offsets in lexicographic order, shape (k^3, 3)."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError("kernel size must be odd and positive")
    r = kernel_size // 2
    return np.array(
        list(itertools.product(range(-r, r + 1), repeat=3)), dtype=np.int64
    ).reshape(kernel_size**3, 3)


def downsample_coords(coords: np.ndarray, stride: int, factor: int = 2) -> np.ndarray:
    """Coarse coordinate set: factor*stride * floor(c / (factor*stride)).

    Returns unique, lexicographically sorted rows in fine units.
    """
    coords = np.asarray(coords, dtype=np.int64)
    step = stride * factor
    cells = (coords // step) * step
    keys = np.unique(pack_coords(cells))
    return unpack_keys(keys)


@dataclass
class KernelMap:
    """Per-offset (input row, output row) pairings for one conv geometry.

    mats[o] is an (n_out, n_in) CSR matrix with a 1 at (j, i) for every pair
    where input voxel i sits at offset o relative to output voxel j.  The
    matrices double as the forward gather/scatter and, transposed, as the
    backward scatter, so both passes accumulate in a fixed order.
    """

    offsets: np.ndarray
    mats: list[sp.csr_matrix]
    n_in: int
    n_out: int
    in_coords: np.ndarray
    out_coords: np.ndarray
    in_stride: int
    out_stride: int


def build_kernel_map(
    in_tensor: SparseTensor,
    kernel_size: int,
    stride: int = 1,
    out_coords: np.ndarray | None = None,
) -> KernelMap:
    """Pair input and output voxels for every kernel offset.

    Output voxel j at reduced coordinate q (fine units, stride s_out) receives
    input voxel i under offset o iff coord(i) == q + o * s_in.  For stride 1
    the output coordinate set equals the input set; for stride 2 it is the
    downsampled set unless an explicit out_coords is given (as in the
    transposed direction, where the roles of the two sets swap).
    """
    s_in = in_tensor.stride
    if stride not in (1, 2):
        raise ValueError("only stride 1 and 2 are supported")
    s_out = s_in * stride
    if out_coords is None:
        if stride == 1:
            out_coords = in_tensor.coords
        else:
            out_coords = downsample_coords(in_tensor.coords, s_in, stride)
    else:
        out_coords = np.asarray(out_coords, dtype=np.int64)

    offsets = kernel_offsets(kernel_size)
    n_in = in_tensor.num_voxels
    n_out = len(out_coords)
    mats = []
    for off in offsets:
        targets = out_coords + off * s_in
        rows_in = in_tensor.rows_of(targets)
        j = np.nonzero(rows_in >= 0)[0]
        i = rows_in[j]
        m = sp.csr_matrix(
            (np.ones(len(j), dtype=np.float64), (j, i)), shape=(n_out, n_in)
        )
        mats.append(m)
    return KernelMap(
        offsets, mats, n_in, n_out, in_tensor.coords, out_coords, s_in, s_out
    )


def sparse_conv(
    in_tensor: SparseTensor,
    weights: np.ndarray,
    bias: np.ndarray | None,
    kmap: KernelMap,
) -> SparseTensor:
    """Generalized sparse convolution.

    weights: (k^3, C_in, C_out) matching kmap.offsets order.
    out[j] = bias + sum_o sum_{(i,j) in pairs[o]} in[i] @ weights[o].
    """
    c_out = weights.shape[2]
    out = np.zeros((kmap.n_out, c_out), dtype=np.float64)
    for o, m in enumerate(kmap.mats):
        if m.nnz:
            out += m @ (in_tensor.feats @ weights[o])
    if bias is not None:
        out += bias
    return SparseTensor(kmap.out_coords, out, kmap.out_stride)


def sparse_conv_backward(
    in_tensor: SparseTensor,
    weights: np.ndarray,
    kmap: KernelMap,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sparse_conv w.r.t. input features, weights, bias."""
    grad_in = np.zeros_like(in_tensor.feats)
    grad_w = np.zeros_like(weights)
    for o, m in enumerate(kmap.mats):
        if m.nnz:
            tmp = m.T @ grad_out
            grad_in += tmp @ weights[o].T
            grad_w[o] = in_tensor.feats.T @ tmp
    grad_b = grad_out.sum(axis=0)
    return grad_in, grad_w, grad_b


def sparse_conv_transpose(
    in_tensor: SparseTensor,
    weights: np.ndarray,
    kmap: KernelMap,
    target_coords: np.ndarray | None = None,
) -> SparseTensor:
    """Transposed convolution: exact adjoint of the stride-2 conv.

    kmap must be the map of the matching downsampling conv, built with the
    fine coordinates as input and this tensor's (coarse) coordinates as
    output, so here the roles reverse: out[i] = sum_o sum_{(i,j)} in[j] @
    weights[o].T.  Carries no bias, which keeps the operator linear and the
    adjoint identity <conv(x), y> == <x, conv_T(y)> exact.

    target_coords, when given, must equal the cached fine coordinates the
    map was built from; it exists so callers can assert which geometry the
    output lands on.
    """
    if in_tensor.num_voxels != kmap.n_out:
        raise ValueError("tensor does not match kernel map output side")
    if target_coords is not None and not np.array_equal(
        np.asarray(target_coords, dtype=np.int64), kmap.in_coords
    ):
        raise ValueError("target coordinates differ from the cached fine set")
    c_in = weights.shape[1]
    out = np.zeros((kmap.n_in, c_in), dtype=np.float64)
    for o, m in enumerate(kmap.mats):
        if m.nnz:
            out += m.T @ (in_tensor.feats @ weights[o].T)
    return SparseTensor(kmap.in_coords, out, kmap.in_stride)


def sparse_conv_transpose_backward(
    in_tensor: SparseTensor,
    weights: np.ndarray,
    kmap: KernelMap,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of sparse_conv_transpose w.r.t. input features and weights."""
    grad_in = np.zeros_like(in_tensor.feats)
    grad_w = np.zeros_like(weights)
    for o, m in enumerate(kmap.mats):
        if m.nnz:
            grad_in += m @ (grad_out @ weights[o])
            grad_w[o] = grad_out.T @ (m.T @ in_tensor.feats)
    return grad_in, grad_w


def sparse_avg_pool(
    in_tensor: SparseTensor, k: int = 3, s: int = 2
) -> tuple[SparseTensor, np.ndarray, np.ndarray]:
    """Average features of each occupied coarse cell's fine voxels.

    A fine voxel r belongs to the coarse cell q = step * floor(r / step); the
    coarse value is the mean over the cell's occupied voxels, normalized by
    the actual occupant count.  Cells partition space, so pooling followed by
    upsampling is a projection (idempotent) and preserves constants exactly;
    k is accepted for signature compatibility with the conv family but does
    not widen the support, since overlapping supports would break both
    properties.  Returns (coarse tensor, inverse, counts) where inverse[p] is
    the coarse row owning fine row p.
    """
    step = in_tensor.stride * s
    cells = (in_tensor.coords // step) * step
    keys = pack_coords(cells)
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    c = in_tensor.num_channels
    # mean of deviations from one cell member, so constant cells sum exact
    # zeros and the preserved-constants contract holds for every double
    shift = in_tensor.feats[first]
    deltas = in_tensor.feats - shift[inverse]
    sums = np.zeros((len(uniq), c), dtype=np.float64)
    for ch in range(c):
        sums[:, ch] = np.bincount(inverse, weights=deltas[:, ch], minlength=len(uniq))
    coarse = SparseTensor(unpack_keys(uniq), shift + sums / counts[:, None], step)
    return coarse, inverse, counts


def sparse_avg_pool_backward(
    grad_coarse: np.ndarray, inverse: np.ndarray, counts: np.ndarray
) -> np.ndarray:
    """Gradient of sparse_avg_pool w.r.t. the fine features."""
    return grad_coarse[inverse] / counts[inverse, None]


def sparse_upsample(
    coarse: SparseTensor, fine_coords: np.ndarray, k: int = 3, s: int = 2
) -> tuple[SparseTensor, np.ndarray]:
    """Copy each coarse value to every fine voxel inside its cell.

    Every fine coordinate must have an occupied owning cell; a miss means the
    two geometries do not correspond and is an error.  Returns (fine tensor,
    inverse) with inverse[p] the coarse row feeding fine row p.
    """
    step = coarse.stride
    if step % s:
        raise ValueError("coarse stride not divisible by upsampling factor")
    fine_coords = np.asarray(fine_coords, dtype=np.int64)
    cells = (fine_coords // step) * step
    rows = coarse.rows_of(cells)
    if np.any(rows < 0):
        raise ValueError("fine coordinate with no occupied coarse cell")
    fine = SparseTensor(fine_coords, coarse.feats[rows], step // s)
    return fine, rows


def sparse_upsample_backward(
    grad_fine: np.ndarray, inverse: np.ndarray, n_coarse: int
) -> np.ndarray:
    """Gradient of sparse_upsample w.r.t. the coarse features."""
    c = grad_fine.shape[1]
    out = np.zeros((n_coarse, c), dtype=np.float64)
    for ch in range(c):
        out[:, ch] = np.bincount(inverse, weights=grad_fine[:, ch], minlength=n_coarse)
    return out

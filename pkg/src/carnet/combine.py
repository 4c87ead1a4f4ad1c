"""Frame-level combination of sample-offset candidates.

The network emits H candidate offset signals per frame (columns of R).  The
encoder solves for the least-squares mix against the true distortion,
quantizes the coefficients to signed 5-bit codes at scale 1/128, and signals
them in a tiny bitstream; the decoder re-derives R and applies the same mix.
An encoder-side fallback guarantees the filter never hurts: if the quantized
mix raises the MSE, the all-zero record is signaled instead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import sparse

COEFF_SCALE = 128
COEFF_MIN = -16
COEFF_MAX = 15
STREAM_MAGIC = b"CARC"
STREAM_VERSION = 1
_COMPONENT_TAG = {"Y": 0, "U": 1, "V": 2}
_TAG_COMPONENT = {v: k for k, v in _COMPONENT_TAG.items()}


@dataclass(frozen=True)
class CoefficientRecord:
    """Quantized mix for one component: integers s_i, each in [-16, 15]."""

    component: str
    values: tuple[int, ...]

    def __post_init__(self):
        if self.component not in _COMPONENT_TAG:
            raise ValueError(f"unknown component {self.component!r}")
        for s in self.values:
            if not COEFF_MIN <= s <= COEFF_MAX:
                raise ValueError(f"coefficient {s} outside [{COEFF_MIN}, {COEFF_MAX}]")

    @property
    def h(self) -> int:
        return len(self.values)

    @property
    def coefficients(self) -> np.ndarray:
        """Dequantized mix weights a_i = s_i / 128."""
        return np.asarray(self.values, dtype=np.float64) / COEFF_SCALE

    @property
    def payload_bits(self) -> int:
        return 5 * self.h

    def is_zero(self) -> bool:
        return all(s == 0 for s in self.values)


def zero_record(component: str, h: int) -> CoefficientRecord:
    return CoefficientRecord(component, (0,) * h)


def compression_distortion(f: sparse.SparseTensor, f_hat: sparse.SparseTensor):
    """Per-point distortion D = F - F_hat for one attribute component."""
    if f.num_channels != 1 or f_hat.num_channels != 1:
        raise ValueError("distortion is defined per single-channel component")
    same = f.keys is f_hat.keys or np.array_equal(f.coords, f_hat.coords)
    if not same:
        raise ValueError("original and compressed frames are not aligned")
    return f.feats[:, 0] - f_hat.feats[:, 0]


def lse_solve(r: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Minimum-norm least-squares coefficients A = argmin ||D - R A||^2."""
    r = np.asarray(r, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if r.ndim != 2 or len(r) != len(d):
        raise ValueError("offset matrix and distortion must share row count")
    if len(d) < 1:
        raise ValueError("empty system")
    return np.linalg.lstsq(r, d, rcond=None)[0]


def round_half_away_from_zero(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_coeffs(a: np.ndarray, component: str) -> CoefficientRecord:
    s = round_half_away_from_zero(np.asarray(a) * COEFF_SCALE)
    s = np.clip(s, COEFF_MIN, COEFF_MAX).astype(np.int64)
    return CoefficientRecord(component, tuple(int(v) for v in s))


def apply_offsets(
    f_hat: np.ndarray, r: np.ndarray, rec: CoefficientRecord
) -> np.ndarray:
    """Filtered attribute: clamp(F_hat + sum_i (s_i/128) d_i, 0, 1)."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[1] != rec.h:
        raise ValueError("record width does not match offset matrix")
    estimate = r @ rec.coefficients
    return np.clip(np.asarray(f_hat, dtype=np.float64) + estimate, 0.0, 1.0)


def encode_with_fallback(
    f: np.ndarray, f_hat: np.ndarray, r: np.ndarray, component: str
) -> tuple[np.ndarray, CoefficientRecord]:
    """Solve, quantize, apply; fall back to the zero record if MSE grew.

    Guarantees MSE(f, filtered) <= MSE(f, f_hat) exactly on every input.
    """
    a = lse_solve(r, np.asarray(f, dtype=np.float64) - f_hat)
    rec = quantize_coeffs(a, component)
    filtered = apply_offsets(f_hat, r, rec)
    if np.sum((f - filtered) ** 2) > np.sum((f - f_hat) ** 2):
        rec = zero_record(component, r.shape[1])
        filtered = apply_offsets(f_hat, r, rec)
    return filtered, rec


class _BitWriter:
    def __init__(self):
        self.bytes = bytearray()
        self._acc = 0
        self._n = 0

    def put(self, value: int, width: int):
        for shift in range(width - 1, -1, -1):
            self._acc = (self._acc << 1) | ((value >> shift) & 1)
            self._n += 1
            if self._n == 8:
                self.bytes.append(self._acc)
                self._acc = 0
                self._n = 0

    def pad_to_byte(self):
        if self._n:
            self.bytes.append(self._acc << (8 - self._n))
            self._acc = 0
            self._n = 0


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def get(self, width: int) -> int:
        value = 0
        for _ in range(width):
            byte = self.pos // 8
            if byte >= len(self.data):
                raise ValueError("truncated coefficient stream")
            bit = (self.data[byte] >> (7 - self.pos % 8)) & 1
            value = (value << 1) | bit
            self.pos += 1
        return value

    def skip_to_byte(self):
        self.pos = (self.pos + 7) // 8 * 8


def write_coeff_stream(records) -> bytes:
    """Serialize coefficient records to the signaled bitstream."""
    records = list(records)
    if len(records) > 255:
        raise ValueError("too many records for one stream")
    out = bytearray()
    out += STREAM_MAGIC
    out.append(STREAM_VERSION)
    out.append(len(records))
    for rec in records:
        if rec.h > 255:
            raise ValueError("record too wide")
        out.append(_COMPONENT_TAG[rec.component])
        out.append(rec.h)
        writer = _BitWriter()
        for s in rec.values:
            writer.put(s & 0x1F, 5)
        writer.pad_to_byte()
        out += writer.bytes
    return bytes(out)


def read_coeff_stream(data: bytes):
    """Parse a coefficient bitstream; strict about magic, version, ranges."""
    if data[:4] != STREAM_MAGIC:
        raise ValueError("not a coefficient stream (bad magic)")
    if len(data) < 6:
        raise ValueError("truncated coefficient stream")
    if data[4] != STREAM_VERSION:
        raise ValueError(f"unsupported stream version {data[4]}")
    count = data[5]
    pos = 6
    records = []
    for _ in range(count):
        if pos + 2 > len(data):
            raise ValueError("truncated coefficient stream")
        tag, h = data[pos], data[pos + 1]
        if tag not in _TAG_COMPONENT:
            raise ValueError(f"unknown component tag {tag}")
        pos += 2
        nbytes = (5 * h + 7) // 8
        reader = _BitReader(data[pos : pos + nbytes])
        values = []
        for _ in range(h):
            code = reader.get(5)
            values.append(code - 32 if code >= 16 else code)
        records.append(CoefficientRecord(_TAG_COMPONENT[tag], tuple(values)))
        pos += nbytes
    if pos != len(data):
        raise ValueError("trailing bytes after the last record")
    return records

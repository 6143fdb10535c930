"""GF(2^8) arithmetic and Cauchy-matrix erasure coding.

Field: polynomial 0x11D (x^8 + x^4 + x^3 + x^2 + 1), generator 0x02.
Multiplication goes through log/antilog tables; bulk byte operations use a
precomputed 256x256 product table indexed with numpy, which keeps encoding
of whole checkpoint blobs off the Python bytecode path.

The coding matrix is Cauchy (x_i = i for data, y_j = k + j for parity), so
every square submatrix of [I; C] is invertible and any k of the k + m
shards reconstruct the originals exactly.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError, InsufficientShards

POLY = 0x11D
GENERATOR = 0x02
FIELD = 256

# --- table construction ------------------------------------------------------

_EXP = [0] * 510
_LOG = [0] * 256
_x = 1
for _i in range(255):
    _EXP[_i] = _x
    _LOG[_x] = _i
    _x <<= 1
    if _x & 0x100:
        _x ^= POLY
for _i in range(255, 510):
    _EXP[_i] = _EXP[_i - 255]

EXP = np.array(_EXP, dtype=np.uint8)
LOG = np.array(_LOG, dtype=np.uint16)


def gf_mul(a: int, b: int) -> int:
    if a == 0 or b == 0:
        return 0
    return int(EXP[int(LOG[a]) + int(LOG[b])])


def gf_div(a: int, b: int) -> int:
    if b == 0:
        raise ZeroDivisionError("GF(256) division by zero")
    if a == 0:
        return 0
    return int(EXP[int(LOG[a]) + 255 - int(LOG[b])])


def gf_inv(a: int) -> int:
    if a == 0:
        raise ZeroDivisionError("GF(256) inverse of zero")
    return int(EXP[255 - int(LOG[a])])


def gf_pow(a: int, n: int) -> int:
    if a == 0:
        return 0 if n else 1
    return int(EXP[(int(LOG[a]) * n) % 255])


# Full product table: MUL[a, b] = a*b in GF(256). 64 KiB, built once.
_ab = np.add.outer(LOG.astype(np.int32), LOG.astype(np.int32))
MUL = EXP[_ab]
MUL[0, :] = 0
MUL[:, 0] = 0
MUL = np.ascontiguousarray(MUL, dtype=np.uint8)


def gf_mul_bytes(c: int, data: np.ndarray) -> np.ndarray:
    """Scale a byte vector by the field constant ``c``."""
    if c == 0:
        return np.zeros_like(data)
    if c == 1:
        return data.copy()
    return MUL[c][data]


# --- matrices ----------------------------------------------------------------

def cauchy_matrix(k: int, m: int) -> np.ndarray:
    """m x k Cauchy coding matrix with x_i = i, y_j = k + j."""
    if k < 1 or m < 0 or k + m > 255:
        raise DomainError(f"bad coding parameters k={k} m={m}")
    mat = np.zeros((m, k), dtype=np.uint8)
    for j in range(m):
        for i in range(k):
            mat[j, i] = gf_inv(i ^ (k + j))
    return mat


def gf_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over GF(256); b may be a matrix of byte rows."""
    rows, inner = a.shape
    out = np.zeros((rows,) + b.shape[1:], dtype=np.uint8)
    for r in range(rows):
        acc = None
        for c in range(inner):
            coeff = int(a[r, c])
            if coeff == 0:
                continue
            term = gf_mul_bytes(coeff, b[c])
            acc = term if acc is None else acc ^ term
        if acc is not None:
            out[r] = acc
    return out


def gf_mat_inv(mat: np.ndarray) -> np.ndarray:
    """Invert a square matrix over GF(256) by Gauss-Jordan elimination."""
    n = mat.shape[0]
    if mat.shape != (n, n):
        raise DomainError("matrix must be square")
    a = mat.astype(np.int32).tolist()
    inv = [[1 if i == j else 0 for j in range(n)] for i in range(n)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if a[r][col]), None)
        if pivot is None:
            raise DomainError("singular matrix over GF(256)")
        if pivot != col:
            a[col], a[pivot] = a[pivot], a[col]
            inv[col], inv[pivot] = inv[pivot], inv[col]
        pv = gf_inv(a[col][col])
        a[col] = [gf_mul(v, pv) for v in a[col]]
        inv[col] = [gf_mul(v, pv) for v in inv[col]]
        for r in range(n):
            if r == col or not a[r][col]:
                continue
            f = a[r][col]
            a[r] = [v ^ gf_mul(f, w) for v, w in zip(a[r], a[col])]
            inv[r] = [v ^ gf_mul(f, w) for v, w in zip(inv[r], inv[col])]
    return np.array(inv, dtype=np.uint8)


# --- erasure coding ----------------------------------------------------------

def rs_encode(blobs: list[bytes], m: int) -> list[bytes]:
    """Compute m parity sequences over k equal-length data sequences."""
    k = len(blobs)
    if k < 1 or m < 0 or k + m > 255:
        raise DomainError(f"bad coding parameters k={k} m={m}")
    if m == 0:
        return []
    length = len(blobs[0])
    for b in blobs:
        if len(b) != length:
            raise DomainError("data shards must have equal padded length")
    data = np.frombuffer(b"".join(blobs), dtype=np.uint8).reshape(k, length) \
        if length else np.zeros((k, 0), dtype=np.uint8)
    parity = gf_matmul(cauchy_matrix(k, m), data)
    return [parity[j].tobytes() for j in range(m)]


def rs_decode(shards: dict[int, bytes], k: int, m: int) -> list[bytes]:
    """Reconstruct the k originals from any >= k shards keyed by index.

    Indices 0..k-1 are data shards, k..k+m-1 parity. Raises
    InsufficientShards when fewer than k distinct indices are supplied.
    """
    if k < 1 or m < 0 or k + m > 255:
        raise DomainError(f"bad coding parameters k={k} m={m}")
    indices = sorted(shards)
    if any(i < 0 or i >= k + m for i in indices):
        raise DomainError("shard index out of range")
    if len(indices) < k:
        raise InsufficientShards(f"have {len(indices)} shards, need {k}")
    lengths = {len(shards[i]) for i in indices}
    if len(lengths) != 1:
        raise DomainError("shards must have equal length")
    length = lengths.pop()

    use = indices[:k]
    if use == list(range(k)):
        return [shards[i] for i in range(k)]

    cauchy = cauchy_matrix(k, m)
    rows = np.zeros((k, k), dtype=np.uint8)
    for r, idx in enumerate(use):
        if idx < k:
            rows[r, idx] = 1
        else:
            rows[r] = cauchy[idx - k]
    inv = gf_mat_inv(rows)
    stacked = np.frombuffer(b"".join(shards[i] for i in use), dtype=np.uint8)
    stacked = stacked.reshape(k, length) if length else np.zeros((k, 0), dtype=np.uint8)
    originals = gf_matmul(inv, stacked)
    return [originals[i].tobytes() for i in range(k)]


def decode_matrix(survivors: list[int], k: int, m: int) -> np.ndarray:
    """Reconstruction matrix for a fixed survivor set (cacheable by tests)."""
    use = sorted(survivors)[:k]
    if len(use) < k:
        raise InsufficientShards(f"have {len(use)} shards, need {k}")
    cauchy = cauchy_matrix(k, m)
    rows = np.zeros((k, k), dtype=np.uint8)
    for r, idx in enumerate(use):
        if idx < k:
            rows[r, idx] = 1
        else:
            rows[r] = cauchy[idx - k]
    return gf_mat_inv(rows)

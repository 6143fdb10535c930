"""GF(2^8) arithmetic checked against an independent shift-and-xor oracle."""

import pytest
from hypothesis import given, settings, strategies as st

from mcr import gf256
from mcr.errors import DomainError


def clmul_mod(a: int, b: int, poly: int = 0x11D) -> int:
    """Carry-less multiply then reduce mod poly: the independent oracle."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & 0x100:
            a ^= poly
    return r


def test_known_product():
    # Reference step: 0x02 * 0x87 reduces to 0x13 under 0x11D.
    assert clmul_mod(0x02, 0x87) == 0x13
    assert gf256.gf_mul(0x02, 0x87) == 0x13


def test_tables_match_oracle_exhaustively():
    for a in range(256):
        for b in range(256):
            assert gf256.gf_mul(a, b) == clmul_mod(a, b)


def test_inverse():
    for a in range(1, 256):
        assert gf256.gf_mul(a, gf256.gf_inv(a)) == 1
    with pytest.raises(ZeroDivisionError):
        gf256.gf_inv(0)


def test_div_is_mul_by_inverse():
    for a in (0, 1, 7, 0x53, 0xFE):
        for b in (1, 2, 0x87, 0xFF):
            assert gf256.gf_div(a, b) == gf256.gf_mul(a, gf256.gf_inv(b))


def test_bulk_mul_matches_scalar():
    import numpy as np

    data = np.arange(256, dtype=np.uint8)
    for c in (0, 1, 2, 0x1D, 0xFF):
        out = gf256.gf_mul_bytes(c, data)
        for i in range(256):
            assert out[i] == gf256.gf_mul(c, i)


def test_cauchy_matrix_submatrices_invertible():
    # Every k x k submatrix of [I; C] must be invertible; spot-check all
    # survivor sets for a small configuration.
    from itertools import combinations

    import numpy as np

    k, m = 3, 3
    cauchy = gf256.cauchy_matrix(k, m)
    gen = np.vstack([np.eye(k, dtype=np.uint8), cauchy])
    for rows in combinations(range(k + m), k):
        sub = gen[list(rows)]
        inv = gf256.gf_mat_inv(sub)
        assert gf256.gf_matmul(inv, sub).tolist() == np.eye(k, dtype=np.uint8).tolist()


def test_singular_matrix_rejected():
    import numpy as np

    with pytest.raises(DomainError):
        gf256.gf_mat_inv(np.zeros((2, 2), dtype=np.uint8))


def test_k1_m1_parity_equals_data():
    blob = bytes(range(32))
    parity = gf256.rs_encode([blob], 1)
    assert parity[0] == blob
    decoded = gf256.rs_decode({1: parity[0]}, 1, 1)
    assert decoded == [blob]


def test_encode_size_mismatch():
    with pytest.raises(DomainError):
        gf256.rs_encode([b"abcd", b"ab"], 1)


def test_decode_insufficient_shards():
    from mcr.errors import InsufficientShards

    blobs = [bytes([i] * 16) for i in range(4)]
    parity = gf256.rs_encode(blobs, 2)
    shards = {0: blobs[0], 1: blobs[1], 4: parity[0]}
    with pytest.raises(InsufficientShards):
        gf256.rs_decode(shards, 4, 2)


def test_all_survivor_sets_k4_m2():
    from itertools import combinations
    import random

    rng = random.Random(7)
    blobs = [bytes(rng.randrange(256) for _ in range(1024)) for _ in range(4)]
    parity = gf256.rs_encode(blobs, 2)
    shards = dict(enumerate(blobs + parity))
    for rows in combinations(range(6), 4):
        decoded = gf256.rs_decode({i: shards[i] for i in rows}, 4, 2)
        assert decoded == blobs


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 4), st.integers(0, 40),
       st.randoms(use_true_random=False))
def test_roundtrip_property(k, m, length, rng):
    if k + m > 8:
        m = 8 - k
    blobs = [bytes(rng.randrange(256) for _ in range(length)) for _ in range(k)]
    parity = gf256.rs_encode(blobs, m)
    shards = dict(enumerate(blobs + parity))
    # Drop up to m shards deterministically from the RNG.
    drop = rng.sample(range(k + m), m) if m else []
    survivors = {i: shards[i] for i in shards if i not in drop}
    assert gf256.rs_decode(survivors, k, m) == blobs

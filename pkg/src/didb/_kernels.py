"""Hot loops over packed record matrices.

A chunk is held as a C-contiguous ``(n, 46)`` uint8 matrix of ASCII bytes.
Each kernel has a numba implementation and a pure-numpy one; the numba path
is used unless numba is missing or ``DIDB_DISABLE_NUMBA`` is set to a
non-empty value other than ``0``.
"""

from __future__ import annotations

import os

import numpy as np

RECORD_LEN = 46

_flag = os.environ.get("DIDB_DISABLE_NUMBA", "")
_DISABLED = _flag not in ("", "0")

try:
    if _DISABLED:
        raise ImportError("disabled by DIDB_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"


def as_matrix(buf) -> np.ndarray:
    """View raw record bytes as an ``(n, 46)`` matrix without copying."""
    arr = np.frombuffer(buf, dtype=np.uint8)
    if arr.size % RECORD_LEN:
        raise ValueError(f"buffer length {arr.size} is not a multiple of {RECORD_LEN}")
    return arr.reshape(-1, RECORD_LEN)


def key_array(record: bytes) -> np.ndarray:
    return np.frombuffer(record, dtype=np.uint8)


# numpy reference path ---------------------------------------------------

def _first_diff(a: np.ndarray, b: np.ndarray):
    ne = a != b
    col = ne.argmax(axis=1)
    rows = np.arange(a.shape[0])
    return ne.any(axis=1), a[rows, col], b[rows, col]


def np_strictly_ascending(mat: np.ndarray) -> bool:
    if mat.shape[0] < 2:
        return True
    differs, lo, hi = _first_diff(mat[:-1], mat[1:])
    return bool(differs.all() and (lo < hi).all())


def np_contains_many(mat: np.ndarray, keys: np.ndarray) -> np.ndarray:
    if mat.shape[0] == 0:
        return np.zeros(keys.shape[0], dtype=np.bool_)
    # S dtype compares bytewise, which is exact for NUL-free ASCII records
    hay = np.ascontiguousarray(mat).view(f"S{RECORD_LEN}").ravel()
    needles = np.ascontiguousarray(keys).view(f"S{RECORD_LEN}").ravel()
    pos = np.searchsorted(hay, needles)
    pos_c = np.minimum(pos, hay.size - 1)
    return (pos < hay.size) & (hay[pos_c] == needles)


def np_contains(mat: np.ndarray, key: np.ndarray) -> bool:
    return bool(np_contains_many(mat, key.reshape(1, RECORD_LEN))[0])


def np_well_formed(mat: np.ndarray) -> bool:
    if mat.shape[0] == 0:
        return True
    pre = mat[:, :6]
    if ((pre < 48) | (pre > 57)).any():
        return False
    d = pre.astype(np.int32) - 48
    year = d[:, 0] * 1000 + d[:, 1] * 100 + d[:, 2] * 10 + d[:, 3]
    month = d[:, 4] * 10 + d[:, 5]
    if (year < 1800).any() or (month < 1).any() or (month > 12).any():
        return False
    dig = mat[:, 6:]
    ok = ((dig >= 48) & (dig <= 57)) | ((dig >= 97) & (dig <= 102))
    return bool(ok.all())


# numba path -------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _cmp_row(a, i, key):
        for j in range(a.shape[1]):
            x = a[i, j]
            y = key[j]
            if x != y:
                return -1 if x < y else 1
        return 0

    @njit(cache=True, nogil=True)
    def nb_contains(mat, key):
        lo = 0
        hi = mat.shape[0]
        while lo < hi:
            mid = (lo + hi) >> 1
            c = _cmp_row(mat, mid, key)
            if c == 0:
                return True
            if c < 0:
                lo = mid + 1
            else:
                hi = mid
        return False

    @njit(cache=True, nogil=True)
    def nb_contains_many(mat, keys):
        out = np.zeros(keys.shape[0], dtype=np.bool_)
        for k in range(keys.shape[0]):
            out[k] = nb_contains(mat, keys[k])
        return out

    @njit(cache=True, nogil=True)
    def nb_strictly_ascending(mat):
        for i in range(1, mat.shape[0]):
            if _cmp_row(mat, i, mat[i - 1]) <= 0:
                return False
        return True

    @njit(cache=True, nogil=True)
    def nb_well_formed(mat):
        for i in range(mat.shape[0]):
            year = 0
            for j in range(4):
                c = mat[i, j]
                if c < 48 or c > 57:
                    return False
                year = year * 10 + (c - 48)
            m0 = mat[i, 4]
            m1 = mat[i, 5]
            if m0 < 48 or m0 > 57 or m1 < 48 or m1 > 57:
                return False
            month = (m0 - 48) * 10 + (m1 - 48)
            if year < 1800 or month < 1 or month > 12:
                return False
            for j in range(6, mat.shape[1]):
                c = mat[i, j]
                if not ((48 <= c <= 57) or (97 <= c <= 102)):
                    return False
        return True

    def contains(mat, key):
        return bool(nb_contains(mat, key))

    def contains_many(mat, keys):
        return nb_contains_many(mat, keys)

    def strictly_ascending(mat):
        return bool(nb_strictly_ascending(mat))

    def well_formed(mat):
        return bool(nb_well_formed(mat))

else:
    contains = np_contains
    contains_many = np_contains_many
    strictly_ascending = np_strictly_ascending
    well_formed = np_well_formed

"""Little-endian binary readers/writers shared by the artifact file formats."""

from __future__ import annotations

import struct

import numpy as np
import scipy.sparse as sp


class FormatError(ValueError):
    """Bad magic or truncated/inconsistent binary file."""


def write_magic(fh, magic: bytes):
    fh.write(magic)


def check_magic(fh, magic: bytes):
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic: expected {magic!r}, found {got!r}")


def write_u64(fh, *vals):
    fh.write(struct.pack("<" + "Q" * len(vals), *vals))


def read_u64(fh, n=1):
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise FormatError("truncated file")
    vals = struct.unpack("<" + "Q" * n, raw)
    return vals[0] if n == 1 else vals


def write_f64(fh, arr):
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

def read_f64(fh, count):
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise FormatError("truncated file")
    return np.frombuffer(raw, dtype="<f8").copy()


def write_str(fh, s: str):
    data = s.encode("utf-8")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def read_str(fh) -> str:
    raw = fh.read(2)
    if len(raw) != 2:
        raise FormatError("truncated file")
    (n,) = struct.unpack("<H", raw)
    data = fh.read(n)
    if len(data) != n:
        raise FormatError("truncated file")
    return data.decode("utf-8")


def write_named_arrays(path, magic: bytes, arrays: dict):
    """Container: magic, count, then (name, ndim, dims..., f64 data) per array."""
    with open(path, "wb") as fh:
        write_magic(fh, magic)
        write_u64(fh, len(arrays))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=float)
            write_str(fh, name)
            write_u64(fh, arr.ndim, *arr.shape)
            write_f64(fh, arr)


def read_named_arrays(path, magic: bytes) -> dict:
    out = {}
    with open(path, "rb") as fh:
        check_magic(fh, magic)
        count = read_u64(fh)
        for _ in range(count):
            name = read_str(fh)
            ndim = read_u64(fh)
            dims = read_u64(fh, ndim) if ndim else ()
            dims = (dims,) if isinstance(dims, int) else tuple(dims)
            n = int(np.prod(dims)) if dims else 1
            out[name] = read_f64(fh, n).reshape(dims)
    return out


def write_sparse_dict(path, magic: bytes, mats: dict):
    """Named sparse matrices in coordinate format (u64 counts, f64 values)."""
    with open(path, "wb") as fh:
        write_magic(fh, magic)
        write_u64(fh, len(mats))
        for name, mat in mats.items():
            coo = sp.coo_matrix(mat)
            write_str(fh, name)
            write_u64(fh, coo.shape[0], coo.shape[1], coo.nnz)
            fh.write(np.ascontiguousarray(coo.row, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(coo.col, dtype="<u8").tobytes())
            write_f64(fh, coo.data)


def read_sparse_dict(path, magic: bytes) -> dict:
    out = {}
    with open(path, "rb") as fh:
        check_magic(fh, magic)
        count = read_u64(fh)
        for _ in range(count):
            name = read_str(fh)
            nrows, ncols, nnz = read_u64(fh, 3)
            row = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int64)
            col = np.frombuffer(fh.read(8 * nnz), dtype="<u8").astype(np.int64)
            if row.size != nnz or col.size != nnz:
                raise FormatError("truncated file")
            data = read_f64(fh, nnz)
            out[name] = sp.coo_matrix((data, (row, col)), shape=(nrows, ncols)).tocsr()
    return out

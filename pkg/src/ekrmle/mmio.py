"""Matrix Market text I/O for dense matrices and vectors (thin wrapper over
:mod:`scipy.io`)."""
from __future__ import annotations

import io

import numpy as np
import scipy.io
import scipy.sparse

from .errors import ValidationError


def write_matrix(path, A, symmetric=False):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if symmetric and not np.array_equal(A, A.T):
        raise ValidationError("matrix declared symmetric is not exactly symmetric")
    buf = io.BytesIO()
    scipy.io.mmwrite(buf, A, symmetry="symmetric" if symmetric else "general")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def write_vector(path, v):
    write_matrix(path, np.asarray(v, dtype=float).reshape(-1, 1))


def write_covariance(path, S):
    S = np.asarray(S, dtype=float)
    write_matrix(path, 0.5 * (S + S.T), symmetric=True)


def read_matrix(path):
    """Dense ``ndarray`` from an ``array`` or ``coordinate`` Matrix Market file."""
    try:
        A = scipy.io.mmread(path)
    except (ValueError, OSError) as exc:
        raise ValidationError(f"cannot read Matrix Market file {path}: {exc}") from exc
    if scipy.sparse.issparse(A):
        A = A.toarray()
    return np.asarray(A, dtype=float)


def read_vector(path):
    A = read_matrix(path)
    if A.ndim == 2 and 1 not in A.shape:
        raise ValidationError(f"{path} holds a {A.shape} matrix, expected a vector")
    return A.ravel()


def read_covariance(path):
    """Read a covariance matrix; the header must declare symmetry."""
    try:
        info = scipy.io.mminfo(path)
    except (ValueError, OSError) as exc:
        raise ValidationError(f"cannot read Matrix Market file {path}: {exc}") from exc
    if info[5] != "symmetric":
        raise ValidationError(f"{path}: covariance files must declare 'symmetric', found {info[5]!r}")
    return read_matrix(path)

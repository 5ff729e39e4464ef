"""Truncated Fock-space operators for one and two bosonic modes.

Joint operators always use the ordering ``optical ⊗ mechanical``: the joint
basis index of ``|m>_a |n>_b`` is ``m * dim_b + n``. Partial traces, the
Liouvillian block structure and every observable in the package rely on it.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp


class InvalidDimensionError(ValueError):
    """Raised when a Fock-space truncation is too small to be meaningful."""


def _check_dim(dim):
    if int(dim) != dim or dim < 2:
        raise InvalidDimensionError(f"truncation dimension must be an integer >= 2, got {dim!r}")
    return int(dim)


def annihilation(dim):
    """Ladder operator with ``a|n> = sqrt(n)|n-1>`` on ``dim`` Fock states."""
    dim = _check_dim(dim)
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1).astype(complex)


def creation(dim):
    return annihilation(dim).conj().T


def number(dim):
    dim = _check_dim(dim)
    return np.diag(np.arange(dim, dtype=float)).astype(complex)


def quadrature_ops(dim_b):
    """Return ``(q, p)`` with ``q = b + b†`` and ``p = i(b† - b)``.

    In this convention the vacuum has ``<q^2> = <p^2> = 1`` and the canonical
    commutator is ``[q, p] = 2i`` away from the truncation edge.
    """
    b = annihilation(dim_b)
    bd = b.conj().T
    return b + bd, 1j * (bd - b)


def tensor(A, B):
    """Kronecker product with ``A`` acting on the optical (left) factor.

    Returns a CSR matrix; joint-space operators are band sparse.
    """
    return sp.kron(sp.csr_matrix(A), sp.csr_matrix(B), format="csr")


@dataclass(frozen=True)
class JointSpace:
    """Operator factory for the optical ⊗ mechanical space."""

    dim_a: int
    dim_b: int

    def __post_init__(self):
        _check_dim(self.dim_a)
        _check_dim(self.dim_b)

    @property
    def dim(self):
        return self.dim_a * self.dim_b

    @cached_property
    def identity(self):
        return sp.identity(self.dim, dtype=complex, format="csr")

    @cached_property
    def a(self):
        return tensor(annihilation(self.dim_a), np.eye(self.dim_b))

    @cached_property
    def b(self):
        return tensor(np.eye(self.dim_a), annihilation(self.dim_b))

    @cached_property
    def n_a(self):
        return tensor(number(self.dim_a), np.eye(self.dim_b))

    @cached_property
    def n_b(self):
        return tensor(np.eye(self.dim_a), number(self.dim_b))

    @cached_property
    def q(self):
        return tensor(np.eye(self.dim_a), quadrature_ops(self.dim_b)[0])

    @cached_property
    def p(self):
        return tensor(np.eye(self.dim_a), quadrature_ops(self.dim_b)[1])

    def mechanical(self, op):
        """Lift a single-mode mechanical operator to the joint space."""
        return tensor(np.eye(self.dim_a), op)

    def optical(self, op):
        return tensor(op, np.eye(self.dim_b))

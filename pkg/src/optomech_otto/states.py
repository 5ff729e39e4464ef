"""Analysis of joint and single-mode states.

Quadratures follow ``q = b + b†`` and ``p = i(b† - b)``, so vacuum variances
are 1 and the vacuum Wigner function is ``exp(-(q^2 + p^2)/2) / (2π)``.
"""

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp


def partial_trace(rho, dims, keep="mechanical"):
    """Reduce a joint ``optical ⊗ mechanical`` matrix to one mode.

    Args:
        rho: ``(dim_a*dim_b, dim_a*dim_b)`` matrix.
        dims: ``(dim_a, dim_b)``.
        keep: ``"mechanical"`` (trace out the cavity) or ``"optical"``.
    """
    dim_a, dim_b = dims
    rho = np.asarray(rho)
    if rho.shape != (dim_a * dim_b, dim_a * dim_b):
        raise ValueError(f"matrix of shape {rho.shape} does not factor as {dim_a} x {dim_b}")
    r = rho.reshape(dim_a, dim_b, dim_a, dim_b)
    if keep == "mechanical":
        return np.einsum("ijik->jk", r)
    if keep == "optical":
        return np.einsum("ijkj->ik", r)
    raise ValueError(f"keep must be 'mechanical' or 'optical', got {keep!r}")


def thermal_state(dim, nbar):
    """Diagonal thermal state ``p_n ∝ (nbar/(1+nbar))^n`` renormalized on ``dim`` levels."""
    if dim < 1 or nbar < 0:
        raise ValueError(f"need dim >= 1 and nbar >= 0, got dim={dim}, nbar={nbar}")
    ratio = nbar / (1.0 + nbar)
    p = ratio ** np.arange(dim, dtype=float)
    return np.diag(p / p.sum()).astype(complex)


def gibbs_state(H, T):
    """``exp(-H/T) / Z`` on the space of ``H``."""
    H = H.toarray() if sp.issparse(H) else np.asarray(H)
    w, V = np.linalg.eigh(H)
    p = np.exp(-(w - w[0]) / T)
    p /= p.sum()
    return (V * p) @ V.conj().T


def _eigvals(rho):
    rho = np.asarray(rho)
    return np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))


def entropy_vn(rho):
    """Von Neumann entropy in nats with ``0 ln 0 = 0``."""
    lam = _eigvals(rho)
    lam = lam[lam > 1e-300]
    return float(-np.sum(lam * np.log(lam)))


def thermal_entropy(n):
    """Entropy of a thermal mode with mean occupation ``n``."""
    if n <= 0:
        return 0.0
    return float((1 + n) * np.log1p(n) - n * np.log(n))


def _logm_psd(rho, floor=1e-300):
    w, V = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    return (V * np.log(np.clip(w, floor, None))) @ V.conj().T, w


def relative_entropy(rho, sigma):
    """``tr[rho (ln rho - ln sigma)]``; sigma must be full rank."""
    log_s, ws = _logm_psd(np.asarray(sigma))
    if ws.min() <= 0:
        raise ValueError("reference state must be full rank")
    lam = _eigvals(rho)
    lam = lam[lam > 1e-300]
    return float(np.sum(lam * np.log(lam)) - np.real(np.trace(np.asarray(rho) @ log_s)))


def effective_temperature(n_a, omega_eff):
    """``omega_eff / ln(1 + 1/n_a)``; zero photons map to zero temperature."""
    if n_a <= 0:
        return 0.0
    return omega_eff / np.log1p(1.0 / n_a)


def ergotropy(rho, H):
    """Energy above the passive state with the same spectrum as ``rho``."""
    H = H.toarray() if sp.issparse(H) else np.asarray(H)
    rho = np.asarray(rho)
    if rho.shape != H.shape:
        raise ValueError(f"state shape {rho.shape} does not match Hamiltonian shape {H.shape}")
    e, V = np.linalg.eigh(H)
    in_basis = V.conj().T @ rho @ V
    pops = np.real(np.diag(in_basis))
    off = in_basis - np.diag(np.diag(in_basis))
    if np.max(np.abs(off), initial=0.0) < 1e-14 and np.all(np.diff(pops) <= 1e-15):
        # already passive: diagonal with populations non-increasing in energy
        return 0.0
    r = np.sort(_eigvals(rho))[::-1]
    energy = float(np.real(np.trace(rho @ H)))
    return max(energy - float(np.dot(r, e)), 0.0)


def free_energy(rho, H, T):
    H = H.toarray() if sp.issparse(H) else np.asarray(H)
    return float(np.real(np.trace(np.asarray(rho) @ H))) - T * entropy_vn(rho)


def max_extractable_work(rho, H, T):
    """Free-energy excess ``F(rho) - F(rho_G)`` over the Gibbs state of ``H`` at ``T``.

    The Gibbs reference lives on the same truncated space, which keeps the
    result equal to ``T * S(rho || rho_G)``.
    """
    if not T > 0:
        raise ValueError("temperature must be positive")
    return free_energy(rho, H, T) - free_energy(gibbs_state(H, T), H, T)


class QuadratureStats(NamedTuple):
    q: float
    p: float
    q2: float
    p2: float
    min_variance: float
    max_variance: float


def _single_mode_quadratures(dim):
    b = np.diag(np.sqrt(np.arange(1, dim, dtype=float)), 1)
    return b + b.T, 1j * (b.T - b)


def quadrature_stats(rho):
    """Quadrature moments and the extreme rotated-quadrature variances.

    The variance of ``q cos θ + p sin θ`` is a quadratic form in the 2x2
    symmetrized covariance matrix; its eigenvalues are the extremes over θ.
    """
    rho = np.asarray(rho)
    q, p = _single_mode_quadratures(rho.shape[0])
    ev = lambda op: float(np.real(np.trace(rho @ op)))
    mq, mp = ev(q), ev(p)
    q2, p2 = ev(q @ q), ev(p @ p)
    cqp = 0.5 * ev(q @ p + p @ q) - mq * mp
    cov = np.array([[q2 - mq**2, cqp], [cqp, p2 - mp**2]])
    lo, hi = np.linalg.eigvalsh(cov)
    return QuadratureStats(mq, mp, q2, p2, float(lo), float(hi))


@dataclass
class WignerGrid:
    q_axis: np.ndarray
    p_axis: np.ndarray
    values: np.ndarray  # indexed [p, q]
    imag_residue: float = 0.0

    def normalization(self):
        return float(np.trapezoid(np.trapezoid(self.values, self.q_axis, axis=1), self.p_axis))

    def q_marginal(self):
        return np.trapezoid(self.values, self.p_axis, axis=0)

    def p_marginal(self):
        return np.trapezoid(self.values, self.q_axis, axis=1)


def default_axis(rho, points=201, widths=6.0):
    """Symmetric axis spanning ``widths`` standard deviations of the widest quadrature."""
    st = quadrature_stats(rho)
    half = widths * np.sqrt(max(st.max_variance, 1.0)) + max(abs(st.q), abs(st.p))
    return np.linspace(-half, half, points)


def wigner(rho, q_axis, p_axis, check_normalization=True):
    """Wigner function of a single-mode Fock-basis density matrix.

    Uses the displaced-parity expansion: with ``alpha = (q + ip)/2`` and
    ``x = 4|alpha|^2``,

        W = exp(-x/2)/(2π) Σ_{m<=n} ρ_mn (-1)^m (2 alpha)^(n-m)
            sqrt(m!/n!) L_m^(n-m)(x)

    plus the mirrored ``n < m`` terms with conjugated polynomials. The
    imaginary remainder is zero for Hermitian input and is only checked.
    Associated Laguerre polynomials come from the three-term recursion in m
    with the ``(-1)^m sqrt(m!/n!)`` factor folded in, which keeps every term
    of order one for large truncations.
    """
    rho = np.asarray(rho, dtype=complex)
    q_axis = np.asarray(q_axis, dtype=float)
    p_axis = np.asarray(p_axis, dtype=float)
    Q, P = np.meshgrid(q_axis, p_axis)
    alpha = 0.5 * (Q + 1j * P)
    x = 4.0 * np.abs(alpha) ** 2
    dim = rho.shape[0]
    total = np.zeros(Q.shape, dtype=complex)
    two_alpha = 2.0 * alpha
    for k in range(dim):
        # f_m = (-1)^m sqrt(m!/(m+k)!) (2 alpha)^k L_m^(k)(x), iterated in m
        f_prev = np.zeros_like(total)
        f = two_alpha**k / np.sqrt(float(np.prod(np.arange(1, k + 1, dtype=float))))
        for m in range(dim - k):
            total += rho[m, m + k] * f
            if k:
                total += rho[m + k, m] * np.conj(f)
            f_next = -((2 * m + 1 + k - x) * f + np.sqrt(m * (m + k)) * f_prev) / np.sqrt((m + 1) * (m + 1 + k))
            f_prev, f = f, f_next
    values = np.exp(-x / 2.0) / (2.0 * np.pi) * total
    residue = float(np.max(np.abs(values.imag))) if values.size else 0.0
    if residue > 1e-10:
        warnings.warn("Wigner function has a non-negligible imaginary part", RuntimeWarning, stacklevel=2)
    grid = WignerGrid(q_axis, p_axis, values.real, residue)
    if check_normalization and len(q_axis) > 1 and len(p_axis) > 1:
        norm = grid.normalization()
        if abs(norm - 1.0) > 1e-3:
            warnings.warn(
                f"Wigner grid captures {norm:.4f} of the state; widen the axes",
                RuntimeWarning,
                stacklevel=2,
            )
    return grid

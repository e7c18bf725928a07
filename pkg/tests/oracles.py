"""Independent reference computations used only by the tests.

None of these reuse the package's assembly code paths.
"""
import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply
from scipy.special import jv


def free_propagator(x, t, c=0.0):
    """e^{-it(L+c)}δ₀ at x for h(±1)=1 on Z: (-i)^x J_x(2t) e^{-ict}."""
    x = np.asarray(x)
    return (-1j) ** x * jv(x, 2 * t) * np.exp(-1j * c * t)


def joint_density_mean(U, rates, hop, rho0, t, R):
    """E ρ_t on the open box [-R, R] in d=1 for the jiggling potential.

    Evolves Φ_b(t) = E[ρ_t ; ω(t) = b] with the forward equation
    ∂_t Φ_b = -i[H_b, Φ_b] + Σ_a Φ_a Q(a, b), then sums over b.
    ``hop`` maps offsets to amplitudes; ``rho0`` maps (x, y) to values.
    """
    N = len(U)
    M = rates.shape[0]
    sites = np.arange(-R, R + 1)
    n = len(sites)
    H0 = np.zeros((n, n), complex)
    for z, a in hop.items():
        for i in range(n):
            j = i - z
            if 0 <= j < n:
                H0[i, j] += a
    Hs = [H0 + np.diag([U[(x - w) % N] for x in sites]) for w in range(M)]
    I = np.eye(n)
    blocks = [[None] * M for _ in range(M)]
    for b in range(M):
        for a in range(M):
            blk = rates[a, b] * sp.identity(n * n, format="csr", dtype=complex)
            if a == b:
                blk = blk - 1j * sp.csr_matrix(np.kron(Hs[b], I) - np.kron(I, Hs[b].T))
            blocks[b][a] = blk
    big = sp.bmat(blocks, format="csr")
    r0 = np.zeros((n, n), complex)
    for (x, y), v in rho0.items():
        r0[x + R, y + R] += v
    mu = np.full(M, 1.0 / M)
    phi = expm_multiply(big * t, np.concatenate([mu[a] * r0.ravel() for a in range(M)]))
    return sites, sum(phi[a * n * n:(a + 1) * n * n] for a in range(M)).reshape(n, n)


def r1_stencil(k, p):
    """K̃_{k,p} for R1 written out entry by entry (3 sites × 3 walk states)."""
    N = M = 3
    K = np.zeros((9, 9), complex)
    for x in range(N):
        for w in range(M):
            row = 3 * x + w
            for z in (1, -1):
                src = (x - z) % N
                K[row, 3 * src + w] += np.exp(1j * p * z)
                K[row, 3 * src + (w - z) % M] -= np.exp(1j * p * z) * np.exp(-1j * k * z)
    return K


def cyclic_rates(N, forward, backward):
    Q = np.zeros((N, N))
    for w in range(N):
        Q[w, (w + 1) % N] += forward
        Q[w, (w - 1) % N] += backward
    np.fill_diagonal(Q, 0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q

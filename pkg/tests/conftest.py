"""Shared fixtures and independent numerical oracles.

The oracles here deliberately avoid the code paths they check: explicit DFT
sums, Gaussian elimination by hand, a cyclic Jacobi eigensolver and
double-loop covariance sums.
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from beamkit.scene import ArrayGeometry, NoiseSpec, SceneSpec, SourceSpec, synthesize


# PASS/FAIL lines from test_acceptance.py, printed in the terminal summary
ACCEPTANCE: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


# -- random instances ------------------------------------------------------

def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2)


def rand_hpd(rng, m, cond_floor=0.1):
    """Random Hermitian positive-definite matrix with eigenvalues >= cond_floor."""
    q, _ = np.linalg.qr(crandn(rng, m, m))
    ev = cond_floor + rng.uniform(0, 2, m)
    return (q * ev) @ q.conj().T


def rand_hermitian(rng, m):
    a = crandn(rng, m, m)
    return 0.5 * (a + a.conj().T)


def unit(v):
    return v / np.linalg.norm(v)


# -- oracles ---------------------------------------------------------------

def brute_dft(frame):
    """One-sided DFT by explicit summation."""
    n = len(frame)
    out = np.zeros(n // 2 + 1, complex)
    for k in range(n // 2 + 1):
        s = 0j
        for t in range(n):
            s += frame[t] * complex(math.cos(-2 * math.pi * k * t / n),
                                    math.sin(-2 * math.pi * k * t / n))
        out[k] = s
    return out


def gauss_solve(a, b):
    """Gaussian elimination with partial pivoting, pure Python loops."""
    a = [list(map(complex, row)) for row in np.asarray(a)]
    b = list(map(complex, np.asarray(b)))
    n = len(b)
    for c in range(n):
        p = max(range(c, n), key=lambda r: abs(a[r][c]))
        a[c], a[p] = a[p], a[c]
        b[c], b[p] = b[p], b[c]
        for r in range(c + 1, n):
            f = a[r][c] / a[c][c]
            for j in range(c, n):
                a[r][j] -= f * a[c][j]
            b[r] -= f * b[c]
    x = [0j] * n
    for r in range(n - 1, -1, -1):
        x[r] = (b[r] - sum(a[r][j] * x[j] for j in range(r + 1, n))) / a[r][r]
    return np.array(x)


def jacobi_eigh(h, sweeps=60):
    """Eigenpairs of a complex Hermitian matrix via cyclic Jacobi rotations on
    its real symmetric embedding ``[[Re, -Im], [Im, Re]]``.

    Every eigenvalue appears twice in the embedding; the returned vectors are
    complex ``a + jb`` recovered from the real ``(a, b)`` halves.
    """
    m = h.shape[0]
    s = np.block([[h.real, -h.imag], [h.imag, h.real]]).astype(float)
    n = 2 * m
    v = np.eye(n)
    for _ in range(sweeps):
        off = np.sqrt(max(0.0, np.sum(s ** 2) - np.sum(np.diag(s) ** 2)))
        if off < 1e-15 * np.linalg.norm(s):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(s[p, q]) < 1e-300:
                    continue
                theta = (s[q, q] - s[p, p]) / (2 * s[p, q])
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta ** 2 + 1))
                c = 1 / math.sqrt(t ** 2 + 1)
                sn = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = sn
                rot[q, p] = -sn
                s = rot.T @ s @ rot
                v = v @ rot
    ev = np.diag(s)
    vecs = v[:m] + 1j * v[m:]
    return ev, vecs


def naive_scm(x, phi=None):
    """Double-loop ``1/T sum phi x x^H`` for an ``(M, T, K)`` array."""
    m, t_len, k_len = x.shape
    out = np.zeros((k_len, m, m), complex)
    for k in range(k_len):
        for t in range(t_len):
            w = 1.0 if phi is None else phi[t, k]
            for i in range(m):
                for j in range(m):
                    out[k, i, j] += w * x[i, t, k] * np.conj(x[j, t, k])
    return out / t_len


def kkt_noise_row(vz, h, a_m):
    """One null-constrained noise row by solving the bordered system
    ``[[Vz, h], [h^H, 0]] [w; mu] = [a_m; 0]`` directly, then scaling so that
    ``w^H Vz w = 1``."""
    m = vz.shape[0]
    big = np.zeros((m + 1, m + 1), complex)
    big[:m, :m] = vz
    big[:m, m] = h
    big[m, :m] = h.conj()
    rhs = np.zeros(m + 1, complex)
    rhs[:m] = a_m
    w = gauss_solve(big, rhs)[:m]
    return w / math.sqrt(float(np.real(w.conj() @ vz @ w)))


def scripted_si_sdr(est, ref):
    """SI-SDR by explicit sums in plain Python floats."""
    est = [float(v) for v in est]
    ref = [float(v) for v in ref]
    a = math.fsum(e * r for e, r in zip(est, ref)) / math.fsum(r * r for r in ref)
    tgt = math.fsum((a * r) ** 2 for r in ref)
    err = math.fsum((e - a * r) ** 2 for e, r in zip(est, ref))
    return 10 * math.log10(tgt / err)


# -- scenes ----------------------------------------------------------------

def small_scene(seed=0, doa=20.0, snr_db=5.0, duration=2.0, diffuse=1.0, moves=(), **kw):
    spec = SceneSpec(
        geometry=ArrayGeometry(4, 0.05),
        sources=[SourceSpec(doa=doa, moves=list(moves))],
        noise=NoiseSpec(diffuse=diffuse),
        snr_db=snr_db, duration=duration, seed=seed, **kw,
    )
    return synthesize(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

"""Independent reference values frozen into the Rust test fixtures.

Run with `python3 oracles/derive.py`; prints the constants used by
crates/core/tests/fixtures.rs.
"""
import numpy as np
from mpmath import mp, mpf, acos, cos, sin, sqrt

mp.dps = 40
OMEGA = acos(sqrt(mpf("1e-3")))


def coefficients(t):
    mu = cos(OMEGA * t) ** 2
    return float(mu), float(sqrt(1 - mu**2))


def chain_cov(n, a, q, p0):
    v = np.empty(n)
    v[0] = p0
    for i in range(1, n):
        v[i] = a * a * v[i - 1] + q
    c = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            lo = min(i, j)
            c[i, j] = a ** abs(i - j) * v[lo]
    return c


def composed_matrix(sig_t, k):
    """Linear map x -> composed score for a Gaussian with covariance sig_t."""
    n = sig_t.shape[0]
    b = np.zeros((n, n))
    last = n - 2 * k - 1
    for i in range(n):
        if i <= k:
            start = 0
        elif i + k + 1 >= n:
            start = last
        else:
            start = i - k
        w = slice(start, start + 2 * k + 1)
        prec = np.linalg.inv(sig_t[w, w])
        b[i, w] = -prec[i - start]
    return b


def composition_error(t, k, n=16, a=0.9, q=0.1, p0=1.0):
    mu, sigma = coefficients(t)
    sig_t = mu**2 * chain_cov(n, a, q, p0) + sigma**2 * np.eye(n)
    exact = -np.linalg.inv(sig_t)
    diff = composed_matrix(sig_t, k) - exact
    num = np.trace(diff @ sig_t @ diff.T)
    den = np.trace(exact @ sig_t @ exact.T)
    return float(np.sqrt(num / den))


def guidance_errors(t, r2):
    mu, sigma = coefficients(t)
    c_exact = sigma**2 + r2
    c_sda = r2 + sigma**2 / mu**2 * 0.5
    c_dps = r2
    # likelihood score is mu (y - mu x) / C; relative error is |C_exact / C - 1|
    return abs(c_exact / c_sda - 1.0), abs(c_exact / c_dps - 1.0)


if __name__ == "__main__":
    grid = [i / 10 for i in range(1, 10)]
    print("composition k=2 relative error per t (L=16, a=0.9, q=0.1, p0=1):")
    for t in grid:
        print(f"  t={t:.1f}  {composition_error(t, 2):.6e}")
    print("composition relative error at t=0.5 for k=1..5:")
    for k in range(1, 6):
        print(f"  k={k}  {composition_error(0.5, k):.6e}")
    for r2 in (0.25, 0.01):
        print(f"guidance relative errors (N(0,1) prior, identity, r^2={r2}, Gamma=1/2):")
        for t in grid:
            s, d = guidance_errors(t, r2)
            print(f"  t={t:.1f}  sda {s:.6e}  dps {d:.6e}")
    print("schedule at t=0.5:", [repr(v) for v in coefficients(mpf("0.5"))])

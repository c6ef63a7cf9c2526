"""Dense reference matrices for the staggered-grid operators.

Built from the 1D stencils with Kronecker products, independently of the
matrix-free code in ``wgflow.grid``.  Ordering is x-fastest for cells and,
for the momentum, x-faces first then y-faces, each x-fastest.
"""

import numpy as np
import pytest

from wgflow.grid import GridSpec


def div_1d(n, h):
    """(n, n-1) divergence: interior faces to cells, zero flux at the ends."""
    a = np.zeros((n, n - 1))
    for j in range(n - 1):
        a[j, j] = 1.0
        a[j + 1, j] = -1.0
    return a / h


def avg_1d(n):
    b = np.zeros((n, n - 1))
    for j in range(n - 1):
        b[j, j] = 0.5
        b[j + 1, j] = 0.5
    return b


def dense_div(g: GridSpec):
    a = div_1d(g.n, g.h)
    if g.dim == 1:
        return a
    eye = np.eye(g.n)
    # x varies fastest: kron(I_y, A_x) acts on x-faces, kron(A_y, I_x) on y-faces
    return np.hstack([np.kron(eye, a), np.kron(a, eye)])


def dense_avg(g: GridSpec):
    """Stacked (dim * N, F) averaging matrix, component-major."""
    b = avg_1d(g.n)
    if g.dim == 1:
        return b
    eye = np.eye(g.n)
    nf = (g.n - 1) * g.n
    top = np.hstack([np.kron(eye, b), np.zeros((g.size, nf))])
    bottom = np.hstack([np.zeros((g.size, nf)), np.kron(b, eye)])
    return np.vstack([top, bottom])


def flat_m(m):
    return np.concatenate([a.ravel() for a in m])


def unflat_m(v, g: GridSpec):
    out, k = [], 0
    for q in range(g.dim):
        shape = g.face_shape(q)
        size = int(np.prod(shape))
        out.append(v[k:k + size].reshape(shape))
        k += size
    return tuple(out)


def random_m(g: GridSpec, rng):
    return tuple(rng.standard_normal(g.face_shape(q)) for q in range(g.dim))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --------------------------------------------------------------------------
# acceptance report: one line per criterion in the terminal summary

ACCEPTANCE = []


@pytest.fixture
def report():
    def add(criterion, ok, detail=""):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE.append(line)
        print(line)
        return ok

    return add


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)

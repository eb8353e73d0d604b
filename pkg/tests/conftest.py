import numpy as np
import pytest

from adiposeg import _kernels


def conv3d_loops(x, w, b=None, stride=1, dilation=1, padding=0):
    """Direct definition of cross-correlation, one output voxel at a time
    along the channel/kernel sums (vectorized only over batch)."""
    N, C, Z, Y, X = x.shape
    O, _, kz, ky, kx = w.shape
    xp = np.pad(x, [(0, 0), (0, 0)] + [(padding, padding)] * 3)
    oz, oy, ox = ((n + 2 * padding - dilation * (k - 1) - 1) // stride + 1 for n, k in zip((Z, Y, X), (kz, ky, kx)))
    out = np.zeros((N, O, oz, oy, ox), dtype=np.float64)
    for o in range(O):
        for i in range(oz):
            for j in range(oy):
                for k in range(ox):
                    acc = np.zeros(N)
                    for c in range(C):
                        for a in range(kz):
                            for bb in range(ky):
                                for cc in range(kx):
                                    acc += w[o, c, a, bb, cc] * xp[:, c, i * stride + a * dilation,
                                                                  j * stride + bb * dilation,
                                                                  k * stride + cc * dilation]
                    out[:, o, i, j, k] = acc
        if b is not None:
            out[:, o] += b[o]
    return out


@pytest.fixture(params=["cython", "numpy"])
def backend(request):
    """Run a test once per kernel backend; skips cython if it is not built."""
    before = _kernels.backend_name()
    if request.param == "cython":
        try:
            _kernels.set_backend("cython")
        except ImportError:
            pytest.skip("compiled kernels not built")
    else:
        _kernels.set_backend("numpy")
    yield request.param
    _kernels.set_backend(before)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

"""Hot loops used by the recurrent layers and the convolution adjoint.

The compiled extension is used when it imports; otherwise the NumPy
reference runs.  Set ``REACT_KERNELS=python`` to force the fallback.
"""

import os

from . import _reference

BACKEND = "python"
_impl = _reference

if os.environ.get("REACT_KERNELS", "").lower() not in ("python", "py", "numpy"):
    try:
        from . import _compiled as _impl  # noqa: F811
        BACKEND = "compiled"
    except ImportError:
        _impl = _reference


def use(backend):
    """Switch the active backend (``"compiled"`` or ``"python"``) at runtime."""
    global BACKEND, _impl
    if backend == "python":
        _impl = _reference
    elif backend == "compiled":
        from . import _compiled
        _impl = _compiled
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")
    BACKEND = backend


def available():
    try:
        from . import _compiled  # noqa: F401
    except ImportError:
        return ["python"]
    return ["compiled", "python"]


def col2im_1d(cols, length, stride):
    return _impl.col2im_1d(cols, length, stride)


def gru_scan_forward(xp, u, reverse):
    return _impl.gru_scan_forward(xp, u, reverse)


def gru_scan_backward(dhs, u, cache, reverse):
    return _impl.gru_scan_backward(dhs, u, cache, reverse)


def decoder_scan_forward(fproj, wp, u1, w2, u2, b2, wh, bh, pose0, tracking,
                         switch, scale):
    return _impl.decoder_scan_forward(fproj, wp, u1, w2, u2, b2, wh, bh, pose0,
                                      tracking, switch, scale)


def decoder_scan_backward(dposes, wp, u1, w2, u2, wh, cache, tracking, switch,
                          scale):
    return _impl.decoder_scan_backward(dposes, wp, u1, w2, u2, wh, cache,
                                       tracking, switch, scale)

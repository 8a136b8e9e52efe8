"""Backend selection for the per-example kernels.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used.  ``use_backend`` switches explicitly (tests and the
benchmark run both).
"""
import numpy as np

from avucal import _kernels_py

try:
    from avucal import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py


def compiled_available() -> bool:
    return _compiled is not None


def backend() -> str:
    return "compiled" if _impl is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> None:
    global _impl
    if name == "python":
        _impl = _kernels_py
    elif name == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _compiled
    else:
        raise ValueError(f"unknown backend {name!r}")


def _f64(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _u8(x):
    return np.ascontiguousarray(x, dtype=np.uint8)


def entropy_rows(probs, eps=1e-12):
    return _impl.entropy_rows(_f64(probs), float(eps))


def hard_counts(correct, u, u_th):
    """Counts (AC, AU, IC, IU); uncertain means ``u > u_th``."""
    return _impl.hard_counts(_u8(correct), _f64(u), float(u_th))


def soft_counts_forward(p, t, correct, uncertain):
    return _impl.soft_counts_forward(_f64(p), _f64(t), _u8(correct), _u8(uncertain))


def soft_counts_backward(p, t, correct, uncertain, g):
    return _impl.soft_counts_backward(_f64(p), _f64(t), _u8(correct), _u8(uncertain), _f64(g))


def binned_sums(values, targets, n_bins):
    return _impl.binned_sums(_f64(values), _f64(targets), int(n_bins))


def average_ranks(x):
    return _impl.average_ranks(_f64(x))

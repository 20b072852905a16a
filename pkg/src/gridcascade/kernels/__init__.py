"""Hot numerical kernels with a compiled core and a pure-Python fallback.

The Cython extension ``_core`` is used when it was built; otherwise the
numpy implementation in ``_fallback`` takes over transparently. Both
expose the same functions and agree numerically (see the kernel parity
tests); ``BACKEND`` reports which one is active.
"""

try:
    from . import _core as _impl

    BACKEND = "compiled"
except ImportError:  # pragma: no cover - depends on build environment
    from . import _fallback as _impl

    BACKEND = "fallback"

from . import _fallback

bus_powers = _impl.bus_powers
mismatch_jacobian = _impl.mismatch_jacobian


def use_backend(name):
    """Force a backend ("compiled" or "fallback"); used by benchmarks/tests.

    Returns the previous backend name. Raises ValueError if the compiled
    core was requested but is not available.
    """
    global bus_powers, mismatch_jacobian, BACKEND
    prev = BACKEND
    if name == "fallback":
        mod = _fallback
    elif name == "compiled":
        try:
            from . import _core as mod
        except ImportError as exc:
            raise ValueError("compiled kernel core is not available") from exc
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    bus_powers = mod.bus_powers
    mismatch_jacobian = mod.mismatch_jacobian
    BACKEND = name
    return prev

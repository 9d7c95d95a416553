"""Numeric kernels for the tabular model family.

Two interchangeable backends: a Cython extension compiled at install
time and a NumPy fallback. Import picks the extension when present;
setting DESKMT_PURE=1 forces the fallback (the parity tests and the
benchmark both rely on that switch).
"""

import os

from . import pure

BACKEND = "pure"
impl = pure

if os.environ.get("DESKMT_PURE") != "1":
    try:
        from . import kernels as impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        pass

build_m = impl.build_m
scatter_shift = impl.scatter_shift
step_logprob = impl.step_logprob
step_grad = impl.step_grad
sample_steps = impl.sample_steps

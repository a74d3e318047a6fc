"""Kernel backend selection.

The hot loops (convolution and pooling forward/backward) exist twice with
identical signatures and semantics: a compiled Cython extension
(``_cykernels``) and a pure-numpy fallback (``_npkernels``).

The ``compiled`` backend routes each call to where it is fastest: grouped
(depthwise) convolutions and pooling go to the extension's direct loops,
while dense ``groups == 1`` convolutions keep the patch-matrix/BLAS path
(a hand-rolled triple loop cannot compete with a tuned GEMM there). The
``numpy`` backend is the pure fallback, selected automatically when the
extension is missing, or explicitly via ``CELLSEARCH_KERNEL=numpy``.

``benchmarks/bench_kernels.py`` in the repository compares the two.
"""

import os

from . import _npkernels

try:
    from . import _cykernels
except ImportError:
    _cykernels = None

# The matmuls behind these kernels are tiny (tens of channels, a few
# thousand positions); BLAS worker threads cost far more in synchronization
# than they recover, so cap BLAS at one thread unless the user overrides.
try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=int(os.environ.get("CELLSEARCH_BLAS_THREADS", "1")), user_api="blas")
except ImportError:
    pass

_requested = os.environ.get("CELLSEARCH_KERNEL", "").strip().lower()
if _requested and _requested not in ("numpy", "compiled"):
    raise ValueError(f"CELLSEARCH_KERNEL must be 'numpy' or 'compiled', got {_requested!r}")
if _requested == "compiled" and _cykernels is None:
    raise ImportError("CELLSEARCH_KERNEL=compiled but the extension is not built")

out_dim = _npkernels.out_dim

if _cykernels is None or _requested == "numpy":
    BACKEND = "numpy"
    conv2d_forward = _npkernels.conv2d_forward
    conv2d_backward_input = _npkernels.conv2d_backward_input
    conv2d_backward_weight = _npkernels.conv2d_backward_weight
    maxpool2d_forward = _npkernels.maxpool2d_forward
    maxpool2d_backward = _npkernels.maxpool2d_backward
    avgpool2d_forward = _npkernels.avgpool2d_forward
    avgpool2d_backward = _npkernels.avgpool2d_backward
else:
    BACKEND = "compiled"

    def conv2d_forward(x, w, stride, padding, dilation, groups):
        impl = _cykernels if groups > 1 else _npkernels
        return impl.conv2d_forward(x, w, stride, padding, dilation, groups)

    def conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups):
        impl = _cykernels if groups > 1 else _npkernels
        return impl.conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups)

    def conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups):
        impl = _cykernels if groups > 1 else _npkernels
        return impl.conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups)

    maxpool2d_forward = _cykernels.maxpool2d_forward
    maxpool2d_backward = _cykernels.maxpool2d_backward
    avgpool2d_forward = _cykernels.avgpool2d_forward
    avgpool2d_backward = _cykernels.avgpool2d_backward


def available_backends():
    names = ["numpy"]
    if _cykernels is not None:
        names.append("compiled")
    return names

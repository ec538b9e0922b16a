"""Scoped flush-to-zero for subnormal floats on x86-64.

Late in training many gradients fall into the float32 subnormal range, where
every multiply takes a slow microcode path (several times slower per
element).  Setting the FTZ and DAZ bits of MXCSR treats those values as zero,
which changes no result that matters at float32 precision.  The register is
per thread, so this covers numpy, numba kernels and single-threaded BLAS on
the calling thread; it is restored on exit.
"""

import contextlib
import platform

_FTZ_DAZ = 0x8040
_supported = platform.machine().lower() in ("x86_64", "amd64")

if _supported:
    import llvmlite.ir as ir
    from numba import njit, types
    from numba.core import cgutils
    from numba.extending import intrinsic

    def _csr_call(builder, name, slot):
        ptr = ir.IntType(8).as_pointer()
        fn = cgutils.get_or_insert_function(
            builder.module, ir.FunctionType(ir.VoidType(), [ptr]), name)
        builder.call(fn, [builder.bitcast(slot, ptr)])

    @intrinsic
    def _stmxcsr(typingctx):
        def codegen(context, builder, sig, args):
            slot = cgutils.alloca_once(builder, ir.IntType(32))
            _csr_call(builder, "llvm.x86.sse.stmxcsr", slot)
            return builder.load(slot)
        return types.uint32(), codegen

    @intrinsic
    def _ldmxcsr(typingctx, value):
        def codegen(context, builder, sig, args):
            slot = cgutils.alloca_once(builder, ir.IntType(32))
            builder.store(args[0], slot)
            _csr_call(builder, "llvm.x86.sse.ldmxcsr", slot)
            return context.get_dummy_value()
        return types.none(types.uint32), codegen

    @njit(cache=True)
    def _get_csr():
        return _stmxcsr()

    @njit(cache=True)
    def _set_csr(value):
        _ldmxcsr(value)


@contextlib.contextmanager
def flush_subnormals(enabled=True):
    """Run the body with subnormal inputs and results flushed to zero."""
    if not (enabled and _supported):
        yield
        return
    old = _get_csr()
    _set_csr(old | _FTZ_DAZ)
    try:
        yield
    finally:
        _set_csr(old)

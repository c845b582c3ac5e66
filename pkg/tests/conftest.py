import os

# single-threaded BLAS: the suite is dominated by small dense solves where
# thread-pool sync costs dwarf the arithmetic (must precede numpy import)
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

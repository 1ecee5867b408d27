import os

# One BLAS thread per worker: timing tests compare sequential vs parallel
# execution and must not let the linear-algebra backend parallelize under
# the sequential arm.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS", "BLIS_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

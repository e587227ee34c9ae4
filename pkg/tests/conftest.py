import os

# Pin BLAS threading before numpy loads anywhere: tiny matrices gain nothing
# from threads and single-threaded kernels keep runs bitwise reproducible.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import os

# Pin BLAS threading before numpy is first imported so reduction order, and
# therefore every numeric output, is reproducible bit for bit across runs.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

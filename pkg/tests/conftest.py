import os

# keep numeric kernels single threaded: deterministic, and the acceptance
# runtime bounds assume one core
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

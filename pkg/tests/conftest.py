# The GEMMs in this package are small enough that BLAS thread fan-out costs
# more than it saves (measured ~1.6x slower with 2 threads); pin to one
# thread so the timed acceptance suites fit their budgets.
try:
    import threadpoolctl

    threadpoolctl.threadpool_limits(1)
except ImportError:
    pass

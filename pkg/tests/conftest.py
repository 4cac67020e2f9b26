import os

# Must happen before numba is first imported anywhere in the test run, so the
# thread pool can be sized above the sandbox's visible CPU count.
os.environ.setdefault("NUMBA_NUM_THREADS", "8")

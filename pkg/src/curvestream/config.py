"""Process-wide knobs.

Worker-thread counts are read from the CURVESTREAM_THREADS environment
variable.  The default of 1 keeps fits single-threaded, which is what the
benchmark harness wants for reproducible timings; per-group work is
embarrassingly parallel and deterministic either way because results land
in preallocated, positionally fixed slots.
"""

import os


def max_workers() -> int:
    """Worker-thread cap from CURVESTREAM_THREADS (default 1, minimum 1)."""
    raw = os.environ.get("CURVESTREAM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)

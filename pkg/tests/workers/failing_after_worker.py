#!/usr/bin/env python3
"""Echo worker that starts raising after argv[1] successful invocations."""
import sys

from servehub.workers import serve

LIMIT = None
CALLS = 0


def run(inputs):
    global CALLS
    CALLS += 1
    if CALLS > LIMIT:
        raise RuntimeError(f"worker budget of {LIMIT} calls exhausted")
    return list(inputs)


if __name__ == "__main__":
    LIMIT = int(sys.argv[1])
    serve(run)

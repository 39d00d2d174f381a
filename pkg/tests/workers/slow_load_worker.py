#!/usr/bin/env python3
"""Echo worker whose model load takes argv[1] seconds."""
import sys
import time

from servehub.workers import serve

if __name__ == "__main__":
    delay_s = float(sys.argv[1])
    serve(lambda inputs: list(inputs), load=lambda: time.sleep(delay_s))

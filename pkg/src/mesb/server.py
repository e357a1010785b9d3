"""Reference external denoiser server.

Run as ``python -m mesb.server --mode gaussian --mu0 0.5 --s0sq 0.1``.  It reads
request frames from stdin and answers each on stdout, flushing after every
reply, until stdin closes.  ``--mode zero`` answers eps = 0 (an echo test
server); ``--mode gaussian`` evaluates the Gaussian posterior-mean denoiser
with a constant prior mean.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import protocol
from .denoise import Conditioning, GaussianAnalyticDenoiser
from .schedule import DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_N_BASE, make_symmetric_beta


def build_handler(args):
    if args.mode == "zero":
        return lambda x_t, t, x_corrupt: np.zeros_like(x_t)
    schedule = make_symmetric_beta(args.beta_min, args.beta_max, args.n_base)

    def gaussian(x_t, t, x_corrupt):
        den = GaussianAnalyticDenoiser(np.full(x_t.shape, args.mu0), args.s0sq, schedule)
        return den.predict_eps(x_t, t, Conditioning(x_corrupt))

    return gaussian


def serve(handler, stdin=None, stdout=None) -> int:
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    read = protocol.exact_reader(stdin)
    while True:
        try:
            x_t, t, x_corrupt = protocol.read_request(read)
        except EOFError:
            return 0
        except protocol.ProtocolError as exc:
            stdout.write(protocol.encode_error(str(exc)))
            stdout.flush()
            return 1
        try:
            reply = protocol.encode_eps_reply(handler(x_t, t, x_corrupt))
        except Exception as exc:  # reported to the client, server keeps going
            reply = protocol.encode_error(f"{type(exc).__name__}: {exc}")
        stdout.write(reply)
        stdout.flush()


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m mesb.server", description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=["zero", "gaussian"], default="gaussian")
    p.add_argument("--mu0", type=float, default=0.5)
    p.add_argument("--s0sq", type=float, default=0.1)
    p.add_argument("--beta-min", type=float, default=DEFAULT_BETA_MIN)
    p.add_argument("--beta-max", type=float, default=DEFAULT_BETA_MAX)
    p.add_argument("--n-base", type=int, default=DEFAULT_N_BASE)
    args = p.parse_args(argv)
    return serve(build_handler(args))


if __name__ == "__main__":
    sys.exit(main())

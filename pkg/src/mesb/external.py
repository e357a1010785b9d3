"""Denoiser backed by a subprocess speaking the binary frame protocol."""

from __future__ import annotations

import collections
import logging
import os
import selectors
import shlex
import subprocess
import threading
import time

import numpy as np

from . import protocol
from .denoise import Conditioning, Denoiser
from .errors import ExternalDenoiserError, ProtocolError

log = logging.getLogger(__name__)


class ExternalDenoiser(Denoiser):
    """eps_hat computed by a child process; one request in flight at a time.

    Any failure (child exit, malformed frame, timeout) kills the child and
    raises ExternalDenoiserError carrying the exit status and the tail of its
    stderr.  A dead denoiser stays dead; build a new one to retry.
    """

    has_vjp = False

    def __init__(self, command_line, timeout_ms: int = 10_000):
        self.argv = shlex.split(command_line) if isinstance(command_line, str) else list(command_line)
        if not self.argv:
            raise ExternalDenoiserError("empty denoiser command line")
        self.timeout = timeout_ms / 1000.0
        self._lock = threading.Lock()
        self._stderr_tail = collections.deque(maxlen=50)
        self._failure = None
        try:
            self.proc = subprocess.Popen(
                self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE, bufsize=0,
            )
        except OSError as exc:
            raise ExternalDenoiserError(f"cannot start denoiser {self.argv!r}: {exc}") from exc
        os.set_blocking(self.proc.stdin.fileno(), False)
        os.set_blocking(self.proc.stdout.fileno(), False)
        self._stderr_thread = threading.Thread(target=self._drain_stderr, daemon=True)
        self._stderr_thread.start()

    def _drain_stderr(self):
        for line in iter(self.proc.stderr.readline, b""):
            self._stderr_tail.append(line.decode("utf-8", errors="replace").rstrip())

    def diagnostics(self) -> str:
        code = self.proc.poll()
        status = "running" if code is None else f"exit status {code}"
        if code is not None:
            self._stderr_thread.join(timeout=0.2)
        tail = "\n".join(self._stderr_tail)
        return f"command: {shlex.join(self.argv)}\nstatus: {status}\nstderr tail:\n{tail}"

    def _fail(self, message, exc_type=ExternalDenoiserError):
        self._kill()
        self._failure = message
        raise exc_type(message, self.diagnostics())

    def _kill(self):
        if self.proc.poll() is None:
            self.proc.kill()
        try:
            self.proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            log.warning("denoiser process %s did not exit after kill", self.proc.pid)

    def _write_all(self, data: bytes, deadline: float):
        fd = self.proc.stdin.fileno()
        view = memoryview(data)
        with selectors.DefaultSelector() as sel:
            sel.register(fd, selectors.EVENT_WRITE)
            while view:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._fail(f"timed out after {self.timeout:.3f}s writing request")
                if not sel.select(remaining):
                    continue
                try:
                    n = os.write(fd, view)
                except BlockingIOError:
                    continue
                except (BrokenPipeError, OSError) as exc:
                    self._fail(f"denoiser closed its input: {exc}")
                view = view[n:]

    def _reader(self, deadline: float):
        fd = self.proc.stdout.fileno()
        sel = selectors.DefaultSelector()
        sel.register(fd, selectors.EVENT_READ)

        def read(n: int) -> bytes:
            chunks = []
            while n > 0:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._fail(f"timed out after {self.timeout:.3f}s waiting for reply")
                if not sel.select(remaining):
                    continue
                try:
                    chunk = os.read(fd, n)
                except BlockingIOError:
                    continue
                if not chunk:
                    self._fail("denoiser closed its output mid-frame")
                chunks.append(chunk)
                n -= len(chunk)
            return b"".join(chunks)

        return read, sel

    def predict_eps(self, x_t, t, cond: Conditioning):
        with self._lock:
            if self._failure is not None:
                raise ExternalDenoiserError(f"denoiser unavailable after earlier failure: {self._failure}",
                                            self.diagnostics())
            if self.proc.poll() is not None:
                self._fail("denoiser process has exited")
            frame = protocol.encode_request(x_t, t, cond.x_corrupt)
            deadline = time.monotonic() + self.timeout
            self._write_all(frame, deadline)
            read, sel = self._reader(deadline)
            try:
                kind, payload = protocol.read_response(read)
            except ProtocolError as exc:
                self._fail(f"malformed reply: {exc}", ProtocolError)
            finally:
                sel.close()
            if kind == "error":
                raise ExternalDenoiserError(f"denoiser reported an error: {payload}")
            if payload.shape != np.shape(x_t):
                self._fail(f"reply shape {payload.shape} does not match request {np.shape(x_t)}",
                           ProtocolError)
            return payload

    def close(self):
        if self.proc.poll() is None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired):
                pass
        self._kill()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        proc = getattr(self, "proc", None)
        if proc is not None and proc.poll() is None:
            proc.kill()

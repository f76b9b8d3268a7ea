"""JSON-lines wire protocol over a subprocess's standard streams.

Salience provider messages:

    -> {"type": "init", "image": ..., "classes": [...], "layer": L,
        "head": H, "grid": P}
    <- {"type": "ready", "k": K, "grid": P}
    -> {"type": "salience", "active_b64": ...}
    <- {"type": "tensors", "attention_b64": ..., "gradient_b64": ...}
    -> {"type": "shutdown"}        then the process exits 0
    <- {"type": "error", "message": ...} on any failure

``active_b64`` is the active-patch mask bit-packed row-major (MSB first,
zero-padded to a byte boundary) and base64-encoded; the tensor fields are
base64 of full SALT messages (float32, shape K x P x P). Requests on one
session are strictly sequential; after any protocol error the session is
dead and every further call raises.

Similarity-oracle messages (same transport, used by the tuner):

    -> {"type": "init"}
    <- {"type": "ready", "input_size": S or null}
    -> {"type": "score", "image_b64": ..., "names": [...]}
    <- {"type": "scores", "scores": [...]}
    -> {"type": "shutdown"}

``image_b64`` is base64 of a SALT uint8 tensor of shape H x W x 3.
"""

from __future__ import annotations

import base64
import json
import queue
import shlex
import subprocess
import threading

import numpy as np

from ..salience import ActivePatchSet, SalienceResponse
from . import ProviderInit, validate_response
from . import salt

__all__ = [
    "ProtocolError",
    "SessionError",
    "SubprocessSession",
    "OracleSession",
    "encode_active_b64",
    "decode_active_b64",
    "encode_tensor_b64",
    "decode_tensor_b64",
]

DEFAULT_TIMEOUT = 300.0


class ProtocolError(RuntimeError):
    """Peer sent something outside the protocol."""


class SessionError(RuntimeError):
    """Session transport failure (process exit, timeout, dead session)."""


def encode_active_b64(active: ActivePatchSet) -> str:
    return base64.b64encode(active.to_bits()).decode("ascii")


def decode_active_b64(data: str, grid: int) -> ActivePatchSet:
    return ActivePatchSet.from_bits(base64.b64decode(data), grid)


def encode_tensor_b64(array: np.ndarray) -> str:
    return base64.b64encode(salt.encode(array)).decode("ascii")


def decode_tensor_b64(data: str) -> np.ndarray:
    return salt.decode(base64.b64decode(data))


class _LineReader(threading.Thread):
    """Drains a text stream into a queue so reads can time out."""

    def __init__(self, stream):
        super().__init__(daemon=True)
        self._stream = stream
        self.lines = queue.Queue()
        self.start()

    def run(self):
        try:
            for line in self._stream:
                self.lines.put(line)
        except ValueError:
            pass  # stream closed
        self.lines.put(None)  # EOF marker

    def readline(self, timeout):
        try:
            return self.lines.get(timeout=timeout)
        except queue.Empty:
            raise SessionError(f"no response within {timeout} s") from None


class _BaseSession:
    def __init__(self, command, timeout=DEFAULT_TIMEOUT):
        if isinstance(command, str):
            command = shlex.split(command)
        self._timeout = timeout
        self._dead = False
        self._proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        self._reader = _LineReader(self._proc.stdout)

    def _die(self, exc):
        self._dead = True
        if self._proc.poll() is None:
            self._proc.kill()
        raise exc

    def _send(self, message: dict):
        if self._dead:
            raise SessionError("session is dead after a previous error")
        try:
            self._proc.stdin.write(json.dumps(message) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self._die(SessionError(f"provider process is gone: {exc}"))

    def _recv(self) -> dict:
        if self._dead:
            raise SessionError("session is dead after a previous error")
        try:
            line = self._reader.readline(self._timeout)
        except SessionError as exc:
            self._die(exc)
        if line is None:
            self._die(SessionError(f"process exited (code {self._proc.poll()})"))
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            self._die(ProtocolError(f"malformed line: {line!r} ({exc})"))
        if not isinstance(msg, dict) or "type" not in msg:
            self._die(ProtocolError(f"message without type: {line!r}"))
        if msg["type"] == "error":
            self._die(ProtocolError(f"peer error: {msg.get('message', '<no message>')}"))
        return msg

    def _expect(self, type_name: str) -> dict:
        msg = self._recv()
        if msg["type"] != type_name:
            self._die(ProtocolError(f"expected {type_name!r}, got {msg['type']!r}"))
        return msg

    def shutdown(self) -> int:
        """Request a clean exit; returns the process exit code."""
        if not self._dead:
            try:
                self._send({"type": "shutdown"})
            except SessionError:
                pass
        self._dead = True
        try:
            code = self._proc.wait(timeout=self._timeout)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            code = self._proc.wait()
        return code

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.shutdown()


class SubprocessSession(_BaseSession):
    """Salience provider behind a subprocess; satisfies SalienceProvider."""

    def __init__(self, command, init: ProviderInit, timeout=DEFAULT_TIMEOUT):
        super().__init__(command, timeout)
        self._init = init
        self._send(
            {
                "type": "init",
                "image": init.image,
                "classes": list(init.classes),
                "layer": init.layer,
                "head": init.head,
                "grid": init.grid,
            }
        )
        ready = self._expect("ready")
        if ready.get("k") != init.n_classes or ready.get("grid") != init.grid:
            self._die(
                ProtocolError(
                    f"ready announced k={ready.get('k')} grid={ready.get('grid')}, "
                    f"expected k={init.n_classes} grid={init.grid}"
                )
            )

    @property
    def n_classes(self) -> int:
        return self._init.n_classes

    @property
    def grid(self) -> int:
        return self._init.grid

    def query(self, active: ActivePatchSet) -> SalienceResponse:
        if active.grid != self._init.grid:
            raise ValueError(f"active grid {active.grid} != session grid {self._init.grid}")
        self._send({"type": "salience", "active_b64": encode_active_b64(active)})
        msg = self._expect("tensors")
        try:
            attention = decode_tensor_b64(msg["attention_b64"])
            gradient = decode_tensor_b64(msg["gradient_b64"])
        except (KeyError, ValueError) as exc:
            self._die(ProtocolError(f"bad tensors message: {exc}"))
        try:
            return validate_response(
                attention, gradient, self._init.n_classes, self._init.grid, active
            )
        except ValueError as exc:
            self._die(ProtocolError(str(exc)))


class OracleSession(_BaseSession):
    """Similarity oracle behind a subprocess; satisfies SimilarityOracle."""

    def __init__(self, command, timeout=DEFAULT_TIMEOUT):
        super().__init__(command, timeout)
        self._send({"type": "init"})
        ready = self._expect("ready")
        self.input_size = ready.get("input_size")

    def scores(self, image, names) -> np.ndarray:
        img = np.ascontiguousarray(image, dtype=np.uint8)
        self._send(
            {
                "type": "score",
                "image_b64": base64.b64encode(salt.encode(img)).decode("ascii"),
                "names": list(names),
            }
        )
        msg = self._expect("scores")
        scores = np.asarray(msg.get("scores"), dtype=np.float64)
        if scores.shape != (len(names),) or not np.all(np.isfinite(scores)):
            self._die(ProtocolError(f"bad scores: {msg.get('scores')!r}"))
        return scores

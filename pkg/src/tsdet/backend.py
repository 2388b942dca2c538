"""Bridge to an external detector backend running as a child process.

Control messages are single-line JSON objects on the child's stdin/stdout;
bulk data (manifests, images, models) travels through files on shared disk.
The protocol is strictly request/response: hello (child speaks first), then
one command at a time, finished by shutdown.  Message schemas are documented
in docs/backend_protocol.md with bit-exact examples.
"""

from __future__ import annotations

import json
import queue
import shlex
import subprocess
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .annotations import STATUS_KEEP, load_manifest, save_manifest
from .errors import BackendError, ValidationError
from .evaluation import detections_from_dataset
from .geometry import nms

PROTOCOL_VERSION = 1
HELLO_TIMEOUT = 10.0
DEFAULT_COMMAND_TIMEOUT = 600.0

_EOF = object()


@dataclass
class BackendHandle:
    proc: subprocess.Popen
    version: int
    capabilities: frozenset[str]
    command_timeout: float
    _lines: "queue.Queue" = field(repr=False, default_factory=queue.Queue)
    _stderr: deque = field(repr=False, default_factory=lambda: deque(maxlen=200))
    _dead: bool = False

    def __enter__(self) -> "BackendHandle":
        return self

    def __exit__(self, *exc) -> None:
        shutdown(self)


def _start_readers(handle: BackendHandle) -> None:
    def read_stdout():
        for line in handle.proc.stdout:
            handle._lines.put(line)
        handle._lines.put(_EOF)

    def read_stderr():
        for line in handle.proc.stderr:
            handle._stderr.append(line.rstrip("\n"))

    for target in (read_stdout, read_stderr):
        t = threading.Thread(target=target, daemon=True)
        t.start()


def _diagnostics(handle: BackendHandle) -> str:
    tail = "\n".join(handle._stderr) or "<no stderr output>"
    return f"backend stderr:\n{tail}"


def _abort(handle: BackendHandle, why: str) -> BackendError:
    handle._dead = True
    handle.proc.kill()
    return BackendError(f"{why}\n{_diagnostics(handle)}")


def _recv(handle: BackendHandle, timeout: float) -> dict:
    try:
        line = handle._lines.get(timeout=timeout)
    except queue.Empty:
        raise _abort(handle, f"backend did not respond within {timeout:.0f} s")
    if line is _EOF:
        raise _abort(handle, "backend exited before replying")
    try:
        msg = json.loads(line)
    except json.JSONDecodeError as e:
        raise _abort(handle, f"backend wrote a non-protocol line: {line!r} ({e})")
    if not isinstance(msg, dict) or "type" not in msg:
        raise _abort(handle, f"backend message has no type: {line!r}")
    return msg


def _send(handle: BackendHandle, msg: dict) -> None:
    if handle._dead or handle.proc.poll() is not None:
        raise _abort(handle, "backend process is no longer running")
    if not handle._lines.empty():
        raise _abort(handle, "backend sent an out-of-order message; aborting session")
    try:
        handle.proc.stdin.write(json.dumps(msg) + "\n")
        handle.proc.stdin.flush()
    except (BrokenPipeError, OSError):
        raise _abort(handle, "backend stdin closed unexpectedly")


def _request(handle: BackendHandle, msg: dict, expect: str, timeout: float | None = None) -> dict:
    timeout = handle.command_timeout if timeout is None else timeout
    _send(handle, msg)
    reply = _recv(handle, timeout)
    if reply["type"] == "error":
        raise BackendError(f"backend error: {reply.get('message', '<no message>')}")
    if reply["type"] != expect:
        raise _abort(handle, f"expected {expect!r} reply, got {reply['type']!r}")
    return reply


def spawn_backend(command: str | list[str],
                  command_timeout: float = DEFAULT_COMMAND_TIMEOUT) -> BackendHandle:
    """Launch a backend child and complete the hello/version exchange."""
    argv = shlex.split(command) if isinstance(command, str) else list(command)
    try:
        proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, text=True, bufsize=1)
    except OSError as e:
        raise BackendError(f"failed to launch backend {argv!r}: {e}")
    handle = BackendHandle(proc, 0, frozenset(), command_timeout)
    _start_readers(handle)
    hello = _recv(handle, HELLO_TIMEOUT)
    if hello["type"] != "hello":
        raise _abort(handle, f"expected hello, got {hello['type']!r}")
    version = hello.get("version")
    if version != PROTOCOL_VERSION:
        raise _abort(handle, f"backend announced protocol version {version}, "
                             f"engine speaks {PROTOCOL_VERSION}")
    handle.version = version
    handle.capabilities = frozenset(hello.get("capabilities", []))
    return handle


def _validate_policy_applied(pseudo_manifest: str | Path) -> None:
    d = load_manifest(pseudo_manifest)
    for a in d.annotations:
        if a.status is None:
            raise ValidationError(
                f"pseudo manifest {pseudo_manifest}: annotation {a.ann_id} has no status; "
                f"apply a weight policy before sending to a backend")
        if a.status == STATUS_KEEP and a.weight is None:
            raise ValidationError(
                f"pseudo manifest {pseudo_manifest}: keep annotation {a.ann_id} missing weight")


def request_train(
    handle: BackendHandle,
    labeled_manifest: str | Path,
    pseudo_manifest: str | Path | None,
    config: dict,
    model_out: str | Path,
    timeout: float | None = None,
) -> dict:
    """Ask the backend to train; returns {"model_ref": ..., "val_map": ...}."""
    if "train" not in handle.capabilities:
        raise BackendError("backend does not announce the train capability")
    if not Path(labeled_manifest).exists():
        raise ValidationError(f"labeled manifest {labeled_manifest} does not exist")
    if pseudo_manifest is not None:
        if not Path(pseudo_manifest).exists():
            raise ValidationError(f"pseudo manifest {pseudo_manifest} does not exist")
        _validate_policy_applied(pseudo_manifest)
    reply = _request(handle, {
        "type": "train",
        "labeled_manifest": str(labeled_manifest),
        "pseudo_manifest": None if pseudo_manifest is None else str(pseudo_manifest),
        "config": config,
        "model_out": str(model_out),
    }, expect="train_done", timeout=timeout)
    if "model_ref" not in reply:
        raise _abort(handle, "train_done reply missing model_ref")
    return {"model_ref": reply["model_ref"], "val_map": reply.get("val_map")}


def request_predict(
    handle: BackendHandle,
    images_manifest: str | Path,
    output_path: str | Path,
    score_floor: float,
    apply_nms: bool,
    nms_iou: float = 0.5,
    model_ref: str | None = None,
    timeout: float | None = None,
) -> Path:
    """Ask the backend for detections on a manifest of images.

    The output file must conform to the detections manifest schema; when the
    backend declares it did not suppress duplicates and ``apply_nms`` is set,
    the engine runs its own per-class NMS and rewrites the file.
    """
    if "predict" not in handle.capabilities:
        raise BackendError("backend does not announce the predict capability")
    reply = _request(handle, {
        "type": "predict",
        "images_manifest": str(images_manifest),
        "output": str(output_path),
        "score_floor": score_floor,
        "nms": apply_nms,
        "model_ref": model_ref,
    }, expect="predict_done", timeout=timeout)
    out = Path(reply.get("output", output_path))
    try:
        dets = load_manifest(out)
    except (OSError, ValidationError) as e:
        raise BackendError(f"backend detection output failed validation: {e}")
    if dets.kind != "detections":
        raise BackendError(f"backend output kind {dets.kind!r}, expected 'detections'")
    if apply_nms and not reply.get("nms_applied", False):
        from .annotations import Annotation

        by_image = detections_from_dataset(dets)
        suppressed = []
        ann_id = 1
        for im in dets.images:
            for d in nms(by_image[im.image_id], nms_iou):
                suppressed.append(Annotation(ann_id, im.image_id, d.class_id, d.box, d.score))
                ann_id += 1
        dets = dets.replace_annotations(tuple(suppressed))
        save_manifest(dets, out)
    return out


def request_save(handle: BackendHandle, path: str | Path, timeout: float | None = None) -> None:
    reply = _request(handle, {"type": "save", "path": str(path)}, expect="save", timeout=timeout)
    if not reply.get("ok"):
        raise BackendError(f"backend failed to save model to {path}")


def request_load(handle: BackendHandle, model_ref: str | Path, timeout: float | None = None) -> None:
    reply = _request(handle, {"type": "load", "model_ref": str(model_ref)}, expect="load",
                     timeout=timeout)
    if not reply.get("ok"):
        raise BackendError(f"backend failed to load model {model_ref}")


def shutdown(handle: BackendHandle, timeout: float = 10.0) -> None:
    if handle.proc.poll() is None and not handle._dead:
        try:
            handle.proc.stdin.write(json.dumps({"type": "shutdown"}) + "\n")
            handle.proc.stdin.flush()
        except (BrokenPipeError, OSError):
            pass
    try:
        handle.proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        handle.proc.kill()
        handle.proc.wait()

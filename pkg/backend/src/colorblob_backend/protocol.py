"""JSON-lines command loop over stdin/stdout.

One message per line; hello first, then strict request/response.  Unknown
optional fields in requests are ignored for forward compatibility.  Anything
that is not a valid command gets a single error reply and the loop continues.
Only protocol JSON ever goes to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import json
import sys
import traceback

from .formats import image_path, load_manifest, read_raster, write_detections_manifest
from .model import CentroidModel, quick_ap50

PROTOCOL_VERSION = 1
CAPABILITIES = ["train", "predict", "save", "load"]


class Backend:
    def __init__(self, stdin=None, stdout=None):
        self.stdin = stdin or sys.stdin
        self.stdout = stdout or sys.stdout
        self.model: CentroidModel | None = None

    def send(self, msg: dict) -> None:
        self.stdout.write(json.dumps(msg) + "\n")
        self.stdout.flush()

    def serve(self) -> int:
        self.send({"type": "hello", "version": PROTOCOL_VERSION,
                   "capabilities": CAPABILITIES})
        for line in self.stdin:
            line = line.strip()
            if not line:
                continue
            try:
                msg = json.loads(line)
                command = msg["type"]
            except (json.JSONDecodeError, KeyError, TypeError):
                self.send({"type": "error", "message": f"malformed message: {line[:200]}"})
                continue
            if command == "shutdown":
                return 0
            handler = getattr(self, f"handle_{command}", None)
            if handler is None:
                self.send({"type": "error", "message": f"unknown command {command!r}"})
                continue
            try:
                handler(msg)
            except Exception as e:  # one error reply per failed command
                traceback.print_exc(file=sys.stderr)
                self.send({"type": "error", "message": f"{command} failed: {e}"})
        return 0

    def handle_train(self, msg: dict) -> None:
        manifests = [load_manifest(msg["labeled_manifest"])]
        if msg.get("pseudo_manifest"):
            manifests.append(load_manifest(msg["pseudo_manifest"]))
        model = CentroidModel(manifests[0].get("categories", []))
        model.fit(manifests)
        model.save(msg["model_out"])
        self.model = model
        val_map = None
        val_path = (msg.get("config") or {}).get("val_manifest")
        if val_path:
            val_map = quick_ap50(model, load_manifest(val_path))
        self.send({"type": "train_done", "model_ref": msg["model_out"], "val_map": val_map})

    def handle_predict(self, msg: dict) -> None:
        if msg.get("model_ref"):
            self.model = CentroidModel.load(msg["model_ref"])
        if self.model is None:
            raise RuntimeError("no model trained or loaded")
        manifest = load_manifest(msg["images_manifest"])
        score_floor = float(msg.get("score_floor", 0.05))
        detections = []
        next_id = 1
        for im in manifest.get("images", []):
            pixels = read_raster(image_path(manifest, im))
            for det in self.model.predict_image(pixels, score_floor):
                detections.append({"id": next_id, "image_id": im["id"], **det})
                next_id += 1
        write_detections_manifest(
            msg["output"], manifest.get("categories", []), manifest.get("images", []),
            detections)
        # this toy detector emits one box per blob, so it never suppresses;
        # the engine applies its own NMS when it wants one
        self.send({"type": "predict_done", "output": msg["output"], "nms_applied": False})

    def handle_save(self, msg: dict) -> None:
        if self.model is None:
            raise RuntimeError("no model to save")
        self.model.save(msg["path"])
        self.send({"type": "save", "ok": True, "path": msg["path"]})

    def handle_load(self, msg: dict) -> None:
        self.model = CentroidModel.load(msg["model_ref"])
        self.send({"type": "load", "ok": True, "model_ref": msg["model_ref"]})


def main() -> int:
    return Backend().serve()


if __name__ == "__main__":
    sys.exit(main())

import json
import sys
import textwrap
import threading
import time

import pytest

import tsdet.backend as backend
from tsdet.annotations import load_manifest, save_manifest
from tsdet.errors import BackendError, ValidationError
from tsdet.geometry import nms
from tsdet.evaluation import detections_from_dataset

from .conftest import make_catalog, make_image
from .oracles import nms_oracle


def write_stub(tmp_path, body: str, name: str = "stub.py") -> list[str]:
    script = tmp_path / name
    script.write_text(textwrap.dedent(body))
    return [sys.executable, "-u", str(script)]


GOOD_STUB = """
    import json, sys

    def send(msg):
        sys.stdout.write(json.dumps(msg) + "\\n")
        sys.stdout.flush()

    send({"type": "hello", "version": 1, "capabilities": ["train", "predict"]})
    for line in sys.stdin:
        msg = json.loads(line)
        t = msg["type"]
        if t == "train":
            with open(msg["model_out"], "w") as f:
                f.write("model")
            send({"type": "train_done", "model_ref": msg["model_out"], "val_map": 0.42})
        elif t == "predict":
            manifest = {
                "version": "1.0", "kind": "detections",
                "categories": [{"id": 1, "name": "player"}, {"id": 2, "name": "referee"},
                                {"id": 3, "name": "ball"}],
                "images": [{"id": 1, "file": "img_00001.ras", "width": 128, "height": 128,
                             "game_id": "g0"}],
                "annotations": [
                    {"id": 1, "image_id": 1, "category_id": 1,
                     "bbox": [10.0, 10.0, 20.0, 20.0], "score": 0.9},
                    {"id": 2, "image_id": 1, "category_id": 1,
                     "bbox": [11.0, 10.0, 20.0, 20.0], "score": 0.8},
                    {"id": 3, "image_id": 1, "category_id": 2,
                     "bbox": [60.0, 60.0, 10.0, 12.0], "score": 0.7}
                ],
            }
            with open(msg["output"], "w") as f:
                json.dump(manifest, f)
            send({"type": "predict_done", "output": msg["output"], "nms_applied": False})
        elif t == "shutdown":
            break
        else:
            send({"type": "error", "message": "unknown command " + t})
"""


class TestSpawn:
    def test_handshake_and_capabilities(self, tmp_path):
        with backend.spawn_backend(write_stub(tmp_path, GOOD_STUB)) as h:
            assert h.version == 1
            assert h.capabilities == {"train", "predict"}

    def test_version_mismatch_rejected(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys
            sys.stdout.write(json.dumps({"type": "hello", "version": 999,
                                         "capabilities": []}) + "\\n")
            sys.stdout.flush()
            sys.stdin.readline()
        """)
        with pytest.raises(BackendError, match="version 999"):
            backend.spawn_backend(cmd)

    def test_crash_on_start_includes_diagnostics(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import sys
            print("fatal: cannot load weights", file=sys.stderr)
            sys.exit(3)
        """)
        with pytest.raises(BackendError, match="cannot load weights"):
            backend.spawn_backend(cmd)

    def test_missing_executable(self):
        with pytest.raises(BackendError, match="failed to launch"):
            backend.spawn_backend(["/nonexistent/backend"])

    def test_handshake_timeout(self, tmp_path, monkeypatch):
        monkeypatch.setattr(backend, "HELLO_TIMEOUT", 0.5)
        cmd = write_stub(tmp_path, """
            import time
            time.sleep(60)
        """)
        t0 = time.time()
        with pytest.raises(BackendError, match="did not respond"):
            backend.spawn_backend(cmd)
        assert time.time() - t0 < 5


class TestRequests:
    def _manifests(self, tmp_path):
        catalog = make_catalog()
        from tsdet.annotations import Annotation, BoundingBox, Dataset
        labeled = Dataset("labeled", catalog, (make_image(1),),
                          (Annotation(1, 1, 1, BoundingBox(5, 5, 10, 10)),))
        lab_path = tmp_path / "labeled.manifest"
        save_manifest(labeled, lab_path)
        pseudo = Dataset("pseudo", catalog, (make_image(1),), (
            Annotation(1, 1, 1, BoundingBox(5, 5, 10, 10), score=0.9, status="keep", weight=0.8),
        ))
        ps_path = tmp_path / "pseudo.manifest"
        save_manifest(pseudo, ps_path)
        return lab_path, ps_path

    def test_train_round_trip(self, tmp_path):
        lab, ps = self._manifests(tmp_path)
        with backend.spawn_backend(write_stub(tmp_path, GOOD_STUB)) as h:
            reply = backend.request_train(h, lab, ps, {"seed": 1}, tmp_path / "model.bin")
            assert reply["val_map"] == 0.42
            assert (tmp_path / "model.bin").read_text() == "model"

    def test_unapplied_pseudo_refused_before_send(self, tmp_path):
        lab, _ = self._manifests(tmp_path)
        from tsdet.annotations import Annotation, BoundingBox, Dataset
        raw = Dataset("pseudo", make_catalog(), (make_image(1),),
                      (Annotation(1, 1, 1, BoundingBox(5, 5, 10, 10), score=0.9),))
        raw_path = tmp_path / "raw.manifest"
        save_manifest(raw, raw_path)
        with backend.spawn_backend(write_stub(tmp_path, GOOD_STUB)) as h:
            with pytest.raises(ValidationError, match="no status"):
                backend.request_train(h, lab, raw_path, {}, tmp_path / "m.bin")

    def test_predict_engine_side_nms(self, tmp_path):
        lab, _ = self._manifests(tmp_path)
        out = tmp_path / "dets.manifest"
        with backend.spawn_backend(write_stub(tmp_path, GOOD_STUB)) as h:
            result = backend.request_predict(h, lab, out, 0.05, apply_nms=True, nms_iou=0.5)
        dets = load_manifest(result)
        by_img = detections_from_dataset(dets)
        raw = [((10.0, 10.0, 20.0, 20.0), 1, 0.9), ((11.0, 10.0, 20.0, 20.0), 1, 0.8),
               ((60.0, 60.0, 10.0, 12.0), 2, 0.7)]
        want = {(raw[i][1], raw[i][2]) for i in nms_oracle(raw, 0.5)}
        got = {(d.class_id, d.score) for d in by_img[1]}
        assert got == want  # the near-duplicate class-1 box was suppressed

    def test_backend_error_surfaced(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys
            sys.stdout.write(json.dumps({"type": "hello", "version": 1,
                                         "capabilities": ["train"]}) + "\\n")
            sys.stdout.flush()
            for line in sys.stdin:
                sys.stdout.write(json.dumps({"type": "error",
                                             "message": "no GPU available"}) + "\\n")
                sys.stdout.flush()
        """)
        lab, ps = self._manifests(tmp_path)
        with backend.spawn_backend(cmd) as h:
            with pytest.raises(BackendError, match="no GPU available"):
                backend.request_train(h, lab, ps, {}, tmp_path / "m.bin")

    def test_kill_during_train_is_an_error_not_a_hang(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys, time
            sys.stdout.write(json.dumps({"type": "hello", "version": 1,
                                         "capabilities": ["train", "predict"]}) + "\\n")
            sys.stdout.flush()
            sys.stdin.readline()
            time.sleep(600)
        """)
        lab, ps = self._manifests(tmp_path)
        h = backend.spawn_backend(cmd)
        killer = threading.Timer(1.0, h.proc.kill)
        killer.start()
        t0 = time.time()
        with pytest.raises(BackendError, match="exited before replying"):
            backend.request_train(h, lab, ps, {}, tmp_path / "m.bin", timeout=30)
        assert time.time() - t0 < 10
        killer.cancel()

    def test_timeout_is_configurable(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys, time
            sys.stdout.write(json.dumps({"type": "hello", "version": 1,
                                         "capabilities": ["train"]}) + "\\n")
            sys.stdout.flush()
            sys.stdin.readline()
            time.sleep(600)
        """)
        lab, ps = self._manifests(tmp_path)
        with backend.spawn_backend(cmd) as h:
            t0 = time.time()
            with pytest.raises(BackendError, match="did not respond within 1"):
                backend.request_train(h, lab, ps, {}, tmp_path / "m.bin", timeout=1.0)
            assert time.time() - t0 < 5

    def test_out_of_order_message_aborts(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys
            def send(m):
                sys.stdout.write(json.dumps(m) + "\\n")
                sys.stdout.flush()
            send({"type": "hello", "version": 1, "capabilities": ["train", "predict"]})
            for line in sys.stdin:
                msg = json.loads(line)
                if msg["type"] == "train":
                    with open(msg["model_out"], "w") as f:
                        f.write("m")
                    send({"type": "train_done", "model_ref": msg["model_out"], "val_map": 0.1})
                    send({"type": "train_done", "model_ref": "unsolicited", "val_map": 0.2})
                elif msg["type"] == "shutdown":
                    break
        """)
        lab, ps = self._manifests(tmp_path)
        h = backend.spawn_backend(cmd)
        backend.request_train(h, lab, ps, {}, tmp_path / "m.bin")
        time.sleep(0.3)  # let the unsolicited line arrive
        with pytest.raises(BackendError, match="out-of-order"):
            backend.request_train(h, lab, ps, {}, tmp_path / "m2.bin")

    def test_invalid_detection_output_rejected(self, tmp_path):
        cmd = write_stub(tmp_path, """
            import json, sys
            def send(m):
                sys.stdout.write(json.dumps(m) + "\\n")
                sys.stdout.flush()
            send({"type": "hello", "version": 1, "capabilities": ["predict"]})
            for line in sys.stdin:
                msg = json.loads(line)
                if msg["type"] == "predict":
                    bad = {"version": "1.0", "kind": "detections",
                           "categories": [{"id": 1, "name": "a"}],
                           "images": [{"id": 1, "file": "x.ras", "width": 8, "height": 8,
                                        "game_id": "g"}],
                           "annotations": [{"id": 1, "image_id": 1, "category_id": 1,
                                             "bbox": [1, 1, 2, 2], "score": 1.2}]}
                    with open(msg["output"], "w") as f:
                        json.dump(bad, f)
                    send({"type": "predict_done", "output": msg["output"],
                          "nms_applied": True})
                elif msg["type"] == "shutdown":
                    break
        """)
        lab, _ = self._manifests(tmp_path)
        with backend.spawn_backend(cmd) as h:
            with pytest.raises(BackendError, match="failed validation"):
                backend.request_predict(h, lab, tmp_path / "out.manifest", 0.05, apply_nms=False)

    def test_shutdown_exits_cleanly(self, tmp_path):
        h = backend.spawn_backend(write_stub(tmp_path, GOOD_STUB))
        backend.shutdown(h)
        assert h.proc.poll() == 0

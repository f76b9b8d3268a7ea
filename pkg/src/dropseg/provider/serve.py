"""Reference server side of the provider wire protocol.

Wraps any in-process provider behind stdin/stdout JSON lines; ships with a
synthetic backend so the subprocess transport can be exercised end to end:

    python -m dropseg.provider.serve scene.json

The init message's ``image`` field must be the path of a scene JSON file (or
is ignored when the scene was given on the command line). Class lists must
match the scene.
"""

from __future__ import annotations

import json
import sys

from .synthetic import SyntheticProvider, load_scene
from .wire import decode_active_b64, encode_tensor_b64


def _emit(msg: dict):
    sys.stdout.write(json.dumps(msg) + "\n")
    sys.stdout.flush()


def serve(scene_path: str | None = None, stdin=None) -> int:
    stdin = stdin or sys.stdin
    provider = None
    for raw in stdin:
        line = raw.strip()
        if not line:
            continue
        try:
            msg = json.loads(line)
        except json.JSONDecodeError as exc:
            _emit({"type": "error", "message": f"malformed line: {exc}"})
            continue
        kind = msg.get("type")
        if kind == "init":
            try:
                path = scene_path or msg.get("image")
                scene = load_scene(path)
                if list(msg.get("classes", [])) != list(scene.class_names):
                    raise ValueError(
                        f"class list {msg.get('classes')} does not match scene "
                        f"{list(scene.class_names)}"
                    )
                if msg.get("grid") != scene.grid:
                    raise ValueError(f"grid {msg.get('grid')} != scene grid {scene.grid}")
                provider = SyntheticProvider(scene, msg.get("layer"), msg.get("head"))
                _emit({"type": "ready", "k": provider.n_classes, "grid": provider.grid})
            except Exception as exc:  # noqa: BLE001 - reported over the wire
                _emit({"type": "error", "message": str(exc)})
        elif kind == "salience":
            if provider is None:
                _emit({"type": "error", "message": "salience before init"})
                continue
            try:
                active = decode_active_b64(msg["active_b64"], provider.grid)
                resp = provider.query(active)
                _emit(
                    {
                        "type": "tensors",
                        "attention_b64": encode_tensor_b64(
                            resp.attention.astype("float32")
                        ),
                        "gradient_b64": encode_tensor_b64(
                            resp.gradient.astype("float32")
                        ),
                    }
                )
            except Exception as exc:  # noqa: BLE001
                _emit({"type": "error", "message": str(exc)})
        elif kind == "shutdown":
            return 0
        else:
            _emit({"type": "error", "message": f"unknown message type {kind!r}"})
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    scene_path = argv[0] if argv else None
    return serve(scene_path)


if __name__ == "__main__":
    sys.exit(main())

"""Wire-protocol test double: serves canned tensors over stdin/stdout.

Behaviors, selected by argv[1]:
  fixed        - ready with the init's k/grid, answer every salience query
                 with deterministic tensors (value = patch row index)
  wrong-grid   - announce the init's grid but answer with a (k, 2, 2) tensor
  error-on-query - answer queries with an error message
  sleepy       - never answer queries (for timeout tests)
"""

import base64
import json
import struct
import sys


def salt_encode_f32(values, shape):
    header = b"SALT" + bytes([1, 1, len(shape)])
    header += b"".join(struct.pack("<I", d) for d in shape)
    payload = b"".join(struct.pack("<f", v) for v in values)
    return base64.b64encode(header + payload).decode("ascii")


def main():
    mode = sys.argv[1] if len(sys.argv) > 1 else "fixed"
    k = grid = None
    for line in sys.stdin:
        msg = json.loads(line)
        if msg["type"] == "init":
            k, grid = len(msg["classes"]), msg["grid"]
            print(json.dumps({"type": "ready", "k": k, "grid": grid}), flush=True)
        elif msg["type"] == "salience":
            if mode == "sleepy":
                continue
            if mode == "error-on-query":
                print(json.dumps({"type": "error", "message": "synthetic failure"}), flush=True)
                continue
            if mode == "wrong-grid":
                shape = (k, 2, 2)
            else:
                shape = (k, grid, grid)
            n = shape[0] * shape[1] * shape[2]
            # value = row index; zero where the active bit is off
            bits = base64.b64decode(msg["active_b64"])
            active = []
            for i in range(shape[1] * shape[2]):
                active.append((bits[i // 8] >> (7 - i % 8)) & 1)
            attn, grad = [], []
            for ki in range(shape[0]):
                for r in range(shape[1]):
                    for c in range(shape[2]):
                        on = active[r * shape[2] + c] if shape[1] == grid else 1
                        attn.append(float(r) * on)
                        grad.append(1.0 * on)
            print(
                json.dumps(
                    {
                        "type": "tensors",
                        "attention_b64": salt_encode_f32(attn[:n], shape),
                        "gradient_b64": salt_encode_f32(grad[:n], shape),
                    }
                ),
                flush=True,
            )
        elif msg["type"] == "shutdown":
            sys.exit(0)


if __name__ == "__main__":
    main()

"""Binary field dumps (HKF1) and trajectory JSON-lines serialization.

HKF1 layout: magic b"HKF1", little-endian u32 width, height, channels,
then width*height*channels little-endian float64 values, row-major with the
channel index minor.
"""

from __future__ import annotations

import json
import struct

import numpy as np

_MAGIC = b"HKF1"


class FieldFormatError(ValueError):
    pass


def dump_field(values: np.ndarray) -> bytes:
    """Serialize a (H, W) or (H, W, C) float array to HKF1 bytes."""
    arr = np.asarray(values, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("field must have shape (H, W) or (H, W, C)")
    height, width, channels = arr.shape
    header = _MAGIC + struct.pack("<III", width, height, channels)
    return header + np.ascontiguousarray(arr).tobytes()


def load_field(data: bytes) -> np.ndarray:
    """Parse HKF1 bytes into a (H, W, C) float64 array."""
    if data[:4] != _MAGIC:
        raise FieldFormatError(f"bad magic {data[:4]!r}")
    if len(data) < 16:
        raise FieldFormatError("truncated header")
    width, height, channels = struct.unpack("<III", data[4:16])
    expected = 16 + width * height * channels * 8
    if len(data) != expected:
        raise FieldFormatError(
            f"expected {expected} bytes for {width}x{height}x{channels}, got {len(data)}"
        )
    flat = np.frombuffer(data[16:], dtype="<f8")
    return flat.reshape(height, width, channels).astype(np.float64)


def trajectories_to_jsonl(trajectories) -> str:
    """One JSON object per trajectory: {seed, frozen, states:[[x,y],...]}."""
    lines = []
    for traj in trajectories:
        doc = {
            "seed": int(traj.seed),
            "frozen": bool(traj.frozen),
            "states": [[float(x), float(y)] for x, y in np.asarray(traj.states)],
        }
        lines.append(json.dumps(doc, separators=(",", ":")))
    return "\n".join(lines) + ("\n" if lines else "")


def trajectories_from_jsonl(text: str) -> list[dict]:
    """Parse trajectory JSONL into dicts with numpy state arrays."""
    records = []
    for line in text.splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        records.append(
            {
                "seed": int(doc["seed"]),
                "frozen": bool(doc["frozen"]),
                "states": np.asarray(doc["states"], dtype=np.float64).reshape(-1, 2),
            }
        )
    return records

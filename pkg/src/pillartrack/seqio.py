"""Sequence files: one tracked object per file, text or binary points.

Format (version header is mandatory):

    pcseq v1 <text|binary> id=<seq_id> category=<category>\\n

followed by one record per frame. Every record starts with a text line

    <frame_idx> <x> <y> <z> <w> <l> <h> <yaw> <n_points>

In text mode the same line continues with 4*n decimal values (x y z
intensity per point). In binary mode the line ends after n_points and is
followed by n*4 little-endian float32 values and a terminating newline.
"""

from __future__ import annotations

import numpy as np

from .geometry import Box3D
from .pillars import PointCloud
from .tracker import Sequence

MAGIC = "pcseq"
VERSION = "v1"


class SequenceFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_sequence(path, seq: Sequence, mode: str = "text") -> None:
    if mode not in ("text", "binary"):
        raise ValueError(f"mode must be 'text' or 'binary', got {mode!r}")
    for field_name, value in (("id", seq.seq_id), ("category", seq.category)):
        if any(ch.isspace() for ch in value):
            raise ValueError(f"sequence {field_name} must not contain whitespace")
    with open(path, "wb") as fh:
        header = f"{MAGIC} {VERSION} {mode} id={seq.seq_id} category={seq.category}\n"
        fh.write(header.encode())
        for idx, (pc, box) in enumerate(seq.frames):
            head = [str(idx)] + [_fmt(v) for v in box.to_array()] + [str(len(pc))]
            if mode == "text":
                body = " ".join(_fmt(v) for v in pc.points.reshape(-1))
                line = " ".join(head) + (" " + body if body else "") + "\n"
                fh.write(line.encode())
            else:
                fh.write((" ".join(head) + "\n").encode())
                fh.write(pc.points.astype("<f4").tobytes())
                fh.write(b"\n")


def read_sequence(path) -> Sequence:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        parts = header.split()
        if len(parts) != 5 or parts[0] != MAGIC:
            raise SequenceFormatError(f"bad header line: {header!r}")
        if parts[1] != VERSION:
            raise SequenceFormatError(f"unsupported version {parts[1]!r}")
        mode = parts[2]
        if mode not in ("text", "binary"):
            raise SequenceFormatError(f"unknown mode {mode!r}")
        meta = {}
        for kv in parts[3:]:
            key, _, value = kv.partition("=")
            meta[key] = value
        if "id" not in meta or "category" not in meta:
            raise SequenceFormatError("header missing id= or category=")

        frames = []
        expected_idx = 0
        while True:
            line = fh.readline()
            if not line:
                break
            fields = line.decode("ascii", errors="replace").split()
            if len(fields) < 9:
                raise SequenceFormatError(f"truncated record header: {fields}")
            idx = int(fields[0])
            if idx != expected_idx:
                raise SequenceFormatError(
                    f"frame index {idx} out of order (expected {expected_idx})")
            box = Box3D.from_array([float(v) for v in fields[1:8]])
            n = int(fields[8])
            if mode == "text":
                values = [float(v) for v in fields[9:]]
                if len(values) != 4 * n:
                    raise SequenceFormatError(
                        f"frame {idx}: expected {4 * n} values, got {len(values)}")
                pts = np.array(values, dtype=np.float64).reshape(n, 4)
            else:
                raw = fh.read(n * 4 * 4)
                if len(raw) != n * 4 * 4:
                    raise SequenceFormatError(f"frame {idx}: truncated point block")
                pts = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(n, 4)
                if fh.read(1) != b"\n":
                    raise SequenceFormatError(f"frame {idx}: missing record terminator")
            frames.append((PointCloud(pts), box))
            expected_idx += 1
    if len(frames) < 2:
        raise SequenceFormatError("sequence files need at least two frames")
    return Sequence(frames=frames, seq_id=meta["id"], category=meta["category"])

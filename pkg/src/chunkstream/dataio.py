"""On-disk formats: features, manifests, alignments, decode output, reports.

Feature files are binary: magic "CAED", then version, frame count T, feature
dim D, and frame duration in ms as little-endian u32, followed by T*D
little-endian float32 values row-major.  Everything else is JSON lines or
plain text, one record per line.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .chunking import BLANK, ChunkwiseAlignment, FramewiseAlignment
from .errors import DataError

FEATURE_MAGIC = b"CAED"
FEATURE_VERSION = 1


def write_features(path, features: np.ndarray, frame_ms: int) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DataError(f"features must be (T, D), got shape {features.shape}")
    t, d = features.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<III", FEATURE_VERSION, t, d))
        f.write(struct.pack("<I", frame_ms))
        f.write(features.tobytes())


def read_features(path):
    """Returns (features (T, D) float32, frame_ms)."""
    raw = Path(path).read_bytes()
    if len(raw) < 20 or raw[:4] != FEATURE_MAGIC:
        raise DataError(f"not a feature file: {path}")
    version, t, d, frame_ms = struct.unpack("<IIII", raw[4:20])
    if version != FEATURE_VERSION:
        raise DataError(f"unsupported feature file version {version} in {path}")
    expected = 20 + 4 * t * d
    if len(raw) != expected:
        raise DataError(f"feature file {path} has {len(raw)} bytes, expected {expected}")
    feats = np.frombuffer(raw[20:], dtype="<f4").reshape(t, d).copy()
    return feats, frame_ms


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T, D) float32
    frame_ms: int
    transcript: list[str]
    recording: str = ""
    word_end_s: Optional[list[float]] = None
    feature_file: str = ""

    @property
    def duration_s(self) -> float:
        return self.features.shape[0] * self.frame_ms / 1000.0


def _recording_from_id(utt_id: str) -> str:
    # ids look like "<recording>_u<index>"; fall back to the whole id
    if "_u" in utt_id:
        return utt_id.rsplit("_u", 1)[0]
    return utt_id


def write_manifest(path, entries) -> None:
    """Entries: dicts with id, feature_file, transcript and optional extras."""
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            e = json.loads(line)
        except json.JSONDecodeError as err:
            raise DataError(f"{path}:{lineno}: bad JSON: {err}") from err
        for key in ("id", "feature_file", "transcript"):
            if key not in e:
                raise DataError(f"{path}:{lineno}: manifest entry missing {key!r}")
        out.append(e)
    return out


def load_dataset(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    utts = []
    for e in read_manifest(manifest_path):
        feat_path = base / e["feature_file"]
        feats, frame_ms = read_features(feat_path)
        utts.append(
            Utterance(
                utt_id=e["id"],
                features=feats,
                frame_ms=frame_ms,
                transcript=list(e["transcript"]),
                recording=e.get("recording", _recording_from_id(e["id"])),
                word_end_s=e.get("word_end_s"),
                feature_file=str(e["feature_file"]),
            )
        )
    return utts


# ---------------------------------------------------------------------------
# alignments


def write_framewise_alignments(path, alignments) -> None:
    with open(path, "w") as f:
        for a in alignments:
            frames = [None if x == BLANK else int(x) for x in a.labels]
            f.write(json.dumps({"id": a.utt_id, "frames": frames}) + "\n")


def read_framewise_alignments(path) -> list[FramewiseAlignment]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        e = json.loads(line)
        if "id" not in e or "frames" not in e:
            raise DataError(f"{path}:{lineno}: alignment entry missing id/frames")
        labels = np.array([BLANK if x is None else int(x) for x in e["frames"]], dtype=np.int64)
        out.append(FramewiseAlignment(utt_id=e["id"], labels=labels))
    return out


def write_chunkwise_alignments(path, alignments) -> None:
    with open(path, "w") as f:
        for a in alignments:
            f.write(
                json.dumps({"id": a.utt_id, "symbols": [int(s) for s in a.symbols], "eoc_id": a.eoc_id})
                + "\n"
            )


def read_chunkwise_alignments(path) -> list[ChunkwiseAlignment]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        e = json.loads(line)
        for key in ("id", "symbols", "eoc_id"):
            if key not in e:
                raise DataError(f"{path}:{lineno}: alignment entry missing {key!r}")
        a = ChunkwiseAlignment(utt_id=e["id"], symbols=[int(s) for s in e["symbols"]], eoc_id=int(e["eoc_id"]))
        a.validate()
        out.append(a)
    return out


# ---------------------------------------------------------------------------
# decode output and reports


def write_decodes(path, records) -> None:
    """Records: dicts {"id", "tokens", "score", "emit_chunks"}."""
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_decodes(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        e = json.loads(line)
        for key in ("id", "tokens", "score", "emit_chunks"):
            if key not in e:
                raise DataError(f"{path}:{lineno}: decode entry missing {key!r}")
        out.append(e)
    return out


def write_report(path, wer_value, counts, latency=None) -> None:
    report = {
        "wer": wer_value,
        "sub": counts.substitutions,
        "del": counts.deletions,
        "ins": counts.insertions,
    }
    if latency is not None:
        p50, p95, p99 = latency
        report["latency"] = {"p50": p50, "p95": p95, "p99": p99}
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# run configuration: key=value text files overridden by CLI flags


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_config_file(path) -> dict:
    return parse_config_text(Path(path).read_text(), source=str(path))


def write_loss_log(path, rows) -> None:
    """Rows: (epoch, step, loss, lr)."""
    with open(path, "w") as f:
        f.write("epoch,step,loss,lr\n")
        for epoch, step, loss, lr in rows:
            f.write(f"{epoch},{step},{loss:.6f},{lr:.8f}\n")


def read_loss_log(path) -> list[tuple]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "epoch,step,loss,lr":
        raise DataError(f"not a loss log: {path}")
    out = []
    for line in lines[1:]:
        if not line.strip():
            continue
        epoch, step, loss, lr = line.split(",")
        out.append((int(epoch), int(step), float(loss), float(lr)))
    return out

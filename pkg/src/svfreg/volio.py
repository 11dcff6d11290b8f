"""Volume file format and run manifests.

Volumes are stored in a minimal self-describing format ("DVOL1"): one
JSON header line terminated by a newline, then the raw payload as
little-endian float32, x-fastest within each channel, channels
concatenated (channel-major). Scalar volumes have 1 channel, vector
fields 3. Reading back a written file is bit-exact for float32 payloads.

Run manifests capture everything needed to reproduce a run: command,
tool version, config snapshot, seeds, input and output paths. JSON
serialization is key-sorted so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import ScalarVolume, VectorField

MAGIC = "DVOL1"


class VolumeFormatError(Exception):
    """A volume file violated the format contract."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def write_volume(path, vol, name: str | None = None) -> None:
    """Write a ScalarVolume or VectorField to a DVOL1 file."""
    if isinstance(vol, ScalarVolume):
        channels, planes = 1, [vol.data]
    elif isinstance(vol, VectorField):
        channels, planes = 3, [vol.data[c] for c in range(3)]
    else:
        raise TypeError(f"cannot serialize {type(vol).__name__}")
    header = {
        "magic": MAGIC,
        "dims": [int(d) for d in vol.dims],
        "spacing": [float(s) for s in vol.spacing],
        "channels": channels,
        "dtype": "f32",
        "byteorder": "little",
    }
    if name:
        header["name"] = name
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for plane in planes:
            fh.write(plane.astype("<f4").ravel(order="F").tobytes())


def read_volume(path):
    """Read a DVOL1 file; returns ScalarVolume or VectorField by channel
    count."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise VolumeFormatError("bad-header", f"unreadable header: {exc}") from exc
        if header.get("magic") != MAGIC:
            raise VolumeFormatError("bad-magic", f"bad magic: {header.get('magic')!r}")
        try:
            dims = tuple(int(d) for d in header["dims"])
            spacing = tuple(float(s) for s in header["spacing"])
            channels = int(header["channels"])
            dtype = header["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise VolumeFormatError("bad-header", f"malformed header field: {exc}") from exc
        if len(dims) != 3 or channels not in (1, 3) or dtype != "f32":
            raise VolumeFormatError("bad-header",
                                    f"unsupported header: dims={dims} "
                                    f"channels={channels} dtype={dtype}")
        raw = fh.read()
    nvox = dims[0] * dims[1] * dims[2]
    expected = channels * nvox * 4
    if len(raw) != expected:
        raise VolumeFormatError("payload-mismatch",
                                f"payload length mismatch: expected {expected} bytes, "
                                f"got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(channels, nvox)
    planes = [row.reshape(dims, order="F") for row in flat]
    if channels == 1:
        return ScalarVolume(planes[0], spacing)
    return VectorField(np.stack(planes), spacing)


@dataclass
class RunManifest:
    """Reproducibility record for one CLI run."""

    command: str
    version: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def write_json(path, obj) -> None:
    """Key-sorted JSON with a trailing newline; identical content writes
    identical bytes."""
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_manifest(path, manifest: RunManifest) -> None:
    write_json(path, manifest.to_dict())


def read_manifest(path) -> RunManifest:
    return RunManifest(**read_json(path))

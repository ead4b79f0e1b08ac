"""Simulation records and their length-prefixed binary file format.

Layout of a ``.simrec`` file (all integers little-endian)::

    magic      8 bytes   b"AMRSIM\\x00\\x01"
    section*   tag (4 bytes) | payload length (u64) | payload

The first section is ``HEAD`` holding UTF-8 JSON (domain, scenario,
material, refinement criterion, frame count, free-form metadata).  Each
following ``FRAM`` section holds, in order: cell count (u64), cells as
``int32[n, 3]`` of ``(level, i, j)``, vertex count (u64), vertex keys as
``int64`` (``y * (finest + 1) + x`` in finest units), then ``float64`` arrays
phi, u, v, followed by load ``(u0, v0)``, applied top displacement
``(ux, uy)`` and stored energy (NaN when absent).
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mesh import DomainSpec, RefineCriterion, RefinedMesh, mirror_mesh
from .scenario import MaterialParams, ScenarioConfig

MAGIC = b"AMRSIM\x00\x01"


class RecordFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Frame:
    mesh: RefinedMesh
    phi: np.ndarray
    u: np.ndarray
    v: np.ndarray
    load: tuple[float, float] = (0.0, 0.0)
    applied: tuple[float, float] = (0.0, 0.0)
    energy: float = float("nan")

    def __post_init__(self):
        n = self.mesh.n_vertices
        for name in ("phi", "u", "v"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise RecordFormatError(f"{name} has shape {arr.shape}; mesh has {n} vertices")
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "load", (float(self.load[0]), float(self.load[1])))
        object.__setattr__(self, "applied", (float(self.applied[0]), float(self.applied[1])))
        object.__setattr__(self, "energy", float(self.energy))

    def fields(self) -> np.ndarray:
        return np.stack([self.phi, self.u, self.v], axis=1)


@dataclass(eq=False)
class SimulationRecord:
    spec: DomainSpec
    scenario: ScenarioConfig
    material: MaterialParams
    frames: list[Frame]
    criterion: RefineCriterion = field(default_factory=RefineCriterion)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise RecordFormatError("a record needs at least one frame")
        for f in self.frames:
            if f.mesh.spec != self.spec:
                raise RecordFormatError("all frames must share the record's domain")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def header(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "scenario": self.scenario.to_dict(),
            "material": self.material.to_dict(),
            "criterion": {"threshold": self.criterion.threshold, "band_width": self.criterion.band_width},
            "n_frames": self.n_frames,
            "meta": self.meta,
        }


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _frame_bytes(f: Frame) -> bytes:
    parts = [struct.pack("<Q", f.mesh.n_cells), f.mesh.cells.astype("<i4").tobytes(),
             struct.pack("<Q", f.mesh.n_vertices), f.mesh.vertex_keys.astype("<i8").tobytes()]
    for arr in (f.phi, f.u, f.v):
        parts.append(arr.astype("<f8").tobytes())
    parts.append(np.array([*f.load, *f.applied, f.energy], dtype="<f8").tobytes())
    return b"".join(parts)


def to_bytes(rec: SimulationRecord) -> bytes:
    head = json.dumps(rec.header(), sort_keys=True).encode("utf-8")
    out = [MAGIC, _section(b"HEAD", head)]
    out.extend(_section(b"FRAM", _frame_bytes(f)) for f in rec.frames)
    return b"".join(out)


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates 0600; give the file the permissions a plain open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_record(rec: SimulationRecord, path: str | os.PathLike) -> None:
    atomic_write(path, to_bytes(rec))


def _parse_frame(payload: bytes, spec: DomainSpec) -> Frame:
    off = 0
    (nc,) = struct.unpack_from("<Q", payload, off); off += 8
    cells = np.frombuffer(payload, dtype="<i4", count=3 * nc, offset=off).reshape(nc, 3).astype(np.int64)
    off += 12 * nc
    (nv,) = struct.unpack_from("<Q", payload, off); off += 8
    keys = np.frombuffer(payload, dtype="<i8", count=nv, offset=off); off += 8 * nv
    mesh = RefinedMesh(spec, cells)
    if not np.array_equal(mesh.vertex_keys, keys):
        raise RecordFormatError("stored vertex ids do not match the stored cells")
    arrs = []
    for _ in range(3):
        arrs.append(np.frombuffer(payload, dtype="<f8", count=nv, offset=off).astype(np.float64))
        off += 8 * nv
    tail = np.frombuffer(payload, dtype="<f8", count=5, offset=off).astype(np.float64)
    off += 40
    if off != len(payload):
        raise RecordFormatError("trailing bytes in frame section")
    return Frame(mesh, arrs[0], arrs[1], arrs[2], (tail[0], tail[1]), (tail[2], tail[3]), tail[4])


def from_bytes(data: bytes) -> SimulationRecord:
    if data[:8] != MAGIC:
        raise RecordFormatError("not a simulation record (bad magic)")
    off = 8
    head = None
    frames: list[Frame] = []
    spec = None
    while off < len(data):
        if off + 12 > len(data):
            raise RecordFormatError("truncated section header")
        tag = data[off:off + 4]
        (n,) = struct.unpack_from("<Q", data, off + 4)
        payload = data[off + 12: off + 12 + n]
        if len(payload) != n:
            raise RecordFormatError("truncated section payload")
        off += 12 + n
        if tag == b"HEAD":
            head = json.loads(payload.decode("utf-8"))
            spec = DomainSpec(**head["spec"])
        elif tag == b"FRAM":
            if spec is None:
                raise RecordFormatError("frame before header")
            frames.append(_parse_frame(payload, spec))
        else:
            raise RecordFormatError(f"unknown section {tag!r}")
    if head is None:
        raise RecordFormatError("missing header")
    if head["n_frames"] != len(frames):
        raise RecordFormatError(f"header announces {head['n_frames']} frames, found {len(frames)}")
    return SimulationRecord(spec, ScenarioConfig(**head["scenario"]), MaterialParams(**head["material"]),
                            frames, RefineCriterion(**head["criterion"]), head.get("meta", {}))


def load_record(path: str | os.PathLike) -> SimulationRecord:
    return from_bytes(Path(path).read_bytes())


def mirror_frame(f: Frame) -> Frame:
    mesh, perm = mirror_mesh(f.mesh)
    return Frame(mesh, f.phi[perm], -f.u[perm], f.v[perm], (-f.load[0], f.load[1]),
                 (-f.applied[0], f.applied[1]), f.energy)


def mirror_record(rec: SimulationRecord) -> SimulationRecord:
    """Reflect about the vertical centre line: x -> side - x, u -> -u, u0 -> -u0."""
    meta = dict(rec.meta)
    meta["mirrored"] = not meta.get("mirrored", False)
    if not meta["mirrored"]:
        del meta["mirrored"]
    return replace(rec, scenario=rec.scenario.mirrored(), frames=[mirror_frame(f) for f in rec.frames], meta=meta)

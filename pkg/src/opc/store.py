"""Versioned binary containers for banks, trajectory archives and models.

Layout (all little-endian)::

    magic   4 bytes
    version uint16
    hlen    uint32
    header  hlen bytes of UTF-8 JSON (sorted keys); lists the arrays
    arrays  raw '<f8' / '<i8' buffers in header order
    crc32   uint32 over everything above

Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .compression import AutoencoderModel
from .curation import CuratedDataset
from .envs import Trajectory
from .policy import PolicyArch

__all__ = [
    "StoreError",
    "FormatError",
    "VersionError",
    "ChecksumError",
    "TruncatedError",
    "ArchMismatchError",
    "PolicyBank",
    "TrajectoryArchive",
    "save_bank",
    "load_bank",
    "save_archive",
    "load_archive",
    "save_model",
    "load_model",
    "save_curated",
    "load_curated",
    "write_container",
    "read_container",
    "file_sha256",
    "model_meta",
    "VERSION",
]

VERSION = 1
MAGIC = {"bank": b"OPCB", "archive": b"OPCT", "model": b"OPCM", "curated": b"OPCC"}
_HEAD = struct.Struct("<4sHI")
_CRC = struct.Struct("<I")
_DTYPES = {"f8": np.dtype("<f8"), "i8": np.dtype("<i8")}
_NATIVE = {"f8": np.float64, "i8": np.int64}


class StoreError(Exception):
    pass


class FormatError(StoreError):
    """Unrecognized format: the magic bytes do not match."""


class VersionError(StoreError):
    pass


class ChecksumError(StoreError):
    pass


class TruncatedError(StoreError):
    pass


class ArchMismatchError(StoreError):
    pass


def _atomic_write(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    entries, buffers = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = "i8" if np.issubdtype(arr.dtype, np.integer) else "f8"
        buffers.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape)})
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")).encode()
    body = _HEAD.pack(MAGIC[kind], VERSION, len(header)) + header + b"".join(buffers)
    _atomic_write(path, body + _CRC.pack(zlib.crc32(body)))


def read_container(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < _HEAD.size + _CRC.size:
        raise TruncatedError(f"{path}: file too short ({len(blob)} bytes)")
    magic, version, hlen = _HEAD.unpack_from(blob)
    if magic != MAGIC[kind]:
        raise FormatError(f"{path}: unrecognized format (magic {magic!r}, expected {MAGIC[kind]!r} for {kind} files)")
    if version != VERSION:
        raise VersionError(f"{path}: format version {version} is not supported (expected {VERSION})")
    body, (crc,) = blob[: -_CRC.size], _CRC.unpack(blob[-_CRC.size :])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt")
    start = _HEAD.size
    if start + hlen > len(body):
        raise TruncatedError(f"{path}: header runs past end of file")
    header = json.loads(body[start : start + hlen])
    pos = start + hlen
    arrays = {}
    for e in header["arrays"]:
        dt = _DTYPES[e["dtype"]]
        size = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if pos + size > len(body):
            raise TruncatedError(f"{path}: array {e['name']!r} truncated")
        flat = np.frombuffer(body, dtype=dt, count=size // dt.itemsize, offset=pos)
        arrays[e["name"]] = flat.astype(_NATIVE[e["dtype"]]).reshape(e["shape"])
        pos += size
    if pos != len(body):
        raise TruncatedError(f"{path}: {len(body) - pos} unexpected trailing bytes")
    return header["meta"], arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ------------------------------------------------------------------- banks


@dataclass
class PolicyBank:
    arch: PolicyArch
    thetas: np.ndarray  # (count, n)
    seed: int
    env: str = ""

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=np.float64))
        if len(self.thetas) == 0:
            raise ValueError("a policy bank must hold at least one policy")
        if self.thetas.shape[1] != self.arch.param_count:
            raise ArchMismatchError(f"rows have {self.thetas.shape[1]} weights, arch needs {self.arch.param_count}")

    @property
    def count(self) -> int:
        return len(self.thetas)


def _arch_meta(arch: PolicyArch) -> dict:
    return {"obs_dim": arch.obs_dim, "act_dim": arch.act_dim, "hidden": list(arch.hidden)}


def _arch_from(meta: dict) -> PolicyArch:
    return PolicyArch(meta["obs_dim"], meta["act_dim"], tuple(meta["hidden"]))


def save_bank(path, bank: PolicyBank) -> None:
    write_container(path, "bank", {"arch": _arch_meta(bank.arch), "seed": bank.seed, "env": bank.env},
                    {"thetas": bank.thetas})


def load_bank(path) -> PolicyBank:
    meta, arrays = read_container(path, "bank")
    return PolicyBank(_arch_from(meta["arch"]), arrays["thetas"], meta["seed"], meta["env"])


# ----------------------------------------------------------------- archives


@dataclass
class TrajectoryArchive:
    """Packed trajectories; trajectory ``j`` spans ``state_offsets[j]:state_offsets[j+1]``."""

    env: str
    policy_ids: np.ndarray  # (J,) owner of each trajectory
    state_offsets: np.ndarray  # (J+1,)
    states: np.ndarray  # (sum T_j + 1, d) raw states
    actions: np.ndarray  # (sum T_j, a)
    episode_seeds: np.ndarray  # (J,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.policy_ids = np.asarray(self.policy_ids, dtype=np.int64)
        self.state_offsets = np.asarray(self.state_offsets, dtype=np.int64)
        self.episode_seeds = np.asarray(self.episode_seeds, dtype=np.int64)
        j = len(self.policy_ids)
        if self.state_offsets.shape != (j + 1,) or self.state_offsets[-1] != len(self.states):
            raise ValueError("state offsets are inconsistent with the packed state array")
        if len(self.actions) != len(self.states) - j:
            raise ValueError("packed actions must have one row fewer than states per trajectory")
        if np.any(np.diff(self.state_offsets) < 2):
            raise ValueError("every trajectory needs at least one transition")

    @classmethod
    def from_trajectories(cls, env: str, policy_ids, trajectories, meta=None) -> TrajectoryArchive:
        offsets = np.concatenate([[0], np.cumsum([len(t.states) for t in trajectories])])
        return cls(env, policy_ids, offsets, np.concatenate([t.states for t in trajectories]),
                   np.concatenate([t.actions for t in trajectories]),
                   [t.episode_seed for t in trajectories], dict(meta or {}))

    def __len__(self) -> int:
        return len(self.policy_ids)

    def trajectory(self, j: int) -> Trajectory:
        a, b = self.state_offsets[j], self.state_offsets[j + 1]
        return Trajectory(self.states[a:b], self.actions[a - j : b - j - 1], int(self.episode_seeds[j]))

    def for_policy(self, pid: int) -> list[Trajectory]:
        return [self.trajectory(int(j)) for j in np.flatnonzero(self.policy_ids == pid)]

    def check_bank(self, bank: PolicyBank) -> None:
        bad = self.policy_ids[(self.policy_ids < 0) | (self.policy_ids >= bank.count)]
        if bad.size:
            raise ArchMismatchError(f"archive references policies {bad[:5].tolist()} absent from the bank")


def save_archive(path, archive: TrajectoryArchive) -> None:
    write_container(path, "archive", {"env": archive.env, **archive.meta},
                    {"policy_ids": archive.policy_ids, "state_offsets": archive.state_offsets,
                     "states": archive.states, "actions": archive.actions, "episode_seeds": archive.episode_seeds})


def load_archive(path) -> TrajectoryArchive:
    meta, a = read_container(path, "archive")
    env = meta.pop("env")
    return TrajectoryArchive(env, a["policy_ids"], a["state_offsets"], a["states"], a["actions"],
                             a["episode_seeds"], meta)


# ------------------------------------------------------------------ models


def save_model(path, model: AutoencoderModel, meta=None) -> None:
    arrays = {"mean": model.mean, "std": model.std}
    arrays.update({f"p{i}": p for i, p in enumerate(model.params)})
    write_container(path, "model", {"n": model.n, "k": model.k, "hidden": list(model.hidden), **(meta or {})},
                    arrays)


def load_model(path, arch: PolicyArch | None = None) -> AutoencoderModel:
    meta, a = read_container(path, "model")
    if arch is not None and arch.param_count != meta["n"]:
        raise ArchMismatchError(f"model decodes {meta['n']} weights, policy arch has {arch.param_count}")
    params = [a[f"p{i}"] for i in range(sum(1 for k in a if k.startswith("p")))]
    return AutoencoderModel(meta["n"], meta["k"], params, a["mean"], a["std"], tuple(meta["hidden"]))


def model_meta(path) -> dict:
    return read_container(path, "model")[0]


# ----------------------------------------------------------------- datasets


def save_curated(path, data: CuratedDataset) -> None:
    write_container(path, "curated", {"percentile": data.percentile, "provenance": data.provenance},
                    {"ids": np.asarray(data.ids, dtype=np.int64)})


def load_curated(path) -> CuratedDataset:
    meta, a = read_container(path, "curated")
    return CuratedDataset(a["ids"], meta["percentile"], meta["provenance"])

"""Binary trajectory ("DIT1") and checkpoint ("DITC") files.

All integers and floats are little-endian.

DIT1::

    b"DIT1", version u32, p u64, T u64, N u64, seed u64,
    window start u64, window stop u64, theta0 f64[p]
    then for each logged step t in [start, stop):
        t u64, lr f64, |S_t| u32, indices u32[|S_t|], theta^[t+1] f64[p]

DITC::

    b"DITC", version u32, p u64, T u64, N u64, seed u64, interval u64, theta0 f64[p]
    then for each step t in [0, T):
        t u64, lr f64, |S_t| u32, indices u32[|S_t|]
    then checkpoint count u64, and per checkpoint: s u64, theta^[s] f64[p]

The model architecture is not stored; readers pass the ModelSpec.
"""

from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError
from .trainer import CheckpointStore, StepRecord, TrajectoryStore

VERSION = 1


class FormatError(ValueError):
    """A trajectory or checkpoint file is malformed or does not match the model."""


def _f64(a):
    return np.asarray(a, dtype="<f8").tobytes()


def _write_atomic(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def dumps_trajectory(store: TrajectoryStore) -> bytes:
    buf = io.BytesIO()
    buf.write(b"DIT1")
    buf.write(struct.pack("<IQQQQQQ", VERSION, store.p, store.T, store.N, store.seed, *store.window))
    buf.write(_f64(store.theta0))
    for r in store.records:
        buf.write(struct.pack("<QdI", r.t, r.lr, len(r.batch)))
        buf.write(np.asarray(r.batch, dtype="<u4").tobytes())
        buf.write(_f64(r.params_after))
    return buf.getvalue()


def write_trajectory(store, path):
    _write_atomic(path, dumps_trajectory(store))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f64(self, n):
        a = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        a.setflags(write=False)
        return a

    def indices(self, n):
        return np.frombuffer(self.take(4 * n), dtype="<u4").astype(np.int64)


def _open(path, magic):
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return r


def read_trajectory(path, model) -> TrajectoryStore:
    r = _open(path, b"DIT1")
    p, T, N, seed, w0, w1 = r.unpack("<QQQQQQ")
    if p != model.num_params:
        raise FormatError(f"{path}: p={p} but model has {model.num_params} parameters")
    theta0 = r.f64(p)
    store = TrajectoryStore(model, N, T, seed, theta0, (w0, w1))
    for expected_t in range(w0, w1):
        t, lr, n = r.unpack("<QdI")
        if t != expected_t:
            raise FormatError(f"{path}: record for step {t}, expected {expected_t}")
        batch = r.indices(n)
        store.records.append(StepRecord(t, batch, lr, r.f64(p)))
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    return store


def dumps_checkpoints(ck: CheckpointStore) -> bytes:
    buf = io.BytesIO()
    buf.write(b"DITC")
    buf.write(struct.pack("<IQQQQQ", VERSION, ck.p, ck.T, ck.N, ck.seed, ck.interval))
    buf.write(_f64(ck.theta0))
    for t, (S, lr) in enumerate(zip(ck.batches, ck.lrs)):
        buf.write(struct.pack("<QdI", t, float(lr), len(S)))
        buf.write(np.asarray(S, dtype="<u4").tobytes())
    steps = sorted(ck.checkpoints)
    buf.write(struct.pack("<Q", len(steps)))
    for s in steps:
        buf.write(struct.pack("<Q", s))
        buf.write(_f64(ck.checkpoints[s]))
    return buf.getvalue()


def write_checkpoints(ck, path):
    _write_atomic(path, dumps_checkpoints(ck))


def read_checkpoints(path, model) -> CheckpointStore:
    r = _open(path, b"DITC")
    p, T, N, seed, C = r.unpack("<QQQQQ")
    if p != model.num_params:
        raise FormatError(f"{path}: p={p} but model has {model.num_params} parameters")
    theta0 = r.f64(p)
    batches, lrs = [], []
    for expected_t in range(T):
        t, lr, n = r.unpack("<QdI")
        if t != expected_t:
            raise FormatError(f"{path}: step {t}, expected {expected_t}")
        batches.append(r.indices(n))
        lrs.append(lr)
    (count,) = r.unpack("<Q")
    ckpts = {}
    for _ in range(count):
        (s,) = r.unpack("<Q")
        ckpts[s] = r.f64(p)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: {len(r.raw) - r.pos} trailing bytes")
    if 0 not in ckpts:
        ckpts[0] = theta0
    return CheckpointStore(model, N, T, seed, C, theta0, batches, np.array(lrs), ckpts)


def checkpoint_from_trajectory(store: TrajectoryStore, interval) -> CheckpointStore:
    """Thin a full-window trajectory into a checkpoint store."""
    if store.window != (0, store.T):
        raise ContractError("needs a full storage window")
    ckpts = {0: store.theta0}
    for s in range(1, store.T + 1):
        if s % interval == 0 or s == store.T:
            ckpts[s] = store.params_at(s)
    return CheckpointStore(store.model, store.N, store.T, store.seed, interval, store.theta0,
                           store.batches(), np.array([r.lr for r in store.records]), ckpts)

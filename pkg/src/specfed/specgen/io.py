"""Binary little-endian dataset files.

Layout::

    header  "SPCF" | version u16 | M u16 | J u16 | record_count u64
            | snr_count u16 | snr_count x f32
    record  slot u64 | snr_db f32 | avg_power f32 | label u32 (low M bits)
            | 2*J x f32 interleaved I, Q
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .plan import SubchannelPlan

MAGIC = b"SPCF"
VERSION = 1
_HEAD = struct.Struct("<4sHHHQ")


def record_dtype(J: int) -> np.dtype:
    return np.dtype([("slot", "<u8"), ("snr_db", "<f4"), ("avg_power", "<f4"), ("label", "<u4"),
                     ("iq", "<f4", (2 * J,))])


def pack_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.uint64)
    weights = np.uint64(1) << np.arange(labels.shape[1], dtype=np.uint64)
    return (labels * weights).sum(axis=1).astype(np.uint32)


def unpack_labels(mask: np.ndarray, M: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.uint32)
    return ((mask[:, None] >> np.arange(M, dtype=np.uint32)) & 1).astype(np.uint8)


def write_dataset(path, ds: Dataset, snr_levels=None) -> None:
    snr_levels = list(ds.snr_levels if snr_levels is None else snr_levels)
    M, J, n = ds.plan.M, (ds.J or 0), len(ds)
    if n == 0 and J == 0:
        raise ValueError("an empty dataset must still carry its capture length")
    recs = np.zeros(n, dtype=record_dtype(J))
    if n:
        recs["slot"] = ds.slots
        recs["snr_db"] = ds.snr_db
        recs["avg_power"] = ds.avg_power
        recs["label"] = pack_labels(ds.labels)
        inter = np.empty((n, 2 * J), dtype="<f4")
        inter[:, 0::2] = ds.iq.real
        inter[:, 1::2] = ds.iq.imag
        recs["iq"] = inter
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, M, J, n))
        fh.write(struct.pack("<H", len(snr_levels)))
        fh.write(np.asarray(snr_levels, dtype="<f4").tobytes())
        fh.write(recs.tobytes())


def read_header(raw: bytes) -> dict:
    magic, version, M, J, n = _HEAD.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError("not an SPCF dataset file")
    if version != VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    (n_snr,) = struct.unpack_from("<H", raw, _HEAD.size)
    off = _HEAD.size + 2
    snrs = np.frombuffer(raw, dtype="<f4", count=n_snr, offset=off).astype(float).tolist()
    return {"version": version, "M": M, "J": J, "record_count": n, "snr_levels": snrs,
            "data_offset": off + 4 * n_snr}


def read_dataset(path, plan: SubchannelPlan | None = None, uav_id: int | None = None,
                 train_slots=None) -> Dataset:
    """Load a dataset file; ``train_slots`` restores the train/eval split."""
    path = Path(path)
    raw = path.read_bytes()
    h = read_header(raw)
    dt = record_dtype(h["J"])
    if len(raw) != h["data_offset"] + h["record_count"] * dt.itemsize:
        raise ValueError(f"{path}: file size does not match the header")
    recs = np.frombuffer(raw, dtype=dt, count=h["record_count"], offset=h["data_offset"])
    plan = plan or SubchannelPlan(M=h["M"])
    if plan.M != h["M"]:
        raise ValueError(f"{path}: file has M={h['M']}, plan has M={plan.M}")
    iq = recs["iq"][:, 0::2].astype(float) + 1j * recs["iq"][:, 1::2].astype(float)
    if uav_id is None:
        stem = path.stem
        uav_id = int(stem[3:]) if stem.startswith("uav") and stem[3:].isdigit() else 0
    slots = recs["slot"].astype(np.int64)
    split = None
    if train_slots is not None:
        is_train = np.isin(slots, np.asarray(train_slots, dtype=np.int64))
        split = (np.flatnonzero(is_train), np.flatnonzero(~is_train))
    return Dataset(iq.reshape(h["record_count"], h["J"]), unpack_labels(recs["label"], h["M"]),
                   recs["snr_db"].astype(float), recs["avg_power"].astype(float), slots, plan, uav_id,
                   h["snr_levels"], split)


def read_dataset_dir(directory, plan: SubchannelPlan | None = None) -> list[Dataset]:
    d = Path(directory)
    files = sorted(d.glob("uav*.spcf"), key=lambda p: int(p.stem[3:]))
    if not files:
        raise FileNotFoundError(f"no uav*.spcf files in {d}")
    split_file = d / "split_train_slots.npy"
    train_slots = np.load(split_file) if split_file.exists() else None
    return [read_dataset(f, plan, train_slots=train_slots) for f in files]

#!/usr/bin/env python3
"""
signal_data.py - ECG/PPG segment datasets for cuffless blood-pressure regression

A segment is one 10-second, 125 Hz window of two synchronized channels (ECG, PPG),
each z-scored, labelled with SBP and DBP in mmHg. Datasets are stored column-wise
(stacked float32 arrays) and are immutable once built.

Also provides:
    - a synthetic ECG/PPG generator with a known pulse-transit -> BP mechanism
    - deterministic train/val/test splitting
    - the "BPSEG1" binary container
    - a pulse-transit feature detector (R-peak to PPG-foot delay)

Container format "BPSEG1":
    bytes 0-5   magic ASCII "BPSEG1"
    byte  6     version (1)
    byte  7     reserved (0)
    bytes 8-15  little-endian u64 segment count N
    then N records of 1250 f32 ECG, 1250 f32 PPG, f32 SBP, f32 DBP (all little-endian)
"""

import math
import struct
from dataclasses import dataclass
from typing import Iterator

from common import (
    BadMagicError,
    ConfigError,
    ContainerError,
    EmptyDatasetError,
    InvalidLabelError,
    NonFiniteSampleError,
    ShapeError,
    TruncatedPayloadError,
    atomic_write_bytes,
    log,
)
import numpy as np
from scipy.signal import find_peaks, savgol_filter

# --- Constants ---

SAMPLE_RATE_HZ = 125
SEGMENT_SECONDS = 10
SEGMENT_SAMPLES = SAMPLE_RATE_HZ * SEGMENT_SECONDS  # 1250
NUM_CHANNELS = 2

SBP_RANGE = (60.0, 250.0)
DBP_RANGE = (30.0, 150.0)

CONTAINER_MAGIC = b"BPSEG1"
CONTAINER_VERSION = 1
HEADER = struct.Struct("<6sBBQ")
RECORD_DTYPE = np.dtype(
    [
        ("ecg", "<f4", (SEGMENT_SAMPLES,)),
        ("ppg", "<f4", (SEGMENT_SAMPLES,)),
        ("sbp", "<f4"),
        ("dbp", "<f4"),
    ]
)
RECORD_BYTES = RECORD_DTYPE.itemsize  # 2*1250*4 + 8 = 10008

# Synthetic generator ranges
HR_RANGE_BPM = (50.0, 110.0)
TRANSIT_RANGE_S = (0.15, 0.35)
AMPLITUDE_RANGE = (0.8, 1.2)
CHANNEL_NOISE_SD = 0.05
R_PEAK_WIDTH_S = 0.012
SYSTOLIC_OFFSET_S, SYSTOLIC_WIDTH_S = 0.12, 0.05
DICROTIC_OFFSET_S, DICROTIC_WIDTH_S, DICROTIC_RATIO = 0.40, 0.08, 0.4


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalSegment:
    """One labelled window; a read-only view into a SegmentDataset."""

    ecg: np.ndarray
    ppg: np.ndarray
    sbp: float
    dbp: float

    @property
    def signals(self) -> np.ndarray:
        """Channels stacked as [2, 1250] (ECG first)."""
        return np.stack([self.ecg, self.ppg])


class SegmentDataset:
    """Ordered, immutable collection of segments.

    Order is part of identity: two datasets are equal only if every sample and
    label matches bit-for-bit in the same order. ``source_tag`` is metadata and
    does not take part in equality.
    """

    def __init__(
        self,
        ecg: np.ndarray,
        ppg: np.ndarray,
        sbp: np.ndarray,
        dbp: np.ndarray,
        source_tag: str = "external",
    ):
        self.ecg = np.ascontiguousarray(ecg, dtype=np.float32)
        self.ppg = np.ascontiguousarray(ppg, dtype=np.float32)
        self.sbp = np.ascontiguousarray(sbp, dtype=np.float32)
        self.dbp = np.ascontiguousarray(dbp, dtype=np.float32)
        self.source_tag = source_tag
        _validate_columns(self.ecg, self.ppg, self.sbp, self.dbp)
        for arr in (self.ecg, self.ppg, self.sbp, self.dbp):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return int(self.sbp.shape[0])

    def __getitem__(self, i: int) -> SignalSegment:
        return SignalSegment(self.ecg[i], self.ppg[i], float(self.sbp[i]), float(self.dbp[i]))

    def __iter__(self) -> Iterator[SignalSegment]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SegmentDataset):
            return NotImplemented
        return all(
            np.array_equal(a.view(np.uint32), b.view(np.uint32))
            for a, b in (
                (self.ecg, other.ecg),
                (self.ppg, other.ppg),
                (self.sbp, other.sbp),
                (self.dbp, other.dbp),
            )
        )

    def __repr__(self) -> str:
        return f"SegmentDataset(n={len(self)}, source_tag={self.source_tag!r})"

    @property
    def signals(self) -> np.ndarray:
        """All inputs as [N, 2, 1250] float32."""
        return np.stack([self.ecg, self.ppg], axis=1)

    @property
    def labels(self) -> np.ndarray:
        """Targets as [N, 2] float32, columns (SBP, DBP) in mmHg."""
        return np.stack([self.sbp, self.dbp], axis=1)

    def subset(self, indices: np.ndarray) -> "SegmentDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SegmentDataset(
            self.ecg[idx], self.ppg[idx], self.sbp[idx], self.dbp[idx], source_tag=self.source_tag
        )

    @classmethod
    def from_segments(cls, segments: list[SignalSegment], source_tag: str = "external"):
        if not segments:
            raise EmptyDatasetError("Dataset has no segments")
        return cls(
            np.stack([s.ecg for s in segments]),
            np.stack([s.ppg for s in segments]),
            np.array([s.sbp for s in segments]),
            np.array([s.dbp for s in segments]),
            source_tag=source_tag,
        )


def _validate_columns(ecg: np.ndarray, ppg: np.ndarray, sbp: np.ndarray, dbp: np.ndarray) -> None:
    n = sbp.shape[0] if sbp.ndim == 1 else -1
    if n < 1:
        raise EmptyDatasetError("Dataset has no segments")
    for name, arr in (("ecg", ecg), ("ppg", ppg)):
        if arr.shape != (n, SEGMENT_SAMPLES):
            raise ShapeError(f"{name} has shape {arr.shape}, expected ({n}, {SEGMENT_SAMPLES})")
    if dbp.shape != (n,):
        raise ShapeError(f"dbp has shape {dbp.shape}, expected ({n},)")

    finite = np.isfinite(ecg).all(axis=1) & np.isfinite(ppg).all(axis=1)
    if not finite.all():
        raise NonFiniteSampleError(f"Segment {int(np.argmin(finite))} has a non-finite sample")
    if not (np.isfinite(sbp).all() and np.isfinite(dbp).all()):
        raise InvalidLabelError("Non-finite BP label")

    bad = np.flatnonzero(sbp <= dbp)
    if bad.size:
        i = int(bad[0])
        raise InvalidLabelError(f"Segment {i}: sbp {sbp[i]} <= dbp {dbp[i]}")
    out_of_range = (
        (sbp < SBP_RANGE[0]) | (sbp > SBP_RANGE[1]) | (dbp < DBP_RANGE[0]) | (dbp > DBP_RANGE[1])
    )
    if out_of_range.any():
        i = int(np.argmax(out_of_range))
        raise InvalidLabelError(f"Segment {i}: BP ({sbp[i]}, {dbp[i]}) outside physiological range")


def zscore(x: np.ndarray) -> np.ndarray:
    """Per-row z-scoring; constant rows map to zeros."""
    mean = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return (x - mean) / np.where(sd > 0, sd, 1.0)


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _pulse_train(t: np.ndarray, centers: np.ndarray, width: float, amp: float) -> np.ndarray:
    return amp * np.exp(-0.5 * ((t[:, None] - centers[None, :]) / width) ** 2).sum(axis=1)


def generate_synthetic(n: int, seed: int) -> SegmentDataset:
    """Generate ``n`` synthetic segments with a known transit-time -> BP mapping.

    Per segment: heart rate HR ~ U[50, 110] bpm, pulse transit delay tau ~ U[0.15, 0.35] s
    and pulse amplitude a ~ U[0.8, 1.2];
    SBP = 180 - 250*tau + 10*(a - 1) + N(0, 2), DBP = 0.55*SBP + 10 + N(0, 1.5), with the
    DBP noise re-drawn until SBP > DBP + 10. The ECG is a train of narrow Gaussian R-peaks
    and the PPG a train of systolic + dicrotic Gaussian pulses whose foot lags each R-peak
    by tau. Both channels get N(0, 0.05) noise and are z-scored.

    Raises:
        EmptyDatasetError: If n < 1.
    """
    if n < 1:
        raise EmptyDatasetError(f"Cannot generate {n} segments")

    rng = np.random.default_rng(seed)
    t = np.arange(SEGMENT_SAMPLES, dtype=np.float64) / SAMPLE_RATE_HZ

    ecg = np.empty((n, SEGMENT_SAMPLES), dtype=np.float32)
    ppg = np.empty((n, SEGMENT_SAMPLES), dtype=np.float32)
    sbp = np.empty(n, dtype=np.float32)
    dbp = np.empty(n, dtype=np.float32)

    for i in range(n):
        hr = rng.uniform(*HR_RANGE_BPM)
        tau = rng.uniform(*TRANSIT_RANGE_S)
        amp = rng.uniform(*AMPLITUDE_RANGE)

        s = 180.0 - 250.0 * tau + 10.0 * (amp - 1.0) + rng.normal(0.0, 2.0)
        d = 0.55 * s + 10.0 + rng.normal(0.0, 1.5)
        while not s > d + 10.0:
            d = 0.55 * s + 10.0 + rng.normal(0.0, 1.5)

        rr = 60.0 / hr
        phase = rng.uniform(0.0, rr)
        # one beat before the window so its pulse tail is present at t=0
        beats = np.arange(phase - rr, SEGMENT_SECONDS, rr)

        ecg_raw = _pulse_train(t, beats, R_PEAK_WIDTH_S, 1.0)
        # systolic peak sits ~2.4 widths after the foot, so the foot lags the R-peak by tau
        systolic = _pulse_train(t, beats + tau + SYSTOLIC_OFFSET_S, SYSTOLIC_WIDTH_S, amp)
        dicrotic = _pulse_train(
            t, beats + tau + DICROTIC_OFFSET_S, DICROTIC_WIDTH_S, amp * DICROTIC_RATIO
        )
        ppg_raw = systolic + dicrotic

        ecg_raw += rng.normal(0.0, CHANNEL_NOISE_SD, SEGMENT_SAMPLES)
        ppg_raw += rng.normal(0.0, CHANNEL_NOISE_SD, SEGMENT_SAMPLES)

        ecg[i] = zscore(ecg_raw)
        ppg[i] = zscore(ppg_raw)
        sbp[i] = s
        dbp[i] = d

    return SegmentDataset(ecg, ppg, sbp, dbp, source_tag="synthetic")


# ---------------------------------------------------------------------------
# Feature detector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitFeatures:
    heart_rate_bpm: float
    transit_s: float
    amplitude: float
    beats: int


def estimate_transit_features(segment: SignalSegment) -> TransitFeatures:
    """Estimate heart rate, R-peak -> PPG-foot delay and PPG pulse amplitude.

    R-peaks come from ``find_peaks`` on the ECG with a refractory distance matching
    the 110 bpm ceiling. For each R-peak the PPG foot is located with the
    intersecting-tangent method: the tangent at the steepest systolic upstroke
    (within 50-600 ms after the R-peak) is intersected with the preceding minimum.
    Amplitude is the mean foot-to-peak rise, in the segment's z-scored units.

    Returns NaN fields when no complete beat is found.
    """
    fs = SAMPLE_RATE_HZ
    ecg = np.asarray(segment.ecg, dtype=np.float64)
    ppg = savgol_filter(np.asarray(segment.ppg, dtype=np.float64), 9, 3)
    slope = savgol_filter(np.asarray(segment.ppg, dtype=np.float64), 9, 3, deriv=1) * fs

    min_distance = int(fs * 60.0 / HR_RANGE_BPM[1] * 0.8)
    peaks, _ = find_peaks(ecg, height=0.5 * ecg.max(), distance=min_distance)

    lo, hi = int(0.05 * fs), int(0.6 * fs)
    delays: list[float] = []
    rises: list[float] = []
    for r in peaks:
        if r + hi >= ecg.size:
            continue
        window = slice(r + lo, r + hi)
        m = r + lo + int(np.argmax(slope[window]))
        base_idx = r + lo + int(np.argmin(ppg[r + lo : m + 1]))
        if slope[m] <= 0:
            continue
        foot = m - (ppg[m] - ppg[base_idx]) / slope[m] * fs
        delays.append((foot - r) / fs)
        top = m + int(np.argmax(ppg[m : min(m + int(0.3 * fs), ppg.size)]))
        rises.append(ppg[top] - ppg[base_idx])

    if len(peaks) >= 2:
        heart_rate = 60.0 * fs / float(np.median(np.diff(peaks)))
    else:
        heart_rate = math.nan
    if not delays:
        return TransitFeatures(heart_rate, math.nan, math.nan, 0)
    return TransitFeatures(heart_rate, float(np.mean(delays)), float(np.mean(rises)), len(delays))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f <= 0 for f in fractions):
            raise ConfigError(f"Split fractions must be positive, got {fractions}")
        if abs(sum(fractions) - 1.0) > 1e-9:
            raise ConfigError(f"Split fractions must sum to 1, got {sum(fractions)!r}")


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded permutation cut into floor(n*train), floor(n*val) and the remainder."""
    perm = np.random.default_rng(spec.seed).permutation(n)
    # small epsilon so 0.8*100 -> 80 even when the product lands just under an integer
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    n_val = int(math.floor(n * spec.val_fraction + 1e-9))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split(
    ds: SegmentDataset, spec: SplitSpec
) -> tuple[SegmentDataset, SegmentDataset, SegmentDataset]:
    """Split a dataset into (train, val, test).

    A partition that comes out empty (tiny datasets) raises EmptyDatasetError.
    """
    parts = split_indices(len(ds), spec)
    for name, idx in zip(("train", "val", "test"), parts):
        if idx.size == 0:
            raise EmptyDatasetError(f"{name} split of {len(ds)} segments is empty")
    train, val, test = (ds.subset(idx) for idx in parts)
    return train, val, test


# ---------------------------------------------------------------------------
# Container I/O
# ---------------------------------------------------------------------------


def encode_container(ds: SegmentDataset) -> bytes:
    records = np.empty(len(ds), dtype=RECORD_DTYPE)
    records["ecg"] = ds.ecg
    records["ppg"] = ds.ppg
    records["sbp"] = ds.sbp
    records["dbp"] = ds.dbp
    header = HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, 0, len(ds))
    return header + records.tobytes()


def decode_container(payload: bytes, source_tag: str = "external") -> SegmentDataset:
    """Parse a BPSEG1 byte string.

    Raises:
        BadMagicError, TruncatedPayloadError, NonFiniteSampleError, InvalidLabelError,
        ContainerError (unsupported version or trailing bytes).
    """
    if len(payload) < HEADER.size:
        if not CONTAINER_MAGIC.startswith(payload[:6]):
            raise BadMagicError(f"Bad magic {payload[:6]!r}")
        raise TruncatedPayloadError(f"Header needs {HEADER.size} bytes, got {len(payload)}")
    magic, version, _reserved, count = HEADER.unpack_from(payload, 0)
    if magic != CONTAINER_MAGIC:
        raise BadMagicError(f"Bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
    if version != CONTAINER_VERSION:
        raise ContainerError(f"Unsupported container version {version}")

    expected = HEADER.size + count * RECORD_BYTES
    if len(payload) < expected:
        have = (len(payload) - HEADER.size) // RECORD_BYTES
        raise TruncatedPayloadError(f"Header declares {count} segments, payload holds {have}")
    if len(payload) > expected:
        raise ContainerError(f"{len(payload) - expected} trailing bytes after {count} segments")
    if count == 0:
        raise EmptyDatasetError("Container holds no segments")

    records = np.frombuffer(payload, dtype=RECORD_DTYPE, count=count, offset=HEADER.size)
    return SegmentDataset(
        records["ecg"], records["ppg"], records["sbp"], records["dbp"], source_tag=source_tag
    )


def write_container(ds: SegmentDataset, path: str) -> int:
    """Write a dataset as BPSEG1; returns the byte count (16 + N*10008)."""
    written = atomic_write_bytes(path, encode_container(ds))
    log("Wrote segment container", path=path, segments=len(ds), bytes=written)
    return written


def read_container(path: str) -> SegmentDataset:
    with open(path, "rb") as f:
        payload = f.read()
    return decode_container(payload)


def container_size(n: int) -> int:
    return HEADER.size + n * RECORD_BYTES

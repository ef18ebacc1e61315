"""Session storage, spike binning/segmentation, synthetic task generation,
unit-dropout augmentation, and chronological splitting.

A session lives on disk as a directory of meta.json, spikes.csv,
behavior.csv, and intervals.csv.  Behavior is sampled at 100 Hz; spikes
are binned into 10 ms bins and grouped into 1 s segments of 100 bins.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BIN_WIDTH_S = 0.01
SAMPLING_HZ = 100
SEGMENT_BINS = 100
MIN_DROPOUT_UNITS = 30


class SessionFormatError(ValueError):
    """Raised when on-disk session data violates the format contract."""


@dataclass
class Session:
    """Spikes, behavior, and task intervals for one recording."""

    session_id: str
    subject_id: str
    task: str                      # "CO" | "RT"
    spike_units: np.ndarray        # int unit ids, aligned with spike_times
    spike_times: np.ndarray        # seconds, non-decreasing
    behavior_times: np.ndarray     # seconds, uniform 100 Hz
    behavior_vel: np.ndarray       # [n, 2] (vx, vy)
    intervals: list                # (start_s, end_s, kind)

    @property
    def unit_ids(self):
        return np.unique(self.spike_units)

    @property
    def duration_s(self):
        return len(self.behavior_times) / SAMPLING_HZ

    def validate(self):
        if self.task not in ("CO", "RT"):
            raise SessionFormatError(f"unknown task kind {self.task!r}")
        if np.any(np.diff(self.spike_times) < 0):
            raise SessionFormatError("spike times are not non-decreasing")
        if np.any(self.spike_times < 0):
            raise SessionFormatError("negative spike time")
        if len(self.behavior_times) >= 2:
            dt = np.diff(self.behavior_times)
            if np.any(np.abs(dt - BIN_WIDTH_S) > 1e-6):
                raise SessionFormatError(
                    "behavior is not uniformly sampled at 100 Hz")
        if self.behavior_vel.shape != (len(self.behavior_times), 2):
            raise SessionFormatError("behavior velocity shape mismatch")
        ivs = sorted(self.intervals)
        for (s0, e0, _), (s1, _, _) in zip(ivs, ivs[1:]):
            if s1 < e0 - 1e-9:
                raise SessionFormatError("overlapping intervals")
        for s0, e0, kind in ivs:
            if kind not in ("reach", "hold"):
                raise SessionFormatError(f"unknown interval kind {kind!r}")
            if e0 <= s0:
                raise SessionFormatError("empty or inverted interval")
        return self


@dataclass
class SpikeWindow:
    """Spike counts per unit inside one 10 ms bin."""

    bin_index: int
    counts: dict                   # unit_id -> count
    bin_width_s: float = BIN_WIDTH_S

    @property
    def total_spikes(self):
        return sum(self.counts.values())


@dataclass
class Segment:
    """100 consecutive bins with aligned velocity targets and reach mask."""

    session_id: str
    start_bin: int
    counts: np.ndarray             # [100, n_units] per-unit spike counts
    unit_ids: np.ndarray           # column order of counts
    targets: np.ndarray            # [100, 2] velocities
    reach_mask: np.ndarray         # [100] bool
    keep_mask: np.ndarray = None   # optional unit keep mask from dropout

    def __post_init__(self):
        if self.counts.shape[0] != SEGMENT_BINS:
            raise SessionFormatError(
                f"segment must hold {SEGMENT_BINS} bins, got {self.counts.shape[0]}")

    def windows(self):
        """View the segment as a list of SpikeWindow (sparse) objects."""
        out = []
        for k in range(SEGMENT_BINS):
            row = self.counts[k]
            nz = np.nonzero(row)[0]
            out.append(SpikeWindow(self.start_bin + k,
                                   {int(self.unit_ids[i]): int(row[i]) for i in nz}))
        return out

    def effective_counts(self):
        """Counts with the dropout keep-mask applied (if any)."""
        if self.keep_mask is None:
            return self.counts
        return self.counts * self.keep_mask[None, :]


# -- disk format ----------------------------------------------------------------


def save_session(session: Session, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    session.validate()
    meta = {"session_id": session.session_id, "subject_id": session.subject_id,
            "task": session.task, "sampling_hz": SAMPLING_HZ}
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n",
                                    encoding="utf-8")
    with open(path / "spikes.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["unit", "time_s"])
        for u, t in zip(session.spike_units, session.spike_times):
            w.writerow([int(u), f"{t:.6f}"])
    with open(path / "behavior.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["time_s", "vx", "vy"])
        for t, (vx, vy) in zip(session.behavior_times, session.behavior_vel):
            w.writerow([f"{t:.2f}", f"{vx:.6f}", f"{vy:.6f}"])
    with open(path / "intervals.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["start_s", "end_s", "kind"])
        for s, e, kind in session.intervals:
            w.writerow([f"{s:.6f}", f"{e:.6f}", kind])
    return path


def _read_csv(path, expected_header):
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
    except FileNotFoundError:
        raise SessionFormatError(f"missing file: {path}") from None
    if not rows or rows[0] != expected_header:
        raise SessionFormatError(
            f"{path}: expected header {expected_header}, got {rows[0] if rows else 'empty file'}")
    return rows[1:]


def load_session(path) -> Session:
    """Read and validate a session directory."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise SessionFormatError(f"missing file: {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    for key in ("session_id", "subject_id", "task", "sampling_hz"):
        if key not in meta:
            raise SessionFormatError(f"meta.json missing field {key!r}")
    if meta["sampling_hz"] != SAMPLING_HZ:
        raise SessionFormatError(
            f"sampling_hz must be {SAMPLING_HZ}, got {meta['sampling_hz']}")

    rows = _read_csv(path / "spikes.csv", ["unit", "time_s"])
    units = np.empty(len(rows), dtype=np.int64)
    times = np.empty(len(rows), dtype=np.float64)
    for i, row in enumerate(rows):
        try:
            units[i] = int(row[0])
            times[i] = float(row[1])
        except (ValueError, IndexError):
            raise SessionFormatError(
                f"spikes.csv row {i + 2} malformed: {row}") from None
        if units[i] < 0:
            raise SessionFormatError(f"spikes.csv row {i + 2}: negative unit id")

    rows = _read_csv(path / "behavior.csv", ["time_s", "vx", "vy"])
    btimes = np.empty(len(rows), dtype=np.float64)
    vel = np.empty((len(rows), 2), dtype=np.float64)
    for i, row in enumerate(rows):
        try:
            btimes[i] = float(row[0])
            vel[i] = (float(row[1]), float(row[2]))
        except (ValueError, IndexError):
            raise SessionFormatError(
                f"behavior.csv row {i + 2} malformed: {row}") from None

    rows = _read_csv(path / "intervals.csv", ["start_s", "end_s", "kind"])
    intervals = []
    for i, row in enumerate(rows):
        try:
            intervals.append((float(row[0]), float(row[1]), row[2]))
        except (ValueError, IndexError):
            raise SessionFormatError(
                f"intervals.csv row {i + 2} malformed: {row}") from None

    session = Session(meta["session_id"], meta["subject_id"], meta["task"],
                      units, times, btimes, vel, intervals)
    return session.validate()


# -- binning / segmentation ----------------------------------------------------


def _spike_bins(times: np.ndarray) -> np.ndarray:
    """Half-open 10 ms bins; boundary values snap to the upper bin."""
    k = np.floor(times / BIN_WIDTH_S).astype(np.int64)
    # decimal timestamps can land 1 ulp under the boundary
    upper = (times - (k + 1) * BIN_WIDTH_S) >= -1e-9
    return k + upper


def reach_mask_from_intervals(intervals, times: np.ndarray) -> np.ndarray:
    mask = np.zeros(len(times), dtype=bool)
    for s, e, kind in intervals:
        if kind == "reach":
            mask |= (times >= s - 1e-9) & (times < e - 1e-9)
    return mask


def bin_and_segment(session: Session) -> list:
    """Tile the recording into non-overlapping 1 s segments of 100 bins."""
    session.validate()
    n_bins = len(session.behavior_times)
    n_segments = n_bins // SEGMENT_BINS
    if n_segments == 0:
        warnings.warn("session shorter than 1 s: no segments produced")
        return []
    unit_ids = session.unit_ids
    col = {int(u): i for i, u in enumerate(unit_ids)}
    counts = np.zeros((n_segments * SEGMENT_BINS, len(unit_ids)), dtype=np.float32)
    bins = _spike_bins(session.spike_times)
    keep = bins < counts.shape[0]
    np.add.at(counts, (bins[keep],
                       np.array([col[int(u)] for u in session.spike_units[keep]],
                                dtype=np.int64)), 1.0)
    mask = reach_mask_from_intervals(session.intervals, session.behavior_times)
    segments = []
    for k in range(n_segments):
        lo, hi = k * SEGMENT_BINS, (k + 1) * SEGMENT_BINS
        segments.append(Segment(
            session_id=session.session_id,
            start_bin=lo,
            counts=counts[lo:hi],
            unit_ids=unit_ids,
            targets=session.behavior_vel[lo:hi].astype(np.float32),
            reach_mask=mask[lo:hi].copy(),
        ))
    return segments


def split(session_or_segments, fractions=(0.70, 0.10, 0.20)):
    """Chronological train/val/test blocks over a session's segments."""
    if isinstance(session_or_segments, Session):
        segments = bin_and_segment(session_or_segments)
    else:
        segments = list(session_or_segments)
    n = len(segments)
    if n < 10:
        raise ValueError(f"need at least 10 segments to split, got {n}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(math.floor(fractions[0] * n))
    n_val = int(math.floor(fractions[1] * n))
    return (segments[:n_train],
            segments[n_train:n_train + n_val],
            segments[n_train + n_val:])


# -- augmentation ----------------------------------------------------------------


def unit_dropout(segment: Segment, rng: np.random.Generator,
                 keep_prob: float = 0.9) -> Segment:
    """Sample one Bernoulli keep-mask per segment (same for all 100 bins).

    Populations of at most 30 units pass through unchanged; if the drawn
    mask keeps fewer than 30 units, a uniformly random 30 are kept instead.
    """
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    n = len(segment.unit_ids)
    if n <= MIN_DROPOUT_UNITS or keep_prob >= 1.0:
        return segment
    keep = rng.random(n) < keep_prob
    if keep.sum() < MIN_DROPOUT_UNITS:
        keep = np.zeros(n, dtype=bool)
        keep[rng.choice(n, size=MIN_DROPOUT_UNITS, replace=False)] = True
    return Segment(segment.session_id, segment.start_bin, segment.counts,
                   segment.unit_ids, segment.targets, segment.reach_mask,
                   keep_mask=keep.astype(np.float32))


# -- synthetic task generation ----------------------------------------------------


@dataclass
class SyntheticParams:
    n_units: int = 96
    duration_s: float = 600.0
    task: str = "CO"
    seed: int = 42
    target_radius_cm: float = 8.0
    baseline_hz: tuple = (2.0, 6.0)
    modulation: tuple = (1.0, 2.0)     # Hz per cm/s of preferred-direction speed

    def validate(self):
        if self.n_units < 31:
            raise ValueError("n_units must be >= 31 so dropout's 30-unit floor is exercisable")
        if self.duration_s < 10.0:
            raise ValueError("duration_s must be >= 10")
        if self.task not in ("CO", "RT"):
            raise ValueError(f"task must be CO or RT, got {self.task!r}")
        return self


def _min_jerk_velocity(dist, t):
    """Speed profile of a minimum-jerk reach of length ``dist`` over [0, 1]."""
    return dist * (30 * t ** 2 - 60 * t ** 3 + 30 * t ** 4)


def _plan_kinematics(params: SyntheticParams, rng: np.random.Generator):
    """Piecewise hold/reach velocity plan sampled at 100 Hz."""
    n_samples = int(round(params.duration_s * SAMPLING_HZ))
    vel = np.zeros((n_samples, 2))
    intervals = []
    targets_co = [(params.target_radius_cm * math.cos(2 * math.pi * k / 8),
                   params.target_radius_cm * math.sin(2 * math.pi * k / 8))
                  for k in range(8)]
    pos = np.zeros(2)
    t = 0

    def emit_hold(dur_s):
        nonlocal t
        k = int(round(dur_s * SAMPLING_HZ))
        k = min(k, n_samples - t)
        if k > 0:
            intervals.append((t / SAMPLING_HZ, (t + k) / SAMPLING_HZ, "hold"))
        t += k

    def emit_reach(goal):
        nonlocal t, pos
        delta = np.asarray(goal) - pos
        dist = float(np.hypot(*delta))
        if dist < 1e-6:
            return
        dur_s = rng.uniform(0.45, 0.65)
        k = int(round(dur_s * SAMPLING_HZ))
        k = min(k, n_samples - t)
        if k <= 0:
            return
        tt = (np.arange(k) + 0.5) / k
        speed = _min_jerk_velocity(dist, tt) / dur_s
        vel[t:t + k] = np.outer(speed, delta / dist)
        intervals.append((t / SAMPLING_HZ, (t + k) / SAMPLING_HZ, "reach"))
        pos = np.asarray(goal, dtype=float)
        t += k

    if params.task == "CO":
        while t < n_samples:
            emit_hold(rng.uniform(0.3, 0.6))
            target = targets_co[int(rng.integers(8))]
            emit_reach(target)
            emit_hold(rng.uniform(0.2, 0.4))
            emit_reach((0.0, 0.0))
    else:
        half = params.target_radius_cm
        while t < n_samples:
            emit_hold(rng.uniform(0.3, 0.6))
            for _ in range(4):
                goal = rng.uniform(-half, half, size=2)
                emit_reach(tuple(goal))
                emit_hold(rng.uniform(0.15, 0.3))
    return vel, intervals, n_samples


def generate_synthetic(params: SyntheticParams) -> Session:
    """Cosine-tuned inhomogeneous-Poisson population driving a reach task.

    Unit i fires at rate b_i + m_i * max(0, cos(theta(t) - theta_i)) * |v(t)|
    with baseline, modulation depth, and preferred direction drawn from
    seeded distributions; spike times are drawn per 10 ms bin.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    vel, intervals, n_samples = _plan_kinematics(params, rng)

    base = rng.uniform(*params.baseline_hz, size=params.n_units)
    mod = rng.uniform(*params.modulation, size=params.n_units)
    pref = rng.uniform(0.0, 2 * math.pi, size=params.n_units)

    speed = np.hypot(vel[:, 0], vel[:, 1])
    theta = np.arctan2(vel[:, 1], vel[:, 0])
    # [n_samples, n_units] instantaneous rates
    tuning = np.maximum(0.0, np.cos(theta[:, None] - pref[None, :]))
    rates = base[None, :] + mod[None, :] * tuning * speed[:, None]

    counts = rng.poisson(rates * BIN_WIDTH_S)
    bins, unit_cols = np.nonzero(counts)
    reps = counts[bins, unit_cols]
    units = np.repeat(unit_cols, reps)
    offsets = rng.uniform(0.0, BIN_WIDTH_S, size=len(units))
    times = np.repeat(bins, reps) * BIN_WIDTH_S + offsets
    order = np.argsort(times, kind="stable")

    behavior_times = np.arange(n_samples) / SAMPLING_HZ
    session = Session(
        session_id=f"synthetic-{params.task.lower()}-{params.seed}",
        subject_id=f"synth{params.seed % 1000}",
        task=params.task,
        spike_units=units[order].astype(np.int64),
        spike_times=times[order],
        behavior_times=behavior_times,
        behavior_vel=vel,
        intervals=intervals,
    )
    return session.validate()


def expected_unit_rates(params: SyntheticParams) -> np.ndarray:
    """Session-mean firing rate per unit implied by the tuning draw.

    Redraws the same kinematics and tuning parameters as
    :func:`generate_synthetic` (identical rng consumption order) and
    averages the rate function over the recording; used as the oracle
    for Poisson mean checks.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    vel, _, _ = _plan_kinematics(params, rng)
    base = rng.uniform(*params.baseline_hz, size=params.n_units)
    mod = rng.uniform(*params.modulation, size=params.n_units)
    pref = rng.uniform(0.0, 2 * math.pi, size=params.n_units)
    speed = np.hypot(vel[:, 0], vel[:, 1])
    theta = np.arctan2(vel[:, 1], vel[:, 0])
    tuning = np.maximum(0.0, np.cos(theta[:, None] - pref[None, :]))
    rates = base[None, :] + mod[None, :] * tuning * speed[:, None]
    return rates.mean(axis=0)

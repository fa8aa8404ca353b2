"""RSSI trajectories: CSV ingestion, normalization, windowing and a synthetic generator.

CSV layout: header ``rssi_0,...,rssi_{D-1},x,y`` then one scan per row in
chronological order.  Detected RSSI lies in [-100, 0]; an undetected access
point is written as the sentinel 100.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .config import load_kv, coerce_fields

SENTINEL = 100.0
RSSI_FLOOR = -100.0
RSSI_CEIL = 0.0


class DataFormatError(ValueError):
    pass


def _invalid_rssi(rssi: np.ndarray) -> np.ndarray:
    detected = (rssi >= RSSI_FLOOR) & (rssi <= RSSI_CEIL)
    return ~(detected | (rssi == SENTINEL))


@dataclass(frozen=True)
class TrajectoryDataset:
    rssi: np.ndarray  # [T, D]
    coords: np.ndarray  # [T, 2]
    name: str = "trajectory"

    def __post_init__(self):
        rssi = np.asarray(self.rssi, dtype=float)
        coords = np.asarray(self.coords, dtype=float)
        if rssi.ndim != 2 or coords.ndim != 2 or coords.shape[1] != 2:
            raise DataFormatError(f"expected rssi [T, D] and coords [T, 2], got {rssi.shape} and {coords.shape}")
        if rssi.shape[0] != coords.shape[0]:
            raise DataFormatError(f"rssi has {rssi.shape[0]} rows but coords has {coords.shape[0]}")
        if _invalid_rssi(rssi).any():
            raise DataFormatError("RSSI values must lie in [-100, 0] or equal the sentinel 100")
        if not np.all(np.isfinite(coords)):
            raise DataFormatError("coordinates must be finite")
        rssi.flags.writeable = False
        coords.flags.writeable = False
        object.__setattr__(self, "rssi", rssi)
        object.__setattr__(self, "coords", coords)

    def __len__(self) -> int:
        return self.rssi.shape[0]

    @property
    def n_aps(self) -> int:
        return self.rssi.shape[1]


def load_csv(path) -> TrajectoryDataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        n_aps = len(header) - 2
        expected = [f"rssi_{i}" for i in range(n_aps)] + ["x", "y"]
        if n_aps < 1 or [h.strip() for h in header] != expected:
            raise DataFormatError(f"{path}:1: header must be rssi_0..rssi_{{D-1}},x,y")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_aps + 2:
                raise DataFormatError(f"{path}:{line_no}: expected {n_aps + 2} fields, got {len(row)}")
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise DataFormatError(f"{path}:{line_no}: non-numeric cell") from None
            rssi = np.asarray(values[:n_aps])
            bad = np.flatnonzero(_invalid_rssi(rssi) | ~np.isfinite(rssi))
            if bad.size:
                raise DataFormatError(f"{path}:{line_no}: rssi_{bad[0]}={rssi[bad[0]]} is neither in [-100, 0] nor 100")
            rows.append(values)
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    table = np.asarray(rows)
    return TrajectoryDataset(table[:, :n_aps], table[:, n_aps:], name=path.stem)


def save_csv(dataset: TrajectoryDataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"rssi_{i}" for i in range(dataset.n_aps)] + ["x", "y"])
        for r, c in zip(dataset.rssi, dataset.coords):
            writer.writerow([repr(float(v)) for v in r] + [repr(float(v)) for v in c])


def normalize_rssi(dataset: TrajectoryDataset) -> np.ndarray:
    """Affine map [-100, 0] -> [0, 1]; the sentinel becomes 0 (no signal)."""
    r = dataset.rssi
    return np.where(r == SENTINEL, 0.0, (r - RSSI_FLOOR) / (RSSI_CEIL - RSSI_FLOOR))


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WindowedSample:
    inputs: np.ndarray  # [L, D]
    target: np.ndarray  # [2]
    index: int  # time index of the target


@dataclass(frozen=True)
class WindowSet:
    """Stacked windows: ``inputs`` [N, L, D], ``targets`` [N, 2], ``index`` [N]."""

    inputs: np.ndarray
    targets: np.ndarray
    index: np.ndarray

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def __getitem__(self, i: int) -> WindowedSample:
        return WindowedSample(self.inputs[i], self.targets[i], int(self.index[i]))

    def __iter__(self) -> Iterator[WindowedSample]:
        return (self[i] for i in range(len(self)))

    def subset(self, rows: Sequence[int]) -> "WindowSet":
        rows = np.asarray(rows, dtype=int)
        return WindowSet(self.inputs[rows], self.targets[rows], self.index[rows])

    @property
    def memory_length(self) -> int:
        return self.inputs.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]


def make_windows(dataset: TrajectoryDataset, memory_length: int) -> WindowSet:
    """Sliding windows of ``memory_length`` normalized scans, each targeting the next position."""
    n_steps = len(dataset)
    if memory_length < 1:
        raise ValueError("memory_length must be >= 1")
    if n_steps < memory_length + 1:
        raise DataFormatError(f"trajectory of {n_steps} scans is too short for memory length {memory_length}")
    x = normalize_rssi(dataset)
    n = n_steps - memory_length
    inputs = np.lib.stride_tricks.sliding_window_view(x, memory_length, axis=0)[:n]  # [N, D, L]
    inputs = np.ascontiguousarray(inputs.transpose(0, 2, 1))
    index = np.arange(memory_length, n_steps)
    return WindowSet(inputs, dataset.coords[index].copy(), index)


def split(samples: WindowSet, train_fraction: float = 0.8, chronological: bool = True, seed: Optional[int] = None):
    """Split into (train, test) with ``floor(N * fraction)`` training samples."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(samples)
    n_train = int(math.floor(n * train_fraction + 1e-9))
    if n_train == 0 or n_train == n:
        raise ValueError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = np.arange(n) if chronological else np.random.default_rng(seed).permutation(n)
    return samples.subset(np.sort(order[:n_train])), samples.subset(np.sort(order[n_train:]))


# ---------------------------------------------------------------------------
# synthetic trajectories
# ---------------------------------------------------------------------------


@dataclass
class SyntheticConfig:
    n_aps: int = 64
    width: float = 60.0
    height: float = 40.0
    path_loss_exponent: float = 3.0
    ref_power: float = -35.0  # dBm at 1 m
    shadowing_sigma: float = 3.0  # dB
    threshold: float = -90.0  # dBm; weaker readings become the sentinel
    n_steps: int = 600
    speed_min: float = 0.8  # m per step
    speed_max: float = 1.6
    pause_max: int = 2  # steps spent idle at a waypoint
    miss_prob: float = 0.0  # chance a detectable AP is absent from a scan
    ap_order: str = "random"  # "random" or "x" (indices follow the long axis)
    seed: int = 0

    def __post_init__(self):
        if self.n_aps < 1:
            raise ValueError("n_aps must be >= 1")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"degenerate area {self.width} x {self.height}")
        if self.threshold < RSSI_FLOOR:
            raise ValueError("threshold must be >= -100")
        if not 0 < self.speed_min <= self.speed_max:
            raise ValueError("need 0 < speed_min <= speed_max")
        if self.n_steps < 2 or self.pause_max < 0 or self.shadowing_sigma < 0:
            raise ValueError("n_steps >= 2, pause_max >= 0 and shadowing_sigma >= 0 required")
        if not 0.0 <= self.miss_prob < 1.0:
            raise ValueError("miss_prob must lie in [0, 1)")
        if self.ap_order not in ("random", "x"):
            raise ValueError(f"ap_order must be 'random' or 'x', got {self.ap_order!r}")

    @classmethod
    def from_file(cls, path, **overrides) -> "SyntheticConfig":
        values = coerce_fields(cls, load_kv(path), source=str(path))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def access_points(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    aps = rng.uniform((0.0, 0.0), (cfg.width, cfg.height), size=(cfg.n_aps, 2))
    if cfg.ap_order == "x":
        aps = aps[np.argsort(aps[:, 0], kind="stable")]
    return aps


def random_waypoint(cfg: SyntheticConfig, rng: np.random.Generator) -> np.ndarray:
    """Walker positions [n_steps, 2]: straight legs between uniform waypoints, with pauses."""
    lo, hi = np.zeros(2), np.array([cfg.width, cfg.height])
    pos = rng.uniform(lo, hi)
    path = [pos]
    while len(path) < cfg.n_steps:
        target = rng.uniform(lo, hi)
        speed = rng.uniform(cfg.speed_min, cfg.speed_max)
        legs = max(1, int(math.ceil(np.linalg.norm(target - pos) / speed)))
        for s in range(1, legs + 1):
            path.append(pos + (target - pos) * s / legs)
        pos = target
        path.extend([pos] * int(rng.integers(0, cfg.pause_max + 1)))
    return np.asarray(path[:cfg.n_steps])


def path_loss_rssi(positions: np.ndarray, aps: np.ndarray, cfg: SyntheticConfig) -> np.ndarray:
    """Noise-free log-distance RSSI [N, n_aps], distance clamped at 1 m."""
    dist = np.linalg.norm(positions[:, None, :] - aps[None, :, :], axis=-1)
    return cfg.ref_power - 10.0 * cfg.path_loss_exponent * np.log10(np.maximum(dist, 1.0))


def apply_detection(raw: np.ndarray, threshold: float) -> np.ndarray:
    return np.where(raw < threshold, SENTINEL, np.clip(raw, RSSI_FLOOR, RSSI_CEIL))


def generate_synthetic(cfg: SyntheticConfig, name: str = "synthetic") -> TrajectoryDataset:
    rng = np.random.default_rng(cfg.seed)
    aps = access_points(cfg, rng)
    positions = random_waypoint(cfg, rng)
    raw = path_loss_rssi(positions, aps, cfg)
    raw = raw + cfg.shadowing_sigma * rng.standard_normal(raw.shape)
    rssi = apply_detection(raw, cfg.threshold)
    if cfg.miss_prob > 0:
        rssi[rng.random(rssi.shape) < cfg.miss_prob] = SENTINEL
    return TrajectoryDataset(rssi, positions, name=name)


def sentinel_fraction(dataset: TrajectoryDataset) -> float:
    return float(np.mean(dataset.rssi == SENTINEL))

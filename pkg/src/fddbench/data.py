"""Dataset pipeline: ingest multivariate runs, standardize, window, split.

A run is one continuous recording of d sensors plus a per-timestamp fault
label (0 = normal state). Classifier inputs are sliding windows over a run,
labeled by the last timestamp, standardized with statistics fitted on the
training split only. A synthetic generator provides a desk-scale stand-in
for the full industrial corpus so the whole suite runs in minutes.

CSV schema (both layouts): header ``run_id,timestamp,s1,...,sd,fault``,
UTF-8, decimal point, LF line endings.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CACHE_VERSION = 1


class ParseError(ValueError):
    """CSV ingestion failure, message carries file and line."""


@dataclass
class Run:
    series: np.ndarray  # [time, sensors]
    labels: np.ndarray  # [time] ints, 0 = normal

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.series.ndim != 2:
            raise ValueError(f"run series must be [time, sensors], got {self.series.shape}")
        if self.labels.shape != (self.series.shape[0],):
            raise ValueError("run labels must align with series timestamps")

    @property
    def fault_type(self) -> int:
        return int(self.labels.max(initial=0))


@dataclass
class RunSet:
    runs: list[Run]
    fault_count: int

    def __post_init__(self):
        if not self.runs:
            raise ValueError("empty run set")
        d = self.runs[0].series.shape[1]
        for i, r in enumerate(self.runs):
            if r.series.shape[1] != d:
                raise ValueError(f"run {i} has {r.series.shape[1]} sensors, expected {d}")
            if r.labels.min() < 0 or r.labels.max() > self.fault_count:
                raise ValueError(f"run {i} labels outside [0, {self.fault_count}]")

    @property
    def sensors(self) -> int:
        return self.runs[0].series.shape[1]

    def __len__(self) -> int:
        return len(self.runs)


@dataclass
class Standardizer:
    mean: np.ndarray  # [sensors]
    std: np.ndarray   # [sensors], strictly positive

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise ValueError("standardizer std entries must be positive")

    @classmethod
    def identity(cls, sensors: int) -> "Standardizer":
        return cls(np.zeros(sensors), np.ones(sensors))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class WindowedDataset:
    """Standardized sliding windows [n, k, d] with integer labels."""

    windows: np.ndarray
    labels: np.ndarray
    run_ids: np.ndarray  # provenance, for leakage checks
    k: int
    standardizer: Standardizer = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.run_ids = np.asarray(self.run_ids, dtype=np.int64)
        if self.windows.ndim != 3 or self.windows.shape[1] != self.k:
            raise ValueError(f"windows must be [n, {self.k}, d], got {self.windows.shape}")
        if len(self.labels) != len(self.windows) or len(self.run_ids) != len(self.windows):
            raise ValueError("labels/run_ids misaligned with windows")
        if self.standardizer is None:
            self.standardizer = Standardizer.identity(self.windows.shape[2])

    @property
    def sensors(self) -> int:
        return self.windows.shape[2]

    @property
    def class_count(self) -> int:
        return int(self.labels.max()) + 1

    def __len__(self) -> int:
        return len(self.windows)

    def subset(self, indices) -> "WindowedDataset":
        idx = np.asarray(indices)
        return WindowedDataset(self.windows[idx], self.labels[idx], self.run_ids[idx],
                               self.k, self.standardizer)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.k).tobytes())
        h.update(self.standardizer.mean.tobytes())
        h.update(self.standardizer.std.tobytes())
        h.update(self.windows.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.run_ids.tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# standardization


def fit_standardizer(runs: RunSet) -> Standardizer:
    """Per-sensor mean and population std over all timestamps of all runs.

    Constant sensors get std forced to 1 (with a warning) so the transform
    stays invertible.
    """
    stacked = np.concatenate([r.series for r in runs.runs], axis=0)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)  # population std
    degenerate = std <= 1e-12
    if degenerate.any():
        warnings.warn(f"constant sensor(s) {np.flatnonzero(degenerate).tolist()}: std forced to 1")
        std = np.where(degenerate, 1.0, std)
    return Standardizer(mean, std)


def apply_standardizer(standardizer: Standardizer, runs: RunSet) -> RunSet:
    out = [Run(standardizer.apply(r.series), r.labels.copy()) for r in runs.runs]
    return RunSet(out, runs.fault_count)


# ---------------------------------------------------------------------------
# windowing


def make_windows(runs: RunSet, k: int, stride: int = 1,
                 standardizer: Standardizer | None = None,
                 run_id_offset: int = 0) -> WindowedDataset:
    """Cut every run into sliding windows of width k, labeled at the last step.

    A run of length n yields n-k+1 windows at stride 1. ``standardizer`` is
    recorded as the transform already applied to ``runs`` (identity if None).
    """
    if k < 1:
        raise ValueError(f"window size must be >= 1, got {k}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    all_w, all_y, all_rid = [], [], []
    for i, run in enumerate(runs.runs):
        n = run.series.shape[0]
        if n < k:
            raise ValueError(f"run {i} has length {n}, shorter than window {k}")
        view = np.lib.stride_tricks.sliding_window_view(run.series, k, axis=0)
        starts = np.arange(0, n - k + 1, stride)
        all_w.append(view[starts].transpose(0, 2, 1).copy())
        all_y.append(run.labels[starts + k - 1])
        all_rid.append(np.full(len(starts), run_id_offset + i, dtype=np.int64))
    return WindowedDataset(np.concatenate(all_w), np.concatenate(all_y),
                           np.concatenate(all_rid), k,
                           standardizer or Standardizer.identity(runs.sensors))


# ---------------------------------------------------------------------------
# synthetic generator


def synth_generate(seed: int, classes: int, sensors: int, run_length: int,
                   runs_per_class: int, separation: float = 3.0,
                   near_pair_gap: float | None = None) -> RunSet:
    """Desk-scale stand-in corpus with one stationary signature per class.

    Class c is a mean offset of magnitude ``separation`` (class 0, the normal
    state, sits at the origin) plus AR(1) noise with unit marginal variance
    and a mildly class-specific correlation. Deterministic in the seed.

    With ``near_pair_gap`` set, fault classes are laid out two per root
    cause: each pair shares a center at ``separation`` from normal and its
    members sit ``near_pair_gap`` apart. That models fault variants that are
    genuinely hard to tell apart, which is what makes small-strength attacks
    bite at desk scale.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)

    def unit() -> np.ndarray:
        v = rng.normal(size=sensors)
        return v / np.linalg.norm(v)

    means = np.zeros((classes, sensors))
    c = 1
    while c < classes:
        center = separation * unit()
        if near_pair_gap is not None and c + 1 < classes:
            # two fault variants of one root cause, a small gap apart: the
            # variant discriminant rides on the same sensors as the fault
            # signatures, which keeps it from being trivially robust
            half = 0.5 * near_pair_gap * unit()
            means[c] = center - half
            means[c + 1] = center + half
            c += 2
        else:
            means[c] = center
            c += 1
    phis = rng.uniform(0.05, 0.25, size=classes)

    runs = []
    for c in range(classes):
        for _ in range(runs_per_class):
            innov = rng.normal(size=(run_length, sensors))
            noise = np.empty((run_length, sensors))
            noise[0] = innov[0]
            scale = np.sqrt(1.0 - phis[c] ** 2)
            for t in range(1, run_length):
                noise[t] = phis[c] * noise[t - 1] + scale * innov[t]
            series = means[c] + noise
            labels = np.full(run_length, c, dtype=np.int64)
            runs.append(Run(series, labels))
    return RunSet(runs, fault_count=classes - 1)


# ---------------------------------------------------------------------------
# splitting


def _stratified_run_indices(runs: RunSet, train_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[int]] = {}
    for i, run in enumerate(runs.runs):
        by_class.setdefault(run.fault_type, []).append(i)

    train_idx, test_idx = [], []
    for cls in sorted(by_class):
        members = np.array(by_class[cls])
        if len(members) < 2:
            raise ValueError(f"fault type {cls} has {len(members)} run(s); stratified split needs >= 2")
        order = rng.permutation(len(members))
        n_train = int(round(train_fraction * len(members)))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.extend(members[order[:n_train]].tolist())
        test_idx.extend(members[order[n_train:]].tolist())
    train_idx.sort()
    test_idx.sort()
    return train_idx, test_idx


def split(runs: RunSet, train_fraction: float, seed: int) -> tuple[RunSet, RunSet]:
    """Split whole runs (never within a run), stratified by fault type."""
    train_idx, test_idx = _stratified_run_indices(runs, train_fraction, seed)
    train = RunSet([runs.runs[i] for i in train_idx], runs.fault_count)
    test = RunSet([runs.runs[i] for i in test_idx], runs.fault_count)
    return train, test


def prepare_datasets(runs: RunSet, k: int, train_fraction: float = 0.8,
                     seed: int = 0, stride: int = 1) -> tuple[WindowedDataset, WindowedDataset]:
    """split -> fit standardizer on train -> apply to both -> window both."""
    train_ids, test_ids = _stratified_run_indices(runs, train_fraction, seed)
    train_runs = RunSet([runs.runs[i] for i in train_ids], runs.fault_count)
    test_runs = RunSet([runs.runs[i] for i in test_ids], runs.fault_count)
    standardizer = fit_standardizer(train_runs)
    train_std = apply_standardizer(standardizer, train_runs)
    test_std = apply_standardizer(standardizer, test_runs)
    train = make_windows(train_std, k, stride, standardizer)
    test = make_windows(test_std, k, stride, standardizer)
    # rewrite provenance with original run indices so leakage checks work
    train.run_ids = np.asarray(train_ids, dtype=np.int64)[train.run_ids]
    test.run_ids = np.asarray(test_ids, dtype=np.int64)[test.run_ids]
    return train, test


# ---------------------------------------------------------------------------
# CSV ingestion / emission


def _parse_header(header: list[str], path: str) -> int:
    if len(header) < 4 or header[0] != "run_id" or header[1] != "timestamp" or header[-1] != "fault":
        raise ParseError(f"{path}:1: header must be run_id,timestamp,s1,...,sd,fault, got {header}")
    d = len(header) - 3
    expected = [f"s{i + 1}" for i in range(d)]
    if header[2:-1] != expected:
        raise ParseError(f"{path}:1: sensor columns must be s1..s{d}, got {header[2:-1]}")
    return d


def _parse_rows(path: Path) -> tuple[int, list[tuple[int, np.ndarray, int]]]:
    rows: list[tuple[int, np.ndarray, int]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}:1: empty file") from None
        d = _parse_header(header, str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 3:
                raise ParseError(f"{path}:{lineno}: expected {d + 3} fields, got {len(row)}")
            try:
                run_id = int(row[0])
                values = np.array([float(v) for v in row[2:-1]])
                fault = int(row[-1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from None
            rows.append((run_id, values, fault))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return d, rows


def load_runs(path, fmt: str = "csv-dir") -> RunSet:
    """Load a RunSet from a directory of per-run CSVs or one grouped CSV."""
    path = Path(path)
    if fmt == "csv-dir":
        if not path.is_dir():
            raise ParseError(f"{path}: not a directory")
        files = sorted(path.glob("*.csv"))
        if not files:
            raise ParseError(f"{path}: no CSV files found")
        runs = []
        for f in files:
            d, rows = _parse_rows(f)
            ids = {r[0] for r in rows}
            if len(ids) != 1:
                raise ParseError(f"{f}: expected a single run per file, found run_ids {sorted(ids)}")
            runs.append(Run(np.stack([r[1] for r in rows]),
                            np.array([r[2] for r in rows])))
    elif fmt == "single-csv":
        if not path.is_file():
            raise ParseError(f"{path}: not a file")
        d, rows = _parse_rows(path)
        grouped: dict[int, list[tuple[np.ndarray, int]]] = {}
        for run_id, values, fault in rows:
            grouped.setdefault(run_id, []).append((values, fault))
        runs = [Run(np.stack([v for v, _ in grouped[rid]]),
                    np.array([f for _, f in grouped[rid]]))
                for rid in sorted(grouped)]
    else:
        raise ValueError(f"unknown format '{fmt}' (expected csv-dir or single-csv)")
    fault_count = max(r.fault_type for r in runs)
    return RunSet(runs, fault_count=max(fault_count, 1))


def write_runs_csv(runs: RunSet, out_dir, manifest_extra: dict | None = None) -> list[Path]:
    """Write one CSV per run plus a manifest.json; deterministic bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, run in enumerate(runs.runs):
        p = out_dir / f"run_{i:04d}.csv"
        header = "run_id,timestamp," + ",".join(f"s{j + 1}" for j in range(runs.sensors)) + ",fault"
        lines = [header]
        for t in range(run.series.shape[0]):
            vals = ",".join(repr(float(v)) for v in run.series[t])
            lines.append(f"{i},{t},{vals},{int(run.labels[t])}")
        p.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
        paths.append(p)
    manifest = {
        "format_version": 1,
        "runs": len(runs.runs),
        "sensors": runs.sensors,
        "fault_count": runs.fault_count,
        "files": [p.name for p in paths],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------------------
# windowed-dataset cache (train + test in one versioned binary)


def save_dataset_cache(path, train: WindowedDataset, test: WindowedDataset) -> None:
    if train.k != test.k:
        raise ValueError("train/test window sizes disagree")
    meta = {
        "version": CACHE_VERSION,
        "k": train.k,
        "train_fingerprint": train.fingerprint(),
        "test_fingerprint": test.fingerprint(),
    }
    np.savez(path,
             meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
             std_mean=train.standardizer.mean, std_std=train.standardizer.std,
             train_windows=train.windows, train_labels=train.labels, train_run_ids=train.run_ids,
             test_windows=test.windows, test_labels=test.labels, test_run_ids=test.run_ids)


def load_dataset_cache(path) -> tuple[WindowedDataset, WindowedDataset]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != CACHE_VERSION:
            raise ValueError(f"unsupported dataset cache version {meta.get('version')}")
        std = Standardizer(z["std_mean"], z["std_std"])
        train = WindowedDataset(z["train_windows"], z["train_labels"], z["train_run_ids"],
                                meta["k"], std)
        test = WindowedDataset(z["test_windows"], z["test_labels"], z["test_run_ids"],
                               meta["k"], std)
    if train.fingerprint() != meta["train_fingerprint"] or test.fingerprint() != meta["test_fingerprint"]:
        raise ValueError("dataset cache fingerprint mismatch (corrupt file?)")
    return train, test

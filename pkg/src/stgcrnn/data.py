"""Graph-signal datasets: ingestion, factor fusion, scaling, windowing, splits.

A :class:`GraphSignalSequence` holds an hourly (T, N, F) array.  Missing
readings are NaN in ``data`` and True in ``missing_mask``; imputation fills
``data`` but leaves the mask alone so target windows can still be screened.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import AlignmentError, BoundsError

FACTOR_GROUPS = ("air", "meteo", "traffic_volume", "speed", "external")
DATASET_FORMAT = "stgcrnn-dataset"
DATASET_VERSION = 1
HOUR = np.timedelta64(1, "h")
FFILL_LIMIT = 3


@dataclass
class GraphSignalSequence:
    timestamps: np.ndarray
    node_ids: list[str]
    data: np.ndarray
    feature_names: list[str]
    feature_groups: list[str]
    missing_mask: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.data = np.asarray(self.data, dtype=float)
        self.node_ids = [str(n) for n in self.node_ids]
        if self.data.ndim != 3:
            raise ValueError(f"data must be (T, N, F), got {self.data.shape}")
        T, N, F = self.data.shape
        if len(self.timestamps) != T or len(self.node_ids) != N:
            raise ValueError("timestamps/node_ids do not match the data shape")
        if len(self.feature_names) != F or len(self.feature_groups) != F:
            raise ValueError("feature names/groups do not match the feature axis")
        unknown = set(self.feature_groups) - set(FACTOR_GROUPS)
        if unknown:
            raise ValueError(f"unknown factor groups {sorted(unknown)}")
        if T > 1 and np.any(np.diff(self.timestamps) != HOUR):
            raise ValueError("timestamps must be strictly increasing with hourly spacing")
        if self.missing_mask is None:
            self.missing_mask = np.isnan(self.data)
        self.missing_mask = np.asarray(self.missing_mask, dtype=bool)

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return self.data.shape[0]

    def feature_index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise KeyError(f"no feature named {name!r}; have {self.feature_names}") from None

    def group_widths(self) -> dict[str, int]:
        return {g: self.feature_groups.count(g) for g in FACTOR_GROUPS if g in self.feature_groups}

    def slice_time(self, start: int, stop: int) -> "GraphSignalSequence":
        return replace(self, timestamps=self.timestamps[start:stop], data=self.data[start:stop],
                       missing_mask=self.missing_mask[start:stop])


# --------------------------------------------------------------------------
# ingestion and fusion
# --------------------------------------------------------------------------

def read_factor_csv(path, group: str, node_ids: Sequence[str] | None = None) -> GraphSignalSequence:
    """Read ``timestamp,station_id,<features...>`` rows into a sequence.

    Hours absent from the file become explicit missing entries.
    """
    df = pd.read_csv(path, dtype={"station_id": str})
    if list(df.columns[:2]) != ["timestamp", "station_id"]:
        raise ValueError(f"{path}: header must start with timestamp,station_id")
    features = list(df.columns[2:])
    df["timestamp"] = pd.to_datetime(df["timestamp"]).dt.floor("h")
    if node_ids is None:
        node_ids = list(dict.fromkeys(df["station_id"]))
    hours = pd.date_range(df["timestamp"].min(), df["timestamp"].max(), freq="h")
    data = np.full((len(hours), len(node_ids), len(features)), np.nan)
    pos = {n: i for i, n in enumerate(node_ids)}
    df = df[df["station_id"].isin(pos)]
    t_idx = hours.get_indexer(df["timestamp"])
    n_idx = df["station_id"].map(pos).to_numpy()
    data[t_idx, n_idx, :] = df[features].to_numpy(dtype=float)
    return GraphSignalSequence(hours.to_numpy().astype("datetime64[h]"), list(node_ids), data,
                               features, [group] * len(features))


def fuse_factors(groups: Mapping[str, GraphSignalSequence] | Sequence[GraphSignalSequence]) -> GraphSignalSequence:
    """Concatenate factor groups along the feature axis in the fixed group order."""
    seqs = list(groups.values()) if isinstance(groups, Mapping) else list(groups)
    if not seqs:
        raise ValueError("no factor groups to fuse")
    order = {g: i for i, g in enumerate(FACTOR_GROUPS)}
    seqs.sort(key=lambda s: order[s.feature_groups[0]] if s.feature_groups else 0)
    ref = seqs[0]
    for s in seqs[1:]:
        group = s.feature_groups[0] if s.feature_groups else "?"
        if s.node_ids != ref.node_ids:
            raise AlignmentError(f"group {group!r}: node set differs from {ref.feature_groups[0]!r}")
        if len(s.timestamps) != len(ref.timestamps) or np.any(s.timestamps != ref.timestamps):
            raise AlignmentError(f"group {group!r}: timestamps differ from {ref.feature_groups[0]!r}")
    if len(seqs) == 1:
        return ref
    return GraphSignalSequence(
        ref.timestamps, ref.node_ids,
        np.concatenate([s.data for s in seqs], axis=-1),
        [n for s in seqs for n in s.feature_names],
        [g for s in seqs for g in s.feature_groups],
        np.concatenate([s.missing_mask for s in seqs], axis=-1),
    )


def assign_nearest_source(source_xy, node_xy) -> np.ndarray:
    """Index of the nearest factor source for every graph node."""
    src = np.asarray(source_xy, dtype=float)
    nodes = np.asarray(node_xy, dtype=float)
    d = np.square(nodes[:, None, :] - src[None, :, :]).sum(axis=-1)
    return d.argmin(axis=1)


def regrid_to_nodes(seq: GraphSignalSequence, source_index: Sequence[int], node_ids) -> GraphSignalSequence:
    """Re-express a factor sequence on graph nodes via a source-per-node map."""
    idx = np.asarray(source_index)
    return replace(seq, node_ids=list(node_ids), data=seq.data[:, idx, :],
                   missing_mask=seq.missing_mask[:, idx, :])


# --------------------------------------------------------------------------
# spatial grid
# --------------------------------------------------------------------------

def assign_grid(stations: Mapping[str, tuple[float, float]], bounds, rows: int = 32, cols: int = 32):
    """Map station id -> (row, col) by uniform bucketing of (x, y) within bounds.

    ``bounds`` is ``(x_min, y_min, x_max, y_max)``; the max edge belongs to the
    last cell.
    """
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise BoundsError(f"empty bounds {bounds}")
    cells = {}
    for sid, (x, y) in stations.items():
        if not (x0 <= x <= x1 and y0 <= y <= y1):
            raise BoundsError(f"station {sid!r} at ({x}, {y}) lies outside {bounds}")
        r = min(int((y - y0) / (y1 - y0) * rows), rows - 1)
        c = min(int((x - x0) / (x1 - x0) * cols), cols - 1)
        cells[sid] = (r, c)
    return cells


def aggregate_to_grid(seq: GraphSignalSequence, cells: Mapping[str, tuple[int, int]]) -> GraphSignalSequence:
    """One node per occupied cell; stations sharing a cell are averaged."""
    occupied = sorted(set(cells[n] for n in seq.node_ids))
    data = np.full((len(seq), len(occupied), seq.shape[2]), np.nan)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for j, cell in enumerate(occupied):
            members = [i for i, n in enumerate(seq.node_ids) if cells[n] == cell]
            data[:, j, :] = np.nanmean(seq.data[:, members, :], axis=1)
    return GraphSignalSequence(seq.timestamps, [f"r{r}c{c}" for r, c in occupied], data,
                               seq.feature_names, seq.feature_groups)


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    method: str
    lo: np.ndarray
    hi: np.ndarray
    feature_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.method not in ("minmax", "zscore"):
            raise ValueError(f"unknown normalization {self.method!r}")

    @property
    def span(self) -> np.ndarray:
        """Divisor per feature; 0 marks constant features."""
        return self.hi - self.lo if self.method == "minmax" else self.hi

    def to_json(self) -> dict:
        return {"method": self.method, "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                "feature_names": list(self.feature_names)}

    @classmethod
    def from_json(cls, doc) -> "NormalizationStats":
        return cls(doc["method"], doc["lo"], doc["hi"], list(doc.get("feature_names", [])))


def fit_normalization(train: GraphSignalSequence, method: str = "minmax") -> NormalizationStats:
    """Per-feature statistics from the training split only.

    ``minmax`` stores (min, max); ``zscore`` stores (mean, std) in the same
    slots.
    """
    flat = train.data.reshape(-1, train.shape[2])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if method == "minmax":
            lo, hi = np.nanmin(flat, axis=0), np.nanmax(flat, axis=0)
        else:
            lo, hi = np.nanmean(flat, axis=0), np.nanstd(flat, axis=0)
    lo, hi = np.nan_to_num(lo), np.nan_to_num(hi)
    return NormalizationStats(method, lo, hi, list(train.feature_names))


def _scale(values, stats, features):
    lo, span = stats.lo[features], stats.span[features]
    safe = np.where(span == 0, 1.0, span)
    out = (values - lo) / safe
    return np.where(span == 0, 0.0, out)


def normalize(seq: GraphSignalSequence, stats: NormalizationStats) -> GraphSignalSequence:
    """``(x - min) / (max - min)``; constant features map to 0.  No clipping."""
    out = _scale(seq.data, stats, slice(None))
    out[seq.missing_mask] = np.nan
    return replace(seq, data=out, missing_mask=seq.missing_mask.copy())


def denormalize(values, stats: NormalizationStats, feature: int | slice = slice(None)) -> np.ndarray:
    """Inverse of :func:`normalize` for one feature index or a feature slice."""
    values = np.asarray(values, dtype=float)
    return values * stats.span[feature] + stats.lo[feature]


def impute(seq: GraphSignalSequence, limit: int = FFILL_LIMIT, fill: float = 0.0) -> GraphSignalSequence:
    """Forward-fill gaps up to ``limit`` hours per node/feature, then ``fill``."""
    T, N, F = seq.shape
    frame = pd.DataFrame(seq.data.reshape(T, N * F))
    filled = frame.ffill(limit=limit).to_numpy().reshape(T, N, F)
    filled = np.where(np.isnan(filled), fill, filled)
    return replace(seq, data=filled, missing_mask=seq.missing_mask.copy())


# --------------------------------------------------------------------------
# windows and splits
# --------------------------------------------------------------------------

@dataclass
class WindowSpec:
    T: int = 12
    T_prime: int = 12
    stride: int = 1
    target_feature: str | None = None

    def __post_init__(self):
        if self.T < 1 or self.T_prime < 1 or self.stride < 1:
            raise ValueError("T, T_prime and stride must all be >= 1")


@dataclass
class WindowSet:
    inputs: np.ndarray    # (B, T, N, F)
    targets: np.ndarray   # (B, T', N, 1)
    starts: np.ndarray    # index of each window's first input step
    target_index: int = 0
    timestamps: np.ndarray | None = None  # first forecast hour per window

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "WindowSet":
        return WindowSet(self.inputs[idx], self.targets[idx], self.starts[idx], self.target_index,
                         None if self.timestamps is None else self.timestamps[idx])

    @classmethod
    def empty(cls, T, T_prime, N, F, target_index=0) -> "WindowSet":
        return cls(np.zeros((0, T, N, F)), np.zeros((0, T_prime, N, 1)), np.zeros(0, dtype=int),
                   target_index, np.zeros(0, dtype="datetime64[h]"))


def make_windows(seq: GraphSignalSequence, spec: WindowSpec) -> WindowSet:
    """Sliding (T history, T' horizon) pairs.

    Inputs are imputed; a window is dropped when any target reading of the
    predicted channel is missing.
    """
    T_total, N, F = seq.shape
    target = 0 if spec.target_feature is None else seq.feature_index(spec.target_feature)
    span = spec.T + spec.T_prime
    if T_total < span:
        warnings.warn(f"sequence of {T_total} steps is shorter than T + T' = {span}; no windows")
        return WindowSet.empty(spec.T, spec.T_prime, N, F, target)
    filled = impute(seq).data
    raw_target = seq.data[:, :, target]
    missing = seq.missing_mask[:, :, target]
    starts = [s for s in range(0, T_total - span + 1, spec.stride)
              if not missing[s + spec.T:s + span].any()]
    if not starts:
        warnings.warn("every candidate window has a missing target; no windows")
        return WindowSet.empty(spec.T, spec.T_prime, N, F, target)
    starts = np.asarray(starts)
    inputs = np.stack([filled[s:s + spec.T] for s in starts])
    targets = np.stack([raw_target[s + spec.T:s + span] for s in starts])[..., None]
    return WindowSet(inputs, targets, starts, target, seq.timestamps[starts + spec.T])


def split_by_time(seq: GraphSignalSequence, boundary) -> tuple[GraphSignalSequence, GraphSignalSequence]:
    """Train is strictly before ``boundary``, test is at or after it."""
    b = np.datetime64(boundary, "h")
    if len(seq) and not seq.timestamps[0] <= b <= seq.timestamps[-1] + HOUR:
        raise ValueError(f"boundary {b} outside [{seq.timestamps[0]}, {seq.timestamps[-1]}]")
    cut = int(np.searchsorted(seq.timestamps, b))
    return seq.slice_time(0, cut), seq.slice_time(cut, len(seq))


def split_windows_tail(windows: WindowSet, fraction: float = 0.1) -> tuple[WindowSet, WindowSet]:
    """Hold out the last ``fraction`` of windows (by time) for validation."""
    n = len(windows)
    n_valid = max(1, int(round(n * fraction))) if n > 1 else 0
    order = np.argsort(windows.starts, kind="stable")
    return windows.subset(order[:n - n_valid]), windows.subset(order[n - n_valid:])


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

def synthetic_generate(W, T_total: int, seed: int, alpha: float = 0.8, season_amp: float = 1.0,
                       noise_std: float = 0.05, node_ids: Sequence[str] | None = None,
                       n_exogenous: int = 0, P=None, start="2015-01-01T00") -> GraphSignalSequence:
    """Diffusing daily cycles on a graph.

    ``x[t+1] = alpha * P x[t] + (1 - alpha) * s(t) + noise`` with
    ``P = D^-1 W`` (or the given ``P``), and ``s_i(t)`` a 24-hour sinusoid
    with node-specific level and phase.  Optional exogenous channels are
    lagged copies of the signal (lag 1, 2, ...) passed through tanh.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    W = np.asarray(W, dtype=float)
    N = W.shape[0]
    if P is None:
        P = W / W.sum(axis=1, keepdims=True)
    P = np.asarray(P, dtype=float)
    rng = np.random.default_rng(seed)
    level = rng.uniform(1.0, 2.0, N)
    phase = rng.uniform(0.0, 2.0 * np.pi, N)
    hours = np.arange(T_total)
    season = level[None, :] + season_amp * np.sin(2.0 * np.pi * hours[:, None] / 24.0 + phase[None, :])
    noise = rng.normal(0.0, noise_std, (T_total, N)) if noise_std > 0 else np.zeros((T_total, N))
    x = np.empty((T_total, N))
    x[0] = season[0]
    for t in range(T_total - 1):
        x[t + 1] = alpha * (P @ x[t]) + (1.0 - alpha) * season[t] + noise[t + 1]
    channels = [x]
    names, groups = ["pm"], ["air"]
    for lag in range(1, n_exogenous + 1):
        lag = min(lag, T_total)
        lagged = np.vstack([np.repeat(x[:1], lag, axis=0), x[:T_total - lag]])
        channels.append(np.tanh(lagged))
        names.append(f"exo_lag{lag}")
        groups.append("external")
    data = np.stack(channels, axis=-1)
    stamps = np.datetime64(start, "h") + hours.astype("timedelta64[h]")
    ids = list(node_ids) if node_ids is not None else [f"s{i:02d}" for i in range(N)]
    return GraphSignalSequence(stamps, ids, data, names, groups)


# --------------------------------------------------------------------------
# cache files
# --------------------------------------------------------------------------

def save_dataset(seq: GraphSignalSequence, path):
    meta = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "node_ids": seq.node_ids,
            "feature_names": seq.feature_names, "feature_groups": seq.feature_groups}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)),
                 hours=seq.timestamps.astype("int64"), data=seq.data, mask=seq.missing_mask)


def load_dataset(path) -> GraphSignalSequence:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: not a dataset cache (format={meta.get('format')!r})")
        if meta.get("version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {meta.get('version')}")
        return GraphSignalSequence(z["hours"].astype("datetime64[h]"), meta["node_ids"], z["data"],
                                   meta["feature_names"], meta["feature_groups"], z["mask"])

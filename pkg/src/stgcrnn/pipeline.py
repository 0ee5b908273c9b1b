"""Glue between the data, model and training modules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (GraphSignalSequence, NormalizationStats, WindowSet, WindowSpec,
                   fit_normalization, load_dataset, make_windows, normalize, split_by_time,
                   split_windows_tail, synthetic_generate)
from .errors import AlignmentError
from .graph import StationGraph, build_adjacency, graph_from_coords
from .model import GCRNNModel, ModelConfig
from .train import FitResult, TrainConfig, fit


@dataclass
class PreparedData:
    train: WindowSet
    valid: WindowSet
    test: WindowSet
    stats: NormalizationStats
    target_index: int
    feature_names: list[str]


def synthetic_stations(n: int, seed: int, extent_m: float = 30_000.0):
    """Random station layout on a square of side ``extent_m`` meters."""
    rng = np.random.default_rng(seed)
    return [f"s{i:02d}" for i in range(n)], rng.uniform(0.0, extent_m, (n, 2))


def synthetic_graph(n: int, seed: int, epsilon: float, extent_m: float = 30_000.0) -> StationGraph:
    ids, xy = synthetic_stations(n, seed, extent_m)
    return graph_from_coords(ids, xy, epsilon)


def resolve_boundary(seq: GraphSignalSequence, train_end) -> np.datetime64:
    """A timestamp string, or a float in (0, 1) meaning that fraction of the hours."""
    if isinstance(train_end, float) and 0.0 < train_end < 1.0:
        return seq.timestamps[int(round(len(seq) * train_end))]
    return np.datetime64(train_end, "h")


def prepare(seq: GraphSignalSequence, spec: WindowSpec, train_end=0.8, valid_fraction: float = 0.1,
            train_stride: int | None = None, normalization: str = "minmax") -> PreparedData:
    """Split by time, scale with training statistics, window each split.

    Validation windows are the last ``valid_fraction`` of the training
    windows.  ``train_stride`` thins the training windows only.
    """
    train_seq, test_seq = split_by_time(seq, resolve_boundary(seq, train_end))
    stats = fit_normalization(train_seq, normalization)
    train_n, test_n = normalize(train_seq, stats), normalize(test_seq, stats)
    train_w = make_windows(train_n, spec)
    train_w, valid_w = split_windows_tail(train_w, valid_fraction)
    if train_stride and train_stride > 1:
        train_w = train_w.subset(np.arange(0, len(train_w), train_stride))
    test_w = make_windows(test_n, spec)
    return PreparedData(train_w, valid_w, test_w, stats, train_w.target_index, list(seq.feature_names))


def build_model(W, config: ModelConfig) -> GCRNNModel:
    return GCRNNModel.from_graph(config, W)


def train_model(W, data: PreparedData, model_config: ModelConfig, train_config: TrainConfig,
                **callbacks) -> FitResult:
    model = build_model(W, model_config)
    return fit(model, data.train, data.valid, train_config, **callbacks)


def load_inputs(cfg) -> tuple[StationGraph, GraphSignalSequence]:
    """Graph and signal sequence named by a run config, generating whatever is missing."""
    syn = cfg.data.synthetic
    if cfg.graph.path:
        graph = StationGraph.load(cfg.graph.path)
    else:
        graph = synthetic_graph(syn.nodes, syn.seed, cfg.graph.epsilon, syn.extent_m)
    if cfg.data.dataset:
        seq = load_dataset(cfg.data.dataset)
        if seq.node_ids != graph.node_ids:
            missing = sorted(set(graph.node_ids) - set(seq.node_ids))
            extra = sorted(set(seq.node_ids) - set(graph.node_ids))
            raise AlignmentError(f"dataset nodes differ from graph nodes (missing {missing}, "
                                 f"unexpected {extra}, or a different order)")
    else:
        seq = synthetic_generate(graph.W, syn.hours, syn.seed, alpha=syn.alpha,
                                 season_amp=syn.season_amp, noise_std=syn.noise_std,
                                 node_ids=graph.node_ids, n_exogenous=syn.n_exogenous)
    return graph, seq


def adjacency_at(graph: StationGraph, epsilon: float) -> np.ndarray:
    """The graph's weights re-thresholded at ``epsilon`` (the stored W when it matches)."""
    if epsilon == graph.epsilon:
        return graph.W
    if not np.any(graph.dist):
        raise ValueError("graph file has no distances; cannot rebuild it at another epsilon")
    return build_adjacency(graph.dist, epsilon, graph.node_ids)


def window_spec(cfg) -> WindowSpec:
    return WindowSpec(cfg.data.T, cfg.data.T_prime, 1, cfg.data.target)


def prepare_from_config(cfg, seq: GraphSignalSequence) -> PreparedData:
    return prepare(seq, window_spec(cfg), cfg.data.train_end, cfg.train.valid_fraction,
                   cfg.data.train_stride, cfg.data.normalization)

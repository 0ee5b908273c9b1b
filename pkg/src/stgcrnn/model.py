"""Graph-convolutional GRU cells and the encoder-decoder forecaster.

Signals carry the node axis first.  A single sample is (N, F); a batch is
(N, B, F).  Both layouts flow through the same code since the graph
operators only touch the leading axis and filters only the trailing one.
Sequences stack time in front: (T, N, F) or (T, N, B, F).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .errors import ConfigurationError, ContractError, DimensionError
from .gconv import CONV_KINDS, GConvFilter, GraphOperator, apply_filter, num_supports

CHECKPOINT_FORMAT = "stgcrnn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    conv: str = "diffusion_dual"
    K: int = 2
    input_dim: int = 1
    hidden_dim: int = 64
    num_layers: int = 2
    history: int = 12
    horizon: int = 12
    laplacian: str = "sym_normalized"
    lambda_max_mode: str = "power"
    cheb_recurrence: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.conv not in CONV_KINDS:
            raise ConfigurationError(f"conv must be one of {CONV_KINDS}, got {self.conv!r}")
        for name in ("input_dim", "hidden_dim", "num_layers", "history", "horizon"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.K < 0:
            raise ConfigurationError("K must be >= 0")


class GCRNNCell:
    """GRU cell whose dense transforms are graph convolutions."""

    def __init__(self, kind, K, input_dim, hidden_dim, rng, name=""):
        width = input_dim + hidden_dim
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.reset = GConvFilter.create(kind, K, width, hidden_dim, rng, f"{name}reset.")
        self.update = GConvFilter.create(kind, K, width, hidden_dim, rng, f"{name}update.")
        self.candidate = GConvFilter.create(kind, K, width, hidden_dim, rng, f"{name}candidate.")

    @property
    def filters(self):
        return {"reset": self.reset, "update": self.update, "candidate": self.candidate}

    def parameters(self) -> list[dn.Tensor]:
        return [p for f in self.filters.values() for p in f.parameters()]


def cell_gates(X, H_prev, cell: GCRNNCell, op: GraphOperator):
    """Return ``(r, u, C, H)`` for one step."""
    X = dn.as_tensor(X)
    H_prev = dn.as_tensor(H_prev)
    if X.shape[-1] != cell.input_dim or H_prev.shape[-1] != cell.hidden_dim \
            or X.shape[:-1] != H_prev.shape[:-1]:
        raise DimensionError(
            f"cell expects input (..., {cell.input_dim}) and state (..., {cell.hidden_dim}); "
            f"got {X.shape} and {H_prev.shape}")
    # reset and update read the same [X, H] so they share one set of taps
    taps = op.taps(dn.concat([X, H_prev]))
    r = dn.sigmoid(apply_filter(taps, cell.reset))
    u = dn.sigmoid(apply_filter(taps, cell.update))
    C = dn.tanh(apply_filter(op.taps(dn.concat([X, dn.hadamard(r, H_prev)])), cell.candidate))
    H = dn.add(dn.hadamard(u, H_prev), dn.hadamard(dn.affine(u, -1.0, 1.0), C))
    return r, u, C, H


def cell_step(X, H_prev, cell: GCRNNCell, op: GraphOperator) -> dn.Tensor:
    return cell_gates(X, H_prev, cell, op)[3]


class GCRNNModel:
    def __init__(self, config: ModelConfig, operator: GraphOperator):
        if operator.kind != config.conv or operator.K != config.K:
            raise ConfigurationError(
                f"operator ({operator.kind}, K={operator.K}) does not match config "
                f"({config.conv}, K={config.K})")
        self.config = config
        self.operator = operator
        rng = np.random.default_rng(config.seed)
        c = config
        self.encoder = [GCRNNCell(c.conv, c.K, c.input_dim if i == 0 else c.hidden_dim,
                                  c.hidden_dim, rng, f"encoder.{i}.") for i in range(c.num_layers)]
        self.decoder = [GCRNNCell(c.conv, c.K, 1 if i == 0 else c.hidden_dim,
                                  c.hidden_dim, rng, f"decoder.{i}.") for i in range(c.num_layers)]
        limit = np.sqrt(6.0 / (c.hidden_dim + 1))
        self.proj_weight = dn.Tensor(rng.uniform(-limit, limit, (c.hidden_dim, 1)),
                                     requires_grad=True, name="projection.weight")
        self.proj_bias = dn.Tensor(np.zeros(1), requires_grad=True, name="projection.bias")

    @classmethod
    def from_graph(cls, config: ModelConfig, W) -> "GCRNNModel":
        op = GraphOperator.build(W, config.conv, config.K, config.laplacian,
                                 config.lambda_max_mode, config.cheb_recurrence)
        return cls(config, op)

    def named_parameters(self) -> list[tuple[str, dn.Tensor]]:
        out = []
        for part, cells in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, cell in enumerate(cells):
                for gate, f in cell.filters.items():
                    out.append((f"{part}.{i}.{gate}.theta", f.theta))
                    out.append((f"{part}.{i}.{gate}.bias", f.bias))
        out.append(("projection.weight", self.proj_weight))
        out.append(("projection.bias", self.proj_bias))
        return out

    def parameters(self) -> list[dn.Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def project(self, H: dn.Tensor) -> dn.Tensor:
        lead = H.shape[:-1]
        flat = dn.reshape(H, (int(np.prod(lead)), H.shape[-1]))
        out = dn.add_bias(dn.matmul(flat, self.proj_weight), self.proj_bias)
        return dn.reshape(out, lead + (1,))

    def __call__(self, inputs, targets=None):
        return forward(self, inputs, targets)

    def predict(self, inputs: np.ndarray) -> np.ndarray:
        """Autoregressive forecast for windows shaped (B, T, N, F) -> (B, T', N)."""
        inputs = np.asarray(inputs, dtype=float)
        with dn.no_grad():
            out = forward(self, inputs.transpose(1, 2, 0, 3)).value
        return out[..., 0].transpose(2, 0, 1)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing, extra = sorted(set(own) - set(state)), sorted(set(state) - set(own))
            raise ConfigurationError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=float)
            if value.shape != p.shape:
                raise ConfigurationError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.value[...] = value


def _zero_state(like: dn.Tensor, hidden: int) -> dn.Tensor:
    return dn.Tensor._wrap(np.zeros(like.shape[:-1] + (hidden,)))


def encode(inputs, model: GCRNNModel) -> list[dn.Tensor]:
    """Run the encoder over (T, N, [B,] F) inputs; returns the final state per layer."""
    x_seq = np.asarray(inputs.value if isinstance(inputs, dn.Tensor) else inputs, dtype=float)
    if x_seq.ndim not in (3, 4) or x_seq.shape[0] < 1:
        raise DimensionError(f"encoder input must be (T, N, [B,] F) with T >= 1, got {x_seq.shape}")
    if x_seq.shape[-1] != model.config.input_dim:
        raise DimensionError(f"input has {x_seq.shape[-1]} features, model expects {model.config.input_dim}")
    first = dn.Tensor._wrap(x_seq[0])
    states = [_zero_state(first, model.config.hidden_dim) for _ in model.encoder]
    for t in range(x_seq.shape[0]):
        x = dn.Tensor._wrap(np.ascontiguousarray(x_seq[t]))
        for i, cell in enumerate(model.encoder):
            states[i] = cell_step(x, states[i], cell, model.operator)
            x = states[i]
    return states


def decode(init_states, model: GCRNNModel, targets=None, mode: str = "autoregressive") -> dn.Tensor:
    """Emit T' projected steps, shape (T', N, [B,] 1).

    The first decoder input is a zero signal.  Later inputs are the previous
    ground truth (``teacher_forcing``) or the previous prediction
    (``autoregressive``).
    """
    if mode not in ("teacher_forcing", "autoregressive"):
        raise ContractError(f"unknown decode mode {mode!r}")
    horizon = model.config.horizon
    if mode == "teacher_forcing":
        if targets is None:
            raise ContractError("teacher forcing needs targets")
        targets = np.asarray(targets.value if isinstance(targets, dn.Tensor) else targets, dtype=float)
        if targets.shape[0] != horizon:
            raise ContractError(f"targets cover {targets.shape[0]} steps, horizon is {horizon}")
    states = list(init_states)
    if len(states) != len(model.decoder):
        raise DimensionError(f"{len(states)} initial states for {len(model.decoder)} decoder layers")
    x = dn.Tensor._wrap(np.zeros(states[0].shape[:-1] + (1,)))
    outputs = []
    for t in range(horizon):
        h = x
        for i, cell in enumerate(model.decoder):
            states[i] = cell_step(h, states[i], cell, model.operator)
            h = states[i]
        y = model.project(h)
        outputs.append(y)
        if mode == "teacher_forcing":
            x = dn.Tensor._wrap(np.ascontiguousarray(targets[t]).reshape(y.shape))
        else:
            x = y
    return dn.stack(outputs)


def forward(model: GCRNNModel, inputs, targets=None) -> dn.Tensor:
    """Encode then decode; teacher forcing iff ``targets`` is given."""
    states = encode(inputs, model)
    if targets is None:
        return decode(states, model, mode="autoregressive")
    return decode(states, model, targets, mode="teacher_forcing")


def count_parameters(model_or_config) -> int:
    """Closed-form parameter count.

    Each cell holds three filters of ``(K+1) * M * (in + hidden) * hidden``
    weights plus ``hidden`` biases, where M is the number of support matrices;
    the projection adds ``hidden + 1``.
    """
    c = model_or_config.config if isinstance(model_or_config, GCRNNModel) else model_or_config
    taps = (c.K + 1) * num_supports(c.conv)
    h = c.hidden_dim

    def cell(in_dim):
        return 3 * (taps * (in_dim + h) * h + h)

    enc = sum(cell(c.input_dim if i == 0 else h) for i in range(c.num_layers))
    dec = sum(cell(1 if i == 0 else h) for i in range(c.num_layers))
    return enc + dec + h + 1


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def checkpoint_document(model: GCRNNModel, W, meta: dict | None = None) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "decoder_start": "zeros",
        "graph_W": np.asarray(W, dtype=float).tolist(),
        "meta": meta or {},
        "params": {name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                   for name, v in model.state_dict().items()},
    }


def save_checkpoint(model: GCRNNModel, path, W, meta: dict | None = None):
    """Write a JSON checkpoint.  Float reprs round-trip exactly."""
    Path(path).write_text(json.dumps(checkpoint_document(model, W, meta), sort_keys=True))


def load_checkpoint(path) -> tuple[GCRNNModel, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path}: not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
    W = np.asarray(doc["graph_W"], dtype=float)
    model = GCRNNModel.from_graph(config, W)
    model.load_state_dict({name: np.asarray(p["values"], dtype=float).reshape(p["shape"])
                           for name, p in doc["params"].items()})
    return model, {"W": W, **doc.get("meta", {})}

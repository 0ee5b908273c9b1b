"""Spectral (Chebyshev) and diffusion graph convolutions with channel mixing.

A convolution is split into two stages: :meth:`GraphOperator.taps` stacks the
K+1 polynomial/diffusion terms of the input along the feature axis, and
:func:`apply_filter` mixes the stacked features with ``theta`` and adds the
bias.  The GRU cell reuses one set of taps for its reset and update gates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffnum as dn
from .errors import ConfigurationError
from .graph import (LaplacianBundle, TransitionSet, chebyshev_apply, diffusion_apply,
                    laplacian, scale_laplacian, transition_set)

CONV_KINDS = ("spectral", "diffusion_rw", "diffusion_dual")
_MODE_FOR_KIND = {"diffusion_rw": "random_walk", "diffusion_dual": "dual_random_walk"}


def num_supports(kind: str) -> int:
    if kind not in CONV_KINDS:
        raise ConfigurationError(f"unknown convolution kind {kind!r}")
    return 2 if kind == "diffusion_dual" else 1


@dataclass
class GConvFilter:
    kind: str
    K: int
    in_dim: int
    out_dim: int
    theta: dn.Tensor
    bias: dn.Tensor

    @classmethod
    def create(cls, kind, K, in_dim, out_dim, rng: np.random.Generator, name="") -> "GConvFilter":
        """Glorot-uniform ``theta``, zero bias."""
        rows = (K + 1) * num_supports(kind) * in_dim
        limit = np.sqrt(6.0 / (rows + out_dim))
        theta = dn.Tensor(rng.uniform(-limit, limit, (rows, out_dim)), requires_grad=True,
                          name=f"{name}theta")
        bias = dn.Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}bias")
        return cls(kind, K, in_dim, out_dim, theta, bias)

    @property
    def num_taps(self) -> int:
        return (self.K + 1) * num_supports(self.kind)

    def parameters(self) -> list[dn.Tensor]:
        return [self.theta, self.bias]

    def check(self):
        rows = self.num_taps * self.in_dim
        if self.theta.shape != (rows, self.out_dim) or self.bias.shape != (self.out_dim,):
            raise ConfigurationError(
                f"{self.kind} filter with K={self.K}, F_in={self.in_dim}, F_out={self.out_dim} "
                f"needs theta {(rows, self.out_dim)} and bias {(self.out_dim,)}, "
                f"got {self.theta.shape} and {self.bias.shape}")


class GraphOperator:
    """The fixed graph side of a convolution: scaled Laplacian or transitions."""

    def __init__(self, kind: str, K: int, supports: list[np.ndarray], recurrence: str = "standard"):
        if K < 0:
            raise ConfigurationError("K must be non-negative")
        if len(supports) != num_supports(kind):
            raise ConfigurationError(f"{kind} needs {num_supports(kind)} support matrices")
        self.kind = kind
        self.K = K
        self.supports = [np.ascontiguousarray(s, dtype=float) for s in supports]
        self.recurrence = recurrence

    @classmethod
    def from_bundle(cls, bundle: LaplacianBundle, K: int, recurrence: str = "standard"):
        if bundle.L_scaled is None:
            raise ConfigurationError("Laplacian bundle has no scaled Laplacian; call scale_laplacian")
        return cls("spectral", K, [bundle.L_scaled], recurrence)

    @classmethod
    def from_transitions(cls, transitions: TransitionSet, K: int):
        kind = "diffusion_rw" if transitions.mode == "random_walk" else "diffusion_dual"
        return cls(kind, K, list(transitions.matrices))

    @classmethod
    def build(cls, W, kind: str, K: int, laplacian_kind: str = "sym_normalized",
              lambda_max_mode: str = "power", recurrence: str = "standard") -> "GraphOperator":
        if kind == "spectral":
            bundle = scale_laplacian(laplacian(W, laplacian_kind), lambda_max_mode)
            return cls.from_bundle(bundle, K, recurrence)
        if kind in _MODE_FOR_KIND:
            return cls.from_transitions(transition_set(W, _MODE_FOR_KIND[kind]), K)
        raise ConfigurationError(f"unknown convolution kind {kind!r}")

    @property
    def num_nodes(self) -> int:
        return self.supports[0].shape[0]

    @property
    def num_taps(self) -> int:
        return (self.K + 1) * len(self.supports)

    def terms(self, X: dn.Tensor) -> list[dn.Tensor]:
        if self.kind == "spectral":
            return chebyshev_apply(self.supports[0], X, self.K, self.recurrence)
        out = []
        for P in self.supports:
            out.extend(diffusion_apply(P, X, self.K))
        return out

    def taps(self, X: dn.Tensor) -> dn.Tensor:
        """Stack every term along the feature axis: (..., num_taps * F)."""
        terms = self.terms(X)
        return terms[0] if len(terms) == 1 else dn.concat(terms)


def apply_filter(stacked: dn.Tensor, filt: GConvFilter) -> dn.Tensor:
    rows_in = stacked.shape[-1]
    if rows_in != filt.theta.shape[0]:
        raise ConfigurationError(
            f"stacked taps have width {rows_in} but theta expects {filt.theta.shape[0]}")
    lead = stacked.shape[:-1]
    flat = dn.reshape(stacked, (int(np.prod(lead)), rows_in))
    out = dn.add_bias(dn.matmul(flat, filt.theta), filt.bias)
    return dn.reshape(out, lead + (filt.out_dim,))


def graph_conv(X: dn.Tensor, op: GraphOperator, filt: GConvFilter) -> dn.Tensor:
    if op.kind != filt.kind or op.K != filt.K:
        raise ConfigurationError(
            f"filter ({filt.kind}, K={filt.K}) does not match operator ({op.kind}, K={op.K})")
    filt.check()
    if X.shape[-1] != filt.in_dim:
        raise ConfigurationError(f"input has {X.shape[-1]} features, filter expects {filt.in_dim}")
    return apply_filter(op.taps(X), filt)


def spectral_gconv(X, bundle: LaplacianBundle, filt: GConvFilter, recurrence: str = "standard") -> dn.Tensor:
    """Chebyshev filter ``sum_k T_k(L~) X theta_k + b``."""
    if filt.kind != "spectral":
        raise ConfigurationError(f"spectral_gconv got a {filt.kind} filter")
    return graph_conv(dn.as_tensor(X), GraphOperator.from_bundle(bundle, filt.K, recurrence), filt)


def diffusion_gconv(X, transitions: TransitionSet, filt: GConvFilter) -> dn.Tensor:
    """Diffusion filter ``sum_P sum_k P^k X theta_{P,k} + b``."""
    if _MODE_FOR_KIND.get(filt.kind) != transitions.mode:
        raise ConfigurationError(f"{filt.kind} filter cannot use {transitions.mode} transitions")
    return graph_conv(dn.as_tensor(X), GraphOperator.from_transitions(transitions, filt.K), filt)

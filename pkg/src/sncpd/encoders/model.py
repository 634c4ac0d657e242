"""Residual encoder ``G = h o g`` and the small dense heads used by BYOL.

``g`` is a per-timestamp affine map from D input channels to the hidden
width; ``h`` stacks residual blocks ``h_l(Z) = Z + g_l(Z)`` with
``g_l(Z) = dropout(act(conv_l(Z) + b_l))``.  An optional output head maps
the hidden features to the code size.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import diffcore as dc
from ..errors import ConfigError, DimensionError
from ..specnorm import (SNConfig, SpectralNormState, estimate_spectral_norm, project_parameter,
                        weight_matrix)


@dataclass
class EncoderConfig:
    input_dims: int
    hidden_dims: int = 128
    output_dims: int = 16
    depth: int = 8
    kernel_size: int = 3
    dilated: bool = True
    activation: str = "tanh"
    dropout: float = 0.1
    head: bool = True
    sn: SNConfig | None = field(default_factory=SNConfig)
    seed: int = 0
    family: str = "ts2vec"

    def __post_init__(self):
        if isinstance(self.sn, dict):
            self.sn = SNConfig(**self.sn)
        if self.activation not in dc.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        for name in ("input_dims", "hidden_dims", "output_dims", "kernel_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.family not in ("ts2vec", "byol"):
            raise ConfigError(f"unknown encoder family {self.family!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _as_batch(X) -> tuple[dc.Tensor, bool]:
    X = dc.as_tensor(X)
    if X.ndim == 2:
        return X.reshape(1, *X.shape), True
    if X.ndim != 3:
        raise DimensionError(f"expected (T, C) or (B, T, C) input, got shape {X.shape}")
    return X, False


class EncoderModel:
    """Residual convolutional encoder with per-layer spectral-norm state."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        self.sn = config.sn
        rng = np.random.default_rng(config.seed)
        D, H, d, k = config.input_dims, config.hidden_dims, config.output_dims, config.kernel_size
        self.params: dict[str, dc.Tensor] = {}
        self._add("proj.weight", _uniform(rng, (H, D), D))
        self._add("proj.bias", _uniform(rng, (H,), D))
        for layer in range(config.depth):
            self._add(f"block{layer}.weight", _uniform(rng, (H, H, k), H * k))
            self._add(f"block{layer}.bias", _uniform(rng, (H,), H * k))
        if config.head:
            self._add("head.weight", _uniform(rng, (d, H), H))
            self._add("head.bias", _uniform(rng, (d,), H))
        # norm tracking exists for every block, capped or not, so vanilla
        # runs can report their layer norms too
        per_step = self.sn.iterations_per_step if self.sn else 1
        self.sn_states: dict[str, SpectralNormState] = {
            f"block{layer}.weight": SpectralNormState.for_shape(H, H * k, rng, per_step)
            for layer in range(config.depth)
        }
        if self.sn is not None:
            self.project(n_iter=1000, tol=1e-13)

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = dc.Tensor(value, requires_grad=True, name=name)

    # -- structure -------------------------------------------------------
    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def input_dims(self) -> int:
        return self.config.input_dims

    @property
    def hidden_dims(self) -> int:
        return self.config.hidden_dims

    @property
    def output_dims(self) -> int:
        return self.config.output_dims if self.config.head else self.config.hidden_dims

    @property
    def activation_lipschitz(self) -> float:
        return dc.ACTIVATION_LIPSCHITZ[self.config.activation]

    @property
    def modes(self) -> tuple[str, ...]:
        """Embedding modes: TS2Vec emits per-timestamp codes, BYOL only pooled ones."""
        return ("vector", "sequence") if self.config.family == "ts2vec" else ("vector",)

    def dilation(self, layer: int) -> int:
        return 2 ** layer if self.config.dilated else 1

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    def sn_layers(self):
        """(name, weight tensor, norm state) for every block weight."""
        return [(name, self.params[name], state) for name, state in self.sn_states.items()]

    # -- spectral norm ---------------------------------------------------
    def project(self, n_iter: int | None = None, tol: float | None = None) -> float:
        """Cap every block weight at ``c``; returns the largest norm afterwards."""
        if self.sn is None:
            return self.track_norms(n_iter)
        worst = 0.0
        for _, weight, state in self.sn_layers():
            worst = max(worst, project_parameter(weight.data, self.sn.c, state, n_iter, tol))
        return worst

    def track_norms(self, n_iter: int | None = None) -> float:
        """Warm-started norm estimates without touching the weights."""
        worst = 0.0
        for _, weight, state in self.sn_layers():
            worst = max(worst, estimate_spectral_norm(weight_matrix(weight.data), state, n_iter))
        return worst

    # -- forward pieces --------------------------------------------------
    def input_map(self, X) -> dc.Tensor:
        X = dc.as_tensor(X)
        if X.shape[-1] != self.input_dims:
            raise DimensionError(f"expected {self.input_dims} channels, got {X.shape[-1]}")
        return X @ self.params["proj.weight"].T + self.params["proj.bias"]

    def residual(self, layer: int, Z, training: bool = False,
                 rng: np.random.Generator | None = None) -> dc.Tensor:
        """Branch ``g_l`` of block ``layer``; accepts (T, H) or (B, T, H)."""
        Zb, squeeze = _as_batch(Z)
        act = dc.ACTIVATIONS[self.config.activation]
        pre = dc.conv1d(Zb, self.params[f"block{layer}.weight"], self.dilation(layer),
                        self.params[f"block{layer}.bias"])
        out = dc.dropout(act(pre), self.config.dropout, training, rng)
        return out.reshape(out.shape[1:]) if squeeze else out

    def block(self, layer: int, Z, training: bool = False,
              rng: np.random.Generator | None = None) -> dc.Tensor:
        Z = dc.as_tensor(Z)
        return Z + self.residual(layer, Z, training, rng)

    def forward_hidden(self, Z, training: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
        Z = dc.as_tensor(Z)
        for layer in range(self.depth):
            Z = self.block(layer, Z, training, rng)
        return Z

    def output_map(self, Z) -> dc.Tensor:
        if not self.config.head:
            return dc.as_tensor(Z)
        return Z @ self.params["head.weight"].T + self.params["head.bias"]

    def hidden(self, X, training: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
        """``h(g(X))``, the invertible part followed by nothing else."""
        return self.forward_hidden(self.input_map(X), training, rng)

    def forward_sequence(self, X, training: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
        return self.output_map(self.hidden(X, training, rng))

    def forward_vector(self, X, training: bool = False, rng: np.random.Generator | None = None) -> dc.Tensor:
        """Mean of the hidden features over time, then the head."""
        return self.output_map(self.hidden(X, training, rng).mean(axis=-2))

    # -- inference -------------------------------------------------------
    def encode_sequence(self, X) -> np.ndarray:
        return self.forward_sequence(np.asarray(X, dtype=np.float64)).data

    def encode_vector(self, X) -> np.ndarray:
        return self.forward_vector(np.asarray(X, dtype=np.float64)).data

    # -- state -----------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Snapshot (copies) of weights and power-iteration vectors."""
        out = {name: p.data.copy() for name, p in self.params.items()}
        for name, st in self.sn_states.items():
            out[f"{name}.sn_u"] = st.u.copy()
            out[f"{name}.sn_v"] = st.v.copy()
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in arrays:
                raise KeyError(f"missing weight {name!r}")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {arrays[name].shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for name, st in self.sn_states.items():
            if f"{name}.sn_u" in arrays:
                st.u = np.array(arrays[f"{name}.sn_u"], dtype=np.float64)
                st.v = np.array(arrays[f"{name}.sn_v"], dtype=np.float64)

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    @classmethod
    def identity(cls, dims: int, depth: int = 2, kernel_size: int = 3) -> "EncoderModel":
        """Toy model with ``g`` the identity and every branch identically zero."""
        cfg = EncoderConfig(input_dims=dims, hidden_dims=dims, output_dims=dims, depth=depth,
                            kernel_size=kernel_size, activation="tanh", dropout=0.0,
                            head=False, sn=None)
        model = cls(cfg)
        for name, p in model.params.items():
            p.data[...] = 0.0
        model.params["proj.weight"].data[...] = np.eye(dims)
        return model


class MLP:
    """Two dense layers with a ReLU in between, as used for BYOL heads."""

    def __init__(self, in_dims: int, hidden_dims: int, out_dims: int, seed: int = 0, prefix: str = "mlp"):
        rng = np.random.default_rng(seed)
        self.params = {
            f"{prefix}.fc1.weight": dc.Tensor(_uniform(rng, (hidden_dims, in_dims), in_dims), True),
            f"{prefix}.fc1.bias": dc.Tensor(_uniform(rng, (hidden_dims,), in_dims), True),
            f"{prefix}.fc2.weight": dc.Tensor(_uniform(rng, (out_dims, hidden_dims), hidden_dims), True),
            f"{prefix}.fc2.bias": dc.Tensor(_uniform(rng, (out_dims,), hidden_dims), True),
        }
        self.prefix = prefix

    def parameters(self) -> list[dc.Tensor]:
        return list(self.params.values())

    def __call__(self, x) -> dc.Tensor:
        p = self.prefix
        h = dc.relu(dc.as_tensor(x) @ self.params[f"{p}.fc1.weight"].T + self.params[f"{p}.fc1.bias"])
        return h @ self.params[f"{p}.fc2.weight"].T + self.params[f"{p}.fc2.bias"]

    def copy(self) -> "MLP":
        return copy.deepcopy(self)

"""FFN, CNN, DCNN and kernel-fusion dilated CNN (KFDCNN) burst classifiers."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from .dataio import N_FEATURES, WindowedExample, WindowSpec
from .errors import ConfigError, DimensionError

KINDS = ("ffn", "cnn", "dcnn", "kfdcnn")

# per-kind window and branch layout; everything else comes from ModelConfig defaults
KIND_SHAPE_KEYS = ("half_span", "dilation_s", "branch_kernels", "branch_dilation")

_KIND_DEFAULTS = {
    "ffn": dict(half_span=0, dilation_s=1, branch_kernels=(), branch_dilation=1),
    "cnn": dict(half_span=20, dilation_s=1, branch_kernels=(3,), branch_dilation=1),
    "dcnn": dict(half_span=100, dilation_s=5, branch_kernels=(3,), branch_dilation=5),
    "kfdcnn": dict(half_span=100, dilation_s=5, branch_kernels=(3, 5, 7), branch_dilation=5),
}


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "kfdcnn"
    half_span: int = 100
    dilation_s: int = 5
    branch_kernels: tuple[int, ...] = (3, 5, 7)
    branch_dilation: int = 5
    branch_channels: int = 16
    second_kernel: int = 3
    second_dilation: int = 1
    second_channels: int = 32
    fc_sizes: tuple[int, ...] = (40, 20, 2)
    n_features: int = N_FEATURES
    fusion_padding: str = "same"       # or "crop": valid branches center-cropped to the shortest
    dilate_subsampled: bool = True     # False: branch kernels use dilation 1 on the strided window
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "branch_kernels", tuple(int(k) for k in self.branch_kernels))
        object.__setattr__(self, "fc_sizes", tuple(int(k) for k in self.fc_sizes))
        self.validate()

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "ModelConfig":
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; choose from {KINDS}")
        return cls(**{"kind": kind, **_KIND_DEFAULTS[kind], **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kind = d.pop("kind", "kfdcnn")
        return cls.for_kind(kind, **d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {KINDS}")
        window = self.window  # raises on bad T/s
        if not self.fc_sizes or self.fc_sizes[-1] != 2:
            raise ConfigError("fc_sizes must end in 2 output nodes")
        if any(s < 1 for s in self.fc_sizes):
            raise ConfigError("fc_sizes entries must be >= 1")
        if self.fusion_padding not in ("same", "crop"):
            raise ConfigError("fusion_padding must be 'same' or 'crop'")
        if self.kind == "ffn":
            if window.half_span != 0:
                raise ConfigError("ffn consumes a single frame; half_span must be 0")
            return
        if window.half_span == 0:
            raise ConfigError(f"{self.kind} needs a temporal window (half_span > 0)")
        if not self.branch_kernels:
            raise ConfigError(f"{self.kind} needs at least one branch kernel")
        if self.kind != "kfdcnn" and len(self.branch_kernels) != 1:
            raise ConfigError(f"{self.kind} uses a single kernel; got {self.branch_kernels}")
        for k in self.branch_kernels + (self.second_kernel,):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and >= 1, got {k}")
        if min(self.branch_channels, self.second_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if self.branch_dilation < 1 or self.second_dilation < 1:
            raise ConfigError("dilations must be >= 1")
        if self.conv_length < 2:
            raise ConfigError(
                f"window of {window.n_rows} rows is too short for kernels {self.branch_kernels} "
                f"at dilation {self.effective_branch_dilation}"
            )

    @property
    def window(self) -> WindowSpec:
        try:
            return WindowSpec(self.half_span, self.dilation_s)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def effective_branch_dilation(self) -> int:
        return self.branch_dilation if self.dilate_subsampled else 1

    @property
    def conv_length(self) -> int:
        """Temporal length after the fusion layer."""
        rows = self.window.n_rows
        if self.fusion_padding == "same":
            return rows
        return rows - self.effective_branch_dilation * (max(self.branch_kernels) - 1)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count.

    conv models: sum_k (k*D*c_b + c_b) + (k2*n_b*c_b*c_2 + c_2), then dense
    layers fed by floor(t_conv/2)*c_2 inputs. ffn: dense layers fed by D.
    """
    D = cfg.n_features
    if cfg.kind == "ffn":
        fan_in = D
        count = 0
    else:
        cb, c2 = cfg.branch_channels, cfg.second_channels
        nb = len(cfg.branch_kernels)
        count = sum(k * D * cb + cb for k in cfg.branch_kernels)
        count += cfg.second_kernel * nb * cb * c2 + c2
        fan_in = (cfg.conv_length // 2) * c2
    for size in cfg.fc_sizes:
        count += fan_in * size + size
        fan_in = size
    return count


@dataclass(frozen=True)
class Prediction:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64, copy=True)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def labels(self) -> np.ndarray:
        return (self.probs[:, 1] > self.probs[:, 0]).astype(np.int8)

    def __len__(self) -> int:
        return self.probs.shape[0]


class Model:
    def __init__(self, config: ModelConfig, network: nn.Network):
        self.config = config
        self.network = network

    @property
    def params(self) -> list[np.ndarray]:
        return self.network.params

    @property
    def n_params(self) -> int:
        return self.network.n_params

    @property
    def window(self) -> WindowSpec:
        return self.config.window

    def _as_batch(self, batch) -> np.ndarray:
        if isinstance(batch, np.ndarray):
            x = batch
        else:
            batch = list(batch)
            x = np.stack([ex.window if isinstance(ex, WindowedExample) else np.asarray(ex) for ex in batch])
        expected = (self.window.n_rows, self.config.n_features)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise DimensionError(f"model expects windows of shape {expected}, got {x.shape[1:]}")
        return np.asarray(x, dtype=np.float64)

    def forward(self, batch) -> Prediction:
        return Prediction(self.network.predict(self._as_batch(batch)))

    def predict_proba(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        x = self._as_batch(x)
        parts = [self.network.predict(x[i : i + batch_size]) for i in range(0, x.shape[0], batch_size)]
        return np.concatenate(parts) if parts else np.zeros((0, 2))

    def loss_and_grads(self, x, labels, weights: nn.ClassWeights):
        return self.network.loss_and_grads(self._as_batch(x), labels, weights)

    def get_flat(self) -> np.ndarray:
        return self.network.get_flat()

    def set_flat(self, flat) -> None:
        self.network.set_flat(flat)

    def clone(self) -> "Model":
        other = build_model(self.config)
        other.set_flat(self.get_flat())
        return other

    def layer_shapes(self) -> list[list[int]]:
        return [list(p.shape) for p in self.params]


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = np.random.default_rng(config.seed)
    D = config.n_features
    layers: list[nn.Layer] = []
    if config.kind == "ffn":
        layers.append(nn.Flatten())
        fan_in = D
    else:
        pad = "same" if config.fusion_padding == "same" else "valid"
        branches = [
            nn.Conv1D(D, config.branch_channels, k, config.effective_branch_dilation, pad, rng)
            for k in config.branch_kernels
        ]
        nb = len(branches)
        layers += [
            nn.KernelFusion(branches, crop=config.fusion_padding == "crop"),
            nn.ReLU(),
            nn.Conv1D(nb * config.branch_channels, config.second_channels,
                      config.second_kernel, config.second_dilation, "same", rng),
            nn.ReLU(),
            nn.MaxPool1D(),
            nn.Flatten(),
        ]
        fan_in = (config.conv_length // 2) * config.second_channels
    for i, size in enumerate(config.fc_sizes):
        layers.append(nn.Dense(fan_in, size, rng))
        if i < len(config.fc_sizes) - 1:
            layers.append(nn.ReLU())
        fan_in = size
    return Model(config, nn.Network(layers))


def forward(model: Model, batch) -> Prediction:
    return model.forward(batch)


def receptive_field_frames(cfg: ModelConfig) -> int:
    """Raw frames covered by the input window."""
    return cfg.window.span_frames

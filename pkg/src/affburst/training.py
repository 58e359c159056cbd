"""Cross-validation folds, the class-weighted training loop and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nn
from .dataio import AlignedRecording, Normalizer, WindowSpec
from .errors import CheckpointError, CheckpointVersionError, ConfigError, InputError, NumericError
from .metrics import FoldReport, confusion, uaf1, uar
from .models import Model, ModelConfig, build_model

log = logging.getLogger(__name__)

STRATEGIES = ("k_test_groups", "leave_one_session_out")
CHECKPOINT_MAGIC = b"AFBCKPT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class FoldSpec:
    fold_id: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        if not self.test_ids:
            raise ConfigError(f"fold {self.fold_id}: empty test set")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ConfigError(f"fold {self.fold_id}: train/val/test overlap")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(int(d["fold_id"]), d["train_ids"], d["val_ids"], d["test_ids"])


def _validation_split(ids: list[str], ratio: float, rng: np.random.Generator) -> tuple[list[str], list[str]]:
    n_val = max(1, int(round(ratio * len(ids)))) if len(ids) >= 2 and ratio > 0 else 0
    chosen = set(rng.permutation(len(ids))[:n_val].tolist())
    val = [r for i, r in enumerate(ids) if i in chosen]
    train = [r for i, r in enumerate(ids) if i not in chosen]
    return train, val


def make_folds(manifest, strategy: str = "k_test_groups", k: int = 2,
               val_ratio: float = 0.2, seed: int = 0) -> list[FoldSpec]:
    """Cross-validation folds over the recordings of a manifest.

    ``k_test_groups`` cuts the recordings, in manifest order, into consecutive
    test groups of ``k``; ``leave_one_session_out`` tests on one session per
    fold. Validation recordings are a seeded ``val_ratio`` share of the rest.
    """
    entries = list(getattr(manifest, "entries", manifest))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate recording ids")
    if strategy == "k_test_groups":
        if k < 1 or not ids or len(ids) % k:
            raise ConfigError(f"{len(ids)} recordings cannot be split into test groups of {k}")
        if len(ids) // k < 2:
            raise ConfigError("k_test_groups needs at least two groups")
        groups = [ids[i : i + k] for i in range(0, len(ids), k)]
    elif strategy == "leave_one_session_out":
        sessions: dict[str, list[str]] = {}
        for e in entries:
            sessions.setdefault(e.session, []).append(e.id)
        if len(sessions) < 2:
            raise ConfigError("leave_one_session_out needs at least two sessions")
        groups = list(sessions.values())
    else:
        raise ConfigError(f"unknown fold strategy {strategy!r}; choose from {STRATEGIES}")
    folds = []
    for fid, test in enumerate(groups):
        rest = [r for r in ids if r not in test]
        rng = np.random.default_rng([seed, fid])
        train, val = _validation_split(rest, val_ratio, rng)
        folds.append(FoldSpec(fid, train, val, test))
    return folds


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    eval_batch_size: int = 2048

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_uaf1: list[float] = field(default_factory=list)
    val_uar: list[float] = field(default_factory=list)
    best_epoch: int = 0
    n_clamped: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_uaf1", "val_uar", "best"])
        for i, (l, f, r) in enumerate(zip(self.train_loss, self.val_uaf1, self.val_uar), start=1):
            w.writerow([i, f"{l:.10g}", f"{f:.6f}", f"{r:.6f}", int(i == self.best_epoch)])
        return buf.getvalue()


@dataclass
class TrainedModel:
    model: Model
    normalizer: Normalizer
    weights: nn.ClassWeights
    fold_id: int = 0
    best_epoch: int = 0


class FrameBank:
    """Normalized frames of several recordings with zero padding between them,
    so windows for any (recording, frame) can be gathered in one indexing op."""

    def __init__(self, recordings: Sequence[AlignedRecording], spec: WindowSpec, normalizer: Normalizer):
        T = spec.half_span
        self.spec = spec
        blocks, centers, labels = [], [], []
        offset = 0
        for rec in recordings:
            frames = normalizer.apply(rec.features).frames
            dim = frames.shape[1]
            blocks += [np.zeros((T, dim)), frames, np.zeros((T, dim))]
            centers.append(offset + T + np.arange(len(rec)))
            labels.append(rec.labels.values)
            offset += len(rec) + 2 * T
        self.data = np.concatenate(blocks) if blocks else np.zeros((0, 0))
        self.centers = np.concatenate(centers) if centers else np.zeros(0, dtype=np.intp)
        self.labels = np.concatenate(labels).astype(np.intp) if labels else np.zeros(0, dtype=np.intp)

    def __len__(self) -> int:
        return self.centers.size

    def windows(self, idx: np.ndarray) -> np.ndarray:
        return self.data[self.centers[idx][:, None] + self.spec.offsets[None, :]]


def predict_bank(model: Model, bank: FrameBank, batch_size: int = 2048) -> np.ndarray:
    out = np.empty((len(bank), 2))
    for i in range(0, len(bank), batch_size):
        idx = np.arange(i, min(i + batch_size, len(bank)))
        out[idx] = model.network.predict(bank.windows(idx))
    return out


def train_fold(fold: FoldSpec, recordings: Mapping[str, AlignedRecording],
               model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[TrainedModel, TrainHistory]:
    """Train on ``fold.train_ids`` with early stopping on validation UAF1.

    Class weights and the normalizer come from the training recordings only.
    Without validation recordings, the training set stands in for it.
    Returns the parameters of the best validation epoch.
    """
    try:
        train_recs = [recordings[r] for r in fold.train_ids]
        val_recs = [recordings[r] for r in fold.val_ids]
    except KeyError as exc:
        raise InputError(f"fold {fold.fold_id}: recording {exc} not loaded") from None
    if not train_recs:
        raise ConfigError(f"fold {fold.fold_id}: no training recordings")
    normalizer = Normalizer.fit([r.features for r in train_recs])
    weights = nn.class_weights([r.labels.values for r in train_recs])
    spec = model_cfg.window
    train_bank = FrameBank(train_recs, spec, normalizer)
    val_bank = FrameBank(val_recs, spec, normalizer) if val_recs else train_bank

    model = build_model(model_cfg)
    params = model.params
    state = nn.AdamState.zeros_like(params)
    rng = np.random.default_rng([train_cfg.seed, fold.fold_id])
    history = TrainHistory()
    best_score, best_flat, stale = -np.inf, model.get_flat(), 0
    n = len(train_bank)
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, train_cfg.batch_size):
            idx = order[i : i + train_cfg.batch_size]
            y = train_bank.labels[idx]
            loss, grads, probs = model.network.loss_and_grads(train_bank.windows(idx), y, weights)
            history.n_clamped += nn.count_clamped(probs, y)
            if not np.isfinite(loss):
                raise NumericError(f"fold {fold.fold_id}, epoch {epoch}: non-finite loss")
            total += loss
            if train_cfg.optimizer == "adam":
                _, state = nn.adam_step(params, grads, state, train_cfg.lr, inplace=True)
            else:
                nn.sgd_step(params, grads, train_cfg.lr, inplace=True)
        probs = predict_bank(model, val_bank, train_cfg.eval_batch_size)
        cm = confusion(val_bank.labels, probs[:, 1] > probs[:, 0])
        history.train_loss.append(total / n)
        history.val_uaf1.append(uaf1(cm))
        history.val_uar.append(uar(cm))
        log.info("fold %d epoch %d loss %.5f val uaf1 %.4f uar %.4f", fold.fold_id, epoch,
                 total / n, history.val_uaf1[-1], history.val_uar[-1])
        if history.val_uaf1[-1] > best_score:
            best_score, best_flat, stale = history.val_uaf1[-1], model.get_flat(), 0
            history.best_epoch = epoch
        else:
            stale += 1
            if stale > train_cfg.patience:
                break
    model.set_flat(best_flat)
    return TrainedModel(model, normalizer, weights, fold.fold_id, history.best_epoch), history


def evaluate(trained: TrainedModel, recordings: Mapping[str, AlignedRecording], ids: Sequence[str],
             attribute: str = "", batch_size: int = 2048) -> FoldReport:
    recs = [recordings[r] for r in ids]
    bank = FrameBank(recs, trained.model.window, trained.normalizer)
    probs = predict_bank(trained.model, bank, batch_size)
    return FoldReport.from_labels(
        bank.labels, (probs[:, 1] > probs[:, 0]).astype(np.int8),
        fold_id=trained.fold_id, attribute=attribute, model=trained.model.config.kind,
    )


# -- checkpoints ---------------------------------------------------------------
#
# Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
# then every parameter as little-endian float64 in layer order (each layer's
# weight then bias; fusion branches in kernel order).

def save_checkpoint(path, trained: TrainedModel | Model, extra: dict | None = None) -> None:
    if isinstance(trained, TrainedModel):
        model = trained.model
        meta = {
            "normalizer": trained.normalizer.to_dict(),
            "class_weights": [trained.weights.idle, trained.weights.burst],
            "fold_id": trained.fold_id,
            "epoch": trained.best_epoch,
        }
    else:
        model, meta = trained, {}
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "seed": model.config.seed,
        "n_params": model.n_params,
        "layer_shapes": model.layer_shapes(),
        **meta,
        **(extra or {}),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    params = model.get_flat().astype("<f8").tobytes()
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(blob)) + blob + params)


def read_checkpoint(path) -> tuple[Model, dict]:
    raw = Path(path).read_bytes() if Path(path).is_file() else None
    if raw is None:
        raise CheckpointError(f"checkpoint not found: {path}")
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt checkpoint header") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {header.get('format_version')!r}, "
            f"this build reads version {CHECKPOINT_VERSION}"
        )
    body = raw[pos + hlen :]
    if len(body) != 8 * header["n_params"]:
        raise CheckpointError(f"{path}: corrupt checkpoint (expected {8 * header['n_params']} parameter bytes, got {len(body)})")
    model = build_model(ModelConfig.from_dict(header["model_config"]))
    if model.n_params != header["n_params"]:
        raise CheckpointError(f"{path}: parameter count does not match the stored architecture")
    model.set_flat(np.frombuffer(body, dtype="<f8"))
    return model, header


def load_checkpoint(path) -> Model:
    return read_checkpoint(path)[0]


def load_trained(path, with_header: bool = False):
    model, header = read_checkpoint(path)
    if "normalizer" not in header:
        raise CheckpointError(f"{path}: checkpoint carries no normalizer; it was not saved from a training run")
    trained = TrainedModel(
        model, Normalizer.from_dict(header["normalizer"]),
        nn.ClassWeights(*header["class_weights"]), header.get("fold_id", 0), header.get("epoch", 0),
    )
    return (trained, header) if with_header else trained

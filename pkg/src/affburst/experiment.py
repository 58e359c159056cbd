"""Run configuration and the label -> train -> evaluate orchestration behind the CLI."""
from __future__ import annotations

import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import __version__
from . import contour as ct
from .dataio import (AlignedRecording, FeatureSequence, Manifest, ManifestEntry, SynthConfig,
                     load_manifest, load_recording_sources, save_contour, save_features, synth_dataset,
                     write_manifest)
from .errors import ConfigError, InputError
from .metrics import FoldReport, aggregate, reports_to_csv, reports_to_json
from .models import KIND_SHAPE_KEYS, ModelConfig
from .training import (FoldSpec, TrainConfig, TrainHistory, evaluate, load_trained, make_folds,
                       save_checkpoint, train_fold)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabelConfig:
    L: int = ct.DEFAULT_L
    delta_half: int = ct.DEFAULT_DELTA_HALF
    tau: float | None = None
    target_coverage: float = ct.DEFAULT_COVERAGE
    calibration: str = "global"

    def __post_init__(self):
        if self.L < 1:
            raise ConfigError("labeling.L must be >= 1")
        if self.delta_half < 0:
            raise ConfigError("labeling.delta_half must be >= 0")
        if self.tau is not None and not self.tau > 0:
            raise ConfigError("labeling.tau must be > 0")
        if not 0 < self.target_coverage < 1:
            raise ConfigError("labeling.target_coverage must lie in (0, 1)")
        if self.calibration not in ("global", "per_fold"):
            raise ConfigError("labeling.calibration must be 'global' or 'per_fold'")


@dataclass(frozen=True)
class FoldConfig:
    strategy: str = "k_test_groups"
    k: int = 2
    val_ratio: float = 0.2

    def __post_init__(self):
        if self.strategy not in ("k_test_groups", "leave_one_session_out"):
            raise ConfigError("folds.strategy must be 'k_test_groups' or 'leave_one_session_out'")
        if self.k < 1:
            raise ConfigError("folds.k must be >= 1")
        if not 0 <= self.val_ratio < 1:
            raise ConfigError("folds.val_ratio must lie in [0, 1)")


@dataclass(frozen=True)
class SynthSetConfig:
    n_recordings: int = 10
    n_sessions: int = 5
    recording: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        if self.n_recordings < 1:
            raise ConfigError("synth.n_recordings must be >= 1")
        if self.n_sessions < 1:
            raise ConfigError("synth.n_sessions must be >= 1")


FIELD_DOCS = {
    "seed": "master seed; overrides model.seed and train.seed",
    "attribute": "affect attribute name carried into reports (arousal, valence, ...)",
    "labeling.L": "delta regression half-width in frames (10 = 0.8 s span at 25 fps)",
    "labeling.delta_half": "segment half-window; segments span 2*delta_half+1 frames",
    "labeling.tau": "fixed burst threshold on |delta|; null calibrates to target_coverage",
    "labeling.target_coverage": "fraction of frames labeled burst after segment growth",
    "labeling.calibration": "'global' (one tau over all recordings) or 'per_fold' (training recordings only)",
    "model.kind": "ffn | cnn | dcnn | kfdcnn; sets window and branch defaults",
    "model.half_span": "window half-span T in frames",
    "model.dilation_s": "window stride s in frames",
    "model.branch_kernels": "odd kernel sizes of the parallel first-layer convolutions",
    "model.branch_dilation": "dilation of the first-layer kernels",
    "model.branch_channels": "output channels per first-layer branch",
    "model.second_kernel": "kernel size of the second convolution",
    "model.second_dilation": "dilation of the second convolution",
    "model.second_channels": "output channels of the second convolution",
    "model.fc_sizes": "fully connected layer widths; must end in 2",
    "model.n_features": "feature dimension per frame",
    "model.fusion_padding": "'same' or 'crop' (valid branches, center-cropped to the shortest)",
    "model.dilate_subsampled": "false applies dilation 1 to kernels on the strided window",
    "model.seed": "initialization seed",
    "train.batch_size": "frames per mini-batch",
    "train.max_epochs": "epoch limit",
    "train.patience": "epochs without validation UAF1 gain before stopping",
    "train.lr": "learning rate",
    "train.seed": "shuffling seed",
    "train.optimizer": "'adam' or 'sgd'",
    "train.eval_batch_size": "frames per inference batch",
    "folds.strategy": "'k_test_groups' (consecutive test groups of k) or 'leave_one_session_out'",
    "folds.k": "recordings per test group",
    "folds.val_ratio": "share of non-test recordings held out for validation",
    "synth.n_recordings": "number of synthetic recordings",
    "synth.n_sessions": "sessions the synthetic recordings are spread over",
    **{f"synth.{f.name}": f"synthetic recording parameter ({f.name})" for f in fields(SynthConfig)},
}
FIELD_DOCS.update({
    "synth.length": "frames per synthetic recording",
    "synth.burst_rate": "sigmoid affect transitions per second",
    "synth.noise_level": "std of Gaussian noise added to label-bearing channels",
    "synth.coupling": "scale of the label-bearing signal in [0, 1]; 0 makes features independent of labels",
    "synth.n_coupled": "number of label-bearing channels",
    "synth.sources": "signals cycled over label-bearing channels: contour, delta, abs_delta, burst_reach",
    "synth.lags": "frame lags applied to each source",
})


def _check_keys(section: str, d: dict, allowed) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys in {section!r}: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    attribute: str = "arousal"
    labeling: LabelConfig = field(default_factory=LabelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: FoldConfig = field(default_factory=FoldConfig)
    synth: SynthSetConfig = field(default_factory=SynthSetConfig)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        _check_keys("<root>", raw, ("seed", "attribute", "labeling", "model", "train", "folds", "synth"))
        seed = int(raw.get("seed", 0))
        try:
            lab = raw.get("labeling", {})
            _check_keys("labeling", lab, LabelConfig.__dataclass_fields__)
            mod = dict(raw.get("model", {}))
            _check_keys("model", mod, ModelConfig.__dataclass_fields__)
            mod["seed"] = seed
            tr = dict(raw.get("train", {}))
            _check_keys("train", tr, TrainConfig.__dataclass_fields__)
            tr["seed"] = seed
            fo = raw.get("folds", {})
            _check_keys("folds", fo, FoldConfig.__dataclass_fields__)
            sy = dict(raw.get("synth", {}))
            _check_keys("synth", sy, set(SynthConfig.__dataclass_fields__) | {"n_recordings", "n_sessions"})
            synth = SynthSetConfig(
                sy.pop("n_recordings", 10), sy.pop("n_sessions", 5), SynthConfig.from_dict(sy),
            )
            return cls(seed, str(raw.get("attribute", "arousal")), LabelConfig(**lab),
                       ModelConfig.from_dict(mod), TrainConfig.from_dict(tr), FoldConfig(**fo), synth)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path, overrides: dict | None = None, reset_shape_on_kind: bool = False) -> "RunConfig":
        """Read a JSON config and apply dotted-key overrides (``{"train.lr": 1e-3}``).

        With ``reset_shape_on_kind``, overriding ``model.kind`` drops the window
        and branch settings of the file so the new kind's defaults apply.
        """
        overrides = dict(overrides or {})
        raw = {}
        if path is not None:
            try:
                raw = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file not found: {path}") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if reset_shape_on_kind and "model.kind" in overrides and isinstance(raw.get("model"), dict):
            raw["model"] = {k: v for k, v in raw["model"].items() if k not in KIND_SHAPE_KEYS}
        for dotted, value in overrides.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        synth = self.synth.recording.to_dict()
        synth.update(n_recordings=self.synth.n_recordings, n_sessions=self.synth.n_sessions)
        return {
            "seed": self.seed,
            "attribute": self.attribute,
            "labeling": asdict(self.labeling),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "folds": asdict(self.folds),
            "synth": synth,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {
        "command": command,
        "config": cfg.to_dict(),
        "config_sha256": cfg.digest(),
        "versions": {
            "affburst": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        **extra,
    }


# -- synth ---------------------------------------------------------------------

def write_synthetic_set(cfg: RunConfig, out_dir) -> Manifest:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "contours").mkdir(parents=True, exist_ok=True)
    recs, tau = synth_dataset(cfg.seed, cfg.synth.n_recordings, cfg.synth.recording, cfg.synth.n_sessions)
    entries = []
    for rec in recs:
        save_features(rec.features, out / "features" / f"{rec.id}.csv")
        save_contour(rec.contour, out / "contours" / f"{rec.id}.csv")
        entries.append(ManifestEntry(rec.id, f"features/{rec.id}.csv", f"contours/{rec.id}.csv",
                                     rec.session, rec.speaker))
    manifest = Manifest(tuple(entries), out, cfg.synth.recording.frame_rate_hz, cfg.attribute)
    write_manifest(manifest, out / "manifest.json")
    dump_json(out / "synth_config.json", cfg.to_dict()["synth"])
    dump_json(out / "run_manifest.json", run_manifest(cfg, "synth", generator_tau=tau))
    return manifest


# -- labeling ----------------------------------------------------------------

Sources = Mapping[str, tuple[FeatureSequence, ct.AffectContour]]


def load_sources(manifest: Manifest) -> dict[str, tuple[FeatureSequence, ct.AffectContour]]:
    return {rid: load_recording_sources(manifest, rid) for rid in manifest.ids}


def resolve_tau(contours, lab: LabelConfig) -> float:
    if lab.tau is not None:
        return float(lab.tau)
    deltas = [ct.compute_delta(c, lab.L) for c in contours]
    return ct.calibrate_threshold(deltas, lab.delta_half, lab.target_coverage)


def label_sources(sources: Sources, manifest: Manifest, tau: float, lab: LabelConfig) -> dict[str, AlignedRecording]:
    out = {}
    for rid, (feats, cont) in sources.items():
        e = manifest.entry(rid)
        labels = ct.label_pipeline(cont, tau, lab.L, lab.delta_half)
        out[rid] = AlignedRecording(rid, feats, labels, cont, e.session, e.speaker)
    return out


# -- train / eval ----------------------------------------------------------------

def _fold_tau(fold: FoldSpec, sources: Sources, cfg: RunConfig, global_tau: float | None) -> float:
    if cfg.labeling.calibration == "global" or cfg.labeling.tau is not None:
        return global_tau
    return resolve_tau([sources[r][1] for r in fold.train_ids + fold.val_ids], cfg.labeling)


def _train_one(args):
    fold, manifest_path, cfg, tau, out_dir = args
    manifest = load_manifest(manifest_path)
    ids = fold.train_ids + fold.val_ids + fold.test_ids
    sources = {rid: load_recording_sources(manifest, rid) for rid in ids}
    recs = label_sources(sources, manifest, tau, cfg.labeling)
    trained, history = train_fold(fold, recs, cfg.model, cfg.train)
    out = Path(out_dir)
    save_checkpoint(out / "checkpoints" / f"fold{fold.fold_id}.ckpt", trained,
                    {"tau": tau, "labeling": asdict(cfg.labeling)})
    (out / "histories" / f"fold{fold.fold_id}.csv").write_text(history.to_csv())
    return fold.fold_id, history


def _pool_map(fn, jobs: int, items: list):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def train_run(cfg: RunConfig, manifest_path, out_dir, jobs: int = 1) -> dict[int, TrainHistory]:
    """Train every fold; writes checkpoints, per-fold history CSVs and folds.json."""
    manifest_path = Path(manifest_path).resolve()
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "histories").mkdir(parents=True, exist_ok=True)
    folds = make_folds(manifest, cfg.folds.strategy, cfg.folds.k, cfg.folds.val_ratio, cfg.seed)
    sources = load_sources(manifest)
    global_tau = None
    if cfg.labeling.calibration == "global" or cfg.labeling.tau is not None:
        global_tau = resolve_tau([c for _, c in sources.values()], cfg.labeling)
    taus = {f.fold_id: _fold_tau(f, sources, cfg, global_tau) for f in folds}
    results = _pool_map(_train_one, jobs, [(f, manifest_path, cfg, taus[f.fold_id], out) for f in folds])
    dump_json(out / "folds.json", {
        "manifest": str(manifest_path),
        "folds": [{**f.to_dict(), "tau": taus[f.fold_id]} for f in folds],
    })
    dump_json(out / "run_manifest.json", run_manifest(cfg, "train", manifest=str(manifest_path)))
    dump_json(out / "config.json", cfg.to_dict())
    return dict(results)


def _eval_one(args):
    fold_doc, manifest_path, ckpt, attribute = args
    manifest = load_manifest(manifest_path)
    trained, header = load_trained(ckpt, with_header=True)
    lab = LabelConfig(**header["labeling"])
    sources = {rid: load_recording_sources(manifest, rid) for rid in fold_doc["test_ids"]}
    recs = label_sources(sources, manifest, header["tau"], lab)
    return evaluate(trained, recs, fold_doc["test_ids"], attribute)


def eval_run(run_dir, jobs: int = 1, attribute: str | None = None) -> tuple[list[FoldReport], dict]:
    """Score every fold checkpoint on its test recordings; writes reports, summary and CSV."""
    run = Path(run_dir)
    try:
        folds_doc = json.loads((run / "folds.json").read_text())
        cfg_doc = json.loads((run / "config.json").read_text())
    except FileNotFoundError as exc:
        raise InputError(f"{run} is not a training run directory ({exc.filename} missing)") from None
    attribute = attribute or cfg_doc.get("attribute", "")
    items = [(f, folds_doc["manifest"], run / "checkpoints" / f"fold{f['fold_id']}.ckpt", attribute)
             for f in folds_doc["folds"]]
    reports = _pool_map(_eval_one, jobs, items)
    summary = aggregate(reports)
    (run / "reports.json").write_text(reports_to_json(reports, summary))
    (run / "metrics.csv").write_text(reports_to_csv(reports))
    doc = summary.to_dict()
    doc.update(model=cfg_doc["model"]["kind"], attribute=attribute)
    dump_json(run / "summary.json", doc)
    return reports, doc

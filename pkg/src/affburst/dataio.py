"""Feature/contour ingestion, dilated windows and the synthetic recording generator."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import contour as ct
from .errors import ConfigError, DimensionError, InputError, ParameterError

N_FEATURES = 88
_INDEX_COLUMNS = {"frame_index", "frame", "index"}


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_rate_hz: float = ct.DEFAULT_FRAME_RATE
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        frames = np.array(self.frames, dtype=np.float64, copy=True)
        if frames.ndim != 2:
            raise DimensionError(f"feature frames must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            bad = np.argwhere(~np.isfinite(frames))[0]
            raise InputError(f"non-finite feature value at frame {bad[0]}, column {bad[1]}")
        if not self.frame_rate_hz > 0:
            raise ParameterError("frame_rate_hz must be > 0")
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != frames.shape[1]:
                raise DimensionError(f"{len(names)} feature names for {frames.shape[1]} columns")
            object.__setattr__(self, "feature_names", names)
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    """Frames n-T, n-T+s, ..., n+T around a center frame n.

    ``half_span=0`` is the single-frame input used by the feed-forward baseline.
    """
    half_span: int
    dilation: int = 1

    def __post_init__(self):
        T, s = self.half_span, self.dilation
        if s < 1:
            raise ParameterError(f"window dilation must be >= 1, got {s}")
        if T < 0 or (0 < T < s):
            raise ParameterError(f"window half-span must be 0 or >= dilation, got T={T}, s={s}")
        if T % s:
            raise ParameterError(f"window half-span {T} is not divisible by dilation {s}")

    @property
    def n_rows(self) -> int:
        return 2 * self.half_span // self.dilation + 1

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(-self.half_span, self.half_span + 1, self.dilation)

    @property
    def span_frames(self) -> int:
        return 2 * self.half_span + 1


@dataclass(frozen=True)
class WindowedExample:
    window: np.ndarray
    center_frame: int
    label: int


@dataclass(frozen=True)
class AlignedRecording:
    id: str
    features: FeatureSequence
    labels: ct.SegmentLabels
    contour: ct.AffectContour
    session: str = ""
    speaker: str = ""

    def __post_init__(self):
        n = len(self.features)
        if len(self.labels) != n or len(self.contour) != n:
            raise InputError(
                f"recording {self.id!r} misaligned: features={n}, "
                f"labels={len(self.labels)}, contour={len(self.contour)}"
            )

    def __len__(self) -> int:
        return len(self.features)


@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, features: FeatureSequence | np.ndarray | Sequence[FeatureSequence]) -> "Normalizer":
        X = _stack(features)
        if X.shape[0] < 2:
            raise InputError("normalizer needs at least 2 training frames")
        return cls(X.mean(axis=0), X.std(axis=0))

    def _scale(self) -> np.ndarray:
        # zero-variance features pass through unscaled
        return np.where(self.std > 0, self.std, 1.0)

    def _shift(self) -> np.ndarray:
        return np.where(self.std > 0, self.mean, 0.0)

    def apply(self, features: FeatureSequence) -> FeatureSequence:
        out = (features.frames - self._shift()) / self._scale()
        return FeatureSequence(out, features.frame_rate_hz, features.feature_names)

    def invert(self, features: FeatureSequence) -> FeatureSequence:
        out = features.frames * self._scale() + self._shift()
        return FeatureSequence(out, features.frame_rate_hz, features.feature_names)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_normalizer(features) -> Normalizer:
    return Normalizer.fit(features)


def apply_normalizer(norm: Normalizer, features: FeatureSequence) -> FeatureSequence:
    return norm.apply(features)


def _stack(features) -> np.ndarray:
    if isinstance(features, FeatureSequence):
        return features.frames
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features)
    parts = [f.frames if isinstance(f, FeatureSequence) else np.atleast_2d(f) for f in features]
    if not parts:
        raise InputError("normalizer training set is empty")
    return np.concatenate(parts, axis=0)


# -- windows -----------------------------------------------------------------

def extract_window(features: FeatureSequence, n: int, spec: WindowSpec,
                   labels: ct.SegmentLabels | None = None) -> WindowedExample:
    window = gather_windows(features.frames, np.array([n]), spec)[0]
    label = int(labels.values[n]) if labels is not None else 0
    return WindowedExample(window, int(n), label)


def gather_windows(frames: np.ndarray, centers: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Batch of windows, shape (len(centers), n_rows, dim); zero rows outside the recording."""
    T = spec.half_span
    padded = np.pad(frames, ((T, T), (0, 0)))
    idx = np.asarray(centers)[:, None] + spec.offsets[None, :] + T
    return padded[idx]


def make_examples(recording: AlignedRecording, spec: WindowSpec) -> Iterator[WindowedExample]:
    frames = recording.features.frames
    labels = recording.labels.values
    for n in range(len(recording)):
        window = gather_windows(frames, np.array([n]), spec)[0]
        yield WindowedExample(window, n, int(labels[n]))


# -- files -------------------------------------------------------------------

def _parse_row(row: list[str], lineno: int, path) -> list[float]:
    out = []
    for j, cell in enumerate(row):
        try:
            value = float(cell)
        except ValueError:
            raise InputError(f"{path}: row {lineno}, column {j}: non-numeric cell {cell!r}") from None
        if not math.isfinite(value):
            raise InputError(f"{path}: row {lineno}, column {j}: non-finite value {cell!r}")
        out.append(value)
    return out


def _is_numeric(cells: list[str]) -> bool:
    try:
        [float(c) for c in cells]
    except ValueError:
        return False
    return True


def load_features(path, frame_rate_hz: float = ct.DEFAULT_FRAME_RATE, dim: int = N_FEATURES) -> FeatureSequence:
    """Read a feature CSV: optional header, ``dim`` numeric columns, optional leading frame index."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"feature file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise InputError(f"{path}: no rows")
    names = None
    drop_index = False
    if not _is_numeric(rows[0]):
        header = [c.strip() for c in rows.pop(0)]
        if len(header) == dim + 1 and header[0].lower() in _INDEX_COLUMNS:
            drop_index = True
            header = header[1:]
        names = tuple(header) if len(header) == dim else None
    if not rows:
        raise InputError(f"{path}: header but no data rows")
    data = []
    first_data_line = 2 if names is not None or drop_index else 1
    for i, row in enumerate(rows):
        lineno = i + first_data_line
        values = _parse_row(row, lineno, path)
        data.append(values)
    widths = {len(r) for r in data}
    if not drop_index and widths == {dim + 1}:
        # headerless file whose first column is 0..N-1
        first = np.array([r[0] for r in data])
        drop_index = bool(np.array_equal(first, np.arange(len(data))))
    expected = dim + 1 if drop_index else dim
    for i, r in enumerate(data):
        if len(r) != expected:
            raise DimensionError(
                f"{path}: row {i + first_data_line} has {len(r) - drop_index} feature columns, expected {dim}"
            )
    frames = np.array(data, dtype=np.float64)
    if drop_index:
        frames = frames[:, 1:]
    return FeatureSequence(frames, frame_rate_hz, names)


def save_features(features: FeatureSequence, path) -> None:
    names = features.feature_names or tuple(f"f{j}" for j in range(features.dim))
    header = ",".join(("frame_index",) + names)
    idx = np.arange(len(features))[:, None]
    body = np.hstack([idx, features.frames])
    fmt = ["%d"] + ["%.17g"] * features.dim
    np.savetxt(path, body, delimiter=",", header=header, comments="", fmt=fmt)


def load_contour(path, frame_rate_hz: float = ct.DEFAULT_FRAME_RATE, attribute: str = "arousal") -> ct.AffectContour:
    """Read a ``frame_index,value`` CSV."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"contour file not found: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if rows and not _is_numeric(rows[0]):
        header = [c.strip() for c in rows.pop(0)]
        if header != ["frame_index", "value"]:
            raise InputError(f"{path}: expected header 'frame_index,value', got {','.join(header)}")
    values = []
    for i, row in enumerate(rows):
        if len(row) != 2:
            raise DimensionError(f"{path}: row {i + 2} has {len(row)} columns, expected 2")
        idx, value = _parse_row(row, i + 2, path)
        if idx != i:
            raise InputError(f"{path}: row {i + 2} has frame_index {idx:g}, expected {i}")
        values.append(value)
    return ct.AffectContour(np.array(values), frame_rate_hz, attribute)


def save_contour(contour: ct.AffectContour, path) -> None:
    body = np.column_stack([np.arange(len(contour)), contour.values])
    np.savetxt(path, body, delimiter=",", header="frame_index,value", comments="", fmt=["%d", "%.17g"])


def save_labels(labels: ct.SegmentLabels, path, meta: dict | None = None) -> None:
    """Write ``frame_index,P`` and, if given, a JSON metadata sidecar next to it."""
    path = Path(path)
    body = np.column_stack([np.arange(len(labels)), labels.values])
    np.savetxt(path, body, delimiter=",", header="frame_index,P", comments="", fmt="%d")
    if meta is not None:
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_labels(path, half_window: int = 0) -> ct.SegmentLabels:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"label file not found: {path}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    meta_path = path.with_suffix(".json")
    if meta_path.is_file():
        half_window = int(json.loads(meta_path.read_text()).get("delta_half", half_window))
    return ct.SegmentLabels(data[:, 1], half_window)


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    features_path: str
    contour_path: str
    session: str = ""
    speaker: str = ""


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = Path(".")
    frame_rate_hz: float = ct.DEFAULT_FRAME_RATE
    attribute: str = "arousal"

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def entry(self, rec_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == rec_id:
                return e
        raise InputError(f"recording {rec_id!r} not in manifest")


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from None
    recs = raw["recordings"] if isinstance(raw, dict) else raw
    allowed = {"id", "features_path", "contour_path", "session", "speaker"}
    entries = []
    for i, r in enumerate(recs):
        unknown = set(r) - allowed
        if unknown:
            raise InputError(f"{path}: recording {i} has unknown keys {sorted(unknown)}")
        try:
            entries.append(ManifestEntry(
                str(r["id"]), r["features_path"], r["contour_path"],
                str(r.get("session", "")), str(r.get("speaker", "")),
            ))
        except KeyError as exc:
            raise InputError(f"{path}: recording {i} missing {exc}") from None
    if len({e.id for e in entries}) != len(entries):
        raise InputError(f"{path}: duplicate recording ids")
    meta = raw if isinstance(raw, dict) else {}
    return Manifest(
        tuple(entries), path.parent,
        float(meta.get("frame_rate_hz", ct.DEFAULT_FRAME_RATE)),
        str(meta.get("attribute", "arousal")),
    )


def write_manifest(manifest: Manifest, path) -> None:
    doc = {
        "frame_rate_hz": manifest.frame_rate_hz,
        "attribute": manifest.attribute,
        "recordings": [asdict(e) for e in manifest.entries],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_recording_sources(manifest: Manifest, rec_id: str) -> tuple[FeatureSequence, ct.AffectContour]:
    e = manifest.entry(rec_id)
    feats = load_features(manifest.root / e.features_path, manifest.frame_rate_hz)
    cont = load_contour(manifest.root / e.contour_path, manifest.frame_rate_hz, manifest.attribute)
    if len(feats) != len(cont):
        raise InputError(f"recording {rec_id!r}: {len(feats)} feature frames vs {len(cont)} contour frames")
    return feats, cont


# -- synthetic recordings ----------------------------------------------------

SOURCES = ("contour", "delta", "abs_delta", "burst_reach")


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic stand-in for a licensed affect corpus.

    ``coupling`` scales the label-bearing signal placed in the first
    ``n_coupled`` channels; ``sources`` x ``lags`` cycles over those channels.
    All other channels are unit Gaussian noise. With the default contour-only
    source a single frame says almost nothing about bursts: the slope, and the
    +/-delta_half growth around it, has to be read from temporal context.
    """
    length: int = 3000
    burst_rate: float = 0.15           # sigmoid transitions per second
    noise_level: float = 0.1
    coupling: float = 1.0
    n_coupled: int = 88
    sources: tuple[str, ...] = ("contour",)
    lags: tuple[int, ...] = (0,)
    walk_sigma: float = 0.0005
    amplitude: tuple[float, float] = (0.2, 0.6)
    width_s: tuple[float, float] = (0.2, 0.6)
    frame_rate_hz: float = ct.DEFAULT_FRAME_RATE
    L: int = ct.DEFAULT_L
    delta_half: int = ct.DEFAULT_DELTA_HALF
    tau: float | None = None
    target_coverage: float = ct.DEFAULT_COVERAGE
    dim: int = N_FEATURES

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "lags", tuple(int(x) for x in self.lags))
        object.__setattr__(self, "amplitude", tuple(self.amplitude))
        object.__setattr__(self, "width_s", tuple(self.width_s))
        if self.length <= 2 * (self.L + self.delta_half):
            raise ConfigError(f"synthetic length {self.length} must exceed 2*(L+delta_half)")
        if not 0 <= self.coupling <= 1:
            raise ConfigError("coupling must lie in [0, 1]")
        if self.noise_level < 0 or self.burst_rate < 0:
            raise ConfigError("noise_level and burst_rate must be >= 0")
        if not 0 <= self.n_coupled <= self.dim:
            raise ConfigError(f"n_coupled must lie in [0, {self.dim}]")
        if self.n_coupled and not self.sources:
            raise ConfigError("sources must be non-empty when n_coupled > 0")
        unknown = set(self.sources) - set(SOURCES)
        if unknown:
            raise ConfigError(f"unknown synthetic sources {sorted(unknown)}; choose from {SOURCES}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def synth_contour(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    n = cfg.length
    t = np.arange(n)
    walk = np.cumsum(rng.normal(0.0, cfg.walk_sigma, n))
    walk -= walk.mean()
    n_events = rng.poisson(cfg.burst_rate * n / cfg.frame_rate_hz)
    centers = rng.uniform(0, n, n_events)
    amps = rng.uniform(*cfg.amplitude, n_events) * rng.choice([-1.0, 1.0], n_events)
    widths = rng.uniform(*cfg.width_s, n_events) * cfg.frame_rate_hz
    e = walk.copy()
    for c, a, w in zip(centers, amps, widths):
        e += a * 0.5 * (1.0 + np.tanh((t - c) / (2.0 * w)))
    # squash into the nominal [-1, 1] range without flattening small slopes
    return np.tanh(e - e.mean())


# Typical spread of each source over generated recordings (L=10, delta_half=25).
# A fixed scale, unlike per-recording standardization, keeps the burst
# threshold at the same feature level in every recording.
SOURCE_SCALE = {"contour": 0.5, "delta": 0.003, "abs_delta": 0.003, "burst_reach": 0.004}


def _source_signal(name: str, e: np.ndarray, d: np.ndarray, delta_half: int) -> np.ndarray:
    if name == "contour":
        return e
    if name == "delta":
        return d
    if name == "abs_delta":
        return np.abs(d)
    # windowed max of |d|: the exact quantity the segment labels threshold
    return ct._window_max(np.abs(d), delta_half)


def _lagged(x: np.ndarray, lag: int) -> np.ndarray:
    if lag == 0:
        return x
    out = np.empty_like(x)
    if lag > 0:
        out[lag:], out[:lag] = x[:-lag], x[0]
    else:
        out[:lag], out[lag:] = x[-lag:], x[-1]
    return out


def synth_recording(seed: int, config: SynthConfig | None = None, rec_id: str | None = None,
                    tau: float | None = None, session: str = "", speaker: str = "") -> AlignedRecording:
    """One deterministic synthetic recording.

    ``tau`` (or ``config.tau``) fixes the label threshold; otherwise it is
    calibrated on this recording alone to ``config.target_coverage``.
    """
    cfg = config or SynthConfig()
    contour_rng, feat_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)]
    e = synth_contour(contour_rng, cfg)
    contour = ct.AffectContour(e, cfg.frame_rate_hz)
    delta = ct.compute_delta(contour, cfg.L)
    tau = tau if tau is not None else cfg.tau
    if tau is None:
        tau = ct.calibrate_threshold(delta, cfg.delta_half, cfg.target_coverage)
    labels = ct.extend_segments(ct.detect_burst_points(delta, tau), cfg.delta_half)
    features = synth_features(feat_rng, cfg, e, delta.values)
    return AlignedRecording(
        rec_id or f"synth{seed}", FeatureSequence(features, cfg.frame_rate_hz),
        labels, contour, session, speaker,
    )


def synth_features(rng: np.random.Generator, cfg: SynthConfig, e: np.ndarray, d: np.ndarray) -> np.ndarray:
    n = e.size
    X = rng.normal(0.0, 1.0, (n, cfg.dim))
    combos = [(s, lag) for lag in cfg.lags for s in cfg.sources]
    for j in range(cfg.n_coupled):
        name, lag = combos[j % len(combos)]
        sig = _lagged(_source_signal(name, e, d, cfg.delta_half), lag) / SOURCE_SCALE[name]
        X[:, j] = cfg.coupling * sig + cfg.noise_level * X[:, j]
    return X


def synth_dataset(seed: int, n_recordings: int, config: SynthConfig | None = None,
                  n_sessions: int | None = None) -> tuple[list[AlignedRecording], float]:
    """Recordings labeled with a single threshold calibrated over all of them."""
    cfg = config or SynthConfig()
    seeds = np.random.SeedSequence(seed).generate_state(n_recordings)
    n_sessions = n_sessions or n_recordings
    tau = cfg.tau
    if tau is None:
        deltas = []
        for s in seeds:
            contour_rng = np.random.default_rng(np.random.SeedSequence(int(s)).spawn(2)[0])
            deltas.append(ct.compute_delta(synth_contour(contour_rng, cfg), cfg.L))
        tau = ct.calibrate_threshold(deltas, cfg.delta_half, cfg.target_coverage)
    recs = [
        synth_recording(int(s), cfg, f"rec{i:02d}", tau,
                        session=f"s{i % n_sessions}", speaker=f"spk{i:02d}")
        for i, s in enumerate(seeds)
    ]
    return recs, float(tau)

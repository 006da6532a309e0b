"""Pressure records, leakage-free normalization, masking scenarios and window sampling.

Also holds the synthetic field generator used in place of wind-tunnel data.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .graph import FacadeGraph, direction_features

log = logging.getLogger(__name__)

FPRD_MAGIC = b"FPRD"
STD_FLOOR = 1e-8
DEFAULT_SEGMENT = 7600


@dataclass
class PressureRecord:
    direction_deg: float
    values: np.ndarray  # N×T
    sample_rate_hz: float = 1000.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise DataError(f"record values must be N×T, got shape {self.values.shape}")

    @property
    def num_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# file formats


def write_fprd(path, values: np.ndarray, sample_rate_hz: float) -> Path:
    """magic, u32 N, u32 T, f64 sample rate, then N×T float32 little-endian (node-major)."""
    values = np.asarray(values)
    n, t = values.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(FPRD_MAGIC + struct.pack("<IId", n, t, float(sample_rate_hz)))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return path


def read_fprd(path) -> tuple[np.ndarray, float]:
    buf = Path(path).read_bytes()
    if buf[:4] != FPRD_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {FPRD_MAGIC!r}")
    n, t, fs = struct.unpack_from("<IId", buf, 4)
    payload = np.frombuffer(buf, dtype="<f4", offset=20)
    if payload.size != n * t:
        raise DataError(f"{path}: header says {n}×{t} values, payload holds {payload.size}")
    return payload.reshape(n, t).astype(float), fs


def write_csv(path, values: np.ndarray) -> Path:
    """T rows × N columns with a header row of node ids."""
    values = np.asarray(values)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(range(values.shape[0]))
        for row in values.T:
            w.writerow([repr(float(v)) for v in row])
    return path


def read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = [[float(v) for v in line] for line in reader if line]
    if not rows:
        return np.zeros((0, 0))
    return np.asarray(rows, dtype=float).T


def _check_finite(values: np.ndarray, where: str) -> None:
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        node, t = bad[0]
        raise DataError(f"{where}: non-finite value at (row={t}, col={node})")


def load_records(manifest_path, graph: FacadeGraph | None = None, offset: int = 0,
                 length: int | None = DEFAULT_SEGMENT) -> list[PressureRecord]:
    """Read every record listed in a manifest.

    A segment of ``length`` samples starting at ``offset`` is retained
    (the first 7600 by default; shorter records are kept whole).
    """
    manifest_path = Path(manifest_path)
    spec = json.loads(manifest_path.read_text())
    entries = spec.get("records", [])
    if not entries:
        log.warning("manifest %s lists no records", manifest_path)
        return []
    g = spec.get("graph", {})
    expected = graph.num_nodes if graph is not None else (g["rows"] * g["cols"] if g else None)
    fs_default = float(spec.get("sample_rate_hz", 1000.0))
    out = []
    for e in entries:
        p = manifest_path.parent / e["path"]
        fmt = e.get("format", p.suffix.lstrip(".")).lower()
        if fmt == "csv":
            values, fs = read_csv(p), fs_default
        elif fmt == "fprd":
            values, fs = read_fprd(p)
        else:
            raise DataError(f"{p}: unknown format {fmt!r}")
        if expected is not None and values.shape[0] != expected:
            raise DataError(f"{p}: {values.shape[0]} node columns, graph expects N={expected}")
        _check_finite(values, str(p))
        stop = values.shape[1] if length is None else min(values.shape[1], offset + length)
        out.append(PressureRecord(float(e["direction_deg"]), values[:, offset:stop], fs))
    return out


def write_manifest(out_dir, records: Sequence[PressureRecord], graph: FacadeGraph, fmt: str = "fprd") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        name = f"dir_{rec.direction_deg:05.1f}.{fmt}"
        if fmt == "fprd":
            write_fprd(out_dir / name, rec.values, rec.sample_rate_hz)
        elif fmt == "csv":
            write_csv(out_dir / name, rec.values)
        else:
            raise ConfigError(f"unknown record format {fmt!r}")
        entries.append({"direction_deg": rec.direction_deg, "path": name, "format": fmt})
    fs = records[0].sample_rate_hz if records else 1000.0
    manifest = {"graph": {"rows": graph.rows, "cols": graph.cols}, "sample_rate_hz": fs, "records": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


# ---------------------------------------------------------------------------
# split / normalization


@dataclass
class NormalizationStats:
    direction_deg: float
    mean: np.ndarray
    std: np.ndarray

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return values * self.std[:, None] + self.mean[:, None]

    def to_json(self) -> dict:
        return {"direction_deg": self.direction_deg, "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NormalizationStats":
        return cls(d["direction_deg"], np.asarray(d["mean"], float), np.asarray(d["std"], float))


@dataclass
class Segment:
    """Normalized train/holdout pair of one direction."""

    direction_deg: float
    train: np.ndarray
    holdout: np.ndarray
    stats: NormalizationStats
    sample_rate_hz: float = 1000.0


def split_and_normalize(record: PressureRecord, train_fraction: float = 0.8) -> Segment:
    """Contiguous split, then z-score both parts with train-only statistics."""
    t_full = record.length
    if t_full < 2:
        raise DataError(f"record of length {t_full} cannot be split")
    t_train = int(math.floor(train_fraction * t_full))
    train_raw = record.values[:, :t_train]
    mean = train_raw.mean(axis=1)
    std = train_raw.std(axis=1)
    flat = np.flatnonzero(std < STD_FLOOR)
    if len(flat):
        log.warning("direction %.1f: constant training channel at nodes %s; std clamped",
                    record.direction_deg, flat.tolist())
    stats = NormalizationStats(record.direction_deg, mean, np.maximum(std, STD_FLOOR))
    return Segment(record.direction_deg, stats.normalize(train_raw),
                   stats.normalize(record.values[:, t_train:]), stats, record.sample_rate_hz)


# ---------------------------------------------------------------------------
# masking


@dataclass(frozen=True)
class MaskScenario:
    """Sensors withheld for a whole interval, as local indices into ``sensors``."""

    masked: tuple[int, ...]
    sensors: tuple[int, ...]
    num_nodes: int

    def __post_init__(self):
        object.__setattr__(self, "masked", tuple(sorted(int(m) for m in self.masked)))
        if len(set(self.masked)) != len(self.masked):
            raise ConfigError("masked sensor list contains duplicates")
        bad = [m for m in self.masked if not 0 <= m < len(self.sensors)]
        if bad:
            raise ConfigError(f"masked local indices {bad} outside 0..{len(self.sensors) - 1}")

    @classmethod
    def for_graph(cls, graph: FacadeGraph, masked=()) -> "MaskScenario":
        return cls(tuple(masked), tuple(graph.sensors), graph.num_nodes)

    @property
    def masked_nodes(self) -> list[int]:
        return [self.sensors[m] for m in self.masked]

    @property
    def available_nodes(self) -> list[int]:
        gone = set(self.masked)
        return [s for i, s in enumerate(self.sensors) if i not in gone]

    @property
    def unobserved_nodes(self) -> list[int]:
        s = set(self.sensors)
        return [i for i in range(self.num_nodes) if i not in s]

    def node_flags(self) -> np.ndarray:
        f = np.zeros(self.num_nodes)
        f[self.available_nodes] = 1.0
        return f

    def to_json(self) -> dict:
        return {"masked": list(self.masked)}


def apply_outage(values: np.ndarray, scenario: MaskScenario) -> tuple[np.ndarray, np.ndarray]:
    """Zero-fill everything not in the available sensor set; return (X, P)."""
    if len(scenario.masked) >= len(scenario.sensors):
        raise ConfigError("scenario masks every sensor; no observations remain")
    if values.shape[0] != scenario.num_nodes:
        raise ConfigError(f"values have {values.shape[0]} nodes, scenario expects {scenario.num_nodes}")
    P = np.repeat(scenario.node_flags()[:, None], values.shape[1], axis=1)
    return values * P, P


@dataclass
class WindowSample:
    X: np.ndarray
    P: np.ndarray
    C: np.ndarray
    Y: np.ndarray
    scenario: MaskScenario
    direction_deg: float = 0.0
    start: int = 0


def make_window(values: np.ndarray, direction_deg: float, scenario: MaskScenario, start: int = 0) -> WindowSample:
    """Window construction shared by training and inference."""
    X, P = apply_outage(values, scenario)
    return WindowSample(X, P, np.asarray(direction_features(direction_deg)), values.copy(), scenario,
                        direction_deg, start)


def sample_window(pool: Sequence[Segment], rng: np.random.Generator, window: int = 200,
                  scenario_policy: Callable[[np.random.Generator], MaskScenario] | None = None,
                  graph: FacadeGraph | None = None) -> WindowSample:
    """Uniform direction, then uniform start within that direction's training segment."""
    if not pool:
        raise DataError("empty training pool")
    for seg in pool:
        if seg.train.shape[1] < window:
            raise DataError(f"direction {seg.direction_deg}: training segment of {seg.train.shape[1]} "
                            f"samples shorter than window {window}")
    seg = pool[int(rng.integers(len(pool)))]
    start = int(rng.integers(seg.train.shape[1] - window + 1))
    if scenario_policy is not None:
        scenario = scenario_policy(rng)
    elif graph is not None:
        scenario = MaskScenario.for_graph(graph)
    else:
        raise ConfigError("sample_window needs a scenario_policy or a graph")
    return make_window(seg.train[:, start:start + window], seg.direction_deg, scenario, start)


# ---------------------------------------------------------------------------
# synthetic fields


@dataclass
class SynthConfig:
    rows: int = 25
    cols: int = 5
    directions: tuple[float, ...] = (0.0, 12.5, 25.0, 37.5, 50.0)
    length: int = 7600
    sample_rate_hz: float = 1000.0
    modes: int = 4
    noise_level: float = 0.1
    noise_length_scale: float = 2.0
    noise_ar: float = 0.9
    freq_range: tuple[float, float] = (2.0, 30.0)
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["directions"] = list(self.directions)
        d["freq_range"] = list(self.freq_range)
        return d


@dataclass
class _ModeSet:
    amp: np.ndarray
    px: np.ndarray
    qy: np.ndarray
    ax: np.ndarray
    by: np.ndarray
    shift: np.ndarray
    freq: np.ndarray


def _draw_modes(cfg: SynthConfig, rng: np.random.Generator) -> _ModeSet:
    k = cfg.modes
    lo, hi = cfg.freq_range
    # evenly spread base frequencies keep the sinusoids well separated
    base = np.linspace(lo, hi, k + 2)[1:-1] if k else np.zeros(0)
    jitter = (hi - lo) / (4 * (k + 1)) if k else 0.0
    return _ModeSet(
        amp=rng.uniform(0.5, 1.0, k),
        px=rng.choice([0.5, 1.0, 1.5], k),
        qy=rng.choice([0.5, 1.0, 1.5, 2.0], k),
        ax=rng.uniform(0, 2 * np.pi, k),
        by=rng.uniform(0, 2 * np.pi, k),
        shift=rng.uniform(-0.4, 0.4, k),
        freq=base + rng.uniform(-jitter, jitter, k),
    )


def mode_shapes(modes: _ModeSet, xy: np.ndarray, direction_deg: float) -> np.ndarray:
    """N×K smooth spatial modes, shifted along x with the wind direction."""
    th = math.radians(direction_deg)
    x, y = xy[:, :1], xy[:, 1:2]
    return (np.cos(np.pi * modes.px * (x - modes.shift * th) + modes.ax)
            * np.cos(np.pi * modes.qy * y + modes.by + 0.5 * th))


def _noise_cholesky(graph: FacadeGraph, length_scale: float) -> np.ndarray:
    ids = np.arange(graph.num_nodes)
    rc = np.stack([ids % graph.rows, ids // graph.rows], axis=1).astype(float)
    d = np.sqrt(((rc[:, None, :] - rc[None, :, :]) ** 2).sum(-1))
    cov = np.exp(-d / max(length_scale, 1e-9))
    return np.linalg.cholesky(cov + 1e-10 * np.eye(len(ids)))


def synth_field(cfg: SynthConfig, modes: _ModeSet, graph: FacadeGraph, direction_deg: float,
                rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    xy = graph.coords()
    th = math.radians(direction_deg)
    t = np.arange(cfg.length) / cfg.sample_rate_hz
    phi = mode_shapes(modes, xy, direction_deg)
    amp = modes.amp * (1.0 + 0.3 * np.sin(th + np.arange(cfg.modes)))
    phase = rng.uniform(0, 2 * np.pi, cfg.modes)
    signals = np.sin(2 * np.pi * modes.freq[:, None] * t[None, :] + phase[:, None])  # K×T
    mean_map = 0.8 * math.cos(th) - 0.6 * xy[:, 1] + 0.2 * xy[:, 0] * math.sin(th)
    field = mean_map[:, None] + (phi * amp) @ signals
    modal_var = ((phi * amp) ** 2).sum(1) / 2
    noise_std = cfg.noise_level * math.sqrt(modal_var.mean()) if cfg.modes else cfg.noise_level
    if noise_std > 0:
        chol = _noise_cholesky(graph, cfg.noise_length_scale)
        rho = cfg.noise_ar
        xi = rng.standard_normal((graph.num_nodes, cfg.length))
        innov = chol @ xi
        e = np.empty_like(innov)
        e[:, 0] = innov[:, 0]
        scale = math.sqrt(1 - rho**2)
        for i in range(1, cfg.length):
            e[:, i] = rho * e[:, i - 1] + scale * innov[:, i]
        field = field + noise_std * e
    info = {"modal_var": modal_var, "noise_var": noise_std**2, "mean_map": mean_map}
    return field, info


def synth_generate(cfg: SynthConfig, rng: np.random.Generator | int | None = None,
                   with_info: bool = False):
    """Synthetic records: smooth standing modes × sinusoids + correlated AR(1) noise."""
    if cfg.modes == 0 and cfg.noise_level == 0:
        raise ConfigError("synthetic field with no modes and no noise is constant")
    if cfg.modes < 0 or cfg.noise_level < 0:
        raise ConfigError("modes and noise_level must be non-negative")
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
    graph = FacadeGraph.build(cfg.rows, cfg.cols)
    modes = _draw_modes(cfg, rng)
    records, infos = [], []
    for d in cfg.directions:
        values, info = synth_field(cfg, modes, graph, d, rng)
        records.append(PressureRecord(float(d), values, cfg.sample_rate_hz))
        infos.append(info)
    return (records, infos) if with_info else records

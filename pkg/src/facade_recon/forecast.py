"""Two-stage prediction: forecast available sensors, then complete the field.

Stage one maps a history window of every available sensor channel to its
next ``horizon`` samples; stage two feeds those forecasts through the
unchanged full-record reconstruction path as if they were measurements.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import backbone as bb
from .data import MaskScenario, Segment
from .errors import ConfigError, DataError
from .inference import OverlapPlan, evaluate_fields, metrics, reconstruct_full

log = logging.getLogger(__name__)


@dataclass
class ForecastConfig:
    kind: str = "tcn"
    history: int = 200
    horizon: int = 1520
    channels: int = 32
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
    kernel: int = 3
    n_channels: int = 22
    epochs: int = 60
    steps_per_epoch: int = 10
    batch: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    clip: float = 1.0
    huber_beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        if self.kind not in ("tcn", "persist"):
            raise ConfigError(f"forecaster kind must be 'tcn' or 'persist', got {self.kind!r}")
        if self.history < 1 or self.horizon < 1:
            raise ConfigError("history and horizon must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


class CausalBlock(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        self.pad = (kernel - 1) * dilation
        self.conv = nn.Conv1d(channels, channels, kernel, dilation=dilation)
        self.mix = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        h = self.conv(nn.functional.pad(x, (self.pad, 0)))
        return x + self.mix(bb.gelu(h))


class Forecaster(nn.Module):
    """Channel-shared causal dilated TCN with a direct linear history-to-horizon path.

    Input S×T_hist (or B×S×T_hist) normalized histories; output S×H. Only the
    last ``history`` samples are read.
    """

    def __init__(self, cfg: ForecastConfig):
        super().__init__()
        self.cfg = cfg
        self.lift = nn.Conv1d(1, cfg.channels, 1)
        self.blocks = nn.Sequential(*(CausalBlock(cfg.channels, cfg.kernel, d) for d in cfg.dilations))
        self.head = nn.Linear(cfg.channels, cfg.horizon)
        self.skip = nn.Linear(cfg.history, cfg.horizon)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, hist: torch.Tensor) -> torch.Tensor:
        squeeze = hist.dim() == 2
        if squeeze:
            hist = hist.unsqueeze(0)
        b, s, t = hist.shape
        if s != self.cfg.n_channels:
            raise ConfigError(f"forecaster trained on {self.cfg.n_channels} sensor channels, got {s}")
        if t < self.cfg.history:
            raise DataError(f"history of {t} samples shorter than required {self.cfg.history}")
        x = hist[..., -self.cfg.history:].reshape(b * s, 1, self.cfg.history)
        feat = self.blocks(self.lift(x))[..., -1]
        out = self.head(feat) + self.skip(x[:, 0])
        out = out.reshape(b, s, self.cfg.horizon)
        return out[0] if squeeze else out

    def save(self, path):
        return bb.save_checkpoint(path, dict(self.state_dict()), {"forecast": self.cfg.to_dict()})

    @classmethod
    def load(cls, path) -> "Forecaster":
        state, config = bb.load_checkpoint(path)
        model = cls(ForecastConfig(**config["forecast"]))
        model.load_state_dict(state)
        return model


def persistence(history: np.ndarray, horizon: int) -> np.ndarray:
    """Last observed value held over the horizon."""
    history = np.asarray(history, float)
    return np.repeat(history[:, -1:], horizon, axis=1)


class OracleForecaster:
    """Returns the measured future; isolates stage-two error in identity checks."""

    def __init__(self, future: np.ndarray):
        self.future = np.asarray(future, float)

    def __call__(self, history: np.ndarray, horizon: int) -> np.ndarray:
        return self.future[:, :horizon].copy()


def forecast_sensors(history: np.ndarray, model, horizon: int | None = None) -> np.ndarray:
    """Forecast S×H from an S×T_hist normalized history with a Forecaster, ``"persist"`` or a callable."""
    history = np.asarray(history, float)
    if isinstance(model, Forecaster):
        if history.shape[1] < model.cfg.history:
            raise DataError(f"history of {history.shape[1]} samples shorter than required {model.cfg.history}")
        with torch.no_grad():
            dt = next(model.parameters()).dtype
            out = model(torch.as_tensor(history, dtype=dt)).numpy().astype(float)
        return out if horizon is None else out[:, :horizon]
    if horizon is None:
        raise ConfigError("horizon required for non-parametric forecasters")
    if model == "persist":
        return persistence(history, horizon)
    return np.asarray(model(history, horizon), float)


def train_forecaster(segments: Sequence[Segment], sensor_nodes: Sequence[int], cfg: ForecastConfig,
                     progress: bool = False) -> tuple[Forecaster, list[dict]]:
    """Fit on (history, future) pairs cut from training segments only."""
    if cfg.kind != "tcn":
        raise ConfigError("only the 'tcn' forecaster is trainable")
    need = cfg.history + cfg.horizon
    for seg in segments:
        if seg.train.shape[1] < need:
            raise DataError(f"direction {seg.direction_deg}: training segment of {seg.train.shape[1]} "
                            f"samples shorter than history + horizon = {need}")
    cfg.n_channels = len(sensor_nodes)
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    model = Forecaster(cfg)
    opt = bb.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip)
    nodes = list(sensor_nodes)
    dt = torch.get_default_dtype()
    history_log = []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.steps_per_epoch):
            hs, fs = [], []
            for _ in range(cfg.batch):
                seg = segments[int(rng.integers(len(segments)))]
                start = int(rng.integers(seg.train.shape[1] - need + 1))
                win = seg.train[nodes, start:start + need]
                hs.append(win[:, :cfg.history])
                fs.append(win[:, cfg.history:])
            hist = torch.as_tensor(np.stack(hs), dtype=dt)
            fut = torch.as_tensor(np.stack(fs), dtype=dt)
            opt.zero_grad(set_to_none=True)
            loss = bb.huber(model(hist) - fut, cfg.huber_beta).mean()
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite forecaster loss at epoch {epoch}")
            bb.backward(loss)
            opt.step()
            total += float(loss.detach())
        history_log.append({"epoch": epoch, "loss": total / cfg.steps_per_epoch})
        if progress:
            log.info("forecaster epoch %d loss %.5f (%.0fs)", epoch, history_log[-1]["loss"],
                     time.perf_counter() - t0)
    model.eval()
    return model, history_log


@dataclass
class TwoStageResult:
    start: int
    horizon: int
    forecast: np.ndarray
    two_stage: np.ndarray
    reference: np.ndarray
    metrics_two_stage: dict
    metrics_reference: dict
    sensor_metrics: dict
    delta_rmse: float

    def to_json(self) -> dict:
        strip = lambda m: {k: v["summary"] for k, v in m.items()}
        return {
            "start": self.start,
            "horizon": self.horizon,
            "sensor_forecast": self.sensor_metrics,
            "two_stage": strip(self.metrics_two_stage),
            "reference_input": strip(self.metrics_reference),
            "delta_rmse_unobserved": self.delta_rmse,
        }


def two_stage_predict(values: np.ndarray, start: int, horizon: int, forecaster, recon_model,
                      scenario: MaskScenario, direction_deg: float, fs: float = 1000.0,
                      stats=None, window: int = 200, hop: int = 100) -> TwoStageResult:
    """Forecast available sensors over ``[start, start+horizon)`` and complete the field.

    ``values`` is a normalized N×T record; the history ends at ``start``. The
    reference variant sends the measured future of the same sensors through
    the identical reconstruction path.
    """
    values = np.asarray(values, float)
    if start + horizon > values.shape[1]:
        raise DataError(f"horizon end {start + horizon} beyond the {values.shape[1]} samples of reference data")
    avail = scenario.available_nodes
    hist_len = forecaster.cfg.history if isinstance(forecaster, Forecaster) else min(start, window)
    if start < hist_len or hist_len < 1:
        raise DataError(f"need {max(hist_len, 1)} history samples before start={start}")
    history = values[avail, start - hist_len:start]
    fc = forecast_sensors(history, forecaster, horizon)
    if fc.shape != (len(avail), horizon):
        raise ConfigError(f"forecast shape {fc.shape} != {(len(avail), horizon)}")
    truth = values[:, start:start + horizon]

    future = np.zeros_like(truth)
    future[avail] = fc
    plan = OverlapPlan(horizon, window, hop)
    pred = reconstruct_full(future, direction_deg, recon_model, scenario, plan).normalized
    ref = reconstruct_full(truth, direction_deg, recon_model, scenario, plan).normalized

    if stats is not None:
        pred_e, ref_e, truth_e = stats.denormalize(pred), stats.denormalize(ref), stats.denormalize(truth)
        fc_e = fc * stats.std[avail, None] + stats.mean[avail, None]
    else:
        pred_e, ref_e, truth_e, fc_e = pred, ref, truth, fc
    m_two = evaluate_fields(pred_e, truth_e, scenario, fs)
    m_ref = evaluate_fields(ref_e, truth_e, scenario, fs)
    r, a, p = np.mean([metrics(fc_e[i], truth_e[n]) for i, n in enumerate(avail)], axis=0)
    delta = m_two["unobserved"]["summary"]["rmse"] - m_ref["unobserved"]["summary"]["rmse"]
    return TwoStageResult(start, horizon, fc, pred, ref, m_two, m_ref,
                          {"rmse": float(r), "mae": float(a), "pearson": float(p)}, float(delta))

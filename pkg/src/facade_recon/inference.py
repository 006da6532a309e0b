"""Full-record reconstruction by weighted overlap-add, and the evaluation metrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy import signal

from .data import MaskScenario, NormalizationStats, Segment, apply_outage
from .errors import ConfigError, DataError
from .graph import FacadeGraph, direction_features

log = logging.getLogger(__name__)

OLA_EPS = 1e-8


def window_weights(T: int, kind: str = "hann") -> np.ndarray:
    """Edge-attenuating weight profile over a window; strictly positive for ``hann``."""
    if T < 2:
        raise ConfigError(f"window length must be at least 2, got {T}")
    if kind == "hann":
        tau = np.arange(T)
        return 0.5 - 0.5 * np.cos(2 * np.pi * (tau + 0.5) / T)
    if kind == "uniform":
        return np.ones(T)
    raise ConfigError(f"unknown window weight kind {kind!r}")


@dataclass
class OverlapPlan:
    total: int
    window: int = 200
    hop: int = 100
    kind: str = "hann"
    eps: float = OLA_EPS
    starts: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.hop < 1:
            raise ConfigError(f"hop must be positive, got {self.hop}")
        if self.total < self.window:
            raise DataError(f"record of {self.total} samples is shorter than the {self.window}-sample window")
        if not self.starts:
            self.starts = list(range(0, self.total - self.window + 1, self.hop))
            if self.starts[-1] + self.window < self.total:
                self.starts.append(self.total - self.window)  # tail window ends exactly at the record end

    @property
    def weights(self) -> np.ndarray:
        return window_weights(self.window, self.kind)

    def coverage(self) -> np.ndarray:
        w = self.weights
        acc = np.zeros(self.total)
        for s in self.starts:
            acc[s:s + self.window] += w
        return acc


def overlap_add(preds: Sequence[np.ndarray], plan: OverlapPlan) -> np.ndarray:
    """Σ_k ω_k(t)·Ŷ_k(:, t) / (Σ_k ω_k(t) + ε), windows accumulated in plan order."""
    if len(preds) != len(plan.starts):
        raise ConfigError(f"{len(preds)} window predictions for {len(plan.starts)} planned windows")
    w = plan.weights
    n = np.asarray(preds[0]).shape[0]
    num = np.zeros((n, plan.total))
    den = np.zeros(plan.total)
    for s, p in zip(plan.starts, preds):
        p = np.asarray(p, dtype=float)
        if p.shape != (n, plan.window):
            raise ConfigError(f"window prediction shape {p.shape} != {(n, plan.window)}")
        num[:, s:s + plan.window] += w * p
        den[s:s + plan.window] += w
    gaps = np.flatnonzero(den <= 0)
    if len(gaps):
        raise DataError(f"overlap plan leaves samples uncovered: {gaps[:20].tolist()}")
    return num / (den + plan.eps)


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionResult:
    direction_deg: float
    scenario: MaskScenario
    normalized: np.ndarray
    physical: np.ndarray | None
    starts: list[int]


def _as_forward(model) -> Callable:
    if isinstance(model, torch.nn.Module):
        def run(X, P, C):
            dt = next(model.parameters()).dtype
            out = model(torch.as_tensor(X, dtype=dt), torch.as_tensor(P, dtype=dt), torch.as_tensor(C, dtype=dt))
            return out.detach().cpu().numpy().astype(float)
        return run
    return model


@torch.no_grad()
def reconstruct_full(values: np.ndarray, direction_deg: float, model, scenario: MaskScenario,
                     plan: OverlapPlan | None = None, stats: NormalizationStats | None = None,
                     batch: int = 8, window: int = 200, hop: int = 100) -> ReconstructionResult:
    """Reconstruct a normalized N×T_full record window by window and merge.

    ``model`` is a ReconModel or any callable ``(X, P, C) -> Ŷ`` on B×N×T
    arrays. Only the available sensor rows of ``values`` are ever passed on.
    """
    values = np.asarray(values, dtype=float)
    plan = plan or OverlapPlan(values.shape[1], window, hop)
    if plan.total != values.shape[1]:
        raise ConfigError(f"plan covers {plan.total} samples, record has {values.shape[1]}")
    X_full, P_full = apply_outage(values, scenario)
    cond = np.asarray(direction_features(direction_deg))
    run = _as_forward(model)
    preds = []
    for i in range(0, len(plan.starts), batch):
        chunk = plan.starts[i:i + batch]
        X = np.stack([X_full[:, s:s + plan.window] for s in chunk])
        P = np.stack([P_full[:, s:s + plan.window] for s in chunk])
        C = np.repeat(cond[None], len(chunk), axis=0)
        out = np.asarray(run(X, P, C), dtype=float)
        preds.extend(out)
    merged = overlap_add(preds, plan)
    phys = stats.denormalize(merged) if stats is not None else None
    return ReconstructionResult(direction_deg, scenario, merged, phys, list(plan.starts))


def neighbor_average(values: np.ndarray, graph: FacadeGraph, scenario: MaskScenario) -> np.ndarray:
    """Baseline: each node predicted as the mean of its available graph neighbors (0 if none)."""
    X, _ = apply_outage(values, scenario)
    avail = set(scenario.available_nodes)
    out = np.zeros_like(values, dtype=float)
    for i, nbrs in enumerate(graph.neighbors()):
        obs = [j for j in nbrs if j in avail]
        if obs:
            out[i] = X[obs].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# metrics


def rmse(pred, ref) -> float:
    e = np.asarray(pred, float) - np.asarray(ref, float)
    return float(np.sqrt(np.mean(e * e)))


def mae(pred, ref) -> float:
    return float(np.mean(np.abs(np.asarray(pred, float) - np.asarray(ref, float))))


def pearson(pred, ref) -> float:
    """Correlation coefficient; NaN when either series has zero variance."""
    a = np.asarray(pred, float) - np.mean(pred)
    b = np.asarray(ref, float) - np.mean(ref)
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return float("nan")
    return float(np.clip(a @ b / den, -1.0, 1.0))


def metrics(pred, ref) -> tuple[float, float, float]:
    pred, ref = np.asarray(pred, float), np.asarray(ref, float)
    if pred.shape != ref.shape or pred.size < 2:
        raise ConfigError(f"metric inputs need equal shapes with ≥2 samples, got {pred.shape} and {ref.shape}")
    return rmse(pred, ref), mae(pred, ref), pearson(pred, ref)


def welch_psd(x, fs: float, nperseg: int = 256, overlap: float = 0.5, window: str = "hann"):
    """One-sided Welch density with per-segment mean removal."""
    x = np.asarray(x, float)
    if x.shape[-1] < nperseg:
        raise DataError(f"series of {x.shape[-1]} samples shorter than nperseg={nperseg}; use a smaller nperseg")
    return signal.welch(x, fs=fs, window=window, nperseg=nperseg, noverlap=int(overlap * nperseg),
                        detrend="constant", scaling="density", axis=-1)


def band_energy(freqs, psd, band=None) -> float:
    f = np.asarray(freqs, float)
    lo, hi = (f[0], f[-1]) if band is None else band
    sel = (f >= lo) & (f <= hi)
    return float(np.trapezoid(np.asarray(psd, float)[..., sel], f[sel], axis=-1))


def bandpower_error(freqs, psd_pred, psd_ref, band=None) -> float:
    """|E_pred − E_ref| / E_ref over ``band`` (whole grid by default); NaN if E_ref = 0."""
    ref = band_energy(freqs, psd_ref, band)
    if ref == 0:
        return float("nan")
    return abs(band_energy(freqs, psd_pred, band) - ref) / ref


SUBSETS = ("masked", "unobserved", "observed")


def subset_nodes(scenario: MaskScenario) -> dict[str, list[int]]:
    return {"masked": scenario.masked_nodes, "unobserved": scenario.unobserved_nodes,
            "observed": scenario.available_nodes}


def evaluate_fields(pred: np.ndarray, ref: np.ndarray, scenario: MaskScenario, fs: float,
                    nperseg: int = 256, bands=None) -> dict:
    """Per-subset metrics (node-averaged) plus per-node tables."""
    out = {}
    nps = min(nperseg, ref.shape[1])
    for name, nodes in subset_nodes(scenario).items():
        rows = []
        for n in nodes:
            r, m, p = metrics(pred[n], ref[n])
            f, s_pred = welch_psd(pred[n], fs, nps)
            _, s_ref = welch_psd(ref[n], fs, nps)
            row = {"node": int(n), "rmse": r, "mae": m, "pearson": p,
                   "psd_rel_err": bandpower_error(f, s_pred, s_ref)}
            for lo, hi in bands or ():
                row[f"psd_rel_err_{lo:g}_{hi:g}"] = bandpower_error(f, s_pred, s_ref, (lo, hi))
            rows.append(row)
        summary = {"count": len(rows)}
        for key in ("rmse", "mae", "pearson", "psd_rel_err"):
            vals = np.array([r[key] for r in rows], float)
            ok = vals[np.isfinite(vals)]
            if len(ok) < len(vals):
                log.warning("subset %s: %d node(s) with undefined %s excluded", name, len(vals) - len(ok), key)
            summary[key] = float(ok.mean()) if len(ok) else float("nan")
        out[name] = {"summary": summary, "nodes": rows}
    return out


def aggregate(reports: Sequence[dict], facade: str = "synthetic", subset: str = "masked") -> dict:
    """Mean and sample std (n−1) across directions of one subset's summaries."""
    if not reports:
        raise ConfigError("aggregate needs at least one direction")
    row = {"facade": facade, "subset": subset, "directions": len(reports)}
    for key in ("rmse", "mae", "pearson", "psd_rel_err"):
        vals = np.array([r[subset]["summary"][key] if subset in r else r[key] for r in reports], float)
        vals = vals[np.isfinite(vals)]
        row[key] = float(vals.mean()) if len(vals) else float("nan")
        row[f"{key}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    row["single_direction"] = len(reports) == 1
    return row


TABLE_COLUMNS = ("Facade", "RMSE", "MAE", "Correlation", "PSD (%)")


def format_table(rows: Sequence[dict]) -> str:
    """Tab-separated table: façade, then RMSE/MAE/correlation/PSD error as mean (± std)."""
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in rows:
        cells = [r["facade"]]
        for key, scale in (("rmse", 1), ("mae", 1), ("pearson", 1), ("psd_rel_err", 100)):
            cells.append(f"{r[key] * scale:.3f} (± {r[key + '_std'] * scale:.3f})")
        lines.append("\t".join(cells))
    return "\n".join(lines)


def evaluate_segment(segment: Segment, model, scenario: MaskScenario, units: str = "physical",
                     plan_kw: dict | None = None, nperseg: int = 256) -> tuple[ReconstructionResult, dict]:
    """Reconstruct the holdout part of a direction and score it against the truth."""
    res = reconstruct_full(segment.holdout, segment.direction_deg, model, scenario,
                           stats=segment.stats, **(plan_kw or {}))
    if units == "physical":
        pred, ref = res.physical, segment.stats.denormalize(segment.holdout)
    elif units == "normalized":
        pred, ref = res.normalized, segment.holdout
    else:
        raise ConfigError(f"units must be 'physical' or 'normalized', got {units!r}")
    return res, evaluate_fields(pred, ref, scenario, segment.sample_rate_hz, nperseg)

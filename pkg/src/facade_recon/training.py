"""Subset-weighted reconstruction objective, latent consistency and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import backbone as bb
from .data import MaskScenario, Segment, WindowSample, sample_window
from .errors import ConfigError
from .model import ReconModel

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    huber_beta: float = 1.0
    lambda_diff: float = 0.3
    lambda_spec: float = 0.05
    w_masked: float = 1.5
    w_observed: float = 0.1
    w_unobserved: float = 1.0
    lambda_lat: float = 0.2

    def __post_init__(self):
        if self.huber_beta <= 0:
            raise ConfigError("huber_beta must be positive")
        for k, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be non-negative, got {v}")


@dataclass
class TrainConfig:
    epochs: int = 300
    steps_per_epoch: int = 10
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.0
    clip: float = 1.0
    stage1_masked: int = 1
    stage2_masked: int = 2
    switch_epoch: int = 100
    seed: int = 0
    checkpoint_every: int = 0
    latent_stage: str = "encoder"

    def __post_init__(self):
        if not 0 <= self.switch_epoch <= self.epochs:
            raise ConfigError(f"switch_epoch {self.switch_epoch} outside [0, {self.epochs}]")
        if self.latent_stage not in ("encoder", "graph"):
            raise ConfigError(f"latent_stage must be 'encoder' or 'graph', got {self.latent_stage!r}")
        if self.batch < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch and steps_per_epoch must be positive")


# ---------------------------------------------------------------------------
# losses


def signal_terms(pred: torch.Tensor, target: torch.Tensor, beta: float = 1.0):
    """Per-series amplitude, first-difference and spectral terms, each shaped like ``pred[..., 0]``."""
    e = pred - target
    amp = bb.huber(e, beta).mean(-1)
    diff = (torch.diff(pred, dim=-1) - torch.diff(target, dim=-1)).abs().mean(-1)
    spec = (_magnitude(torch.fft.rfft(pred, dim=-1)) - _magnitude(torch.fft.rfft(target, dim=-1))).abs().mean(-1)
    return amp, diff, spec


def _magnitude(z: torch.Tensor) -> torch.Tensor:
    # |z| with a finite gradient at z = 0
    return torch.sqrt(z.real**2 + z.imag**2 + 1e-20)


def loss_sig(pred: torch.Tensor, target: torch.Tensor, cfg: LossConfig | None = None) -> torch.Tensor:
    """Huber amplitude + λ_d·first-difference L1 + λ_f·spectral-magnitude L1 over S×T."""
    cfg = cfg or LossConfig()
    if pred.shape != target.shape:
        raise ConfigError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() == 0:
        return pred.new_zeros(())
    amp, diff, spec = signal_terms(pred, target, cfg.huber_beta)
    return amp.mean() + cfg.lambda_diff * diff.mean() + cfg.lambda_spec * spec.mean()


def subset_masks(scenarios: Sequence[MaskScenario], num_nodes: int) -> torch.Tensor:
    """B×3×N indicator of (masked, observed, unobserved) nodes."""
    m = torch.zeros(len(scenarios), 3, num_nodes)
    for b, sc in enumerate(scenarios):
        m[b, 0, sc.masked_nodes] = 1
        m[b, 1, sc.available_nodes] = 1
        m[b, 2, sc.unobserved_nodes] = 1
    return m


def rec_components(pred, target, scenarios, cfg: LossConfig) -> dict[str, torch.Tensor]:
    """Subset-weighted amplitude/diff/spec terms, batch-averaged.

    ``pred``/``target`` are B×N×T. Each subset mean is taken over its own
    nodes; an empty subset contributes zero.
    """
    if pred.dim() == 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    if isinstance(scenarios, MaskScenario):
        scenarios = [scenarios]
    masks = subset_masks(scenarios, pred.shape[1]).to(pred.dtype)  # B×3×N
    counts = masks.sum(-1)
    weights = torch.tensor([cfg.w_masked, cfg.w_observed, cfg.w_unobserved], dtype=pred.dtype)
    scale = torch.where(counts > 0, weights / counts.clamp(min=1), torch.zeros_like(counts))
    coef = (masks * scale.unsqueeze(-1)).sum(1)  # B×N per-node coefficient
    amp, diff, spec = signal_terms(pred, target, cfg.huber_beta)
    out = {name: (coef * term).sum(-1).mean() for name, term in (("amp", amp), ("diff", diff), ("spec", spec))}
    out["rec"] = out["amp"] + cfg.lambda_diff * out["diff"] + cfg.lambda_spec * out["spec"]
    return out


def loss_rec(pred, target, scenario, cfg: LossConfig | None = None) -> torch.Tensor:
    """ω_m·L_sig(masked) + ω_o·L_sig(observed) + ω_u·L_sig(unobserved)."""
    return rec_components(pred, target, scenario, cfg or LossConfig())["rec"]


def latent_distance(z_mask: torch.Tensor, z_full: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over the masked-node latent rows (…×M×d×L)."""
    if z_mask.numel() == 0:
        return z_mask.new_zeros(())
    return ((z_mask - z_full.detach()) ** 2).mean()


def loss_latent(z_mask: torch.Tensor, z_full: torch.Tensor, lambda_lat: float) -> torch.Tensor:
    return lambda_lat * latent_distance(z_mask, z_full)


def masked_index(scenarios: Sequence[MaskScenario]) -> tuple[torch.Tensor, torch.Tensor]:
    b_idx, n_idx = [], []
    for b, sc in enumerate(scenarios):
        for n in sc.masked_nodes:
            b_idx.append(b)
            n_idx.append(n)
    return torch.tensor(b_idx, dtype=torch.long), torch.tensor(n_idx, dtype=torch.long)


@torch.no_grad()
def teacher_latent(model: ReconModel, batch: "Batch", stage: str = "encoder") -> torch.Tensor:
    """Latent rows at masked nodes from the unmasked input, outside the autograd graph.

    At the encoder stage only the masked series need encoding since the
    encoder treats each node independently.
    """
    b_idx, n_idx = masked_index(batch.scenarios)
    if len(b_idx) == 0:
        return batch.Y.new_zeros(0, model.cfg.latent_dim, model.cfg.latent_len)
    if stage == "encoder":
        rows = batch.Y[b_idx, n_idx]
        return model.encode(rows.unsqueeze(0))[0]
    full_flags = batch.flags.clone()
    full_flags[b_idx, n_idx] = 1
    x_full = batch.X.clone()
    x_full[b_idx, n_idx] = batch.Y[b_idx, n_idx]
    zt = model.propagate(model.encode(x_full), full_flags, batch.C)
    return zt[b_idx, n_idx]


@dataclass
class Batch:
    X: torch.Tensor
    P: torch.Tensor
    C: torch.Tensor
    Y: torch.Tensor
    flags: torch.Tensor
    scenarios: list[MaskScenario]
    descriptor: list[dict]

    @classmethod
    def stack(cls, samples: Sequence[WindowSample]) -> "Batch":
        dt = torch.get_default_dtype()
        X = torch.as_tensor(np.stack([s.X for s in samples]), dtype=dt)
        P = torch.as_tensor(np.stack([s.P for s in samples]), dtype=dt)
        return cls(
            X=X, P=P,
            C=torch.as_tensor(np.stack([s.C for s in samples]), dtype=dt),
            Y=torch.as_tensor(np.stack([s.Y for s in samples]), dtype=dt),
            flags=P.amax(-1),
            scenarios=[s.scenario for s in samples],
            descriptor=[{"direction_deg": s.direction_deg, "start": s.start, "masked": list(s.scenario.masked)}
                        for s in samples],
        )


def objective(model: ReconModel, batch: Batch, loss_cfg: LossConfig, stage: str = "encoder",
              teacher: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Total loss L_rec + λ_z·L_lat for one batch, with the components used for logging.

    ``teacher`` overrides the freshly computed unmasked latents (held fixed in gradient checks).
    """
    y, z, zt = model(batch.X, batch.P, batch.C, return_latents=True)
    comps = rec_components(y, batch.Y, batch.scenarios, loss_cfg)
    b_idx, n_idx = masked_index(batch.scenarios)
    if loss_cfg.lambda_lat > 0 and len(b_idx):
        student = (z if stage == "encoder" else zt)[b_idx, n_idx]
        target = teacher if teacher is not None else teacher_latent(model, batch, stage)
        comps["lat"] = latent_distance(student, target)
    else:
        comps["lat"] = y.new_zeros(())
    comps["total"] = comps["rec"] + loss_cfg.lambda_lat * comps["lat"]
    return comps


# ---------------------------------------------------------------------------
# curriculum and loop


def masked_count(epoch: int, cfg: TrainConfig) -> int:
    return cfg.stage1_masked if epoch < cfg.switch_epoch else cfg.stage2_masked


def curriculum_scenario(epoch: int, sensors: Sequence[int], num_nodes: int, rng: np.random.Generator,
                        cfg: TrainConfig | None = None) -> MaskScenario:
    """Uniformly chosen masked sensors; one before ``switch_epoch``, two after (by default)."""
    cfg = cfg or TrainConfig()
    k = min(masked_count(epoch, cfg), len(sensors) - 1)
    picks = rng.choice(len(sensors), size=k, replace=False) if k > 0 else []
    return MaskScenario(tuple(int(p) for p in picks), tuple(sensors), num_nodes)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    seconds: float = 0.0


LOG_KEYS = ("total", "amp", "diff", "spec", "lat")


def train(pool: Sequence[Segment], model: ReconModel, cfg: TrainConfig | None = None,
          loss_cfg: LossConfig | None = None, out_dir=None, extra_config: dict | None = None,
          progress: bool = False) -> TrainResult:
    """Run the optimization loop; writes train_log.jsonl and model.frck into ``out_dir`` when given."""
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(cfg.seed)
    graph = model.graph
    opt = bb.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay, clip_norm=cfg.clip)
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "train_log.jsonl", "w")
    result = TrainResult()
    t0 = time.perf_counter()
    model.train()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            sums = dict.fromkeys(LOG_KEYS, 0.0)
            policy = lambda r, e=epoch: curriculum_scenario(e, graph.sensors, graph.num_nodes, r, cfg)
            for _ in range(cfg.steps_per_epoch):
                samples = [sample_window(pool, rng, model.cfg.window, policy) for _ in range(cfg.batch)]
                batch = Batch.stack(samples)
                opt.zero_grad(set_to_none=True)
                comps = objective(model, batch, loss_cfg, cfg.latent_stage)
                total = comps["total"]
                if not torch.isfinite(total):
                    raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {batch.descriptor}")
                bb.backward(total)
                opt.step()
                rec = {"epoch": epoch, "step": step}
                rec.update({f"loss_{k}": float(comps[k].detach()) for k in LOG_KEYS})
                rec["grad_norm"] = opt.last_grad_norm
                rec["masked_count"] = masked_count(epoch, cfg)
                result.steps.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                for k in LOG_KEYS:
                    sums[k] += rec[f"loss_{k}"]
                step += 1
            summary = {"epoch": epoch, "step": step}
            summary.update({f"loss_{k}": sums[k] / cfg.steps_per_epoch for k in LOG_KEYS})
            summary["masked_count"] = masked_count(epoch, cfg)
            result.epochs.append(summary)
            if progress:
                log.info("epoch %d loss %.4f (%.0fs)", epoch, summary["loss_total"], time.perf_counter() - t0)
            if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                model.save(out / f"model_e{epoch + 1:04d}.frck", _ck_config(cfg, loss_cfg, extra_config))
    finally:
        if log_fh:
            log_fh.close()
    model.eval()
    if out is not None:
        result.checkpoint = model.save(out / "model.frck", _ck_config(cfg, loss_cfg, extra_config))
        with open(out / "epoch_log.jsonl", "w") as fh:
            for rec in result.epochs:
                fh.write(json.dumps(rec) + "\n")
    result.seconds = time.perf_counter() - t0
    return result


def _ck_config(cfg: TrainConfig, loss_cfg: LossConfig, extra: dict | None) -> dict:
    d = {"train": asdict(cfg), "loss": asdict(loss_cfg)}
    d.update(extra or {})
    return d

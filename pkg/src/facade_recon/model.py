"""Encoder / graph propagator / decoder reconstruction network."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from . import backbone as bb
from .errors import ConfigError
from .graph import FacadeGraph

AUX_DIM = 5  # x, y, mask flag, sin(dir), cos(dir)


@dataclass
class ModelConfig:
    window: int = 200
    enc_channels: int = 128
    enc_kernel: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    latent_dim: int = 128
    strided_layers: int = 2
    gat_layers: int = 4
    gat_hidden: int = 128
    heads: int = 4
    dec_channels: int = 128
    upsample_layers: int = 2
    dec_blocks: int = 3
    groups: int = 8
    self_loops: bool = True

    def __post_init__(self):
        self.dilations = tuple(self.dilations)
        factor = 2**self.strided_layers
        if self.window % factor:
            raise ConfigError(f"window {self.window} not divisible by {factor}")
        if self.upsample_layers != self.strided_layers:
            raise ConfigError("upsample_layers must equal strided_layers to restore the window length")
        for name in ("enc_channels", "latent_dim", "dec_channels"):
            if getattr(self, name) % self.groups:
                raise ConfigError(f"{name}={getattr(self, name)} not divisible by groups={self.groups}")
        if self.gat_hidden % self.heads:
            raise ConfigError(f"gat_hidden={self.gat_hidden} not divisible by heads={self.heads}")

    @property
    def latent_len(self) -> int:
        return self.window // 2**self.strided_layers

    @property
    def token_dim(self) -> int:
        return self.latent_dim + AUX_DIM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d


def _init(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv1d, nn.ConvTranspose1d, nn.Linear)):
            # biases keep the default uniform draw: zero-filled series then give groups with spread,
            # zero biases would leave every GroupNorm in the encoder on a constant input
            nn.init.kaiming_normal_(m.weight, nonlinearity="linear",
                                    mode="fan_out" if isinstance(m, nn.ConvTranspose1d) else "fan_in")


class ResBlock(nn.Module):
    """conv → GN → GELU → conv → GN, plus skip, then GELU."""

    def __init__(self, c_in: int, c_out: int, dilation: int, kernel: int, groups: int):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.conv1 = nn.Conv1d(c_in, c_out, kernel, dilation=dilation, padding=pad)
        self.norm1 = nn.GroupNorm(groups, c_out, eps=bb.NORM_EPS)
        self.conv2 = nn.Conv1d(c_out, c_out, kernel, dilation=dilation, padding=pad)
        self.norm2 = nn.GroupNorm(groups, c_out, eps=bb.NORM_EPS)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = bb.gelu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return bb.gelu(h + self.skip(x))


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.enc_channels
        ins = [1] + [c] * (len(cfg.dilations) - 1)
        self.blocks = nn.ModuleList(
            ResBlock(i, c, d, cfg.enc_kernel, cfg.groups) for i, d in zip(ins, cfg.dilations)
        )
        downs = []
        width = c
        for k in range(cfg.strided_layers):
            downs.append(nn.Conv1d(width, cfg.latent_dim, 4, stride=2, padding=1))
            if k < cfg.strided_layers - 1:
                downs += [nn.GroupNorm(cfg.groups, cfg.latent_dim, eps=bb.NORM_EPS), nn.GELU()]
            width = cfg.latent_dim
        self.down = nn.Sequential(*downs)

    def forward(self, x):
        # x: M×1×T, one row per node series
        for blk in self.blocks:
            x = blk(x)
        return self.down(x)


class GraphLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, heads: int):
        super().__init__()
        self.att = bb.GraphAttention(in_dim, out_dim, heads)
        self.res = nn.Linear(in_dim, out_dim) if in_dim != out_dim else nn.Identity()
        self.norm = nn.LayerNorm(out_dim, eps=bb.NORM_EPS)

    def forward(self, h, edge_index):
        return bb.elu(self.norm(self.att(h, edge_index) + self.res(h)))


class Propagator(nn.Module):
    """Graph attention over each latent time slice; weights shared across slices."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dims = [cfg.token_dim] + [cfg.gat_hidden] * cfg.gat_layers
        self.layers = nn.ModuleList(GraphLayer(a, b, cfg.heads) for a, b in zip(dims, dims[1:]))
        self.out = nn.Linear(cfg.gat_hidden, cfg.latent_dim) if cfg.gat_hidden != cfg.latent_dim else nn.Identity()

    def forward(self, z, aux, edge_index):
        # z: B×N×d×L, aux: B×N×5 -> B×N×d×L
        b, n, d, length = z.shape
        tokens = torch.cat([z.permute(0, 3, 1, 2), aux.unsqueeze(1).expand(b, length, n, aux.shape[-1])], dim=-1)
        h = tokens
        for layer in self.layers:
            h = layer(h, edge_index)
        return self.out(h).permute(0, 2, 3, 1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.dec_channels
        self.proj = nn.Conv1d(cfg.latent_dim, c, 1)
        ups = []
        for _ in range(cfg.upsample_layers):
            ups += [nn.ConvTranspose1d(c, c, 4, stride=2, padding=1),
                    nn.GroupNorm(cfg.groups, c, eps=bb.NORM_EPS), nn.GELU()]
        self.up = nn.Sequential(*ups)
        self.blocks = nn.Sequential(*(ResBlock(c, c, 1, 3, cfg.groups) for _ in range(cfg.dec_blocks)))
        self.head = nn.Conv1d(c, 1, 1)

    def forward(self, z):
        return self.head(self.blocks(self.up(self.proj(z))))


class ReconModel(nn.Module):
    """Ŷ = decode(propagate(encode(X), graph, mask, direction)).

    Inputs are batched: X and P as B×N×T, direction features C as B×2. The
    mask enters only through the per-node flag of the graph tokens.
    """

    def __init__(self, graph: FacadeGraph, cfg: ModelConfig | None = None):
        super().__init__()
        self.graph = graph
        self.cfg = cfg or ModelConfig()
        self.encoder = Encoder(self.cfg)
        self.propagator = Propagator(self.cfg)
        self.decoder = Decoder(self.cfg)
        _init(self)
        ei = graph.edge_index()
        if self.cfg.self_loops:
            ei = bb.with_self_loops(ei, graph.num_nodes)
        bb.check_edges(ei, graph.num_nodes)
        self.register_buffer("edge_index", ei, persistent=False)
        self.register_buffer("coords", torch.as_tensor(graph.coords(), dtype=torch.get_default_dtype()),
                             persistent=False)

    # -- stages ------------------------------------------------------------
    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """B×N×T (or N×T) → B×N×d×L, same weights for every node."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        b, n, t = x.shape
        if t != self.cfg.window:
            raise ConfigError(f"window length {t} != configured {self.cfg.window}")
        rows = x.reshape(b * n, t)
        live = rows.abs().amax(-1) > 0
        n_live = int(live.sum())
        if n_live == b * n:
            z = self.encoder(rows.unsqueeze(1))
        else:
            # all-zero series (unobserved nodes) share a single encoding
            enc = self.encoder(torch.cat([rows[live], rows.new_zeros(1, t)]).unsqueeze(1))
            slot = torch.full((b * n,), n_live, dtype=torch.long)
            slot[live] = torch.arange(n_live)
            z = enc[slot]
        z = z.reshape(b, n, self.cfg.latent_dim, -1)
        return z[0] if squeeze else z

    def aux_features(self, flags: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        b, n = flags.shape
        xy = self.coords.to(flags.dtype).expand(b, n, 2)
        return torch.cat([xy, flags.unsqueeze(-1), cond.unsqueeze(1).expand(b, n, 2)], dim=-1)

    def propagate(self, z: torch.Tensor, flags: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z, flags, cond = z.unsqueeze(0), flags.unsqueeze(0), cond.unsqueeze(0)
        if z.shape[1] != self.graph.num_nodes:
            raise ConfigError(f"latent has {z.shape[1]} nodes, graph has {self.graph.num_nodes}")
        out = self.propagator(z, self.aux_features(flags.to(z.dtype), cond.to(z.dtype)), self.edge_index)
        return out[0] if squeeze else out

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        squeeze = z.dim() == 3
        if squeeze:
            z = z.unsqueeze(0)
        b, n, d, length = z.shape
        if d != self.cfg.latent_dim:
            raise ConfigError(f"latent width {d} != configured {self.cfg.latent_dim}")
        y = self.decoder(z.reshape(b * n, d, length)).reshape(b, n, -1)
        return y[0] if squeeze else y

    # -- full pass -----------------------------------------------------------
    @staticmethod
    def node_flags(mask: torch.Tensor) -> torch.Tensor:
        """Per-node availability flag from a B×N×T (or B×N) mask."""
        return mask if mask.dim() == 2 else mask.amax(dim=-1)

    def forward(self, x, mask, cond, return_latents: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x, mask, cond = x.unsqueeze(0), mask.unsqueeze(0), cond.unsqueeze(0)
        if mask.shape == x.shape and bool((x * (1 - mask)).abs().max() > 0):
            raise ConfigError("input has non-zero values at unobserved entries (X ⊙ (1−P) ≠ 0)")
        flags = self.node_flags(mask)
        z = self.encode(x)
        zt = self.propagate(z, flags, cond)
        y = self.decode(zt)
        if squeeze:
            y, z, zt = y[0], z[0], zt[0]
        return (y, z, zt) if return_latents else y

    def predict(self, sample) -> torch.Tensor:
        """Forward pass on a :class:`~facade_recon.data.WindowSample`."""
        dt = torch.get_default_dtype()
        return self.forward(torch.as_tensor(sample.X, dtype=dt), torch.as_tensor(sample.P, dtype=dt),
                            torch.as_tensor(sample.C, dtype=dt))

    # -- persistence ---------------------------------------------------------
    def save(self, path, extra: dict | None = None):
        config = {"model": self.cfg.to_dict(), "graph": self.graph.to_json()}
        config.update(extra or {})
        return bb.save_checkpoint(path, dict(self.state_dict()), config)

    @classmethod
    def load(cls, path) -> "ReconModel":
        state, config = bb.load_checkpoint(path)
        if config is None:
            raise ConfigError(f"{path}: missing JSON sidecar with the model configuration")
        model = cls(FacadeGraph.from_json(config["graph"]), ModelConfig(**config["model"]))
        model.load_state_dict(state)
        return model

    def summary(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, tuple(p.shape), p.numel()) for name, p in self.named_parameters()]


def arch_table(model: ReconModel) -> str:
    rows = model.summary()
    width = max(len(r[0]) for r in rows)
    lines = [f"{'parameter'.ljust(width)}  {'shape':>18}  {'count':>9}"]
    groups: dict[str, int] = {}
    for name, shape, count in rows:
        lines.append(f"{name.ljust(width)}  {str(shape):>18}  {count:>9}")
        groups[name.split(".")[0]] = groups.get(name.split(".")[0], 0) + count
    lines.append("")
    for g, c in groups.items():
        lines.append(f"{g.ljust(width)}  {'':>18}  {c:>9}")
    lines.append(f"{'total'.ljust(width)}  {'':>18}  {sum(groups.values()):>9}")
    return "\n".join(lines)

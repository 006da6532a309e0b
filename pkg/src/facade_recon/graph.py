"""Façade graph: column-wise node indexing, grid and sensor edges, node attributes."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError

DEFAULT_ROWS = 25
DEFAULT_COLS = 5
DEFAULT_SENSOR_COLS = (0, 2, 4)
DEFAULT_SENSOR_ROWS = (0, 3, 7, 10, 14, 17, 21, 24)


def node_id(row: int, col: int, rows: int, cols: int | None = None) -> int:
    """Global id of grid cell (row, col), 0-based and column-wise: ``col * rows + row``."""
    if not 0 <= row < rows:
        raise ConfigError(f"row {row} outside 0..{rows - 1}")
    if cols is not None and not 0 <= col < cols:
        raise ConfigError(f"col {col} outside 0..{cols - 1}")
    if col < 0:
        raise ConfigError(f"col {col} is negative")
    return col * rows + row


def node_rc(nid: int, rows: int) -> tuple[int, int]:
    return nid % rows, nid // rows


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def build_grid_edges(rows: int, cols: int) -> list[tuple[int, int]]:
    """Right and downward neighbor links as undirected (low, high) pairs."""
    if rows < 1 or cols < 1:
        raise ConfigError(f"grid must be at least 1×1, got {rows}×{cols}")
    edges = []
    for c in range(cols):
        for r in range(rows):
            here = node_id(r, c, rows)
            if c + 1 < cols:
                edges.append(_pair(here, node_id(r, c + 1, rows)))
            if r + 1 < rows:
                edges.append(_pair(here, node_id(r + 1, c, rows)))
    return sorted(edges)


def default_sensor_layout(rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS,
                          sensor_rows=DEFAULT_SENSOR_ROWS, sensor_cols=DEFAULT_SENSOR_COLS) -> list[int]:
    """Sensor lattice ``sensor_cols × sensor_rows``, ordered column-major (24 taps by default)."""
    if len(sensor_rows) * len(sensor_cols) > rows * cols:
        raise ConfigError(
            f"{len(sensor_rows) * len(sensor_cols)} sensors requested but the grid has {rows * cols} nodes"
        )
    return [node_id(r, c, rows, cols) for c in sensor_cols for r in sensor_rows]


def build_sensor_edges(sensors, rows: int, cols: int) -> list[tuple[int, int]]:
    """Sensor-to-sensor enrichment edges, excluding pairs already in the grid.

    Three families: chains along each grid row, a vertical chain along the
    middle column, and diagonals joining each sensor to the nearest sensor
    above and below it in the next sensor-bearing column.
    """
    rc = [node_rc(s, rows) for s in sensors]
    by_row: dict[int, list[int]] = {}
    by_col: dict[int, list[int]] = {}
    for r, c in rc:
        by_row.setdefault(r, []).append(c)
        by_col.setdefault(c, []).append(r)
    out: set[tuple[int, int]] = set()

    for r, cs in by_row.items():
        cs = sorted(cs)
        for a, b in zip(cs, cs[1:]):
            out.add(_pair(node_id(r, a, rows), node_id(r, b, rows)))

    mid = cols // 2
    mid_rows = sorted(by_col.get(mid, []))
    for a, b in zip(mid_rows, mid_rows[1:]):
        out.add(_pair(node_id(a, mid, rows), node_id(b, mid, rows)))

    scols = sorted(by_col)
    for ca, cb in zip(scols, scols[1:]):
        rows_b = sorted(by_col[cb])
        for r in by_col[ca]:
            above = [x for x in rows_b if x < r]
            below = [x for x in rows_b if x > r]
            for r2 in ([above[-1]] if above else []) + ([below[0]] if below else []):
                out.add(_pair(node_id(r, ca, rows), node_id(r2, cb, rows)))

    grid = set(build_grid_edges(rows, cols))
    return sorted(e for e in out if e not in grid and e[0] != e[1])


@dataclass(frozen=True)
class FacadeGraph:
    rows: int = DEFAULT_ROWS
    cols: int = DEFAULT_COLS
    sensors: tuple[int, ...] = field(default_factory=lambda: tuple(default_sensor_layout()))
    edges: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        n = self.rows * self.cols
        if len(set(self.sensors)) != len(self.sensors):
            raise ConfigError("sensor list contains duplicates")
        bad = [s for s in self.sensors if not 0 <= s < n]
        if bad:
            raise ConfigError(f"sensor ids {bad} outside 0..{n - 1}")
        if not self.edges:
            merged = set(build_grid_edges(self.rows, self.cols))
            merged |= set(build_sensor_edges(self.sensors, self.rows, self.cols))
            object.__setattr__(self, "edges", tuple(sorted(merged)))
        for a, b in self.edges:
            if a == b or not (0 <= a < n and 0 <= b < n):
                raise ConfigError(f"invalid edge ({a}, {b})")

    @classmethod
    def build(cls, rows: int = DEFAULT_ROWS, cols: int = DEFAULT_COLS, sensors=None) -> "FacadeGraph":
        if sensors is None:
            if (rows, cols) == (DEFAULT_ROWS, DEFAULT_COLS):
                sensors = default_sensor_layout()
            else:
                sensors = scaled_sensor_layout(rows, cols)
        return cls(rows=rows, cols=cols, sensors=tuple(int(s) for s in sensors))

    @property
    def num_nodes(self) -> int:
        return self.rows * self.cols

    @property
    def unobserved(self) -> list[int]:
        s = set(self.sensors)
        return [i for i in range(self.num_nodes) if i not in s]

    def coords(self) -> np.ndarray:
        """Per-node (x, y) in [0, 1]²; x follows the column, y the row."""
        ids = np.arange(self.num_nodes)
        r, c = ids % self.rows, ids // self.rows
        x = c / (self.cols - 1) if self.cols > 1 else np.zeros_like(c, dtype=float)
        y = r / (self.rows - 1) if self.rows > 1 else np.zeros_like(r, dtype=float)
        return np.stack([x, y], axis=1).astype(float)

    def edge_index(self) -> torch.Tensor:
        """2×2E long tensor of directed (source, target) pairs, both directions."""
        if not self.edges:
            return torch.zeros(2, 0, dtype=torch.long)
        e = torch.tensor(self.edges, dtype=torch.long).T
        return torch.cat([e, e.flip(0)], dim=1)

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        return [sorted(x) for x in adj]

    def is_connected(self) -> bool:
        adj = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            for nb in adj[queue.popleft()]:
                if nb not in seen:
                    seen.add(nb)
                    queue.append(nb)
        return len(seen) == self.num_nodes

    def to_json(self) -> dict:
        """Export with 1-based row/col labels next to the 0-based ids."""
        xy = self.coords()
        nodes = [
            {"id": i, "row": i % self.rows + 1, "col": i // self.rows + 1,
             "x": float(xy[i, 0]), "y": float(xy[i, 1])}
            for i in range(self.num_nodes)
        ]
        grid = set(build_grid_edges(self.rows, self.cols))
        return {
            "rows": self.rows,
            "cols": self.cols,
            "num_nodes": self.num_nodes,
            "nodes": nodes,
            "edges": [list(e) for e in self.edges],
            "num_grid_edges": sum(e in grid for e in self.edges),
            "num_sensor_edges": sum(e not in grid for e in self.edges),
            "sensors": list(self.sensors),
        }

    @classmethod
    def from_json(cls, d: dict) -> "FacadeGraph":
        return cls(rows=d["rows"], cols=d["cols"], sensors=tuple(d["sensors"]),
                   edges=tuple(tuple(e) for e in d["edges"]))


def scaled_sensor_layout(rows: int, cols: int) -> list[int]:
    """Analogue of the default lattice for other grid sizes (3 columns × up to 8 rows)."""
    scols = sorted({round(c) for c in np.linspace(0, cols - 1, min(3, cols))})
    srows = sorted({round(r) for r in np.linspace(0, rows - 1, min(8, rows))})
    return [node_id(r, c, rows) for c in scols for r in srows]


def node_features(graph: FacadeGraph, direction_deg: float, mask_flags) -> np.ndarray:
    """N×5 array of (x, y, mask_flag, sin θ, cos θ)."""
    flags = np.asarray(mask_flags, dtype=float).reshape(-1)
    if flags.shape[0] != graph.num_nodes:
        raise ConfigError(f"got {flags.shape[0]} mask flags for {graph.num_nodes} nodes")
    th = math.radians(direction_deg)
    xy = graph.coords()
    ones = np.ones(graph.num_nodes)
    return np.column_stack([xy, flags, math.sin(th) * ones, math.cos(th) * ones])


def direction_features(direction_deg: float) -> tuple[float, float]:
    th = math.radians(direction_deg)
    return math.sin(th), math.cos(th)

"""Embedding-quality instrumentation: curvature profiles, geodesic heatmaps, PCA export."""
from __future__ import annotations

import csv
import heapq
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .envs import EnvState, MazeLayout, NavigationEnv
from .errors import ContractError, DegenerateVelocity
from .linear_analysis import sym_eig
from .model import WorldModel, straightening_cosine

SQRT2 = math.sqrt(2.0)


@dataclass
class HeatmapGrid:
    """Values on the layout grid; wall (and trigger) cells hold NaN."""

    values: np.ndarray
    goal: tuple
    source: str = "geodesic"
    meta: dict = field(default_factory=dict)

    @property
    def mask(self):
        return ~np.isnan(self.values)

    def cells(self):
        return [tuple(rc) for rc in np.argwhere(self.mask)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "value"])
            for r, c in self.cells():
                v = self.values[r, c]
                w.writerow([r, c, "inf" if math.isinf(v) else repr(float(v))])

    def to_pgm(self) -> bytes:
        """8-bit PGM, min-max normalized over finite cells; masked and unreachable cells are 0."""
        v = self.values
        finite = np.isfinite(v)
        img = np.zeros(v.shape, dtype=np.uint8)
        if finite.any():
            lo, hi = v[finite].min(), v[finite].max()
            span = hi - lo if hi > lo else 1.0
            img[finite] = np.round(1 + 254 * (v[finite] - lo) / span).astype(np.uint8)
        h, w = v.shape
        return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()

    def write_pgm(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_pgm())


@dataclass
class CurvatureProfile:
    cosines: np.ndarray
    variant: str

    @property
    def mean(self):
        return float(np.mean(self.cosines))

    @property
    def min(self):
        return float(np.min(self.cosines))


# curvature ------------------------------------------------------------------


def frameskipped_observations(env: NavigationEnv, states, frameskip):
    states = np.asarray(states)
    return env.render_positions(states[::frameskip, :2])


def curvature_profile(model, observations, variant="agg") -> CurvatureProfile:
    """C_t for every consecutive latent triplet of an (already frameskipped) observation sequence.

    ``model`` may be a WorldModel or any callable mapping observations to (T, m, d) latents.
    """
    obs = np.asarray(observations)
    if len(obs) < 3:
        raise ContractError("curvature profile needs at least three frames")
    if isinstance(model, WorldModel):
        z = model.encode_numpy(obs)
    else:
        z = np.asarray(model(obs), dtype=np.float64)
        model = None
    if z.ndim == 2:
        z = z[:, None, :]
    c = straightening_cosine(z[:-2], z[1:-1], z[2:], variant, model)
    vals = np.asarray(getattr(c, "value", c), dtype=np.float64)
    return CurvatureProfile(np.clip(vals, -1.0, 1.0), variant)


def mse_to_goal_trace(model, observations, goal_obs, source="spatial"):
    """Per-frame squared latent distance to the goal and the fraction of decreasing steps."""
    obs = np.asarray(observations)
    z = _features(model, np.concatenate([obs, np.asarray(goal_obs)[None]]), source)
    trace = np.sum((z[:-1] - z[-1]) ** 2, axis=1)
    steps = np.diff(trace)
    frac = float(np.mean(steps < 0)) if len(steps) else 0.0
    return trace, frac


# geodesics ------------------------------------------------------------------


def _neighbors(layout: MazeLayout, connectivity, teleport_aware):
    """Directed edges u -> (v, cost) between navigable cells."""
    if connectivity not in (4, 8):
        raise ContractError("connectivity must be 4 or 8")
    free = ~layout.walls & ~layout.teleport
    h, w = free.shape
    steps = [(0, 1), (1, 0), (0, -1), (-1, 0)]
    diag = [(1, 1), (1, -1), (-1, 1), (-1, -1)] if connectivity == 8 else []
    edges = {}
    for r, c in np.argwhere(free):
        out = []
        for dr, dc in steps:
            rr, cc = r + dr, c + dc
            if 0 <= rr < h and 0 <= cc < w and free[rr, cc]:
                out.append(((rr, cc), 1.0))
        for dr, dc in diag:
            rr, cc = r + dr, c + dc
            # no corner cutting: both orthogonal cells must be free
            if 0 <= rr < h and 0 <= cc < w and free[rr, cc] and free[r, cc] and free[rr, c]:
                out.append(((rr, cc), SQRT2))
        if teleport_aware and c + 1 < w and layout.teleport[r, c + 1]:
            out.append(((r, 1), 1.0))
        edges[(int(r), int(c))] = [((int(a), int(b)), k) for (a, b), k in out]
    return edges


def _heuristic(a, b, connectivity, teleport_aware):
    if teleport_aware:
        return 0.0  # wrap-around edges break the grid metric
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    if connectivity == 4:
        return float(dr + dc)
    return float(max(dr, dc) - min(dr, dc) + SQRT2 * min(dr, dc))


def astar_path_length(layout: MazeLayout, start, goal, connectivity=4, teleport_aware=False) -> float:
    """Shortest path cost from ``start`` to ``goal`` cell; inf when unreachable."""
    edges = _neighbors(layout, connectivity, teleport_aware)
    start, goal = tuple(map(int, start)), tuple(map(int, goal))
    for cell in (start, goal):
        if cell not in edges:
            raise ContractError(f"cell {cell} is not navigable")
    best = {start: 0.0}
    frontier = [(_heuristic(start, goal, connectivity, teleport_aware), 0.0, start)]
    while frontier:
        _, g, u = heapq.heappop(frontier)
        if u == goal:
            return g
        if g > best[u]:
            continue
        for v, k in edges[u]:
            nv = g + k
            if nv < best.get(v, math.inf):
                best[v] = nv
                heapq.heappush(frontier, (nv + _heuristic(v, goal, connectivity, teleport_aware), nv, v))
    return math.inf


def astar_geodesic(layout: MazeLayout, goal, connectivity=4, teleport_aware=False, resolution=1) -> HeatmapGrid:
    """Cost-to-goal from every navigable cell (one search over reversed edges).

    ``resolution`` r > 1 searches the r-times refined grid: ``goal`` is still a
    layout cell, and costs are in layout-cell units.
    """
    if resolution > 1:
        fine = astar_geodesic(layout.refine(resolution), layout.sub_cell(goal, resolution), connectivity, teleport_aware)
        fine.values /= resolution
        fine.meta["resolution"] = resolution
        return fine
    edges = _neighbors(layout, connectivity, teleport_aware)
    goal = tuple(map(int, goal))
    if goal not in edges:
        raise ContractError(f"goal {goal} is not a free cell")
    reverse = {u: [] for u in edges}
    for u, out in edges.items():
        for v, k in out:
            reverse[v].append((u, k))
    dist = {goal: 0.0}
    frontier = [(0.0, goal)]
    while frontier:
        g, u = heapq.heappop(frontier)
        if g > dist[u]:
            continue
        for v, k in reverse[u]:
            nv = g + k
            if nv < dist.get(v, math.inf):
                dist[v] = nv
                heapq.heappush(frontier, (nv, v))
    values = np.full(layout.walls.shape, np.nan)
    for u in edges:
        values[u] = dist.get(u, math.inf)
    meta = dict(connectivity=connectivity, teleport_aware=teleport_aware, layout=layout.name)
    return HeatmapGrid(values, goal, "geodesic", meta)


# latent heatmaps ------------------------------------------------------------


def _features(model, obs, source):
    if source not in ("spatial", "pooled"):
        raise ContractError("source must be spatial or pooled")
    z = model.encode_numpy(obs)
    if source == "pooled":
        return np.asarray(model.pool(z).value, dtype=np.float64)
    return z.reshape(len(z), -1)


def latent_heatmap(model: WorldModel, env: NavigationEnv, goal_cell, source="pooled", resolution=1) -> HeatmapGrid:
    """||f(cell) - f(goal)|| with the agent placed at every free cell center.

    ``resolution`` r > 1 probes the centers of the r x r sub-cells of every cell.
    """
    goal_cell = tuple(map(int, goal_cell))
    if goal_cell not in env.layout.free_cells():
        raise ContractError(f"goal {goal_cell} is not a free cell")
    layout = env.layout.refine(resolution)
    cells = layout.free_cells()
    goal_cell = env.layout.sub_cell(goal_cell, resolution) if resolution > 1 else goal_cell
    centers = np.array([layout.cell_center(r, c) for r, c in cells])
    f = _features(model, env.render_positions(centers), source)
    fg = f[cells.index(goal_cell)]
    values = np.full(layout.walls.shape, np.nan)
    for (r, c), d in zip(cells, np.linalg.norm(f - fg, axis=1)):
        values[r, c] = d
    return HeatmapGrid(values, goal_cell, source, dict(layout=layout.name, resolution=resolution))


def heatmap_agreement(latent: HeatmapGrid, geodesic: HeatmapGrid):
    """(spearman, pearson) over cells present in both grids with finite geodesic distance."""
    if latent.values.shape != geodesic.values.shape or not np.array_equal(latent.mask, geodesic.mask):
        raise ContractError("heatmaps must share layout and mask")
    keep = latent.mask & np.isfinite(geodesic.values) & np.isfinite(latent.values)
    x, y = latent.values[keep], geodesic.values[keep]
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DegenerateVelocity("agreement needs at least three cells with varying values")
    return float(stats.spearmanr(x, y)[0]), float(stats.pearsonr(x, y)[0])


# PCA ------------------------------------------------------------------------


@dataclass
class PCAResult:
    coords: np.ndarray
    components: np.ndarray  # (out_dim, D)
    explained: np.ndarray  # variance fractions
    mean: np.ndarray


def pca_project(latents, out_dim=2) -> PCAResult:
    """Project (N, D) points, or a list of (T_i, D) sequences stacked, onto the top principal axes."""
    X = np.concatenate([np.asarray(x, dtype=np.float64).reshape(len(x), -1) for x in latents]) if isinstance(
        latents, (list, tuple)
    ) else np.asarray(latents, dtype=np.float64).reshape(len(latents), -1)
    if len(X) < 3:
        raise ContractError("PCA needs at least three points")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    vals, vecs = sym_eig(0.5 * (cov + cov.T))
    vals = np.clip(vals, 0.0, None)
    comps = vecs[:, :out_dim].T.copy()
    for i, v in enumerate(comps):
        if v[np.argmax(np.abs(v))] < 0:
            comps[i] = -v
    total = vals.sum()
    explained = vals[:out_dim] / total if total > 0 else np.zeros(min(out_dim, len(vals)))
    return PCAResult(Xc @ comps.T, comps, explained, mean)


def write_pca_csv(path, coords, traj_ids, steps):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "t", "pc1", "pc2"])
        for i, t, (a, b) in zip(traj_ids, steps, coords[:, :2]):
            w.writerow([int(i), int(t), repr(float(a)), repr(float(b))])


def cell_state(layout: MazeLayout, cell) -> EnvState:
    x, y = layout.cell_center(*cell)
    return EnvState((x, y), (0.0, 0.0))

"""Seeded 2D navigation simulators, renderer and offline dataset generation.

Arena coordinates: ``x`` grows with the layout column, ``y`` with the row
(row 0 is the top line of the ASCII map). Every layout is a wall grid; the
agent is a point and a position is legal when the cell containing it is free.

All steppers round their output state to float32-representable values so a
dataset stored as float32 replays bit-exactly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, FormatError

IMAGE_SIZE = 32
IMAGE_PAD = 5  # px of wall border around the layout; keeps the blob off the image edge
BLOB_SIGMA = 1.0  # px
BLOB_MASS = 2.0 * math.pi * BLOB_SIGMA**2
OBS_SHAPE = (2, IMAGE_SIZE, IMAGE_SIZE)


def _q(x):
    return float(np.float32(x))


@dataclass(frozen=True)
class MazeLayout:
    name: str
    walls: np.ndarray  # (H, W) bool
    teleport: np.ndarray  # (H, W) bool, trigger cells (passable)
    cell_size: float = 1.0
    origin: tuple = (0.0, 0.0)

    @classmethod
    def parse(cls, text: str, name="custom", cell_size=1.0, origin=(0.0, 0.0)) -> "MazeLayout":
        lines = [ln.rstrip("\n") for ln in text.strip("\n").splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty layout")
        width = len(lines[0])
        if any(len(ln) != width for ln in lines):
            raise FormatError("layout rows differ in length")
        bad = {ch for ln in lines for ch in ln} - set("#.T")
        if bad:
            raise FormatError(f"layout has unknown symbols {sorted(bad)}")
        walls = np.array([[ch == "#" for ch in ln] for ln in lines])
        tele = np.array([[ch == "T" for ch in ln] for ln in lines])
        layout = cls(name, walls, tele, float(cell_size), tuple(float(o) for o in origin))
        layout._validate()
        return layout

    @classmethod
    def load(cls, path) -> "MazeLayout":
        path = Path(path)
        return cls.parse(path.read_text(), name=path.stem)

    def _validate(self):
        h, w = self.walls.shape
        free = ~self.walls & ~self.teleport
        if not free.any():
            raise FormatError("layout has no free cell")
        border = np.zeros_like(self.walls)
        border[0, :] = border[-1, :] = border[:, 0] = border[:, -1] = True
        if np.any(border & ~self.walls & ~self.teleport):
            raise FormatError("border cells must be walls or teleport triggers")
        if self.teleport.any():
            if np.any(self.teleport[:, :-1]):
                raise FormatError("teleport triggers must sit in the right border column")
            rows = np.nonzero(self.teleport[:, -1])[0]
            if np.any(self.walls[rows, 1]):
                raise FormatError("teleport landing cells (column 1) must be free")

    @property
    def shape(self):
        return self.walls.shape

    @property
    def extent(self):
        h, w = self.walls.shape
        return w * self.cell_size, h * self.cell_size

    def cell_of(self, x, y):
        c = math.floor((x - self.origin[0]) / self.cell_size)
        r = math.floor((y - self.origin[1]) / self.cell_size)
        return r, c

    def is_free(self, x, y) -> bool:
        r, c = self.cell_of(x, y)
        h, w = self.walls.shape
        if r < 0 or c < 0 or r >= h or c >= w:
            return False
        return not self.walls[r, c]

    def cell_center(self, r, c):
        return (
            self.origin[0] + (c + 0.5) * self.cell_size,
            self.origin[1] + (r + 0.5) * self.cell_size,
        )

    def free_cells(self):
        """Navigable (non-wall, non-trigger) cells in row-major order."""
        return [tuple(rc) for rc in np.argwhere(~self.walls & ~self.teleport)]

    def refine(self, r: int) -> "MazeLayout":
        """Same geometry on an r-times finer grid (each cell split into r x r sub-cells)."""
        if r < 1:
            raise ContractError("refinement factor must be >= 1")
        if r == 1:
            return self
        if self.teleport.any():
            raise ContractError("teleport layouts cannot be refined")
        block = np.ones((r, r), dtype=bool)
        walls = np.kron(self.walls, block)
        return MazeLayout(self.name, walls, np.zeros_like(walls), self.cell_size / r, self.origin)

    def sub_cell(self, cell, r: int):
        """Sub-cell of the r-refined grid holding the center of ``cell``."""
        return (cell[0] * r + r // 2, cell[1] * r + r // 2)

    @property
    def x_right(self) -> float:
        return self.origin[0] + (self.walls.shape[1] - 1) * self.cell_size

    @property
    def x_left(self) -> float:
        return self.origin[0] + self.cell_size

    def pixel_scale(self):
        w, h = self.extent
        return (IMAGE_SIZE - 2 * IMAGE_PAD) / max(w, h)

    def to_pixels(self, x, y):
        s = self.pixel_scale()
        return IMAGE_PAD + (x - self.origin[0]) * s, IMAGE_PAD + (y - self.origin[1]) * s

    def occupancy_image(self, supersample=8) -> np.ndarray:
        """Fractional wall coverage per pixel; everything outside the layout is wall."""
        n = IMAGE_SIZE * supersample
        span = self.pixel_scale() * self.cell_size  # px per cell
        idx = np.floor(((np.arange(n) + 0.5) / supersample - IMAGE_PAD) / span).astype(int)
        h, w = self.walls.shape
        rows_ok = (idx >= 0) & (idx < h)
        cols_ok = (idx >= 0) & (idx < w)
        rr, cc = np.meshgrid(np.clip(idx, 0, h - 1), np.clip(idx, 0, w - 1), indexing="ij")
        fine = self.walls[rr, cc] | ~rows_ok[:, None] | ~cols_ok[None, :]
        return fine.reshape(IMAGE_SIZE, supersample, IMAGE_SIZE, supersample).mean(axis=(1, 3))


_LAYOUT_SETTINGS = {
    "wall": dict(cell_size=0.04, origin=(-0.04, -0.04)),
    "umaze": {},
    "medium": {},
    "teleport": {},
}


def load_layout(name_or_path) -> MazeLayout:
    if name_or_path in _LAYOUT_SETTINGS:
        text = resources.files("straightwm.layouts").joinpath(f"{name_or_path}.txt").read_text()
        return MazeLayout.parse(text, name=name_or_path, **_LAYOUT_SETTINGS[name_or_path])
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigError(f"unknown layout {name_or_path!r}")
    return MazeLayout.load(path)


@dataclass(frozen=True)
class EnvState:
    position: tuple
    velocity: tuple = (0.0, 0.0)

    def as_array(self):
        return np.array([*self.position, *self.velocity], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        arr = [float(v) for v in arr]
        return cls((arr[0], arr[1]), (arr[2], arr[3]))


class NavigationEnv:
    """Base class: layout, rendering, start sampling and the random action policy."""

    name = "base"
    frameskip = 5
    action_dim = 2
    action_bound = 1.0
    state_dim = 4
    success_radius = 0.5

    def __init__(self, layout: MazeLayout):
        self.layout = layout
        self._walls_img = layout.occupancy_image()

    def step(self, state: EnvState, action) -> EnvState:
        raise NotImplementedError

    def clip_action(self, action):
        a = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        return np.clip(a, -self.action_bound, self.action_bound)

    def render(self, state: EnvState) -> np.ndarray:
        return self.render_positions(np.array([state.position]))[0]

    def render_positions(self, positions) -> np.ndarray:
        """Batch render, ``positions`` of shape (N, 2) -> images (N, 2, 32, 32)."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        px, py = self.layout.to_pixels(positions[:, 0], positions[:, 1])
        centers = np.arange(IMAGE_SIZE) + 0.5
        gx = np.exp(-((centers[None, :] - px[:, None]) ** 2) / (2 * BLOB_SIGMA**2))
        gy = np.exp(-((centers[None, :] - py[:, None]) ** 2) / (2 * BLOB_SIGMA**2))
        blob = gy[:, :, None] * gx[:, None, :]
        blob *= (BLOB_MASS / blob.sum(axis=(1, 2)))[:, None, None]
        out = np.empty((len(positions),) + OBS_SHAPE)
        out[:, 0] = self._walls_img
        out[:, 1] = np.minimum(blob, 1.0)
        return out

    def sample_start(self, rng: np.random.Generator) -> EnvState:
        cells = self.layout.free_cells()
        r, c = cells[rng.integers(len(cells))]
        ox, oy = self.layout.origin
        cs = self.layout.cell_size
        x = _q(ox + (c + rng.uniform()) * cs)
        y = _q(oy + (r + rng.uniform()) * cs)
        if not self.layout.is_free(x, y):  # float32 rounding onto a boundary
            x, y = (_q(v) for v in self.layout.cell_center(r, c))
        return EnvState((x, y), (0.0, 0.0))

    def sample_action(self, rng: np.random.Generator) -> np.ndarray:
        a = rng.uniform(-self.action_bound, self.action_bound, size=self.action_dim)
        return a.astype(np.float32).astype(np.float64)

    def random_rollout(self, start: EnvState, n_steps: int, rng: np.random.Generator):
        """Uniform i.i.d. actions, each held for ``frameskip`` raw steps."""
        states, actions = [start], []
        s = start
        for t in range(n_steps):
            if t % self.frameskip == 0:
                a = self.sample_action(rng)
            s = self.step(s, a)
            states.append(s)
            actions.append(a)
        return states, actions

    def distance(self, a: EnvState, b: EnvState) -> float:
        return math.dist(a.position, b.position)

    def is_success(self, state: EnvState, goal: EnvState) -> bool:
        return self.distance(state, goal) <= self.success_radius


class WallEnv(NavigationEnv):
    """Two rooms joined by a door; actions are clipped displacements."""

    name = "wall"
    action_bound = 0.05
    # half of a 0.2-unit navigation cell; the 0.04 grid only resolves geometry
    success_radius = 0.1

    def __init__(self, layout: MazeLayout | None = None):
        super().__init__(layout or load_layout("wall"))

    def _segment_clear(self, x0, y0, x1, y1):
        n = max(2, int(math.ceil(math.hypot(x1 - x0, y1 - y0) / (self.layout.cell_size / 8))) + 1)
        ts = np.linspace(0.0, 1.0, n)
        return all(self.layout.is_free(x0 + t * (x1 - x0), y0 + t * (y1 - y0)) for t in ts)

    def step(self, state, action):
        ax, ay = self.clip_action(action)
        x, y = state.position
        nx, ny = _q(x + ax), _q(y + ay)
        if self._segment_clear(x, y, nx, ny):
            return EnvState((nx, ny), (0.0, 0.0))
        if self._segment_clear(x, y, nx, y):
            x = nx
        if self._segment_clear(x, y, x, ny):
            y = ny
        return EnvState((x, y), (0.0, 0.0))


class PointMazeEnv(NavigationEnv):
    """Point mass with damping, a speed cap and axis-separated wall contacts."""

    name = "pointmaze"
    dt = 0.1
    friction = 0.05
    v_max = 1.0

    def __init__(self, layout: MazeLayout | str = "umaze"):
        if isinstance(layout, str):
            layout = load_layout(layout)
        super().__init__(layout)
        self.name = layout.name
        self.success_radius = 0.5 * layout.cell_size

    def _dynamics(self, state, action):
        a = self.clip_action(action)
        v = (np.asarray(state.velocity) + a * self.dt) * (1.0 - self.friction)
        speed = math.hypot(v[0], v[1])
        if speed > self.v_max:
            v *= self.v_max / speed
        vx, vy = _q(v[0]), _q(v[1])
        x, y = state.position
        nx = _q(x + vx * self.dt)
        if self.layout.is_free(nx, y):
            x = nx
        else:
            vx = 0.0
        ny = _q(y + vy * self.dt)
        if self.layout.is_free(x, ny):
            y = ny
        else:
            vy = 0.0
        return EnvState((x, y), (vx, vy))

    def step(self, state, action):
        return self._dynamics(state, action)


class TeleportMazeEnv(PointMazeEnv):
    """PointMaze whose right-border trigger column sends the agent to the left side."""

    def __init__(self, layout: MazeLayout | str = "teleport"):
        super().__init__(layout)
        if not self.layout.teleport.any():
            raise ConfigError("teleport environment needs 'T' cells in its layout")

    def teleport(self, state: EnvState) -> EnvState:
        """Apply the one-way trigger to a freshly stepped state."""
        x, y = state.position
        if x <= self.layout.x_right:
            return state
        vx, vy = state.velocity
        return EnvState((_q(self.layout.x_left), y), (abs(vx), vy))

    def step(self, state, action):
        return self.teleport(self._dynamics(state, action))


def make_env(name: str, layout=None) -> NavigationEnv:
    if name == "wall":
        return WallEnv(layout)
    if name in ("umaze", "medium", "pointmaze"):
        return PointMazeEnv(layout or ("umaze" if name == "pointmaze" else name))
    if name == "teleport":
        return TeleportMazeEnv(layout or "teleport")
    raise ConfigError(f"unknown environment {name!r}")


# datasets

DATASET_MAGIC = b"STPL"
DATASET_VERSION = 1
DEFAULT_DATASET_SIZE = {"wall": (1920, 50), "umaze": (2000, 100), "medium": (4000, 100), "teleport": (2000, 100)}


@dataclass
class Trajectory:
    env_name: str
    states: np.ndarray  # (T+1, 4)
    actions: np.ndarray  # (T, 2)

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise FormatError("trajectory needs len(states) == len(actions) + 1")

    def __len__(self):
        return len(self.actions)

    def env_states(self):
        return [EnvState.from_array(s) for s in self.states]

    def observations(self, env: NavigationEnv | None = None) -> np.ndarray:
        env = env or make_env(self.env_name)
        return env.render_positions(self.states[:, :2])


@dataclass
class TrajectoryDataset:
    """Trajectories stored as float32 state/action arrays; observations are rendered on demand."""

    env_name: str
    states: np.ndarray  # (N, T+1, 4) float32
    actions: np.ndarray  # (N, T, 2) float32
    obs_shape: tuple = OBS_SHAPE
    _env: object = field(default=None, repr=False, compare=False)

    @property
    def env(self) -> NavigationEnv:
        if self._env is None:
            self._env = make_env(self.env_name)
        return self._env

    @property
    def n_traj(self):
        return self.states.shape[0]

    @property
    def traj_len(self):
        return self.actions.shape[1]

    def __len__(self):
        return self.n_traj

    def __getitem__(self, i) -> Trajectory:
        return Trajectory(self.env_name, self.states[i].astype(np.float64), self.actions[i].astype(np.float64))

    def subset(self, indices) -> "TrajectoryDataset":
        idx = np.asarray(indices)
        return TrajectoryDataset(self.env_name, self.states[idx], self.actions[idx], self.obs_shape, self._env)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    def to_bytes(self) -> bytes:
        name = self.env_name.encode()
        header = DATASET_MAGIC + struct.pack(
            "<IIIIIIIII",
            DATASET_VERSION,
            self.n_traj,
            self.traj_len,
            *self.obs_shape,
            self.actions.shape[2],
            self.states.shape[2],
            len(name),
        ) + name
        body = b"".join(
            self.states[i].astype("<f4").tobytes() + self.actions[i].astype("<f4").tobytes()
            for i in range(self.n_traj)
        )
        return header + body

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        data = Path(path).read_bytes()
        if data[:4] != DATASET_MAGIC:
            raise FormatError(f"{path}: not a trajectory dataset (bad magic)")
        fields = struct.unpack_from("<IIIIIIIII", data, 4)
        version, n, t, c, h, w, adim, sdim, nlen = fields
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported dataset version {version}")
        off = 4 + struct.calcsize("<IIIIIIIII")
        name = data[off : off + nlen].decode()
        off += nlen
        rec = (t + 1) * sdim + t * adim
        payload = np.frombuffer(data, dtype="<f4", offset=off)
        if payload.size != n * rec:
            raise FormatError(f"{path}: truncated payload")
        payload = payload.reshape(n, rec)
        states = payload[:, : (t + 1) * sdim].reshape(n, t + 1, sdim).astype(np.float32)
        actions = payload[:, (t + 1) * sdim :].reshape(n, t, adim).astype(np.float32)
        return cls(name, states, actions, (c, h, w))


def generate_dataset(env: NavigationEnv, n_traj=None, traj_len=None, seed=0) -> TrajectoryDataset:
    """Random-start, random-action rollouts; trajectory ``i`` uses the stream (seed, i)."""
    dn, dl = DEFAULT_DATASET_SIZE.get(env.name, (2000, 100))
    n_traj = dn if n_traj is None else n_traj
    traj_len = dl if traj_len is None else traj_len
    if n_traj <= 0 or traj_len <= 0:
        raise ConfigError("n_traj and traj_len must be positive")
    states = np.empty((n_traj, traj_len + 1, 4), dtype=np.float32)
    actions = np.empty((n_traj, traj_len, 2), dtype=np.float32)
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        seq, acts = env.random_rollout(env.sample_start(rng), traj_len, rng)
        states[i] = [s.as_array() for s in seq]
        actions[i] = acts
    return TrajectoryDataset(env.name, states, actions, OBS_SHAPE, env)


@dataclass
class PlanTask:
    env_name: str
    start: EnvState
    goal: EnvState
    start_obs: np.ndarray
    goal_obs: np.ndarray
    budget_steps: int
    horizon: int
    action_log: np.ndarray  # raw actions that carried start to goal
    seed: int = 0


def sample_goal_task(env: NavigationEnv, seed: int, budget_steps: int = 25) -> PlanTask:
    """Goal = endpoint of a recorded random rollout of exactly ``budget_steps`` raw steps."""
    if budget_steps not in (25, 50):
        raise ConfigError(f"budget_steps must be 25 or 50, got {budget_steps}")
    rng = np.random.default_rng([seed, 7919])
    start = env.sample_start(rng)
    states, actions = env.random_rollout(start, budget_steps, rng)
    goal = states[-1]
    return PlanTask(
        env.name,
        start,
        goal,
        env.render(start),
        env.render(goal),
        budget_steps,
        budget_steps // env.frameskip,
        np.array(actions),
        seed,
    )


def replay(env: NavigationEnv, start: EnvState, actions) -> EnvState:
    s = start
    for a in actions:
        s = env.step(s, a)
    return s

"""Gradient-descent and CEM planners over learned latent dynamics, open-loop and MPC execution.

Planners see actions in normalized units: each raw action divided by the
environment's action bound, so every entry lies in [-1, 1]. Environments
receive ``chunk * action_bound``.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .envs import EnvState, NavigationEnv, PlanTask
from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

log = logging.getLogger(__name__)


@dataclass
class PlanConfig:
    horizon: int = 5
    optimizer: str = "gd"
    gd_lr: float = 0.01
    gd_steps: int = 100
    init: str = "zero"  # or "gaussian"
    init_std: float = 0.1
    cem_population: int = 200
    cem_iterations: int = 10
    cem_elite_frac: float = 0.1
    cem_init_std: float = 0.5
    gamma: float = 0.9
    max_mpc_steps: int = 10
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if self.optimizer not in ("gd", "cem"):
            problems.append("optimizer must be gd|cem")
        if self.init not in ("zero", "gaussian"):
            problems.append("init must be zero|gaussian")
        if not 0 < self.gamma <= 1:
            problems.append("gamma must lie in (0, 1]")
        if self.gd_steps < 1 or self.cem_iterations < 1:
            problems.append("optimizer step counts must be >= 1")
        if not self.cem_population > self.n_elites >= 1:
            problems.append("need population > elites >= 1")
        if self.max_mpc_steps < self.horizon:
            problems.append("max_mpc_steps must be >= horizon")
        if problems:
            raise ConfigError(problems)

    @property
    def n_elites(self):
        return max(1, int(round(self.cem_population * self.cem_elite_frac)))


@dataclass
class PlanResult:
    actions: np.ndarray  # (H, chunk) normalized
    cost_trace: list
    best_cost: float
    executed: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    success: bool = False
    final_distance: float = float("nan")
    success_curve: list = field(default_factory=list)
    std_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    diagnostic: str = ""

    @property
    def best_so_far(self):
        return list(np.minimum.accumulate(self.cost_trace)) if self.cost_trace else []


@dataclass
class History:
    """K latent frames (oldest first) and the K-1 action chunks applied at the older ones."""

    latents: list
    actions: list

    @classmethod
    def at_rest(cls, model, z0):
        k = model.config.history
        zero = np.zeros((1, model.config.chunk_size))
        return cls([z0] * k, [zero] * (k - 1))

    def push(self, z, chunk, k):
        self.latents = (self.latents + [z])[-k:]
        self.actions = (self.actions + [np.asarray(chunk).reshape(1, -1)])[-(k - 1) :] if k > 1 else []

    @classmethod
    def stack(cls, histories):
        """Row-concatenate single-task histories into one batched history."""
        k = len(histories[0].latents)
        return cls(
            [np.concatenate([np.asarray(h.latents[j]) for h in histories]) for j in range(k)],
            [np.concatenate([np.asarray(h.actions[j]) for h in histories]) for j in range(k - 1)],
        )

    def tiled(self, n):
        return History(
            [np.repeat(np.asarray(z), n, axis=0) for z in self.latents],
            [np.repeat(np.asarray(a), n, axis=0) for a in self.actions],
        )


def _chunks(actions, horizon):
    """Split an (H, chunk) node/array or an (N, H, chunk) array into H per-step chunks."""
    actions = ag.as_node(actions)
    if actions.shape[-2] < horizon:
        raise DimensionError(f"need at least {horizon} action chunks, got {actions.shape[-2]}")
    if actions.value.ndim == 2:
        return [ag.reshape(actions[t], (1, -1)) for t in range(horizon)]
    return [actions[:, t] for t in range(horizon)]


def _predicted(model, history: History, actions, horizon):
    return model.rollout(history.latents, history.actions, _chunks(actions, horizon))


def _goal_rows(z_goal, n):
    g = np.asarray(z_goal, dtype=np.float64)
    g = g.reshape(g.shape[0], -1) if g.ndim > 1 else g.reshape(1, -1)
    return np.broadcast_to(g, (n, g.shape[1])) if g.shape[0] == 1 else g


def _row_costs(preds, z_goal, cost="terminal", gamma=0.9) -> ag.Node:
    """Per-task cost, shape (N,): terminal MSE, or the geometrically weighted mean of per-step MSEs."""
    n = preds[0].shape[0]
    goal = ag.constant(_goal_rows(z_goal, n))
    per = [ag.mean(ag.square(ag.sub(ag.reshape(z, (n, -1)), goal)), axis=1) for z in preds]
    if cost == "terminal":
        return per[-1]
    if cost != "weighted":
        raise ConfigError(f"unknown cost {cost!r}")
    if not 0 < gamma <= 1:
        raise ContractError("gamma must lie in (0, 1]")
    horizon = len(per)
    w = np.array([gamma ** (horizon - t) for t in range(1, horizon + 1)])
    w /= w.sum()
    total = ag.scale(per[0], w[0])
    for term, wt in zip(per[1:], w[1:]):
        total = total + ag.scale(term, wt)
    return total


def terminal_cost(model, history: History, actions, z_goal, horizon=None) -> ag.Node:
    """Mean squared error between the H-step predicted latent and the goal latent (summed over tasks)."""
    horizon = horizon or ag.as_node(actions).shape[-2]
    return ag.sum_(_row_costs(_predicted(model, history, actions, horizon)[-1:], z_goal))


def weighted_cost(model, history: History, actions, z_goal, gamma=0.9, horizon=None) -> ag.Node:
    """Geometrically weighted mean of per-step goal MSEs, heaviest on the last step."""
    horizon = horizon or ag.as_node(actions).shape[-2]
    return ag.sum_(_row_costs(_predicted(model, history, actions, horizon), z_goal, "weighted", gamma))


def _batch_costs(model, history: History, samples, z_goal, cost, gamma):
    """Per-sample cost for an (N, H, chunk) array, no graph kept."""
    n, horizon, _ = samples.shape
    hist = history.tiled(n) if np.asarray(history.latents[0]).shape[0] == 1 else history
    preds = model.rollout(
        [ag.constant(z) for z in hist.latents],
        [ag.constant(a) for a in hist.actions],
        [ag.constant(samples[:, t]) for t in range(horizon)],
    )
    return _row_costs(preds, z_goal, cost, gamma).value


def plan_gd_batch(model, history: History, z_goals, config: PlanConfig, cost="terminal", rngs=None) -> list:
    """Adam on N independent action sequences at once; returns one PlanResult per task.

    The batch loss is the sum of per-task costs and Adam is elementwise, so each
    task follows the same iterates it would follow on its own.
    """
    t0 = time.perf_counter()
    n = np.asarray(history.latents[-1]).shape[0]
    shape = (config.horizon, model.config.chunk_size)
    if config.init == "zero":
        init = np.zeros((n,) + shape)
    else:
        rngs = rngs or [np.random.default_rng([config.seed, i]) for i in range(n)]
        init = np.stack([np.clip(r.normal(0, config.init_std, shape), -1, 1) for r in rngs])
    actions = ag.parameter(init)
    state = ag.AdamState(lr=config.gd_lr)
    traces = np.zeros((n, 0))
    best, best_cost = init.copy(), np.full(n, np.inf)

    def evaluate(a):
        return _row_costs(_predicted(model, history, a, config.horizon), z_goals, cost, config.gamma)

    try:
        for _ in range(config.gd_steps):
            actions.grad = None
            rows = evaluate(actions)
            ag.backward(ag.sum_(rows))
            traces = np.concatenate([traces, rows.value[:, None]], axis=1)
            better = rows.value < best_cost
            best_cost[better] = rows.value[better]
            best[better] = actions.value[better]
            ag.adam_step([actions.value], [actions.grad], state)
            np.clip(actions.value, -1.0, 1.0, out=actions.value)
        final = evaluate(ag.constant(actions.value)).value
        better = final < best_cost
        best_cost[better] = final[better]
        best[better] = actions.value[better]
    except NonFiniteError as exc:
        dt = (time.perf_counter() - t0) / n
        return [PlanResult(best[i], list(traces[i]), float("nan"), wall_time=dt, diagnostic=str(exc)) for i in range(n)]
    dt = (time.perf_counter() - t0) / n
    return [PlanResult(best[i], list(traces[i]), float(best_cost[i]), wall_time=dt) for i in range(n)]


def plan_gd(model, history: History, z_goal, config: PlanConfig, cost="terminal", rng=None) -> PlanResult:
    """Adam on the action chunks, clipped to [-1, 1] after each step; returns the best iterate."""
    rng = rng or np.random.default_rng(config.seed)
    return plan_gd_batch(model, history, z_goal, config, cost, [rng])[0]


def plan_cem(model, history: History, z_goal, config: PlanConfig, cost="terminal", rng=None) -> PlanResult:
    """Cross-entropy method with a diagonal Gaussian; returns the final mean sequence."""
    t0 = time.perf_counter()
    rng = rng or np.random.default_rng(config.seed)
    shape = (config.horizon, model.config.chunk_size)
    mu = np.zeros(shape)
    std = np.full(shape, config.cem_init_std)
    trace, std_trace = [], []
    for _ in range(config.cem_iterations):
        samples = np.clip(mu + std * rng.standard_normal((config.cem_population,) + shape), -1.0, 1.0)
        costs = _batch_costs(model, history, samples, z_goal, cost, config.gamma)
        if not np.all(np.isfinite(costs)):
            return PlanResult(mu, trace, float("nan"), std_trace=std_trace, diagnostic="non-finite CEM cost")
        elite = samples[np.argsort(costs, kind="stable")[: config.n_elites]]
        mu, std = elite.mean(axis=0), elite.std(axis=0)
        trace.append(float(costs.min()))
        std_trace.append(float(std.mean()))
    final = float(_batch_costs(model, history, mu[None], z_goal, cost, config.gamma)[0])
    return PlanResult(mu, trace, final, std_trace=std_trace, wall_time=time.perf_counter() - t0)


def plan(model, history, z_goal, config: PlanConfig, cost="terminal", rng=None) -> PlanResult:
    planner = plan_gd if config.optimizer == "gd" else plan_cem
    return planner(model, history, z_goal, config, cost, rng)


def _plan_many(model, histories, goals, config, cost, rngs) -> list:
    """GD plans all tasks in one batch; CEM runs task by task (its sampling is per-task)."""
    if config.optimizer == "gd":
        return plan_gd_batch(model, History.stack(histories), np.concatenate(goals), config, cost, rngs)
    return [plan_cem(model, h, g, config, cost, r) for h, g, r in zip(histories, goals, rngs)]


def _execute_chunk(env, state: EnvState, chunk, executed: list, goal=None):
    raw = np.asarray(chunk).reshape(-1, env.action_dim) * env.action_bound
    reached = False
    for a in raw:
        a = env.clip_action(a)
        state = env.step(state, a)
        executed.append(a)
        if goal is not None and env.is_success(state, goal):
            reached = True
            break
    return state, reached


def _for_task(config: PlanConfig, horizon, max_steps=None):
    max_steps = max(horizon, max_steps or config.max_mpc_steps)
    if horizon == config.horizon and max_steps == config.max_mpc_steps:
        return config
    return PlanConfig(**{**config.__dict__, "horizon": horizon, "max_mpc_steps": max_steps})


def _encode_many(model, observations):
    z = model.encode_numpy(np.stack([np.asarray(o) for o in observations]))
    return [z[i : i + 1] for i in range(len(z))]


def run_open_loop_batch(model, env, tasks, config: PlanConfig) -> list:
    """Plan once per task from its start image, execute every chunk, judge the final true position."""
    if not tasks:
        return []
    if len({t.horizon for t in tasks}) != 1:
        raise ContractError("tasks in one batch must share a horizon")
    config = _for_task(config, tasks[0].horizon)
    z0 = _encode_many(model, [t.start_obs for t in tasks])
    zg = _encode_many(model, [t.goal_obs for t in tasks])
    rngs = [np.random.default_rng([config.seed, t.seed]) for t in tasks]
    results = _plan_many(model, [History.at_rest(model, z) for z in z0], zg, config, "terminal", rngs)
    for task, res in zip(tasks, results):
        state, executed = task.start, []
        for chunk in res.actions:
            state, _ = _execute_chunk(env, state, chunk, executed)
        res.executed = np.array(executed)
        res.final_distance = env.distance(state, task.goal)
        res.success = bool(env.is_success(state, task.goal)) and not res.diagnostic
    return results


def run_open_loop(model, env, task: PlanTask, config: PlanConfig) -> PlanResult:
    return run_open_loop_batch(model, env, [task], config)[0]


def run_mpc_batch(model, env, tasks, config: PlanConfig, max_steps=None) -> list:
    """Receding horizon for many tasks: plan with the weighted cost, execute one chunk, re-encode, replan.

    Tasks that reach their goal stop planning; success is checked after every raw step.
    """
    if not tasks:
        return []
    if len({t.horizon for t in tasks}) != 1:
        raise ContractError("tasks in one batch must share a horizon")
    max_steps = max_steps or config.max_mpc_steps
    if max_steps < tasks[0].horizon:
        raise ContractError("max_steps must be >= horizon")
    config = _for_task(config, tasks[0].horizon, max_steps)
    t0 = time.perf_counter()
    n, k = len(tasks), model.config.history
    zg = _encode_many(model, [t.goal_obs for t in tasks])
    histories = [History.at_rest(model, z) for z in _encode_many(model, [t.start_obs for t in tasks])]
    rngs = [np.random.default_rng([config.seed, t.seed]) for t in tasks]
    states = [t.start for t in tasks]
    reached = [bool(env.is_success(t.start, t.goal)) for t in tasks]
    executed = [[] for _ in tasks]
    curves = [[] for _ in tasks]
    traces = [[] for _ in tasks]
    last = [None] * n
    failed = [False] * n
    for _ in range(max_steps):
        active = [i for i in range(n) if not reached[i] and not failed[i]]
        for i in range(n):
            if i not in active:
                curves[i].append(reached[i])
        if not active:
            continue
        plans = _plan_many(model, [histories[i] for i in active], [zg[i] for i in active], config, "weighted", [rngs[i] for i in active])
        for i, res in zip(active, plans):
            last[i] = res
            traces[i].append(res.best_cost)
            if res.diagnostic:
                failed[i] = True
                curves[i].append(False)
                continue
            states[i], reached[i] = _execute_chunk(env, states[i], res.actions[0], executed[i], tasks[i].goal)
        moved = [i for i in active if not failed[i]]
        if moved:
            z_new = _encode_many(model, [env.render(states[i]) for i in moved])
            for i, z in zip(moved, z_new):
                histories[i].push(z, last[i].actions[0], k)
                curves[i].append(bool(reached[i]))
    wall = (time.perf_counter() - t0) / n
    out = []
    for i, task in enumerate(tasks):
        res = last[i]
        out.append(
            PlanResult(
                res.actions if res is not None else np.zeros((config.horizon, model.config.chunk_size)),
                traces[i],
                min(traces[i]) if traces[i] else 0.0,
                executed=np.array(executed[i]).reshape(-1, env.action_dim),
                success=bool(reached[i]),
                final_distance=env.distance(states[i], task.goal),
                success_curve=curves[i],
                wall_time=wall,
                diagnostic=res.diagnostic if res is not None else "",
            )
        )
    return out


def run_mpc(model, env, task: PlanTask, config: PlanConfig, max_steps=None) -> PlanResult:
    return run_mpc_batch(model, env, [task], config, max_steps)[0]


def success_curve_rate(results) -> list:
    """Cumulative success rate per MPC step across tasks."""
    curves = np.array([r.success_curve for r in results], dtype=float)
    return list(curves.mean(axis=0)) if len(curves) else []


def write_eval_csv(path, rows):
    """rows: dicts with task_id, seed, planner, mode, success, final_distance, wall_time."""
    cols = ["task_id", "seed", "planner", "mode", "success", "final_distance", "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r[c] for c in cols])


def write_curve_csv(path, rates):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "success_rate"])
        for i, r in enumerate(rates):
            w.writerow([i + 1, repr(float(r))])


# linear oracle --------------------------------------------------------------


@dataclass(frozen=True)
class _OracleConfig:
    chunk_size: int
    history: int = 1


class LinearLatentModel:
    """Identity "encoder" on the true state with known linear dynamics z' = A z + B a.

    Drop-in for the planners: the planning cost is then a convex quadratic in the actions.
    """

    def __init__(self, A, B):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.config = _OracleConfig(chunk_size=self.B.shape[1])

    def encode_numpy(self, obs):
        obs = np.asarray(obs, dtype=np.float64)
        return obs.reshape(1, -1) if obs.ndim == 1 else obs.reshape(len(obs), -1)

    def rollout(self, latents, seed_actions, future_actions):
        if len(latents) != 1 or len(seed_actions) != 0:
            raise DimensionError("linear oracle rollout takes one latent and no seed actions")
        z = ag.as_node(latents[0])
        At, Bt = ag.constant(self.A.T), ag.constant(self.B.T)
        out = []
        for a in future_actions:
            z = ag.matmul(z, At) + ag.matmul(ag.as_node(a), Bt)
            out.append(z)
        return out


class LinearOracleEnv:
    """Ground truth matching LinearLatentModel; observations are the raw state vectors."""

    name = "linear"
    frameskip = 1
    action_bound = 1.0

    def __init__(self, A, B, success_radius=0.05):
        self.A = np.asarray(A, dtype=np.float64)
        self.B = np.asarray(B, dtype=np.float64)
        self.action_dim = self.B.shape[1]
        self.success_radius = success_radius

    def clip_action(self, action):
        return np.clip(np.asarray(action, dtype=np.float64).reshape(self.action_dim), -1.0, 1.0)

    def step(self, state: EnvState, action) -> EnvState:
        z = self.A @ np.asarray(state.position) + self.B @ np.asarray(action)
        return EnvState(tuple(z), state.velocity)

    def render(self, state: EnvState):
        return np.asarray(state.position, dtype=np.float64)

    def distance(self, a: EnvState, b: EnvState) -> float:
        return float(np.linalg.norm(np.subtract(a.position, b.position)))

    def is_success(self, state, goal) -> bool:
        return self.distance(state, goal) <= self.success_radius


def sample_linear_task(env: LinearOracleEnv, seed: int, horizon=1, reach=0.5) -> PlanTask:
    """Random start, goal reachable with actions inside [-reach, reach]."""
    rng = np.random.default_rng([seed, 104729])
    d = env.A.shape[0]
    z0 = rng.uniform(-1, 1, d)
    acts = rng.uniform(-reach, reach, (horizon, env.action_dim))
    state = EnvState(tuple(z0), tuple(np.zeros(d)))
    goal = state
    for a in acts:
        goal = env.step(goal, a)
    return PlanTask("linear", state, goal, env.render(state), env.render(goal), horizon, horizon, acts, seed)

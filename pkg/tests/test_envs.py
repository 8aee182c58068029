import math

import numpy as np
import pytest

from straightwm.envs import (
    BLOB_MASS,
    EnvState,
    MazeLayout,
    PointMazeEnv,
    TrajectoryDataset,
    generate_dataset,
    load_layout,
    make_env,
    replay,
    sample_goal_task,
)
from straightwm.errors import ConfigError, FormatError

from oracles import pointmaze_speed

S = EnvState


@pytest.fixture(scope="module")
def wall():
    return make_env("wall")


@pytest.fixture(scope="module")
def umaze():
    return make_env("umaze")


@pytest.fixture(scope="module")
def tele():
    return make_env("teleport")


# layouts -------------------------------------------------------------------


def test_umaze_layout_shape():
    lay = load_layout("umaze")
    assert lay.walls.astype(int).tolist() == [
        [1, 1, 1, 1, 1],
        [1, 0, 0, 0, 1],
        [1, 1, 1, 0, 1],
        [1, 0, 0, 0, 1],
        [1, 1, 1, 1, 1],
    ]
    assert len(lay.free_cells()) == 7


def test_medium_layout_is_eight_by_eight():
    assert load_layout("medium").walls.shape == (8, 8)


def test_wall_geometry(wall):
    lay = wall.layout
    assert not lay.is_free(0.50, 0.2) and not lay.is_free(0.50, 0.8)
    assert lay.is_free(0.50, 0.5)  # door
    assert lay.is_free(0.45, 0.2) and lay.is_free(0.55, 0.2)
    assert not lay.is_free(-0.01, 0.5) and not lay.is_free(0.5, 1.01)


@pytest.mark.parametrize(
    "text",
    ["", "#.#\n##", "###\n#x#\n###", "###\n...\n###", "#####\n#T..#\n#####", "####\n#..T\n##T#"],
)
def test_bad_layouts_rejected(text):
    with pytest.raises(FormatError):
        MazeLayout.parse(text)


# Wall stepper ----------------------------------------------------------------


def test_wall_blocked_move_slides_along_y(wall):
    s = wall.step(S((0.45, 0.2), (0, 0)), [0.05, 0.02])
    assert s.position[0] == pytest.approx(0.45, abs=1e-6)
    assert s.position[1] == pytest.approx(0.22, abs=1e-6)


def test_wall_door_crossing(wall):
    s = S((0.45, 0.5), (0, 0))
    for _ in range(3):
        s = wall.step(s, [0.05, 0.0])
    assert s.position[0] == pytest.approx(0.60, abs=1e-6)


def test_wall_zero_action_and_clipping(wall):
    s = S((0.3, 0.3), (0, 0))
    still = wall.step(s, [0, 0])  # states are stored at float32 precision
    assert still.position == pytest.approx(s.position, abs=1e-7) and still.velocity == (0.0, 0.0)
    moved = wall.step(s, [1.0, -1.0])
    assert moved.position == pytest.approx((0.35, 0.25), abs=1e-6)


# PointMaze stepper -----------------------------------------------------------


def _open_env(n=12):
    rows = ["#" * n] + ["#" + "." * (n - 2) + "#"] * (n - 2) + ["#" * n]
    return PointMazeEnv(MazeLayout.parse("\n".join(rows), name="open"))


def test_pointmaze_rest_is_fixed_point(umaze):
    s = S((1.5, 1.5), (0.0, 0.0))
    assert umaze.step(s, [0, 0]).position == pytest.approx(s.position, abs=1e-7)


def test_pointmaze_speed_matches_scalar_recursion():
    env = _open_env()
    s = S((1.2, 6.0), (0.0, 0.0))
    expected = pointmaze_speed(20)
    speeds = []
    for _ in range(20):
        s = env.step(s, [1.0, 0.0])
        speeds.append(s.velocity[0])
    assert speeds == pytest.approx(expected, abs=1e-6)
    assert all(b >= a for a, b in zip(speeds, speeds[1:]))
    # unclamped recursion is 1.9 (1 - 0.95^n); it first exceeds v_max at n = 15
    assert speeds[13] < 1.0 and speeds[14] == pytest.approx(1.0, abs=1e-6)
    assert max(speeds) <= 1.0 + 1e-6


def test_pointmaze_wall_contact_zeroes_normal_velocity(umaze):
    s = S((1.05, 1.5), (-0.5, 0.3))
    for _ in range(3):
        s = umaze.step(s, [0.0, 0.0])
    assert s.velocity[0] == 0.0
    assert s.velocity[1] > 0.0
    assert umaze.layout.is_free(*s.position)


def test_pointmaze_action_clipped(umaze):
    a = umaze.step(S((2.5, 1.5), (0, 0)), [5.0, 0])
    b = umaze.step(S((2.5, 1.5), (0, 0)), [1.0, 0])
    assert a == b


# teleportation ---------------------------------------------------------------


def test_teleport_rules_on_directed_transition(tele):
    out = tele.teleport(S((4.01, 0.3 + 1.0), (-0.2, 0.1)))
    assert out.position == (tele.layout.x_left, 1.3)  # rule 2: lands at x_left, y kept
    assert out.velocity[0] == pytest.approx(0.2)  # rule 3: v_x <- |v_x|
    assert out.velocity[1] == pytest.approx(0.1)


def test_teleport_triggered_by_dynamics(tele):
    s = tele.step(S((3.95, 1.3), (0.9, 0.0)), [1.0, 0.0])
    assert s.position[0] == tele.layout.x_left  # rule 1: crossing x_right triggers
    assert s.position[1] == pytest.approx(1.3, abs=1e-6)
    assert s.velocity[0] >= 0


def test_teleport_without_crossing_matches_pointmaze(tele):
    plain = PointMazeEnv(tele.layout)
    s = S((2.5, 1.5), (0.1, -0.2))
    assert tele.step(s, [0.3, 0.4]) == plain.step(s, [0.3, 0.4])


# rendering ---------------------------------------------------------------


@pytest.mark.parametrize("name", ["wall", "umaze", "teleport"])
def test_render_blob_mass_and_wall_channel(name):
    env = make_env(name)
    rng = np.random.default_rng(0)
    for _ in range(5):
        s = env.sample_start(rng)
        img = env.render(s)
        assert img.shape == (2, 32, 32)
        assert img[1].sum() == pytest.approx(BLOB_MASS, abs=1e-6)
        assert np.array_equal(img[0], env.layout.occupancy_image())
        assert np.array_equal(img, env.render(s))


def test_render_one_cell_apart(umaze):
    a = umaze.render(S(umaze.layout.cell_center(1, 1), (0, 0)))[1]
    b = umaze.render(S(umaze.layout.cell_center(1, 2), (0, 0)))[1]
    ia, ib = np.unravel_index(a.argmax(), a.shape), np.unravel_index(b.argmax(), b.shape)
    span = umaze.layout.pixel_scale() * umaze.layout.cell_size
    assert ia[0] == ib[0]
    assert abs((ib[1] - ia[1]) - span) <= 1


# datasets and tasks ------------------------------------------------------------


def test_dataset_roundtrip_and_replay(tmp_path, umaze):
    ds = generate_dataset(umaze, n_traj=6, traj_len=20, seed=3)
    path = tmp_path / "d.stpl"
    ds.save(path)
    back = TrajectoryDataset.load(path)
    assert back.to_bytes() == ds.to_bytes()
    assert generate_dataset(umaze, n_traj=6, traj_len=20, seed=3).to_bytes() == ds.to_bytes()
    for i in range(ds.n_traj):
        tr = ds[i]
        s = EnvState.from_array(tr.states[0])
        for t, a in enumerate(tr.actions):
            s = umaze.step(s, a)
            assert np.array_equal(s.as_array().astype(np.float32), tr.states[t + 1])


def test_actions_held_for_frameskip(umaze):
    ds = generate_dataset(umaze, n_traj=3, traj_len=20, seed=0)
    chunks = ds.actions.reshape(3, 4, 5, 2)
    assert np.all(chunks == chunks[:, :, :1])
    assert np.all(np.abs(ds.actions) <= umaze.action_bound)


def test_rollouts_never_enter_walls(wall, umaze, tele):
    for env in (wall, umaze, tele):
        ds = generate_dataset(env, n_traj=20, traj_len=50, seed=1)
        for p in ds.states[:, :, :2].reshape(-1, 2):
            assert env.layout.is_free(*p)


def test_pointmaze_speed_never_exceeds_vmax(umaze):
    ds = generate_dataset(umaze, n_traj=20, traj_len=100, seed=2)
    assert np.linalg.norm(ds.states[:, :, 2:], axis=-1).max() <= 1.0 + 1e-6


def test_start_coverage_on_umaze():
    env = make_env("umaze")
    for seed in range(3):
        ds = generate_dataset(env, n_traj=500, traj_len=5, seed=seed)
        starts = {env.layout.cell_of(*p) for p in ds.states[:, 0, :2]}
        assert starts == set(env.layout.free_cells())


def test_sample_goal_task(umaze):
    task = sample_goal_task(umaze, seed=4, budget_steps=25)
    assert task.horizon == 5
    assert replay(umaze, task.start, task.action_log) == task.goal
    assert np.array_equal(task.goal_obs, umaze.render(task.goal))
    assert len(task.action_log) == 25
    with pytest.raises(ConfigError):
        sample_goal_task(umaze, seed=0, budget_steps=30)


def test_medium_tasks_move():
    env = make_env("medium")
    moved = [env.distance(t.start, t.goal) > 0 for t in (sample_goal_task(env, i, 25) for i in range(100))]
    assert np.mean(moved) >= 0.95


def test_unknown_env_rejected():
    with pytest.raises(ConfigError):
        make_env("pusht")

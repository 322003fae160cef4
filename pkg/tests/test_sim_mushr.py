import numpy as np
import pytest

from cbnav.gridmap import (
    MapError,
    OccupancyGrid,
    free_space_connected,
    geodesic_field,
    load_map,
    make_office,
    save_map,
)
from cbnav.sim_mushr import (
    N_BEAMS,
    MushrParams,
    PoseMushr,
    RaycastError,
    mushr_step,
    raycast,
)


def box_grid(w_m=12.0, h_m=12.0, res=0.1):
    w, h = int(w_m / res), int(h_m / res)
    occ = np.zeros((h, w), dtype=bool)
    occ[0, :] = occ[-1, :] = True
    occ[:, 0] = occ[:, -1] = True
    return OccupancyGrid(occ, res)


def dense_march_oracle(grid, pose, angles, max_range, step_frac=0.1):
    """Reference raycast: sample along each beam at resolution/10."""
    step = grid.resolution * step_frac
    ts = np.arange(step, max_range + step, step)
    out = np.full(len(angles), max_range)
    for i, a in enumerate(angles):
        xs = pose.x + ts * np.cos(a)
        ys = pose.y + ts * np.sin(a)
        occ = grid.is_occupied_world_batch(xs, ys)
        idx = np.argmax(occ)
        if occ[idx]:
            out[i] = min(ts[idx], max_range)
    return out


def test_scan_shape_and_angular_spacing():
    grid = box_grid()
    scan = raycast(grid, PoseMushr(6.0, 6.0, 0.0), max_range=5.0)
    assert scan.points.shape == (N_BEAMS, 2)
    angles = np.arctan2(scan.points[:, 1], scan.points[:, 0])
    spacing = np.diff(np.unwrap(angles))
    np.testing.assert_allclose(spacing, np.deg2rad(0.5), atol=1e-9)


def test_empty_space_clamps_to_max_range():
    grid = box_grid(40.0, 40.0)
    scan = raycast(grid, PoseMushr(20.0, 20.0, 0.3), max_range=5.0)
    np.testing.assert_allclose(scan.distances, 5.0)
    np.testing.assert_allclose(np.hypot(*scan.points.T), 5.0, atol=1e-9)


def test_wall_ahead_hit_distance():
    grid = box_grid(12.0, 12.0)
    # wall column 2.0 m ahead of the sensor
    col = int(round(8.0 / grid.resolution))
    grid.occupied[:, col] = True
    pose = PoseMushr(6.0, 6.0, 0.0)
    scan = raycast(grid, pose, max_range=10.0)
    forward = scan.distances[360]  # beam at 0 deg relative
    assert forward == pytest.approx(2.0, abs=grid.resolution)
    oracle = dense_march_oracle(grid, pose, [pose.heading], 10.0)[0]
    assert forward == pytest.approx(oracle, abs=grid.resolution * np.sqrt(2))


def test_raycast_matches_dense_march_on_office():
    grid = make_office()
    rng = np.random.default_rng(42)
    params = MushrParams()
    checked = 0
    while checked < 40:
        x = rng.uniform(1, 29)
        y = rng.uniform(1, 69)
        if grid.is_occupied_world(x, y) or grid.clearance_world(x, y) < 0.3:
            continue
        pose = PoseMushr(x, y, rng.uniform(-np.pi, np.pi))
        scan = raycast(grid, pose, params.max_range)
        beams = rng.integers(0, N_BEAMS, size=6)
        angles = pose.heading + np.deg2rad(beams * 0.5 - 180.0)
        oracle = dense_march_oracle(grid, pose, angles, params.max_range)
        tol = grid.resolution * np.sqrt(2)
        np.testing.assert_allclose(scan.distances[beams], oracle, atol=tol)
        checked += 1


def test_rotation_by_two_pi_identical():
    grid = make_office()
    a = raycast(grid, PoseMushr(15.0, 20.0, 0.7), 10.0)
    b = raycast(grid, PoseMushr(15.0, 20.0, 0.7 + 2 * np.pi), 10.0)
    np.testing.assert_allclose(a.points, b.points, atol=1e-6)


def test_pose_in_occupied_cell_rejected():
    grid = box_grid()
    with pytest.raises(RaycastError):
        raycast(grid, PoseMushr(0.05, 0.05, 0.0), 5.0)


def test_step_straight_corridor_keeps_y():
    grid = box_grid(40.0, 12.0)
    pose = PoseMushr(2.0, 6.0, 0.0)
    for _ in range(50):
        res = mushr_step(pose, 0.0, grid)
        pose = res.pose
        assert pose.y == pytest.approx(6.0, abs=1e-12)
    assert not res.crashed


def test_crash_exactly_at_collision_radius():
    grid = box_grid(12.0, 12.0)
    params = MushrParams()
    pose = PoseMushr(1.5, 6.0, np.pi)  # driving toward the left wall
    crashed = False
    while not crashed:
        res = mushr_step(pose, 0.0, grid, params)
        pose = res.pose
        crashed = res.crashed
        scan = res.scan
    assert scan.min_distance() < params.collision_radius
    # one step earlier the min beam must have been above the radius
    assert scan.min_distance() + params.speed * params.dt >= params.collision_radius


def test_step_deterministic():
    grid = make_office()
    pose = PoseMushr(15.0, 15.0, 0.4)
    a = mushr_step(pose, 0.12, grid)
    b = mushr_step(pose, 0.12, grid)
    assert a.pose == b.pose
    np.testing.assert_array_equal(a.scan.points, b.scan.points)


def test_office_map_valid_and_connected():
    grid = make_office()
    w_m, h_m = grid.extent
    assert (w_m, h_m) == (30.0, 70.0)
    grid.validate_closed()
    assert free_space_connected(grid)


def test_map_roundtrip(tmp_path):
    grid = make_office()
    path = tmp_path / "office.pgm"
    save_map(grid, path)
    loaded = load_map(path)
    np.testing.assert_array_equal(loaded.occupied, grid.occupied)
    assert loaded.resolution == grid.resolution
    assert loaded.origin == grid.origin


def test_open_border_rejected(tmp_path):
    res = 0.1
    occ = np.zeros((50, 50), dtype=bool)  # all free: no border walls
    grid = OccupancyGrid(occ, res)
    path = tmp_path / "open.pgm"
    save_map(grid, path)
    with pytest.raises(MapError, match="border"):
        load_map(path)


def test_bad_header_rejected(tmp_path):
    path = tmp_path / "bad.pgm"
    path.write_bytes(b"P2\n4 4\n255\n" + b"0" * 16)
    path.with_suffix(".json").write_text('{"resolution": 0.1, "origin_x": 0, "origin_y": 0}')
    with pytest.raises(MapError):
        load_map(path)


def test_geodesic_field_guides_around_walls():
    grid = make_office()
    field = geodesic_field(grid, (15.0, 60.0))
    # farther down the hallway means larger geodesic distance
    d_near = field.distance(15.0, 50.0)
    d_far = field.distance(15.0, 10.0)
    assert d_far > d_near > 0

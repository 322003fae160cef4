"""Binary occupancy grids: PGM+JSON persistence and a shipped office map.

Grid convention: `occupied[row, col]` with row indexing y and col
indexing x; the world position of cell (row, col)'s lower-left corner is
(origin_x + col * resolution, origin_y + row * resolution). Maps are
closed worlds: every border cell must be occupied.

File format: 8-bit binary PGM where pixel < 128 means occupied (0 is a
wall, 255 free), row 0 of the image being the top (highest y), plus a
JSON sidecar {"resolution": m, "origin_x": m, "origin_y": m}.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from scipy import ndimage


class MapError(ValueError):
    pass


class OccupancyGrid:
    def __init__(self, occupied: np.ndarray, resolution: float, origin=(0.0, 0.0)):
        occ = np.asarray(occupied, dtype=bool)
        if occ.ndim != 2:
            raise MapError(f"occupancy array must be 2-D, got {occ.shape}")
        if resolution <= 0:
            raise MapError("resolution must be positive")
        self.occupied = occ
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self._clearance: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.occupied.shape[0]

    @property
    def width(self) -> int:
        return self.occupied.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        return self.width * self.resolution, self.height * self.resolution

    def validate_closed(self) -> None:
        occ = self.occupied
        if not (occ[0].all() and occ[-1].all() and occ[:, 0].all() and occ[:, -1].all()):
            raise MapError("grid border is not fully occupied (open world)")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        col = int(np.floor((x - self.origin[0]) / self.resolution))
        row = int(np.floor((y - self.origin[1]) / self.resolution))
        return row, col

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def is_occupied_world(self, x: float, y: float) -> bool:
        """Out-of-bounds positions count as occupied."""
        row, col = self.cell_of(x, y)
        if not self.in_bounds(row, col):
            return True
        return bool(self.occupied[row, col])

    def is_occupied_world_batch(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        cols = np.floor((xs - self.origin[0]) / self.resolution).astype(np.int64)
        rows = np.floor((ys - self.origin[1]) / self.resolution).astype(np.int64)
        inside = (rows >= 0) & (rows < self.height) & (cols >= 0) & (cols < self.width)
        out = np.ones(np.shape(xs), dtype=bool)
        r = rows[inside]
        c = cols[inside]
        out[inside] = self.occupied[r, c]
        return out

    def clearance_world(self, xs, ys) -> np.ndarray:
        """Distance (m) from points to the nearest occupied cell center."""
        if self._clearance is None:
            free_dist = ndimage.distance_transform_edt(~self.occupied)
            self._clearance = free_dist * self.resolution
        cols = np.clip(
            np.floor((np.asarray(xs) - self.origin[0]) / self.resolution).astype(int),
            0,
            self.width - 1,
        )
        rows = np.clip(
            np.floor((np.asarray(ys) - self.origin[1]) / self.resolution).astype(int),
            0,
            self.height - 1,
        )
        return self._clearance[rows, cols]


def save_map(grid: OccupancyGrid, pgm_path) -> None:
    pgm_path = Path(pgm_path)
    img = np.where(grid.occupied, 0, 255).astype(np.uint8)
    img = img[::-1]  # row 0 of a PGM is the top of the map
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{grid.width} {grid.height}\n255\n".encode())
        fh.write(img.tobytes())
    meta = {
        "resolution": grid.resolution,
        "origin_x": grid.origin[0],
        "origin_y": grid.origin[1],
    }
    pgm_path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True))


def _read_pgm(data: bytes) -> np.ndarray:
    # header: magic, width, height, maxval; whitespace/comment separated
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", data[pos:])
        if m is None:
            raise MapError("truncated PGM header")
        tok = m.group(1)
        pos += m.end()
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != b"P5":
        raise MapError(f"unsupported PGM magic {tokens[0]!r} (need binary P5)")
    width, height, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise MapError(f"PGM maxval must be 255, got {maxval}")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos + 1)
    if pixels.size != width * height:
        raise MapError("PGM pixel data truncated")
    return pixels.reshape(height, width)


def load_map(pgm_path, meta_path=None) -> OccupancyGrid:
    """Load and validate a PGM+JSON map; the border must be closed."""
    pgm_path = Path(pgm_path)
    img = _read_pgm(pgm_path.read_bytes())
    meta_path = Path(meta_path) if meta_path else pgm_path.with_suffix(".json")
    try:
        meta = json.loads(meta_path.read_text())
        resolution = float(meta["resolution"])
        origin = (float(meta["origin_x"]), float(meta["origin_y"]))
    except (OSError, KeyError, ValueError, TypeError) as e:
        raise MapError(f"bad map metadata {meta_path}: {e}")
    grid = OccupancyGrid(img[::-1] < 128, resolution, origin)
    grid.validate_closed()
    return grid


def from_bytes(pgm_bytes: bytes, meta: dict) -> OccupancyGrid:
    img = _read_pgm(pgm_bytes)
    grid = OccupancyGrid(
        img[::-1] < 128,
        float(meta["resolution"]),
        (float(meta["origin_x"]), float(meta["origin_y"])),
    )
    grid.validate_closed()
    return grid


def make_office(resolution: float = 0.1) -> OccupancyGrid:
    """Deterministic corridors-and-rooms layout, about 30 x 70 m.

    One long hallway up the middle, three cross hallways, and side rooms
    with door gaps; all free space is connected.
    """
    w_m, h_m = 30.0, 70.0
    w = int(round(w_m / resolution))
    h = int(round(h_m / resolution))
    occ = np.zeros((h, w), dtype=bool)

    def fill(x0, y0, x1, y1, value=True):
        c0, c1 = int(round(x0 / resolution)), int(round(x1 / resolution))
        r0, r1 = int(round(y0 / resolution)), int(round(y1 / resolution))
        occ[max(r0, 0) : min(r1, h), max(c0, 0) : min(c1, w)] = value

    wall = 0.3
    fill(0, 0, w_m, h_m, True)                      # solid block
    fill(wall, wall, w_m - wall, h_m - wall, False)  # carve interior

    # interior walls between rooms and hallways
    main_x = (12.5, 17.5)                            # vertical hallway
    cross_y = [(9.0, 13.0), (33.0, 37.0), (57.0, 61.0)]
    # side wall columns bounding the main hallway
    fill(main_x[0] - wall, wall, main_x[0], h_m - wall, True)
    fill(main_x[1], wall, main_x[1] + wall, h_m - wall, True)
    # horizontal walls bounding cross hallways
    for y0, y1 in cross_y:
        fill(wall, y0 - wall, w_m - wall, y0, True)
        fill(wall, y1, w_m - wall, y1 + wall, True)
        # reopen the hallway band itself
        fill(main_x[0], y0 - wall, main_x[1], y1 + wall, False)
        fill(wall, y0, w_m - wall, y1, False)

    # room partition walls + doors to the nearest cross hallway
    for x0, x1 in ((wall, main_x[0]), (main_x[1] + wall, w_m - wall)):
        ylines = [20.0, 46.0]
        for y in ylines:
            fill(x0, y, x1, y + wall, True)
        # door gaps from each room block onto the main hallway wall;
        # wider than the car's full turning circle (1.7 m)
        door_ys = [4.5, 15.5, 25.5, 39.5, 49.5, 63.5]
        for dy in door_ys:
            if x1 == main_x[0]:
                fill(main_x[0] - wall, dy, main_x[0], dy + 2.6, False)
            else:
                fill(main_x[1], dy, main_x[1] + wall, dy + 2.6, False)

    grid = OccupancyGrid(occ, resolution)
    grid.validate_closed()
    return grid


def free_space_connected(grid: OccupancyGrid) -> bool:
    free = ~grid.occupied
    labels, n = ndimage.label(free)
    return n <= 1


def geodesic_field(grid: OccupancyGrid, goal_xy, inflate: float = 0.45) -> "GeodesicField":
    return GeodesicField(grid, goal_xy, inflate)


class GeodesicField:
    """Distance-to-goal (m) through free space at full grid resolution.

    Minimum-cost path over cells whose clearance exceeds `inflate`
    (treating the vehicle footprint as an obstacle inflation), then
    relaxed outward into the inflated band so queries near walls still
    see a finite, wall-increasing gradient.
    """

    def __init__(self, grid: OccupancyGrid, goal_xy, inflate: float = 0.45):
        from skimage.graph import MCP_Geometric

        self.grid = grid
        res = grid.resolution
        grid.clearance_world(0.0, 0.0)  # force the clearance cache
        free = grid._clearance > inflate
        gr, gc = grid.cell_of(goal_xy[0], goal_xy[1])
        if not grid.in_bounds(gr, gc) or not free[gr, gc]:
            raise MapError("goal is not in inflated free space")
        costs = np.where(free, 1.0, np.inf)
        mcp = MCP_Geometric(costs)
        cum, _ = mcp.find_costs([(gr, gc)])
        dist = cum * res
        # fill the inflated band from its free neighbors (plus one step)
        # so the field keeps rising toward walls instead of jumping to inf
        n_fill = int(np.ceil(inflate / res)) + 1
        for _ in range(n_fill):
            padded = np.full((dist.shape[0] + 2, dist.shape[1] + 2), np.inf)
            padded[1:-1, 1:-1] = dist
            neighbor_min = np.minimum.reduce(
                [
                    padded[:-2, 1:-1],
                    padded[2:, 1:-1],
                    padded[1:-1, :-2],
                    padded[1:-1, 2:],
                ]
            )
            fillable = np.isinf(dist) & np.isfinite(neighbor_min)
            dist[fillable] = neighbor_min[fillable] + res
        self._dist = dist

    def distance(self, xs, ys) -> np.ndarray:
        """Geodesic distance for points; inf when unreachable."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        g = self.grid
        rows = np.clip(
            np.floor((ys - g.origin[1]) / g.resolution).astype(int), 0, g.height - 1
        )
        cols = np.clip(
            np.floor((xs - g.origin[0]) / g.resolution).astype(int), 0, g.width - 1
        )
        return self._dist[rows, cols]

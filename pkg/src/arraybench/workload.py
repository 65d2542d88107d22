"""Scientific image benchmark workload: generation, cooking, grouping, Q1-Q9.

The workload simulates a telescope pipeline over a catalog of stored arrays:

* ``images``       dense 3-D (img_id, x, y), 11 int64 attributes, local coords
* ``image_origin`` dense 1-D (img_id) -> global origin of each image
* ``obs``          sparse 3-D (img_id, x, y) -> obs_id, local coords
* ``obs_center``   sparse 3-D (img_id, x, y) -> obs_id + per-attribute
                   averages o1..o11, global coords
* ``group_center`` sparse 3-D (cycle, x, y) -> group_id, one chunk per cycle
* ``group_center_img`` sparse 4-D (cycle, img_id, x, y) -> group_id,
                   one chunk per image

Cooking extracts observations: 8-connected components of cells whose v1
clears a threshold, labeled by the minimum global cell id (iterated min-id
propagation per chunk, cross-chunk components merged through the aggregate
engine). Grouping clusters observation centers across the images of a
cycle, with an attachment radius that widens linearly with the time gap.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .algebra import (
    AggregateFn,
    Array,
    BitPattern,
    NeighborhoodShape,
    Predicate,
    apply_plus,
    filter as filter_op,
    rebox,
    rebox_stored,
    reduce as reduce_op,
    shift,
)
from .errors import ConfigError, DependencyError, EngineError, CatalogError
from .gla import GLA, AggregationTree, run_gla_chunks
from .model import (
    INT64_MAX,
    ArraySchema,
    AttributeSpec,
    Box,
    DimensionSpec,
    KIND_FLOAT64,
    KIND_INT64,
    box_intersect,
    make_dense_chunk,
    make_sparse_chunk,
)
from .storage import Catalog

N_VALUES = 11  # attributes v1..v11 per raw cell


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    """All knobs of the benchmark: scale, cooking, grouping, query params."""

    n_images: int = 8
    cycle_size: int = 4
    grid_extent: int = 1000
    domain_extent: int = 100_000
    chunk_side: int = 250
    n_workers: int = 4
    seed: int = 42

    cook_threshold: int = 900          # T: cooking predicate is v1 >= T
    obs_max_bbox: int = 60             # max bounding-box side of an observation
    obs_max_poly_edges: int = 256      # max boundary polygon edge count
    group_radius: float = 20.0         # rho
    group_time_weight: float = 0.1     # alpha

    # Query parameters (slabs are inclusive ranges [lo : lo+extent]).
    x1: int = 100                      # Q1/Q3 slab corner, local coords
    y1: int = 100
    t1: int = 300                      # Q1 slab extents
    u1: int = 300
    x2: int = 0                        # Q2 slab corner, local coords
    y2: int = 0
    t2: int = 500                      # Q2/Q4 slab extents
    u2: int = 500
    t3: int = 200                      # Q3 slab extents
    u3: int = 200
    d4: int = 50                       # Q6 tile side
    d5: int = 2                        # Q6 density threshold
    d6: int = 10                       # Q8/Q9 tile radius
    vi_index: int = 1                  # which vi Q1/Q3 aggregate
    oi_index: int = 1                  # which averaged attribute Q4 uses

    def __post_init__(self):
        if self.n_images <= 0 or self.cycle_size <= 0:
            raise ConfigError("n_images and cycle_size must be positive")
        if self.n_images % self.cycle_size:
            raise ConfigError("n_images must be divisible by cycle_size")
        if self.grid_extent <= 0 or self.domain_extent <= 0 \
                or self.chunk_side <= 0:
            raise ConfigError("extents must be positive")
        if self.grid_extent % self.chunk_side:
            raise ConfigError("grid_extent must be divisible by chunk_side")
        if self.grid_extent > self.domain_extent:
            raise ConfigError("grid larger than domain")
        if not (1 <= self.vi_index <= N_VALUES):
            raise ConfigError("vi_index out of range")
        if not (1 <= self.oi_index <= N_VALUES):
            raise ConfigError("oi_index out of range")

    @property
    def n_cycles(self) -> int:
        return self.n_images // self.cycle_size

    @property
    def tiles_per_image(self) -> int:
        return (self.grid_extent // self.chunk_side) ** 2

    def cycle_images(self, cycle: int):
        return range(cycle * self.cycle_size, (cycle + 1) * self.cycle_size)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "BenchConfig":
        base = cls()
        kwargs = {}
        for key, raw in mapping.items():
            if not hasattr(base, key):
                raise ConfigError(f"unknown config key {key!r}")
            cur = getattr(base, key)
            kwargs[key] = type(cur)(raw)
        return cls(**kwargs)


def desk_config(**overrides) -> BenchConfig:
    """The small-scale default configuration."""
    return replace(BenchConfig(), **overrides) if overrides else BenchConfig()


# ---------------------------------------------------------------------------
# Derived-data records
# ---------------------------------------------------------------------------


@dataclass
class Observation:
    """One cooked observation: an 8-connected cell group above threshold."""

    obs_id: int
    img_id: int
    cells_x: np.ndarray   # local coordinates
    cells_y: np.ndarray
    center: tuple         # (float x, float y), local coordinates
    bbox: Box
    polygon: list         # boundary vertices, deterministic orientation
    attrs: dict           # "o1".."o11" -> float average over member cells

    @property
    def size(self) -> int:
        return len(self.cells_x)


@dataclass
class ObservationGroup:
    """A cluster of observation centers across the images of one cycle."""

    group_id: int
    cycle: int
    members: list = field(default_factory=list)     # obs ids, in attach order
    per_img_centers: dict = field(default_factory=dict)  # img -> (x, y) global
    center: tuple = (0.0, 0.0)                       # global centroid

    @property
    def bbox(self) -> Box:
        xs = [c[0] for c in self.per_img_centers.values()]
        ys = [c[1] for c in self.per_img_centers.values()]
        return Box((int(min(xs)), int(min(ys))),
                   (int(max(xs)), int(max(ys))))


@dataclass
class QueryStats:
    chunks_read: int = 0
    bytes_read: int = 0
    candidates: int = 0   # exhaustive box-intersection chunk count


# ---------------------------------------------------------------------------
# Boundary polygon extraction
# ---------------------------------------------------------------------------


def boundary_polygon(cells_x, cells_y) -> list:
    """Outer boundary of a cell set as an axis-aligned vertex ring.

    Each cell (i, j) occupies the unit square [i, i+1] x [j, j+1]; boundary
    edges are oriented with the interior on the left and chained from the
    lexicographically smallest vertex; collinear runs are merged.
    """
    cells = set(zip(cells_x.tolist(), cells_y.tolist()))
    edges = {}
    for (i, j) in cells:
        if (i, j - 1) not in cells:
            edges.setdefault((i, j), []).append((i + 1, j))
        if (i + 1, j) not in cells:
            edges.setdefault((i + 1, j), []).append((i + 1, j + 1))
        if (i, j + 1) not in cells:
            edges.setdefault((i + 1, j + 1), []).append((i, j + 1))
        if (i - 1, j) not in cells:
            edges.setdefault((i, j + 1), []).append((i, j))
    start = min(edges)
    poly = [start]
    cur = start
    prev_dir = None
    while True:
        outs = edges[cur]
        if len(outs) == 1 or prev_dir is None:
            nxt = min(outs)
        else:
            # Pinch vertex (diagonal contact): take the sharpest left turn
            # so the walk hugs the current ring.
            def angle(o):
                d = (o[0] - cur[0], o[1] - cur[1])
                cross = prev_dir[0] * d[1] - prev_dir[1] * d[0]
                dot = prev_dir[0] * d[0] + prev_dir[1] * d[1]
                return -math.atan2(cross, dot)
            nxt = min(outs, key=angle)
        outs.remove(nxt)
        prev_dir = (nxt[0] - cur[0], nxt[1] - cur[1])
        cur = nxt
        if cur == start:
            break
        poly.append(cur)
    merged = []
    m = len(poly)
    for k in range(m):
        a, b, c = poly[k - 1], poly[k], poly[(k + 1) % m]
        if (b[0] - a[0]) * (c[1] - b[1]) != (b[1] - a[1]) * (c[0] - b[0]):
            merged.append(b)
    return merged


# ---------------------------------------------------------------------------
# Cooking: per-chunk min-id labeling merged through the aggregate engine
# ---------------------------------------------------------------------------


class CookGLA(GLA):
    """Connected-component labeling of one image's chunks.

    Per chunk: mask cells with v1 >= threshold, assign each its global cell
    id, and iterate 8-neighbor min-id propagation to a fixpoint. The state
    carries one component record per chunk-local label; components split
    across chunks are unified in terminate by joining records with
    8-adjacent cells, so the final label is the component's minimum id.
    """

    def __init__(self, img_id: int, threshold: int, grid_extent: int,
                 max_bbox: int, max_poly_edges: int):
        self.img_id = img_id
        self.threshold = threshold
        self.grid = grid_extent
        self.max_bbox = max_bbox
        self.max_poly_edges = max_poly_edges

    def init(self):
        return {}

    def accumulate(self, state, cells):
        chunk = cells.chunk
        ext = chunk.box.extents
        nx, ny = ext[1], ext[2]
        v1 = chunk.columns["v1"].reshape(ext)[0]
        mask = chunk.validity.reshape(ext)[0] & (v1 >= self.threshold)
        if not mask.any():
            return
        x0, y0 = chunk.box.lo[1], chunk.box.lo[2]
        g = self.grid
        xs = np.arange(x0, x0 + nx, dtype=np.int64)
        ys = np.arange(y0, y0 + ny, dtype=np.int64)
        ids = self.img_id * g * g + xs[:, None] * g + ys[None, :]
        lab = np.where(mask, ids, INT64_MAX)
        guard = nx * ny + 1
        for _ in range(guard):
            padded = np.pad(lab, 1, constant_values=INT64_MAX)
            best = lab.copy()
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    if dx == 0 and dy == 0:
                        continue
                    np.minimum(best, padded[1 + dx:1 + dx + nx,
                                            1 + dy:1 + dy + ny], out=best)
            best = np.where(mask, best, INT64_MAX)
            if np.array_equal(best, lab):
                break
            lab = best
        else:  # pragma: no cover - propagation always converges
            raise EngineError("min-id propagation did not converge")
        grids = {k: chunk.columns[f"v{k}"].reshape(ext)[0]
                 for k in range(1, N_VALUES + 1)}
        for label in np.unique(lab[mask]):
            sel = lab == label
            xi, yi = np.nonzero(sel)
            state[int(label)] = {
                "x": xi + x0,
                "y": yi + y0,
                "vals": {k: grids[k][sel] for k in grids},
            }

    def local_merge(self, a, b):
        a.update(b)
        return a

    def terminate(self, state):
        if not state:
            return []
        # Union components whose cells are 8-adjacent across chunk borders.
        cellmap = {}
        for label, comp in state.items():
            for x, y in zip(comp["x"].tolist(), comp["y"].tolist()):
                cellmap[(x, y)] = label
        parent = {label: label for label in state}

        def find(l):
            while parent[l] != l:
                parent[l] = parent[parent[l]]
                l = parent[l]
            return l

        for (x, y), label in cellmap.items():
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    other = cellmap.get((x + dx, y + dy))
                    if other is not None and other != label:
                        ra, rb = find(label), find(other)
                        if ra != rb:
                            # Root at the smaller label: the final label is
                            # the component-wide minimum cell id.
                            if ra < rb:
                                parent[rb] = ra
                            else:
                                parent[ra] = rb
        merged = {}
        for label in state:
            merged.setdefault(find(label), []).append(label)

        observations = []
        for root in sorted(merged):
            comps = [state[l] for l in merged[root]]
            xs = np.concatenate([c["x"] for c in comps])
            ys = np.concatenate([c["y"] for c in comps])
            bbox = Box((int(xs.min()), int(ys.min())),
                       (int(xs.max()), int(ys.max())))
            if max(bbox.extents) > self.max_bbox:
                continue
            polygon = boundary_polygon(xs, ys)
            if len(polygon) > self.max_poly_edges:
                continue
            attrs = {}
            for k in range(1, N_VALUES + 1):
                vals = np.concatenate([c["vals"][k] for c in comps])
                attrs[f"o{k}"] = float(vals.mean())
            observations.append(Observation(
                obs_id=root, img_id=self.img_id, cells_x=xs, cells_y=ys,
                center=(float(xs.mean()), float(ys.mean())),
                bbox=bbox, polygon=polygon, attrs=attrs))
        observations.sort(key=lambda o: o.obs_id)
        return observations


# ---------------------------------------------------------------------------
# Grouping
# ---------------------------------------------------------------------------


class _GridIndex:
    """Uniform x-y grid over group centers; cell side = the maximum
    attachment radius, so candidates always sit in the 3x3 cell block."""

    def __init__(self, side: float):
        self.side = max(side, 1e-9)
        self.cells = {}

    def _key(self, center):
        return (int(center[0] // self.side), int(center[1] // self.side))

    def insert(self, group, center):
        self.cells.setdefault(self._key(center), []).append((group, center))

    def candidates(self, center):
        cx, cy = self._key(center)
        out = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                out.extend(self.cells.get((cx + dx, cy + dy), ()))
        return out


def group_cycle(cycle: int, centers_by_img: dict, rho: float, alpha: float,
                cycle_size: int) -> list:
    """Cluster one cycle's observation centers into groups.

    ``centers_by_img`` maps img_id -> list of (obs_id, (x, y)) in ascending
    obs_id. Images are swept in time order; every observation of the first
    image seeds a group; later observations attach to the nearest group
    whose latest per-image center lies within rho * (1 + alpha * dt) of
    them (dt = image gap), using only state from earlier images; the rest
    seed new groups. Group ids are the seeding observation's id.
    """
    groups = []
    latest = {}  # group_id -> (img, center)
    side = rho * (1 + alpha * cycle_size)
    for t in sorted(centers_by_img):
        index = _GridIndex(side)
        by_id = {}
        for grp in groups:
            by_id[grp.group_id] = grp
            index.insert(grp, latest[grp.group_id][1])
        attached = {}
        seeded = []
        for obs_id, center in centers_by_img[t]:
            best = None
            for grp, gcenter in index.candidates(center):
                t_prev = latest[grp.group_id][0]
                allowed = rho * (1 + alpha * (t - t_prev))
                d = math.hypot(center[0] - gcenter[0], center[1] - gcenter[1])
                if d <= allowed and (best is None or d < best[0] or
                                     (d == best[0] and
                                      grp.group_id < best[1].group_id)):
                    best = (d, grp)
            if best is None:
                grp = ObservationGroup(group_id=obs_id, cycle=cycle)
                grp.members.append(obs_id)
                seeded.append((grp, center))
            else:
                grp = best[1]
                grp.members.append(obs_id)
                attached.setdefault(grp.group_id, []).append(center)
        for gid, centers in attached.items():
            c = (sum(p[0] for p in centers) / len(centers),
                 sum(p[1] for p in centers) / len(centers))
            by_id[gid].per_img_centers[t] = c
            latest[gid] = (t, c)
        for grp, center in seeded:
            grp.per_img_centers[t] = center
            latest[grp.group_id] = (t, center)
            groups.append(grp)
    for grp in groups:
        cs = list(grp.per_img_centers.values())
        grp.center = (sum(c[0] for c in cs) / len(cs),
                      sum(c[1] for c in cs) / len(cs))
    return groups


# ---------------------------------------------------------------------------
# The workload driver
# ---------------------------------------------------------------------------


_V_ATTRS = tuple(AttributeSpec(f"v{k}", KIND_INT64)
                 for k in range(1, N_VALUES + 1))
_O_ATTRS = tuple(AttributeSpec(f"o{k}", KIND_FLOAT64)
                 for k in range(1, N_VALUES + 1))


class Workload:
    """Benchmark driver bound to one catalog directory and configuration."""

    def __init__(self, config: BenchConfig, data_dir):
        self.config = config
        self.catalog = Catalog(data_dir, n_workers=config.n_workers,
                               seed=config.seed)
        try:
            self.catalog.load()
        except (OSError, CatalogError):
            pass
        self.observations = {}   # img_id -> [Observation]
        self.groups = {}         # cycle -> [ObservationGroup]
        self.obs_to_group = {}   # obs_id -> group_id

    # -- schemas ----------------------------------------------------------

    def images_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("images", (
            DimensionSpec("img_id", 0, c.n_images - 1),
            DimensionSpec("x", 0, c.grid_extent - 1),
            DimensionSpec("y", 0, c.grid_extent - 1)), _V_ATTRS, "dense")

    def image_origin_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("image_origin", (
            DimensionSpec("img_id", 0, c.n_images - 1),),
            (AttributeSpec("orig_x", KIND_INT64),
             AttributeSpec("orig_y", KIND_INT64)), "dense")

    def obs_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("obs", (
            DimensionSpec("img_id", 0, c.n_images - 1),
            DimensionSpec("x", 0, c.grid_extent - 1),
            DimensionSpec("y", 0, c.grid_extent - 1)),
            (AttributeSpec("obs_id", KIND_INT64),), "sparse")

    def obs_center_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("obs_center", (
            DimensionSpec("img_id", 0, c.n_images - 1),
            DimensionSpec("x", 0, c.domain_extent - 1),
            DimensionSpec("y", 0, c.domain_extent - 1)),
            (AttributeSpec("obs_id", KIND_INT64),) + _O_ATTRS, "sparse")

    def group_center_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("group_center", (
            DimensionSpec("cycle", 0, c.n_cycles - 1),
            DimensionSpec("x", 0, c.domain_extent - 1),
            DimensionSpec("y", 0, c.domain_extent - 1)),
            (AttributeSpec("group_id", KIND_INT64),), "sparse")

    def group_center_img_schema(self) -> ArraySchema:
        c = self.config
        return ArraySchema("group_center_img", (
            DimensionSpec("cycle", 0, c.n_cycles - 1),
            DimensionSpec("img_id", 0, c.n_images - 1),
            DimensionSpec("x", 0, c.domain_extent - 1),
            DimensionSpec("y", 0, c.domain_extent - 1)),
            (AttributeSpec("group_id", KIND_INT64),), "sparse")

    def _require(self, array: str, phase: str):
        try:
            return self.catalog.entry(array)
        except CatalogError:
            raise DependencyError(
                f"array {array!r} missing; run the {phase!r} phase first") \
                from None

    # -- generation -------------------------------------------------------

    def generate(self):
        """Create the raw image and origin arrays, deterministically."""
        c = self.config
        g = c.grid_extent
        rng = np.random.default_rng(c.seed)
        for name in ("images", "image_origin"):
            try:
                self.catalog.drop_array(name)
            except CatalogError:
                pass
        images = self.catalog.create_array(self.images_schema())
        self.catalog.create_array(self.image_origin_schema())

        # Image origins: truncated 2-D normal about the domain center.
        mean, sigma = c.domain_extent / 2, c.domain_extent / 8
        origins = []
        for _ in range(c.n_images):
            while True:
                ox, oy = rng.normal(mean, sigma, 2)
                if 0 <= ox <= c.domain_extent - g and \
                        0 <= oy <= c.domain_extent - g:
                    origins.append((int(ox), int(oy)))
                    break

        # Blob plan: per cycle a seeded set of elliptical bright spots whose
        # centers persist across the cycle with a small per-image jitter
        # (so grouping has trajectories to find).
        t = c.cook_threshold
        plans = []
        for _ in range(c.n_cycles):
            n_blobs = int(rng.integers(4, 8))
            margin = 16
            centers = rng.integers(margin, g - margin, (n_blobs, 2))
            radii = rng.integers(4, 13, (n_blobs, 2))
            jitter = rng.integers(-3, 4, (c.cycle_size, n_blobs, 2))
            plans.append((centers, radii, jitter))

        schema = self.images_schema()
        for img in range(c.n_images):
            cycle = img // c.cycle_size
            centers, radii, jitter = plans[cycle]
            data = rng.integers(0, t // 2 + 1, (N_VALUES, g, g),
                                dtype=np.int64)
            for b in range(len(centers)):
                bx = int(centers[b, 0] + jitter[img % c.cycle_size, b, 0])
                by = int(centers[b, 1] + jitter[img % c.cycle_size, b, 1])
                rx, ry = int(radii[b, 0]), int(radii[b, 1])
                x_lo, x_hi = max(0, bx - rx), min(g - 1, bx + rx)
                y_lo, y_hi = max(0, by - ry), min(g - 1, by + ry)
                xs = np.arange(x_lo, x_hi + 1)
                ys = np.arange(y_lo, y_hi + 1)
                ell = ((xs[:, None] - bx) / rx) ** 2 + \
                      ((ys[None, :] - by) / ry) ** 2 <= 1.0
                n_in = int(ell.sum())
                vals = rng.integers(t, 4 * t + 1, (N_VALUES, n_in),
                                    dtype=np.int64)
                for k in range(N_VALUES):
                    block = data[k, x_lo:x_hi + 1, y_lo:y_hi + 1]
                    block[ell] = vals[k]
            chunks = []
            for x0 in range(0, g, c.chunk_side):
                for y0 in range(0, g, c.chunk_side):
                    box = Box((img, x0, y0),
                              (img, x0 + c.chunk_side - 1,
                               y0 + c.chunk_side - 1))
                    values = {
                        f"v{k}": data[k - 1, x0:x0 + c.chunk_side,
                                      y0:y0 + c.chunk_side].ravel()
                        for k in range(1, N_VALUES + 1)}
                    validity = np.ones(box.volume, dtype=bool)
                    chunks.append(make_dense_chunk(schema, box, values,
                                                   validity))
            self.catalog.add_chunks("images", chunks)
            del data

        origin_chunk = make_dense_chunk(
            self.image_origin_schema(),
            Box((0,), (c.n_images - 1,)),
            {"orig_x": np.array([o[0] for o in origins], dtype=np.int64),
             "orig_y": np.array([o[1] for o in origins], dtype=np.int64)},
            np.ones(c.n_images, dtype=bool))
        self.catalog.add_chunks("image_origin", [origin_chunk])
        self.catalog.save()
        assert len(images.chunk_index) == c.n_images * c.tiles_per_image

    def image_origins(self) -> list:
        entry = self._require("image_origin", "load")
        chunk = self.catalog.read("image_origin", 0)
        return list(zip(chunk.columns["orig_x"].tolist(),
                        chunk.columns["orig_y"].tolist()))

    def _image_chunk_ids(self, img: int) -> list:
        entry = self._require("images", "load")
        lo = img * self.config.tiles_per_image
        return list(range(lo, lo + self.config.tiles_per_image))

    # -- cooking ----------------------------------------------------------

    def _run_cook(self, chunks, img: int, threshold: int) -> list:
        """Run the labeling aggregate over already-loaded image chunks."""
        c = self.config
        gla = CookGLA(img, threshold, c.grid_extent, c.obs_max_bbox,
                      c.obs_max_poly_edges)
        nw = max(1, c.n_workers)
        by_worker = {}
        for i, ch in enumerate(chunks):
            by_worker.setdefault(i % nw, []).append(ch)
        if not by_worker:
            return []
        # Rotate the aggregation root across workers per image.
        tree = AggregationTree.star(nw, root=img % nw)
        run = run_gla_chunks(self.images_schema(), by_worker, gla, tree,
                             threads_per_worker=1)
        return run.result

    def cook(self):
        """Extract observations from every image; persist obs/obs_center
        (one chunk of each per image)."""
        c = self.config
        self._require("images", "load")
        origins = self.image_origins()
        for name in ("obs", "obs_center"):
            try:
                self.catalog.drop_array(name)
            except CatalogError:
                pass
        self.catalog.create_array(self.obs_schema())
        self.catalog.create_array(self.obs_center_schema())
        self.observations = {}
        for img in range(c.n_images):
            chunks = [self.catalog.read("images", cid)
                      for cid in self._image_chunk_ids(img)]
            obs = self._run_cook(chunks, img, c.cook_threshold)
            self.observations[img] = obs
            self._persist_image_observations(img, obs, origins[img])
        self.catalog.save()

    def _persist_image_observations(self, img: int, obs: list, origin):
        c = self.config
        obs_schema = self.obs_schema()
        center_schema = self.obs_center_schema()
        img_box = Box((img, 0, 0),
                      (img, c.grid_extent - 1, c.grid_extent - 1))
        if obs:
            xs = np.concatenate([o.cells_x for o in obs])
            ys = np.concatenate([o.cells_y for o in obs])
            ids = np.concatenate([np.full(o.size, o.obs_id, dtype=np.int64)
                                  for o in obs])
        else:
            xs = ys = ids = np.empty(0, dtype=np.int64)
        chunk = make_sparse_chunk(
            obs_schema, img_box,
            {"img_id": np.full(len(xs), img, dtype=np.int64),
             "x": xs.astype(np.int64), "y": ys.astype(np.int64)},
            {"obs_id": ids})
        self.catalog.add_chunks("obs", [chunk])

        gx = np.array([int(round(o.center[0])) + origin[0] for o in obs],
                      dtype=np.int64)
        gy = np.array([int(round(o.center[1])) + origin[1] for o in obs],
                      dtype=np.int64)
        center_box = Box((img, 0, 0), (img, c.domain_extent - 1,
                                       c.domain_extent - 1))
        attrs = {"obs_id": np.array([o.obs_id for o in obs], dtype=np.int64)}
        for k in range(1, N_VALUES + 1):
            attrs[f"o{k}"] = np.array([o.attrs[f"o{k}"] for o in obs])
        chunk = make_sparse_chunk(
            center_schema, center_box,
            {"img_id": np.full(len(obs), img, dtype=np.int64),
             "x": gx, "y": gy}, attrs)
        self.catalog.add_chunks("obs_center", [chunk])

    def recook(self, img: int, region: Box, threshold: int) -> list:
        """Cook one image again, restricted to a 2-D region with an
        alternate threshold (the Q2 pipeline)."""
        c = self.config
        slab = Box((img, region.lo[0], region.lo[1]),
                   (img, region.hi[0], region.hi[1]))
        arr = rebox_stored(self.catalog, "images", slab)
        return self._run_cook(arr.chunks, img, threshold)

    # -- grouping ---------------------------------------------------------

    def group(self):
        """Cluster each cycle's observation centers; persist group_center
        (one chunk per cycle) and group_center_img (one chunk per image)."""
        c = self.config
        self._require("obs_center", "cook")
        for name in ("group_center", "group_center_img"):
            try:
                self.catalog.drop_array(name)
            except CatalogError:
                pass
        self.catalog.create_array(self.group_center_schema())
        self.catalog.create_array(self.group_center_img_schema())

        def run_cycle(cycle):
            centers_by_img = {}
            for img in c.cycle_images(cycle):
                chunk = self.catalog.read("obs_center", img)
                pairs = sorted(zip(
                    chunk.columns["obs_id"].tolist(),
                    zip(chunk.dim_columns["x"].tolist(),
                        chunk.dim_columns["y"].tolist())))
                centers_by_img[img] = [(oid, (float(x), float(y)))
                                       for oid, (x, y) in pairs]
            return group_cycle(cycle, centers_by_img, c.group_radius,
                               c.group_time_weight, c.cycle_size)

        # Cycles are independent: run them across the worker pool.
        with ThreadPoolExecutor(max_workers=max(1, c.n_workers)) as pool:
            results = list(pool.map(run_cycle, range(c.n_cycles)))

        self.groups = dict(enumerate(results))
        self.obs_to_group = {}
        gc_schema = self.group_center_schema()
        gci_schema = self.group_center_img_schema()
        gci_chunks = {img: ([], [], [], [])
                      for img in range(c.n_images)}
        for cycle, groups in self.groups.items():
            gx, gy, gid = [], [], []
            for grp in groups:
                for oid in grp.members:
                    self.obs_to_group[oid] = grp.group_id
                gx.append(int(round(grp.center[0])))
                gy.append(int(round(grp.center[1])))
                gid.append(grp.group_id)
                for img, (cx, cy) in grp.per_img_centers.items():
                    xs, ys, ids, _ = gci_chunks[img]
                    xs.append(int(round(cx)))
                    ys.append(int(round(cy)))
                    ids.append(grp.group_id)
            box = Box((cycle, 0, 0), (cycle, c.domain_extent - 1,
                                      c.domain_extent - 1))
            chunk = make_sparse_chunk(
                gc_schema, box,
                {"cycle": np.full(len(gid), cycle, dtype=np.int64),
                 "x": np.array(gx, dtype=np.int64),
                 "y": np.array(gy, dtype=np.int64)},
                {"group_id": np.array(gid, dtype=np.int64)})
            self.catalog.add_chunks("group_center", [chunk])
        for img in range(c.n_images):
            cycle = img // c.cycle_size
            xs, ys, ids, _ = gci_chunks[img]
            box = Box((cycle, img, 0, 0),
                      (cycle, img, c.domain_extent - 1, c.domain_extent - 1))
            chunk = make_sparse_chunk(
                gci_schema, box,
                {"cycle": np.full(len(ids), cycle, dtype=np.int64),
                 "img_id": np.full(len(ids), img, dtype=np.int64),
                 "x": np.array(xs, dtype=np.int64),
                 "y": np.array(ys, dtype=np.int64)},
                {"group_id": np.array(ids, dtype=np.int64)})
            self.catalog.add_chunks("group_center_img", [chunk])
        self.catalog.save()

    # -- measurement helper -----------------------------------------------

    def _measured(self, fn, candidates=0):
        self.catalog.io.reset()
        value = fn()
        snap = self.catalog.io.snapshot()
        return value, QueryStats(chunks_read=snap["chunks_read"],
                                 bytes_read=snap["bytes_read"],
                                 candidates=candidates)

    def _clip(self, name: str, box: Box) -> Box:
        schema = self.catalog.entry(name).schema
        inter = box_intersect(schema.box, box)
        if inter is None:
            raise ConfigError(f"query box {box} outside {name} domain")
        return inter

    # -- queries ----------------------------------------------------------

    def q1(self, cycle: int, x1=None, y1=None, t1=None, u1=None, vi=None):
        """Average of one raw attribute over a local-coordinate slab of the
        cycle's images."""
        c = self.config
        x1 = c.x1 if x1 is None else x1
        y1 = c.y1 if y1 is None else y1
        t1 = c.t1 if t1 is None else t1
        u1 = c.u1 if u1 is None else u1
        vi = c.vi_index if vi is None else vi
        self._require("images", "load")
        imgs = c.cycle_images(cycle)
        slab = self._clip("images", Box(
            (imgs[0], x1, y1), (imgs[-1], x1 + t1, y1 + u1)))
        attr = f"v{vi}"
        cand = len(self.catalog.prune("images", slab))

        def run():
            arr = rebox_stored(self.catalog, "images", slab, columns=[attr])
            return reduce_op(arr, [], AggregateFn("avg", attr, "result"),
                             n_workers=c.n_workers)
        return self._measured(run, candidates=cand)

    def q2(self, cycle: int, x2=None, y2=None, t2=None, u2=None,
           threshold=None):
        """Recook a slab of the cycle's first image with an alternate
        threshold."""
        c = self.config
        x2 = c.x2 if x2 is None else x2
        y2 = c.y2 if y2 is None else y2
        t2 = c.t2 if t2 is None else t2
        u2 = c.u2 if u2 is None else u2
        threshold = c.cook_threshold if threshold is None else threshold
        img = c.cycle_images(cycle)[0]
        g = c.grid_extent
        region = Box((max(0, x2), max(0, y2)),
                     (min(g - 1, x2 + t2), min(g - 1, y2 + u2)))
        return self._measured(lambda: self.recook(img, region, threshold))

    def q3(self, cycle: int, x1=None, y1=None, t3=None, u3=None):
        """Regrid a slab of the cycle's images 10:3 via pattern-selected
        window averaging of every raw attribute."""
        c = self.config
        x1 = c.x1 if x1 is None else x1
        y1 = c.y1 if y1 is None else y1
        t3 = c.t3 if t3 is None else t3
        u3 = c.u3 if u3 is None else u3
        self._require("images", "load")
        imgs = c.cycle_images(cycle)
        slab = self._clip("images", Box(
            (imgs[0], x1, y1), (imgs[-1], x1 + t3, y1 + u3)))

        def run():
            arr = rebox_stored(self.catalog, "images", slab)
            shape = NeighborhoodShape.of((0, 0), (0, 3), (0, 3))
            pattern = {"img_id": BitPattern("1"),
                       "x": BitPattern("1001001000"),
                       "y": BitPattern("1001001000")}
            aggs = [AggregateFn("avg", f"v{k}", f"v{k}_avg")
                    for k in range(1, N_VALUES + 1)]
            return apply_plus(arr, shape, pattern, aggs, boundary="merge",
                              n_workers=c.n_workers)
        return self._measured(run)

    def q4(self, cycle: int, gx=None, gy=None, t2=None, u2=None, oi=None):
        """Average of one cooked attribute over a global-coordinate slab of
        the cycle's observation centers."""
        c = self.config
        if gx is None:
            gx = c.domain_extent // 2 - c.domain_extent // 8
        if gy is None:
            gy = c.domain_extent // 2 - c.domain_extent // 8
        t2 = c.domain_extent // 4 if t2 is None else t2
        u2 = c.domain_extent // 4 if u2 is None else u2
        oi = c.oi_index if oi is None else oi
        self._require("obs_center", "cook")
        imgs = c.cycle_images(cycle)
        slab = self._clip("obs_center", Box(
            (imgs[0], gx, gy), (imgs[-1], gx + t2, gy + u2)))
        attr = f"o{oi}"
        cand = len(self.catalog.prune("obs_center", slab))

        def run():
            arr = rebox_stored(self.catalog, "obs_center", slab,
                               columns=[attr])
            return reduce_op(arr, [], AggregateFn("avg", attr, "result"),
                             n_workers=c.n_workers)
        return self._measured(run, candidates=cand)

    def _global_slab(self, gx, gy, w, h):
        c = self.config
        if gx is None:
            gx = c.domain_extent // 2 - c.domain_extent // 8
        if gy is None:
            gy = c.domain_extent // 2 - c.domain_extent // 8
        w = c.domain_extent // 4 if w is None else w
        h = c.domain_extent // 4 if h is None else h
        return gx, gy, w, h

    def q5(self, cycle: int, gx=None, gy=None, w=None, h=None):
        """Distinct observations with any member cell inside a global slab,
        over the cycle's images."""
        c = self.config
        gx, gy, w, h = self._global_slab(gx, gy, w, h)
        origins = self.image_origins()
        self._require("obs", "cook")
        obs_entry = self.catalog.entry("obs")
        cand = 0
        slab2d = Box((gx, gy), (gx + w, gy + h))

        def run():
            nonlocal cand
            ids = set()
            for img in c.cycle_images(cycle):
                ox, oy = origins[img]
                ref = obs_entry.ref(img)
                zx = ref.zone_meta["x"]
                zy = ref.zone_meta["y"]
                if zx[0] > zx[1]:
                    continue  # image with no observations
                gbox = Box((zx[0] + ox, zy[0] + oy), (zx[1] + ox, zy[1] + oy))
                if box_intersect(gbox, slab2d) is None:
                    continue
                cand += 1
                chunk = self.catalog.read("obs", img)
                arr = Array(self.obs_schema(), [chunk])
                arr = shift(arr, (0, ox, oy))
                sub = rebox(arr, Box((img, gx, gy), (img, gx + w, gy + h)))
                for ch in sub.chunks:
                    ids.update(ch.columns["obs_id"].tolist())
            return {"count": len(ids), "obs_ids": sorted(ids)}
        value, stats = self._measured(run)
        stats.candidates = cand
        return value, stats

    def q6(self, cycle: int, gx=None, gy=None, w=None, h=None, d4=None,
           d5=None):
        """Per image: tiles of side D4 anchored at observation centers that
        contain at least D5 centers."""
        c = self.config
        gx, gy, w, h = self._global_slab(gx, gy, w, h)
        d4 = c.d4 if d4 is None else d4
        d5 = c.d5 if d5 is None else d5
        self._require("obs_center", "cook")

        def run():
            out = {}
            for img in c.cycle_images(cycle):
                slab = self._clip("obs_center",
                                  Box((img, gx, gy), (img, gx + w, gy + h)))
                arr = rebox_stored(self.catalog, "obs_center", slab,
                                   columns=["obs_id"])
                if arr.valid_count() == 0:
                    out[img] = []
                    continue
                shape = NeighborhoodShape.of((0, 0), (0, d4 - 1), (0, d4 - 1))
                dens = apply_plus(arr, shape, "valid",
                                  AggregateFn("count", None, "density"),
                                  boundary="merge", n_workers=c.n_workers)
                dense_enough = filter_op(
                    dens, Predicate.of(ranges={"density": (d5, INT64_MAX)}))
                cells = dense_enough.cells()
                out[img] = sorted(zip(cells.coords["x"].tolist(),
                                      cells.coords["y"].tolist(),
                                      cells.columns["density"].tolist()))
            return out
        return self._measured(run)

    def q7(self, cycle: int, gx=None, gy=None, w=None, h=None):
        """Group centers of one cycle inside a global slab."""
        gx, gy, w, h = self._global_slab(gx, gy, w, h)
        self._require("group_center", "group")
        slab = self._clip("group_center",
                          Box((cycle, gx, gy), (cycle, gx + w, gy + h)))
        cand = len(self.catalog.prune("group_center", slab))

        def run():
            arr = rebox_stored(self.catalog, "group_center", slab)
            ids = set()
            for ch in arr.chunks:
                ids.update(ch.columns["group_id"].tolist())
            return sorted(ids)
        return self._measured(run, candidates=cand)

    def _group_tiles(self, cycle: int, group_ids, d6):
        """Raw D6-radius tiles around every per-image center of the given
        groups (phase 2 of Q8/Q9)."""
        c = self.config
        origins = self.image_origins()
        arr = rebox_stored(self.catalog, "group_center_img",
                           self._clip("group_center_img", Box(
                               (cycle, 0, 0, 0),
                               (cycle, c.n_images - 1, c.domain_extent - 1,
                                c.domain_extent - 1))))
        cells = arr.cells()
        tiles = []
        rows = sorted(zip(cells.columns["group_id"].tolist(),
                          cells.coords["img_id"].tolist(),
                          cells.coords["x"].tolist(),
                          cells.coords["y"].tolist()))
        wanted = set(group_ids)
        for gid, img, cx, cy in rows:
            if gid not in wanted:
                continue
            ox, oy = origins[img]
            # Tile in the image's local coordinates, clipped to the image.
            lo_x, hi_x = cx - d6 - ox, cx + d6 - ox
            lo_y, hi_y = cy - d6 - oy, cy + d6 - oy
            lbox = box_intersect(
                Box((img, lo_x, lo_y), (img, hi_x, hi_y)),
                Box((img, 0, 0), (img, c.grid_extent - 1,
                                  c.grid_extent - 1)))
            if lbox is None:
                continue
            tile = rebox_stored(self.catalog, "images", lbox)
            # Address the tile globally, like the stored centers.
            tiles.append((gid, img, shift(tile, (0, ox, oy))))
        return tiles

    def q8(self, cycle: int, gx=None, gy=None, w=None, h=None, d6=None):
        """Raw tiles around the trajectories of groups having any per-image
        center inside a global slab."""
        c = self.config
        gx, gy, w, h = self._global_slab(gx, gy, w, h)
        d6 = c.d6 if d6 is None else d6
        self._require("group_center_img", "group")

        def run():
            slab = self._clip("group_center_img", Box(
                (cycle, 0, gx, gy),
                (cycle, c.n_images - 1, gx + w, gy + h)))
            arr = rebox_stored(self.catalog, "group_center_img", slab)
            ids = set()
            for ch in arr.chunks:
                ids.update(ch.columns["group_id"].tolist())
            return self._group_tiles(cycle, ids, d6)
        return self._measured(run)

    def q9(self, cycle: int, gx=None, gy=None, w=None, h=None, d6=None):
        """Like Q8, but groups qualify when any member observation's cells
        intersect the slab."""
        c = self.config
        gx, gy, w, h = self._global_slab(gx, gy, w, h)
        d6 = c.d6 if d6 is None else d6
        self._require("group_center_img", "group")
        if not self.obs_to_group:
            raise DependencyError(
                "observation-to-group mapping missing; run the 'group' "
                "phase in this session first")

        def run():
            value, _stats = self.q5(cycle, gx, gy, w, h)
            ids = {self.obs_to_group[oid] for oid in value["obs_ids"]
                   if oid in self.obs_to_group}
            return self._group_tiles(cycle, ids, d6)
        return self._measured(run)

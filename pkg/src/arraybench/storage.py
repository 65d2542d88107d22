"""On-disk chunk format, chunking strategies, zone-map pruning, worker
placement, and the asynchronous push-based chunk scan.

One file per chunk under ``<data_dir>/<array>/<chunk_id>.chk``; each array
also has a text manifest listing its schema and chunk index. All reads go
through a byte counter so I/O claims are testable.
"""

from __future__ import annotations

import os
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CatalogError, ConfigError, FormatError, SchemaError
from .model import (
    DENSE,
    SPARSE,
    ArraySchema,
    AttributeSpec,
    Box,
    Chunk,
    DimensionSpec,
    KIND_FLOAT64,
    KIND_INT64,
    box_intersect,
    compute_zone_meta,
    make_dense_chunk,
    make_sparse_chunk,
)

MAGIC = b"AQLC"
FORMAT_VERSION = 1

_LAYOUT_CODES = {DENSE: 0, SPARSE: 1}
_LAYOUT_NAMES = {v: k for k, v in _LAYOUT_CODES.items()}
_KIND_CODES = {KIND_INT64: 0, KIND_FLOAT64: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


# ---------------------------------------------------------------------------
# Chunking strategies
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChunkingStrategy:
    """Regular (fixed per-dim shape) or irregular (target cells per chunk)."""

    kind: str  # "regular" | "irregular"
    shape: tuple | None = None
    target_cells: int | None = None

    @classmethod
    def regular(cls, shape) -> "ChunkingStrategy":
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ConfigError(f"regular chunk shape {shape} has a zero extent")
        return cls("regular", shape=shape)

    @classmethod
    def irregular(cls, target_cells: int) -> "ChunkingStrategy":
        if target_cells <= 0:
            raise ConfigError("irregular target cell count must be positive")
        return cls("irregular", target_cells=int(target_cells))


def tile_box(box: Box, shape) -> list:
    """Tile a box with regular chunks of the given shape, clipped at the
    upper edges. Tiles are ordered row-major over the tile grid."""
    if len(shape) != box.ndim:
        raise ConfigError("chunk shape dimensionality mismatch")
    grids = [range(lo, hi + 1, s) for lo, hi, s in zip(box.lo, box.hi, shape)]
    tiles = []

    def rec(d, lo_acc):
        if d == box.ndim:
            lo = tuple(lo_acc)
            hi = tuple(min(l + s - 1, h) for l, s, h in zip(lo, shape, box.hi))
            tiles.append(Box(lo, hi))
            return
        for start in grids[d]:
            rec(d + 1, lo_acc + [start])

    rec(0, [])
    return tiles


def chunk_array(schema: ArraySchema, data: dict, strategy: ChunkingStrategy,
                box: Box | None = None) -> list:
    """Partition array data into chunks.

    Dense arrays: ``data`` holds one row-major column per attribute over
    ``box`` plus a ``"__valid__"`` bitmap, and require a regular strategy.
    Sparse arrays: ``data`` holds one column per dimension and attribute.
    """
    box = box if box is not None else schema.box
    if schema.density == DENSE:
        if strategy.kind != "regular":
            raise ConfigError("dense arrays require a regular chunking strategy")
        return _chunk_dense(schema, data, strategy.shape, box)
    if strategy.kind == "regular":
        return _chunk_sparse_regular(schema, data, strategy.shape, box)
    return _chunk_sparse_irregular(schema, data, strategy.target_cells, box)


def _chunk_dense(schema, data, shape, box):
    extents = box.extents
    validity = np.asarray(data.get("__valid__", np.ones(box.volume, bool)),
                          dtype=bool).reshape(extents)
    grids = {a.name: np.asarray(data[a.name], dtype=a.dtype).reshape(extents)
             for a in schema.attrs}
    chunks = []
    for i, tile in enumerate(tile_box(box, shape)):
        sl = tuple(slice(l - bl, h - bl + 1)
                   for l, h, bl in zip(tile.lo, tile.hi, box.lo))
        values = {name: g[sl].ravel() for name, g in grids.items()}
        chunks.append(make_dense_chunk(schema, tile, values, validity[sl].ravel(),
                                       chunk_id=i))
    return chunks


def _sparse_subset(schema, data, mask):
    dims = {d.name: np.asarray(data[d.name], dtype=np.int64)[mask]
            for d in schema.dims}
    attrs = {a.name: np.asarray(data[a.name], dtype=a.dtype)[mask]
             for a in schema.attrs}
    return dims, attrs


def _bounding_box(schema, dims, fallback: Box) -> Box:
    n = len(next(iter(dims.values()))) if dims else 0
    if n == 0:
        return fallback
    lo = tuple(int(dims[d.name].min()) for d in schema.dims)
    hi = tuple(int(dims[d.name].max()) for d in schema.dims)
    return Box(lo, hi)


def _chunk_sparse_regular(schema, data, shape, box):
    coords = [np.asarray(data[d.name], dtype=np.int64) for d in schema.dims]
    n = len(coords[0])
    chunks = []
    cid = 0
    for tile in tile_box(box, shape):
        mask = np.ones(n, dtype=bool)
        for c, lo, hi in zip(coords, tile.lo, tile.hi):
            mask &= (c >= lo) & (c <= hi)
        if not mask.any():
            continue
        dims, attrs = _sparse_subset(schema, data, mask)
        chunks.append(make_sparse_chunk(schema, tile, dims, attrs, chunk_id=cid))
        cid += 1
    return chunks


def _chunk_sparse_irregular(schema, data, target, box):
    """Recursive count-balanced splits along the dimension with the widest
    cell spread until each piece holds at most ``target`` cells."""
    coords = np.stack([np.asarray(data[d.name], dtype=np.int64)
                       for d in schema.dims])
    n = coords.shape[1]
    if n == 0:
        return []
    pieces = []

    def split(idx, piece_box):
        if len(idx) <= target:
            pieces.append((idx, piece_box))
            return
        # Prefer the dimension with the widest actual coordinate spread;
        # a dimension where all cells coincide cannot be cut.
        spreads = [int(coords[d, idx].max() - coords[d, idx].min())
                   for d in range(coords.shape[0])]
        order = sorted(range(len(spreads)), key=lambda d: -spreads[d])
        for d in order:
            if spreads[d] == 0:
                break
            vals = np.sort(coords[d, idx])
            cuts = np.unique(vals)[:-1]  # cut after value c: left = coord <= c
            left_counts = np.searchsorted(vals, cuts, side="right")
            best = int(cuts[int(np.argmin(np.abs(left_counts - len(idx) / 2)))])
            lo_ranges = list(piece_box.ranges())
            hi_ranges = list(piece_box.ranges())
            lo_ranges[d] = (piece_box.lo[d], best)
            hi_ranges[d] = (best + 1, piece_box.hi[d])
            mask = coords[d, idx] <= best
            split(idx[mask], Box.of(*lo_ranges))
            split(idx[~mask], Box.of(*hi_ranges))
            return
        pieces.append((idx, piece_box))  # all cells coincide

    split(np.arange(n), box)
    chunks = []
    for cid, (idx, piece_box) in enumerate(pieces):
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        dims, attrs = _sparse_subset(schema, data, mask)
        chunks.append(make_sparse_chunk(schema, piece_box, dims, attrs, chunk_id=cid))
    return chunks


# ---------------------------------------------------------------------------
# Chunk file format
# ---------------------------------------------------------------------------

def _pack_zone(kind, zone):
    fmt = "<q" if kind == KIND_INT64 else "<d"
    return struct.pack(fmt, zone[0]) + struct.pack(fmt, zone[1])


def _unpack_zone(kind, buf, off):
    fmt = "<q" if kind == KIND_INT64 else "<d"
    lo = struct.unpack_from(fmt, buf, off)[0]
    hi = struct.unpack_from(fmt, buf, off + 8)[0]
    return (lo, hi), off + 16


def write_chunk(chunk: Chunk, schema: ArraySchema, locator) -> int:
    """Serialize one chunk to disk; returns bytes written."""
    parts = [MAGIC,
             struct.pack("<HBBH", FORMAT_VERSION, _LAYOUT_CODES[chunk.layout],
                         len(schema.dims), len(schema.attrs))]
    for lo, hi in chunk.box.ranges():
        parts.append(struct.pack("<qq", lo, hi))
    for attr in schema.attrs:
        zone = chunk.zone_meta[attr.name]
        parts.append(struct.pack("<B", _KIND_CODES[attr.kind]))
        parts.append(_pack_zone(attr.kind, zone))
    if chunk.layout == DENSE:
        bitmap = np.packbits(chunk.validity).tobytes()
        parts.append(struct.pack("<Q", len(bitmap)))
        parts.append(bitmap)
    parts.append(struct.pack("<Q", chunk.cell_count))
    blocks = []
    if chunk.layout == SPARSE:
        blocks.extend(chunk.dim_columns[d.name] for d in schema.dims)
    blocks.extend(chunk.columns[a.name] for a in schema.attrs)
    for col in blocks:
        payload = np.ascontiguousarray(col).tobytes()
        parts.append(struct.pack("<Q", len(payload)))
        parts.append(payload)
    data = b"".join(parts)
    try:
        with open(locator, "wb") as f:
            f.write(data)
    except OSError as exc:
        raise FormatError(f"cannot write chunk file {locator}: {exc}") from exc
    return len(data)


class _CountingFile:
    """File wrapper that tallies the bytes actually read."""

    def __init__(self, f):
        self._f = f
        self.bytes_read = 0

    def read(self, n):
        buf = self._f.read(n)
        self.bytes_read += len(buf)
        return buf

    def seek(self, off, whence=0):
        self._f.seek(off, whence)


def read_chunk(locator, schema: ArraySchema, columns=None, chunk_id: int = 0,
               io_stats=None) -> Chunk:
    """Read a chunk file, materializing only the requested column blocks.

    ``columns`` may name attributes and (for dense chunks) dimensions;
    suppressed dimension columns cost zero extra bytes. ``None`` reads
    everything.
    """
    if columns is not None:
        known = set(schema.dim_names) | set(schema.attr_names)
        for c in columns:
            if c not in known:
                raise SchemaError(f"unknown column {c!r} for array {schema.name}")
    try:
        raw = open(locator, "rb")
    except OSError as exc:
        raise FormatError(f"cannot open chunk file {locator}: {exc}") from exc
    with raw:
        f = _CountingFile(raw)
        chunk = _read_chunk_body(f, schema, columns, chunk_id, locator)
    if io_stats is not None:
        io_stats.add_read(f.bytes_read)
    chunk.bytes_read = f.bytes_read
    return chunk


def _read_exact(f, n, what, locator):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated chunk file {locator}: short read in {what}")
    return buf


def _read_chunk_body(f, schema, columns, chunk_id, locator):
    head = _read_exact(f, 10, "header", locator)
    if head[:4] != MAGIC:
        raise FormatError(f"bad magic in chunk file {locator}")
    version, layout_code, n_dims, n_attrs = struct.unpack_from("<HBBH", head, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version} in {locator}")
    if layout_code not in _LAYOUT_NAMES:
        raise FormatError(f"bad layout flag in {locator}")
    layout = _LAYOUT_NAMES[layout_code]
    if n_dims != len(schema.dims) or n_attrs != len(schema.attrs):
        raise FormatError(
            f"chunk file {locator} dim/attr counts do not match schema "
            f"{schema.name}")
    bounds = _read_exact(f, 16 * n_dims, "box bounds", locator)
    lo, hi = [], []
    for d in range(n_dims):
        l, h = struct.unpack_from("<qq", bounds, 16 * d)
        lo.append(l)
        hi.append(h)
    box = Box(tuple(lo), tuple(hi))
    zones = {}
    zbuf = _read_exact(f, 17 * n_attrs, "zone metadata", locator)
    off = 0
    for attr in schema.attrs:
        kind_code = zbuf[off]
        off += 1
        if _KIND_NAMES.get(kind_code) != attr.kind:
            raise FormatError(
                f"attribute {attr.name!r} kind mismatch in {locator}")
        zones[attr.name], off = _unpack_zone(attr.kind, zbuf, off)
    validity = None
    if layout == DENSE:
        (blen,) = struct.unpack(
            "<Q", _read_exact(f, 8, "bitmap length", locator))
        bitmap = _read_exact(f, blen, "validity bitmap", locator)
        validity = np.unpackbits(
            np.frombuffer(bitmap, dtype=np.uint8))[:box.volume].astype(bool)
    (count,) = struct.unpack("<Q", _read_exact(f, 8, "cell count", locator))

    if layout == SPARSE:
        stored = [(d.name, np.int64) for d in schema.dims]
    else:
        stored = []
    stored += [(a.name, a.dtype) for a in schema.attrs]

    wanted = None if columns is None else set(columns)
    if wanted is not None and layout == SPARSE:
        # Sparse cells are meaningless without their coordinates.
        wanted |= set(schema.dim_names)
    read_cols = {}
    for name, dtype in stored:
        (blen,) = struct.unpack(
            "<Q", _read_exact(f, 8, f"length of column {name!r}", locator))
        if wanted is None or name in wanted:
            payload = f.read(blen)
            if len(payload) != blen:
                raise FormatError(
                    f"truncated column {name!r} in chunk file {locator}")
            col = np.frombuffer(payload, dtype=dtype)
            if len(col) != count:
                raise FormatError(
                    f"column {name!r} in {locator} has {len(col)} cells, "
                    f"expected {count}")
            read_cols[name] = col
        else:
            f.seek(blen, os.SEEK_CUR)

    dim_columns = None
    if layout == SPARSE:
        dim_columns = {n: read_cols.pop(n) for n in schema.dim_names
                       if n in read_cols}
    attr_cols = {n: read_cols[n] for n in schema.attr_names if n in read_cols}
    meta = dict(zones)
    for i, d in enumerate(schema.dims):
        if layout == DENSE:
            meta[d.name] = (box.lo[i], box.hi[i])
        elif dim_columns and d.name in dim_columns and len(dim_columns[d.name]):
            meta[d.name] = (int(dim_columns[d.name].min()),
                            int(dim_columns[d.name].max()))
        else:
            meta[d.name] = (box.lo[i], box.hi[i])
    return Chunk(chunk_id, box, layout, attr_cols, validity=validity,
                 dim_columns=dim_columns, zone_meta=meta)


# ---------------------------------------------------------------------------
# Placement and catalog
# ---------------------------------------------------------------------------

@dataclass
class WorkerPlacement:
    """chunk_id -> worker_id assignment."""

    n_workers: int
    strategy: str = "round_robin"  # or "random"
    seed: int = 0

    def assign(self, chunk_ids) -> dict:
        if self.strategy == "round_robin":
            return {cid: cid % self.n_workers for cid in chunk_ids}
        if self.strategy == "random":
            rng = np.random.default_rng(self.seed)
            return {cid: int(rng.integers(self.n_workers)) for cid in chunk_ids}
        raise ConfigError(f"unknown placement strategy {self.strategy!r}")


@dataclass
class ChunkRef:
    chunk_id: int
    box: Box
    zone_meta: dict
    worker_id: int
    locator: str


@dataclass
class CatalogEntry:
    schema: ArraySchema
    chunk_index: list = field(default_factory=list)  # list[ChunkRef]

    def ref(self, chunk_id: int) -> ChunkRef:
        for r in self.chunk_index:
            if r.chunk_id == chunk_id:
                return r
        raise CatalogError(f"array {self.schema.name}: no chunk {chunk_id}")


class IOStats:
    """Thread-safe read accounting."""

    def __init__(self):
        self._lock = threading.Lock()
        self.bytes_read = 0
        self.chunks_read = 0

    def reset(self):
        with self._lock:
            self.bytes_read = 0
            self.chunks_read = 0

    def add_read(self, nbytes):
        with self._lock:
            self.bytes_read += nbytes
            self.chunks_read += 1

    def snapshot(self):
        with self._lock:
            return {"bytes_read": self.bytes_read, "chunks_read": self.chunks_read}


def _ranges_overlap(zone, lo, hi):
    return zone[0] <= hi and zone[1] >= lo


def prune(entry: CatalogEntry, query_box: Box | None = None,
          predicate: dict | None = None) -> list:
    """Chunk ids whose box intersects the query box and whose attribute
    zones overlap every predicate range. Purely metadata-driven."""
    if query_box is not None and query_box.ndim != len(entry.schema.dims):
        raise SchemaError("query box dimensionality does not match schema")
    out = []
    for ref in entry.chunk_index:
        if query_box is not None:
            hit = all(_ranges_overlap(ref.zone_meta[d], lo, hi)
                      for d, (lo, hi) in zip(entry.schema.dim_names,
                                             query_box.ranges()))
            if not hit:
                continue
        if predicate:
            ok = True
            for name, (lo, hi) in predicate.items():
                zone = ref.zone_meta.get(name)
                if zone is None or not _ranges_overlap(zone, lo, hi):
                    ok = False
                    break
            if not ok:
                continue
        out.append(ref.chunk_id)
    return out


class Catalog:
    """Directory-backed array catalog with chunk placement and scan."""

    def __init__(self, data_dir, n_workers: int = 1,
                 placement: str = "round_robin", seed: int = 0):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.n_workers = n_workers
        self.placement = WorkerPlacement(n_workers, placement, seed)
        self.arrays: dict[str, CatalogEntry] = {}
        self.io = IOStats()

    # -- registration -----------------------------------------------------

    def entry(self, name: str) -> CatalogEntry:
        try:
            return self.arrays[name]
        except KeyError:
            raise CatalogError(f"unknown array {name!r}") from None

    def create_array(self, schema: ArraySchema) -> CatalogEntry:
        if schema.name in self.arrays:
            raise CatalogError(f"array {schema.name!r} already exists")
        entry = CatalogEntry(schema)
        self.arrays[schema.name] = entry
        (self.data_dir / schema.name).mkdir(parents=True, exist_ok=True)
        return entry

    def drop_array(self, name: str):
        entry = self.arrays.pop(name, None)
        if entry is None:
            return
        for ref in entry.chunk_index:
            try:
                os.unlink(ref.locator)
            except OSError:
                pass
        manifest = self.data_dir / name / "manifest.txt"
        if manifest.exists():
            manifest.unlink()

    def add_chunks(self, name: str, chunks) -> list:
        """Write chunks, assign sequential ids and worker placement, and
        extend the chunk index. Returns the new ChunkRefs."""
        entry = self.entry(name)
        start = len(entry.chunk_index)
        ids = [start + i for i in range(len(chunks))]
        assignment = self.placement.assign(range(start + len(chunks)))
        refs = []
        for cid, chunk in zip(ids, chunks):
            chunk.chunk_id = cid
            locator = str(self.data_dir / name / f"{cid}.chk")
            write_chunk(chunk, entry.schema, locator)
            refs.append(ChunkRef(cid, chunk.box, dict(chunk.zone_meta),
                                 assignment[cid], locator))
        entry.chunk_index.extend(refs)
        return refs

    # -- persistence ------------------------------------------------------

    def save(self):
        for name, entry in self.arrays.items():
            self._write_manifest(name, entry)

    def _write_manifest(self, name, entry):
        lines = [f"array {name} density={entry.schema.density}"]
        for d in entry.schema.dims:
            lines.append(f"dim {d.name} {d.lo} {d.hi}")
        for a in entry.schema.attrs:
            lines.append(f"attr {a.name} {a.kind}")
        if entry.schema.origin is not None:
            lines.append("origin " + " ".join(str(v) for v in entry.schema.origin))
        order = entry.schema.dim_names + entry.schema.attr_names
        for ref in entry.chunk_index:
            boxs = ",".join(f"{l}:{h}" for l, h in ref.box.ranges())
            zones = ";".join(f"{n}={ref.zone_meta[n][0]}:{ref.zone_meta[n][1]}"
                             for n in order if n in ref.zone_meta)
            lines.append(f"chunk {ref.chunk_id} {ref.worker_id} "
                         f"{os.path.basename(ref.locator)} box={boxs} zones={zones}")
        path = self.data_dir / name / "manifest.txt"
        path.write_text("\n".join(lines) + "\n")

    def load(self):
        """Load every array manifest found under the data directory."""
        self.arrays = {}
        for manifest in sorted(self.data_dir.glob("*/manifest.txt")):
            entry = self._read_manifest(manifest)
            self.arrays[entry.schema.name] = entry

    def _read_manifest(self, path: Path):
        name = None
        density = DENSE
        dims, attrs, origin, refs = [], [], None, []
        for line in path.read_text().splitlines():
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "array":
                name = tok[1]
                density = tok[2].split("=", 1)[1]
            elif tok[0] == "dim":
                dims.append(DimensionSpec(tok[1], int(tok[2]), int(tok[3])))
            elif tok[0] == "attr":
                attrs.append(AttributeSpec(tok[1], tok[2]))
            elif tok[0] == "origin":
                origin = tuple(int(v) for v in tok[1:])
            elif tok[0] == "chunk":
                cid, worker = int(tok[1]), int(tok[2])
                locator = str(path.parent / tok[3])
                fields = dict(t.split("=", 1) for t in tok[4:])
                ranges = [tuple(int(v) for v in r.split(":"))
                          for r in fields["box"].split(",")]
                box = Box.of(*ranges)
                zones = {}
                for z in fields["zones"].split(";"):
                    if not z:
                        continue
                    zname, zrange = z.split("=", 1)
                    lo_s, hi_s = zrange.split(":")
                    conv = float if ("." in lo_s or "inf" in lo_s or "e" in lo_s
                                     or "." in hi_s or "inf" in hi_s) else int
                    zones[zname] = (conv(lo_s), conv(hi_s))
                refs.append(ChunkRef(cid, box, zones, worker, locator))
        schema = ArraySchema(name, tuple(dims), tuple(attrs), density, origin)
        return CatalogEntry(schema, refs)

    # -- access -----------------------------------------------------------

    def read(self, name: str, chunk_id: int, columns=None) -> Chunk:
        entry = self.entry(name)
        ref = entry.ref(chunk_id)
        return read_chunk(ref.locator, entry.schema, columns=columns,
                          chunk_id=chunk_id, io_stats=self.io)

    def prune(self, name: str, query_box=None, predicate=None) -> list:
        return prune(self.entry(name), query_box, predicate)

    def scan(self, name: str, chunk_ids, sink, columns=None, max_inflight: int = 4):
        """Deliver each named chunk to ``sink(chunk, worker_id)`` exactly
        once, from up to ``max_inflight`` concurrent readers. Order is
        unspecified; a sink failure aborts the scan and propagates."""
        entry = self.entry(name)
        refs = [entry.ref(cid) for cid in chunk_ids]
        if max_inflight <= 1:
            for ref in refs:
                chunk = read_chunk(ref.locator, entry.schema, columns=columns,
                                   chunk_id=ref.chunk_id, io_stats=self.io)
                sink(chunk, ref.worker_id)
            return

        def job(ref):
            chunk = read_chunk(ref.locator, entry.schema, columns=columns,
                               chunk_id=ref.chunk_id, io_stats=self.io)
            sink(chunk, ref.worker_id)

        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            futures = [pool.submit(job, ref) for ref in refs]
            for fut in futures:
                fut.result()

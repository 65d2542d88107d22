"""Mergeable user-aggregate execution over chunk streams.

A user aggregate is a state plus a lifecycle: per-chunk bracketing
(begin/end), accumulation over the chunk's valid cells, associative and
commutative merging of partial states, and a final terminate. Workers are
simulated in-process, but state never crosses a worker boundary except as
serialized bytes, and the per-edge byte traffic is recorded.
"""

from __future__ import annotations

import pickle
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .model import DENSE, Chunk

# ---------------------------------------------------------------------------
# Cell batches
# ---------------------------------------------------------------------------


@dataclass
class CellBatch:
    """The valid cells of one chunk: global coordinates plus attribute
    columns, all equally sized numpy vectors."""

    coords: dict  # dim name -> int64 vector
    columns: dict  # attr name -> value vector
    chunk: Chunk

    def __len__(self):
        if self.coords:
            return len(next(iter(self.coords.values())))
        return len(next(iter(self.columns.values())))


def cell_batch(chunk: Chunk, schema) -> CellBatch:
    """Extract the valid cells of a chunk as a batch."""
    if chunk.layout == DENSE:
        mask = chunk.validity
        coords = {d.name: chunk.coord_column(i, d.name)[mask]
                  for i, d in enumerate(schema.dims)}
        columns = {name: col[mask] for name, col in chunk.columns.items()}
    else:
        coords = dict(chunk.dim_columns)
        columns = dict(chunk.columns)
    return CellBatch(coords, columns, chunk)


# ---------------------------------------------------------------------------
# The aggregate contract
# ---------------------------------------------------------------------------


class GLA:
    """Base class for user aggregates.

    ``local_merge`` must be associative and commutative up to result
    equality, and ``remote_merge(s, serialize(t))`` must equal
    ``local_merge(s, t)`` — the default implementations guarantee the
    latter. ``begin_chunk``/``end_chunk`` bracket every chunk exactly once
    on the state that folds it; ``end_chunk`` and ``local_terminate`` may
    return rows to materialize early.
    """

    def init(self):
        raise NotImplementedError

    def begin_chunk(self, state, chunk: Chunk):
        pass

    def accumulate(self, state, cells: CellBatch):
        raise NotImplementedError

    def end_chunk(self, state):
        return None

    def local_merge(self, a, b):
        raise NotImplementedError

    def serialize(self, state) -> bytes:
        return pickle.dumps(state, protocol=pickle.HIGHEST_PROTOCOL)

    def remote_merge(self, state, payload: bytes):
        return self.local_merge(state, pickle.loads(payload))

    def local_terminate(self, state):
        return None

    def terminate(self, state):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Built-in aggregates
# ---------------------------------------------------------------------------


class SumGLA(GLA):
    def __init__(self, attr):
        self.attr = attr

    def init(self):
        return [0.0, False]  # total, saw-any

    def accumulate(self, state, cells):
        col = cells.columns[self.attr]
        if len(col):
            state[0] += float(col.sum(dtype=np.float64))
            state[1] = True

    def local_merge(self, a, b):
        return [a[0] + b[0], a[1] or b[1]]

    def terminate(self, state):
        return state[0] if state[1] else None


class CountGLA(GLA):
    def __init__(self, attr=None):
        self.attr = attr

    def init(self):
        return [0]

    def accumulate(self, state, cells):
        state[0] += len(cells)

    def local_merge(self, a, b):
        return [a[0] + b[0]]

    def terminate(self, state):
        return state[0]

    def local_terminate(self, state):
        return state[0]


class AvgGLA(GLA):
    def __init__(self, attr):
        self.attr = attr

    def init(self):
        return [0.0, 0]

    def accumulate(self, state, cells):
        col = cells.columns[self.attr]
        state[0] += float(col.sum(dtype=np.float64))
        state[1] += len(col)

    def local_merge(self, a, b):
        return [a[0] + b[0], a[1] + b[1]]

    def terminate(self, state):
        if state[1] == 0:
            return None  # empty group: no row, not NaN
        return state[0] / state[1]


class MinGLA(GLA):
    def __init__(self, attr):
        self.attr = attr

    def init(self):
        return [None]

    def accumulate(self, state, cells):
        col = cells.columns[self.attr]
        if len(col):
            m = col.min()
            state[0] = m if state[0] is None else min(state[0], m)

    def local_merge(self, a, b):
        vals = [v[0] for v in (a, b) if v[0] is not None]
        return [min(vals)] if vals else [None]

    def terminate(self, state):
        return None if state[0] is None else state[0].item()


class MaxGLA(GLA):
    def __init__(self, attr):
        self.attr = attr

    def init(self):
        return [None]

    def accumulate(self, state, cells):
        col = cells.columns[self.attr]
        if len(col):
            m = col.max()
            state[0] = m if state[0] is None else max(state[0], m)

    def local_merge(self, a, b):
        vals = [v[0] for v in (a, b) if v[0] is not None]
        return [max(vals)] if vals else [None]

    def terminate(self, state):
        return None if state[0] is None else state[0].item()


class CountDistinctGLA(GLA):
    """Exact distinct count; the state is a sorted value set."""

    def __init__(self, attr):
        self.attr = attr

    def init(self):
        return set()

    def accumulate(self, state, cells):
        state.update(np.unique(cells.columns[self.attr]).tolist())

    def local_merge(self, a, b):
        return a | b

    def serialize(self, state):
        return pickle.dumps(sorted(state), protocol=pickle.HIGHEST_PROTOCOL)

    def remote_merge(self, state, payload):
        return state | set(pickle.loads(payload))

    def terminate(self, state):
        return len(state)


# ---------------------------------------------------------------------------
# Aggregation trees
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AggregationTree:
    """Worker -> parent edges with a single root."""

    n_workers: int
    parent: tuple  # parent[w] is the parent worker of w; parent[root] == -1
    root: int

    def __post_init__(self):
        if len(self.parent) != self.n_workers:
            raise ConfigError("parent vector length != n_workers")
        if not (0 <= self.root < self.n_workers):
            raise ConfigError("tree root out of range")
        if self.parent[self.root] != -1:
            raise ConfigError("root must have parent -1")
        # Every non-root worker must reach the root without cycles.
        for w in range(self.n_workers):
            seen = set()
            cur = w
            while cur != self.root:
                if cur in seen or not (0 <= cur < self.n_workers):
                    raise ConfigError("aggregation tree contains a cycle")
                seen.add(cur)
                cur = self.parent[cur]

    @classmethod
    def star(cls, n_workers: int, root: int = 0):
        parent = [root] * n_workers
        parent[root] = -1
        return cls(n_workers, tuple(parent), root)

    @classmethod
    def chain(cls, n_workers: int, root: int = 0):
        order = [root] + [w for w in range(n_workers) if w != root]
        parent = [0] * n_workers
        parent[order[0]] = -1
        for i in range(1, n_workers):
            parent[order[i]] = order[i - 1]
        return cls(n_workers, tuple(parent), root)

    @classmethod
    def balanced_binary(cls, n_workers: int, root: int = 0):
        order = [root] + [w for w in range(n_workers) if w != root]
        parent = [0] * n_workers
        parent[order[0]] = -1
        for i in range(1, n_workers):
            parent[order[i]] = order[(i - 1) // 2]
        return cls(n_workers, tuple(parent), root)

    def depth(self, w: int) -> int:
        d = 0
        while w != self.root:
            w = self.parent[w]
            d += 1
        return d


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


@dataclass
class GLARun:
    """Result and instrumentation of one aggregate execution."""

    result: object = None
    per_worker: dict = field(default_factory=dict)
    materialized: list = field(default_factory=list)
    edge_bytes: dict = field(default_factory=dict)  # (child, parent) -> bytes

    @property
    def cross_worker_bytes(self) -> int:
        return sum(self.edge_bytes.values())


def _fold_worker(gla, schema, chunks, run, lock, threads: int):
    """Fold one worker's chunks into a single merged state."""

    def fold(chunk_list):
        state = gla.init()
        for chunk in chunk_list:
            gla.begin_chunk(state, chunk)
            gla.accumulate(state, cell_batch(chunk, schema))
            rows = gla.end_chunk(state)
            if rows:
                with lock:
                    run.materialized.extend(rows)
        return state

    if threads <= 1 or len(chunks) <= 1:
        return fold(chunks)
    parts = [chunks[i::threads] for i in range(threads)]
    parts = [p for p in parts if p]
    with ThreadPoolExecutor(max_workers=len(parts)) as pool:
        states = list(pool.map(fold, parts))
    merged = states[0]
    for s in states[1:]:
        merged = gla.local_merge(merged, s)
    return merged


def _chunks_by_worker(catalog, name, chunk_ids, columns):
    entry = catalog.entry(name)
    grouped = {}
    for cid in chunk_ids:
        ref = entry.ref(cid)
        grouped.setdefault(ref.worker_id, []).append(ref)
    loaded = {}
    for w, refs in grouped.items():
        loaded[w] = [catalog.read(name, r.chunk_id, columns=columns)
                     for r in refs]
    return entry.schema, loaded


def run_gla(catalog, name, chunk_ids, gla: GLA, tree: AggregationTree | None = None,
            threads_per_worker: int = 2, columns=None) -> GLARun:
    """Execute an aggregate over the named chunks.

    Each worker folds its chunks (possibly with several concurrent states
    merged afterwards), then states ascend the tree as serialized bytes;
    terminate runs once at the root. The result is independent of chunk
    order, thread count, and tree shape for any law-abiding aggregate.
    """
    schema, by_worker = _chunks_by_worker(catalog, name, chunk_ids, columns)
    tree = tree or AggregationTree.balanced_binary(catalog.n_workers)
    return run_gla_chunks(schema, by_worker, gla, tree,
                          threads_per_worker=threads_per_worker)


def run_gla_chunks(schema, chunks_by_worker: dict, gla: GLA,
                   tree: AggregationTree, threads_per_worker: int = 2) -> GLARun:
    """Core executor over already-loaded chunks grouped by worker."""
    run = GLARun()
    lock = threading.Lock()
    states = {}
    workers = sorted(chunks_by_worker)
    if any(w >= tree.n_workers for w in workers):
        raise ConfigError("aggregation tree does not cover all chunk owners")

    with ThreadPoolExecutor(max_workers=max(1, len(workers))) as pool:
        futs = {w: pool.submit(_fold_worker, gla, schema, chunks_by_worker[w],
                               run, lock, threads_per_worker)
                for w in workers}
        for w, fut in futs.items():
            states[w] = fut.result()

    # Ascend the tree: deepest workers first, each child shipping its state
    # to its parent as bytes. Workers without chunks may still appear as
    # relay points once a child merges into them.
    while any(w != tree.root for w in states):
        w = max((w for w in states if w != tree.root), key=tree.depth)
        parent = tree.parent[w]
        payload = gla.serialize(states[w])
        run.edge_bytes[(w, parent)] = run.edge_bytes.get((w, parent), 0) + len(payload)
        base = states[parent] if parent in states else gla.init()
        states[parent] = gla.remote_merge(base, payload)
        del states[w]

    root_state = states.get(tree.root, gla.init())
    run.result = gla.terminate(root_state)
    _record_traffic(run.cross_worker_bytes)
    return run


def run_gla_confined(catalog, name, chunk_ids, gla: GLA,
                     threads_per_worker: int = 2, columns=None) -> GLARun:
    """Worker-confined execution: local_terminate per worker, no
    cross-worker traffic."""
    if type(gla).local_terminate is GLA.local_terminate:
        raise ContractError(
            f"{type(gla).__name__} does not implement local_terminate; "
            "confined execution is not available")
    schema, by_worker = _chunks_by_worker(catalog, name, chunk_ids, columns)
    run = GLARun()
    lock = threading.Lock()
    with ThreadPoolExecutor(max_workers=max(1, len(by_worker))) as pool:
        futs = {w: pool.submit(_fold_worker, gla, schema, chunks, run, lock,
                               threads_per_worker)
                for w, chunks in by_worker.items()}
        for w, fut in futs.items():
            run.per_worker[w] = gla.local_terminate(fut.result())
    return run


def measure_merge_traffic(run: GLARun) -> dict:
    """Exact serialized byte count per aggregation-tree edge."""
    return dict(run.edge_bytes)


# Process-wide merge-traffic accounting, so report code can attribute
# cross-worker bytes to the operators that ran between reset and read.
_traffic_lock = threading.Lock()
_traffic_bytes = 0


def reset_merge_traffic():
    global _traffic_bytes
    with _traffic_lock:
        _traffic_bytes = 0


def merge_traffic_bytes() -> int:
    with _traffic_lock:
        return _traffic_bytes


def _record_traffic(nbytes: int):
    global _traffic_bytes
    with _traffic_lock:
        _traffic_bytes += nbytes

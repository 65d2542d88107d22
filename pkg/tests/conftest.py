"""Shared fixtures and oracle helpers for the test suite."""

import numpy as np
import pytest

from arraybench import (
    Array,
    ArraySchema,
    AttributeSpec,
    Box,
    DimensionSpec,
    dense_array,
    sparse_array,
)


def make_dense_2d(rng, nx, ny, n_attrs=2, chunk_shape=None, valid_prob=0.85,
                  name="a", lo=(0, 0)):
    """Random 2-D dense array plus its plain-numpy mirror (grids, valid)."""
    dims = (DimensionSpec("x", lo[0], lo[0] + nx - 1),
            DimensionSpec("y", lo[1], lo[1] + ny - 1))
    attrs = tuple(AttributeSpec(f"a{k}", "int64") for k in range(n_attrs))
    schema = ArraySchema(name, dims, attrs, "dense")
    grids = {f"a{k}": rng.integers(-50, 51, (nx, ny)).astype(np.int64)
             for k in range(n_attrs)}
    valid = rng.random((nx, ny)) < valid_prob
    data = {k: v.ravel() for k, v in grids.items()}
    data["__valid__"] = valid.ravel()
    arr = dense_array(schema, data, chunk_shape=chunk_shape)
    return arr, grids, valid


def make_sparse_2d(rng, nx, ny, n_cells, n_attrs=2, chunk_shape=None,
                   name="s", lo=(0, 0)):
    """Random 2-D sparse array plus its (coords, columns) mirror."""
    dims = (DimensionSpec("x", lo[0], lo[0] + nx - 1),
            DimensionSpec("y", lo[1], lo[1] + ny - 1))
    attrs = tuple(AttributeSpec(f"a{k}", "int64") for k in range(n_attrs))
    schema = ArraySchema(name, dims, attrs, "sparse")
    n_cells = min(n_cells, nx * ny)
    flat = rng.choice(nx * ny, size=n_cells, replace=False)
    xs = flat // ny + lo[0]
    ys = flat % ny + lo[1]
    cols = {f"a{k}": rng.integers(-50, 51, n_cells).astype(np.int64)
            for k in range(n_attrs)}
    data = {"x": xs, "y": ys, **cols}
    arr = sparse_array(schema, data, chunk_shape=chunk_shape)
    return arr, {"x": xs, "y": ys}, cols


def array_cells_sorted(arr: Array):
    """All valid cells of an array as a sorted list of flat tuples."""
    cells = arr.cells()
    dims = list(arr.schema.dim_names)
    attrs = list(arr.schema.attr_names)
    rows = []
    n = len(cells)
    for i in range(n):
        row = tuple(int(cells.coords[d][i]) for d in dims)
        row += tuple(cells.columns[a][i] for a in attrs)
        rows.append(row)
    rows.sort(key=lambda r: r[:len(dims)])
    return rows


@pytest.fixture
def rng():
    return np.random.default_rng(0)

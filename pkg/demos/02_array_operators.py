"""Array-algebra tour.

Runs the core operators over a small in-memory array — filter, apply,
combine, reduce — and then the generalized windowed aggregation in its two
flavors: smoothing over every populated cell, and regridding onto a
coarser lattice chosen by a repeating bit pattern.

Run:  python3 demos/02_array_operators.py
"""

import numpy as np

from arraybench import (
    AggregateFn,
    ArraySchema,
    AttributeSpec,
    BitPattern,
    DimensionSpec,
    NeighborhoodShape,
    Predicate,
    apply,
    apply_plus,
    combine,
    dense_array,
    filter,
    materialize,
    reduce,
)

rng = np.random.default_rng(3)

schema = ArraySchema(
    "field",
    (DimensionSpec("x", 0, 29), DimensionSpec("y", 0, 29)),
    (AttributeSpec("v", "int64"),),
    "dense")
n = 30 * 30
grid = rng.integers(0, 100, n, dtype=np.int64)
arr = dense_array(schema, {"v": grid, "__valid__": np.ones(n, bool)},
                  chunk_shape=(10, 10))
print(f"input: 30x30 grid in {len(arr.chunks)} chunks, "
      f"mean v = {grid.mean():.2f}")

# filter keeps cells matching a predicate; everything else becomes a hole.
hot = filter(arr, Predicate.of(expr="v >= 80"))
print(f"filter v >= 80        -> {hot.valid_count()} cells remain")

# apply derives a new attribute per cell from an expression.
scaled = apply(arr, "w", "sqrt(v) * 10")
wgrid, _ = materialize(scaled, "w")
print(f"apply w = sqrt(v)*10  -> w[0,0] = {wgrid[0, 0]:.3f} "
      f"(v[0,0] = {grid[0]})")

# combine merges two aligned arrays cell by cell.
doubled = combine(arr, arr, "a + b")
dgrid, _ = materialize(doubled, "v")
assert (dgrid == grid.reshape(30, 30) * 2).all()
print("combine a + a         -> every cell doubled")

# reduce aggregates, optionally grouped by dimensions.
print(f"reduce sum            -> {reduce(arr, [], AggregateFn('sum', 'v'))}")
rows = reduce(arr, ["x"], AggregateFn("avg", "v", "row_avg"))
print(f"reduce avg by x       -> {rows.valid_count()} row averages")

# Windowed aggregation, flavor 1: a 5x5 mean around every populated cell.
smooth = apply_plus(arr, NeighborhoodShape.square(2, 2), "valid",
                    AggregateFn("avg", "v", "m"), n_workers=4)
sgrid, _ = materialize(smooth, "m")
print(f"\n5x5 window mean       -> m[15,15] = {sgrid[15, 15]:.3f}")

# Flavor 2: the same window anchored only at origins selected by a bit
# pattern — a 3x coarser output lattice, computed in one pass.
coarse = apply_plus(arr, NeighborhoodShape.of((0, 2), (0, 2)),
                    {"x": BitPattern("100"), "y": BitPattern("100")},
                    AggregateFn("avg", "v", "m"), n_workers=4)
print(f"3:1 regrid            -> output box {coarse.box.extents} "
      f"from input {arr.box.extents}")
cgrid, _ = materialize(coarse, "m")
block = grid.reshape(30, 30)[:3, :3]
assert np.isclose(cgrid[0, 0], block.mean())
print(f"                         m[0,0] = {cgrid[0, 0]:.3f} = "
      f"mean of the 3x3 input block")

"""CSV tables: a header row, floats at 17 significant digits."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .grid import Grid, ValueFunction, gradient_field


class SchemaError(ValueError):
    pass


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_table(path, header, rows) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])
            n += 1
    return n


def _node_block(grid: Grid):
    """(t, x...) for every layer and node, time-major then C order."""
    x = grid.nodes()
    t = np.repeat(grid.times, grid.n_nodes)
    return np.column_stack([t, np.tile(x, (grid.n_t + 1, 1))])


def coord_header(d: int) -> list:
    return ["t"] + [f"x_{k + 1}" for k in range(d)]


def value_header(d: int) -> list:
    return coord_header(d) + ["u", "grad_norm"]


def write_values(path, u: ValueFunction) -> int:
    """Nodal values plus the stencil gradient norm, one row per (layer, node)."""
    grid = u.grid
    grad = np.stack([np.linalg.norm(gradient_field(layer, grid.h), axis=-1) for layer in u.values])
    data = np.column_stack([_node_block(grid), u.values.reshape(-1), grad.reshape(-1)])
    return write_table(path, value_header(grid.d), data.tolist())


def write_controls(path, controls: np.ndarray, grid: Grid) -> int:
    header = coord_header(grid.d) + [f"a_{k + 1}" for k in range(grid.d)]
    data = np.column_stack([_node_block(grid), controls.reshape(-1, grid.d)])
    return write_table(path, header, data.tolist())


def read_values(path, grid: Grid) -> ValueFunction:
    """Read a value table written by :func:`write_values` and check it against ``grid``.

    The ``grad_norm`` column is informational and is not read back.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = value_header(grid.d)
        if header != expected:
            raise SchemaError(f"{path}: header {header} does not match {expected}")
        rows = list(reader)
        for i, row in enumerate(rows):
            if len(row) != len(expected):
                raise SchemaError(f"{path}: row {i + 2} has {len(row)} columns, expected {len(expected)}")
        try:
            data = np.array([[float(v) for v in row] for row in rows], dtype=float).reshape(-1, len(expected))
        except ValueError as exc:
            raise SchemaError(f"{path}: non-numeric entry ({exc})") from exc
    n_rows = (grid.n_t + 1) * grid.n_nodes
    n_cols = len(expected)
    if data.ndim != 2 or data.shape != (n_rows, n_cols):
        raise SchemaError(f"{path}: expected {n_rows} rows of {n_cols} columns, got {data.shape}")
    coords, vals = data[:, :grid.d + 1], data[:, grid.d + 1]
    ref = _node_block(grid)
    atol = 1e-12 * max(1.0, grid.R_x)
    if not np.allclose(coords, ref, rtol=0, atol=atol):
        i = int(np.argmax(np.any(~np.isclose(coords, ref, rtol=0, atol=atol), axis=1)))
        raise SchemaError(f"{path}: row {i + 2} coordinates do not match the declared grid")
    if not np.all(np.isfinite(vals)):
        raise SchemaError(f"{path}: nonfinite values")
    return ValueFunction(grid, vals.reshape((grid.n_t + 1,) + grid.shape))

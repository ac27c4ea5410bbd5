"""Binary containers for fields and corrector artifacts.

Layout of a `.fld` file (all integers little-endian uint32, payload
little-endian float64 in C order):

    bytes 0..15   magic b"HOMOGLAB-FLD-v1\\0"
    bytes 16..31  d, n, kind, extra_axis_count
    next          extra axis lengths (uint32 each)
    rest          payload float64

`kind` encodes the trailing component axes: 0 scalar, 1 vector (d,),
2 matrix (d, d), 3 rank-3 tensor (d, d, d).  `extra_axis_count` leading
axes before the spatial ones allow stacked families (e.g. one corrector
per direction).  Every binary file gets a JSON sidecar `<name>.json`
carrying model, parameters and seed; corrector sets persist as a directory
with a manifest recording tolerances and construction tags.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .corrector import CorrectorSet, FluxCorrector, _PAIRS
from .fields import CoefficientField
from .grid import Box, LatticeField, TorusGrid

__all__ = [
    "MAGIC",
    "save_array",
    "load_array",
    "save_coefficient_field",
    "load_coefficient_field",
    "save_lattice_field",
    "load_lattice_field",
    "save_corrector_set",
    "load_corrector_set",
    "save_flux_corrector",
    "load_flux_corrector",
    "atomic_write_bytes",
    "atomic_write_text",
]

MAGIC = b"HOMOGLAB-FLD-v1\x00"
_KIND_AXES = {0: 0, 1: 1, 2: 2, 3: 3}


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the same directory plus rename (crash-safe)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_array(path, grid: TorusGrid, values: np.ndarray, kind: int, sidecar: dict) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    comp_axes = _KIND_AXES[kind]
    spatial_plus = values.ndim - comp_axes
    extra = values.shape[: spatial_plus - grid.d]
    expected = extra + grid.shape + (grid.d,) * comp_axes
    if values.shape != expected:
        raise ValueError(f"array shape {values.shape} does not match {expected}")
    header = MAGIC + struct.pack("<4I", grid.d, grid.n, kind, len(extra))
    header += struct.pack(f"<{len(extra)}I", *extra) if extra else b""
    atomic_write_bytes(path, header + values.tobytes(order="C"))
    atomic_write_text(Path(str(path) + ".json"), json.dumps(sidecar, indent=2, sort_keys=True))


def load_array(path):
    raw = Path(path).read_bytes()
    if raw[:16] != MAGIC:
        raise ValueError(f"{path}: bad magic header")
    d, n, kind, n_extra = struct.unpack_from("<4I", raw, 16)
    offset = 32
    extra = struct.unpack_from(f"<{n_extra}I", raw, offset) if n_extra else ()
    offset += 4 * n_extra
    grid = TorusGrid(d, n)
    shape = tuple(extra) + grid.shape + (d,) * _KIND_AXES[kind]
    values = np.frombuffer(raw, dtype="<f8", offset=offset).reshape(shape).copy()
    sidecar_path = Path(str(path) + ".json")
    sidecar = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    return grid, values, kind, sidecar


def save_coefficient_field(path, field: CoefficientField) -> None:
    save_array(
        path,
        field.grid,
        field.a,
        kind=2,
        sidecar={"model": field.model_tag, "params": field.params, "seed": field.seed},
    )


def load_coefficient_field(path) -> CoefficientField:
    grid, values, kind, sidecar = load_array(path)
    if kind != 2:
        raise ValueError(f"{path}: not a coefficient field container")
    return CoefficientField(
        grid,
        values,
        sidecar.get("model", "unknown"),
        int(sidecar.get("seed", 0)),
        sidecar.get("params", {}),
    )


def save_lattice_field(path, field: LatticeField, sidecar: dict | None = None) -> None:
    if field.box is not None:
        raise ValueError("only torus lattice fields serialize to the container")
    kind = {0: 0, 1: 1, 3: 3}[field.rank]
    save_array(path, field.grid, field.values, kind, sidecar or {})


def load_lattice_field(path) -> LatticeField:
    grid, values, kind, _ = load_array(path)
    rank = {0: 0, 1: 1, 3: 3}[kind]
    return LatticeField(grid, rank, values)


def save_corrector_set(directory, corr: CorrectorSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_coefficient_field(directory / "field.fld", corr.field)
    save_array(directory / "phi.fld", corr.grid, corr.phi, 0, {"stacked": "direction"})
    save_array(directory / "q.fld", corr.grid, corr.q, 1, {"stacked": "direction"})
    manifest = {
        "solver_tol": corr.solver_tol,
        "residuals": list(corr.residuals),
        "kind": "corrector-set",
    }
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_corrector_set(directory) -> CorrectorSet:
    directory = Path(directory)
    field = load_coefficient_field(directory / "field.fld")
    _, phi, _, _ = load_array(directory / "phi.fld")
    _, q, _, _ = load_array(directory / "q.fld")
    manifest = json.loads((directory / "manifest.json").read_text())
    from .discrete import grad

    grad_phi = np.stack([grad(phi[i], field.grid) for i in range(field.grid.d)])
    return CorrectorSet(
        field,
        phi,
        grad_phi,
        q,
        float(manifest["solver_tol"]),
        tuple(manifest["residuals"]),
    )


def save_flux_corrector(directory, fc: FluxCorrector) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pairs = _PAIRS[fc.grid.d]
    stacked = np.stack(
        [fc.components[(i, j, k)] for i in range(fc.grid.d) for (j, k) in pairs]
    )
    save_array(
        directory / "sigma.fld",
        fc.grid,
        stacked,
        0,
        {"construction": fc.construction_tag, "pair_order": [list(p) for p in pairs]},
    )
    manifest = {"construction": fc.construction_tag, "kind": "flux-corrector"}
    atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))


def load_flux_corrector(directory) -> FluxCorrector:
    directory = Path(directory)
    grid, stacked, _, sidecar = load_array(directory / "sigma.fld")
    pairs = [tuple(p) for p in sidecar["pair_order"]]
    comps = {}
    idx = 0
    for i in range(grid.d):
        for j, k in pairs:
            comps[(i, j, k)] = stacked[idx]
            idx += 1
    return FluxCorrector(grid, comps, sidecar.get("construction", "unknown"))

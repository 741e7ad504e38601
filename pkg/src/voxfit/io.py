"""JSON protocol/mesh files and raw complex k-space files."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import nifti
from .errors import DataError
from .volume import Protocol, mesh_graph


def load_protocol(path):
    try:
        spec = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read protocol {path}: {exc}") from exc
    if not isinstance(spec, dict):
        raise DataError("protocol JSON must be an object of named numeric arrays")
    return Protocol({k: np.asarray(v, dtype=float) for k, v in spec.items()})


def save_protocol(path, protocol):
    out = {k: np.squeeze(a, 0).tolist() if a.shape[0] == 1 else a.tolist()
           for k, a in protocol.axes.items()}
    Path(path).write_text(json.dumps(out, indent=2))


def load_mesh(path):
    try:
        spec = json.loads(Path(path).read_text())
        n = int(spec["n_vertices"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"cannot read mesh {path}: {exc}") from exc
    return mesh_graph(n, faces=spec.get("faces"), edges=spec.get("edges"))


def save_mesh(path, graph):
    Path(path).write_text(json.dumps({"n_vertices": graph.n_nodes,
                                      "edges": graph.edges.tolist()}))


def load_complex(spec, base=None):
    """Complex array from ``{"real": nii, "imag": nii}`` or ``{"raw": file, "sidecar": json}``.

    Raw files are interleaved complex64 in C order, shape given by the sidecar.
    """
    base = Path(base or ".")
    if "real" in spec:
        re = nifti.load(base / spec["real"])
        im = nifti.load(base / spec["imag"])
        if re.shape != im.shape:
            raise DataError("real/imag volumes differ in shape")
        return re + 1j * im
    if "raw" in spec:
        side = json.loads((base / spec["sidecar"]).read_text())
        shape = tuple(int(s) for s in side["shape"])
        data = np.fromfile(base / spec["raw"], dtype="<c8")
        if data.size != int(np.prod(shape)):
            raise DataError(f"raw file has {data.size} values, sidecar says {shape}")
        return data.reshape(shape).astype(np.complex128)
    raise DataError("complex input needs 'real'/'imag' or 'raw'/'sidecar' keys")


def save_complex_pair(prefix, data):
    prefix = str(prefix)
    nifti.save(prefix + "_real.nii", np.real(data), dtype="float32")
    nifti.save(prefix + "_imag.nii", np.imag(data), dtype="float32")


def save_complex_raw(path, data):
    path = Path(path)
    np.asarray(data, dtype="<c8").tofile(path)
    path.with_suffix(".json").write_text(json.dumps({"shape": list(np.shape(data))}))

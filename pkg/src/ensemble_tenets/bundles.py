"""Field bundles on disk and deterministic CSV/JSON writers.

A bundle ``name`` is two files:

``name.json``
    Header: format tag, grid metadata, the ordered component list, the array
    shape and axis names, dtype ``<f8``, and any provenance keys.
``name.f64``
    Flat little-endian float64 payload.  Components follow each other in header
    order, and each is written in row-major grid order.  A complex component
    ``c`` is stored as two real components ``c.re`` and ``c.im``.

Every writer here is byte-deterministic for equal inputs.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .grid import SpacetimeGrid

BUNDLE_FORMAT = "ensemble-tenets-bundle/1"


def canonical_json(obj: Any) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def _plain(obj: Any) -> Any:
    """Convert numpy scalars and arrays so ``json`` can serialize them."""
    if isinstance(obj, Mapping):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_text(path: Path, text: str) -> None:
    # newline="" keeps "\n" on every platform
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[Sequence[Any]], provenance: Mapping[str, str]) -> None:
    """CSV with ``# key=value`` provenance lines above the header row."""
    buf = io.StringIO()
    for k in sorted(provenance):
        buf.write(f"# {k}={provenance[k]}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    write_text(path, buf.getvalue())


def _cell(v: Any) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def read_csv(path: Path) -> tuple[dict[str, str], list[str], list[list[str]]]:
    prov: dict[str, str] = {}
    body = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# ") and "=" in line and not body:
            k, v = line[2:].split("=", 1)
            prov[k] = v
        else:
            body.append(line)
    rows = list(csv.reader(body))
    return prov, rows[0], rows[1:]


def write_bundle(
    directory: Path,
    name: str,
    components: Mapping[str, np.ndarray],
    axes: Sequence[str],
    grid: SpacetimeGrid | None = None,
    provenance: Mapping[str, Any] | None = None,
) -> list[Path]:
    """Write ``components`` (all of one shape) as a bundle; return the two paths."""
    directory = Path(directory)
    names: list[str] = []
    parts: list[np.ndarray] = []
    shape = None
    for key, arr in components.items():
        arr = np.asarray(arr)
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(f"component {key!r} has shape {arr.shape}, expected {shape}")
        if np.iscomplexobj(arr):
            names += [f"{key}.re", f"{key}.im"]
            parts += [arr.real, arr.imag]
        else:
            names.append(key)
            parts.append(arr)
    if shape is None:
        raise ValueError("a bundle needs at least one component")
    if len(axes) != len(shape):
        raise ValueError(f"{len(axes)} axis names for a {len(shape)}-d array")
    header = {
        "format": BUNDLE_FORMAT,
        "components": names,
        "shape": list(shape),
        "axes": list(axes),
        "dtype": "<f8",
        "order": "component, then row-major grid order",
        "grid": grid.to_dict() if grid is not None else None,
        "provenance": dict(provenance or {}),
    }
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes(order="C") for p in parts)
    header["payload_sha256"] = hashlib.sha256(payload).hexdigest()
    hp, bp = directory / f"{name}.json", directory / f"{name}.f64"
    write_text(hp, canonical_json(header))
    bp.write_bytes(payload)
    return [hp, bp]


def read_bundle(directory: Path, name: str) -> tuple[dict, dict[str, np.ndarray]]:
    directory = Path(directory)
    header = json.loads((directory / f"{name}.json").read_text(encoding="utf-8"))
    if header.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"not a bundle header: format={header.get('format')!r}")
    raw = (directory / f"{name}.f64").read_bytes()
    if hashlib.sha256(raw).hexdigest() != header["payload_sha256"]:
        raise ValueError("bundle payload does not match its header checksum")
    shape = tuple(header["shape"])
    flat = np.frombuffer(raw, dtype="<f8")
    size = int(np.prod(shape))
    if flat.size != size * len(header["components"]):
        raise ValueError("bundle payload size does not match the header")
    out: dict[str, np.ndarray] = {}
    for i, key in enumerate(header["components"]):
        out[key] = flat[i * size:(i + 1) * size].reshape(shape).copy()
    for key in [k[:-3] for k in out if k.endswith(".re")]:
        if f"{key}.im" in out:
            out[key] = out.pop(f"{key}.re") + 1j * out.pop(f"{key}.im")
    return header, out

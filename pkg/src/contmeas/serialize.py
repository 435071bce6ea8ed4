"""JSON/CSV codecs for complex-valued simulation data.

Canonical wire form: complex scalars are ``[re, im]`` pairs, complex matrices
are nested row-major arrays of pairs.  JSON-lines is the canonical stream
format; CSV is a convenience export that flattens complex values into
``_re``/``_im`` column pairs (matrix entries become ``key_i_j_re`` columns).
"""

from __future__ import annotations

import csv
import json
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import ConfigError


def complex_to_pair(z: complex) -> list[float]:
    z = complex(z)
    return [z.real, z.imag]


def pair_to_complex(obj: Any, field: str = "value") -> complex:
    if not (isinstance(obj, (list, tuple)) and len(obj) == 2):
        raise ConfigError(f"{field}: expected a [re, im] pair, got {obj!r}")
    re, im = obj
    if not all(isinstance(v, (int, float)) and np.isfinite(v) for v in (re, im)):
        raise ConfigError(f"{field}: [re, im] entries must be finite numbers, got {obj!r}")
    return complex(re, im)


def matrix_to_json(m: np.ndarray) -> list[list[list[float]]]:
    m = np.asarray(m, dtype=complex)
    return [[complex_to_pair(v) for v in row] for row in m]


def matrix_from_json(obj: Any, field: str = "matrix") -> np.ndarray:
    if not isinstance(obj, (list, tuple)) or not obj:
        raise ConfigError(f"{field}: expected a nonempty nested array of [re, im] pairs")
    n = len(obj)
    out = np.empty((n, n), dtype=complex)
    for i, row in enumerate(obj):
        if not isinstance(row, (list, tuple)) or len(row) != n:
            raise ConfigError(f"{field}: row {i} does not make the matrix square ({n}x{n})")
        for j, entry in enumerate(row):
            out[i, j] = pair_to_complex(entry, field=f"{field}[{i}][{j}]")
    return out


def _looks_like_pair(obj: Any) -> bool:
    return (
        isinstance(obj, (list, tuple))
        and len(obj) == 2
        and all(isinstance(v, (int, float)) for v in obj)
    )


def matrix_or_schedule_from_json(obj: Any, field: str = "matrix") -> np.ndarray:
    """Decode a single matrix or a list of per-cell matrices.

    Depth disambiguates: a matrix is rows of pairs (depth 3), a schedule is a
    list of matrices (depth 4).
    """
    if not isinstance(obj, (list, tuple)) or not obj:
        raise ConfigError(f"{field}: expected matrix data")
    head = obj[0]
    if isinstance(head, (list, tuple)) and head and _looks_like_pair(head[0]):
        return matrix_from_json(obj, field=field)
    return np.stack([matrix_from_json(m, field=f"{field}[{k}]") for k, m in enumerate(obj)])


def scalar_or_schedule_from_json(obj: Any, field: str = "value") -> complex | np.ndarray:
    """Decode a complex scalar ``[re, im]`` or a per-cell schedule of pairs."""
    if _looks_like_pair(obj):
        return pair_to_complex(obj, field=field)
    if isinstance(obj, (list, tuple)) and obj and _looks_like_pair(obj[0]):
        return np.array([pair_to_complex(v, field=f"{field}[{k}]") for k, v in enumerate(obj)])
    raise ConfigError(f"{field}: expected [re, im] or a list of [re, im]")


def scalar_or_schedule_to_json(val: complex | np.ndarray) -> Any:
    if np.ndim(val) == 0:
        return complex_to_pair(complex(val))
    return [complex_to_pair(complex(v)) for v in np.asarray(val)]


# ---------------------------------------------------------------------------
# row canonicalization and stream writers
# ---------------------------------------------------------------------------

def to_json_value(v: Any) -> Any:
    """Canonicalize a python/numpy value for the JSON wire form."""
    if isinstance(v, (bool, str)) or v is None:
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, (complex, np.complexfloating)):
        return complex_to_pair(complex(v))
    if isinstance(v, np.ndarray):
        if v.ndim == 2 and np.iscomplexobj(v):
            return matrix_to_json(v)
        return [to_json_value(x) for x in v]
    if isinstance(v, (list, tuple)):
        return [to_json_value(x) for x in v]
    if isinstance(v, dict):
        return {k: to_json_value(x) for k, x in v.items()}
    raise TypeError(f"cannot serialize value of type {type(v)!r}")


def dumps_row(row: dict[str, Any]) -> str:
    return json.dumps({k: to_json_value(v) for k, v in row.items()}, separators=(",", ":"))


def write_jsonl(path, rows: Iterable[dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps_row(row))
            fh.write("\n")
            n += 1
    return n


def read_jsonl(path) -> list[dict[str, Any]]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def flatten_row(row: dict[str, Any]) -> dict[str, Any]:
    """Flatten one row for CSV: complex → _re/_im, matrices → per-entry columns."""
    flat: dict[str, Any] = {}
    for key, v in row.items():
        if isinstance(v, (complex, np.complexfloating)):
            flat[f"{key}_re"] = complex(v).real
            flat[f"{key}_im"] = complex(v).imag
        elif isinstance(v, np.ndarray) and v.ndim == 2:
            for i in range(v.shape[0]):
                for j in range(v.shape[1]):
                    z = complex(v[i, j])
                    flat[f"{key}_{i}_{j}_re"] = z.real
                    flat[f"{key}_{i}_{j}_im"] = z.imag
        elif isinstance(v, np.ndarray):
            for i, x in enumerate(v):
                flat[f"{key}_{i}"] = float(np.real(x)) if not np.iscomplexobj(v) else None
                if np.iscomplexobj(v):
                    flat[f"{key}_{i}_re"] = complex(x).real
                    flat[f"{key}_{i}_im"] = complex(x).imag
                    flat.pop(f"{key}_{i}")
        elif isinstance(v, (int, np.integer)):
            flat[key] = int(v)
        elif isinstance(v, (float, np.floating)):
            flat[key] = float(v)
        else:
            flat[key] = v
    return flat


def write_csv(path, rows: Sequence[dict[str, Any]]) -> int:
    flats = [flatten_row(r) for r in rows]
    fields: list[str] = []
    for r in flats:
        for k in r:
            if k not in fields:
                fields.append(k)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in flats:
            writer.writerow(r)
    return len(flats)

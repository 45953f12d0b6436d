"""Plain-text persistence: TSV matrices and edge lists, JSON documents.

Floats are written with 17 significant digits so a write/read cycle is
exact.
"""

import hashlib
import json
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError
from .glasso import ZeroEdgeSet
from .pln import CountDataset

FLOAT_FMT = "%.17g"


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return FLOAT_FMT % float(x)


def write_table(path, matrix, columns, row_names=None, index_label="sample"):
    """Write a 2-D array as TSV with a header row (and optional first column)."""
    matrix = np.asarray(matrix)
    if matrix.ndim == 1:
        matrix = matrix[:, None]
    if matrix.shape[1] != len(columns):
        raise InputError("column names do not match the matrix width")
    is_int = np.issubdtype(matrix.dtype, np.integer)
    lines = []
    head = list(columns) if row_names is None else [index_label] + list(columns)
    lines.append("\t".join(head))
    for i, row in enumerate(matrix):
        cells = [str(int(v)) for v in row] if is_int else [FLOAT_FMT % v for v in row]
        if row_names is not None:
            cells.insert(0, str(row_names[i]))
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def read_table(path, dtype=float, index_label="sample"):
    """Read a TSV written by :func:`write_table`.

    Returns
    -------
    values : ndarray
    columns : list of str
    row_names : list of str or None
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    lines = [ln for ln in text.splitlines()]
    if not lines or not lines[0].strip():
        raise InputError(f"{path}: missing header row")
    header = lines[0].split("\t")
    has_index = header[0] == index_label
    columns = header[1:] if has_index else header
    if len(set(columns)) != len(columns):
        raise InputError(f"{path}: duplicate column names in header")
    rows, names = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            raise InputError(f"{path}, line {lineno}: expected {len(header)} fields, "
                             f"found {len(cells)}")
        if has_index:
            names.append(cells[0])
            cells = cells[1:]
        try:
            rows.append([dtype(c) for c in cells])
        except ValueError as exc:
            raise InputError(f"{path}, line {lineno}: {exc}") from exc
    # dtype may be a parser such as _parse_count; numpy infers the array type
    values = np.array(rows).reshape(len(rows), len(columns))
    return values, columns, (names if has_index else None)


def _parse_count(cell):
    value = float(cell)
    if not np.isfinite(value) or value < 0 or value != int(value):
        raise ValueError(f"{cell!r} is not a non-negative integer count")
    return int(value)


def read_counts(path, scaling_path=None):
    """Counts TSV (samples x features) plus an optional one-column scaling TSV."""
    counts, columns, _ = read_table(path, dtype=_parse_count)
    if counts.shape[0] == 0:
        raise InputError(f"{path}: no samples")
    scaling = None
    if scaling_path is not None:
        values, _, _ = read_table(scaling_path)
        scaling = values.ravel()
        if scaling.size != counts.shape[0]:
            raise InputError(f"{scaling_path}: {scaling.size} scaling factors for "
                             f"{counts.shape[0]} samples")
    return CountDataset(counts=counts.astype(np.int64), scaling=scaling, feature_names=columns)


def write_counts(path, data):
    write_table(path, np.asarray(data.counts, dtype=np.int64), data.feature_names)


def write_vector(path, values, name):
    write_table(path, np.asarray(values)[:, None], [name])


def read_vector(path, dtype=float):
    values, _, _ = read_table(path, dtype=dtype)
    return values.ravel()


def write_edge_list(path, precision, feature_names, keep_zero=False):
    """Three-column TSV ``feature_a, feature_b, partial_correlation``."""
    theta = np.asarray(precision, dtype=float)
    d = np.sqrt(np.diag(theta))
    lines = ["feature_a\tfeature_b\tpartial_correlation"]
    p = theta.shape[0]
    for l in range(p):
        for m in range(l + 1, p):
            if theta[l, m] == 0 and not keep_zero:
                continue
            pc = -theta[l, m] / (d[l] * d[m])
            lines.append(f"{feature_names[l]}\t{feature_names[m]}\t{FLOAT_FMT % pc}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_edge_list(path):
    """List of ``(feature_a, feature_b, partial_correlation)``."""
    out = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t")[:2] != ["feature_a", "feature_b"]:
        raise InputError(f"{path}: expected header 'feature_a<TAB>feature_b<TAB>...'")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != 3:
            raise InputError(f"{path}, line {lineno}: expected 3 fields")
        try:
            out.append((cells[0], cells[1], float(cells[2])))
        except ValueError as exc:
            raise InputError(f"{path}, line {lineno}: {exc}") from exc
    return out


def read_zero_edges(path, feature_names):
    """Pairs of feature names (two tab-separated columns) whose edge is fixed at 0."""
    index = {name: j for j, name in enumerate(feature_names)}
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        cells = line.split("\t")
        if not line.strip() or (lineno == 1 and cells[:2] == ["feature_a", "feature_b"]):
            continue
        if len(cells) < 2:
            raise InputError(f"{path}, line {lineno}: expected two feature names")
        a, b = cells[0].strip(), cells[1].strip()
        for name in (a, b):
            if name not in index:
                raise InputError(f"{path}, line {lineno}: unknown feature {name!r}")
        if a == b:
            raise InputError(f"{path}, line {lineno}: a feature cannot be paired with itself")
        pairs.append((index[a], index[b]))
    return ZeroEdgeSet(frozenset(pairs))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, default=_json_default, allow_nan=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read JSON from {path}: {exc}") from exc


def config_digest(config):
    """sha256 of the canonical JSON form of a config mapping."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_json_default)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def tool_versions():
    import numba
    import scipy

    from . import __version__
    return (f"mplnet {__version__}; numpy {np.__version__}; scipy {scipy.__version__}; "
            f"numba {numba.__version__}; python {platform.python_version()}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    status: str = "ok"
    timings: dict = field(default_factory=dict)
    versions: str = field(default_factory=tool_versions)
    config_digest: str = ""

    def __post_init__(self):
        if not self.config_digest:
            self.config_digest = config_digest(self.config)

    def write(self, path):
        write_json(path, asdict(self))

    @classmethod
    def read(cls, path):
        return cls(**read_json(path))

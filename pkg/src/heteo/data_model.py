"""Dataset containers, the EOT1 binary tensor format, and CSV manifest loading.

All containers are immutable after construction (arrays are flagged
non-writeable) so they can be shared freely across threads.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AlignmentError,
    DomainError,
    FormatError,
    SchemaError,
    ShapeError,
    TruncationError,
)

MAGIC = b"EOT1"

REQUIRED_COLUMNS = ("id", "lon", "lat", "treatment", "outcome")
TABULAR_PREFIX = "x_"


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# EOT1 tensor container


def write_tensor(tensor, path):
    """Write a float tensor as an EOT1 container (little-endian f32, row-major)."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    if arr.size and not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains non-finite entries, refusing to write")
    header = json.dumps(
        {"shape": list(arr.shape), "dtype": "f32", "order": "row-major"},
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path):
    """Read an EOT1 container back into a float32 ndarray (bit-exact round trip)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(4)
        if len(raw_len) != 4:
            raise TruncationError("file ends before header length")
        (header_len,) = struct.unpack("<I", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise TruncationError("file ends inside header")
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"header is not valid JSON: {exc}") from exc
        for key in ("shape", "dtype", "order"):
            if key not in header:
                raise FormatError(f"header missing key {key!r}")
        if header["dtype"] != "f32" or header["order"] != "row-major":
            raise FormatError(
                f"unsupported dtype/order {header['dtype']!r}/{header['order']!r}"
            )
        shape = tuple(int(s) for s in header["shape"])
        expected = 4 * int(np.prod(shape, dtype=np.int64)) if shape else 4
        payload = fh.read()
    if len(payload) != expected:
        raise TruncationError(
            f"payload is {len(payload)} bytes, header shape {shape} requires {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return _freeze(arr.copy())


# ---------------------------------------------------------------------------
# Domain containers


@dataclass(frozen=True)
class ImageSequence:
    """One unit's (T, H, W, B) float32 image stack; all entries finite."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"image sequence must be rank 4 (T,H,W,B), got {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all axes must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("image sequence contains NaN or Inf")
        object.__setattr__(self, "data", _freeze(arr))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class UnitRecord:
    id: str
    lon: float
    lat: float
    treatment: int | None
    outcome: float | None
    tabular: np.ndarray = field(default_factory=lambda: np.zeros(0))
    selected: bool = True
    cluster_id: str | None = None

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0:
            raise DomainError(f"unit {self.id}: lon {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise DomainError(f"unit {self.id}: lat {self.lat} outside [-90, 90]")
        if self.selected:
            if self.treatment not in (0, 1):
                raise DomainError(
                    f"unit {self.id}: treatment {self.treatment!r} not in {{0, 1}}"
                )
            if self.outcome is None or not np.isfinite(self.outcome):
                raise DomainError(f"unit {self.id}: outcome must be finite")
        else:
            if self.treatment is not None or self.outcome is not None:
                raise DomainError(
                    f"unit {self.id}: transport sites carry no treatment/outcome"
                )
        object.__setattr__(self, "tabular", _freeze(np.asarray(self.tabular, dtype=float)))


class ExperimentDataset:
    """Aligned experimental units plus their stacked image sequences.

    sequences is an (N, T, H, W, B) float32 array; row i belongs to units[i].
    propensity is the known assignment probability, either a scalar or a
    cluster_id -> probability mapping.
    """

    def __init__(self, units, sequences, propensity, tabular_names=()):
        units = list(units)
        seq = np.asarray(sequences, dtype=np.float32)
        if seq.ndim != 5:
            raise ShapeError(f"sequences must be (N,T,H,W,B), got {seq.shape}")
        if len(units) != seq.shape[0]:
            raise AlignmentError(
                f"{len(units)} units but {seq.shape[0]} sequence rows"
            )
        if len(units) < 2:
            raise DomainError(f"need N >= 2 units, got {len(units)}")
        if not np.all(np.isfinite(seq)):
            raise DomainError("sequences contain NaN or Inf")
        ids = [u.id for u in units]
        if len(set(ids)) != len(ids):
            raise DomainError("unit ids are not unique")
        if not all(u.selected for u in units):
            raise DomainError("experiment datasets hold selected units only")
        w = np.array([u.treatment for u in units])
        if w.min() == w.max():
            raise DomainError("need at least one treated and one control unit")
        self._check_propensity(propensity, units)

        widths = {u.tabular.shape[0] for u in units}
        if len(widths) > 1:
            raise AlignmentError(f"tabular widths differ across units: {sorted(widths)}")

        self.units = tuple(units)
        self.sequences = _freeze(seq)
        self.propensity = propensity
        self.tabular_names = tuple(tabular_names)

    @staticmethod
    def _check_propensity(propensity, units):
        if isinstance(propensity, dict):
            for u in units:
                if u.cluster_id not in propensity:
                    raise DomainError(f"no propensity entry for cluster {u.cluster_id!r}")
            values = propensity.values()
        else:
            values = [propensity]
        for p in values:
            if not 0.0 < float(p) < 1.0:
                raise DomainError(f"propensity {p} not strictly inside (0, 1)")

    def __len__(self):
        return len(self.units)

    @property
    def n(self):
        return len(self.units)

    @property
    def sequence_shape(self):
        return self.sequences.shape[1:]

    def sequence(self, i) -> ImageSequence:
        return ImageSequence(self.sequences[i])

    def treatment(self):
        return np.array([u.treatment for u in self.units], dtype=np.int64)

    def outcome(self):
        return np.array([u.outcome for u in self.units], dtype=float)

    def tabular_matrix(self):
        return np.vstack([u.tabular for u in self.units]) if self.units else np.zeros((0, 0))

    def cluster_ids(self):
        if all(u.cluster_id is None for u in self.units):
            return None
        return [u.cluster_id for u in self.units]

    def propensity_per_unit(self):
        if isinstance(self.propensity, dict):
            return np.array([self.propensity[u.cluster_id] for u in self.units])
        return np.full(len(self.units), float(self.propensity))

    def lonlat(self):
        return np.array([(u.lon, u.lat) for u in self.units])


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x D covariate matrix produced by a representation pipeline."""

    values: np.ndarray
    source: str
    fingerprint: str = ""
    column_names: tuple = ()

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 2:
            raise ShapeError(f"embedding matrix must be 2-d, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise DomainError("embedding matrix contains non-finite entries")
        object.__setattr__(self, "values", _freeze(arr))

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# Manifest loading


def _parse_float(value, column, row_idx):
    try:
        return float(value)
    except (TypeError, ValueError):
        raise DomainError(
            f"row {row_idx}: column {column!r} value {value!r} is not a number"
        ) from None


def load_manifest(path, tensor_path=None, propensity=None):
    """Load a CSV manifest (plus sidecar EOT1 sequence tensor) into a dataset.

    The CSV must carry id, lon, lat, treatment, outcome; columns prefixed
    "x_" become tabular covariates, an optional cluster_id column assigns
    clusters. The tensor holds (N, T, H, W, B) sequences in CSV row order.
    When propensity is omitted it defaults to the empirical treated share.
    """
    units, tabular_cols = load_manifest_table(path)

    if tensor_path is None:
        raise SchemaError("a sequence tensor path is required alongside the manifest")
    seq = read_tensor(tensor_path)
    if seq.ndim != 5:
        raise ShapeError(f"sequence tensor must be (N,T,H,W,B), got {seq.shape}")
    if seq.shape[0] != len(units):
        raise AlignmentError(
            f"manifest has {len(units)} rows but tensor has {seq.shape[0]}"
        )

    if propensity is None:
        w = np.array([u.treatment for u in units])
        propensity = float(w.mean())

    return ExperimentDataset(units, seq, propensity, tabular_names=tabular_cols)


def load_manifest_table(path):
    """Read just the unit table of a manifest (no sequence tensor).

    Returns (units, tabular_names); used where only treatment/outcome and
    locations are needed alongside precomputed embeddings.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty manifest, header row required")
        for col in REQUIRED_COLUMNS:
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {col!r}")
        tabular_cols = [c for c in reader.fieldnames if c.startswith(TABULAR_PREFIX)]
        has_cluster = "cluster_id" in reader.fieldnames
        units = []
        for idx, row in enumerate(reader):
            treatment_raw = row["treatment"].strip()
            if treatment_raw not in ("0", "1"):
                raise DomainError(
                    f"row {idx}: treatment value {treatment_raw!r} outside {{0, 1}}"
                )
            units.append(
                UnitRecord(
                    id=row["id"],
                    lon=_parse_float(row["lon"], "lon", idx),
                    lat=_parse_float(row["lat"], "lat", idx),
                    treatment=int(treatment_raw),
                    outcome=_parse_float(row["outcome"], "outcome", idx),
                    tabular=np.array(
                        [_parse_float(row[c], c, idx) for c in tabular_cols]
                    ),
                    selected=True,
                    cluster_id=row["cluster_id"] if has_cluster else None,
                )
            )
    return units, tuple(tabular_cols)


def load_sites(path):
    """Load a transport-site CSV (id, lon, lat; no treatment/outcome)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path}: empty sites file, header row required")
        for col in ("id", "lon", "lat"):
            if col not in reader.fieldnames:
                raise SchemaError(f"{path}: missing required column {col!r}")
        sites = []
        for idx, row in enumerate(reader):
            sites.append(
                UnitRecord(
                    id=row["id"],
                    lon=_parse_float(row["lon"], "lon", idx),
                    lat=_parse_float(row["lat"], "lat", idx),
                    treatment=None,
                    outcome=None,
                    selected=False,
                )
            )
    return sites


def read_external_embeddings(path, dataset_or_n, source):
    """Ingest precomputed (N, D) embeddings from an EOT1 container.

    dataset_or_n fixes the expected row count (a dataset or a plain int).
    The returned matrix is tagged with the source label; its fingerprint is
    derived from the label and width so transport checks can detect mixing.
    """
    n = dataset_or_n.n if hasattr(dataset_or_n, "n") else int(dataset_or_n)
    arr = read_tensor(path)
    if arr.ndim != 2:
        raise ShapeError(f"external embeddings must be (N, D), got {arr.shape}")
    if arr.shape[0] != n:
        raise AlignmentError(
            f"embedding rows {arr.shape[0]} do not match manifest rows {n}"
        )
    if not np.all(np.isfinite(arr)):
        raise DomainError("external embeddings contain non-finite entries")
    fingerprint = f"external:{source}:d{arr.shape[1]}"
    return EmbeddingMatrix(values=arr.astype(float), source=source, fingerprint=fingerprint)

"""Sparse field-structured datasets: schema, CSV ingestion, splits, k-core.

A dataset row is a sparse feature vector over a fixed set of categorical
fields, plus a binary click label, the interacting user/item ids, and a
timestamp. One designated field (the *bias field*) partitions items into
groups; all bias diagnostics key off it. Within every field the feature
values of a sample sum to one: a single-valued field contributes one entry
of value 1, a cell with m categories contributes m entries of value 1/m.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, CsvParseError, LabelError, SchemaError

FIELD_SUM_TOL = 1e-12
RESERVED_COLUMNS = ("user_id", "item_id", "label", "timestamp")


@dataclass(frozen=True)
class FieldSchema:
    """Ordered categorical fields mapped onto one global feature index space.

    Field i occupies the half-open index interval
    [offset_i, offset_i + cardinality_i) with offsets following declaration
    order, so every global index belongs to exactly one field.

    Attributes:
        fields: (name, cardinality) pairs in declaration order.
        bias_field: name of the field whose categories define item groups.
        categories: optional per-field ordered category vocabularies; category
            j of a field maps to local index j. Vocabularies may be partial,
            ingestion assigns fresh local indices to unseen categories.
        label_threshold: if set, ingestion binarizes numeric labels as
            (value > threshold); otherwise labels must already be 0/1.
    """

    fields: tuple[tuple[str, int], ...]
    bias_field: str
    categories: dict[str, tuple[str, ...]] = field(default_factory=dict)
    label_threshold: float | None = None

    def __post_init__(self):
        if not self.fields:
            raise ConfigError("schema declares no fields")
        names = [name for name, _ in self.fields]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate field names in schema")
        by_name = dict(self.fields)
        for name, card in self.fields:
            if not isinstance(card, int) or card < 1:
                raise ConfigError(f"field {name!r} has invalid cardinality {card!r}")
        if self.bias_field not in by_name:
            raise ConfigError(f"bias field {self.bias_field!r} is not a declared field")
        if by_name[self.bias_field] < 2:
            raise ConfigError("bias field must have cardinality >= 2")
        for name, cats in self.categories.items():
            if name not in by_name:
                raise ConfigError(f"categories declared for unknown field {name!r}")
            if len(cats) > by_name[name]:
                raise SchemaError(
                    f"field {name!r}: {len(cats)} categories exceed cardinality {by_name[name]}"
                )
            if len(set(cats)) != len(cats):
                raise ConfigError(f"duplicate categories for field {name!r}")

    @property
    def n(self) -> int:
        """Total number of global features (sum of cardinalities)."""
        return sum(card for _, card in self.fields)

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)

    @property
    def boundaries(self) -> np.ndarray:
        """Cumulative field offsets, length len(fields)+1; last entry is n."""
        return np.concatenate([[0], np.cumsum([card for _, card in self.fields])])

    def offset(self, name: str) -> int:
        off = 0
        for fname, card in self.fields:
            if fname == name:
                return off
            off += card
        raise ConfigError(f"unknown field {name!r}")

    def cardinality(self, name: str) -> int:
        for fname, card in self.fields:
            if fname == name:
                return card
        raise ConfigError(f"unknown field {name!r}")

    @property
    def bias_range(self) -> tuple[int, int]:
        """Half-open global index interval covered by the bias field."""
        start = self.offset(self.bias_field)
        return start, start + self.cardinality(self.bias_field)

    @property
    def num_groups(self) -> int:
        return self.cardinality(self.bias_field)

    def digest(self) -> str:
        """sha256 over the canonical schema structure (vocabularies included)."""
        payload = {
            "fields": [[name, card] for name, card in self.fields],
            "bias_field": self.bias_field,
            "categories": {k: list(v) for k, v in sorted(self.categories.items())},
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json_dict(self) -> dict:
        return {
            "fields": [{"name": name, "cardinality": card} for name, card in self.fields],
            "bias_field": self.bias_field,
            "categories": {k: list(v) for k, v in self.categories.items()},
            "label_threshold": self.label_threshold,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "FieldSchema":
        try:
            fields = tuple((f["name"], int(f["cardinality"])) for f in d["fields"])
            bias_field = d["bias_field"]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema declaration: {exc}") from exc
        categories = {k: tuple(v) for k, v in d.get("categories", {}).items()}
        threshold = d.get("label_threshold")
        return cls(fields, bias_field, categories, threshold)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "FieldSchema":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        return cls.from_json_dict(raw)


class FeatureIndex:
    """Mutable (field, category) -> global feature index assignment.

    Seeded from the schema's declared vocabularies; unseen categories get the
    next free local index of their field. Overflow past the declared
    cardinality is a hard error, bias diagnostics depend on exact identity.
    """

    def __init__(self, schema: FieldSchema):
        self.schema = schema
        self._maps: dict[str, dict[str, int]] = {
            name: {c: i for i, c in enumerate(schema.categories.get(name, ()))}
            for name, _ in schema.fields
        }

    def index_of(self, field_name: str, category: str, create: bool = False) -> int:
        m = self._maps.get(field_name)
        if m is None:
            raise SchemaError(f"unknown field {field_name!r}")
        local = m.get(category)
        if local is None:
            if not create:
                raise SchemaError(f"unknown category {category!r} in field {field_name!r}")
            local = len(m)
            if local >= self.schema.cardinality(field_name):
                raise SchemaError(
                    f"field {field_name!r}: category {category!r} overflows "
                    f"declared cardinality {self.schema.cardinality(field_name)}"
                )
            m[category] = local
        return self.schema.offset(field_name) + local

    def labels(self, field_name: str) -> tuple[str, ...]:
        """Category label per local index; unassigned slots get placeholders."""
        m = self._maps[field_name]
        out = [f"{field_name}:{i}" for i in range(self.schema.cardinality(field_name))]
        for cat, local in m.items():
            out[local] = cat
        return tuple(out)


@dataclass(frozen=True)
class Sample:
    """One interaction: sparse features, click label, ids, timestamp."""

    indices: np.ndarray
    values: np.ndarray
    label: int
    user_id: str
    item_id: str
    timestamp: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ConfigError("sample indices/values must be 1-d arrays of equal length")
        if len(idx) and np.any(np.diff(idx) <= 0):
            raise ConfigError("sample feature indices must be strictly increasing")
        if np.any(val <= 0):
            raise ConfigError("sample feature values must be positive")
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label!r}")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))


class Dataset:
    """Immutable collection of samples stored columnar for fast batch math.

    ``indices``/``values`` are (N, E) arrays padded with index 0 / value 0.0;
    padding entries are inert because every model term multiplies by the
    value. Construction validates schema conformance once; subsets inherit
    it without re-checking.
    """

    def __init__(self, schema, indices, values, labels, user_ids, item_ids,
                 timestamps, split_tag="train", bias_labels=None, _validate=True):
        self.schema = schema
        self.indices = np.asarray(indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int8)
        self.user_ids = np.asarray(user_ids)
        self.item_ids = np.asarray(item_ids)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.split_tag = split_tag
        if bias_labels is None:
            start, end = schema.bias_range
            cats = schema.categories.get(schema.bias_field, ())
            bias_labels = tuple(
                cats[j] if j < len(cats) else f"{schema.bias_field}:{j}"
                for j in range(end - start)
            )
        self.bias_labels = tuple(bias_labels)
        self._memberships = None
        if _validate:
            self._validate()

    def _validate(self):
        n = len(self.labels)
        for name, arr in (("indices", self.indices), ("values", self.values)):
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ConfigError(f"{name} must be (N, E) with N = number of samples")
        for name, arr in (("user_ids", self.user_ids), ("item_ids", self.item_ids),
                          ("timestamps", self.timestamps)):
            if arr.shape != (n,):
                raise ConfigError(f"{name} must have shape (N,)")
        if not np.isin(self.labels, (0, 1)).all():
            raise ConfigError("labels must be 0/1")
        live = self.values > 0
        if n and live.any():
            if self.indices[live].min() < 0 or self.indices[live].max() >= self.schema.n:
                raise ConfigError("feature index out of schema range")
        # per-field value sums must be 1 for every sample
        bounds = self.schema.boundaries
        if n:
            field_of = np.searchsorted(bounds, self.indices, side="right") - 1
            sums = np.zeros((n, len(self.schema.fields)))
            rows = np.repeat(np.arange(n), self.indices.shape[1]).reshape(self.indices.shape)
            np.add.at(sums, (rows[live], field_of[live]), self.values[live])
            if np.abs(sums - 1.0).max() > FIELD_SUM_TOL:
                bad = int(np.argmax(np.abs(sums - 1.0).max(axis=1)))
                raise ConfigError(
                    f"sample {bad}: per-field feature values do not sum to 1"
                )

    def __len__(self):
        return len(self.labels)

    def sample(self, i: int) -> Sample:
        live = self.values[i] > 0
        return Sample(
            indices=self.indices[i][live].copy(),
            values=self.values[i][live].copy(),
            label=int(self.labels[i]),
            user_id=str(self.user_ids[i]),
            item_id=str(self.item_ids[i]),
            timestamp=int(self.timestamps[i]),
        )

    def iter_samples(self):
        for i in range(len(self)):
            yield self.sample(i)

    @classmethod
    def from_samples(cls, schema, samples, split_tag="train", bias_labels=None):
        n = len(samples)
        width = max((len(s.indices) for s in samples), default=0)
        indices = np.zeros((n, width), dtype=np.int64)
        values = np.zeros((n, width), dtype=np.float64)
        for i, s in enumerate(samples):
            indices[i, : len(s.indices)] = s.indices
            values[i, : len(s.values)] = s.values
        return cls(
            schema,
            indices,
            values,
            np.array([s.label for s in samples], dtype=np.int8),
            np.array([s.user_id for s in samples]),
            np.array([s.item_id for s in samples]),
            np.array([s.timestamp for s in samples], dtype=np.int64),
            split_tag=split_tag,
            bias_labels=bias_labels,
        )

    def subset(self, rows, split_tag=None) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            self.schema,
            self.indices[rows],
            self.values[rows],
            self.labels[rows],
            self.user_ids[rows],
            self.item_ids[rows],
            self.timestamps[rows],
            split_tag=split_tag or self.split_tag,
            bias_labels=self.bias_labels,
            _validate=False,
        )

    def bias_memberships(self) -> tuple[np.ndarray, np.ndarray]:
        """COO pairs (sample_rows, group_locals) of bias-field membership.

        A sample with several bias categories appears once per group.
        """
        if self._memberships is None:
            start, end = self.schema.bias_range
            live = (self.values > 0) & (self.indices >= start) & (self.indices < end)
            rows, cols = np.nonzero(live)
            self._memberships = (rows, self.indices[rows, cols] - start)
        return self._memberships

    def to_csv(self, path) -> None:
        """Write the canonical CSV form (header, '|'-joined multi-values)."""
        start_of = {name: self.schema.offset(name) for name, _ in self.schema.fields}
        labels_of = {}
        for name, card in self.schema.fields:
            cats = self.schema.categories.get(name, ())
            labels_of[name] = [
                cats[j] if j < len(cats) else f"{name}:{j}" for j in range(card)
            ]
        bounds = self.schema.boundaries
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(list(RESERVED_COLUMNS) + list(self.schema.field_names))
            for i in range(len(self)):
                live = self.values[i] > 0
                idx = self.indices[i][live]
                field_of = np.searchsorted(bounds, idx, side="right") - 1
                cells = []
                for f, name in enumerate(self.schema.field_names):
                    local = idx[field_of == f] - start_of[name]
                    cells.append("|".join(labels_of[name][j] for j in local))
                writer.writerow(
                    [self.user_ids[i], self.item_ids[i], int(self.labels[i]),
                     int(self.timestamps[i])] + cells
                )


def _parse_label(cell: str, threshold, path, line_no) -> int:
    if threshold is not None:
        try:
            return 1 if float(cell) > threshold else 0
        except ValueError:
            raise CsvParseError(path, line_no, f"non-numeric label {cell!r}")
    if cell in ("0", "1"):
        return int(cell)
    raise LabelError(
        f"{path}:{line_no}: label {cell!r} is not binary and no threshold is configured"
    )


def ingest_csv(path, schema: FieldSchema, index: FeatureIndex | None = None,
               split_tag: str = "train") -> Dataset:
    """Read a CSV interaction log into a Dataset.

    Expected header: user_id,item_id,label,timestamp,<field...> with fields in
    schema declaration order. Multi-valued cells use '|' separators and are
    normalized to value 1/m per category. Pass a shared FeatureIndex when
    ingesting several files so category assignment stays consistent.
    """
    path = Path(path)
    if index is None:
        index = FeatureIndex(schema)
    expected_header = list(RESERVED_COLUMNS) + list(schema.field_names)
    samples_idx: list[np.ndarray] = []
    samples_val: list[np.ndarray] = []
    labels: list[int] = []
    users: list[str] = []
    items: list[str] = []
    stamps: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(path, 1, "empty file")
        if header != expected_header:
            raise CsvParseError(
                path, 1, f"header {header!r} does not match declared fields {expected_header!r}"
            )
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(expected_header):
                raise CsvParseError(
                    path, line_no,
                    f"expected {len(expected_header)} columns, got {len(row)}",
                )
            user, item, label_cell, ts_cell = row[:4]
            try:
                ts = int(ts_cell)
            except ValueError:
                raise CsvParseError(path, line_no, f"non-integer timestamp {ts_cell!r}")
            label = _parse_label(label_cell, schema.label_threshold, path, line_no)
            idx_list: list[int] = []
            val_list: list[float] = []
            for cell, (fname, _) in zip(row[4:], schema.fields):
                parts = cell.split("|") if cell else []
                if not parts:
                    raise CsvParseError(path, line_no, f"empty cell for field {fname!r}")
                if len(set(parts)) != len(parts):
                    raise CsvParseError(path, line_no, f"duplicate category in field {fname!r}")
                v = 1.0 / len(parts)
                for cat in parts:
                    idx_list.append(index.index_of(fname, cat, create=True))
                    val_list.append(v)
            order = np.argsort(idx_list)
            samples_idx.append(np.asarray(idx_list, dtype=np.int64)[order])
            samples_val.append(np.asarray(val_list, dtype=np.float64)[order])
            labels.append(label)
            users.append(user)
            items.append(item)
            stamps.append(ts)
    n = len(labels)
    width = max((len(a) for a in samples_idx), default=0)
    indices = np.zeros((n, width), dtype=np.int64)
    values = np.zeros((n, width), dtype=np.float64)
    for i, (ia, va) in enumerate(zip(samples_idx, samples_val)):
        indices[i, : len(ia)] = ia
        values[i, : len(va)] = va
    return Dataset(
        schema, indices, values,
        np.asarray(labels, dtype=np.int8),
        np.asarray(users), np.asarray(items),
        np.asarray(stamps, dtype=np.int64),
        split_tag=split_tag,
        bias_labels=index.labels(schema.bias_field),
    )


def chronological_split(d: Dataset, fractions=(0.8, 0.1, 0.1),
                        split_tags=("train", "val-nbt", "test-nbt")):
    """Partition by ascending timestamp into contiguous train/val/test blocks.

    Ties are broken by (user_id, item_id) so the split is deterministic for
    any input ordering. Block sizes are round(N * cumulative fraction).
    """
    if len(d) == 0:
        raise ConfigError("cannot split an empty dataset")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError("need three positive split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    order = np.lexsort((d.item_ids, d.user_ids, d.timestamps))
    n = len(d)
    c1 = int(round(n * fractions[0]))
    c2 = int(round(n * (fractions[0] + fractions[1])))
    c1 = min(max(c1, 0), n)
    c2 = min(max(c2, c1), n)
    parts = (order[:c1], order[c1:c2], order[c2:])
    return tuple(d.subset(rows, tag) for rows, tag in zip(parts, split_tags))


def k_core_filter(d: Dataset, core: int) -> Dataset:
    """Iteratively drop users and items with fewer than `core` interactions.

    Repeats until a fixpoint, which is the unique maximal k-core of the
    user-item interaction graph. May return an empty dataset.
    """
    if core < 1:
        raise ConfigError(f"core must be >= 1, got {core}")
    rows = np.arange(len(d))
    while len(rows):
        users = d.user_ids[rows]
        items = d.item_ids[rows]
        ukeys, uinv, ucnt = np.unique(users, return_inverse=True, return_counts=True)
        ikeys, iinv, icnt = np.unique(items, return_inverse=True, return_counts=True)
        keep = (ucnt[uinv] >= core) & (icnt[iinv] >= core)
        if keep.all():
            break
        rows = rows[keep]
    return d.subset(rows)

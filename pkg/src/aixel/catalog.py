"""Dataset catalog: schemas, record ingestion, partitions and online column statistics.

Records are persisted as newline-delimited JSON (reserved keys ``_id``,
``_tenant``, ``_ts``) next to a ``schema.json`` that mirrors
:class:`DatasetDescriptor`. Statistics are kept per (dataset, tenant) and can
always be rebuilt from the stored records.
"""

from __future__ import annotations

import copy
import datetime as dt
import hashlib
import json
import math
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

from .errors import DuplicateError, SchemaError, UnknownIdError, UserError

EXACT_SELECTIVITY_ROWS = 10_000
EXACT_DISTINCT_LIMIT = 4096
SAMPLE_SIZE = 4096
HLL_PRECISION = 12
RESERVED_KEYS = ("_id", "_tenant", "_ts")
DEFAULT_TENANT = "default"


class FieldKind(str, Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    TEXT = "text"
    VECTOR = "vector"
    LABEL_SET = "label-set"


@dataclass(frozen=True)
class Field:
    name: str
    kind: FieldKind
    dim: int | None = None

    def to_dict(self) -> dict:
        d = {"name": self.name, "kind": self.kind.value}
        if self.dim is not None:
            d["dim"] = self.dim
        return d


GRANULARITIES = ("hour", "day", "week", "month", "all")


@dataclass
class DatasetDescriptor:
    dataset_id: str
    schema: list[Field]
    tenant: str | None = None
    granularity: str = "day"
    row_count: int = 0

    def __post_init__(self):
        self.schema = [
            f if isinstance(f, Field) else Field(f[0], FieldKind(f[1]), *f[2:]) for f in self.schema
        ]

    def validate(self) -> None:
        names = [f.name for f in self.schema]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate-field: {', '.join(dupes)}")
        for n in names:
            if n in RESERVED_KEYS:
                raise SchemaError(f"reserved field name: {n}")
        vectors = [f for f in self.schema if f.kind is FieldKind.VECTOR]
        if len(vectors) > 1:
            raise SchemaError("malformed schema: more than one vector field")
        for f in vectors:
            if not f.dim or f.dim < 1:
                raise SchemaError(f"vector field {f.name!r} needs a positive dim")
        if self.granularity not in GRANULARITIES:
            raise SchemaError(f"unknown time granularity {self.granularity!r}")

    def field(self, name: str) -> Field:
        for f in self.schema:
            if f.name == name:
                return f
        raise UnknownIdError(f"unknown field {name!r} in dataset {self.dataset_id!r}")

    def has_field(self, name: str) -> bool:
        return any(f.name == name for f in self.schema)

    @property
    def vector_field(self) -> Field | None:
        return next((f for f in self.schema if f.kind is FieldKind.VECTOR), None)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "schema": [f.to_dict() for f in self.schema],
            "partition": {"tenant": self.tenant, "granularity": self.granularity},
            "row_count": self.row_count,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DatasetDescriptor":
        part = d.get("partition") or {}
        schema = [Field(f["name"], FieldKind(f["kind"]), f.get("dim")) for f in d["schema"]]
        return cls(
            dataset_id=d["dataset_id"],
            schema=schema,
            tenant=part.get("tenant"),
            granularity=part.get("granularity", "day"),
            row_count=int(d.get("row_count", 0)),
        )


@dataclass
class Record:
    record_id: str
    values: dict[str, Any]
    tenant: str = DEFAULT_TENANT
    timestamp: int | None = None

    def to_json(self) -> dict:
        out = {"_id": self.record_id, "_tenant": self.tenant, "_ts": self.timestamp}
        out.update(self.values)
        return out

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "Record":
        values = {k: v for k, v in obj.items() if k not in RESERVED_KEYS}
        return cls(
            record_id=str(obj["_id"]),
            values=values,
            tenant=obj.get("_tenant") or DEFAULT_TENANT,
            timestamp=obj.get("_ts"),
        )

    def content_hash(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


def time_bucket(timestamp: int | None, granularity: str = "day") -> str:
    if timestamp is None or granularity == "all":
        return "all"
    t = dt.datetime.fromtimestamp(timestamp / 1000, tz=dt.timezone.utc)
    if granularity == "hour":
        return t.strftime("%Y-%m-%dT%H")
    if granularity == "day":
        return t.strftime("%Y-%m-%d")
    if granularity == "week":
        y, w, _ = t.isocalendar()
        return f"{y}-W{w:02d}"
    return t.strftime("%Y-%m")


def _hash64(value: Any) -> int:
    h = hashlib.blake2b(repr(value).encode(), digest_size=8).digest()
    return int.from_bytes(h, "big")


class DistinctCounter:
    """Exact distinct count up to 4096 values, HyperLogLog (p=12) afterwards.

    The sketch's relative standard error is 1.04/sqrt(4096) ~= 1.6%.
    """

    def __init__(self) -> None:
        self._exact: set[int] | None = set()
        self._registers: bytearray | None = None

    def add(self, value: Any) -> None:
        h = _hash64(value)
        if self._exact is not None:
            self._exact.add(h)
            if len(self._exact) > EXACT_DISTINCT_LIMIT:
                self._to_sketch()
        else:
            self._add_hash(h)

    def _to_sketch(self) -> None:
        self._registers = bytearray(1 << HLL_PRECISION)
        for h in self._exact:
            self._add_hash(h)
        self._exact = None

    def _add_hash(self, h: int) -> None:
        idx = h >> (64 - HLL_PRECISION)
        rest = h & ((1 << (64 - HLL_PRECISION)) - 1)
        rank = (64 - HLL_PRECISION) - rest.bit_length() + 1
        if rank > self._registers[idx]:
            self._registers[idx] = rank

    @property
    def exact(self) -> bool:
        return self._exact is not None

    def estimate(self) -> float:
        if self._exact is not None:
            return float(len(self._exact))
        m = len(self._registers)
        alpha = 0.7213 / (1 + 1.079 / m)
        z = sum(2.0 ** -r for r in self._registers)
        est = alpha * m * m / z
        zeros = self._registers.count(0)
        if est <= 2.5 * m and zeros:
            est = m * math.log(m / zeros)
        return est

    def merge(self, other: "DistinctCounter") -> "DistinctCounter":
        out = DistinctCounter()
        if self._exact is not None and other._exact is not None:
            out._exact = self._exact | other._exact
            if len(out._exact) > EXACT_DISTINCT_LIMIT:
                out._to_sketch()
            return out
        out._exact = None
        out._registers = bytearray(1 << HLL_PRECISION)
        for src in (self, other):
            if src._exact is not None:
                for h in src._exact:
                    out._add_hash(h)
            else:
                out._registers = bytearray(max(a, b) for a, b in zip(out._registers, src._registers))
        return out

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DistinctCounter)
            and self._exact == other._exact
            and self._registers == other._registers
        )


@dataclass
class ColumnStats:
    name: str
    kind: FieldKind
    count: int = 0
    nulls: int = 0
    distinct: DistinctCounter = field(default_factory=DistinctCounter)
    min: float | None = None
    max: float | None = None
    label_counts: Counter = field(default_factory=Counter)

    @property
    def null_fraction(self) -> float:
        return self.nulls / self.count if self.count else 0.0

    @property
    def distinct_estimate(self) -> float:
        return self.distinct.estimate()

    def top_labels(self, n: int = 10) -> list[tuple[str, int]]:
        return sorted(self.label_counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]

    def update(self, value: Any) -> None:
        self.count += 1
        if value is None:
            self.nulls += 1
            return
        if self.kind is FieldKind.NUMERIC:
            v = float(value)
            self.min = v if self.min is None else min(self.min, v)
            self.max = v if self.max is None else max(self.max, v)
            self.distinct.add(v)
        elif self.kind is FieldKind.LABEL_SET:
            for lab in value:
                self.label_counts[lab] += 1
                self.distinct.add(lab)
        elif self.kind is FieldKind.VECTOR:
            self.distinct.add(tuple(value))
        else:
            self.distinct.add(value)

    def merge(self, other: "ColumnStats") -> "ColumnStats":
        lo = [v for v in (self.min, other.min) if v is not None]
        hi = [v for v in (self.max, other.max) if v is not None]
        return ColumnStats(
            name=self.name,
            kind=self.kind,
            count=self.count + other.count,
            nulls=self.nulls + other.nulls,
            distinct=self.distinct.merge(other.distinct),
            min=min(lo) if lo else None,
            max=max(hi) if hi else None,
            label_counts=self.label_counts + other.label_counts,
        )


@dataclass
class IngestReport:
    accepted: list[str] = field(default_factory=list)
    rejected: list[tuple[str, str]] = field(default_factory=list)

    @property
    def n_accepted(self) -> int:
        return len(self.accepted)

    @property
    def n_rejected(self) -> int:
        return len(self.rejected)

    def to_dict(self) -> dict:
        return {
            "accepted": len(self.accepted),
            "rejected": [{"record_id": r, "reason": why} for r, why in self.rejected],
        }


def conform(fld: Field, value: Any) -> str | None:
    """Return a rejection reason if ``value`` does not fit ``fld``; None if it does."""
    if value is None:
        return None
    k = fld.kind
    if k is FieldKind.NUMERIC:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
    elif k in (FieldKind.CATEGORICAL, FieldKind.TEXT):
        ok = isinstance(value, str) or (k is FieldKind.CATEGORICAL and isinstance(value, int) and not isinstance(value, bool))
    elif k is FieldKind.LABEL_SET:
        ok = isinstance(value, (list, tuple, set, frozenset)) and all(isinstance(v, str) for v in value)
    else:
        if not isinstance(value, (list, tuple)) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            return f"kind-mismatch:{fld.name}"
        if len(value) != fld.dim:
            return f"dimension-mismatch:{fld.name}"
        return None
    return None if ok else f"kind-mismatch:{fld.name}"


class _Partition:
    """Records and stats of one tenant within a dataset."""

    def __init__(self, schema: Sequence[Field]):
        self.stats: dict[str, ColumnStats] = {f.name: ColumnStats(f.name, f.kind) for f in schema}
        self.sample: dict[str, int] = {}  # record_id -> hash, bottom-k by hash

    def add_to_sample(self, record_id: str) -> None:
        h = _hash64(record_id)
        if len(self.sample) < SAMPLE_SIZE:
            self.sample[record_id] = h
            return
        worst = max(self.sample, key=lambda r: (self.sample[r], r))
        if (h, record_id) < (self.sample[worst], worst):
            del self.sample[worst]
            self.sample[record_id] = h


class DatasetHandle:
    def __init__(self, catalog: "Catalog", descriptor: DatasetDescriptor):
        self._catalog = catalog
        self.descriptor = descriptor
        self.records: dict[str, Record] = {}
        self.tombstones: set[str] = set()
        self.partitions: dict[str, _Partition] = {}
        self.lock = threading.Lock()
        self.chain = hashlib.sha256(descriptor.dataset_id.encode()).hexdigest()

    @property
    def dataset_id(self) -> str:
        return self.descriptor.dataset_id

    @property
    def row_count(self) -> int:
        return self.descriptor.row_count

    @property
    def live_count(self) -> int:
        return len(self.records) - len(self.tombstones)

    def __repr__(self) -> str:
        return f"DatasetHandle({self.dataset_id!r}, rows={self.row_count})"


class Catalog:
    """Registry of datasets; optionally backed by a directory on disk."""

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._datasets: dict[str, DatasetHandle] = {}
        self._lock = threading.Lock()
        if self.root is not None and self.root.exists():
            for schema_file in sorted(self.root.glob("*/schema.json")):
                self._load(schema_file.parent)

    # -- registration -------------------------------------------------
    def register_dataset(self, descriptor: DatasetDescriptor) -> DatasetHandle:
        descriptor.validate()
        with self._lock:
            if descriptor.dataset_id in self._datasets:
                raise DuplicateError(f"duplicate-id: dataset {descriptor.dataset_id!r} already registered")
            descriptor = copy.deepcopy(descriptor)
            descriptor.row_count = 0
            handle = DatasetHandle(self, descriptor)
            self._datasets[descriptor.dataset_id] = handle
        if self.root is not None:
            d = self.root / descriptor.dataset_id
            d.mkdir(parents=True, exist_ok=True)
            (d / "schema.json").write_text(json.dumps(descriptor.to_dict(), indent=2))
            (d / "records.jsonl").touch()
        return handle

    def dataset(self, dataset_id: str) -> DatasetHandle:
        try:
            return self._datasets[dataset_id]
        except KeyError:
            raise UnknownIdError(f"unknown dataset {dataset_id!r}") from None

    def descriptor(self, dataset_id: str) -> DatasetDescriptor:
        return self.dataset(dataset_id).descriptor

    def datasets(self) -> list[str]:
        return sorted(self._datasets)

    def __contains__(self, dataset_id: str) -> bool:
        return dataset_id in self._datasets

    # -- ingestion ----------------------------------------------------
    def ingest(self, dataset_id: str, records: Iterable[Record], _persist: bool = True) -> IngestReport:
        h = self.dataset(dataset_id)
        desc = h.descriptor
        report = IngestReport()
        with h.lock:
            # Stats are updated on copies and swapped in once per batch.
            partitions = {t: copy.deepcopy(p) for t, p in h.partitions.items()}
            accepted: list[Record] = []
            seen = set(h.records)
            for rec in records:
                reason = self._check(desc, rec, seen)
                if reason:
                    report.rejected.append((str(rec.record_id), reason))
                    continue
                seen.add(rec.record_id)
                tenant = rec.tenant or desc.tenant or DEFAULT_TENANT
                rec = Record(rec.record_id, dict(rec.values), tenant, rec.timestamp)
                part = partitions.get(tenant)
                if part is None:
                    part = partitions[tenant] = _Partition(desc.schema)
                for f in desc.schema:
                    part.stats[f.name].update(rec.values[f.name])
                part.add_to_sample(rec.record_id)
                accepted.append(rec)
                report.accepted.append(rec.record_id)
            for rec in accepted:
                h.records[rec.record_id] = rec
                h.chain = hashlib.sha256((h.chain + rec.record_id + rec.content_hash()).encode()).hexdigest()
            h.partitions = partitions
            desc.row_count += len(accepted)
            if _persist and self.root is not None and accepted:
                with open(self.root / dataset_id / "records.jsonl", "a") as fh:
                    for rec in accepted:
                        fh.write(json.dumps(rec.to_json(), separators=(",", ":")) + "\n")
        return report

    @staticmethod
    def _check(desc: DatasetDescriptor, rec: Record, seen: set[str]) -> str | None:
        if rec.record_id is None or rec.record_id == "":
            return "missing-id"
        if rec.record_id in seen:
            return "duplicate"
        if desc.tenant is not None and rec.tenant not in (None, DEFAULT_TENANT, desc.tenant):
            return "tenant-mismatch"
        if rec.timestamp is not None and (isinstance(rec.timestamp, bool) or not isinstance(rec.timestamp, int)):
            return "bad-timestamp"
        names = {f.name for f in desc.schema}
        for key in rec.values:
            if key not in names:
                return f"unknown-field:{key}"
        for f in desc.schema:
            if f.name not in rec.values:
                return f"missing-field:{f.name}"
            why = conform(f, rec.values[f.name])
            if why:
                return why
        return None

    def tombstone(self, dataset_id: str, record_id: str) -> None:
        h = self.dataset(dataset_id)
        with h.lock:
            if record_id not in h.records:
                raise UnknownIdError(f"unknown record {record_id!r}")
            h.tombstones.add(record_id)
        if self.root is not None:
            with open(self.root / dataset_id / "tombstones.jsonl", "a") as fh:
                fh.write(json.dumps({"_id": record_id}) + "\n")

    # -- access -------------------------------------------------------
    def get(self, dataset_id: str, record_id: str) -> Record | None:
        h = self.dataset(dataset_id)
        if record_id in h.tombstones:
            return None
        return h.records.get(record_id)

    def records(self, dataset_id: str, tenant: str | None = None) -> Iterator[Record]:
        """Live records in ingestion order."""
        h = self.dataset(dataset_id)
        for rec in list(h.records.values()):
            if rec.record_id in h.tombstones:
                continue
            if tenant is not None and rec.tenant != tenant:
                continue
            yield rec

    def tenants(self, dataset_id: str) -> list[str]:
        return sorted(self.dataset(dataset_id).partitions)

    def snapshot_id(self, dataset_id: str) -> str:
        h = self.dataset(dataset_id)
        tomb = hashlib.sha256(",".join(sorted(h.tombstones)).encode()).hexdigest()
        return hashlib.sha256((h.chain + tomb).encode()).hexdigest()[:16]

    # -- statistics ---------------------------------------------------
    def stats(self, dataset_id: str, tenant: str | None = None) -> dict[str, ColumnStats]:
        """Per-tenant stats, or the merged view over all tenants when ``tenant`` is None."""
        h = self.dataset(dataset_id)
        parts = h.partitions  # single read of the published reference
        if tenant is not None:
            if tenant not in parts:
                return {f.name: ColumnStats(f.name, f.kind) for f in h.descriptor.schema}
            return parts[tenant].stats
        merged = {f.name: ColumnStats(f.name, f.kind) for f in h.descriptor.schema}
        for t in sorted(parts):
            merged = {k: merged[k].merge(v) for k, v in parts[t].stats.items()}
        return merged

    def recompute_stats(self, dataset_id: str, tenant: str | None = None) -> dict[str, ColumnStats]:
        """Full-scan rebuild of the statistics (includes tombstoned rows, like the online path)."""
        h = self.dataset(dataset_id)
        scratch = Catalog()
        scratch.register_dataset(DatasetDescriptor(dataset_id, list(h.descriptor.schema), h.descriptor.tenant, h.descriptor.granularity))
        scratch.ingest(dataset_id, list(h.records.values()))
        return scratch.stats(dataset_id, tenant)

    def estimate_selectivity(
        self,
        dataset_id: str,
        range: tuple[str, float, float] | None = None,
        labels: tuple[str, Iterable[str], str] | None = None,
        tenant: str | None = None,
    ) -> float:
        """Fraction of live rows matching ``range`` = (field, lo, hi) and ``labels`` = (field, set, mode).

        Exact by scan up to 10k live rows; above that, evaluated on a bottom-k
        hash sample of 4096 rows per tenant.
        """
        h = self.dataset(dataset_id)
        desc = h.descriptor
        pred = _predicate(desc, range, labels)
        if range is not None and range[1] > range[2]:
            return 0.0
        if h.live_count <= EXACT_SELECTIVITY_ROWS:
            rows = list(self.records(dataset_id, tenant))
            if not rows:
                return 0.0
            return sum(1 for r in rows if pred(r)) / len(rows)
        tenants = [tenant] if tenant is not None else sorted(h.partitions)
        hits = total = 0
        weights = 0.0
        for t in tenants:
            part = h.partitions.get(t)
            if part is None:
                continue
            live = [h.records[r] for r in sorted(part.sample) if r not in h.tombstones]
            if not live:
                continue
            frac = sum(1 for r in live if pred(r)) / len(live)
            n = part.stats[desc.schema[0].name].count
            weights += frac * n
            total += n
            hits += 1
        return weights / total if total else 0.0

    # -- persistence --------------------------------------------------
    def _load(self, d: Path) -> None:
        desc = DatasetDescriptor.from_dict(json.loads((d / "schema.json").read_text()))
        desc.validate()
        handle = DatasetHandle(self, DatasetDescriptor(desc.dataset_id, desc.schema, desc.tenant, desc.granularity))
        self._datasets[desc.dataset_id] = handle
        records_path = d / "records.jsonl"
        if records_path.exists():
            self.ingest(desc.dataset_id, read_records(records_path), _persist=False)
        tomb = d / "tombstones.jsonl"
        if tomb.exists():
            for line in tomb.read_text().splitlines():
                if line.strip():
                    handle.tombstones.add(json.loads(line)["_id"])


def _predicate(desc: DatasetDescriptor, range, labels):
    checks = []
    if range is not None:
        fname, lo, hi = range
        f = desc.field(fname)
        if f.kind is not FieldKind.NUMERIC:
            raise UserError(f"kind mismatch: range predicate on {f.kind.value} field {fname!r}")
        checks.append(lambda r: r.values[fname] is not None and lo <= r.values[fname] <= hi)
    if labels is not None:
        fname, wanted, mode = labels
        f = desc.field(fname)
        if f.kind is not FieldKind.LABEL_SET:
            raise UserError(f"kind mismatch: label predicate on {f.kind.value} field {fname!r}")
        wanted = set(wanted)
        mode = mode.lower()
        if mode not in ("any", "all"):
            raise UserError(f"unknown label mode {mode!r}")

        def lab(r):
            have = set(r.values[fname] or ())
            if not wanted:
                return True
            return bool(have & wanted) if mode == "any" else wanted <= have

        checks.append(lab)
    return lambda r: all(c(r) for c in checks)


def read_records(path: str | Path) -> list[Record]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise UserError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if "_id" not in obj:
                raise UserError(f"{path}:{lineno}: record without _id")
            out.append(Record.from_json(obj))
    return out


def read_schema(path: str | Path) -> DatasetDescriptor:
    try:
        return DatasetDescriptor.from_dict(json.loads(Path(path).read_text()))
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"{path}: malformed schema ({exc})") from None

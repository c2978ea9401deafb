"""Bind a catalog dataset to a partitioned fusion index."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .catalog import Catalog, FieldKind, time_bucket
from .errors import UserError
from .fusion_index import FusionIndex, IndexNode, IndexParams, PartitionedIndex
from .search import ConstraintProfile, RankWeights, SearchResult, evidence, search


@dataclass
class IndexBuildReport:
    node_count: int = 0
    edge_count: int = 0
    skipped: list[tuple[str, str]] = field(default_factory=list)
    partitions: dict[str, int] = field(default_factory=dict)
    level_histogram: dict[int, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "node_count": self.node_count,
            "edge_count": self.edge_count,
            "skipped": [{"record_id": r, "reason": w} for r, w in self.skipped],
            "partitions": self.partitions,
            "level_histogram": {str(k): v for k, v in self.level_histogram.items()},
        }


class DatasetIndex:
    def __init__(self, dataset_id: str, vector_field: str, attr_field: str | None, label_field: str | None, index: PartitionedIndex):
        self.dataset_id = dataset_id
        self.vector_field = vector_field
        self.attr_field = attr_field
        self.label_field = label_field
        self.index = index
        self.record_of: dict[int, str] = {}
        self.node_of: dict[str, int] = {}

    @classmethod
    def build(
        cls,
        catalog: Catalog,
        dataset_id: str,
        attr_field: str | None = None,
        label_field: str | None = None,
        params: IndexParams | None = None,
    ) -> tuple["DatasetIndex", IndexBuildReport]:
        desc = catalog.descriptor(dataset_id)
        vec = desc.vector_field
        if vec is None:
            raise UserError(f"dataset {dataset_id!r} has no vector field to index")
        if attr_field is not None and desc.field(attr_field).kind is not FieldKind.NUMERIC:
            raise UserError(f"attribute field {attr_field!r} must be numeric")
        if label_field is not None and desc.field(label_field).kind is not FieldKind.LABEL_SET:
            raise UserError(f"label field {label_field!r} must be a label-set")
        out = cls(dataset_id, vec.name, attr_field, label_field, PartitionedIndex(vec.dim, params))
        report = IndexBuildReport()
        for ordinal, rec in enumerate(catalog.records(dataset_id)):
            v = rec.values[vec.name]
            attr = rec.values[attr_field] if attr_field else 0.0
            if v is None:
                report.skipped.append((rec.record_id, "null vector"))
                continue
            if attr is None:
                report.skipped.append((rec.record_id, "null attribute"))
                continue
            labels = rec.values[label_field] or () if label_field else ()
            key = (rec.tenant, time_bucket(rec.timestamp, desc.granularity))
            try:
                out.index.insert(IndexNode(ordinal, v, attr, labels), key)
            except UserError as exc:
                report.skipped.append((rec.record_id, str(exc)))
                continue
            out.record_of[ordinal] = rec.record_id
            out.node_of[rec.record_id] = ordinal
        hist: dict[int, int] = {}
        for key, part in sorted(out.index.partitions.items()):
            r = part.report()
            report.node_count += r.node_count
            report.edge_count += r.edge_count
            report.partitions["/".join(key)] = r.node_count
            for lvl, n in r.level_histogram.items():
                hist[lvl] = hist.get(lvl, 0) + n
        report.level_histogram = dict(sorted(hist.items()))
        return out, report

    def search(
        self,
        query,
        k: int = 10,
        profile: ConstraintProfile | None = None,
        weights: RankWeights | None = None,
        ef_search: int | None = None,
    ) -> SearchResult:
        return search(self.index, query, k, profile, weights, ef_search)

    def attach_evidence(self, result: SearchResult, catalog: Catalog, fields) -> None:
        for c in result.candidates:
            evidence(c, catalog, self.dataset_id, self.record_of.get(c.node_id), fields)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        parts = {}
        for i, (key, part) in enumerate(sorted(self.index.partitions.items())):
            name = f"part{i:04d}.aix"
            part.save(d / name)
            parts[name] = list(key)
        meta = {
            "dataset_id": self.dataset_id,
            "vector_field": self.vector_field,
            "attr_field": self.attr_field,
            "label_field": self.label_field,
            "dim": self.index.dim,
            "partitions": parts,
            "record_of": {str(k): v for k, v in sorted(self.record_of.items())},
        }
        (d / "index.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, directory: str | Path) -> "DatasetIndex":
        d = Path(directory)
        meta_path = d / "index.json"
        if not meta_path.exists():
            raise UserError(f"no index found at {d}")
        meta = json.loads(meta_path.read_text())
        pidx = PartitionedIndex(meta["dim"])
        for name, key in meta["partitions"].items():
            part = FusionIndex.load(d / name)
            pidx.partitions[tuple(key)] = part
        # partitions were serialized with a shared vocabulary; keep one instance
        vocabs = [p.vocab for p in pidx.partitions.values()]
        if vocabs:
            longest = max(vocabs, key=len)
            pidx.vocab = longest
            for p in pidx.partitions.values():
                p.vocab = longest
        out = cls(meta["dataset_id"], meta["vector_field"], meta["attr_field"], meta["label_field"], pidx)
        out.record_of = {int(k): v for k, v in meta["record_of"].items()}
        out.node_of = {v: k for k, v in out.record_of.items()}
        return out

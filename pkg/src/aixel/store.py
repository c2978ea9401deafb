"""Content-addressed, versioned artifact store with branches and three-way merges.

Layout under the store root::

    objects/<h[:2]>/<h>         blob objects, h = sha256 of the logical bytes
    snapshots/<version>.json    immutable snapshot documents
    branches/<name>             head version id (empty for an unborn branch)
    conflicts/<version>.json    conflict records of a merge snapshot

An object file starts with one tag byte: ``F`` followed by the bytes, or
``D`` followed by the 32-byte base digest and a delta against that base.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from filelock import FileLock

from . import delta
from .errors import AixelError, CorruptionError, DuplicateError, UnknownIdError, UserError
from .metrics import METRICS

DELTA_MIN_SIZE = 16 * 1024
DELTA_MAX_RATIO = 0.5
MAX_CHAIN = 8
POLICIES = ("prefer-a", "prefer-b", "prefer-higher-eval")
_UNSET = object()
_BRANCH_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class HeadMovedError(AixelError):
    """Another writer advanced the branch first; re-read the head and retry."""

    retryable = True


class ArtifactKind(str, enum.Enum):
    INDEX = "index"
    METADATA = "metadata"
    TENSOR = "tensor"
    MODEL = "model"

    @classmethod
    def parse(cls, v) -> "ArtifactKind":
        if isinstance(v, cls):
            return v
        try:
            return cls(str(v).lower())
        except ValueError:
            raise UserError(f"unknown artifact kind {v!r}; choose from {[k.value for k in cls]}") from None


Key = tuple[ArtifactKind, str]


@dataclass(frozen=True)
class BlobRef:
    hash: str
    size: int
    encoding: str  # "full" | "delta"
    base: str | None = None

    def to_dict(self) -> dict:
        d = {"hash": self.hash, "size": self.size, "encoding": self.encoding}
        if self.base:
            d["base"] = self.base
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BlobRef":
        return cls(d["hash"], d["size"], d["encoding"], d.get("base"))


def _key_str(k: Key) -> str:
    return f"{k[0].value}/{k[1]}"


def _parse_key(s: str) -> Key:
    kind, _, name = s.partition("/")
    return ArtifactKind.parse(kind), name


def _canon(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class Snapshot:
    version: str
    parents: tuple[str, ...]
    manifest: Mapping[Key, BlobRef]
    metadata: Mapping

    @staticmethod
    def compute_version(manifest: Mapping[Key, BlobRef], parents: Iterable[str], metadata: Mapping) -> str:
        doc = {
            "manifest": {_key_str(k): v.to_dict() for k, v in manifest.items()},
            "parents": list(parents),
            "metadata": metadata,
        }
        return hashlib.sha256(_canon(doc)).hexdigest()

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "parents": list(self.parents),
            "manifest": {_key_str(k): v.to_dict() for k, v in sorted(self.manifest.items(), key=lambda kv: _key_str(kv[0]))},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Snapshot":
        manifest = {_parse_key(k): BlobRef.from_dict(v) for k, v in d["manifest"].items()}
        return cls(d["version"], tuple(d["parents"]), manifest, d["metadata"])

    @property
    def created(self) -> float:
        return float(self.metadata.get("created", 0.0))


@dataclass(frozen=True)
class ConflictRecord:
    merge_version: str
    kind: str
    name: str
    chosen: str  # "a" | "b"
    policy: str
    timestamp: float
    note: str = ""


@dataclass
class MergeResult:
    snapshot: Snapshot
    conflicts: list[ConflictRecord]
    warnings: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class BranchHandle:
    name: str
    head: str | None


def compatibility(fields: Mapping[str, str] | Iterable[tuple[str, str]], objective: str | None = None,
                  metric: str | None = None) -> dict:
    """Compatibility descriptor stored in snapshot metadata."""
    items = fields.items() if isinstance(fields, Mapping) else fields
    return {"fields": sorted([str(n), str(k)] for n, k in items), "objective": objective, "metric": metric}


class ModelStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        for sub in ("objects", "snapshots", "branches", "conflicts"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))
        self._snap_cache: dict[str, Snapshot] = {}
        self._depth_cache: dict[str, int] = {}
        if not (self.root / "branches" / "main").exists():
            with self._lock:
                if not (self.root / "branches" / "main").exists():
                    self._write_head("main", None)

    # -- low-level I/O ---------------------------------------------------------

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def _obj_path(self, h: str) -> Path:
        return self.root / "objects" / h[:2] / h

    def _write_head(self, branch: str, version: str | None) -> None:
        self._atomic_write(self.root / "branches" / branch, (version or "").encode())

    def _read_head(self, branch: str) -> str | None:
        p = self.root / "branches" / branch
        if not p.exists():
            raise UnknownIdError(f"unknown branch {branch!r}")
        return p.read_text().strip() or None

    def _ref_of(self, h: str) -> BlobRef | None:
        p = self._obj_path(h)
        if not p.exists():
            return None
        with open(p, "rb") as f:
            tag = f.read(1)
            if tag == b"F":
                return BlobRef(h, p.stat().st_size - 1, "full")
            if tag == b"D":
                base = f.read(32).hex()
                size, _ = delta._read_varint(f.read(64)[4:], 0)
                return BlobRef(h, size, "delta", base)
        raise CorruptionError(f"object {h} has an unknown tag")

    def _chain_depth(self, h: str) -> int:
        if h not in self._depth_cache:
            ref = self._ref_of(h)
            if ref is None:
                raise CorruptionError(f"missing object {h}")
            self._depth_cache[h] = 0 if ref.encoding == "full" else 1 + self._chain_depth(ref.base)
        return self._depth_cache[h]

    def put_blob(self, data: bytes, base: BlobRef | None = None) -> BlobRef:
        """Store bytes (as a delta against ``base`` when that pays off) and return the ref.

        Equal bytes always map to the ref already on disk, whichever encoding
        it was first written with.
        """
        h = hashlib.sha256(data).hexdigest()
        existing = self._ref_of(h)
        if existing is not None:
            return existing
        payload = b"F" + data
        if base is not None and base.hash != h and len(data) >= DELTA_MIN_SIZE and self._chain_depth(base.hash) < MAX_CHAIN:
            d = delta.diff(self.reconstruct(base), data)
            if len(d) < DELTA_MAX_RATIO * len(data):
                payload = b"D" + bytes.fromhex(base.hash) + d
        p = self._obj_path(h)
        p.parent.mkdir(exist_ok=True)
        self._atomic_write(p, payload)
        return self._ref_of(h)

    def reconstruct(self, ref: BlobRef | str) -> bytes:
        h = ref if isinstance(ref, str) else ref.hash
        chain = []
        while True:
            p = self._obj_path(h)
            if not p.exists():
                raise CorruptionError(f"missing object {h}")
            raw = p.read_bytes()
            if raw[:1] == b"F":
                data = raw[1:]
                break
            if raw[:1] != b"D":
                raise CorruptionError(f"object {h} has an unknown tag")
            chain.append((h, raw[33:]))
            h = raw[1:33].hex()
        if hashlib.sha256(data).hexdigest() != h:
            raise CorruptionError(f"object {h} fails its digest check")
        for target, d in reversed(chain):
            data = delta.apply(data, d)
            if hashlib.sha256(data).hexdigest() != target:
                raise CorruptionError(f"object {target} fails its digest check")
        return data

    # -- snapshots ---------------------------------------------------------------

    def _store_snapshot(self, snap: Snapshot) -> None:
        p = self.root / "snapshots" / f"{snap.version}.json"
        if not p.exists():
            self._atomic_write(p, json.dumps(snap.to_dict(), indent=1, sort_keys=True).encode())
        self._snap_cache[snap.version] = snap

    def snapshot(self, version: str) -> Snapshot:
        if version not in self._snap_cache:
            p = self.root / "snapshots" / f"{version}.json"
            if not p.exists():
                raise UnknownIdError(f"unknown version {version!r}")
            self._snap_cache[version] = Snapshot.from_dict(json.loads(p.read_text()))
        return self._snap_cache[version]

    def versions(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "snapshots").glob("*.json"))

    def read(self, version: str, kind, name: str) -> bytes:
        snap = self.snapshot(version)
        key = (ArtifactKind.parse(kind), name)
        if key not in snap.manifest:
            raise UnknownIdError(f"{_key_str(key)} not in snapshot {version[:12]}")
        return self.reconstruct(snap.manifest[key])

    # -- branches ----------------------------------------------------------------

    def branches(self) -> dict[str, str | None]:
        return {p.name: (p.read_text().strip() or None) for p in sorted((self.root / "branches").iterdir()) if not p.name.startswith(".")}

    def branch(self, from_version: str | None, name: str) -> BranchHandle:
        if not _BRANCH_RE.match(name):
            raise UserError(f"invalid branch name {name!r}")
        if from_version is not None:
            self.snapshot(from_version)
        with self._lock:
            if (self.root / "branches" / name).exists():
                raise DuplicateError(f"branch {name!r} already exists")
            self._write_head(name, from_version)
        return BranchHandle(name, from_version)

    def checkout(self, name: str) -> BranchHandle:
        return BranchHandle(name, self._read_head(name))

    def head(self, branch: str) -> Snapshot | None:
        v = self._read_head(branch)
        return self.snapshot(v) if v else None

    # -- commit ------------------------------------------------------------------

    def commit(self, branch: str, changes: Mapping, metadata: Mapping | None = None,
               expected_head=_UNSET, created: float | None = None) -> Snapshot:
        """Create a snapshot on ``branch`` from ``changes``: (kind, name) -> bytes, or None to delete.

        ``expected_head`` defaults to the head read at entry; if the branch has
        moved by the time the head is advanced, ``HeadMovedError`` is raised.
        """
        base_version = self._read_head(branch) if expected_head is _UNSET else expected_head
        parent = self.snapshot(base_version) if base_version else None
        manifest: dict[Key, BlobRef] = dict(parent.manifest) if parent else {}
        for k, data in changes.items():
            key = (ArtifactKind.parse(k[0]), str(k[1]))
            if data is None:
                manifest.pop(key, None)
                continue
            if not isinstance(data, (bytes, bytearray)):
                raise UserError(f"artifact {_key_str(key)} must be bytes")
            prior = manifest.get(key)
            use_delta = key[0] in (ArtifactKind.TENSOR, ArtifactKind.MODEL)
            manifest[key] = self.put_blob(bytes(data), prior if use_delta else None)
        meta = dict(metadata or {})
        if parent is not None and "compat" not in meta and "compat" in parent.metadata:
            meta["compat"] = parent.metadata["compat"]
        now = time.time() if created is None else float(created)
        # lineage order must agree with creation order for resolution
        meta["created"] = max(now, parent.created) if parent else now
        parents = (base_version,) if base_version else ()
        snap = Snapshot(Snapshot.compute_version(manifest, parents, meta), parents, manifest, meta)
        self._advance(branch, base_version, snap)
        return snap

    def _advance(self, branch: str, expected: str | None, snap: Snapshot) -> None:
        self._store_snapshot(snap)
        with self._lock:
            current = self._read_head(branch)
            if current != expected:
                raise HeadMovedError(f"branch {branch!r} moved from {expected} to {current}; retry the commit")
            self._write_head(branch, snap.version)

    # -- lineage -----------------------------------------------------------------

    def log(self, branch_or_version: str) -> list[Snapshot]:
        """First-parent history, newest first."""
        try:
            v = self._read_head(branch_or_version)
        except UnknownIdError:
            v = self.snapshot(branch_or_version).version
        out = []
        while v:
            s = self.snapshot(v)
            out.append(s)
            v = s.parents[0] if s.parents else None
        return out

    def ancestors(self, version: str) -> set[str]:
        seen, stack = set(), [version]
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            stack.extend(self.snapshot(v).parents)
        return seen

    def generation(self, version: str) -> int:
        memo: dict[str, int] = {}
        order, stack = [], [version]
        while stack:  # iterative post-order
            v = stack.pop()
            if v in memo:
                continue
            ps = [p for p in self.snapshot(v).parents if p not in memo]
            if ps:
                stack.append(v)
                stack.extend(ps)
            else:
                memo[v] = 1 + max((memo[p] for p in self.snapshot(v).parents), default=-1)
                order.append(v)
        return memo[version]

    def common_ancestor(self, a: str, b: str) -> str:
        common = self.ancestors(a) & self.ancestors(b)
        if not common:
            raise UserError(f"versions {a[:12]} and {b[:12]} share no ancestor")
        # best common ancestors: not a proper ancestor of another common one
        redundant = set()
        for c in common:
            redundant |= self.ancestors(c) - {c}
        best = common - redundant
        return min(best, key=lambda v: (-self.generation(v), v))

    # -- merge -------------------------------------------------------------------

    def merge(self, a: str, b: str, policy: str = "prefer-a", metric: str | None = None,
              note: str | None = None) -> MergeResult:
        """Three-way merge of branch ``b`` into branch ``a`` at artifact granularity."""
        if policy not in POLICIES:
            raise UserError(f"unknown merge policy {policy!r}; choose from {list(POLICIES)}")
        va, vb = self._read_head(a), self._read_head(b)
        if not va or not vb:
            raise UserError("both branches need at least one snapshot to merge")
        sa, sb = self.snapshot(va), self.snapshot(vb)
        base = self.snapshot(self.common_ancestor(va, vb))
        warns: list[str] = []
        effective = policy
        if policy == "prefer-higher-eval":
            metric = metric or (sa.metadata.get("compat") or {}).get("metric")
            ea = (sa.metadata.get("eval") or {}).get(metric) if metric else None
            eb = (sb.metadata.get("eval") or {}).get(metric) if metric else None
            if ea is None or eb is None:
                effective = "prefer-a"
                warns.append(f"prefer-higher-eval needs eval[{metric}] on both heads; fell back to prefer-a")
                warnings.warn(warns[-1], stacklevel=2)
                winner = "a"
            else:
                higher_better = METRICS.get(metric, (None, True))[1]
                better_b = eb > ea if higher_better else eb < ea
                winner = "b" if better_b else "a"
        else:
            winner = "a" if policy == "prefer-a" else "b"

        manifest: dict[Key, BlobRef] = {}
        conflicts: list[tuple[Key, str]] = []
        for key in sorted(set(sa.manifest) | set(sb.manifest) | set(base.manifest), key=_key_str):
            ra, rb, r0 = sa.manifest.get(key), sb.manifest.get(key), base.manifest.get(key)
            if _same(ra, rb):
                pick = ra
            elif _same(ra, r0):
                pick = rb
            elif _same(rb, r0):
                pick = ra
            else:
                conflicts.append((key, winner))
                pick = ra if winner == "a" else rb
            if pick is not None:
                manifest[key] = pick
        meta = {
            "note": note or f"merge {b} into {a}",
            "created": max(sa.created, sb.created),
            "policy": effective,
        }
        for k in ("compat", "eval"):
            src = sb if (winner == "b" and k == "eval") else sa
            if k in src.metadata:
                meta[k] = src.metadata[k]
        parents = (va, vb)
        snap = Snapshot(Snapshot.compute_version(manifest, parents, meta), parents, manifest, meta)
        records = [ConflictRecord(snap.version, key[0].value, key[1], side, effective, meta["created"],
                                  note=warns[0] if warns else "") for key, side in conflicts]
        path = self.root / "conflicts" / f"{snap.version}.json"
        if not path.exists():
            self._atomic_write(path, json.dumps([asdict(r) for r in records], indent=1).encode())
        self._advance(a, va, snap)
        return MergeResult(snap, records, warns)

    def conflicts(self, merge_version: str) -> list[ConflictRecord]:
        p = self.root / "conflicts" / f"{merge_version}.json"
        return [ConflictRecord(**d) for d in json.loads(p.read_text())] if p.exists() else []

    # -- resolution --------------------------------------------------------------

    def resolve(self, intent: Mapping, schema: Mapping[str, str] | Iterable[tuple[str, str]]) -> Snapshot:
        """Newest snapshot whose compatibility descriptor accepts the task and schema."""
        versions = self.versions()
        if not versions:
            raise UserError("store is empty")
        have = dict(schema.items() if isinstance(schema, Mapping) else schema)
        snaps = sorted((self.snapshot(v) for v in versions),
                       key=lambda s: (s.created, self.generation(s.version), s.version), reverse=True)
        report = []
        for s in snaps:
            failed = _compat_failures(s.metadata.get("compat"), intent, have)
            if not failed:
                return s
            report.append(f"{s.version[:12]}: " + "; ".join(failed))
        shown = "\n  ".join(report[:5]) + (f"\n  ... {len(report) - 5} more" if len(report) > 5 else "")
        raise UserError(f"no compatible snapshot:\n  {shown}")

    # -- integrity ---------------------------------------------------------------

    def verify(self) -> list[str]:
        """Check parents exist, ancestry is acyclic and every blob reconstructs. Returns problems."""
        problems = []
        versions = set(self.versions())
        state: dict[str, int] = {}  # 1 visiting, 2 done
        for root in sorted(versions):
            stack = [(root, False)]
            while stack:
                v, leaving = stack.pop()
                if leaving:
                    state[v] = 2
                    continue
                if state.get(v) == 2:
                    continue
                if state.get(v) == 1:
                    problems.append(f"cycle through {v[:12]}")
                    continue
                state[v] = 1
                stack.append((v, True))
                for p in self.snapshot(v).parents:
                    if p not in versions:
                        problems.append(f"{v[:12]}: missing parent {p[:12]}")
                    elif state.get(p) != 2:
                        stack.append((p, False))
        for v in sorted(versions):
            s = self.snapshot(v)
            if Snapshot.compute_version(s.manifest, s.parents, s.metadata) != v:
                problems.append(f"{v[:12]}: version id does not match contents")
            for key, ref in s.manifest.items():
                try:
                    self.reconstruct(ref)
                except CorruptionError as e:
                    problems.append(f"{v[:12]} {_key_str(key)}: {e}")
        return problems


def _same(x: BlobRef | None, y: BlobRef | None) -> bool:
    if x is None or y is None:
        return x is y
    return x.hash == y.hash


def _compat_failures(compat: Mapping | None, intent: Mapping, have: Mapping[str, str]) -> list[str]:
    if not compat:
        return ["no compatibility descriptor"]
    failed = []
    for name, kind in compat.get("fields", []):
        if name not in have:
            failed.append(f"missing field {name!r}")
        elif str(have[name]) != kind:
            failed.append(f"field {name!r} is {have[name]}, needs {kind}")
    for k in ("objective", "metric"):
        want = intent.get(k)
        if want is not None and compat.get(k) is not None and want != compat[k]:
            failed.append(f"{k} {want!r} != {compat[k]!r}")
    return failed

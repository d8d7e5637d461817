"""On-disk persistence for memory indexes and workspaces.

One directory per conversation::

    manifest.json            format version, dimension, config echo, counts, digest
    conversation.json        validated sessions and turns
    nodes.jsonl              node table (position, kind, id)
    edus.jsonl  args.jsonl   EDU and argument records
    edges.sess_edu.jsonl  edges.edu_arg.jsonl  edges.syn.jsonl
    vectors.edu.bin  vectors.arg.bin
    log.jsonl                extraction warnings

A workspace is a directory of such index directories plus ``workspace.json``.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import re
import shutil
import tempfile
from datetime import datetime, timezone
from pathlib import Path

from .errors import DigestMismatch, DimensionMismatch, IndexIntegrityError, MissingIndex, VersionMismatch
from .extraction import PROMPT_VERSION
from .graph import EDGE_KINDS, MemoryGraph
from .index import MemoryIndex
from .model import ArgumentRecord, Edu, EngineConfig, validate_conversation
from .vectors import VectorStore

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
WORKSPACE_MANIFEST = "workspace.json"
_EDGE_FILES = {k: f"edges.{k.replace('-', '_')}.jsonl" for k in EDGE_KINDS}


def _jsonl(rows) -> bytes:
    return "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in rows).encode("utf-8")


def _payload(index: MemoryIndex) -> dict[str, bytes]:
    files = {
        "conversation.json": (json.dumps(index.conversation.to_dict(), ensure_ascii=False, indent=1,
                                         sort_keys=True) + "\n").encode("utf-8"),
        "nodes.jsonl": _jsonl({"node": i, "kind": k, "id": id_} for i, (k, id_) in enumerate(index.graph.nodes)),
        "edus.jsonl": _jsonl(e.to_dict() for e in index.edus),
        "args.jsonl": _jsonl(a.to_dict() for a in index.arguments),
        "log.jsonl": _jsonl({"message": m} for m in index.log),
    }
    for kind, name in _EDGE_FILES.items():
        files[name] = _jsonl([u, v] for u, v in index.graph.edges(kind))
    for ns in ("edu", "arg"):
        buf = io.BytesIO()
        index.store.write_namespace(ns, buf)
        files[f"vectors.{ns}.bin"] = buf.getvalue()
    return files


def payload_digest(files: dict[str, bytes]) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode("utf-8") + b"\0")
        h.update(hashlib.sha256(files[name]).digest())
    return h.hexdigest()


def save_index(index: MemoryIndex, directory: str | os.PathLike, deterministic: bool = False) -> dict:
    """Write ``index`` to ``directory`` atomically and return the manifest.

    Everything is written to a sibling temporary directory that replaces the
    target in a final rename, so an interrupted save leaves any previous
    index untouched.
    """
    if not index.graph.frozen:
        raise IndexIntegrityError("only frozen indexes can be saved")
    target = Path(directory)
    target.parent.mkdir(parents=True, exist_ok=True)
    files = _payload(index)
    manifest = {
        "format_version": FORMAT_VERSION,
        "conversation_id": index.conversation_id,
        "dim": index.dim,
        "mode": index.mode,
        "config": index.config.to_dict(),
        "counts": {
            "sessions": index.graph.num_nodes("session"),
            "edus": index.graph.num_nodes("edu"),
            "args": index.graph.num_nodes("arg"),
            **{kind: index.graph.num_edges(kind) for kind in EDGE_KINDS},
        },
        "providers": dict(sorted(index.providers.items())),
        "prompt_version": PROMPT_VERSION,
        "build_timestamp": None if deterministic else datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "files": sorted(files),
        "digest": payload_digest(files),
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{target.name}.tmp-", dir=target.parent))
    try:
        for name, data in files.items():
            (tmp / name).write_bytes(data)
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        old = None
        if target.exists():
            old = target.parent / f".{target.name}.old-{os.getpid()}"
            os.replace(target, old)
        try:
            os.replace(tmp, target)
        except BaseException:
            if old is not None:
                os.replace(old, target)
            raise
        if old is not None:
            shutil.rmtree(old, ignore_errors=True)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return manifest


def read_manifest(directory: str | os.PathLike) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise MissingIndex(f"no index manifest at {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _read_jsonl(data: bytes) -> list:
    return [json.loads(line) for line in data.decode("utf-8").splitlines() if line.strip()]


def load_index(directory: str | os.PathLike, provider_dim: int | None = None) -> MemoryIndex:
    """Load and verify an index written by :func:`save_index`."""
    root = Path(directory)
    manifest = read_manifest(root)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        hint = "rebuild it with `eventmem index`" if (version or 0) < FORMAT_VERSION else "upgrade eventmem"
        raise VersionMismatch(f"index format version {version} at {root}, this build reads {FORMAT_VERSION}; {hint}")
    dim = int(manifest["dim"])
    if provider_dim is not None and int(provider_dim) != dim:
        raise DimensionMismatch(f"index at {root} has dimension {dim}, embedding provider has {provider_dim}")
    try:
        files = {name: (root / name).read_bytes() for name in manifest["files"]}
    except FileNotFoundError as exc:
        raise DigestMismatch(f"index payload file missing: {exc.filename}") from None
    if payload_digest(files) != manifest["digest"]:
        raise DigestMismatch(f"index at {root} does not match its manifest digest")

    conversation = validate_conversation(json.loads(files["conversation.json"]))
    edus = tuple(Edu.from_dict(d) for d in _read_jsonl(files["edus.jsonl"]))
    arguments = tuple(ArgumentRecord.from_dict(d) for d in _read_jsonl(files["args.jsonl"]))
    graph = MemoryGraph()
    for row in _read_jsonl(files["nodes.jsonl"]):
        graph.add_node(row["kind"], row["id"])
    for kind, name in _EDGE_FILES.items():
        for u, v in _read_jsonl(files[name]):
            graph.add_edge(kind, u, v)
    graph.freeze()
    store = VectorStore(dim)
    for ns in ("edu", "arg"):
        store.read_namespace(ns, io.BytesIO(files[f"vectors.{ns}.bin"]))
    log = [r["message"] for r in _read_jsonl(files.get("log.jsonl", b""))]
    return MemoryIndex(conversation, edus, arguments, graph, store, EngineConfig.from_dict(manifest["config"]),
                       manifest.get("mode", "generic"), dict(manifest.get("providers", {})), log)


def _slug(conversation_id: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9._-]+", "_", conversation_id).strip("._") or "conversation"
    return slug


class Workspace:
    """A directory holding one index per conversation."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    @property
    def manifest_path(self) -> Path:
        return self.root / WORKSPACE_MANIFEST

    def _read(self) -> dict:
        if not self.manifest_path.exists():
            return {"format_version": FORMAT_VERSION, "conversations": {}}
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def conversations(self) -> dict[str, str]:
        return dict(self._read()["conversations"])

    def path_for(self, conversation_id: str) -> Path:
        known = self.conversations()
        if conversation_id in known:
            return self.root / known[conversation_id]
        taken = set(known.values())
        base = name = _slug(conversation_id)
        n = 1
        while name in taken:
            n += 1
            name = f"{base}-{n}"
        return self.root / name

    def has(self, conversation_id: str) -> bool:
        known = self.conversations()
        return conversation_id in known and (self.root / known[conversation_id] / MANIFEST).exists()

    def save(self, index: MemoryIndex, deterministic: bool = False) -> dict:
        path = self.path_for(index.conversation_id)
        manifest = save_index(index, path, deterministic)
        data = self._read()
        data["conversations"][index.conversation_id] = path.name
        data["conversations"] = dict(sorted(data["conversations"].items()))
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.manifest_path)
        return manifest

    def load(self, conversation_id: str, provider_dim: int | None = None) -> MemoryIndex:
        if not self.has(conversation_id):
            raise MissingIndex(f"no index for conversation {conversation_id!r} in {self.root}")
        return load_index(self.path_for(conversation_id), provider_dim)

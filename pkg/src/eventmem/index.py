"""A conversation's complete memory index and the offline build pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .extraction import extract_conversation
from .graph import MemoryGraph, add_synonym_edges, build_graph, graph_stats
from .model import ArgumentRecord, Conversation, Edu, EngineConfig, collect_arguments, validate_conversation
from .providers import ChatProvider, Embedder
from .vectors import VectorStore

logger = logging.getLogger(__name__)


@dataclass
class MemoryIndex:
    conversation: Conversation
    edus: tuple[Edu, ...]
    arguments: tuple[ArgumentRecord, ...]
    graph: MemoryGraph
    store: VectorStore
    config: EngineConfig = field(default_factory=EngineConfig)
    mode: str = "generic"
    providers: dict = field(default_factory=dict)
    log: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._edu_by_id = {e.edu_id: e for e in self.edus}
        self._arg_by_id = {a.arg_id: a for a in self.arguments}

    @property
    def conversation_id(self) -> str:
        return self.conversation.conversation_id

    @property
    def dim(self) -> int:
        return self.store.dim

    def edu(self, edu_id: str) -> Edu:
        return self._edu_by_id[edu_id]

    def has_edu(self, edu_id: str) -> bool:
        return edu_id in self._edu_by_id

    def argument(self, arg_id: str) -> ArgumentRecord:
        return self._arg_by_id[arg_id]

    def stats(self) -> dict:
        return graph_stats(self.graph, self.edus, self.conversation)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MemoryIndex):
            return NotImplemented
        return (self.conversation == other.conversation and self.edus == other.edus
                and self.arguments == other.arguments and self.graph == other.graph
                and self.store == other.store and self.config == other.config
                and self.mode == other.mode)


def assemble_index(conversation: Conversation, edus: Sequence[Edu], embedder: Embedder,
                   config: EngineConfig | None = None, mode: str = "generic",
                   log: list[str] | None = None) -> MemoryIndex:
    """Embed already-extracted EDUs and arguments and build the frozen graph."""
    config = config or EngineConfig()
    arguments = collect_arguments(edus)
    store = VectorStore(embedder.dim)
    if edus:
        store.add_many("edu", [e.edu_id for e in edus], embedder.embed_batch([e.text for e in edus]))
    if arguments:
        store.add_many("arg", [a.arg_id for a in arguments], embedder.embed_batch([a.surface for a in arguments]))
    graph = build_graph(conversation, edus, arguments)
    add_synonym_edges(graph, store, config.delta, config.syn_cap)
    graph.freeze()
    return MemoryIndex(conversation, tuple(edus), tuple(arguments), graph, store, config, mode,
                       {"embedder": getattr(embedder, "name", type(embedder).__name__)}, list(log or []))


def build_index(conversation: Conversation | Mapping, chat: ChatProvider, embedder: Embedder,
                config: EngineConfig | None = None, mode: str = "generic", workers: int = 1) -> MemoryIndex:
    """Extract, embed and link one conversation into a frozen :class:`MemoryIndex`."""
    conv = validate_conversation(conversation)
    log: list[str] = []
    edus = extract_conversation(conv, chat, mode, log, workers)
    index = assemble_index(conv, edus, embedder, config, mode, log)
    index.providers["chat"] = getattr(chat, "name", type(chat).__name__)
    logger.info("indexed %s: %d EDUs, %d arguments, %d edges", conv.conversation_id,
                len(index.edus), len(index.arguments), index.graph.num_edges())
    return index

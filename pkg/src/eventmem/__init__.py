"""Event-centric long-term conversational memory."""
from .errors import EventMemError
from .estimator import EventMemory, check_conversation, check_queries
from .evaluation import QaItem, bleu1, llm_judge, load_dataset, run_eval, token_f1
from .graph import MemoryGraph, add_synonym_edges, build_graph, graph_stats, ppr, select_top_edus
from .index import MemoryIndex, build_index
from .model import ArgumentRecord, Conversation, Edu, EngineConfig, Session, Turn, validate_conversation
from .providers import ChatRequest, HashEmbedder, ProviderPolicy, ScriptedChat, mock_hash_embed
from .retrieval import QueryResult, retrieve_graph, retrieve_lite, run_query
from .store import Workspace, load_index, save_index
from .vectors import VectorStore, cosine

__version__ = "0.1.0"

__all__ = [
    "ArgumentRecord", "ChatRequest", "Conversation", "Edu", "EngineConfig", "EventMemError", "EventMemory",
    "HashEmbedder", "MemoryGraph", "MemoryIndex", "ProviderPolicy", "QaItem", "QueryResult", "ScriptedChat",
    "Session", "Turn", "VectorStore", "Workspace", "add_synonym_edges", "bleu1", "build_graph", "build_index",
    "check_conversation", "check_queries", "cosine", "graph_stats", "llm_judge", "load_dataset", "load_index",
    "mock_hash_embed", "ppr", "retrieve_graph", "retrieve_lite", "run_eval", "run_query", "save_index",
    "select_top_edus", "token_f1", "validate_conversation",
]

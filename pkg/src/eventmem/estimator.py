"""scikit-learn style front end.

:class:`EventMemory` is fit on one conversation (building the memory index)
and then transforms questions into retrieval results or predicts answers::

    mem = EventMemory(chat=chat, embedder=embedder, variant="graph")
    mem.fit(conversation)
    mem.predict(["Where did Bob travel in March 2024?"])
"""
from __future__ import annotations

from typing import Any, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ValidationError
from .evaluation import token_f1
from .index import MemoryIndex, build_index
from .model import Conversation, EngineConfig, validate_conversation
from .retrieval import QueryResult, answer, retrieve_graph, retrieve_lite

_CONFIG_PARAMS = ("delta", "syn_cap", "link_top_ke", "link_top_ka", "seed_cap", "final_top_k", "alpha",
                  "ppr_tol", "ppr_max_iters", "use_graph", "use_edu_filter", "use_arg_filter", "use_cot",
                  "mention_strategy")


def check_conversation(X: Any) -> Conversation:
    """Accept a :class:`Conversation`, its dict form, or a one-element list of either."""
    if isinstance(X, (list, tuple)) and len(X) == 1:
        X = X[0]
    if isinstance(X, Conversation) or isinstance(X, Mapping):
        return validate_conversation(X)
    raise ValidationError(f"expected one conversation, got {type(X).__name__}")


def check_queries(X: Any) -> list[str]:
    """Coerce a question or an iterable of questions to a list of non-empty strings."""
    if isinstance(X, str):
        X = [X]
    if isinstance(X, np.ndarray):
        X = X.ravel().tolist()
    try:
        queries = list(X)
    except TypeError:
        raise ValidationError(f"expected a string or an iterable of strings, got {type(X).__name__}") from None
    for q in queries:
        if not isinstance(q, str) or not q.strip():
            raise ValidationError("every query must be a non-empty string")
    return queries


class EventMemory(BaseEstimator):
    """Event-centric conversational memory as an estimator.

    Parameters mirror :class:`~eventmem.model.EngineConfig` plus the
    providers, the retrieval ``variant`` (``"graph"`` or ``"lite"``), the
    extraction ``mode`` and ``n_jobs`` for concurrent extraction.
    """

    def __init__(self, chat=None, embedder=None, variant="graph", mode="generic", delta=0.9, syn_cap=100,
                 link_top_ke=30, link_top_ka=10, seed_cap=30, final_top_k=10, alpha=0.5, ppr_tol=1e-8,
                 ppr_max_iters=128, use_graph=True, use_edu_filter=True, use_arg_filter=True, use_cot=True,
                 mention_strategy="llm", n_jobs=1):
        self.chat = chat
        self.embedder = embedder
        self.variant = variant
        self.mode = mode
        self.delta = delta
        self.syn_cap = syn_cap
        self.link_top_ke = link_top_ke
        self.link_top_ka = link_top_ka
        self.seed_cap = seed_cap
        self.final_top_k = final_top_k
        self.alpha = alpha
        self.ppr_tol = ppr_tol
        self.ppr_max_iters = ppr_max_iters
        self.use_graph = use_graph
        self.use_edu_filter = use_edu_filter
        self.use_arg_filter = use_arg_filter
        self.use_cot = use_cot
        self.mention_strategy = mention_strategy
        self.n_jobs = n_jobs

    def engine_config(self) -> EngineConfig:
        return EngineConfig(**{p: getattr(self, p) for p in _CONFIG_PARAMS})

    def _check_providers(self):
        if self.chat is None or self.embedder is None:
            raise ValidationError("EventMemory needs both a chat provider and an embedder")
        if self.variant not in ("graph", "lite"):
            raise ValidationError(f"variant must be 'graph' or 'lite', got {self.variant!r}")

    def fit(self, X, y=None):
        """Build the memory index for conversation ``X``; ``y`` is ignored."""
        self._check_providers()
        conversation = check_conversation(X)
        self.index_ = build_index(conversation, self.chat, self.embedder, self.engine_config(), self.mode,
                                  workers=self.n_jobs)
        self.n_edus_ = len(self.index_.edus)
        self.n_arguments_ = len(self.index_.arguments)
        return self

    @classmethod
    def from_index(cls, index: MemoryIndex, **params) -> "EventMemory":
        """Wrap an already built (e.g. loaded) index; engine params default to its config."""
        merged = {**index.config.to_dict(), "mode": index.mode, **params}
        est = cls(**merged)
        est.index_ = index
        est.n_edus_ = len(index.edus)
        est.n_arguments_ = len(index.arguments)
        return est

    def transform(self, X) -> list[QueryResult]:
        """Retrieval results (without answers) for each question."""
        check_is_fitted(self, "index_")
        self._check_providers()
        config = self.engine_config()
        retrieve = retrieve_graph if self.variant == "graph" else retrieve_lite
        return [retrieve(q, self.index_, self.embedder, self.chat, config) for q in check_queries(X)]

    def predict(self, X) -> np.ndarray:
        config = self.engine_config()
        results = self.transform(X)
        answers = [answer(r.query, r.context, self.chat, config.use_cot) for r in results]
        return np.asarray(answers, dtype=object)

    def score(self, X, y) -> float:
        """Mean token F1 of predicted answers against ``y``."""
        gold = check_queries(y) if not isinstance(y, str) else [y]
        pred = self.predict(X)
        if len(gold) != len(pred):
            raise ValidationError("X and y have different lengths")
        return float(np.mean([token_f1(p, g) for p, g in zip(pred, gold)]))

"""Online query pipelines.

``retrieve_lite`` is dense EDU retrieval followed by the recall-oriented
EDU filter. ``retrieve_graph`` adds mention detection, argument retrieval
and filtering, seed initialization and Personalized PageRank over the
memory graph before keeping the top-K EDUs.
"""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyIndex, EmptySeed, MissingEdu
from .extraction import SYSTEM_PROMPT, detect_mentions, filter_args, filter_edus, load_prompt
from .graph import MemoryGraph, SeedVector, ppr, select_top_edus
from .index import MemoryIndex
from .model import EngineConfig, format_timestamp
from .providers import ChatProvider, ChatRequest, Embedder

logger = logging.getLogger(__name__)


@dataclass
class QueryResult:
    query: str
    variant: str
    selected_edus: list[tuple[str, float]]
    context: str = ""
    answer: str | None = None
    trace: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["selected_edus"] = [{"id": i, "score": s} for i, s in self.selected_edus]
        return d

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, **kwargs)


def _empty_graph_trace() -> dict:
    return {"mentions": [], "arg_candidates": [], "arg_filter": None, "seeds": [], "ppr": None}


def retrieve_lite(query: str, index: MemoryIndex, embedder: Embedder, chat: ChatProvider,
                  config: EngineConfig | None = None) -> QueryResult:
    """Top-K_e EDUs by cosine, then the EDU filter; the kept count is adaptive."""
    config = config or index.config
    if not index.edus:
        raise EmptyIndex(f"index {index.conversation_id} holds no EDUs")
    zq = embedder.embed(query)
    candidates = index.store.top_k("edu", zq, config.link_top_ke)
    scores = dict(candidates)
    trace = {"edu_candidates": [{"id": i, "score": s} for i, s in candidates], "edu_filter": None,
             **_empty_graph_trace()}
    if config.use_edu_filter:
        verdict = filter_edus(query, [index.edu(i) for i, _ in candidates], chat)
        trace["edu_filter"] = {"selected": list(verdict.selected), "fail_open": verdict.fail_open}
        selected = [(i, scores[i]) for i in verdict.selected]
        selected.sort(key=lambda p: (-p[1], p[0]))
    else:
        selected = list(candidates)
    context = assemble_context([i for i, _ in selected], index) if selected else ""
    trace["context_blocks"] = len(selected)
    return QueryResult(query, "lite", selected, context, None, trace)


def _best_hits(hits: Iterable[tuple[str, float]]) -> dict[str, float]:
    best: dict[str, float] = {}
    for id_, score in hits:
        score = float(score)
        if id_ not in best or score > best[id_]:
            best[id_] = score
    return best


def init_seeds(graph: MemoryGraph, edu_hits: Iterable[tuple[str, float]], arg_hits: Iterable[tuple[str, float]],
               seed_cap: int = 30) -> tuple[SeedVector, dict]:
    """Personalization vector from filtered EDU and argument similarities.

    Repeated hits for one node keep their maximum similarity, negative
    similarities count as zero, and only the ``seed_cap`` strongest argument
    seeds survive. If every weight ends up zero the seeds fall back to a
    uniform distribution over the filtered EDUs.
    """
    edu_best = {k: max(v, 0.0) for k, v in _best_hits(edu_hits).items()}
    arg_best = {k: max(v, 0.0) for k, v in _best_hits(arg_hits).items()}
    nonzero_args = sorted((p for p in arg_best.items() if p[1] > 0), key=lambda p: (-p[1], p[0]))
    dropped = [a for a, _ in nonzero_args[seed_cap:]]
    for a in dropped:
        arg_best[a] = 0.0
    weights: dict[int, float] = {}
    for e, w in edu_best.items():
        weights[graph.node_index("edu", e)] = w
    for a, w in arg_best.items():
        weights[graph.node_index("arg", a)] = w
    info = {"capped_args": dropped, "fallback": None}
    if sum(weights.values()) <= 0:
        if not edu_best:
            raise EmptySeed("no filtered EDUs or arguments to seed PageRank")
        info["fallback"] = "uniform-edu"
        weights = {graph.node_index("edu", e): 1.0 for e in edu_best}
    return SeedVector(weights).normalize(), info


def retrieve_graph(query: str, index: MemoryIndex, embedder: Embedder, chat: ChatProvider,
                   config: EngineConfig | None = None) -> QueryResult:
    """Full graph pipeline; routes to :func:`retrieve_lite` when ``use_graph`` is off."""
    config = config or index.config
    if not config.use_graph:
        return retrieve_lite(query, index, embedder, chat, config)
    if not index.edus:
        raise EmptyIndex(f"index {index.conversation_id} holds no EDUs")

    # EDU retrieval and mention detection share no state and may overlap
    with ThreadPoolExecutor(max_workers=2) as pool:
        mention_job = pool.submit(detect_mentions, query, chat, config.mention_strategy)
        zq = embedder.embed(query)
        edu_candidates = index.store.top_k("edu", zq, config.link_top_ke)
        mentions = mention_job.result().mentions
    edu_scores = dict(edu_candidates)

    arg_hits: list[tuple[str, float]] = []
    per_mention = []
    if mentions and index.arguments:
        for m, hm in zip(mentions, embedder.embed_batch(list(mentions))):
            hits = index.store.top_k("arg", hm, config.link_top_ka)
            per_mention.append({"mention": m, "args": [{"id": a, "score": s} for a, s in hits]})
            arg_hits.extend(hits)
    arg_scores = _best_hits(arg_hits)
    arg_candidates = sorted(arg_scores.items(), key=lambda p: (-p[1], p[0]))

    trace = {
        "edu_candidates": [{"id": i, "score": s} for i, s in edu_candidates],
        "mentions": list(mentions),
        "mention_hits": per_mention,
        "arg_candidates": [{"id": a, "surface": index.argument(a).surface, "score": s} for a, s in arg_candidates],
        "edu_filter": None,
        "arg_filter": None,
    }
    if config.use_edu_filter:
        verdict = filter_edus(query, [index.edu(i) for i, _ in edu_candidates], chat)
        trace["edu_filter"] = {"selected": list(verdict.selected), "fail_open": verdict.fail_open}
        kept_edus = list(verdict.selected)
    else:
        kept_edus = [i for i, _ in edu_candidates]
    if config.use_arg_filter and arg_candidates:
        verdict = filter_args(query, [index.argument(a) for a, _ in arg_candidates], chat)
        trace["arg_filter"] = {"selected": list(verdict.selected), "fail_open": verdict.fail_open}
        kept_args = list(verdict.selected)
    else:
        kept_args = [a for a, _ in arg_candidates]
    if not kept_edus and not kept_args:
        # nothing survived filtering; seed from the raw EDU candidates instead
        trace["seed_source"] = "unfiltered-edu-candidates"
        kept_edus = [i for i, _ in edu_candidates]

    seeds, seed_info = init_seeds(index.graph, [(e, edu_scores[e]) for e in kept_edus],
                                  [(a, arg_scores[a]) for a in kept_args], config.seed_cap)
    trace["seed_info"] = seed_info
    trace["seeds"] = [
        {"kind": index.graph.nodes[n][0], "id": index.graph.nodes[n][1], "weight": w}
        for n, w in sorted(seeds.weights.items())
    ]
    result = ppr(index.graph, seeds, config.alpha, config.ppr_tol, config.ppr_max_iters)
    trace["ppr"] = {"iterations": result.iterations, "converged": result.converged,
                    "delta_l1": result.delta_l1, "top": result.top(index.graph, 20)}
    selected = select_top_edus(result, index.graph, config.final_top_k)
    context = assemble_context([i for i, _ in selected], index) if selected else ""
    trace["context_blocks"] = len(selected)
    return QueryResult(query, "graph", selected, context, None, trace)


def format_block(edu, index: MemoryIndex) -> str:
    sess = index.conversation.session(edu.session_id)
    when = format_timestamp(sess.timestamp) or format_timestamp(edu.timestamp) or "unknown"
    speakers = [t.speaker for t in sess.turns if t.index in edu.src]
    names = ", ".join(dict.fromkeys(speakers)) or "unknown"
    return f"[Session date: {when} | Speakers: {names}]\n{edu.context_text}"


def assemble_context(edu_ids: Sequence[str], index: MemoryIndex) -> str:
    """One block per EDU in chronological order (session, then EDU ordinal).

    Chunk EDUs contribute their full expanded content instead of the summary.
    """
    order = {s.session_id: i for i, s in enumerate(index.conversation.sessions)}
    edus = []
    for i in edu_ids:
        if not index.has_edu(i):
            raise MissingEdu(f"EDU {i!r} is not in index {index.conversation_id}")
        edus.append(index.edu(i))
    edus.sort(key=lambda e: (order[e.session_id], e.ordinal, e.edu_id))
    return "\n\n".join(format_block(e, index) for e in edus)


_ANSWER_MARK = re.compile(r"answer\s*:", re.IGNORECASE)


def parse_answer(text: str) -> str | None:
    marks = list(_ANSWER_MARK.finditer(text))
    if not marks:
        return None
    return text[marks[-1].end():].strip()


def answer(query: str, context: str, chat: ChatProvider, use_cot: bool = True) -> str:
    """Ask the QA model; with CoT the reply's final ``Answer:`` field is returned."""
    template = load_prompt("qa_cot" if use_cot else "qa_direct")
    prompt = template.substitute(query=query, context=context or "(no memories retrieved)")
    reply = chat.complete(ChatRequest(prompt, SYSTEM_PROMPT, role="qa", key=query))
    if not use_cot:
        return reply.strip()
    parsed = parse_answer(reply)
    if parsed is None:
        logger.warning("QA reply has no 'Answer:' field; returning it whole")
        return reply.strip()
    return parsed


def run_query(query: str, index: MemoryIndex, embedder: Embedder, chat: ChatProvider,
              variant: str = "graph", config: EngineConfig | None = None) -> QueryResult:
    """Retrieve with the chosen variant and answer."""
    config = config or index.config
    if variant == "lite":
        result = retrieve_lite(query, index, embedder, chat, config)
    elif variant == "graph":
        result = retrieve_graph(query, index, embedder, chat, config)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    result.answer = answer(query, result.context, chat, config.use_cot)
    return result

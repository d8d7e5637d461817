"""LLM-driven transformations: sessions to EDUs, EDUs to event arguments,
queries to mentions, and the two recall-oriented relevance filters."""
from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from string import Template
from typing import Any, Callable, Sequence

from .errors import ExtractionParseError, ProviderError, ValidationError
from .model import ArgumentRecord, Conversation, Edu, Session, derive_edu_timestamp, format_timestamp
from .providers import ChatProvider, ChatRequest

logger = logging.getLogger(__name__)

PROMPT_VERSION = "1"
SYSTEM_PROMPT = "You are a careful assistant that follows the requested output format exactly."
ASSISTANT_SPEAKER = "assistant"


@lru_cache(maxsize=None)
def load_prompt(name: str) -> Template:
    text = resources.files("eventmem.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return Template(text)


@dataclass(frozen=True)
class MentionSet:
    query: str
    mentions: tuple[str, ...] = ()


@dataclass(frozen=True)
class FilterVerdict:
    candidate_ids: tuple[str, ...]
    selected: tuple[str, ...]
    fail_open: bool = False

    def __post_init__(self):
        if not set(self.selected) <= set(self.candidate_ids):
            raise ValidationError("filter selected ids outside the candidate list")


def extract_json(text: str) -> Any:
    """Parse a JSON value out of an LLM reply, tolerating code fences and chatter."""
    cleaned = re.sub(r"```(?:json)?", "", text, flags=re.IGNORECASE).strip()
    try:
        return json.loads(cleaned)
    except json.JSONDecodeError:
        pass
    for opener, closer in (("{", "}"), ("[", "]")):
        start, end = cleaned.find(opener), cleaned.rfind(closer)
        if start != -1 and end > start:
            try:
                return json.loads(cleaned[start:end + 1])
            except json.JSONDecodeError:
                continue
    raise ValueError("no JSON value found in reply")


def _ask(chat: ChatProvider, req: ChatRequest, parse: Callable[[str], Any]) -> Any:
    """Send ``req`` and parse the reply; on failure, one repair round trip."""
    reply = chat.complete(req)
    try:
        return parse(reply)
    except (ValueError, KeyError, TypeError) as exc:
        first_error = exc
    repair = replace(req, user=f"{req.user}\n\nYour previous reply could not be parsed ({first_error}). "
                                f"Reply again using exactly the requested format.")
    reply = chat.complete(repair)
    try:
        return parse(reply)
    except (ValueError, KeyError, TypeError) as exc:
        raise ExtractionParseError(f"{req.role}: unparsable reply after repair: {exc}") from exc


def render_turns(session: Session) -> str:
    return "\n".join(f"[{t.index}] {t.speaker}: {t.text}" for t in session.turns)


def _session_vars(session: Session, speakers) -> dict:
    return {
        "date": format_timestamp(session.timestamp) or "unknown",
        "speakers": ", ".join(speakers or session.speakers),
        "turns": render_turns(session),
    }


def _parse_edu_reply(reply: str) -> dict:
    data = extract_json(reply)
    if isinstance(data, list):
        data = {"edus": data}
    if not isinstance(data, dict) or not isinstance(data.get("edus", []), list):
        raise ValueError("expected an object with an 'edus' list")
    for item in data.get("edus", []):
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise ValueError("each EDU needs a 'text' string")
    for item in data.get("chunks", []) or []:
        if not isinstance(item, dict) or not isinstance(item.get("summary"), str) \
                or not isinstance(item.get("content"), str):
            raise ValueError("each chunk needs 'summary' and 'content' strings")
    return data


def _clip_src(raw, allowed: frozenset[int]) -> frozenset[int]:
    out = set()
    for v in raw if isinstance(raw, (list, tuple)) else [raw] if raw is not None else []:
        try:
            i = int(v)
        except (TypeError, ValueError):
            continue
        if i in allowed:
            out.add(i)
    return frozenset(out)


def extract_edus(session: Session, chat: ChatProvider, conversation_speakers: Sequence[str] = (),
                 mode: str = "generic", log: list[str] | None = None,
                 assistant_speaker: str = ASSISTANT_SPEAKER) -> list[Edu]:
    """Decompose one session into EDUs.

    ``mode="assistant-chunking"`` issues a second, assistant-only call that
    also returns structured chunks; those become ``kind="chunk"`` EDUs whose
    ``text`` is the summary. A session whose reply cannot be parsed after one
    repair retry yields no EDUs and a warning in ``log``.
    """
    if mode not in ("generic", "assistant-chunking"):
        raise ValidationError(f"unknown extraction mode {mode!r}")
    log = log if log is not None else []
    variables = _session_vars(session, conversation_speakers)
    key = render_turns(session)
    all_turns = session.turn_indices
    assistant_turns = frozenset(t.index for t in session.turns if t.speaker.lower() == assistant_speaker.lower())

    raw_edus: list[dict] = []
    raw_chunks: list[dict] = []
    try:
        focus = ""
        if mode == "assistant-chunking":
            focus = "\nExtract EDUs only from turns spoken by the user; ignore assistant turns.\n"
        prompt = load_prompt("edu_extraction").substitute(variables, focus=focus)
        data = _ask(chat, ChatRequest(prompt, SYSTEM_PROMPT, role="edu", key=key), _parse_edu_reply)
        raw_edus += data.get("edus", [])
        if mode == "assistant-chunking" and assistant_turns:
            prompt = load_prompt("edu_assistant").substitute(variables, assistant=assistant_speaker)
            data = _ask(chat, ChatRequest(prompt, SYSTEM_PROMPT, role="edu_assistant", key=key),
                        _parse_edu_reply)
            raw_edus += data.get("edus", [])
            raw_chunks = list(data.get("chunks", []) or [])
    except ExtractionParseError as exc:
        msg = f"session {session.session_id}: {exc}; session skipped"
        logger.warning(msg)
        log.append(msg)
        return []

    edus: list[Edu] = []
    for item in raw_edus:
        text = item["text"].strip()
        if not text:
            continue
        src = _clip_src(item.get("src"), all_turns)
        if not src:
            log.append(f"session {session.session_id}: EDU without valid source turns: {text[:60]!r}")
        ordinal = len(edus)
        edus.append(Edu(
            edu_id=f"{session.session_id}:{ordinal}",
            session_id=session.session_id,
            ordinal=ordinal,
            text=text,
            src=src,
            timestamp=derive_edu_timestamp(session.timestamp, item.get("time"), log),
        ))
    for item in raw_chunks:
        summary, content = item["summary"].strip(), item["content"].strip()
        src = _clip_src(item.get("src"), assistant_turns)
        if not summary or not content or not src:
            log.append(f"session {session.session_id}: dropped chunk without assistant source: {summary[:60]!r}")
            continue
        ordinal = len(edus)
        edus.append(Edu(
            edu_id=f"{session.session_id}:{ordinal}",
            session_id=session.session_id,
            ordinal=ordinal,
            text=summary,
            src=src,
            timestamp=session.timestamp,
            kind="chunk",
            expanded_text=content,
        ))
    return edus


def _parse_args_reply(reply: str) -> tuple[str, list]:
    data = extract_json(reply)
    if not isinstance(data, dict):
        raise ValueError("expected an object")
    pairs = data.get("arguments", [])
    if not isinstance(pairs, list):
        raise ValueError("'arguments' must be a list")
    return str(data.get("event_type") or ""), pairs


def extract_arguments(edu: Edu, chat: ChatProvider, log: list[str] | None = None) -> tuple[str, list[tuple[str, str]]]:
    """Event type and (role, argument) pairs for one EDU.

    Chunk EDUs are processed on their summary text. Pairs with an empty
    argument are dropped.
    """
    prompt = load_prompt("argument_extraction").substitute(text=edu.text)
    try:
        event_type, pairs = _ask(chat, ChatRequest(prompt, SYSTEM_PROMPT, role="args", key=edu.text),
                                 _parse_args_reply)
    except ExtractionParseError as exc:
        msg = f"EDU {edu.edu_id}: {exc}; no arguments kept"
        logger.warning(msg)
        if log is not None:
            log.append(msg)
        return "", []
    out: list[tuple[str, str]] = []
    for p in pairs:
        if isinstance(p, dict):
            role, arg = p.get("role", ""), p.get("argument", "")
        elif isinstance(p, (list, tuple)) and len(p) == 2:
            role, arg = p
        else:
            continue
        arg = str(arg or "").strip()
        if not arg:
            continue
        pair = (str(role or "").strip(), arg)
        if pair not in out:
            out.append(pair)
    return event_type.strip(), out


def _dedup_mentions(items) -> tuple[str, ...]:
    seen: dict[str, str] = {}
    for m in items:
        if not isinstance(m, str):
            continue
        m = m.strip()
        if m and m.lower() not in seen:
            seen[m.lower()] = m
    return tuple(seen.values())


def _parse_mentions(reply: str) -> list:
    data = extract_json(reply)
    if isinstance(data, dict):
        data = data.get("mentions")
    if not isinstance(data, list):
        raise ValueError("expected a 'mentions' list")
    return data


def detect_mentions(query: str, chat: ChatProvider, strategy: str = "llm") -> MentionSet:
    """Surface mentions in ``query``; failures degrade to an empty set."""
    if not query.strip():
        raise ValidationError("query is empty")
    name, role = ("mention_detection", "mentions") if strategy == "llm" else ("mention_detection_ner", "mentions_ner")
    prompt = load_prompt(name).substitute(query=query)
    try:
        items = _ask(chat, ChatRequest(prompt, SYSTEM_PROMPT, role=role, key=query), _parse_mentions)
    except (ProviderError, ExtractionParseError) as exc:
        logger.warning("mention detection failed (%s); continuing without mentions", exc)
        return MentionSet(query, ())
    return MentionSet(query, _dedup_mentions(items))


_INDEX_LIST = re.compile(r"^\s*\[?\s*(\d+(\s*,\s*\d+)*)?\s*\]?\s*\.?\s*$")


def parse_selection(reply: str) -> list[int]:
    """1-based candidate numbers from a filter reply.

    Accepts ``{"selected": [..]}``, a bare JSON list, or ``"1, 4, 7"``;
    ``"none"`` means an explicit empty selection.
    """
    text = re.sub(r"```(?:json)?", "", reply, flags=re.IGNORECASE).strip()
    if text.lower() in ("none", "none."):
        return []
    if _INDEX_LIST.match(text):
        return [int(x) for x in re.findall(r"\d+", text)]
    data = extract_json(text)
    if isinstance(data, dict):
        data = data.get("selected")
    if not isinstance(data, list):
        raise ValueError("expected a list of candidate numbers")
    out = []
    for v in data:
        if isinstance(v, bool) or not isinstance(v, (int, str)):
            raise ValueError(f"bad candidate number {v!r}")
        out.append(int(v))
    return out


def _run_filter(query: str, ids: Sequence[str], texts: Sequence[str], chat: ChatProvider,
                prompt_name: str, role: str) -> FilterVerdict:
    ids = tuple(ids)
    if not ids:
        return FilterVerdict((), ())
    listing = "\n".join(f"{i}. {t}" for i, t in enumerate(texts, start=1))
    prompt = load_prompt(prompt_name).substitute(query=query, candidates=listing)
    try:
        numbers = _ask(chat, ChatRequest(prompt, SYSTEM_PROMPT, role=role, key=query), parse_selection)
    except (ExtractionParseError, ProviderError) as exc:
        logger.warning("%s failed (%s); keeping all %d candidates", role, exc, len(ids))
        return FilterVerdict(ids, ids, fail_open=True)
    chosen = {n for n in numbers if 1 <= n <= len(ids)}
    return FilterVerdict(ids, tuple(ids[n - 1] for n in sorted(chosen)))


def filter_edus(query: str, candidates: Sequence[Edu], chat: ChatProvider) -> FilterVerdict:
    """Recall-biased relevance filter over retrieved EDUs (one chat call)."""
    return _run_filter(query, [e.edu_id for e in candidates], [e.text for e in candidates], chat,
                       "edu_filter", "edu_filter")


def filter_args(query: str, candidates: Sequence[ArgumentRecord], chat: ChatProvider) -> FilterVerdict:
    return _run_filter(query, [a.arg_id for a in candidates], [a.surface for a in candidates], chat,
                       "arg_filter", "arg_filter")


def extract_conversation(conversation: Conversation, chat: ChatProvider, mode: str = "generic",
                         log: list[str] | None = None, workers: int = 1) -> list[Edu]:
    """Run EDU and argument extraction over a whole conversation.

    Sessions, and then EDUs, are processed concurrently with ``workers``
    threads; results are merged in session order and EDU ordinal, so the
    output does not depend on scheduling.
    """
    log = log if log is not None else []
    speakers = conversation.speakers

    def one_session(sess):
        local: list[str] = []
        return extract_edus(sess, chat, speakers, mode, local), local

    def one_edu(edu):
        local: list[str] = []
        event_type, pairs = extract_arguments(edu, chat, local)
        return replace(edu, event_type=event_type or None, role_args=tuple(pairs)), local

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_session = list(pool.map(one_session, conversation.sessions))
        edus = []
        for found, local in per_session:
            edus.extend(found)
            log.extend(local)
        enriched = list(pool.map(one_edu, edus))
    out = []
    for edu, local in enriched:
        out.append(edu)
        log.extend(local)
    return out

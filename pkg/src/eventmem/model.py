"""Domain types shared across the package and conversation validation."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from typing import Any, Iterable, Mapping

from dateutil import parser as date_parser

from .errors import DuplicateSessionId, EmptySession, UnparsableTimestamp, ValidationError

logger = logging.getLogger(__name__)

_WEEKDAY_PAREN = re.compile(r"\(\s*[A-Za-z]{2,9}\.?\s*\)")


def parse_timestamp(value: str | datetime | None, default: datetime | None = None) -> datetime | None:
    """Parse a calendar date-time and truncate it to minute precision.

    Accepts ISO-8601 strings as well as the looser forms found in dialogue
    datasets (``"2023/05/30 (Tue) 21:54"``, ``"1:56 pm on 8 May, 2023"``,
    ``"March 2024"``). Fields missing from the string are taken from
    ``default``, which itself defaults to January 1st, 00:00, so a
    month-only value lands on the first day of that month.

    Raises :class:`UnparsableTimestamp` when nothing date-like is found.
    """
    if value is None:
        return None
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if not text:
            raise UnparsableTimestamp(value)
        try:
            dt = datetime.fromisoformat(text)
        except ValueError:
            cleaned = _WEEKDAY_PAREN.sub(" ", text)
            base = default or datetime(1900, 1, 1)
            base = base.replace(day=1, hour=0, minute=0, second=0, microsecond=0)
            try:
                dt = date_parser.parse(cleaned, default=base, fuzzy=True)
            except (ValueError, OverflowError, date_parser.ParserError):
                raise UnparsableTimestamp(value) from None
    if dt.tzinfo is not None:
        dt = dt.replace(tzinfo=None)
    return dt.replace(second=0, microsecond=0)


def format_timestamp(dt: datetime | None) -> str | None:
    # isoformat zero-pads years below 1000, strftime("%Y") does not
    return None if dt is None else dt.replace(second=0, microsecond=0, tzinfo=None).isoformat(timespec="minutes")


@dataclass(frozen=True)
class Turn:
    index: int
    speaker: str
    text: str


@dataclass(frozen=True)
class Session:
    session_id: str
    turns: tuple[Turn, ...]
    timestamp: datetime | None = None

    @property
    def turn_indices(self) -> frozenset[int]:
        return frozenset(t.index for t in self.turns)

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(t.speaker for t in self.turns))

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "timestamp": format_timestamp(self.timestamp),
            "turns": [{"speaker": t.speaker, "text": t.text} for t in self.turns],
        }


@dataclass(frozen=True)
class Conversation:
    conversation_id: str
    sessions: tuple[Session, ...]

    @property
    def speakers(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(s for sess in self.sessions for s in sess.speakers))

    def session(self, session_id: str) -> Session:
        for sess in self.sessions:
            if sess.session_id == session_id:
                return sess
        raise KeyError(session_id)

    def to_dict(self) -> dict:
        return {
            "conversation_id": self.conversation_id,
            "sessions": [s.to_dict() for s in self.sessions],
        }


@dataclass(frozen=True)
class Edu:
    """One event-like memory unit.

    ``text`` is what gets embedded and retrieved. For ``kind="chunk"`` it is
    the short summary of a long assistant block and ``expanded_text`` holds
    the block itself, which is only shown to the QA model.
    """

    edu_id: str
    session_id: str
    ordinal: int
    text: str
    src: frozenset[int] = frozenset()
    timestamp: datetime | None = None
    kind: str = "atomic"
    expanded_text: str | None = None
    event_type: str | None = None
    role_args: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValidationError(f"EDU {self.edu_id} has empty text")
        if self.kind not in ("atomic", "chunk"):
            raise ValidationError(f"unknown EDU kind {self.kind!r}")
        if self.kind == "chunk" and not (self.expanded_text and self.expanded_text.strip()):
            raise ValidationError(f"chunk EDU {self.edu_id} needs expanded_text")
        if self.kind == "atomic" and self.expanded_text is not None:
            raise ValidationError(f"atomic EDU {self.edu_id} cannot carry expanded_text")
        for _, arg in self.role_args:
            if not arg.strip():
                raise ValidationError(f"EDU {self.edu_id} has an empty argument")

    @property
    def context_text(self) -> str:
        return self.expanded_text if self.kind == "chunk" else self.text

    def to_dict(self) -> dict:
        return {
            "edu_id": self.edu_id,
            "session_id": self.session_id,
            "ordinal": self.ordinal,
            "text": self.text,
            "src": sorted(self.src),
            "timestamp": format_timestamp(self.timestamp),
            "kind": self.kind,
            "expanded_text": self.expanded_text,
            "event_type": self.event_type,
            "role_args": [list(p) for p in self.role_args],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Edu":
        return cls(
            edu_id=d["edu_id"],
            session_id=d["session_id"],
            ordinal=int(d["ordinal"]),
            text=d["text"],
            src=frozenset(int(i) for i in d.get("src", ())),
            timestamp=parse_timestamp(d.get("timestamp")),
            kind=d.get("kind", "atomic"),
            expanded_text=d.get("expanded_text"),
            event_type=d.get("event_type"),
            role_args=tuple((str(r), str(a)) for r, a in d.get("role_args", ())),
        )


def normalize_argument(surface: str) -> str:
    return surface.strip().lower()


@dataclass(frozen=True)
class ArgumentRecord:
    arg_id: str
    surface: str
    norm_key: str
    edu_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"arg_id": self.arg_id, "surface": self.surface, "norm_key": self.norm_key,
                "edu_ids": list(self.edu_ids)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArgumentRecord":
        return cls(d["arg_id"], d["surface"], d["norm_key"], tuple(d["edu_ids"]))


class ArgumentTable:
    """Deduplicating collector for the conversation-wide argument set.

    Arguments are keyed by their lowercased, trimmed surface. The first
    surface seen for a key is kept as the canonical form and ids are issued
    in first-seen order, so the result depends only on insertion order.
    """

    def __init__(self):
        self._surface: dict[str, str] = {}
        self._edus: dict[str, dict[str, None]] = {}

    def add(self, surface: str, edu_id: str) -> str:
        surface = surface.strip()
        if not surface:
            raise ValidationError("argument surface is empty")
        key = normalize_argument(surface)
        self._surface.setdefault(key, surface)
        self._edus.setdefault(key, {})[edu_id] = None
        return key

    def __len__(self):
        return len(self._surface)

    def records(self) -> list[ArgumentRecord]:
        return [
            ArgumentRecord(f"a{i}", self._surface[key], key, tuple(self._edus[key]))
            for i, key in enumerate(self._surface)
        ]


def collect_arguments(edus: Iterable[Edu]) -> list[ArgumentRecord]:
    table = ArgumentTable()
    for edu in edus:
        for _, arg in edu.role_args:
            table.add(arg, edu.edu_id)
    return table.records()


@dataclass(frozen=True)
class EngineConfig:
    delta: float = 0.9
    syn_cap: int = 100
    link_top_ke: int = 30
    link_top_ka: int = 10
    seed_cap: int = 30
    final_top_k: int = 10
    alpha: float = 0.5
    ppr_tol: float = 1e-8
    ppr_max_iters: int = 128
    use_graph: bool = True
    use_edu_filter: bool = True
    use_arg_filter: bool = True
    use_cot: bool = True
    mention_strategy: str = "llm"

    def __post_init__(self):
        if not -1.0 <= self.delta <= 1.0:
            raise ValidationError(f"delta must lie in [-1, 1], got {self.delta}")
        for name in ("syn_cap", "link_top_ke", "link_top_ka", "seed_cap", "final_top_k", "ppr_max_iters"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValidationError(f"alpha must lie strictly inside (0, 1), got {self.alpha}")
        if self.ppr_tol <= 0:
            raise ValidationError("ppr_tol must be positive")
        if self.mention_strategy not in ("llm", "ner"):
            raise ValidationError(f"unknown mention strategy {self.mention_strategy!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "EngineConfig":
        return replace(self, **changes)


def derive_edu_timestamp(session_ts: datetime | None, extractor_hint: str | None,
                         log: list[str] | None = None) -> datetime | None:
    """Pick an EDU timestamp: a parsable extractor hint wins over the session date."""
    if extractor_hint is not None and str(extractor_hint).strip():
        try:
            return parse_timestamp(extractor_hint, default=session_ts)
        except UnparsableTimestamp:
            msg = f"unparsable EDU time hint {extractor_hint!r}; using session timestamp"
            logger.warning(msg)
            if log is not None:
                log.append(msg)
    return session_ts


def _coerce_session(raw: Session | Mapping[str, Any], position: int) -> Session:
    if isinstance(raw, Session):
        sid, ts, turns = raw.session_id, raw.timestamp, [(t.index, t.speaker, t.text) for t in raw.turns]
    else:
        sid = raw.get("session_id")
        if sid is None:
            sid = f"s{position}"
        ts = raw.get("timestamp")
        turns = []
        for i, t in enumerate(raw.get("turns") or ()):
            turns.append((t.get("index", i), t.get("speaker"), t.get("text")))
    sid = str(sid)
    if not turns:
        raise EmptySession(f"session {sid!r} has no turns")
    ts = parse_timestamp(ts)
    ordered = sorted(enumerate(turns), key=lambda p: (int(p[1][0]), p[0]))
    norm = []
    for new_index, (_, (_, speaker, text)) in enumerate(ordered):
        speaker = (speaker or "").strip() if isinstance(speaker, str) else speaker
        if not speaker or not isinstance(speaker, str):
            raise ValidationError(f"session {sid!r} turn {new_index} has no speaker")
        if not isinstance(text, str) or not text.strip():
            raise ValidationError(f"session {sid!r} turn {new_index} has empty text")
        norm.append(Turn(new_index, speaker, text))
    return Session(sid, tuple(norm), ts)


def validate_conversation(raw: Conversation | Mapping[str, Any]) -> Conversation:
    """Check and normalize a conversation.

    Sessions are sorted by timestamp, with undated sessions kept in input
    order after the dated ones; turn indices are renumbered from 0. The
    operation is idempotent.
    """
    if isinstance(raw, Conversation):
        cid, sessions = raw.conversation_id, list(raw.sessions)
    else:
        if "sessions" not in raw:
            raise ValidationError("conversation has no 'sessions' field")
        cid, sessions = raw.get("conversation_id", "conversation"), list(raw["sessions"])
    coerced = [_coerce_session(s, i) for i, s in enumerate(sessions)]
    seen = set()
    for s in coerced:
        if s.session_id in seen:
            raise DuplicateSessionId(f"duplicate session id {s.session_id!r}")
        seen.add(s.session_id)
    dated = sorted((s for s in coerced if s.timestamp is not None), key=lambda s: s.timestamp)
    undated = [s for s in coerced if s.timestamp is None]
    return Conversation(str(cid), tuple(dated + undated))

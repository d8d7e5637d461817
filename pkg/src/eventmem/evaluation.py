"""Dataset loaders, QA metrics, LLM judging and evaluation reports."""
from __future__ import annotations

import json
import logging
import math
import os
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .errors import EventMemError, FormatError, MissingIndex, ProviderError, ValidationError
from .extraction import SYSTEM_PROMPT, extract_json, load_prompt
from .index import MemoryIndex
from .model import Conversation, EngineConfig, format_timestamp, parse_timestamp, validate_conversation
from .providers import ChatProvider, ChatRequest, Embedder
from .retrieval import run_query

logger = logging.getLogger(__name__)

LOCOMO_CATEGORIES = {1: "Multi-Hop", 2: "Temporal Reasoning", 3: "Open-Domain", 4: "Single-Hop", 5: "Adversarial"}
ADVERSARIAL = "Adversarial"
LONGMEMEVAL_QUERY_FORMAT = "%Y/%m/%d (%a) %H:%M"


@dataclass(frozen=True)
class QaItem:
    question: str
    gold_answer: str
    category: str
    conversation_id: str
    question_date: datetime | None = None

    def __post_init__(self):
        if not self.question.strip() or not self.gold_answer.strip():
            raise ValidationError("QA items need a question and a gold answer")

    def to_dict(self) -> dict:
        return {"question": self.question, "gold_answer": self.gold_answer, "category": self.category,
                "conversation_id": self.conversation_id, "question_date": format_timestamp(self.question_date)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QaItem":
        gold = d.get("gold_answer", d.get("answer"))
        return cls(str(d["question"]), str(gold if gold is not None else ""), str(d.get("category", "uncategorized")),
                   str(d["conversation_id"]), parse_timestamp(d.get("question_date")))


# -- loaders ---------------------------------------------------------------

def _read_json(path: Path) -> Any:
    if not path.exists():
        raise FormatError("file not found", path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None


def wrap_longmemeval_question(question: str, question_date: datetime | None) -> str:
    if question_date is None:
        return f"User: {question}"
    return f"Date of user query: {question_date.strftime(LONGMEMEVAL_QUERY_FORMAT)}\nUser: {question}"


def _session_number(key: str) -> int:
    return int(key.rsplit("_", 1)[1])


def _load_locomo(path: Path, data: Any) -> tuple[list[Conversation], list[QaItem]]:
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise FormatError("expected a list of LoCoMo samples", path)
    conversations, items = [], []
    for n, sample in enumerate(data):
        try:
            cid = str(sample.get("sample_id", f"locomo-{n}"))
            conv = sample["conversation"]
            keys = sorted((k for k in conv if re.fullmatch(r"session_\d+", k)), key=_session_number)
            sessions = []
            for k in keys:
                turns = [{"speaker": t["speaker"], "text": t.get("text", "")} for t in conv[k]
                         if str(t.get("text", "")).strip()]
                if not turns:
                    continue
                sessions.append({"session_id": k, "timestamp": conv.get(f"{k}_date_time"), "turns": turns})
            conversations.append(validate_conversation({"conversation_id": cid, "sessions": sessions}))
            for qa in sample.get("qa", []):
                category = LOCOMO_CATEGORIES.get(int(qa.get("category", 0)), str(qa.get("category")))
                if category == ADVERSARIAL or "answer" not in qa:
                    continue
                items.append(QaItem(str(qa["question"]), str(qa["answer"]), category, cid))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"sample {n}: {type(exc).__name__}: {exc}", path) from None
    return conversations, items


def _load_longmemeval(path: Path, data: Any) -> tuple[list[Conversation], list[QaItem]]:
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list):
        raise FormatError("expected a list of LongMemEval items", path)
    conversations, items = [], []
    for n, item in enumerate(data):
        try:
            qid = str(item["question_id"])
            if qid.endswith("_abs"):
                continue
            ids = item.get("haystack_session_ids") or [f"session_{i}" for i in range(len(item["haystack_sessions"]))]
            dates = item.get("haystack_dates") or [None] * len(ids)
            sessions, seen = [], Counter()
            for sid, date, turns in zip(ids, dates, item["haystack_sessions"]):
                seen[sid] += 1
                sid = sid if seen[sid] == 1 else f"{sid}#{seen[sid]}"
                turns = [{"speaker": t["role"], "text": t["content"]} for t in turns if str(t.get("content", "")).strip()]
                if turns:
                    sessions.append({"session_id": sid, "timestamp": date, "turns": turns})
            conversations.append(validate_conversation({"conversation_id": qid, "sessions": sessions}))
            qdate = parse_timestamp(item.get("question_date"))
            items.append(QaItem(wrap_longmemeval_question(str(item["question"]), qdate), str(item["answer"]),
                                str(item.get("question_type", "uncategorized")), qid, qdate))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"item {n}: {type(exc).__name__}: {exc}", path) from None
    return conversations, items


def _load_native(path: Path, data: Any) -> tuple[list[Conversation], list[QaItem]]:
    if isinstance(data, list):
        data = {"qa": data} if data and "question" in data[0] else {"conversations": data}
    if not isinstance(data, dict):
        raise FormatError("expected an object", path)
    if "sessions" in data:
        data = {"conversations": [data]}
    try:
        conversations = [validate_conversation(c) for c in data.get("conversations", [])]
        items = [QaItem.from_dict(q) for q in data.get("qa", data.get("qa_items", []))]
    except EventMemError as exc:
        raise FormatError(str(exc), path) from None
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{type(exc).__name__}: {exc}", path) from None
    return conversations, items


_LOADERS: dict[str, Callable] = {"native": _load_native, "locomo-like": _load_locomo,
                                 "longmemeval-like": _load_longmemeval}


def load_dataset(path: str | os.PathLike, format: str = "native") -> tuple[list[Conversation], list[QaItem]]:
    """Read conversations and QA items, normalized to the native schema.

    ``locomo-like`` maps category codes 1-4 to names and drops adversarial
    questions; ``longmemeval-like`` drops abstention items and prefixes each
    question with its date line and ``"User: "``.
    """
    if format not in _LOADERS:
        raise ValueError(f"unknown dataset format {format!r}; choose from {sorted(_LOADERS)}")
    path = Path(path)
    return _LOADERS[format](path, _read_json(path))


def save_dataset(path: str | os.PathLike, conversations: Sequence[Conversation], qa_items: Sequence[QaItem]) -> None:
    doc = {"conversations": [c.to_dict() for c in conversations], "qa": [q.to_dict() for q in qa_items]}
    Path(path).write_text(json.dumps(doc, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# -- metrics ---------------------------------------------------------------

_PUNCT = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ASCII punctuation, split on whitespace."""
    return str(text).lower().translate(_PUNCT).split()


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = tokenize(prediction), tokenize(gold)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(pred), overlap / len(ref)
    return 2 * precision * recall / (precision + recall)


def bleu1(prediction: str, gold: str) -> float:
    """Clipped unigram precision times the brevity penalty."""
    pred, ref = tokenize(prediction), tokenize(gold)
    if not pred or not ref:
        return 0.0
    clipped = sum((Counter(pred) & Counter(ref)).values())
    precision = clipped / len(pred)
    bp = math.exp(1 - len(ref) / len(pred)) if len(pred) < len(ref) else 1.0
    return precision * bp


@dataclass(frozen=True)
class JudgeResult:
    mean: float | None
    std: float | None
    labels: tuple[int | None, ...]

    @property
    def runs_ok(self) -> int:
        return sum(1 for x in self.labels if x is not None)


def parse_judge_label(reply: str) -> int:
    try:
        data = extract_json(reply)
        if isinstance(data, dict) and "label" in data:
            data = data["label"]
        if isinstance(data, (int, float)) and data in (0, 1):
            return int(data)
        if isinstance(data, str):
            reply = data
    except ValueError:
        pass
    text = reply.strip().upper()
    if text in ("1", "CORRECT") or text.startswith("CORRECT"):
        return 1
    if text in ("0", "WRONG", "INCORRECT") or text.startswith(("WRONG", "INCORRECT")):
        return 0
    raise ValueError(f"cannot read a judge label from {reply[:80]!r}")


def llm_judge(question: str, gold: str, prediction: str, chat: ChatProvider, runs: int = 3) -> JudgeResult:
    """Independent 0/1 judgements; mean and population std over the runs that succeeded."""
    prompt = load_prompt("judge").substitute(question=question, gold=gold, prediction=prediction)
    labels: list[int | None] = []
    for _ in range(runs):
        try:
            reply = chat.complete(ChatRequest(prompt, SYSTEM_PROMPT, role="judge", key=question))
            labels.append(parse_judge_label(reply))
        except (ProviderError, ValueError) as exc:
            logger.warning("judge run failed (%s); excluded", exc)
            labels.append(None)
    ok = [x for x in labels if x is not None]
    if not ok:
        return JudgeResult(None, None, tuple(labels))
    return JudgeResult(float(np.mean(ok)), float(np.std(ok)), tuple(labels))


# -- batch evaluation -------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    rows: list[dict] = field(default_factory=list)
    categories: dict[str, dict] = field(default_factory=dict)
    overall: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2, sort_keys=True)

    def table(self) -> str:
        header = ("Category", "N", "LLM Score", "F1", "BLEU-1", "Ctx tokens")
        lines = []
        groups = list(self.categories.items()) + ([("Overall", self.overall)] if self.overall else [])
        for name, agg in groups:
            if agg.get("llm_score") is None:
                llm = "n/a"
            else:
                llm = f"{agg['llm_score']:.3f} ± {agg['llm_std']:.3f}"
            lines.append((name, str(agg["n"]), llm, f"{agg['f1']:.3f}", f"{agg['bleu1']:.3f}",
                          f"{agg['context_tokens']:.1f}"))
        widths = [max(len(r[i]) for r in [header, *lines]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
        out = [fmt(header), "  ".join("-" * w for w in widths)]
        out += [fmt(r) for r in lines]
        return "\n".join(out)


def aggregate(rows: Sequence[dict]) -> dict:
    n = len(rows)
    judged = [r for r in rows if r["llm_mean"] is not None]
    agg = {
        "n": n,
        "judged": len(judged),
        "unjudged": n - len(judged),
        "f1": float(np.mean([r["f1"] for r in rows])) if rows else 0.0,
        "bleu1": float(np.mean([r["bleu1"] for r in rows])) if rows else 0.0,
        "context_tokens": float(np.mean([r["context_tokens"] for r in rows])) if rows else 0.0,
        "llm_score": None,
        "llm_std": None,
    }
    if judged:
        agg["llm_score"] = float(np.mean([r["llm_mean"] for r in judged]))
        runs = max(len(r["judge_labels"]) for r in judged)
        per_run = []
        for k in range(runs):
            vals = [r["judge_labels"][k] for r in judged if k < len(r["judge_labels"])
                    and r["judge_labels"][k] is not None]
            if vals:
                per_run.append(float(np.mean(vals)))
        agg["llm_std"] = float(np.std(per_run)) if per_run else 0.0
    return agg


def run_eval(indexes: Mapping[str, MemoryIndex] | Callable[[str], MemoryIndex], qa_items: Sequence[QaItem],
             variant: str, chat: ChatProvider, embedder: Embedder, config: EngineConfig | None = None,
             judge_chat: ChatProvider | None = None, judge_runs: int = 3, workers: int = 1) -> EvalReport:
    """Answer every QA item with the chosen pipeline and score it.

    Context size is counted in whitespace tokens. Items may run in parallel;
    rows keep input order.
    """
    report = EvalReport(variant)
    if not qa_items:
        return report
    lookup = indexes if callable(indexes) else None
    cache: dict[str, MemoryIndex] = {}
    for cid in dict.fromkeys(q.conversation_id for q in qa_items):
        if lookup is not None:
            cache[cid] = lookup(cid)
        elif cid in indexes:
            cache[cid] = indexes[cid]
        else:
            raise MissingIndex(f"no index for conversation {cid!r}")
    judge_chat = judge_chat or chat

    def one(item: QaItem) -> dict:
        index = cache[item.conversation_id]
        result = run_query(item.question, index, embedder, chat, variant, config or index.config)
        prediction = result.answer or ""
        verdict = llm_judge(item.question, item.gold_answer, prediction, judge_chat, judge_runs)
        return {
            "question": item.question,
            "gold_answer": item.gold_answer,
            "prediction": prediction,
            "category": item.category,
            "conversation_id": item.conversation_id,
            "f1": token_f1(prediction, item.gold_answer),
            "bleu1": bleu1(prediction, item.gold_answer),
            "llm_mean": verdict.mean,
            "llm_std": verdict.std,
            "judge_labels": list(verdict.labels),
            "context_tokens": len(result.context.split()),
            "selected_edus": [i for i, _ in result.selected_edus],
        }

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        report.rows = list(pool.map(one, qa_items))
    by_cat: dict[str, list[dict]] = {}
    for row in report.rows:
        by_cat.setdefault(row["category"], []).append(row)
    report.categories = {c: aggregate(rows) for c, rows in by_cat.items()}
    report.overall = aggregate(report.rows)
    return report

"""Command line entry points: index, query, eval, stats.

Exit codes: 0 ok, 2 usage or input problem, 3 provider failure.
"""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import yaml

from .errors import EventMemError, FormatError, IndexIntegrityError, MissingIndex, ProviderError, DimensionMismatch
from .evaluation import load_dataset, run_eval
from .index import build_index
from .model import EngineConfig
from .providers import ProviderSettings, load_mock_providers
from .retrieval import run_query
from .store import MANIFEST, Workspace, load_index, read_manifest

EXIT_INPUT = 2
EXIT_PROVIDER = 3
FORMATS = ["native", "locomo-like", "longmemeval-like"]


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _read_config(path: str | None) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        _fail(f"cannot read config {path}: {exc}", EXIT_INPUT)
    if not isinstance(data, dict):
        _fail(f"config {path} must be a mapping", EXIT_INPUT)
    engine = data.get("engine", {k: v for k, v in data.items() if k != "provider"})
    return dict(engine or {}), dict(data.get("provider") or {})


def _engine_config(engine: dict) -> EngineConfig:
    try:
        return EngineConfig.from_dict(engine)
    except (EventMemError, TypeError) as exc:
        _fail(f"bad engine config: {exc}", EXIT_INPUT)


def _providers(mock: str | None, provider_cfg: dict):
    if mock:
        try:
            return load_mock_providers(mock)
        except (OSError, json.JSONDecodeError) as exc:
            _fail(f"cannot load mock fixtures from {mock}: {exc}", EXIT_INPUT)
    settings = ProviderSettings.from_env(provider_cfg)
    return settings.build()


def _resolve_index_dirs(path: Path, conversation: str | None) -> list[Path]:
    if (path / MANIFEST).exists():
        return [path]
    ws = Workspace(path)
    convs = ws.conversations()
    if conversation is not None:
        if conversation not in convs:
            raise MissingIndex(f"conversation {conversation!r} not in workspace {path}")
        return [ws.path_for(conversation)]
    return [ws.path_for(c) for c in convs]


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def main(verbose):
    """Event-centric long-term conversational memory."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@main.command("index")
@click.argument("input_paths", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Workspace directory.")
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="native", show_default=True)
@click.option("--mode", type=click.Choice(["generic", "assistant-chunking"]), default="generic", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", type=click.Path(exists=True, file_okay=False), help="Fixture directory for offline providers.")
@click.option("--resume", is_flag=True, help="Skip conversations that already have an index.")
@click.option("--deterministic", is_flag=True, help="Omit build timestamps so output is byte-stable.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(1))
def cmd_index(input_paths, out_dir, fmt, mode, config_path, mock, resume, deterministic, workers):
    """Build memory indexes for every conversation in INPUT_PATHS."""
    engine, provider_cfg = _read_config(config_path)
    config = _engine_config(engine)
    conversations = []
    for p in input_paths:
        try:
            convs, _ = load_dataset(p, fmt)
        except FormatError as exc:
            _fail(str(exc), EXIT_INPUT)
        conversations.extend(convs)
    if not conversations:
        _fail("no conversations found in input", EXIT_INPUT)
    ws = Workspace(out_dir)
    pending = [c for c in conversations if not (resume and ws.has(c.conversation_id))]
    for c in conversations:
        if c not in pending:
            click.echo(f"{c.conversation_id}: already indexed, skipped")
    if not pending:
        return
    chat, embedder = _providers(mock, provider_cfg)
    for conv in pending:
        try:
            index = build_index(conv, chat, embedder, config, mode, workers)
        except ProviderError as exc:
            _fail(f"{conv.conversation_id}: provider failure: {exc}", EXIT_PROVIDER)
        manifest = ws.save(index, deterministic)
        counts = manifest["counts"]
        click.echo(f"{conv.conversation_id}: sessions={counts['sessions']} edus={counts['edus']} "
                   f"args={counts['args']} sess-edu={counts['sess-edu']} edu-arg={counts['edu-arg']} "
                   f"syn={counts['syn']} warnings={len(index.log)}")


@main.command("query")
@click.argument("index_dir", type=click.Path(file_okay=False))
@click.argument("question")
@click.option("--variant", type=click.Choice(["graph", "lite"]), default="graph", show_default=True)
@click.option("--conversation", help="Conversation id when INDEX_DIR is a workspace with several indexes.")
@click.option("--trace", is_flag=True, help="Also print the retrieval trace as JSON.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", type=click.Path(exists=True, file_okay=False))
@click.option("--deterministic", is_flag=True, help="Accepted for symmetry; query output carries no timestamps.")
def cmd_query(index_dir, question, variant, conversation, trace, config_path, mock, deterministic):
    """Answer QUESTION from the memory index in INDEX_DIR."""
    engine, provider_cfg = _read_config(config_path)
    chat, embedder = _providers(mock, provider_cfg)
    try:
        dirs = _resolve_index_dirs(Path(index_dir), conversation)
        if len(dirs) != 1:
            raise MissingIndex(f"{index_dir} holds {len(dirs)} indexes; pick one with --conversation")
        index = load_index(dirs[0], embedder.dim)
    except (MissingIndex, IndexIntegrityError, DimensionMismatch, OSError) as exc:
        _fail(f"cannot load index: {exc}", EXIT_INPUT)
    config = _engine_config({**index.config.to_dict(), **engine})
    try:
        result = run_query(question, index, embedder, chat, variant, config)
    except ProviderError as exc:
        _fail(f"provider failure: {exc}", EXIT_PROVIDER)
    except EventMemError as exc:
        _fail(str(exc), EXIT_INPUT)
    click.echo(result.answer)
    if trace:
        click.echo(result.to_json(indent=2))


@main.command("eval")
@click.argument("workspace", type=click.Path(file_okay=False))
@click.argument("qa_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="native", show_default=True)
@click.option("--variant", type=click.Choice(["graph", "lite"]), default="graph", show_default=True)
@click.option("--judge-runs", default=3, show_default=True, type=click.IntRange(1))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Report JSON path.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--mock", type=click.Path(exists=True, file_okay=False))
@click.option("--workers", default=1, show_default=True, type=click.IntRange(1))
def cmd_eval(workspace, qa_file, fmt, variant, judge_runs, out_path, config_path, mock, workers):
    """Evaluate QA_FILE against the indexes in WORKSPACE."""
    engine, provider_cfg = _read_config(config_path)
    try:
        _, items = load_dataset(qa_file, fmt)
    except FormatError as exc:
        _fail(str(exc), EXIT_INPUT)
    chat, embedder = _providers(mock, provider_cfg)
    ws = Workspace(workspace)
    config = _engine_config(engine) if engine else None
    try:
        report = run_eval(lambda cid: ws.load(cid, embedder.dim), items, variant, chat, embedder, config,
                          judge_runs=judge_runs, workers=workers)
    except (MissingIndex, IndexIntegrityError, DimensionMismatch) as exc:
        _fail(str(exc), EXIT_INPUT)
    except ProviderError as exc:
        _fail(f"provider failure: {exc}", EXIT_PROVIDER)
    out = Path(out_path) if out_path else Path(workspace) / f"eval_{variant}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    click.echo(report.table())
    click.echo(f"report written to {out}")


STATS_ROWS = [
    ("Avg Sessions/Conv", "sessions"),
    ("Avg Session Length (words)", "avg_session_words"),
    ("Avg Turns/Session", "avg_turns_per_session"),
    ("Avg EDU Nodes/Conv", "edus"),
    ("Avg Arg Nodes/Conv", "args"),
    ("Avg Total Nodes/Conv", "nodes"),
    ("Avg Session Node Degree", "avg_session_degree"),
    ("Avg EDU Node Degree", "avg_edu_degree"),
    ("Avg Arg Node Degree", "avg_arg_degree"),
    ("Avg Session-EDU Edges/Conv", "sess-edu"),
    ("Avg EDU-Arg Edges/Conv", "edu-arg"),
    ("Avg Synonym Edges/Conv", "syn"),
    ("Avg Total Edges/Conv", "edges"),
    ("Avg Chunks/Conv", "chunks"),
    ("Avg Chunk Summary Len (words)", "avg_chunk_summary_words"),
]


def _speaker_dists(stats: dict) -> tuple[list[float], list[float]]:
    """EDU counts and mean EDU lengths per speaker, largest speaker first."""
    speakers = sorted(stats["speakers"].values(), key=lambda s: -s["edus"])
    return [s["edus"] for s in speakers], [s["avg_edu_words"] for s in speakers]


def summarize_stats(per_conv: dict[str, dict]) -> dict:
    """Mean of each graph statistic over conversations, plus speaker distributions."""
    summary = {"conversations": len(per_conv)}
    for _, key in STATS_ROWS:
        summary[key] = float(np.mean([s[key] for s in per_conv.values()]))
    counts = [_speaker_dists(s)[0] for s in per_conv.values()]
    lengths = [_speaker_dists(s)[1] for s in per_conv.values()]
    width = max((len(c) for c in counts), default=0)
    pad = lambda rows: [r + [0.0] * (width - len(r)) for r in rows]
    summary["speaker_edu_dist"] = np.mean(pad(counts), axis=0).tolist() if width else []
    summary["speaker_edu_len_dist"] = np.mean(pad(lengths), axis=0).tolist() if width else []
    return summary


def _fmt(v) -> str:
    if isinstance(v, list):
        return ":".join(f"{x:.1f}" for x in v) or "-"
    return f"{v:,.1f}"


@main.command("stats")
@click.argument("workspace", type=click.Path(file_okay=False))
@click.option("--json", "as_json", is_flag=True, help="Print JSON instead of a table.")
def cmd_stats(workspace, as_json):
    """Graph statistics per conversation plus the cross-conversation average."""
    ws = Workspace(workspace)
    convs = ws.conversations()
    if not convs:
        _fail(f"no indexes in workspace {workspace}", EXIT_INPUT)
    per_conv = {}
    try:
        for cid in convs:
            per_conv[cid] = ws.load(cid).stats()
    except (MissingIndex, IndexIntegrityError) as exc:
        _fail(str(exc), EXIT_INPUT)
    summary = summarize_stats(per_conv)
    if as_json:
        click.echo(json.dumps({"conversations": per_conv, "average": summary}, indent=2, sort_keys=True))
        return
    columns = list(per_conv) + ["Average"]
    rows = [("Number of Conversations", [""] * len(per_conv) + [str(len(per_conv))])]
    for label, key in STATS_ROWS:
        rows.append((label, [_fmt(float(per_conv[c][key])) for c in per_conv] + [_fmt(summary[key])]))
    rows.append(("Speaker EDU Dist (max:min)", [_fmt([float(x) for x in _speaker_dists(per_conv[c])[0]])
                                               for c in per_conv] + [_fmt(summary["speaker_edu_dist"])]))
    rows.append(("Speaker EDU Len (words) Dist", [_fmt(_speaker_dists(per_conv[c])[1]) for c in per_conv]
                 + [_fmt(summary["speaker_edu_len_dist"])]))
    label_w = max(len(r[0]) for r in rows)
    widths = [max(len(col), *(len(r[1][i]) for r in rows)) for i, col in enumerate(columns)]
    click.echo(" " * label_w + "  " + "  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    for label, vals in rows:
        click.echo(label.ljust(label_w) + "  " + "  ".join(v.rjust(w) for v, w in zip(vals, widths)))


if __name__ == "__main__":
    main()

"""Plain-text, TSV and Markdown rendering of ranking, correlation, per-task and kappa tables."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

from .analysis import CorrelationReport, GroupCorrelation, ModelRanking

FORMATS = ("text", "tsv", "md")
EXCLUDED_MARK = "*"


@dataclass
class Table:
    title: str
    headers: list[str]
    rows: list[list[str]]
    notes: list[str] = field(default_factory=list)


def render(table: Table, fmt: str = "text") -> str:
    if fmt == "tsv":
        lines = ["\t".join(table.headers)] + ["\t".join(r) for r in table.rows]
        lines += [f"# {n}" for n in table.notes]
        return "\n".join(lines) + "\n"
    if fmt == "md":
        out = [f"### {table.title}", ""]
        def row(cells: Sequence[str]) -> str:
            return "| " + " | ".join(c.replace("|", "\\|") for c in cells) + " |"

        out.append(row(table.headers))
        out.append("|" + "|".join("---" for _ in table.headers) + "|")
        out += [row(r) for r in table.rows]
        if table.notes:
            out.append("")
            out += [f"{n}" for n in table.notes]
        return "\n".join(out) + "\n"
    if fmt == "text":
        widths = [len(h) for h in table.headers]
        for r in table.rows:
            widths = [max(w, len(c)) for w, c in zip(widths, r)]

        def line(cells: Sequence[str]) -> str:
            return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

        out = [table.title, line(table.headers), "  ".join("-" * w for w in widths)]
        out += [line(r) for r in table.rows]
        if table.notes:
            out += [""] + table.notes
        return "\n".join(out) + "\n"
    raise ValueError(f"unknown format {fmt!r} (expected one of {', '.join(FORMATS)})")


def parse_markdown(text: str) -> tuple[list[str], list[list[str]]]:
    """Header and body cells of the first pipe table in ``text``."""
    rows = []
    for line in text.splitlines():
        s = line.strip()
        if not (s.startswith("|") and s.endswith("|")):
            if rows:
                break
            continue
        cells = [c.strip().replace("\\|", "|") for c in _split_pipes(s[1:-1])]
        rows.append(cells)
    if len(rows) < 2:
        raise ValueError("no markdown table found")
    return rows[0], rows[2:]


def _split_pipes(s: str) -> list[str]:
    cells, cur, i = [], [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s) and s[i + 1] == "|":
            cur.append("\\|")
            i += 2
            continue
        if s[i] == "|":
            cells.append("".join(cur))
            cur = []
        else:
            cur.append(s[i])
        i += 1
    cells.append("".join(cur))
    return cells


def parse_text(text: str) -> tuple[list[str], list[list[str]]]:
    """Inverse of the aligned text layout: column spans come from the dash ruler."""
    lines = text.splitlines()
    ruler_at = next(i for i, ln in enumerate(lines) if ln and set(ln) <= {"-", " "} and "-" in ln)
    spans = []
    start = None
    ruler = lines[ruler_at]
    for i, ch in enumerate(ruler + " "):
        if ch == "-" and start is None:
            start = i
        elif ch != "-" and start is not None:
            spans.append((start, i))
            start = None

    def cut(ln: str) -> list[str]:
        bounds = [s for s, _ in spans[1:]] + [None]
        return [ln[s:e].strip() if e is not None else ln[s:].strip() for (s, _), e in zip(spans, bounds)]

    headers = cut(lines[ruler_at - 1])
    body = []
    for ln in lines[ruler_at + 1 :]:
        if not ln.strip():
            break
        body.append(cut(ln))
    return headers, body


def _fmt(v: float | None, digits: int = 3) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def ranking_table(rankings: Sequence[ModelRanking], *, order_by: str | None = None) -> Table:
    """One row per model, one integer-rank column per metric (blank when a model is not ranked)."""
    ranks = [r.ranks() for r in rankings]
    models = sorted({m for rk in ranks for m in rk})
    lead = next((r for r in rankings if r.metric_id == order_by), rankings[0] if rankings else None)
    if lead is not None:
        lr = lead.ranks()
        models.sort(key=lambda m: (lr.get(m, len(models) + 1), m))
    rows = [[m] + [str(rk[m]) if m in rk else "" for rk in ranks] for m in models]
    notes = []
    for r in rankings:
        tied = [row.model_id for row in r.rows if row.tied]
        if tied:
            notes.append(f"{r.metric_id}: exact ties broken by model id among {', '.join(tied)}")
    return Table("Model ranking (1 = best)", ["model"] + [r.metric_id for r in rankings], rows, notes)


def correlation_table(report: CorrelationReport) -> Table:
    rows = []
    notes = []
    for c in report.sorted_rows():
        name = c.metric_id + (EXCLUDED_MARK if c.excluded_models else "")
        rows.append([name, _fmt(c.reported_tau), _fmt(c.reported_r)])
        if c.excluded_models:
            notes.append(f"{name} excludes {', '.join(c.excluded_models)} (judge self-evaluation)")
        if c.unscored_records:
            notes.append(f"{c.metric_id}: {c.unscored_records} unscored record(s) dropped")
    return Table("Correlation with human scores (absolute values)", ["metric", "tau", "r"], rows, notes)


def per_group_table(groups: Mapping[str, GroupCorrelation], metrics: Sequence[str]) -> Table:
    names = list(groups)
    rows = [[m] + [_fmt(groups[g].tau.get(m)) for g in names] for m in metrics]
    notes = [f"{g}: {groups[g].n_instances} instances" for g in names]
    return Table("Per-task Kendall tau (absolute values)", ["metric"] + names, rows, notes)


def distribution_table(dist: Mapping[str, Mapping[str, float]]) -> Table:
    rows = [[m] + [f"{dist[m][g]:.4f}" for g in "ABCD"] for m in dist]
    return Table("Human grade distribution", ["model", "A", "B", "C", "D"], rows)


def kappa_line(a: str, b: str, value: float | None, n: int) -> str:
    shown = "undefined" if value is None else f"{value:.3f}"
    return f"Cohen's kappa ({a} vs {b}): {shown} over {n} shared annotations"

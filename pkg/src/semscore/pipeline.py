"""Metric registry, per-metric score files, and the batch scoring driver.

Score files live in ``<out>/scores``: ``<metric>.jsonl`` holds one
``{"model", "id", "score"}`` line per scored pair (sorted by model, then id)
and ``<metric>.meta.json`` records the direction, the provider that produced
the scores, excluded models, unscored pairs and flagged pairs.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import embedding, ngram
from .corpus import (
    AGGREGATE_ID,
    CorpusError,
    Dataset,
    Direction,
    EvalRecord,
    ModelResponse,
    ScoreMatrix,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricSpec:
    metric_id: str
    direction: Direction
    needs: str | None = None  # "sentence" or "token" provider


METRICS: dict[str, MetricSpec] = {
    spec.metric_id: spec
    for spec in (
        MetricSpec("rouge_l", Direction.HIGHER_BETTER),
        MetricSpec("bleu", Direction.HIGHER_BETTER),
        MetricSpec("semscore", Direction.HIGHER_BETTER, "sentence"),
        MetricSpec("semscore_mean", Direction.HIGHER_BETTER, "token"),
        MetricSpec("semscore_cls", Direction.HIGHER_BETTER, "token"),
        MetricSpec("bertscore", Direction.HIGHER_BETTER, "token"),
    )
}

JUDGE_METRIC = "g_eval"


def check_metric_ids(ids: Iterable[str]) -> list[str]:
    ids = list(ids)
    unknown = [m for m in ids if m not in METRICS]
    if unknown:
        raise CorpusError(f"unknown metric id(s): {', '.join(unknown)} (known: {', '.join(METRICS)})")
    if not ids:
        raise CorpusError("no metrics selected")
    return ids


# ---------------------------------------------------------------------------
# score files
# ---------------------------------------------------------------------------


@dataclass
class ScoreMeta:
    metric: str
    direction: Direction
    provider: str = ""
    excluded_models: list[str] = field(default_factory=list)
    unscored: list[list[str]] = field(default_factory=list)
    flags: dict[str, list[list[str]]] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "direction": self.direction.value,
            "provider": self.provider,
            "excluded_models": sorted(self.excluded_models),
            "unscored": sorted(self.unscored),
            "flags": {k: sorted(v) for k, v in sorted(self.flags.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> ScoreMeta:
        return cls(
            metric=obj["metric"],
            direction=Direction(obj["direction"]),
            provider=obj.get("provider", ""),
            excluded_models=list(obj.get("excluded_models", [])),
            unscored=[list(x) for x in obj.get("unscored", [])],
            flags={k: [list(x) for x in v] for k, v in obj.get("flags", {}).items()},
        )


def score_path(score_dir: Path, metric: str) -> Path:
    return score_dir / f"{metric}.jsonl"


def meta_path(score_dir: Path, metric: str) -> Path:
    return score_dir / f"{metric}.meta.json"


def write_scores(score_dir: Path, meta: ScoreMeta, scores: Mapping[tuple[str, str], float]) -> Path:
    score_dir.mkdir(parents=True, exist_ok=True)
    path = score_path(score_dir, meta.metric)
    lines = [
        json.dumps({"model": model, "id": rid, "score": scores[(model, rid)]}, ensure_ascii=False)
        for model, rid in sorted(scores)
    ]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    meta_path(score_dir, meta.metric).write_text(
        json.dumps(meta.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return path


def read_scores(score_dir: Path, metric: str) -> tuple[ScoreMeta, dict[tuple[str, str], float]]:
    mpath = meta_path(score_dir, metric)
    if not mpath.exists():
        raise CorpusError(f"missing metadata for metric {metric!r}: {mpath}")
    meta = ScoreMeta.from_json(json.loads(mpath.read_text(encoding="utf-8")))
    scores: dict[tuple[str, str], float] = {}
    spath = score_path(score_dir, metric)
    if spath.exists():
        with spath.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key = (obj["model"], obj["id"])
                    scores[key] = float(obj["score"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise CorpusError(f"{spath}:{lineno}: malformed score line ({exc})") from exc
    return meta, scores


def list_metrics(score_dir: Path) -> list[str]:
    if not score_dir.exists():
        return []
    return sorted(p.name[: -len(".meta.json")] for p in score_dir.glob("*.meta.json"))


def load_score_dir(
    score_dir: Path,
    *,
    metrics: Iterable[str] | None = None,
    dataset: Dataset | None = None,
) -> tuple[ScoreMatrix, dict[str, ScoreMeta]]:
    record_ids = frozenset(dataset.ids) if dataset is not None else None
    matrix = ScoreMatrix(record_ids=record_ids)
    metas: dict[str, ScoreMeta] = {}
    for metric in metrics if metrics is not None else list_metrics(score_dir):
        meta, scores = read_scores(score_dir, metric)
        matrix.declare(metric, meta.direction)
        for (model, rid), value in scores.items():
            matrix.add(metric, model, rid, value)
        metas[metric] = meta
    return matrix, metas


def import_external(
    tsv: Path,
    metric: str,
    direction: Direction,
    score_dir: Path,
    *,
    models: Iterable[str] | None = None,
    dataset: Dataset | None = None,
) -> Path:
    """Copy one metric's rows from an external TSV into the score directory."""
    from .corpus import load_external_scores

    matrix = ScoreMatrix(
        models=frozenset(models) if models is not None else None,
        record_ids=frozenset(dataset.ids) if dataset is not None else None,
    )
    load_external_scores(tsv, metric, direction, matrix)
    scores = {(model, rid): v for (m, model, rid), v in matrix.entries.items() if m == metric}
    return write_scores(score_dir, ScoreMeta(metric, direction, provider=f"external:{tsv.name}"), scores)


# ---------------------------------------------------------------------------
# computing
# ---------------------------------------------------------------------------

PairFn = Callable[[str, str], float]


@dataclass
class ScoreContext:
    sentence_provider: embedding.EmbeddingProvider | None = None
    token_provider: embedding.EmbeddingProvider | None = None
    cache: embedding.EmbeddingCache | None = None
    _pooled: dict[str, embedding.PooledProvider] = field(default_factory=dict)

    def provider_for(self, metric: str) -> embedding.EmbeddingProvider | None:
        if metric == "semscore":
            return self.sentence_provider
        if metric in ("semscore_mean", "semscore_cls"):
            mode = metric.rsplit("_", 1)[1]
            if mode not in self._pooled:
                if self.token_provider is None:
                    raise embedding.EmbeddingError(f"{metric} needs a token-level provider")
                self._pooled[mode] = embedding.PooledProvider(self.token_provider, mode)  # type: ignore[arg-type]
            return self._pooled[mode]
        if metric == "bertscore":
            return self.token_provider
        return None

    def pair_fn(self, metric: str) -> PairFn:
        if metric == "rouge_l":
            return ngram.rouge_l
        if metric == "bleu":
            return ngram.sentence_bleu
        provider = self.provider_for(metric)
        if provider is None:
            raise embedding.EmbeddingError(f"{metric} needs an embedding provider")
        if metric == "bertscore":
            return lambda t, c: embedding.bertscore_f1(t, c, provider, cache=self.cache)
        return lambda t, c: embedding.semscore(t, c, provider, cache=self.cache)

    def warm(self, metric: str, texts: Sequence[str]) -> None:
        """Embed all distinct non-empty texts up front so per-pair calls hit the cache."""
        provider = self.provider_for(metric)
        if provider is None:
            return
        uniq = sorted({t for t in texts if not embedding.is_empty_text(t)})
        level = "token" if metric == "bertscore" else "sentence"
        embedding.embed_batch(uniq, provider, level=level, cache=self.cache)


def compute_metric(
    metric: str,
    pairs: Sequence[tuple[EvalRecord, ModelResponse]],
    ctx: ScoreContext,
    *,
    jobs: int = 1,
) -> tuple[dict[tuple[str, str], float], list[list[str]]]:
    """Score (record, response) pairs; returns scores and the pairs flagged as empty candidates."""
    fn = ctx.pair_fn(metric)
    ctx.warm(metric, [r.target_response for r, _ in pairs] + [resp.response_text for _, resp in pairs])

    def one(item: tuple[EvalRecord, ModelResponse]) -> float:
        rec, resp = item
        return fn(rec.target_response, resp.response_text)

    if jobs <= 1:
        values = [one(p) for p in pairs]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, pairs))
    scores = {}
    flagged = []
    for (rec, resp), v in zip(pairs, values):
        scores[(resp.model_id, rec.record_id)] = v
        if embedding.is_empty_text(resp.response_text):
            flagged.append([resp.model_id, rec.record_id])
    return scores, flagged


def joined_pairs(dataset: Dataset, responses: Iterable[ModelResponse]) -> list[tuple[EvalRecord, ModelResponse]]:
    by_id = dataset.by_id()
    pairs = [(by_id[r.record_id], r) for r in responses if r.record_id in by_id]
    pairs.sort(key=lambda p: (p[1].model_id, p[0].record_id))
    return pairs


def score_metrics(
    dataset: Dataset,
    responses: Sequence[ModelResponse],
    metrics: Sequence[str],
    ctx: ScoreContext,
    score_dir: Path,
    *,
    jobs: int = 1,
    force: bool = False,
) -> dict[str, int]:
    """Compute and persist every requested metric.  Returns the number of newly computed entries."""
    metrics = check_metric_ids(metrics)
    pairs = joined_pairs(dataset, responses)
    computed: dict[str, int] = {}
    for metric in metrics:
        spec = METRICS[metric]
        provider = ctx.provider_for(metric)
        provider_name = provider.name if provider is not None else "native"
        existing: dict[tuple[str, str], float] = {}
        flags: list[list[str]] = []
        if not force and meta_path(score_dir, metric).exists():
            meta, existing = read_scores(score_dir, metric)
            if meta.provider != provider_name:
                raise CorpusError(
                    f"{metric}: existing scores come from {meta.provider!r}, not {provider_name!r}; rerun with --force"
                )
            flags = meta.flags.get("empty_candidate", [])
        todo = [p for p in pairs if (p[1].model_id, p[0].record_id) not in existing]
        if not todo and existing:
            logger.info("%s: all %d entries present, skipping", metric, len(existing))
            computed[metric] = 0
            continue
        new, new_flags = compute_metric(metric, todo, ctx, jobs=jobs)
        scores = {**existing, **new}
        all_flags = sorted({tuple(f) for f in flags + new_flags})
        meta = ScoreMeta(
            metric,
            spec.direction,
            provider=provider_name,
            flags={"empty_candidate": [list(f) for f in all_flags]} if spec.needs and all_flags else {},
        )
        write_scores(score_dir, meta, scores)
        computed[metric] = len(new)
        logger.info("%s: %d computed, %d reused", metric, len(new), len(existing))
    if ctx.cache is not None:
        ctx.cache.flush()
    return computed

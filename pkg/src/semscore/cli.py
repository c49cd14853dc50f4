"""``semscore`` command line: validate, score, judge, rank, correlate, report, kappa.

Settings come from an optional ``--config`` file (YAML or JSON, keys named
like the long options with dashes replaced by underscores) overridden by
flags.  Credentials are read only from the environment (``LLM_API_KEY``,
``EMBED_ENDPOINT``).

Exit codes: 0 success, 1 validation failure, 2 computation failure,
3 endpoint failure.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from . import analysis, embedding, judge, pipeline, report
from .corpus import (
    CorpusError,
    Dataset,
    Direction,
    HumanRating,
    ModelResponse,
    ScoreMatrix,
    load_ratings,
    load_records,
    load_responses,
    validate_join,
)

logger = logging.getLogger("semscore")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2
EXIT_ENDPOINT = 3

EMBED_ENDPOINT_ENV = "EMBED_ENDPOINT"
DEFAULT_METRICS = ("rouge_l", "bleu", "semscore", "bertscore")


class ConfigError(CorpusError):
    pass


@dataclass
class RunConfig:
    records: Path | None = None
    responses: Path | None = None
    ratings: Path | None = None
    human_scores: Path | None = None
    external: list[Path] = field(default_factory=list)
    directions: dict[str, Direction] = field(default_factory=dict)
    metrics: list[str] = field(default_factory=lambda: list(DEFAULT_METRICS))
    provider: str = "st"
    token_provider: str | None = None
    embed_endpoint: str | None = None
    endpoint: str | None = None
    judge_model: str = "gpt-4"
    judge_metric: str = pipeline.JUDGE_METRIC
    exclude_self: bool = False
    aliases: dict[str, list[str]] = field(default_factory=dict)
    out: Path = Path("semscore-out")
    format: str = "text"
    jobs: int = 1
    force: bool = False
    allow_partial: bool = False
    min_instances: int = 6
    per_task_models: list[str] | None = None
    annotators: list[str] | None = None
    requests_per_second: float | None = None
    max_retries: int = 5

    @property
    def score_dir(self) -> Path:
        return self.out / "scores"

    @property
    def cache_dir(self) -> Path:
        return self.out / "cache"


_PATH_KEYS = ("records", "responses", "ratings", "human_scores", "out")


def _split_list(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v) for v in value]


def _parse_pairs(items: Sequence[str], what: str) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key or not value:
            raise ConfigError(f"{what} must look like KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def load_config_file(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    base = path.resolve().parent
    data = {k.replace("-", "_"): v for k, v in data.items()}
    for key in _PATH_KEYS:
        if data.get(key) is not None:
            p = Path(data[key]).expanduser()
            data[key] = p if p.is_absolute() else base / p
    if data.get("external"):
        data["external"] = [
            p if (p := Path(x).expanduser()).is_absolute() else base / p for x in _split_list(data["external"])
        ]
    return data


def build_config(args: argparse.Namespace) -> RunConfig:
    """Merge config file values with command-line overrides and resolve every path."""
    values: dict[str, Any] = load_config_file(Path(args.config)) if getattr(args, "config", None) else {}
    for key in (
        "records", "responses", "ratings", "human_scores", "provider", "token_provider",
        "embed_endpoint", "endpoint", "judge_model", "judge_metric", "out", "format", "jobs",
        "min_instances", "requests_per_second", "max_retries",
    ):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    for flag in ("force", "allow_partial", "exclude_self"):
        if getattr(args, flag, False):
            values[flag] = True
    if getattr(args, "metrics", None):
        values["metrics"] = args.metrics
    if getattr(args, "external", None):
        values["external"] = list(values.get("external") or []) + [Path(p) for p in args.external]
    if getattr(args, "per_task_models", None):
        values["per_task_models"] = args.per_task_models
    if getattr(args, "annotators", None):
        values["annotators"] = args.annotators

    directions = dict(values.get("directions") or {})
    directions.update(_parse_pairs(getattr(args, "direction", None) or [], "--direction"))
    aliases_raw = dict(values.get("aliases") or {})
    aliases_raw.update(_parse_pairs(getattr(args, "alias", None) or [], "--alias"))

    cfg = RunConfig()
    for key in (
        "provider", "token_provider", "embed_endpoint", "endpoint", "judge_model", "judge_metric",
        "format", "force", "allow_partial", "exclude_self", "requests_per_second",
    ):
        if key in values:
            setattr(cfg, key, values[key])
    for key in _PATH_KEYS:
        if values.get(key) is not None:
            setattr(cfg, key, Path(values[key]).expanduser().resolve())
    cfg.external = [Path(p).expanduser().resolve() for p in values.get("external") or []]
    if "metrics" in values:
        cfg.metrics = _split_list(values["metrics"])
    if "jobs" in values:
        cfg.jobs = int(values["jobs"])
    if "max_retries" in values:
        cfg.max_retries = int(values["max_retries"])
    if "min_instances" in values:
        cfg.min_instances = int(values["min_instances"])
    if values.get("per_task_models"):
        cfg.per_task_models = _split_list(values["per_task_models"])
    if values.get("annotators"):
        cfg.annotators = _split_list(values["annotators"])
    try:
        cfg.directions = {k: Direction(v) for k, v in directions.items()}
    except ValueError as exc:
        raise ConfigError(f"bad direction: {exc}") from None
    cfg.aliases = {k: _split_list(v) for k, v in aliases_raw.items()}
    if cfg.format not in report.FORMATS:
        raise ConfigError(f"unknown format {cfg.format!r}")
    if cfg.jobs < 1:
        raise ConfigError("--jobs must be at least 1")
    if cfg.embed_endpoint is None:
        cfg.embed_endpoint = os.environ.get(EMBED_ENDPOINT_ENV)
    return cfg


# ---------------------------------------------------------------------------
# providers
# ---------------------------------------------------------------------------


def make_provider(spec: str, cfg: RunConfig, *, level: str) -> embedding.EmbeddingProvider:
    kind, _, arg = spec.partition(":")
    if kind == "hash":
        return embedding.HashEmbedder(int(arg) if arg else 64)
    if kind == "st":
        return embedding.SentenceTransformerProvider(arg or embedding.DEFAULT_SENTENCE_MODEL)
    if kind == "hf":
        return embedding.TransformerTokenProvider(arg or embedding.DEFAULT_TOKEN_MODEL)
    if kind == "http":
        if not cfg.embed_endpoint:
            raise ConfigError(f"provider {spec!r} needs --embed-endpoint or ${EMBED_ENDPOINT_ENV}")
        default = embedding.DEFAULT_SENTENCE_MODEL if level == "sentence" else embedding.DEFAULT_TOKEN_MODEL
        return embedding.HttpEmbeddingProvider(cfg.embed_endpoint, arg or default)
    raise ConfigError(f"unknown provider {spec!r} (expected hash, st[:model], hf[:model] or http[:model])")


def build_context(cfg: RunConfig) -> pipeline.ScoreContext:
    needs = {pipeline.METRICS[m].needs for m in cfg.metrics}
    cache = embedding.EmbeddingCache(cfg.cache_dir / "embeddings.bin") if needs - {None} else None
    sentence = make_provider(cfg.provider, cfg, level="sentence") if "sentence" in needs else None
    token = None
    if "token" in needs:
        spec = cfg.token_provider
        if spec is None:
            spec = cfg.provider if cfg.provider.startswith(("hash", "http")) else "hf"
        token = make_provider(spec, cfg, level="token")
    return pipeline.ScoreContext(sentence, token, cache)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _need(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    return path


def _load_inputs(cfg: RunConfig, *, ratings: bool = False) -> tuple[Dataset, tuple[ModelResponse, ...], tuple[HumanRating, ...]]:
    ds = load_records(_need(cfg.records, "--records"))
    resp = load_responses(_need(cfg.responses, "--responses"))
    rt = load_ratings(cfg.ratings) if (ratings and cfg.ratings) else ()
    return ds, resp, rt


def _check_join(cfg: RunConfig, ds: Dataset, resp, rt=()) -> bool:
    rep = validate_join(ds, resp, rt)
    if rep.ok:
        return True
    level = logging.WARNING if cfg.allow_partial else logging.ERROR
    for line in rep.summary().splitlines():
        logger.log(level, "join: %s", line)
    return cfg.allow_partial


def cmd_validate(cfg: RunConfig, out) -> int:
    ds, resp, rt = _load_inputs(cfg, ratings=True)
    rep = validate_join(ds, resp, rt)
    print(f"{len(ds)} records, {len(resp)} responses, {len(rt)} ratings", file=out)
    print(rep.summary(), file=out)
    for issue in rep.issues:
        print(f"{issue.model_id}\t{issue.record_id}\t{issue.kind.value}\t{issue.detail}".rstrip(), file=out)
    return EXIT_OK if rep.ok else EXIT_VALIDATION


def cmd_score(cfg: RunConfig, out) -> int:
    if cfg.metrics:
        pipeline.check_metric_ids(cfg.metrics)
    ds, resp, _ = _load_inputs(cfg)
    if not _check_join(cfg, ds, resp):
        return EXIT_VALIDATION
    models = sorted({r.model_id for r in resp})
    for tsv in cfg.external:
        metrics_in_file = _metrics_in_tsv(tsv)
        for metric in metrics_in_file:
            direction = cfg.directions.get(
                metric, Direction.LOWER_BETTER if metric == analysis.HUMAN_METRIC else Direction.HIGHER_BETTER
            )
            if pipeline.meta_path(cfg.score_dir, metric).exists() and not cfg.force:
                print(f"{metric}: already imported, skipping", file=out)
                continue
            pipeline.import_external(tsv, metric, direction, cfg.score_dir, models=models, dataset=ds)
            print(f"{metric}: imported from {tsv.name}", file=out)
    if cfg.metrics:
        ctx = build_context(cfg)
        done = pipeline.score_metrics(ds, resp, cfg.metrics, ctx, cfg.score_dir, jobs=cfg.jobs, force=cfg.force)
        for metric, n in done.items():
            print(f"{metric}: {n} new entries", file=out)
    return EXIT_OK


def _metrics_in_tsv(path: Path) -> list[str]:
    if not path.exists():
        raise CorpusError(f"no such file: {path}")
    seen: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            cols = line.rstrip("\n").split("\t")
            if not line.strip() or line.startswith("#") or (lineno == 1 and cols[0] == "metric"):
                continue
            if cols[0] not in seen:
                seen.append(cols[0])
    return seen


def cmd_judge(cfg: RunConfig, out) -> int:
    ds, resp, _ = _load_inputs(cfg)
    if not _check_join(cfg, ds, resp):
        return EXIT_VALIDATION
    if not cfg.endpoint:
        raise ConfigError("--endpoint is required for judging")
    excluded: list[str] = []
    if cfg.exclude_self:
        filtered = judge.filter_self_eval(resp, cfg.judge_model, cfg.aliases)
        resp, excluded = tuple(filtered.responses), filtered.excluded_models
        for m in excluded:
            print(f"excluding {m}: same model as judge {cfg.judge_model}", file=out)
    metric = cfg.judge_metric
    score_dir = cfg.score_dir
    existing: dict[tuple[str, str], float] = {}
    if not cfg.force and pipeline.meta_path(score_dir, metric).exists():
        _, existing = pipeline.read_scores(score_dir, metric)
    todo = [r for r in resp if (r.model_id, r.record_id) not in existing]
    endpoint = judge.EndpointConfig.from_env(
        cfg.endpoint,
        cfg.judge_model,
        max_in_flight=cfg.jobs,
        requests_per_second=cfg.requests_per_second,
        max_retries=cfg.max_retries,
    )
    client = judge.JudgeClient(endpoint, cache=judge.VerdictCache(cfg.cache_dir / "verdicts.jsonl"))
    try:
        run = judge.judge_all(ds.by_id(), todo, client, jobs=cfg.jobs)
    finally:
        client.close()
    scores = {**existing, **{k: float(v) for k, v in run.scores.items()}}
    meta = pipeline.ScoreMeta(
        metric,
        Direction.LOWER_BETTER,
        provider=f"judge:{cfg.judge_model}",
        excluded_models=excluded,
        unscored=[[m, rid] for m, rid, _ in run.unscored],
    )
    pipeline.write_scores(score_dir, meta, scores)
    print(
        f"{metric}: {len(run.scores)} judged, {len(existing)} reused, {len(run.unscored)} unscored, "
        f"{client.retries} retries",
        file=out,
    )
    return EXIT_OK


@dataclass
class Loaded:
    matrix: ScoreMatrix
    metas: dict[str, pipeline.ScoreMeta]
    human: dict[str, float]
    ratings: tuple[HumanRating, ...]
    dataset: Dataset | None


def _load_for_analysis(cfg: RunConfig, *, need_human: bool) -> Loaded:
    ds = load_records(cfg.records) if cfg.records else None
    selected = [m for m in pipeline.list_metrics(cfg.score_dir)]
    matrix, metas = pipeline.load_score_dir(cfg.score_dir, metrics=selected, dataset=ds)
    ratings = load_ratings(cfg.ratings) if cfg.ratings else ()
    human_slice: dict[str, dict[str, float]] = {}
    if analysis.HUMAN_METRIC in matrix.directions:
        human_slice.update(matrix.slice(analysis.HUMAN_METRIC))
    if cfg.human_scores:
        hm = ScoreMatrix()
        from .corpus import load_external_scores

        load_external_scores(cfg.human_scores, analysis.HUMAN_METRIC, Direction.LOWER_BETTER, hm)
        human_slice.update(hm.slice(analysis.HUMAN_METRIC))
    for model, recs in analysis.human_scores(ratings).items():
        if model in human_slice:
            raise CorpusError(f"human scores for {model!r} supplied twice (ratings and aggregate)")
        human_slice[model] = recs
    human = analysis.mean_score_per_model(human_slice).means if human_slice else {}
    if need_human and not human:
        raise CorpusError("no human scores: pass --ratings or --human-scores")
    return Loaded(matrix, metas, human, ratings, ds)


def _metric_order(loaded: Loaded) -> list[str]:
    return [m for m in loaded.matrix.metrics if m != analysis.HUMAN_METRIC]


def _rankings(loaded: Loaded) -> list[analysis.ModelRanking]:
    out = []
    if loaded.human:
        out.append(analysis.rank_models(loaded.human, Direction.LOWER_BETTER, analysis.HUMAN_METRIC))
    for metric in _metric_order(loaded):
        means = analysis.mean_score_per_model(loaded.matrix.slice(metric)).means
        out.append(analysis.rank_models(means, loaded.matrix.directions[metric], metric))
    return out


def _correlations(loaded: Loaded) -> analysis.CorrelationReport:
    exclusions = {m: meta.excluded_models for m, meta in loaded.metas.items() if meta.excluded_models}
    unscored = {m: len(meta.unscored) for m, meta in loaded.metas.items() if meta.unscored}
    return analysis.correlation_report(
        loaded.human, loaded.matrix, exclusions, metrics=_metric_order(loaded), unscored=unscored
    )


def cmd_rank(cfg: RunConfig, out) -> int:
    loaded = _load_for_analysis(cfg, need_human=False)
    rankings = _rankings(loaded)
    if not rankings:
        raise CorpusError(f"no scores found in {cfg.score_dir}")
    out.write(report.render(report.ranking_table(rankings, order_by=analysis.HUMAN_METRIC), cfg.format))
    return EXIT_OK


def cmd_correlate(cfg: RunConfig, out) -> int:
    loaded = _load_for_analysis(cfg, need_human=True)
    out.write(report.render(report.correlation_table(_correlations(loaded)), cfg.format))
    return EXIT_OK


def _kappa_lines(cfg: RunConfig, ratings: Sequence[HumanRating]) -> list[str]:
    annotators = cfg.annotators or sorted({r.annotator_id for r in ratings})
    lines = []
    for a, b in itertools.combinations(annotators, 2):
        ga, gb = analysis.shared_annotations(ratings, a, b)
        if not ga:
            continue
        try:
            value: float | None = analysis.cohen_kappa(ga, gb)
        except analysis.UndefinedStatistic:
            value = None
        lines.append(report.kappa_line(a, b, value, len(ga)))
    return lines


def cmd_kappa(cfg: RunConfig, out) -> int:
    ratings = load_ratings(_need(cfg.ratings, "--ratings"))
    lines = _kappa_lines(cfg, ratings)
    if not lines:
        print("no doubly-annotated items", file=out)
        return EXIT_VALIDATION
    for line in lines:
        print(line, file=out)
    return EXIT_OK


def cmd_report(cfg: RunConfig, out) -> int:
    loaded = _load_for_analysis(cfg, need_human=True)
    fmt = cfg.format
    sections = [
        report.render(report.ranking_table(_rankings(loaded), order_by=analysis.HUMAN_METRIC), fmt),
        report.render(report.correlation_table(_correlations(loaded)), fmt),
    ]
    if loaded.ratings and loaded.dataset is not None:
        per_model = analysis.human_scores(loaded.ratings)
        models = cfg.per_task_models or sorted(m for m, recs in per_model.items() if len(recs) > 0)
        exclusions = {m: meta.excluded_models for m, meta in loaded.metas.items() if meta.excluded_models}
        try:
            groups = analysis.per_group_correlation(
                loaded.dataset,
                loaded.matrix,
                loaded.ratings,
                models=models,
                min_instances=cfg.min_instances,
                exclusions=exclusions,
                metrics=_metric_order(loaded),
            )
            sections.append(report.render(report.per_group_table(groups, _metric_order(loaded)), fmt))
        except ValueError as exc:
            logger.warning("per-task table skipped: %s", exc)
        kappa = _kappa_lines(cfg, loaded.ratings)
        if kappa:
            sections.append("\n".join(kappa) + "\n")
        dist = report.render(report.distribution_table(analysis.grade_distribution(loaded.ratings)), "tsv")
        cfg.out.mkdir(parents=True, exist_ok=True)
        (cfg.out / "grade_distribution.tsv").write_text(dist, encoding="utf-8")
    text = "\n".join(sections)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / f"report.{ {'text': 'txt', 'tsv': 'tsv', 'md': 'md'}[fmt] }").write_text(text, encoding="utf-8")
    out.write(text)
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "score": cmd_score,
    "judge": cmd_judge,
    "rank": cmd_rank,
    "correlate": cmd_correlate,
    "report": cmd_report,
    "kappa": cmd_kappa,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semscore", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON file with default settings")
    common.add_argument("--records", help="records.jsonl")
    common.add_argument("--responses", help="responses.jsonl")
    common.add_argument("--ratings", help="ratings.jsonl")
    common.add_argument("--out", help="output directory (default: semscore-out)")
    common.add_argument("--format", choices=report.FORMATS)
    common.add_argument("--jobs", type=int)
    common.add_argument("--allow-partial", action="store_true", help="proceed despite join gaps")

    analysis_opts = argparse.ArgumentParser(add_help=False)
    analysis_opts.add_argument("--human-scores", help="TSV with per-model human aggregates (metric 'human')")
    analysis_opts.add_argument("--min-instances", type=int, help="per-task threshold (default 6)")
    analysis_opts.add_argument("--per-task-models", type=_split_list, help="comma-separated models for the per-task table")
    analysis_opts.add_argument("--annotators", type=_split_list, help="comma-separated annotator ids for kappa")

    sub.add_parser("validate", parents=[common], help="check the records/responses/ratings join")

    p = sub.add_parser("score", parents=[common], help="compute metric score files")
    p.add_argument("--metrics", type=_split_list, help=f"comma-separated ids from {', '.join(pipeline.METRICS)}")
    p.add_argument("--provider", help="sentence provider: hash[:dim], st[:model], http[:model]")
    p.add_argument("--token-provider", help="token provider: hash[:dim], hf[:model], http[:model]")
    p.add_argument("--embed-endpoint", help=f"embedding service URL (default ${EMBED_ENDPOINT_ENV})")
    p.add_argument("--external", action="append", help="import a metric<TAB>model<TAB>id<TAB>score file")
    p.add_argument("--direction", action="append", help="METRIC=higher_better|lower_better for imports")
    p.add_argument("--force", action="store_true", help="recompute existing scores")

    p = sub.add_parser("judge", parents=[common], help="score responses with an LLM judge")
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--judge-model")
    p.add_argument("--judge-metric", help="metric id for the judge scores (default g_eval)")
    p.add_argument("--exclude-self", action="store_true", help="drop responses produced by the judge model")
    p.add_argument("--alias", action="append", help="JUDGE=MODEL[,MODEL] response ids that are the judge")
    p.add_argument("--requests-per-second", type=float)
    p.add_argument("--max-retries", type=int, help="retries per request on transient errors (default 5)")
    p.add_argument("--force", action="store_true")

    for name, help_ in (
        ("rank", "per-metric model rankings"),
        ("correlate", "Kendall tau / Pearson r against human scores"),
        ("report", "all tables"),
    ):
        sub.add_parser(name, parents=[common, analysis_opts], help=help_)
    sub.add_parser("kappa", parents=[common, analysis_opts], help="inter-annotator agreement")
    return parser


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out if out is not None else sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = build_config(args)
        return COMMANDS[args.command](cfg, out)
    except (judge.EndpointError, embedding.EmbeddingServiceError) as exc:
        logger.error("%s", exc)
        return EXIT_ENDPOINT
    except CorpusError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (embedding.EmbeddingError, ValueError, judge.JudgeError) as exc:
        logger.error("%s", exc)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())

"""G-Eval style LLM judge: prompt rendering, endpoint client, verdict parsing and caching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import httpx

from .corpus import EvalRecord, ModelResponse

logger = logging.getLogger(__name__)

API_KEY_ENV = "LLM_API_KEY"

PROMPT_TEMPLATE = """You will be given an instruction-output pair. Your task is to rate the responses on one metric.

Please make sure you read and understand these instructions carefully. Please keep this document open while reviewing, and refer to it as needed.

Evaluation Criteria:
Overall Quality (1-4) - how well does the output complete the instruction?
- A score of 1 means that the response is valid and satisfying. It follows the instruction, properly completes it and does not contain any repetitions or irrelevant parts.
- A score of 2 means that the response is acceptable but has minor errors or imperfections. It may contain factual inconistensies or grammatical errors.
- A score of 3 means that the response is relevant and responds to the instruction, but it has significant errors in the content. For example, the output may be valid in the beginning, but contains repetitions or followed by irrelevant things afterwards.
- A score of 4 means that the response is irrelevant or completely invalid, i.e. consists of repeating sequences or does not correspond to the instruction in any way.

Evaluation Steps:
1. Read the instruction and the corresponding output carefully.
2. Rate the output on a scale of 1-4 for Quality, according to the criteria above.

### Instruction:
{{Instruction}}
### Corresponding Output:
{{Output}}

Evaluation Form (scores ONLY):
- Quality:"""

_SLOT = re.compile(r"\{\{(Instruction|Output)\}\}")


class JudgeError(RuntimeError):
    pass


class UnparseableVerdict(JudgeError):
    pass


class EndpointError(JudgeError):
    pass


@dataclass(frozen=True)
class JudgePrompt:
    rendered_text: str
    instruction_id: str = ""
    model_id: str = ""


@dataclass(frozen=True)
class JudgeVerdict:
    score: int
    raw_reply: str
    judge_model: str


def build_prompt(
    instruction: str,
    instance_input: str | None,
    output: str,
    *,
    instruction_id: str = "",
    model_id: str = "",
) -> JudgePrompt:
    if not instruction.strip():
        raise ValueError("instruction is empty")
    slot = instruction if not instance_input else f"{instruction}\n{instance_input}"
    values = {"Instruction": slot, "Output": output}
    # single pass: substituted text is never re-scanned for placeholders
    text = _SLOT.sub(lambda m: values[m.group(1)], PROMPT_TEMPLATE)
    return JudgePrompt(text, instruction_id, model_id)


_QUALITY = re.compile(r"quality", re.IGNORECASE)
_INT = re.compile(r"-?\d+")


def parse_score(reply: str) -> int:
    """First integer after the last "Quality" marker; must be in 1..4."""
    markers = list(_QUALITY.finditer(reply))
    if not markers:
        raise UnparseableVerdict(f"unparseable verdict: {reply[:80]!r}")
    tail = reply[markers[-1].end() :]
    m = _INT.search(tail)
    if m is None:
        raise UnparseableVerdict(f"unparseable verdict: {reply[:80]!r}")
    value = int(m.group())
    if not 1 <= value <= 4:
        raise UnparseableVerdict(f"score {value} outside 1-4 in verdict {reply[:80]!r}")
    return value


def response_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class CachedVerdict(NamedTuple):
    score: int | None
    raw_reply: str


class VerdictCache:
    """Append-only JSONL store of judge replies.

    Each line is ``{"judge", "model", "id", "response_hash", "score", "raw_reply"}``;
    ``score`` is null when the reply could not be parsed.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[tuple[str, str, str, str], CachedVerdict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with self.path.open("r", encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                    except json.JSONDecodeError:
                        logger.warning("%s: skipping corrupt cache line", self.path)
                        continue
                    key = (obj["judge"], obj["model"], obj["id"], obj["response_hash"])
                    self._data[key] = CachedVerdict(obj.get("score"), obj.get("raw_reply", ""))

    def __len__(self) -> int:
        return len(self._data)

    def get(self, judge: str, model: str, rid: str, rhash: str) -> CachedVerdict | None:
        with self._lock:
            return self._data.get((judge, model, rid, rhash))

    def put(self, judge: str, model: str, rid: str, rhash: str, score: int | None, raw_reply: str) -> None:
        key = (judge, model, rid, rhash)
        with self._lock:
            if key in self._data:
                return
            self._data[key] = CachedVerdict(score, raw_reply)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                line = json.dumps(
                    {"judge": judge, "model": model, "id": rid, "response_hash": rhash, "score": score, "raw_reply": raw_reply},
                    ensure_ascii=False,
                )
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(line + "\n")


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    timeout: float = 60.0
    max_retries: int = 5
    backoff: float = 1.0
    max_in_flight: int = 4
    requests_per_second: float | None = None

    @classmethod
    def from_env(cls, base_url: str, model: str, **kw) -> EndpointConfig:
        return cls(base_url=base_url, model=model, api_key=os.environ.get(API_KEY_ENV), **kw)


class _RateLimiter:
    def __init__(self, rate: float | None, clock: Callable[[], float], sleep: Callable[[float], None]):
        self.interval = 1.0 / rate if rate else 0.0
        self.clock = clock
        self.sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.interval:
            return
        with self._lock:
            now = self.clock()
            start = max(now, self._next)
            self._next = start + self.interval
        if start > now:
            self.sleep(start - now)


_TRANSIENT = {408, 409, 425, 429, 500, 502, 503, 504}


class JudgeClient:
    """Chat-completion client with caching, retries and an in-flight bound."""

    def __init__(
        self,
        config: EndpointConfig,
        *,
        cache: VerdictCache | None = None,
        transport: httpx.BaseTransport | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.config = config
        self.cache = cache if cache is not None else VerdictCache()
        self.sleep = sleep
        headers = {"Authorization": f"Bearer {config.api_key}"} if config.api_key else {}
        self._client = httpx.Client(
            base_url=config.base_url.rstrip("/"), timeout=config.timeout, headers=headers, transport=transport
        )
        self._slots = threading.BoundedSemaphore(max(1, config.max_in_flight))
        self._limiter = _RateLimiter(config.requests_per_second, clock, sleep)
        self.requests_sent = 0
        self.retries = 0
        self._count_lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def complete(self, prompt: str) -> str:
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0,
        }
        last_error = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                delay = self.config.backoff * 2 ** (attempt - 1)
                with self._count_lock:
                    self.retries += 1
                logger.warning("judge retry %d after %s (sleeping %.2fs)", attempt, last_error, delay)
                self.sleep(delay)
            self._limiter.wait()
            with self._slots:
                with self._count_lock:
                    self.requests_sent += 1
                try:
                    resp = self._client.post("/chat/completions", json=payload)
                except httpx.TransportError as exc:
                    last_error = f"transport error: {exc}"
                    continue
            if resp.status_code in _TRANSIENT:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise EndpointError(f"judge endpoint returned {resp.status_code}: {resp.text[:200]}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise EndpointError(f"malformed chat completion response: {exc}") from exc
        raise EndpointError(f"judge endpoint failed after {self.config.max_retries} retries ({last_error})")

    def judge(self, record: EvalRecord, response: ModelResponse) -> JudgeVerdict:
        if record.record_id != response.record_id:
            raise ValueError(f"response {response.record_id!r} does not belong to record {record.record_id!r}")
        judge_model = self.config.model
        rhash = response_hash(response.response_text)
        cached = self.cache.get(judge_model, response.model_id, record.record_id, rhash)
        if cached is not None:
            reply = cached.raw_reply
        else:
            prompt = build_prompt(
                record.instruction,
                record.instance_input,
                response.response_text,
                instruction_id=record.record_id,
                model_id=response.model_id,
            )
            reply = self.complete(prompt.rendered_text)
        try:
            score = parse_score(reply)
        except UnparseableVerdict:
            if cached is None:
                self.cache.put(judge_model, response.model_id, record.record_id, rhash, None, reply)
            raise
        if cached is None:
            self.cache.put(judge_model, response.model_id, record.record_id, rhash, score, reply)
        return JudgeVerdict(score, reply, judge_model)


def judge(record: EvalRecord, response: ModelResponse, endpoint: EndpointConfig | JudgeClient) -> JudgeVerdict:
    if isinstance(endpoint, JudgeClient):
        return endpoint.judge(record, response)
    client = JudgeClient(endpoint)
    try:
        return client.judge(record, response)
    finally:
        client.close()


class FilteredResponses(NamedTuple):
    responses: list[ModelResponse]
    excluded_models: list[str]


def self_eval_models(judge_model: str, alias_map: Mapping[str, Iterable[str]] | None = None) -> set[str]:
    """Response model ids that are the judge itself (its own name plus configured aliases)."""
    names = {judge_model}
    if alias_map:
        names.update(alias_map.get(judge_model, ()))
    return names


def filter_self_eval(
    responses: Iterable[ModelResponse],
    judge_model: str,
    alias_map: Mapping[str, Iterable[str]] | None = None,
) -> FilteredResponses:
    blocked = self_eval_models(judge_model, alias_map)
    kept: list[ModelResponse] = []
    excluded: set[str] = set()
    for r in responses:
        if r.model_id in blocked:
            excluded.add(r.model_id)
        else:
            kept.append(r)
    return FilteredResponses(kept, sorted(excluded))


@dataclass
class JudgeRun:
    scores: dict[tuple[str, str], int] = field(default_factory=dict)
    unscored: list[tuple[str, str, str]] = field(default_factory=list)


def judge_all(
    records: Mapping[str, EvalRecord],
    responses: Iterable[ModelResponse],
    client: JudgeClient,
    *,
    jobs: int = 1,
) -> JudgeRun:
    """Judge every response; results are keyed by (model, record) independent of completion order."""
    from concurrent.futures import ThreadPoolExecutor

    items = sorted(
        (r for r in responses if r.record_id in records),
        key=lambda r: (r.model_id, r.record_id),
    )

    def one(r: ModelResponse) -> tuple[ModelResponse, int | None, str]:
        try:
            return r, client.judge(records[r.record_id], r).score, ""
        except UnparseableVerdict as exc:
            logger.warning("unscored %s/%s: %s", r.model_id, r.record_id, exc)
            return r, None, str(exc)

    if jobs <= 1:
        results = [one(r) for r in items]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    run = JudgeRun()
    for r, score, err in results:
        if score is None:
            run.unscored.append((r.model_id, r.record_id, err))
        else:
            run.scores[(r.model_id, r.record_id)] = score
    return run

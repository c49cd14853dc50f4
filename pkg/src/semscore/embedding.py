"""Embedding-based similarity: SemScore, pooling, and greedy-matching BERTScore.

Every metric here runs against an :class:`EmbeddingProvider`.  Providers
shipped with the package:

* :class:`HashEmbedder` -- deterministic hashed bag-of-tokens, no model weights
* :class:`PooledProvider` -- turns any token-level provider into a sentence
  provider via mean or CLS pooling
* :class:`SentenceTransformerProvider` -- local ``sentence-transformers`` model
  (``all-mpnet-base-v2`` by default)
* :class:`TransformerTokenProvider` -- hidden states of a Hugging Face encoder
* :class:`HttpEmbeddingProvider` -- remote ``POST /embed`` service
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
import threading
import warnings
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Protocol, runtime_checkable

import httpx
import numpy as np

logger = logging.getLogger(__name__)

Level = Literal["sentence", "token"]
PoolMode = Literal["mean", "cls"]

DEFAULT_SENTENCE_MODEL = "sentence-transformers/all-mpnet-base-v2"
DEFAULT_TOKEN_MODEL = "microsoft/deberta-xlarge-mnli"


class EmbeddingError(RuntimeError):
    pass


class EmbeddingServiceError(EmbeddingError):
    """The remote embedding service was unreachable or answered with an error."""


class TruncationWarning(UserWarning):
    pass


@runtime_checkable
class EmbeddingProvider(Protocol):
    name: str
    dimension: int
    max_tokens: int
    capabilities: frozenset[str]
    max_in_flight: int
    batch_size: int

    def count_tokens(self, text: str) -> int: ...

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]: ...

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def l2_normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0 or not math.isfinite(norm):
        raise EmbeddingError("cannot normalize a zero-norm or non-finite vector")
    return v / norm


def cosine(a: Sequence[float] | np.ndarray, b: Sequence[float] | np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine undefined for a zero-norm vector")
    # clamp rounding overshoot
    return max(-1.0, min(1.0, float(np.dot(a, b)) / (na * nb)))


def pool(tokens: np.ndarray | Sequence[Sequence[float]], mode: PoolMode = "mean") -> np.ndarray:
    """Reduce per-token vectors (rows) to one unit-length sentence vector."""
    arr = np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EmbeddingError("pooling needs a non-empty (n_tokens, dim) array")
    if mode == "mean":
        return l2_normalize(arr.mean(axis=0))
    if mode == "cls":
        return l2_normalize(arr[0])
    raise ValueError(f"unknown pooling mode {mode!r}")


def is_empty_text(text: str) -> bool:
    return not text.strip()


# ---------------------------------------------------------------------------
# reference provider
# ---------------------------------------------------------------------------


def hash_bucket(token: str, dimension: int = 64) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


class HashEmbedder:
    """Hashed bag-of-tokens embedder used as a deterministic stand-in for neural models.

    Tokens are the lowercased whitespace-separated words; each adds one count
    to ``hash_bucket(token)``.  The sentence vector is the L2-normalized count
    vector and the token-level variant emits one one-hot row per token.  Empty
    text maps to the all-zero vector (sentence) or an empty array (token).
    """

    capabilities = frozenset({"sentence_embedding", "token_embeddings"})

    def __init__(self, dimension: int = 64, max_tokens: int = 512, *, max_in_flight: int = 4, batch_size: int = 32):
        self.dimension = dimension
        self.max_tokens = max_tokens
        self.max_in_flight = max_in_flight
        self.batch_size = batch_size
        self.name = f"hash-{dimension}"

    def _tokens(self, text: str) -> list[str]:
        return text.lower().split()[: self.max_tokens]

    def count_tokens(self, text: str) -> int:
        return len(text.split())

    def embed_sentence(self, text: str) -> np.ndarray:
        v = np.zeros(self.dimension, dtype=np.float64)
        for tok in self._tokens(text):
            v[hash_bucket(tok, self.dimension)] += 1.0
        norm = float(np.linalg.norm(v))
        return v / norm if norm else v

    def embed_token_matrix(self, text: str) -> np.ndarray:
        toks = self._tokens(text)
        m = np.zeros((len(toks), self.dimension), dtype=np.float64)
        for i, tok in enumerate(toks):
            m[i, hash_bucket(tok, self.dimension)] = 1.0
        return m

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_sentence(t) for t in texts]

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_token_matrix(t) for t in texts]


_REFERENCE = HashEmbedder()


def reference_embedder(text: str) -> np.ndarray:
    return _REFERENCE.embed_sentence(text)


def reference_token_embeddings(text: str) -> np.ndarray:
    return _REFERENCE.embed_token_matrix(text)


class PooledProvider:
    """Sentence embeddings obtained by pooling another provider's token vectors."""

    capabilities = frozenset({"sentence_embedding", "token_embeddings"})

    def __init__(self, token_provider: EmbeddingProvider, mode: PoolMode = "mean"):
        if "token_embeddings" not in token_provider.capabilities:
            raise EmbeddingError(f"{token_provider.name} cannot produce token embeddings")
        if mode not in ("mean", "cls"):
            raise ValueError(f"unknown pooling mode {mode!r}")
        self.inner = token_provider
        self.mode = mode
        self.pooling = mode
        self.name = f"{token_provider.name}+{mode}"
        self.dimension = token_provider.dimension
        self.max_tokens = token_provider.max_tokens
        self.max_in_flight = token_provider.max_in_flight
        self.batch_size = token_provider.batch_size

    def count_tokens(self, text: str) -> int:
        return self.inner.count_tokens(text)

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]:
        return self.inner.embed_tokens(texts)

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text, toks in zip(texts, self.inner.embed_tokens(texts)):
            if len(toks) == 0:
                out.append(np.zeros(self.dimension, dtype=np.float64))
            else:
                out.append(pool(toks, self.mode))
        return out


# ---------------------------------------------------------------------------
# neural providers (optional dependencies, imported lazily)
# ---------------------------------------------------------------------------


class SentenceTransformerProvider:
    capabilities = frozenset({"sentence_embedding", "token_embeddings"})

    def __init__(self, model_name: str = DEFAULT_SENTENCE_MODEL, *, device: str | None = None, batch_size: int = 32):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise EmbeddingError("sentence-transformers is not installed (pip install 'artifact[neural]')") from exc
        try:
            self.model = SentenceTransformer(model_name, device=device)
        except Exception as exc:
            raise EmbeddingError(f"could not load sentence-transformer {model_name!r}: {exc}") from exc
        self.name = f"st:{model_name.rsplit('/', 1)[-1]}"
        self.dimension = int(self.model.get_sentence_embedding_dimension())
        self.max_tokens = int(self.model.max_seq_length)
        self.max_in_flight = 1
        self.batch_size = batch_size

    def count_tokens(self, text: str) -> int:
        return len(self.model.tokenizer(text, add_special_tokens=True)["input_ids"])

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]:
        vecs = self.model.encode(
            list(texts), batch_size=self.batch_size, convert_to_numpy=True, normalize_embeddings=False
        )
        out = []
        for v in np.asarray(vecs, dtype=np.float64):
            norm = float(np.linalg.norm(v))
            out.append(v / norm if norm else v)
        return out

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]:
        mats = self.model.encode(list(texts), output_value="token_embeddings", convert_to_numpy=False)
        return [np.asarray(m.detach().cpu().numpy(), dtype=np.float64) for m in mats]


class TransformerTokenProvider:
    """Per-token hidden states from a Hugging Face encoder.

    ``layer`` selects the hidden-state layer (default: last).  With
    ``keep_special=False`` the first and last positions (CLS/SEP) are dropped,
    which is what greedy-matching BERTScore expects; CLS pooling needs
    ``keep_special=True``.
    """

    capabilities = frozenset({"token_embeddings"})

    def __init__(
        self,
        model_name: str = DEFAULT_TOKEN_MODEL,
        *,
        layer: int | None = None,
        keep_special: bool = False,
        device: str = "cpu",
    ):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as exc:  # pragma: no cover - depends on environment
            raise EmbeddingError("transformers/torch are not installed (pip install 'artifact[neural]')") from exc
        try:
            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
            self.model = AutoModel.from_pretrained(model_name).to(device).eval()
        except Exception as exc:
            raise EmbeddingError(f"could not load {model_name!r}: {exc}") from exc
        self._torch = torch
        self.device = device
        self.layer = layer
        self.keep_special = keep_special
        suffix = "" if layer is None else f"@L{layer}"
        self.name = f"hf:{model_name.rsplit('/', 1)[-1]}{suffix}{'' if keep_special else '-nospecial'}"
        self.dimension = int(self.model.config.hidden_size)
        self.max_tokens = int(min(self.tokenizer.model_max_length, 4096))
        self.max_in_flight = 1
        self.batch_size = 8

    def count_tokens(self, text: str) -> int:
        return len(self.tokenizer(text)["input_ids"])

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]:
        out = []
        for text in texts:
            enc = self.tokenizer(text, return_tensors="pt", truncation=True, max_length=self.max_tokens)
            enc = {k: v.to(self.device) for k, v in enc.items()}
            with self._torch.no_grad():
                res = self.model(**enc, output_hidden_states=self.layer is not None)
            hidden = res.last_hidden_state if self.layer is None else res.hidden_states[self.layer]
            mat = hidden[0].detach().cpu().numpy().astype(np.float64)
            if not self.keep_special:
                mat = mat[1:-1]
            out.append(mat)
        return out

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]:
        raise EmbeddingError(f"{self.name} has no sentence embeddings; wrap it in PooledProvider")


class HttpEmbeddingProvider:
    """Client for an embedding service speaking ``POST /embed``.

    Request: ``{"model", "texts", "level": "sentence"|"token"}``.
    Response: ``{"dim", "vectors"}`` or ``{"dim", "token_vectors"}``; errors
    carry ``{"error"}`` with a non-200 status.
    """

    capabilities = frozenset({"sentence_embedding", "token_embeddings"})

    def __init__(
        self,
        base_url: str,
        model: str = DEFAULT_SENTENCE_MODEL,
        *,
        dimension: int = 768,
        max_tokens: int = 384,
        max_in_flight: int = 4,
        batch_size: int = 32,
        timeout: float = 60.0,
        transport: httpx.BaseTransport | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.name = f"http:{model.rsplit('/', 1)[-1]}"
        self.dimension = dimension
        self.max_tokens = max_tokens
        self.max_in_flight = max_in_flight
        self.batch_size = batch_size
        self._client = httpx.Client(base_url=self.base_url, timeout=timeout, transport=transport)

    def count_tokens(self, text: str) -> int:
        # the service owns tokenization; whitespace words are a lower bound
        return len(text.split())

    def _post(self, texts: Sequence[str], level: Level) -> dict:
        try:
            resp = self._client.post("/embed", json={"model": self.model, "texts": list(texts), "level": level})
        except httpx.HTTPError as exc:
            raise EmbeddingServiceError(f"embedding service unreachable at {self.base_url}: {exc}") from exc
        if resp.status_code != 200:
            try:
                msg = resp.json().get("error", resp.text)
            except ValueError:
                msg = resp.text
            raise EmbeddingServiceError(f"embedding service returned {resp.status_code}: {msg}")
        body = resp.json()
        dim = body.get("dim")
        if dim is not None and dim != self.dimension:
            raise EmbeddingError(f"service dimension {dim} != configured {self.dimension}")
        return body

    def embed_sentences(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = self._post(texts, "sentence")
        vecs = body.get("vectors")
        if not isinstance(vecs, list) or len(vecs) != len(texts):
            raise EmbeddingError("malformed response: 'vectors' missing or wrong length")
        out = []
        for v in vecs:
            arr = np.asarray(v, dtype=np.float64)
            norm = float(np.linalg.norm(arr))
            out.append(arr / norm if norm else arr)
        return out

    def embed_tokens(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = self._post(texts, "token")
        mats = body.get("token_vectors")
        if not isinstance(mats, list) or len(mats) != len(texts):
            raise EmbeddingError("malformed response: 'token_vectors' missing or wrong length")
        return [np.asarray(m, dtype=np.float64).reshape(-1, self.dimension) for m in mats]

    def close(self) -> None:
        self._client.close()


# ---------------------------------------------------------------------------
# cache + batching
# ---------------------------------------------------------------------------

_CACHE_MAGIC = b"SEMSCORE-EMB"
_CACHE_VERSION = 1
_RECORD_HEADER = struct.Struct("<32sII")


def cache_key(provider: EmbeddingProvider, text: str, level: Level) -> bytes:
    pooling = getattr(provider, "pooling", "") or ""
    h = hashlib.sha256()
    for part in (provider.name, pooling, level):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    h.update(text.encode("utf-8"))
    return h.digest()


class EmbeddingCache:
    """Thread-safe embedding cache, optionally persisted to an append-only file.

    File layout: ``SEMSCORE-EMB`` magic, uint16 version, then records of
    ``sha256 key | uint32 rows | uint32 cols | float64 data``.  ``rows == 0``
    marks a 1-D sentence vector.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[bytes, np.ndarray] = {}
        self._pending: list[bytes] = []
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        if self.path is not None and self.path.exists():
            self._load()

    def __len__(self) -> int:
        return len(self._data)

    def _load(self) -> None:
        assert self.path is not None
        raw = self.path.read_bytes()
        head = len(_CACHE_MAGIC) + 2
        if raw[: len(_CACHE_MAGIC)] != _CACHE_MAGIC:
            raise EmbeddingError(f"{self.path} is not an embedding cache file")
        (version,) = struct.unpack("<H", raw[len(_CACHE_MAGIC) : head])
        if version != _CACHE_VERSION:
            raise EmbeddingError(f"{self.path}: unsupported cache version {version}")
        pos = head
        while pos < len(raw):
            if pos + _RECORD_HEADER.size > len(raw):
                logger.warning("%s: ignoring truncated trailing record", self.path)
                break
            key, rows, cols = _RECORD_HEADER.unpack_from(raw, pos)
            pos += _RECORD_HEADER.size
            count = (rows or 1) * cols
            end = pos + 8 * count
            if end > len(raw):
                logger.warning("%s: ignoring truncated trailing record", self.path)
                break
            arr = np.frombuffer(raw[pos:end], dtype="<f8").copy()
            self._data[key] = arr if rows == 0 else arr.reshape(rows, cols)
            pos = end

    def get(self, key: bytes) -> np.ndarray | None:
        with self._lock:
            v = self._data.get(key)
            if v is None:
                self.misses += 1
            else:
                self.hits += 1
            return v

    def get_or_insert(self, key: bytes, value: np.ndarray) -> np.ndarray:
        """Insert ``value`` unless ``key`` is present; return the stored array."""
        with self._lock:
            existing = self._data.get(key)
            if existing is not None:
                return existing
            value = np.asarray(value, dtype=np.float64)
            value.setflags(write=False)
            self._data[key] = value
            self._pending.append(key)
            return value

    def flush(self) -> None:
        if self.path is None:
            return
        with self._lock:
            if not self._pending:
                return
            new_file = not self.path.exists()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("ab") as fh:
                if new_file:
                    fh.write(_CACHE_MAGIC + struct.pack("<H", _CACHE_VERSION))
                for key in self._pending:
                    arr = self._data[key]
                    if arr.ndim == 1:
                        rows, cols = 0, arr.shape[0]
                    else:
                        rows, cols = arr.shape
                    fh.write(_RECORD_HEADER.pack(key, rows, cols))
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            self._pending.clear()


def embed_batch(
    texts: Sequence[str],
    provider: EmbeddingProvider,
    *,
    level: Level = "sentence",
    cache: EmbeddingCache | None = None,
    ids: Sequence[str] | None = None,
) -> list[np.ndarray]:
    """Embed ``texts`` in order, serving repeats from ``cache``.

    Uncached texts are sent to the provider in chunks of ``provider.batch_size``
    with at most ``provider.max_in_flight`` chunks in flight.  Over-length texts
    raise a :class:`TruncationWarning` naming their index (or id).
    """
    if ids is not None and len(ids) != len(texts):
        raise ValueError("ids and texts differ in length")
    capability = "sentence_embedding" if level == "sentence" else "token_embeddings"
    if capability not in provider.capabilities:
        raise EmbeddingError(f"provider {provider.name} lacks {capability}")

    for i, text in enumerate(texts):
        n = provider.count_tokens(text)
        if n > provider.max_tokens:
            label = ids[i] if ids is not None else f"index {i}"
            msg = f"{label}: {n} tokens exceeds {provider.name} limit {provider.max_tokens}; keeping the first {provider.max_tokens}"
            logger.warning(msg)
            warnings.warn(msg, TruncationWarning, stacklevel=2)

    keys = [cache_key(provider, t, level) for t in texts]
    results: dict[bytes, np.ndarray] = {}
    todo: dict[bytes, int] = {}
    for i, key in enumerate(keys):
        if key in results or key in todo:
            continue
        hit = cache.get(key) if cache is not None else None
        if hit is not None:
            results[key] = hit
        else:
            todo[key] = i

    pending = list(todo.items())
    chunks = [pending[i : i + provider.batch_size] for i in range(0, len(pending), max(1, provider.batch_size))]
    call = provider.embed_sentences if level == "sentence" else provider.embed_tokens

    def run(chunk: list[tuple[bytes, int]]) -> list[tuple[bytes, np.ndarray]]:
        batch = [texts[i] for _, i in chunk]
        try:
            vecs = call(batch)
        except EmbeddingError as exc:
            first = chunk[0][1]
            label = ids[first] if ids is not None else f"index {first}"
            raise type(exc)(f"{provider.name} failed on batch starting at {label}: {exc}") from exc
        if len(vecs) != len(batch):
            raise EmbeddingError(f"{provider.name} returned {len(vecs)} vectors for {len(batch)} texts")
        return [(key, np.asarray(v, dtype=np.float64)) for (key, _), v in zip(chunk, vecs)]

    if chunks:
        workers = max(1, min(provider.max_in_flight, len(chunks)))
        if workers == 1:
            done = [run(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool_:
                done = list(pool_.map(run, chunks))
        for chunk_result in done:
            for key, vec in chunk_result:
                results[key] = cache.get_or_insert(key, vec) if cache is not None else vec

    return [results[k] for k in keys]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

SEMSCORE_EMPTY = -1.0
BERTSCORE_EMPTY = 0.0


def semscore(
    target: str,
    candidate: str,
    provider: EmbeddingProvider,
    *,
    cache: EmbeddingCache | None = None,
) -> float:
    """Cosine similarity of the two texts' sentence embeddings, each embedded on its own.

    An empty candidate (or target) scores -1, the bottom of the range.
    """
    if is_empty_text(candidate) or is_empty_text(target):
        logger.debug("empty text: semscore set to %s", SEMSCORE_EMPTY)
        return SEMSCORE_EMPTY
    t, c = embed_batch([target, candidate], provider, cache=cache)
    return cosine(t, c)


@dataclass(frozen=True)
class BertScore:
    precision: float
    recall: float
    f1: float


def greedy_match(target_tokens: np.ndarray, candidate_tokens: np.ndarray) -> BertScore:
    """Greedy max-cosine matching of candidate tokens to target tokens and back."""
    t = np.asarray(target_tokens, dtype=np.float64)
    c = np.asarray(candidate_tokens, dtype=np.float64)
    if t.ndim != 2 or c.ndim != 2 or len(t) == 0 or len(c) == 0:
        raise EmbeddingError("greedy matching needs non-empty token embeddings on both sides")
    if t.shape[1] != c.shape[1]:
        raise EmbeddingError(f"dimension mismatch: {t.shape[1]} vs {c.shape[1]}")
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    if (tn == 0).any() or (cn == 0).any():
        raise EmbeddingError("zero-norm token embedding")
    sim = np.clip((c / cn) @ (t / tn).T, -1.0, 1.0)
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    denom = precision + recall
    f1 = 2 * precision * recall / denom if denom else 0.0
    return BertScore(precision, recall, f1)


def bertscore(
    target: str,
    candidate: str,
    provider: EmbeddingProvider,
    *,
    cache: EmbeddingCache | None = None,
) -> BertScore:
    if is_empty_text(candidate) or is_empty_text(target):
        return BertScore(BERTSCORE_EMPTY, BERTSCORE_EMPTY, BERTSCORE_EMPTY)
    t, c = embed_batch([target, candidate], provider, level="token", cache=cache)
    return greedy_match(t, c)


def bertscore_f1(
    target: str,
    candidate: str,
    provider: EmbeddingProvider,
    *,
    cache: EmbeddingCache | None = None,
) -> float:
    return bertscore(target, candidate, provider, cache=cache).f1

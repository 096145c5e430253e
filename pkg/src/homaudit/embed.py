"""Story-to-vector providers behind one interface.

Three providers cover the fidelity/testing spectrum:

* ``remote`` - an HTTPS embedding endpoint (the production sentence encoder
  lives behind an external runtime; the model name is an opaque config
  string). Batched, retried, and robust to out-of-order response items.
* ``hash`` - seeded bag-of-words projection: each token is bucketed and
  signed by SHA-256, so vectors are cheap, deterministic, and text-sensitive.
* ``gaussian`` - ignores the text entirely and samples around a per-group
  mean direction with configurable spread; the analytic ground truth for
  end-to-end statistical recovery tests (smaller spread => higher expected
  within-condition cosine).

All providers consume GenerationRecords so group-conditioned providers can
see the metadata; text providers just read record.story_text.
"""

from __future__ import annotations

import hashlib
import os
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .config import EmbedConfig, GroupValueTable
from .core import HomAuditError, stable_seed
from .genclient import GenerationRecord, StoryStatus, TransportError, TransportReply


class EmbedError(HomAuditError):
    pass


@dataclass
class EmbeddingVector:
    key: str
    values: np.ndarray
    norm: float


class HashEmbedder:
    """Seeded-hash bag-of-words projection.

    Token buckets and signs come from SHA-256 of (seed, token), so identical
    texts always map to identical vectors and one changed word moves the
    vector. Vectors are raw signed counts; cosine is scale-invariant so no
    normalization is applied.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 1:
            raise EmbedError(f"dim must be positive, got {dim}")
        self.dim = dim
        self.seed = seed

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim, dtype=np.float64)
        for token in text.lower().split():
            digest = hashlib.sha256(f"{self.seed}\x1f{token}".encode("utf-8")).digest()
            idx = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] & 1 == 0 else -1.0
            v[idx] += sign
        return v.astype(np.float32)

    def embed_records(self, records: Sequence[GenerationRecord]) -> np.ndarray:
        return np.stack([self.embed_text(r.story_text) for r in records]) if records else np.zeros((0, self.dim), np.float32)


def gaussian_group_embed(
    record: GenerationRecord,
    spread: GroupValueTable,
    seed: int,
    dim: int = 64,
    mu_scale: float = 1.0,
) -> np.ndarray:
    """normalize(mu + sigma*z) for one record.

    mu is a fixed unit direction per (group, setting) scaled by mu_scale;
    sigma comes from the spread table; z is a seeded standard normal draw
    keyed by the record, so the whole corpus embeds reproducibly. Expected
    pairwise cosine within a cell decreases strictly in sigma/||mu||.
    """
    sigma = spread.lookup(record.race, record.gender, record.knob, record.setting)
    if sigma < 0:
        raise EmbedError(f"spread must be non-negative, got {sigma}")
    mu_rng = np.random.default_rng(
        stable_seed(seed, "mu", record.race.value, record.gender.value, record.knob.value, repr(record.setting))
    )
    mu = mu_rng.standard_normal(dim)
    mu *= mu_scale / np.linalg.norm(mu)
    z = np.random.default_rng(stable_seed(seed, "z", record.key)).standard_normal(dim)
    v = mu + sigma * z
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise EmbedError("degenerate zero vector (mu_scale and spread both zero?)")
    return (v / norm).astype(np.float32)


class GaussianGroupEmbedder:
    def __init__(self, spread: GroupValueTable, seed: int = 0, dim: int = 64, mu_scale: float = 1.0):
        self.spread = spread
        self.seed = seed
        self.dim = dim
        self.mu_scale = mu_scale

    def embed_records(self, records: Sequence[GenerationRecord]) -> np.ndarray:
        if not records:
            return np.zeros((0, self.dim), np.float32)
        return np.stack([gaussian_group_embed(r, self.spread, self.seed, self.dim, self.mu_scale) for r in records])


class RemoteEmbedder:
    """HTTPS embedding endpoint: POST {model, input: [texts]}.

    The response lists items with explicit indices; items are re-ordered by
    index before stacking so out-of-order replies cannot scramble the
    key<->vector correspondence.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "HOMAUDIT_EMBED_KEY",
        retry_attempts: int = 5,
        retry_base_delay: float = 1.0,
        transport: Callable[..., TransportReply] | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not base_url:
            raise EmbedError("remote embedder needs a base_url")
        self.base_url = base_url
        self.model = model
        self.api_key_env = api_key_env
        self.retry_attempts = retry_attempts
        self.retry_base_delay = retry_base_delay
        self.sleep = sleep
        if transport is None:
            from .genclient import _httpx_transport

            transport = _httpx_transport
        self.transport = transport

    def embed_records(self, records: Sequence[GenerationRecord]) -> np.ndarray:
        api_key = os.environ.get(self.api_key_env, "")
        if not api_key:
            raise EmbedError(f"embedding credential missing: set ${self.api_key_env}")
        headers = {"Authorization": f"Bearer {api_key}", "Content-Type": "application/json"}
        payload = {"model": self.model, "input": [r.story_text for r in records]}
        reply = None
        for attempt in range(self.retry_attempts):
            try:
                reply = self.transport(self.base_url, payload, headers, 60.0)
            except TransportError:
                reply = None
            if reply is not None and reply.status_code == 200:
                break
            if reply is not None and reply.status_code in (401, 403):
                raise EmbedError(f"embedding endpoint rejected credential (HTTP {reply.status_code})")
            if attempt + 1 < self.retry_attempts:
                self.sleep(self.retry_base_delay * (2.0**attempt))
        else:
            raise EmbedError(f"embedding request failed after {self.retry_attempts} attempts")

        data = (reply.body or {}).get("data")
        if not isinstance(data, list) or len(data) != len(records):
            raise EmbedError(f"embedding response has {len(data or [])} items for {len(records)} inputs")
        rows: list[np.ndarray | None] = [None] * len(records)
        for item in data:
            idx = int(item["index"])
            if not 0 <= idx < len(records) or rows[idx] is not None:
                raise EmbedError(f"embedding response index {idx} invalid or duplicated")
            rows[idx] = np.asarray(item["embedding"], dtype=np.float32)
        return np.stack(rows)  # type: ignore[arg-type]


def make_provider(cfg: EmbedConfig, transport=None):
    if cfg.provider == "hash":
        return HashEmbedder(dim=cfg.dim, seed=cfg.seed)
    if cfg.provider == "gaussian":
        return GaussianGroupEmbedder(spread=cfg.spread, seed=cfg.seed, dim=cfg.dim, mu_scale=cfg.mu_scale)
    if cfg.provider == "remote":
        return RemoteEmbedder(base_url=cfg.base_url, model=cfg.model, api_key_env=cfg.api_key_env, transport=transport)
    raise EmbedError(f"unknown embedding provider {cfg.provider!r}")


def embed_corpus(
    records: Iterable[GenerationRecord], provider, batch_size: int = 64
) -> Iterator[EmbeddingVector]:
    """One vector per Ok record, batched; any dimension drift or bad value aborts."""
    batch: list[GenerationRecord] = []
    expected_dim: int | None = None

    def flush() -> Iterator[EmbeddingVector]:
        nonlocal expected_dim
        if not batch:
            return
        matrix = provider.embed_records(batch)
        if matrix.shape[0] != len(batch):
            raise EmbedError(f"provider returned {matrix.shape[0]} vectors for {len(batch)} records")
        if expected_dim is None:
            expected_dim = int(matrix.shape[1])
        elif matrix.shape[1] != expected_dim:
            raise EmbedError(f"dimension drift mid-run: {matrix.shape[1]} != {expected_dim}")
        if not np.all(np.isfinite(matrix)):
            raise EmbedError("provider produced NaN/Inf components")
        for rec, row in zip(batch, matrix):
            yield EmbeddingVector(key=rec.key, values=row, norm=float(np.linalg.norm(row.astype(np.float64))))
        batch.clear()

    for record in records:
        if record.status is not StoryStatus.OK:
            raise EmbedError(f"cannot embed record with status {record.status.value}: {record.key}")
        batch.append(record)
        if len(batch) >= batch_size:
            yield from flush()
    yield from flush()

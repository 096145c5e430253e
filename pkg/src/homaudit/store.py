"""Append-only persistence: story corpus, embedding sidecar, observation table.

File formats (all documented here; the README repeats the essentials):

Corpus: UTF-8 JSONL. Line 1 is a header object {"_kind": "homaudit.corpus",
"schema_version": 1}; every following line is one GenerationRecord. Appends
are single write() calls followed by a flush, so a crash can only truncate
the final line, never interleave two records. Loading tolerates (and
reports) a partial trailing line and skips corrupt lines with a warning;
duplicate keys are a hard error.

Embeddings: text header then raw little-endian float32, row-major.
    homaudit-embeddings v1
    dim <d>
    count <n>
    key <key-1>
    ...
    key <key-n>
    end
    <n*d*4 bytes of '<f4'>
Row i belongs to key i, in header order.

Observations: CSV with header
    cosine_raw,cosine_std,race,gender,pair_id,knob,setting
pair_id is "lo-hi" with lo <= hi (unordered stimulus-set pair). Floats are
written shortest-round-trip, so re-reading reproduces the exact doubles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .core import HomAuditError, Knob
from .genclient import GenerationRecord

CORPUS_SCHEMA_VERSION = 1
CORPUS_KIND = "homaudit.corpus"
EMBED_MAGIC = "homaudit-embeddings v1"
OBSERVATION_COLUMNS = ("cosine_raw", "cosine_std", "race", "gender", "pair_id", "knob", "setting")


class StoreError(HomAuditError):
    pass


# ---------------------------------------------------------------------------
# Corpus (JSONL)
# ---------------------------------------------------------------------------


def _header_line() -> str:
    return json.dumps({"_kind": CORPUS_KIND, "schema_version": CORPUS_SCHEMA_VERSION}, separators=(",", ":"))


class CorpusWriter:
    """Single-writer append handle; emits the header on a fresh file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")
        if fresh:
            self._fh.write(_header_line() + "\n")
            self._fh.flush()

    def append(self, record: GenerationRecord) -> None:
        self._fh.write(record.to_json() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CorpusWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_corpus(path: str | Path) -> tuple[list[GenerationRecord], list[str]]:
    """Read every intact record; returns (records, warnings).

    A partial trailing line (crash recovery) or an unparseable line becomes a
    warning; a key collision is an error naming the key.
    """
    path = Path(path)
    if not path.exists():
        raise StoreError(f"corpus not found: {path}")
    raw = path.read_bytes().decode("utf-8")
    lines = raw.split("\n")
    trailing_partial = bool(lines and lines[-1] != "")
    if not trailing_partial:
        lines = lines[:-1]

    if not lines:
        raise StoreError(f"corpus is empty: {path}")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise StoreError(f"corpus header unreadable: {path}") from None
    if header.get("_kind") != CORPUS_KIND:
        raise StoreError(f"not a corpus file: {path}")
    if header.get("schema_version") != CORPUS_SCHEMA_VERSION:
        raise StoreError(
            f"schema_version mismatch: file has {header.get('schema_version')}, "
            f"reader supports {CORPUS_SCHEMA_VERSION}"
        )

    records: list[GenerationRecord] = []
    warnings: list[str] = []
    seen: dict[str, int] = {}
    body = lines[1:]
    last = len(body) - 1
    for i, line in enumerate(body):
        if not line.strip():
            continue
        try:
            record = GenerationRecord.from_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, ValueError):
            if trailing_partial and i == last:
                warnings.append(f"line {i + 2}: partial trailing record (truncated write), skipped")
            else:
                warnings.append(f"line {i + 2}: corrupt record, skipped")
            continue
        key = record.key
        if key in seen:
            raise StoreError(f"duplicate key on load: {key} (lines {seen[key]} and {i + 2})")
        seen[key] = i + 2
        records.append(record)
    return records, warnings


def existing_keys(path: str | Path) -> set[str]:
    """Keys already persisted; empty set when the corpus does not exist yet."""
    path = Path(path)
    if not path.exists() or path.stat().st_size == 0:
        return set()
    records, _ = load_corpus(path)
    return {r.key for r in records}


# ---------------------------------------------------------------------------
# Embedding sidecar
# ---------------------------------------------------------------------------


def write_embeddings(path: str | Path, keys: Sequence[str], matrix: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2 or matrix.shape[0] != len(keys):
        raise StoreError(f"embedding matrix shape {matrix.shape} does not match {len(keys)} keys")
    header = [EMBED_MAGIC, f"dim {matrix.shape[1]}", f"count {matrix.shape[0]}"]
    header += [f"key {k}" for k in keys]
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(matrix.tobytes())


def read_embeddings(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise StoreError(f"embeddings not found: {path}")
    blob = path.read_bytes()
    end_marker = b"\nend\n"
    cut = blob.find(end_marker)
    if cut < 0:
        raise StoreError(f"embedding header missing terminator: {path}")
    header_lines = blob[:cut].decode("utf-8").split("\n")
    if not header_lines or header_lines[0] != EMBED_MAGIC:
        raise StoreError(f"not an embedding sidecar: {path}")
    try:
        dim = int(header_lines[1].split()[1])
        count = int(header_lines[2].split()[1])
    except (IndexError, ValueError):
        raise StoreError(f"embedding header malformed: {path}") from None
    keys = [line[4:] for line in header_lines[3:] if line.startswith("key ")]
    if len(keys) != count:
        raise StoreError(f"embedding header lists {len(keys)} keys, expected {count}")
    body = blob[cut + len(end_marker) :]
    expected = count * dim * 4
    if len(body) != expected:
        raise StoreError(f"embedding payload is {len(body)} bytes, expected {expected}")
    matrix = np.frombuffer(body, dtype="<f4").reshape(count, dim)
    return keys, matrix


# ---------------------------------------------------------------------------
# Observation table
# ---------------------------------------------------------------------------


@dataclass
class ObservationColumns:
    """Columnar view of an observation table, sized for millions of rows.

    Race and gender are stored as canonical 0/1 indicators (Black=1 against
    the White reference, Woman=1 against Man); model code derives its own
    dummies from these, so reference levels can be swapped without touching
    storage.
    """

    cosine_raw: np.ndarray  # float64
    cosine_std: np.ndarray  # float64
    race_black: np.ndarray  # uint8
    gender_woman: np.ndarray  # uint8
    pair_lo: np.ndarray  # int32
    pair_hi: np.ndarray  # int32
    setting: np.ndarray  # float64
    knob: Knob

    @property
    def n(self) -> int:
        return int(self.cosine_raw.shape[0])

    def subset(self, mask: np.ndarray) -> "ObservationColumns":
        return ObservationColumns(
            cosine_raw=self.cosine_raw[mask],
            cosine_std=self.cosine_std[mask],
            race_black=self.race_black[mask],
            gender_woman=self.gender_woman[mask],
            pair_lo=self.pair_lo[mask],
            pair_hi=self.pair_hi[mask],
            setting=self.setting[mask],
            knob=self.knob,
        )

    def settings_sorted(self) -> np.ndarray:
        return np.unique(self.setting)


def _parse_pair_categories(cats: Iterable[str]) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = [], []
    for cat in cats:
        try:
            a, b = cat.split("-")
            lo.append(int(a))
            hi.append(int(b))
        except ValueError:
            raise StoreError(f"bad pair_id {cat!r}; expected 'lo-hi'") from None
    return np.asarray(lo, dtype=np.int32), np.asarray(hi, dtype=np.int32)


def load_observations(path: str | Path) -> ObservationColumns:
    """Load an observation CSV with exact float round-trip."""
    path = Path(path)
    if not path.exists():
        raise StoreError(f"observations not found: {path}")
    df = pd.read_csv(
        path,
        dtype={"race": "category", "gender": "category", "pair_id": "category", "knob": "category"},
        float_precision="round_trip",
    )
    missing = [c for c in OBSERVATION_COLUMNS if c not in df.columns]
    if missing:
        raise StoreError(f"observation table missing columns: {', '.join(missing)}")

    knob_values = list(df["knob"].cat.categories)
    if len(knob_values) != 1:
        raise StoreError(f"observation table mixes knobs: {knob_values}")
    knob = Knob(knob_values[0])

    for col, allowed in (("race", {"Black", "White"}), ("gender", {"Man", "Woman"})):
        bad = set(df[col].cat.categories) - allowed
        if bad:
            raise StoreError(f"unknown {col} level(s): {sorted(bad)}")

    pair_codes = df["pair_id"].cat.codes.to_numpy()
    cat_lo, cat_hi = _parse_pair_categories(df["pair_id"].cat.categories)
    return ObservationColumns(
        cosine_raw=df["cosine_raw"].to_numpy(dtype=np.float64),
        cosine_std=df["cosine_std"].to_numpy(dtype=np.float64),
        race_black=(df["race"].to_numpy() == "Black").astype(np.uint8),
        gender_woman=(df["gender"].to_numpy() == "Woman").astype(np.uint8),
        pair_lo=cat_lo[pair_codes],
        pair_hi=cat_hi[pair_codes],
        setting=df["setting"].to_numpy(dtype=np.float64),
        knob=knob,
    )

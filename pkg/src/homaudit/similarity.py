"""Within-condition pairwise cosine similarity and within-setting standardization.

A condition (one race x gender cell at one knob setting) contributes every
unordered pair of its stories: cross-stimulus pairs and same-stimulus pairs
alike, a story never paired with itself. Each pair carries the unordered
pair of the two stories' stimulus-set ids - the grouping factor for the
downstream random-intercept models. Cosines are then z-scored within each
(knob, setting) stratum, pooled across all four groups.

Enumeration streams blocks of rows (a slice of leading stories against all
later stories), so memory stays bounded by the block size rather than the
pair count. Standardization over files is a two-phase pass: accumulate
per-stratum moments while writing the raw rows, then rewrite with the
z-scored column added. All accumulation is double precision.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import pandas as pd

from .core import Gender, HomAuditError, Knob, Race
from .genclient import GenerationRecord, StoryStatus
from .store import OBSERVATION_COLUMNS, ObservationColumns


class SimilarityError(HomAuditError):
    pass


@dataclass(frozen=True, order=True)
class PairId:
    """Unordered pair of stimulus-set ids; lo == hi marks a same-set pair."""

    lo: int
    hi: int

    def __post_init__(self):
        if self.lo > self.hi:
            raise SimilarityError(f"PairId requires lo <= hi, got ({self.lo}, {self.hi})")

    @classmethod
    def of(cls, a: int, b: int) -> "PairId":
        return cls(min(a, b), max(a, b))

    def __str__(self) -> str:
        return f"{self.lo}-{self.hi}"


@dataclass(frozen=True)
class SimilarityObservation:
    """One pairwise cosine row; the atom of every statistical model."""

    cosine_raw: float
    cosine_std: float
    race: Race
    gender: Gender
    pair_id: PairId
    knob: Knob
    setting: float


@dataclass
class ObservationBlock:
    """A contiguous chunk of one condition's pair rows (constant metadata)."""

    race: Race
    gender: Gender
    knob: Knob
    setting: float
    cos: np.ndarray  # float64
    lo: np.ndarray  # int32
    hi: np.ndarray  # int32

    @property
    def n(self) -> int:
        return int(self.cos.shape[0])


def observation_rows(obs: ObservationColumns) -> Iterator[SimilarityObservation]:
    """Typed row view of a columnar table (inspection and small-scale use)."""
    for i in range(obs.n):
        yield SimilarityObservation(
            cosine_raw=float(obs.cosine_raw[i]),
            cosine_std=float(obs.cosine_std[i]),
            race=Race.BLACK if obs.race_black[i] else Race.WHITE,
            gender=Gender.WOMAN if obs.gender_woman[i] else Gender.MAN,
            pair_id=PairId(int(obs.pair_lo[i]), int(obs.pair_hi[i])),
            knob=obs.knob,
            setting=float(obs.setting[i]),
        )


def pair_count(n_stories_per_condition: int, n_conditions: int = 1) -> int:
    """Unordered story pairs per condition times conditions: C(n, 2) each."""
    if n_stories_per_condition < 0 or n_conditions < 0:
        raise SimilarityError("counts must be non-negative")
    n = n_stories_per_condition
    return n_conditions * (n * (n - 1) // 2)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """u.v / (|u||v|), accumulated in double precision, clamped to [-1, 1]."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise SimilarityError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        raise SimilarityError("zero-norm vector")
    return min(1.0, max(-1.0, float(u @ v) / (nu * nv)))


# ---------------------------------------------------------------------------
# Pair enumeration
# ---------------------------------------------------------------------------


def _condition_groups(records: Sequence[GenerationRecord]) -> dict:
    groups: dict[tuple, list[GenerationRecord]] = {}
    for rec in records:
        groups.setdefault((rec.setting, rec.gender, rec.race), []).append(rec)
    # deterministic order: setting ascending, gender, race, then story identity
    ordered = {}
    for cell in sorted(groups, key=lambda c: (c[0], c[1].value, c[2].value)):
        ordered[cell] = sorted(groups[cell], key=lambda r: (r.set_id, r.replicate_index))
    return ordered


def build_observations(
    records: Sequence[GenerationRecord],
    keys: Sequence[str],
    vectors: np.ndarray,
    *,
    known_sets: frozenset[int] | set[int] | None = None,
    block_rows: int = 256,
) -> Iterator[ObservationBlock]:
    """Stream all within-condition pair rows for a corpus.

    `keys`/`vectors` come from the embedding sidecar; every Ok record must
    have a vector. Blocks arrive condition by condition (settings ascending),
    each covering `block_rows` leading stories against all later ones, so
    peak memory is O(block_rows * stories-per-condition), independent of the
    total pair count.
    """
    ok = [r for r in records if r.status is StoryStatus.OK]
    if known_sets is not None:
        for rec in ok:
            if rec.set_id not in known_sets:
                raise SimilarityError(f"story references unknown stimulus set {rec.set_id}: {rec.key}")
    knobs = {r.knob for r in ok}
    if len(knobs) > 1:
        raise SimilarityError(f"corpus mixes knobs: {sorted(k.value for k in knobs)}")
    row_of = {k: i for i, k in enumerate(keys)}

    for (setting, gender, race), members in _condition_groups(ok).items():
        n = len(members)
        if n < 2:
            continue
        try:
            idx = np.array([row_of[m.key] for m in members], dtype=np.int64)
        except KeyError as exc:
            raise SimilarityError(f"record has no embedding: {exc.args[0]}") from None
        V = vectors[idx].astype(np.float64, copy=False)
        norms = np.linalg.norm(V, axis=1)
        if np.any(norms == 0.0):
            raise SimilarityError("zero-norm vector")
        Vn = V / norms[:, None]
        sets = np.array([m.set_id for m in members], dtype=np.int32)
        knob = members[0].knob

        cols = np.arange(n)
        for i0 in range(0, n - 1, block_rows):
            i1 = min(i0 + block_rows, n - 1)
            C = Vn[i0:i1] @ Vn.T
            rows_local = np.arange(i0, i1)
            mask = cols[None, :] > rows_local[:, None]
            cos_flat = np.clip(C[mask], -1.0, 1.0)
            counts = (n - 1) - rows_local
            si = np.repeat(sets[rows_local], counts)
            sj = sets[np.concatenate([cols[r + 1 :] for r in rows_local])] if len(rows_local) else np.empty(0, np.int32)
            yield ObservationBlock(
                race=race,
                gender=gender,
                knob=knob,
                setting=float(setting),
                cos=cos_flat,
                lo=np.minimum(si, sj).astype(np.int32),
                hi=np.maximum(si, sj).astype(np.int32),
            )


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


class StratumMoments:
    """Streaming mean/variance (Welford with Chan block merge)."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self):
        self.n = 0
        self.mean = 0.0
        self.m2 = 0.0

    def update(self, x: np.ndarray) -> None:
        bn = int(x.shape[0])
        if bn == 0:
            return
        bmean = float(np.mean(x))
        bm2 = float(np.sum((x - bmean) ** 2))
        if self.n == 0:
            self.n, self.mean, self.m2 = bn, bmean, bm2
            return
        delta = bmean - self.mean
        total = self.n + bn
        self.m2 += bm2 + delta * delta * self.n * bn / total
        self.mean += delta * bn / total
        self.n = total

    @property
    def sd(self) -> float:
        if self.n < 2:
            raise SimilarityError(f"stratum needs at least 2 observations, got {self.n}")
        return math.sqrt(self.m2 / (self.n - 1))

    @property
    def degenerate(self) -> bool:
        # exactly zero, or pure rounding noise around a constant
        return self.sd <= 1e-13 * max(1.0, abs(self.mean))


def zscore_sample(x: np.ndarray) -> np.ndarray:
    """z = (x - mean) / sample SD (denominator N-1); errors on zero variance."""
    x = np.asarray(x, dtype=np.float64)
    moments = StratumMoments()
    moments.update(x)
    if moments.degenerate:
        raise SimilarityError("zero variance in stratum")
    return (x - moments.mean) / moments.sd


def _stratum_scales(moments: dict[float, StratumMoments], knob: Knob) -> dict[float, tuple[float, float]]:
    scales = {}
    for setting, m in moments.items():
        if m.degenerate:
            raise SimilarityError(f"zero variance in stratum ({knob.value}={setting!r})")
        scales[setting] = (m.mean, m.sd)
    return scales


def standardize_columns(obs: ObservationColumns) -> ObservationColumns:
    """Fill cosine_std by z-scoring within each (knob, setting) stratum."""
    std = np.empty_like(obs.cosine_raw)
    moments: dict[float, StratumMoments] = {}
    for setting in obs.settings_sorted():
        mask = obs.setting == setting
        m = StratumMoments()
        m.update(obs.cosine_raw[mask])
        moments[float(setting)] = m
    scales = _stratum_scales(moments, obs.knob)
    for setting, (mean, sd) in scales.items():
        mask = obs.setting == setting
        std[mask] = (obs.cosine_raw[mask] - mean) / sd
    return ObservationColumns(
        cosine_raw=obs.cosine_raw,
        cosine_std=std,
        race_black=obs.race_black,
        gender_woman=obs.gender_woman,
        pair_lo=obs.pair_lo,
        pair_hi=obs.pair_hi,
        setting=obs.setting,
        knob=obs.knob,
    )


def collect_observation_columns(blocks: Iterable[ObservationBlock]) -> ObservationColumns:
    """Materialize blocks in memory (test- and small-run convenience)."""
    cos, race, gender, lo, hi, setting = [], [], [], [], [], []
    knob: Knob | None = None
    for b in blocks:
        knob = b.knob
        cos.append(b.cos)
        lo.append(b.lo)
        hi.append(b.hi)
        race.append(np.full(b.n, 1 if b.race is Race.BLACK else 0, dtype=np.uint8))
        gender.append(np.full(b.n, 1 if b.gender is Gender.WOMAN else 0, dtype=np.uint8))
        setting.append(np.full(b.n, b.setting, dtype=np.float64))
    if knob is None:
        raise SimilarityError("no observation blocks")
    cat = np.concatenate
    return ObservationColumns(
        cosine_raw=cat(cos),
        cosine_std=np.full(sum(c.shape[0] for c in cos), np.nan),
        race_black=cat(race),
        gender_woman=cat(gender),
        pair_lo=cat(lo),
        pair_hi=cat(hi),
        setting=cat(setting),
        knob=knob,
    )


def _block_frame(block: ObservationBlock) -> pd.DataFrame:
    pair = block.lo.astype(np.int64) << 32 | block.hi.astype(np.int64)
    uniq, codes = np.unique(pair, return_inverse=True)
    labels = [f"{int(p >> 32)}-{int(p & 0xFFFFFFFF)}" for p in uniq]
    n = block.n
    return pd.DataFrame(
        {
            "cosine_raw": block.cos,
            "race": pd.Categorical.from_codes(np.zeros(n, dtype=np.int8), categories=[block.race.value]),
            "gender": pd.Categorical.from_codes(np.zeros(n, dtype=np.int8), categories=[block.gender.value]),
            "pair_id": pd.Categorical.from_codes(codes.astype(np.int32), categories=labels),
            "knob": pd.Categorical.from_codes(np.zeros(n, dtype=np.int8), categories=[block.knob.value]),
            "setting": np.full(n, block.setting, dtype=np.float64),
        }
    )


def write_observations(
    blocks: Iterable[ObservationBlock],
    path: str | Path,
    *,
    chunk_rows: int = 500_000,
) -> dict[float, tuple[float, float, int]]:
    """Two-phase observation writer.

    Phase A streams raw rows to `<path>.raw` while accumulating per-stratum
    moments; phase B rewrites the final CSV with cosine_std inserted and
    removes the temporary. Returns {setting: (mean, sd, n)} per stratum.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw_path = path.with_name(path.name + ".raw")
    moments: dict[float, StratumMoments] = {}
    knob: Knob | None = None

    wrote_any = False
    with open(raw_path, "w", encoding="utf-8", newline="") as fh:
        header_done = False
        for block in blocks:
            knob = block.knob
            moments.setdefault(block.setting, StratumMoments()).update(block.cos)
            frame = _block_frame(block)
            frame.to_csv(fh, index=False, header=not header_done)
            header_done = True
            wrote_any = True
    if not wrote_any or knob is None:
        raw_path.unlink(missing_ok=True)
        raise SimilarityError("no observation blocks")

    scales = _stratum_scales(moments, knob)

    with open(path, "w", encoding="utf-8", newline="") as out:
        header_done = False
        for chunk in pd.read_csv(
            raw_path,
            dtype={"race": "category", "gender": "category", "pair_id": "category", "knob": "category"},
            float_precision="round_trip",
            chunksize=chunk_rows,
        ):
            mean_col = np.empty(len(chunk))
            sd_col = np.empty(len(chunk))
            svals = chunk["setting"].to_numpy(dtype=np.float64)
            for setting, (mean, sd) in scales.items():
                mask = svals == setting
                mean_col[mask] = mean
                sd_col[mask] = sd
            chunk.insert(1, "cosine_std", (chunk["cosine_raw"].to_numpy() - mean_col) / sd_col)
            chunk = chunk[list(OBSERVATION_COLUMNS)]
            chunk.to_csv(out, index=False, header=not header_done)
            header_done = True
    os.remove(raw_path)
    return {s: (m, sd, moments[s].n) for s, (m, sd) in scales.items()}

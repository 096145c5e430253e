from __future__ import annotations

import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import uniform_table
from homaudit.config import BackendConfig, SimulatorConfig
from homaudit.core import Gender, Knob, Race, StudyDesign, SweepSpec, default_stimuli, validate_design
from homaudit.embed import HashEmbedder, embed_corpus
from homaudit.genclient import generate_batch
from homaudit.similarity import (
    PairId,
    SimilarityError,
    build_observations,
    collect_observation_columns,
    cosine,
    observation_rows,
    pair_count,
    standardize_columns,
    write_observations,
    zscore_sample,
)
from homaudit.store import load_observations
from oracles import pairwise_cosines_bruteforce


def _corpus(n_sets=2, stories=3, values=(1.0,), seed=1, h=0.5):
    plan = validate_design(
        StudyDesign(stimuli=default_stimuli(n_sets), stories_per_stimulus=stories),
        SweepSpec(Knob.TEMPERATURE, values),
    )
    sim = SimulatorConfig(seed=seed, homogeneity=uniform_table(h))
    records = list(generate_batch(plan, BackendConfig(kind="sim"), sim=sim))
    keys, rows = [], []
    for vec in embed_corpus(records, HashEmbedder(dim=64, seed=0)):
        keys.append(vec.key)
        rows.append(vec.values)
    return plan, records, keys, np.stack(rows)


# ---------------------------------------------------------------------------
# pair_count / cosine
# ---------------------------------------------------------------------------


def test_pair_count_matches_published_per_setting_total():
    assert pair_count(750, 4) == 1_123_500


def test_pair_count_edges():
    assert pair_count(2, 1) == 1
    assert pair_count(0, 1) == 0
    assert pair_count(749, 1) == 280_126


def test_cosine_identity_orthogonal_analytic():
    assert cosine(np.array([2.0, 0.0]), np.array([2.0, 0.0])) == 1.0
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 3.0])) == 0.0
    assert abs(cosine(np.array([1.0, 0.0]), np.array([1.0, 1.0])) - 0.70710678) < 1e-8


def test_cosine_contract_violations():
    with pytest.raises(SimilarityError, match="dimension mismatch"):
        cosine(np.ones(3), np.ones(4))
    with pytest.raises(SimilarityError, match="zero-norm"):
        cosine(np.zeros(3), np.ones(3))


def test_cosine_clamped_against_rounding():
    v = np.full(64, 0.1)
    assert cosine(v, v) <= 1.0


# ---------------------------------------------------------------------------
# PairId
# ---------------------------------------------------------------------------


def test_pair_id_symmetric_and_same_set_valid():
    assert PairId.of(7, 3) == PairId.of(3, 7) == PairId(3, 7)
    assert PairId.of(5, 5) == PairId(5, 5)
    assert str(PairId.of(7, 3)) == "3-7"
    with pytest.raises(SimilarityError):
        PairId(7, 3)


# ---------------------------------------------------------------------------
# build_observations
# ---------------------------------------------------------------------------


def test_observation_count_and_distinct_pair_ids():
    # 3 sets per gender, 5 stories: per condition n = 15 -> C(15,2) = 105 rows
    plan, records, keys, vectors = _corpus(3, 5)
    obs = collect_observation_columns(build_observations(records, keys, vectors, known_sets=plan.set_ids))
    assert obs.n == pair_count(15, 1) * 4
    pair_set = set(zip(obs.pair_lo.tolist(), obs.pair_hi.tolist()))
    # per gender: C(3,2) + 3 = 6 unordered set pairs, genders disjoint
    assert len(pair_set) == 12


def test_minimal_case_single_pair_same_set():
    plan, records, keys, vectors = _corpus(1, 1)  # 1 story per stimulus: within-condition n=1 -> no pairs
    with pytest.raises(SimilarityError, match="no observation blocks"):
        collect_observation_columns(build_observations(records, keys, vectors))
    plan, records, keys, vectors = _corpus(1, 2)
    obs = collect_observation_columns(build_observations(records, keys, vectors))
    # each of the 4 conditions has one stimulus with 2 stories -> 1 same-set pair
    assert obs.n == 4
    assert np.array_equal(obs.pair_lo, obs.pair_hi)


def test_degenerate_filtered_story_shrinks_condition():
    plan, records, keys, vectors = _corpus(3, 5)
    # drop one Black-Man story before pairing (post-filter contract)
    target = next(r for r in records if r.race is Race.BLACK and r.gender is Gender.MAN)
    kept = [r for r in records if r is not target]
    obs = collect_observation_columns(build_observations(kept, keys, vectors))
    assert obs.n == pair_count(14, 1) + pair_count(15, 1) * 3


def test_streamed_cosines_match_bruteforce_double_loop():
    plan, records, keys, vectors = _corpus(2, 6)  # conditions of n=12
    obs = collect_observation_columns(build_observations(records, keys, vectors, block_rows=5))
    by_condition = {}
    for rec in records:
        by_condition.setdefault((rec.setting, rec.gender, rec.race), []).append(rec)
    expected = []
    row_of = {k: i for i, k in enumerate(keys)}
    for cell in sorted(by_condition, key=lambda c: (c[0], c[1].value, c[2].value)):
        members = sorted(by_condition[cell], key=lambda r: (r.set_id, r.replicate_index))
        expected.extend(pairwise_cosines_bruteforce(vectors[[row_of[m.key] for m in members]]))
    assert obs.n == len(expected)
    assert np.max(np.abs(obs.cosine_raw - np.array(expected))) < 1e-12


def test_block_size_does_not_change_multiset():
    plan, records, keys, vectors = _corpus(2, 5)

    def digest(block_rows):
        obs = collect_observation_columns(build_observations(records, keys, vectors, block_rows=block_rows))
        rows = sorted(
            zip(
                np.round(obs.cosine_raw, 12).tolist(),
                obs.race_black.tolist(),
                obs.gender_woman.tolist(),
                obs.pair_lo.tolist(),
                obs.pair_hi.tolist(),
            )
        )
        return hashlib.sha256(str(rows).encode()).hexdigest()

    assert digest(1) == digest(3) == digest(1000)


def test_typed_row_view_round_trips_columns():
    plan, records, keys, vectors = _corpus(2, 3, values=(0.0, 1.0))
    obs = standardize_columns(collect_observation_columns(build_observations(records, keys, vectors)))
    rows = list(observation_rows(obs))
    assert len(rows) == obs.n
    sample = rows[0]
    assert sample.cosine_raw == obs.cosine_raw[0]
    assert sample.pair_id.lo <= sample.pair_id.hi
    assert {r.knob for r in rows} == {obs.knob}
    # every row's group cell matches a real condition of the design
    assert {(r.race, r.gender) for r in rows} == {(race, gender) for race in Race for gender in Gender}


def test_unknown_stimulus_rejected():
    plan, records, keys, vectors = _corpus(1, 2)
    with pytest.raises(SimilarityError, match="unknown stimulus set"):
        collect_observation_columns(build_observations(records, keys, vectors, known_sets=frozenset({99})))


def test_missing_embedding_rejected():
    plan, records, keys, vectors = _corpus(1, 2)
    with pytest.raises(SimilarityError, match="no embedding"):
        collect_observation_columns(build_observations(records, keys[:-1], vectors[:-1]))


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


def test_zscore_symmetric_triple():
    assert np.allclose(zscore_sample(np.array([1.0, 2.0, 3.0])), [-1.0, 0.0, 1.0])


def test_zscore_zero_variance_errors():
    with pytest.raises(SimilarityError, match="zero variance"):
        zscore_sample(np.array([2.0, 2.0, 2.0]))


def test_zscore_tiny_stratum_errors():
    with pytest.raises(SimilarityError, match="at least 2"):
        zscore_sample(np.array([1.0]))


def test_standardized_strata_have_mean_zero_sd_one():
    plan, records, keys, vectors = _corpus(2, 5, values=(0.0, 1.0, 2.0))
    obs = standardize_columns(collect_observation_columns(build_observations(records, keys, vectors)))
    for setting in obs.settings_sorted():
        z = obs.cosine_std[obs.setting == setting]
        assert abs(float(np.mean(z))) < 1e-12
        assert abs(float(np.std(z, ddof=1)) - 1.0) < 1e-12


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(min_value=0.01, max_value=50.0), shift=st.floats(min_value=-5.0, max_value=5.0))
def test_affine_transform_leaves_standardized_values_stable(scale, shift):
    plan, records, keys, vectors = _corpus(1, 4)
    raw_obs = collect_observation_columns(build_observations(records, keys, vectors))
    base = standardize_columns(raw_obs)
    transformed = collect_observation_columns(build_observations(records, keys, vectors))
    transformed.cosine_raw[:] = scale * transformed.cosine_raw + shift
    warped = standardize_columns(transformed)
    assert np.max(np.abs(base.cosine_std - warped.cosine_std)) < 1e-10


# ---------------------------------------------------------------------------
# File path (two-phase write)
# ---------------------------------------------------------------------------


def test_write_observations_round_trip_matches_in_memory(tmp_path):
    plan, records, keys, vectors = _corpus(2, 4, values=(0.0, 2.0))
    path = tmp_path / "obs.csv"
    strata = write_observations(build_observations(records, keys, vectors), path)
    assert set(strata) == {0.0, 2.0}
    on_disk = load_observations(path)
    in_memory = standardize_columns(collect_observation_columns(build_observations(records, keys, vectors)))
    assert on_disk.n == in_memory.n
    assert np.array_equal(on_disk.cosine_raw, in_memory.cosine_raw)
    # block-merge vs single-pass moment accumulation may differ in the last ulp
    assert np.max(np.abs(on_disk.cosine_std - in_memory.cosine_std)) < 1e-12
    assert np.array_equal(on_disk.pair_lo, in_memory.pair_lo)
    assert not (tmp_path / "obs.csv.raw").exists()


def test_write_observations_zero_variance_stratum_errors(tmp_path):
    plan, records, keys, vectors = _corpus(1, 3, h=1.0)  # identical stories -> all cosines 1
    with pytest.raises(SimilarityError, match="zero variance"):
        write_observations(build_observations(records, keys, vectors), tmp_path / "obs.csv")

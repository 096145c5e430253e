from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homaudit.core import (
    DesignError,
    Gender,
    Knob,
    Race,
    Stimulus,
    StudyDesign,
    SweepSpec,
    default_stimuli,
    sampling_params,
    setting_repr,
    stable_seed,
    validate_design,
)


def test_default_panel_shape():
    stimuli = default_stimuli(15)
    assert len(stimuli) == 60
    assert len({(s.set_id, s.race) for s in stimuli}) == 60
    men = {s.set_id for s in stimuli if s.gender is Gender.MAN}
    women = {s.set_id for s in stimuli if s.gender is Gender.WOMAN}
    assert men == set(range(1, 16))
    assert women == set(range(16, 31))


def test_plan_size_paper_protocol():
    design = StudyDesign(stimuli=default_stimuli(15))
    sweep = SweepSpec(knob=Knob.TEMPERATURE, values=(0.0, 0.5, 1.0, 1.5, 2.0))
    plan = validate_design(design, sweep)
    assert len(plan) == 60 * 50 * 5 == 15_000
    per_setting = sum(1 for item in plan.items if item.setting == 0.0)
    assert per_setting == 3_000


def test_duplicate_stimulus_rejected():
    dup = (
        Stimulus(3, Race.BLACK, Gender.MAN),
        Stimulus(3, Race.BLACK, Gender.MAN),
        Stimulus(3, Race.WHITE, Gender.MAN),
    )
    with pytest.raises(DesignError, match="duplicate stimulus"):
        validate_design(StudyDesign(stimuli=dup), SweepSpec(Knob.TEMPERATURE, (1.0,)))


def test_set_spanning_genders_rejected():
    bad = (
        Stimulus(1, Race.BLACK, Gender.MAN),
        Stimulus(1, Race.WHITE, Gender.WOMAN),
    )
    with pytest.raises(DesignError, match="spans two genders"):
        validate_design(StudyDesign(stimuli=bad), SweepSpec(Knob.TEMPERATURE, (1.0,)))


def test_missing_race_counterpart_rejected():
    bad = (Stimulus(1, Race.BLACK, Gender.MAN),)
    with pytest.raises(DesignError, match="missing its White stimulus"):
        validate_design(StudyDesign(stimuli=bad), SweepSpec(Knob.TEMPERATURE, (1.0,)))


def test_temperature_out_of_range_rejected():
    design = StudyDesign(stimuli=default_stimuli(1))
    with pytest.raises(DesignError, match="knob value out of range"):
        validate_design(design, SweepSpec(Knob.TEMPERATURE, (0.0, 2.5)))


def test_top_p_zero_rejected():
    design = StudyDesign(stimuli=default_stimuli(1))
    with pytest.raises(DesignError, match="knob value out of range"):
        validate_design(design, SweepSpec(Knob.TOP_P, (0.0, 0.5)))


def test_nonincreasing_values_rejected():
    design = StudyDesign(stimuli=default_stimuli(1))
    with pytest.raises(DesignError, match="strictly increasing"):
        validate_design(design, SweepSpec(Knob.TEMPERATURE, (1.0, 1.0)))


def test_empty_stimuli_collects_all_errors():
    with pytest.raises(DesignError) as err:
        validate_design(StudyDesign(stimuli=()), SweepSpec(Knob.TEMPERATURE, ()))
    assert "empty stimuli" in str(err.value)
    assert "no values" in str(err.value)


def _plan_digest(plan) -> str:
    return json.dumps(
        [
            (i.stimulus.set_id, i.stimulus.race.value, i.stimulus.gender.value, i.setting, i.replicate_index)
            for i in plan.items
        ]
    )


def test_plan_is_pure_function_of_inputs():
    design = StudyDesign(stimuli=default_stimuli(2), stories_per_stimulus=3)
    sweep = SweepSpec(knob=Knob.TOP_P, values=(0.2, 1.0))
    assert _plan_digest(validate_design(design, sweep)) == _plan_digest(validate_design(design, sweep))


@settings(max_examples=40, deadline=None)
@given(
    sets=st.integers(min_value=1, max_value=6),
    stories=st.integers(min_value=1, max_value=7),
    n_values=st.integers(min_value=1, max_value=5),
)
def test_plan_size_identity_property(sets, stories, n_values):
    design = StudyDesign(stimuli=default_stimuli(sets), stories_per_stimulus=stories)
    values = tuple(0.1 + 0.3 * i for i in range(n_values))
    plan = validate_design(design, SweepSpec(Knob.TEMPERATURE, values))
    assert len(plan) == len(design.stimuli) * stories * n_values


def test_sampling_params_one_knob_deviates():
    assert sampling_params(Knob.TEMPERATURE, 0.5, 1.0) == (0.5, 1.0)
    assert sampling_params(Knob.TOP_P, 0.2, 1.0) == (1.0, 0.2)


def test_setting_repr_round_trips():
    for v in (0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 0.30000000000000004):
        assert float(setting_repr(v)) == v


def test_stable_seed_is_process_independent():
    assert stable_seed("a", 1, 0.5) == stable_seed("a", 1, 0.5)
    assert stable_seed("a", 1) != stable_seed("a", 2)

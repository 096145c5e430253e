from __future__ import annotations

import numpy as np
import pytest

from homaudit.config import GroupValueRow, GroupValueTable
from homaudit.core import Gender, Race, StudyDesign, default_stimuli


def group_table(
    base: dict[tuple[Race, Gender], float],
    overrides: dict[tuple[Race, Gender, float], float] | None = None,
    label: str = "homogeneity",
) -> GroupValueTable:
    rows = [GroupValueRow(race=r, gender=g, value=v) for (r, g), v in base.items()]
    for (r, g, setting), v in (overrides or {}).items():
        rows.append(GroupValueRow(race=r, gender=g, value=v, setting=setting))
    return GroupValueTable(rows, label=label)


def uniform_table(value: float, label: str = "homogeneity") -> GroupValueTable:
    return GroupValueTable.uniform(value, label)


def small_design(sets_per_gender: int = 3, stories: int = 4) -> StudyDesign:
    return StudyDesign(stimuli=default_stimuli(sets_per_gender), stories_per_stimulus=stories)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)

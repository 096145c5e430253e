"""Study config file loading.

The config is a TOML tree with five sections, all optional except [sweep]
when the defaults are not wanted:

    [design]                      # omit entirely for the standard panel
    sets_per_gender = 15          # default face grid (ignored if stimuli given)
    stories_per_stimulus = 50
    max_tokens = 150
    system_prompt = "..."         # defaults to the standard prompts
    user_prompt = "..."

    [[design.stimuli]]            # explicit panel, overrides sets_per_gender
    set_id = 1
    race = "Black"                # Black | White
    gender = "Man"                # Man | Woman
    ref = "stimuli/set01_Black.png"

    [sweep]
    knob = "temperature"          # temperature | top_p
    values = [0.0, 0.5, 1.0, 1.5, 2.0]
    fixed_other = 1.0             # value pinned for the non-swept knob

    [backend]
    kind = "sim"                  # sim | live
    model_id = "story-sim"
    base_url = "https://..."      # live only: chat-completion endpoint
    api_key_env = "HOMAUDIT_API_KEY"
    max_in_flight = 8
    retry_attempts = 5
    retry_base_delay = 1.0
    retry_max_delay = 30.0
    degenerate_word_cap = 150     # stories longer than this are flagged

    [sim]
    seed = 0
    [[sim.homogeneity]]           # per-group story homogeneity in (0, 1]
    race = "Black"
    gender = "Man"
    value = 0.8
    # setting = 2.0               # optional: override at one knob setting

    [embed]
    provider = "hash"             # hash | gaussian | remote
    dim = 64
    seed = 0
    batch_size = 64
    base_url = "https://..."      # remote only: embedding endpoint
    model = "all-mpnet-base-v2"
    api_key_env = "HOMAUDIT_EMBED_KEY"
    [[embed.spread]]              # gaussian provider: per-group spread sigma
    race = "Black"
    gender = "Man"
    value = 0.4
    # setting = 2.0               # optional per-setting override

    [output]
    dir = "out"
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .core import (
    ConfigError,
    Gender,
    Knob,
    Race,
    Stimulus,
    StudyDesign,
    SweepSpec,
    default_stimuli,
)

DEFAULT_SWEEP_VALUES = (0.0, 0.5, 1.0, 1.5, 2.0)


@dataclass(frozen=True)
class GroupValueRow:
    race: Race
    gender: Gender
    value: float
    setting: float | None = None  # None = applies at every setting


class GroupValueTable:
    """Per-group scalar lookup with optional per-setting overrides.

    Used for the simulator's homogeneity knob and the gaussian embedder's
    spread. A (race, gender, setting) query prefers an exact-setting row and
    falls back to the group's base row; a missing group is an error because
    silently defaulting would hide a mis-specified experiment.
    """

    def __init__(self, rows: list[GroupValueRow], label: str = "value"):
        self.label = label
        self._base: dict[tuple[Race, Gender], float] = {}
        self._override: dict[tuple[Race, Gender, str], float] = {}
        for row in rows:
            if row.setting is None:
                self._base[(row.race, row.gender)] = row.value
            else:
                self._override[(row.race, row.gender, repr(float(row.setting)))] = row.value
        self.rows = tuple(rows)

    @classmethod
    def uniform(cls, value: float, label: str = "value") -> "GroupValueTable":
        rows = [GroupValueRow(race=r, gender=g, value=value) for g in Gender for r in Race]
        return cls(rows, label=label)

    def lookup(self, race: Race, gender: Gender, knob: Knob, setting: float) -> float:
        key = (race, gender, repr(float(setting)))
        if key in self._override:
            return self._override[key]
        base = self._base.get((race, gender))
        if base is None:
            raise ConfigError(
                f"no {self.label} entry for group {race.value}/{gender.value} "
                f"at {knob.value}={setting!r}"
            )
        return base


@dataclass(frozen=True)
class SimulatorConfig:
    seed: int = 0
    homogeneity: GroupValueTable = field(default_factory=lambda: GroupValueTable.uniform(0.5, "homogeneity"))


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "sim"  # "sim" | "live"
    model_id: str = "story-sim"
    base_url: str = ""
    api_key_env: str = "HOMAUDIT_API_KEY"
    max_in_flight: int = 8
    retry_attempts: int = 5
    retry_base_delay: float = 1.0
    retry_max_delay: float = 30.0
    degenerate_word_cap: int = 150


@dataclass(frozen=True)
class EmbedConfig:
    provider: str = "hash"  # hash | gaussian | remote
    dim: int = 64
    seed: int = 0
    batch_size: int = 64
    base_url: str = ""
    model: str = "all-mpnet-base-v2"
    api_key_env: str = "HOMAUDIT_EMBED_KEY"
    spread: GroupValueTable = field(default_factory=lambda: GroupValueTable.uniform(0.5, "spread"))
    mu_scale: float = 1.0


@dataclass(frozen=True)
class StudyConfig:
    design: StudyDesign
    sweep: SweepSpec
    backend: BackendConfig
    sim: SimulatorConfig
    embed: EmbedConfig
    out_dir: str = "out"

    def with_overrides(self, seed: int | None = None, backend_kind: str | None = None) -> "StudyConfig":
        sim, embed, backend = self.sim, self.embed, self.backend
        if seed is not None:
            sim = SimulatorConfig(seed=seed, homogeneity=sim.homogeneity)
            embed = EmbedConfig(**{**embed.__dict__, "seed": seed})
        if backend_kind is not None:
            backend = BackendConfig(**{**backend.__dict__, "kind": backend_kind})
        return StudyConfig(self.design, self.sweep, backend, sim, embed, self.out_dir)


def _enum(cls, raw, what: str):
    try:
        return cls(raw)
    except ValueError:
        allowed = ", ".join(m.value for m in cls)
        raise ConfigError(f"bad {what} {raw!r}; expected one of: {allowed}") from None


def _group_rows(raw_rows, what: str) -> list[GroupValueRow]:
    rows = []
    for raw in raw_rows:
        if "race" not in raw or "gender" not in raw or "value" not in raw:
            raise ConfigError(f"[{what}] rows need race, gender and value fields")
        rows.append(
            GroupValueRow(
                race=_enum(Race, raw["race"], f"{what} race"),
                gender=_enum(Gender, raw["gender"], f"{what} gender"),
                value=float(raw["value"]),
                setting=float(raw["setting"]) if "setting" in raw else None,
            )
        )
    return rows


def _design_from(raw: dict) -> StudyDesign:
    if "stimuli" in raw:
        stimuli = tuple(
            Stimulus(
                set_id=int(s["set_id"]),
                race=_enum(Race, s["race"], "stimulus race"),
                gender=_enum(Gender, s["gender"], "stimulus gender"),
                stimulus_ref=str(s.get("ref", "")),
            )
            for s in raw["stimuli"]
        )
    else:
        stimuli = default_stimuli(int(raw.get("sets_per_gender", 15)))
    kwargs = {}
    for key in ("stories_per_stimulus", "max_tokens"):
        if key in raw:
            kwargs[key] = int(raw[key])
    for key in ("system_prompt", "user_prompt"):
        if key in raw:
            kwargs[key] = str(raw[key])
    return StudyDesign(stimuli=stimuli, **kwargs)


def _sweep_from(raw: dict) -> SweepSpec:
    knob = _enum(Knob, raw.get("knob", "temperature"), "sweep knob")
    values = tuple(float(v) for v in raw.get("values", DEFAULT_SWEEP_VALUES))
    return SweepSpec(knob=knob, values=values, fixed_other=float(raw.get("fixed_other", 1.0)))


def load_config(path: str | Path) -> StudyConfig:
    """Parse a study config file; raises ConfigError on any problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return config_from_tree(tree)


def config_from_tree(tree: dict) -> StudyConfig:
    design = _design_from(tree.get("design", {}))
    sweep = _sweep_from(tree.get("sweep", {}))

    raw_backend = dict(tree.get("backend", {}))
    kind = str(raw_backend.pop("kind", "sim"))
    if kind not in ("sim", "live"):
        raise ConfigError(f"bad backend kind {kind!r}; expected sim or live")
    try:
        backend = BackendConfig(kind=kind, **{k: v for k, v in raw_backend.items()})
    except TypeError as exc:
        raise ConfigError(f"bad [backend] key: {exc}") from exc

    raw_sim = tree.get("sim", {})
    if "homogeneity" in raw_sim:
        homog = GroupValueTable(_group_rows(raw_sim["homogeneity"], "sim.homogeneity"), "homogeneity")
        for row in homog.rows:
            if not (0.0 < row.value <= 1.0):
                raise ConfigError(f"homogeneity must be in (0, 1], got {row.value}")
    else:
        homog = GroupValueTable.uniform(0.5, "homogeneity")
    sim = SimulatorConfig(seed=int(raw_sim.get("seed", 0)), homogeneity=homog)

    raw_embed = dict(tree.get("embed", {}))
    if "spread" in raw_embed:
        spread = GroupValueTable(_group_rows(raw_embed.pop("spread"), "embed.spread"), "spread")
        for row in spread.rows:
            if row.value < 0:
                raise ConfigError(f"spread must be non-negative, got {row.value}")
    else:
        spread = GroupValueTable.uniform(0.5, "spread")
    provider = str(raw_embed.pop("provider", "hash"))
    if provider not in ("hash", "gaussian", "remote"):
        raise ConfigError(f"bad embed provider {provider!r}")
    try:
        embed = EmbedConfig(provider=provider, spread=spread, **{k: v for k, v in raw_embed.items()})
    except TypeError as exc:
        raise ConfigError(f"bad [embed] key: {exc}") from exc

    out_dir = str(tree.get("output", {}).get("dir", "out"))
    return StudyConfig(design=design, sweep=sweep, backend=backend, sim=sim, embed=embed, out_dir=out_dir)

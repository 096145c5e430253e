"""Model suite over an observation table.

Per setting, two companion models on the same standardized observations:
a race model (intercept + race, White reference) and a gender model
(intercept + gender, Man reference), each with the stimulus-set pair as a
random intercept. Pooled across settings, one model per dimension adds the
knob as an uncentered numeric covariate plus its interaction with the group
dummy, reusing the within-setting standardized response unchanged.

Execution order is deterministic (settings ascending, race before gender)
so serialized result bundles are diffable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import HomAuditError, Knob
from .lmm import LmmFit, LmmSpec, fit_reml
from .store import ObservationColumns

DIMENSIONS = ("race", "gender")


class AnalysisError(HomAuditError):
    pass


@dataclass
class ModelSuiteResult:
    knob: Knob
    settings: tuple[float, ...]
    per_setting: dict[tuple[float, str], LmmFit]  # (setting, dimension) -> fit
    pooled: dict[str, LmmFit]  # dimension -> fit


def per_setting_spec(dimension: str) -> LmmSpec:
    if dimension not in DIMENSIONS:
        raise AnalysisError(f"unknown dimension {dimension!r}")
    return LmmSpec(fixed=("intercept", dimension))


def pooled_spec(dimension: str) -> LmmSpec:
    if dimension not in DIMENSIONS:
        raise AnalysisError(f"unknown dimension {dimension!r}")
    return LmmSpec(fixed=("intercept", dimension, "knob", f"{dimension}:knob"))


def run_per_setting(
    obs: ObservationColumns, expected_settings: tuple[float, ...] | None = None
) -> dict[tuple[float, str], LmmFit]:
    """Race and gender fits at every setting present (or demanded)."""
    present = [float(s) for s in obs.settings_sorted()]
    if expected_settings is not None:
        missing = sorted(set(expected_settings) - set(present))
        if missing:
            raise AnalysisError(f"missing setting stratum: {', '.join(repr(s) for s in missing)}")
        settings = sorted(expected_settings)
    else:
        settings = present
    fits: dict[tuple[float, str], LmmFit] = {}
    for setting in settings:
        stratum = obs.subset(obs.setting == setting)
        for dimension in DIMENSIONS:
            fits[(setting, dimension)] = fit_reml(stratum, per_setting_spec(dimension))
    return fits


def run_pooled(obs: ObservationColumns) -> dict[str, LmmFit]:
    """One interaction model per dimension over all settings pooled."""
    settings = obs.settings_sorted()
    if len(settings) < 2:
        raise AnalysisError("pooled interaction model needs at least 2 settings")
    return {dimension: fit_reml(obs, pooled_spec(dimension)) for dimension in DIMENSIONS}


def run_suite(obs: ObservationColumns, expected_settings: tuple[float, ...] | None = None) -> ModelSuiteResult:
    per_setting = run_per_setting(obs, expected_settings)
    pooled = run_pooled(obs)
    settings = tuple(sorted({s for s, _ in per_setting}))
    return ModelSuiteResult(knob=obs.knob, settings=settings, per_setting=per_setting, pooled=pooled)


# ---------------------------------------------------------------------------
# Result bundle serialization
# ---------------------------------------------------------------------------


def _fit_to_dict(fit: LmmFit) -> dict:
    return {
        "terms": list(fit.terms),
        "beta": [float(v) for v in fit.beta],
        "se": [float(v) for v in fit.se],
        "p_values": [float(v) for v in fit.p_values],
        "sigma2_b": fit.sigma2_b,
        "sigma2_e": fit.sigma2_e,
        "theta": fit.theta,
        "reml_loglik": fit.reml_loglik,
        "n_obs": fit.n_obs,
        "n_clusters": fit.n_clusters,
        "converged": fit.converged,
    }


def _fit_from_dict(d: dict) -> LmmFit:
    return LmmFit(
        terms=tuple(d["terms"]),
        beta=np.asarray(d["beta"], dtype=np.float64),
        se=np.asarray(d["se"], dtype=np.float64),
        p_values=np.asarray(d["p_values"], dtype=np.float64),
        sigma2_b=float(d["sigma2_b"]),
        sigma2_e=float(d["sigma2_e"]),
        theta=float(d["theta"]),
        reml_loglik=float(d["reml_loglik"]),
        n_obs=int(d["n_obs"]),
        n_clusters=int(d["n_clusters"]),
        converged=bool(d["converged"]),
    )


def suite_to_json(suite: ModelSuiteResult) -> str:
    payload = {
        "knob": suite.knob.value,
        "settings": list(suite.settings),
        "per_setting": [
            {"setting": setting, "dimension": dimension, "fit": _fit_to_dict(fit)}
            for (setting, dimension), fit in sorted(
                suite.per_setting.items(), key=lambda kv: (kv[0][0], kv[0][1])
            )
        ],
        "pooled": [
            {"dimension": dimension, "fit": _fit_to_dict(fit)} for dimension, fit in sorted(suite.pooled.items())
        ],
    }
    return json.dumps(payload, indent=2, ensure_ascii=False)


def suite_from_json(text: str) -> ModelSuiteResult:
    payload = json.loads(text)
    per_setting = {
        (float(e["setting"]), str(e["dimension"])): _fit_from_dict(e["fit"]) for e in payload["per_setting"]
    }
    pooled = {str(e["dimension"]): _fit_from_dict(e["fit"]) for e in payload["pooled"]}
    return ModelSuiteResult(
        knob=Knob(payload["knob"]),
        settings=tuple(float(s) for s in payload["settings"]),
        per_setting=per_setting,
        pooled=pooled,
    )


def load_suite(path: str | Path) -> ModelSuiteResult:
    path = Path(path)
    if not path.exists():
        raise AnalysisError(f"results not found: {path}")
    return suite_from_json(path.read_text(encoding="utf-8"))

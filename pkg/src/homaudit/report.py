"""Report generation and pipeline orchestration.

Stages: generate -> embed -> observe -> fit -> report. Each stage reads the
previous stage's artifact from the output directory and is a no-op when its
own artifact already exists (generation additionally resumes: already
persisted keys are skipped). The report stage renders one markdown + CSV
table per (knob, dimension) in the presentation style of mixed-model
summary tables (coefficients to 2 significant figures, standard error in
parentheses, significance stars), plus a plot-ready CSV of per-cell means
and a provenance manifest. Every number in a table comes from an LmmFit
field or a figure_data summary statistic; the CSV twin keeps full precision
so tables reparse to the exact fitted values.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .analysis import DIMENSIONS, ModelSuiteResult, load_suite, run_suite, suite_to_json
from .config import StudyConfig, load_config
from .core import ConfigError, HomAuditError, Knob, setting_repr, validate_design
from .embed import embed_corpus, make_provider
from .genclient import StoryStatus, generate_batch
from .lmm import LmmFit
from .similarity import (
    build_observations,
    collect_observation_columns,
    standardize_columns,
    write_observations,
)
from .store import (
    CorpusWriter,
    ObservationColumns,
    existing_keys,
    load_corpus,
    load_observations,
    read_embeddings,
    write_embeddings,
)

STAGES = ("generate", "embed", "observe", "fit", "report")

STAR_P001 = 0.001
STAR_P01 = 0.01
P_FLOOR = 1e-16


class DependencyError(HomAuditError):
    """A stage's input artifact is missing; exit code 3 at the CLI."""


class PipelineError(HomAuditError):
    pass


# ---------------------------------------------------------------------------
# Formatting
# ---------------------------------------------------------------------------


def format_sig2(value: float) -> str:
    """Two significant figures with trailing zeros kept (0.30, not 0.3)."""
    if value == 0 or not math.isfinite(value):
        return "0.0" if value == 0 else str(value)
    rounded = float(f"{value:.2g}")
    exponent = math.floor(math.log10(abs(rounded)))
    decimals = max(0, 1 - exponent)
    return f"{rounded:.{decimals}f}"


def star_marks(p: float) -> str:
    if p < STAR_P001:
        return "***"
    if p < STAR_P01:
        return "**"
    return ""


def format_p(p: float) -> str:
    return "<1e-16" if p < P_FLOOR else repr(float(p))


def coef_cell(beta: float, se: float, p: float, starred: bool = True) -> str:
    stars = star_marks(p) if starred else ""
    return f"{format_sig2(beta)}{stars} ({format_sig2(se)})"


def _knob_label(knob: Knob) -> str:
    return "Temperature" if knob is Knob.TEMPERATURE else "Top p"


def _term_label(term: str, knob: Knob) -> str:
    labels = {
        "intercept": "Intercept",
        "race": "Race",
        "gender": "Gender",
        "knob": _knob_label(knob),
        "race:knob": f"Race x {_knob_label(knob)}",
        "gender:knob": f"Gender x {_knob_label(knob)}",
    }
    return labels[term]


def _setting_label(value: float) -> str:
    return f"{value:g}"


TABLE_FOOTER = (
    "** p < .01, *** p < .001 (two-sided Wald z). "
    "Race is 1 for the Black condition (White reference); Gender is 1 for the Woman "
    "condition (Man reference). \"Log likelihood\" is the REML criterion. "
    "Columns are {knob} values."
)


def render_setting_table_md(knob: Knob, dimension: str, fits: dict[float, LmmFit]) -> str:
    """Markdown table: one column per setting, paper-style row layout."""
    settings = sorted(fits)
    header = ["", *(_setting_label(s) for s in settings)]
    lines = [
        f"# {dimension.capitalize()} models across {_knob_label(knob).lower()} settings",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
        "| **Fixed effects** |" + " |" * len(settings),
    ]
    terms = fits[settings[0]].terms
    for i, term in enumerate(terms):
        cells = []
        for s in settings:
            fit = fits[s]
            cells.append(coef_cell(fit.beta[i], fit.se[i], fit.p_values[i], starred=term != "intercept"))
        lines.append(f"| {_term_label(term, knob)} | " + " | ".join(cells) + " |")
    lines.append("| **Random effects (s2)** |" + " |" * len(settings))
    lines.append("| Pair intercept | " + " | ".join(format_sig2(fits[s].sigma2_b) for s in settings) + " |")
    lines.append("| Residual | " + " | ".join(format_sig2(fits[s].sigma2_e) for s in settings) + " |")
    lines.append("| Observations | " + " | ".join(f"{fits[s].n_obs:,}" for s in settings) + " |")
    lines.append("| Log likelihood | " + " | ".join(f"{round(fits[s].reml_loglik):,}" for s in settings) + " |")
    lines.append("")
    lines.append(TABLE_FOOTER.format(knob=_knob_label(knob).lower()))
    lines.append("")
    return "\n".join(lines)


def render_pooled_table_md(knob: Knob, fits: dict[str, LmmFit]) -> str:
    """Markdown table for the pooled interaction models, one column per dimension."""
    dims = [d for d in DIMENSIONS if d in fits]
    header = ["", *(d.capitalize() for d in dims)]
    lines = [
        f"# Pooled {_knob_label(knob).lower()} interaction models",
        "",
        "| " + " | ".join(header) + " |",
        "|" + "---|" * len(header),
        "| **Fixed effects** |" + " |" * len(dims),
    ]
    all_terms = ["intercept", "race", "gender", "knob", "race:knob", "gender:knob"]
    for term in all_terms:
        cells = []
        used = False
        for d in dims:
            fit = fits[d]
            if term in fit.terms:
                i = fit.term_index(term)
                cells.append(coef_cell(fit.beta[i], fit.se[i], fit.p_values[i], starred=term != "intercept"))
                used = True
            else:
                cells.append("--")
        if used:
            label = _term_label(term, knob) if not term.endswith(":knob") else "Interaction"
            lines.append(f"| {label} | " + " | ".join(cells) + " |")
    lines.append("| **Random effects (s2)** |" + " |" * len(dims))
    lines.append("| Pair intercept | " + " | ".join(format_sig2(fits[d].sigma2_b) for d in dims) + " |")
    lines.append("| Residual | " + " | ".join(format_sig2(fits[d].sigma2_e) for d in dims) + " |")
    lines.append("| Observations | " + " | ".join(f"{fits[d].n_obs:,}" for d in dims) + " |")
    lines.append("| Log likelihood | " + " | ".join(f"{round(fits[d].reml_loglik):,}" for d in dims) + " |")
    lines.append("")
    lines.append(TABLE_FOOTER.format(knob=_knob_label(knob).lower()))
    lines.append("")
    return "\n".join(lines)


FIT_CSV_COLUMNS = (
    "knob",
    "dimension",
    "scope",
    "term",
    "estimate",
    "se",
    "z",
    "p",
    "stars",
    "sigma2_pair",
    "sigma2_resid",
    "theta",
    "reml_loglik",
    "n_obs",
    "n_clusters",
    "converged",
)


def fits_to_csv(suite: ModelSuiteResult) -> str:
    """Full-precision CSV twin of the tables: one row per fixed effect.

    Floats are written via repr so parsing the CSV reproduces the exact
    LmmFit values.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIT_CSV_COLUMNS)

    def rows_for(fit: LmmFit, dimension: str, scope: str):
        for i, term in enumerate(fit.terms):
            z = fit.beta[i] / fit.se[i]
            writer.writerow(
                [
                    suite.knob.value,
                    dimension,
                    scope,
                    term,
                    repr(float(fit.beta[i])),
                    repr(float(fit.se[i])),
                    repr(float(z)),
                    repr(float(fit.p_values[i])),
                    star_marks(fit.p_values[i]),
                    repr(float(fit.sigma2_b)),
                    repr(float(fit.sigma2_e)),
                    repr(float(fit.theta)),
                    repr(float(fit.reml_loglik)),
                    fit.n_obs,
                    fit.n_clusters,
                    fit.converged,
                ]
            )

    for (setting, dimension), fit in sorted(suite.per_setting.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        rows_for(fit, dimension, setting_repr(setting))
    for dimension, fit in sorted(suite.pooled.items()):
        rows_for(fit, dimension, "pooled")
    return buf.getvalue()


def render_tables(suite: ModelSuiteResult) -> dict[str, str]:
    """Filename -> content for every table artifact."""
    knob = suite.knob
    out: dict[str, str] = {}
    for dimension in DIMENSIONS:
        fits = {s: fit for (s, d), fit in suite.per_setting.items() if d == dimension}
        if fits:
            out[f"{dimension}_{knob.value}.md"] = render_setting_table_md(knob, dimension, fits)
    if suite.pooled:
        out[f"pooled_{knob.value}.md"] = render_pooled_table_md(knob, suite.pooled)
    out["fits.csv"] = fits_to_csv(suite)
    return out


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------


def figure_data(obs: ObservationColumns) -> str:
    """CSV of per-(setting, race, gender) means with standard errors.

    SE is the sample SD (denominator N-1) over the cell divided by sqrt(N);
    rows are ordered by setting, race, gender.
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["knob", "setting", "race", "gender", "n", "mean_raw", "se_raw", "mean_std", "se_std"])
    for setting in obs.settings_sorted():
        stratum = obs.setting == setting
        for race_val, race_name in ((1, "Black"), (0, "White")):
            for gender_val, gender_name in ((0, "Man"), (1, "Woman")):
                mask = stratum & (obs.race_black == race_val) & (obs.gender_woman == gender_val)
                n = int(mask.sum())
                if n == 0:
                    raise PipelineError(
                        f"empty cell: {race_name}/{gender_name} at setting {setting_repr(float(setting))}"
                    )
                raw = obs.cosine_raw[mask]
                std = obs.cosine_std[mask]
                se_raw = float(np.std(raw, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                se_std = float(np.std(std, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                writer.writerow(
                    [
                        obs.knob.value,
                        setting_repr(float(setting)),
                        race_name,
                        gender_name,
                        n,
                        repr(float(np.mean(raw))),
                        repr(se_raw),
                        repr(float(np.mean(std))),
                        repr(se_std),
                    ]
                )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def study_observation_columns(cfg: StudyConfig) -> ObservationColumns:
    """Run generate -> embed -> observe fully in memory (no artifacts).

    Simulation studies and recovery tests use this to avoid file round-trips;
    the disk pipeline shares every underlying operation.
    """
    plan = validate_design(cfg.design, cfg.sweep)
    records = [r for r in generate_batch(plan, cfg.backend, sim=cfg.sim) if r.status is StoryStatus.OK]
    provider = make_provider(cfg.embed)
    keys, rows = [], []
    for vec in embed_corpus(records, provider, batch_size=cfg.embed.batch_size):
        keys.append(vec.key)
        rows.append(vec.values)
    matrix = np.stack(rows)
    blocks = build_observations(records, keys, matrix, known_sets=plan.set_ids)
    return standardize_columns(collect_observation_columns(blocks))


@dataclass
class PipelinePaths:
    out_dir: Path

    @property
    def corpus(self) -> Path:
        return self.out_dir / "corpus.jsonl"

    @property
    def embeddings(self) -> Path:
        return self.out_dir / "embeddings.f32"

    @property
    def observations(self) -> Path:
        return self.out_dir / "observations.csv"

    @property
    def results(self) -> Path:
        return self.out_dir / "results.json"

    @property
    def tables_dir(self) -> Path:
        return self.out_dir / "tables"

    @property
    def figure_csv(self) -> Path:
        return self.out_dir / "figure_data.csv"

    @property
    def manifest(self) -> Path:
        return self.out_dir / "manifest.json"


def config_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _update_manifest(paths: PipelinePaths, section: str, payload: dict) -> None:
    manifest = {}
    if paths.manifest.exists():
        try:
            manifest = json.loads(paths.manifest.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            manifest = {}
    payload = dict(payload)
    payload["completed_at"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    manifest[section] = payload
    paths.manifest.parent.mkdir(parents=True, exist_ok=True)
    paths.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_ok_records(paths: PipelinePaths):
    if not paths.corpus.exists():
        raise DependencyError("corpus not found; run stage 'generate'")
    records, warnings = load_corpus(paths.corpus)
    ok = [r for r in records if r.status is StoryStatus.OK]
    return records, ok, warnings


def stage_generate(cfg: StudyConfig, paths: PipelinePaths, log) -> None:
    plan = validate_design(cfg.design, cfg.sweep)
    already = existing_keys(paths.corpus)
    remaining = len(plan) - len(already)
    if remaining <= 0:
        log(f"generate: corpus complete ({len(already)} records); nothing to do")
        return
    counts: dict[str, int] = {}
    with CorpusWriter(paths.corpus) as writer:
        for record in generate_batch(plan, cfg.backend, sim=cfg.sim, existing=already):
            writer.append(record)
            counts[record.status.value] = counts.get(record.status.value, 0) + 1
    log(f"generate: wrote {sum(counts.values())} records {counts}")
    _update_manifest(
        paths,
        "generate",
        {"planned": len(plan), "new_records": sum(counts.values()), "status_counts": counts, "seed": cfg.sim.seed},
    )


def stage_embed(cfg: StudyConfig, paths: PipelinePaths, log) -> None:
    if paths.embeddings.exists():
        log("embed: embeddings exist; skipping")
        return
    records, ok, _ = _load_ok_records(paths)
    provider = make_provider(cfg.embed)
    keys, rows = [], []
    for vec in embed_corpus(ok, provider, batch_size=cfg.embed.batch_size):
        keys.append(vec.key)
        rows.append(vec.values)
    matrix = np.stack(rows) if rows else np.zeros((0, cfg.embed.dim), np.float32)
    write_embeddings(paths.embeddings, keys, matrix)
    log(f"embed: {len(keys)} vectors of dim {matrix.shape[1] if len(rows) else cfg.embed.dim}")
    _update_manifest(
        paths,
        "embed",
        {
            "provider": cfg.embed.provider,
            "dim": int(matrix.shape[1]) if len(rows) else cfg.embed.dim,
            "vectors": len(keys),
            "records_total": len(records),
            "records_ok": len(ok),
            "records_filtered": len(records) - len(ok),
            "seed": cfg.embed.seed,
        },
    )


def stage_observe(cfg: StudyConfig, paths: PipelinePaths, log) -> None:
    if paths.observations.exists():
        log("observe: observation table exists; skipping")
        return
    _, ok, _ = _load_ok_records(paths)
    if not paths.embeddings.exists():
        raise DependencyError("embeddings not found; run stage 'embed'")
    keys, matrix = read_embeddings(paths.embeddings)
    known_sets = frozenset(s.set_id for s in cfg.design.stimuli)
    blocks = build_observations(ok, keys, matrix, known_sets=known_sets)
    strata = write_observations(blocks, paths.observations)
    log(f"observe: {sum(n for _, _, n in strata.values())} rows across {len(strata)} strata")
    _update_manifest(
        paths,
        "observe",
        {
            "rows": sum(n for _, _, n in strata.values()),
            "strata": {setting_repr(s): n for s, (_, _, n) in sorted(strata.items())},
        },
    )


def stage_fit(cfg: StudyConfig, paths: PipelinePaths, log) -> None:
    if paths.results.exists():
        log("fit: results exist; skipping")
        return
    if not paths.observations.exists():
        raise DependencyError("observations not found; run stage 'observe'")
    obs = load_observations(paths.observations)
    suite = run_suite(obs, expected_settings=cfg.sweep.values)
    paths.results.write_text(suite_to_json(suite) + "\n", encoding="utf-8")
    log(f"fit: {len(suite.per_setting)} per-setting fits + {len(suite.pooled)} pooled fits")
    _update_manifest(
        paths,
        "fit",
        {"per_setting_fits": len(suite.per_setting), "pooled_fits": len(suite.pooled), "n_obs": obs.n},
    )


def stage_report(cfg: StudyConfig, paths: PipelinePaths, log, config_path: str | Path | None) -> None:
    if not paths.results.exists():
        raise DependencyError("results not found; run stage 'fit'")
    if not paths.observations.exists():
        raise DependencyError("observations not found; run stage 'observe'")
    suite = load_suite(paths.results)
    tables = render_tables(suite)
    expected = [paths.figure_csv] + [paths.tables_dir / name for name in tables]
    if all(p.exists() for p in expected):
        log("report: artifacts exist; skipping")
        return
    paths.tables_dir.mkdir(parents=True, exist_ok=True)
    for name, content in tables.items():
        (paths.tables_dir / name).write_text(content, encoding="utf-8")
    obs = load_observations(paths.observations)
    paths.figure_csv.write_text(figure_data(obs), encoding="utf-8")
    log(f"report: {len(tables)} table files + figure data")
    _update_manifest(
        paths,
        "report",
        {
            "tables": sorted(tables),
            "config_sha256": config_digest(config_path) if config_path else None,
        },
    )


def run_pipeline(
    config_path: str | Path,
    stages: list[str],
    *,
    seed: int | None = None,
    backend: str | None = None,
    out_dir: str | None = None,
    log=print,
) -> PipelinePaths:
    """Execute the requested stages in canonical order against one config.

    Raises ConfigError for bad config, DependencyError when an input
    artifact is missing, PipelineError/HomAuditError for runtime problems.
    """
    for stage in stages:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    cfg = load_config(config_path).with_overrides(seed=seed, backend_kind=backend)
    paths = PipelinePaths(Path(out_dir if out_dir is not None else cfg.out_dir))
    paths.out_dir.mkdir(parents=True, exist_ok=True)
    _update_manifest(
        paths,
        "run",
        {
            "config_path": str(config_path),
            "config_sha256": config_digest(config_path),
            "backend": cfg.backend.kind,
            "seed": cfg.sim.seed,
            "knob": cfg.sweep.knob.value,
            "stages": [s for s in STAGES if s in stages],
        },
    )
    ordered = [s for s in STAGES if s in stages]
    for stage in ordered:
        if stage == "generate":
            stage_generate(cfg, paths, log)
        elif stage == "embed":
            stage_embed(cfg, paths, log)
        elif stage == "observe":
            stage_observe(cfg, paths, log)
        elif stage == "fit":
            stage_fit(cfg, paths, log)
        elif stage == "report":
            stage_report(cfg, paths, log, config_path)
    return paths

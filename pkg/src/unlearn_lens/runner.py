"""Run-directory orchestration: sequences the pipeline phases over a run
directory and emits metrics.csv, diagnostics.json, and plot-data CSVs.

Layout of a run directory:

    config.json                     exact config echo
    checkpoints/theta0.tlmc         base model
    checkpoints/theta_u.tlmc        unlearned model
    checkpoints/theta_r_<source>.tlmc
    metrics.csv                     phase x corpus x metric rows
    diagnostics.json                layer records + run-level summaries
    plots/*.csv                     figure-analog data (report command)

Every command is idempotent: rerunning it from the same inputs rewrites
byte-identical outputs.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, config_to_dict, load_config
from .diagnostics import (
    FISHER_BIN_EDGES,
    build_probe_set,
    capture_activations,
    compare_states,
    fisher_diagonal,
    frobenius_norm,
    mean_pca_distance,
    min_k_mia,
    perturbation_probe,
    perturbable_layers,
)
from .dump import read_dump
from .fileio import atomic_write_text, canonical_json, thread_count
from .model import ModelError, make_holdout_corpus, make_synthetic_corpora
from .protocols import (
    ExperimentConfig,
    MetricRow,
    classify_run,
    partition_forget,
    phase_metrics,
    relearn,
    train_base,
    unlearn_continual,
)

__all__ = [
    "cmd_train",
    "cmd_unlearn",
    "cmd_relearn",
    "cmd_diagnose",
    "cmd_diagnose_dumps",
    "cmd_classify",
    "cmd_probe",
    "cmd_report",
    "run_config",
    "read_metrics",
]

CSV_HEADER = ("phase", "method", "lr", "N", "corpus", "metric", "value", "seed")


# ---------------------------------------------------------------------------
# metrics.csv
# ---------------------------------------------------------------------------


def _phase_rank(phase: str) -> tuple[int, int]:
    if phase == "original":
        return (0, 0)
    if phase.startswith("unlearn@"):
        return (1, int(phase.split("@", 1)[1]))
    if phase == "unlearn":
        return (2, 0)
    if phase == "relearn":
        return (3, 0)
    return (4, 0)


def _metrics_path(run_dir: Path) -> Path:
    return run_dir / "metrics.csv"


def read_metrics(run_dir: Path | str) -> list[dict[str, str]]:
    path = _metrics_path(Path(run_dir))
    if not path.exists():
        return []
    lines = path.read_text("utf-8").strip().splitlines()
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(dict(zip(CSV_HEADER, parts)))
    return rows


def _write_metrics(
    run_dir: Path, config: ExperimentConfig, new_rows: list[MetricRow], replace_phases: set[str]
) -> None:
    kept = [
        row
        for row in read_metrics(run_dir)
        if row["phase"] not in replace_phases
        and not any(row["phase"].startswith(p + "@") for p in replace_phases)
    ]
    for row in new_rows:
        kept.append(
            {
                "phase": row.phase,
                "method": config.unlearn.loss.method,
                "lr": repr(config.unlearn.peak_lr),
                "N": str(config.unlearn.n_requests),
                "corpus": row.corpus,
                "metric": row.metric,
                "value": repr(row.value),
                "seed": str(config.seed),
            }
        )
    kept.sort(key=lambda r: (_phase_rank(r["phase"]), r["corpus"], r["metric"]))
    lines = [",".join(CSV_HEADER)] + [",".join(r[h] for h in CSV_HEADER) for r in kept]
    atomic_write_text(_metrics_path(run_dir), "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Phase commands
# ---------------------------------------------------------------------------


def _run_dir_config(run_dir: Path) -> ExperimentConfig:
    return load_config(run_dir / "config.json")


def _ckpt(run_dir: Path, name: str) -> Path:
    return run_dir / "checkpoints" / f"{name}.tlmc"


def _load_ckpt(run_dir: Path, name: str):
    path = _ckpt(run_dir, name)
    if not path.exists():
        raise ConfigError(f"missing checkpoint {path}; run the earlier phases first")
    return load_checkpoint(path)


def _corpora(config: ExperimentConfig):
    corpora = make_synthetic_corpora(config.seed, config.corpus)
    holdout = make_holdout_corpus(config.seed, config.corpus)
    return corpora, holdout


def cmd_train(config_path: Path | str, run_dir: Path | str) -> Path:
    """Train the base model; write the config echo, theta0, and the
    original-phase metrics."""
    run_dir = Path(run_dir)
    config = load_config(config_path)
    atomic_write_text(run_dir / "config.json", canonical_json(config_to_dict(config)))
    corpora, holdout = _corpora(config)
    theta0 = train_base(config, corpora)
    save_checkpoint(theta0, _ckpt(run_dir, "theta0"))
    rows = phase_metrics("original", theta0, corpora, holdout, config.probe.mia_k)
    _write_metrics(run_dir, config, rows, {"original"})
    return run_dir


def cmd_unlearn(run_dir: Path | str) -> Path:
    run_dir = Path(run_dir)
    config = _run_dir_config(run_dir)
    corpora, holdout = _corpora(config)
    forget, retain, _ = corpora
    theta0 = _load_ckpt(run_dir, "theta0")
    partition = partition_forget(len(forget), config.unlearn.n_requests, config.seed)
    snapshots, _meta = unlearn_continual(theta0, forget, retain, partition, config)
    rows: list[MetricRow] = []
    for t, snap in enumerate(snapshots[:-1]):
        rows += phase_metrics(f"unlearn@{t + 1:03d}", snap, corpora, holdout, config.probe.mia_k)
    rows += phase_metrics("unlearn", snapshots[-1], corpora, holdout, config.probe.mia_k)
    save_checkpoint(snapshots[-1], _ckpt(run_dir, "theta_u"))
    _write_metrics(run_dir, config, rows, {"unlearn"})
    return run_dir


def cmd_relearn(run_dir: Path | str) -> Path:
    run_dir = Path(run_dir)
    config = _run_dir_config(run_dir)
    corpora, holdout = _corpora(config)
    theta_u = _load_ckpt(run_dir, "theta_u")
    theta_r, log = relearn(theta_u, corpora, config)
    save_checkpoint(theta_r, _ckpt(run_dir, f"theta_r_{config.relearn.source}"))
    rows = phase_metrics("relearn", theta_r, corpora, holdout, config.probe.mia_k)
    _write_metrics(run_dir, config, rows, {"relearn"})
    atomic_write_text(run_dir / "relearn_log.json", canonical_json(log))
    return run_dir


def _diagnostics_records(models: dict[str, object], config: ExperimentConfig) -> dict:
    """Layer records, run-level summaries, and Fisher spectra for the
    unlearn/relearn states against theta0 on all three probe sources."""
    corpora, holdout = _corpora(config)
    forget, retain, unrelated = corpora
    ctx = config.corpus.context_len
    probes = {
        "forget": build_probe_set(forget, ctx, config.probe.size, config.seed),
        "retain": build_probe_set(retain, ctx, config.probe.size, config.seed),
        "unrelated": build_probe_set(unrelated, ctx, config.probe.size, config.seed),
    }
    sources = ("forget", "retain", "unrelated")
    theta0 = models["original"]
    base_acts = {src: capture_activations(theta0, probes[src]) for src in sources}

    def fisher_for(phase: str, src: str):
        return fisher_diagonal(models[phase], probes[src])

    workers = thread_count()
    tasks = [(phase, src) for phase in ("original", "unlearn", "relearn") for src in sources]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fishers = dict(zip(tasks, pool.map(lambda t: fisher_for(*t), tasks)))
    else:
        fishers = {t: fisher_for(*t) for t in tasks}

    records = []
    distances = []
    fisher_rows = []
    for phase in ("unlearn", "relearn"):
        for src in sources:
            acts = capture_activations(models[phase], probes[src])
            fisher = fishers[(phase, src)]
            hidden_means = [
                fisher.group_means[f"hidden{i}"] for i in range(len(base_acts[src]))
            ]
            layers = compare_states(base_acts[src], acts, hidden_means)
            for rec in layers:
                records.append(
                    {
                        "phase": phase,
                        "probe_source": src,
                        "layer": rec.layer,
                        "pca_similarity": rec.pca_similarity,
                        "pca_similarity_abs": rec.pca_similarity_abs,
                        "shift_pc1": rec.shift_pc1,
                        "shift_pc2": rec.shift_pc2,
                        "cka": rec.cka,
                        "eigengap": rec.eigengap,
                        "degenerate_gap": rec.degenerate_gap,
                        "fisher_mean": rec.fisher_mean,
                    }
                )
            distances.append(
                {
                    "phase": phase,
                    "probe_source": src,
                    "value": mean_pca_distance([(r.shift_pc1, r.shift_pc2) for r in layers]),
                }
            )
    for (phase, src), fisher in sorted(fishers.items()):
        for group in sorted(fisher.group_means):
            fisher_rows.append(
                {
                    "phase": phase,
                    "probe_source": src,
                    "group": group,
                    "mean": fisher.group_means[group],
                    "histogram": [int(c) for c in fisher.histograms[group]],
                }
            )
    mia_rows = [
        {
            "phase": phase,
            "value": min_k_mia(models[phase], forget, holdout, config.probe.mia_k).auc,
        }
        for phase in ("original", "unlearn", "relearn")
    ]
    return {
        "config": config_to_dict(config),
        "records": records,
        "run": {
            "mean_pca_distance": distances,
            "mia_auc": mia_rows,
            "k_fraction": config.probe.mia_k,
        },
        "fisher": fisher_rows,
        "verdict": None,
    }


def cmd_diagnose(run_dir: Path | str) -> Path:
    run_dir = Path(run_dir)
    config = _run_dir_config(run_dir)
    models = {
        "original": _load_ckpt(run_dir, "theta0"),
        "unlearn": _load_ckpt(run_dir, "theta_u"),
        "relearn": _load_ckpt(run_dir, f"theta_r_{config.relearn.source}"),
    }
    payload = _diagnostics_records(models, config)
    existing = run_dir / "diagnostics.json"
    if existing.exists():
        old = json.loads(existing.read_text("utf-8"))
        payload["verdict"] = old.get("verdict")
    atomic_write_text(existing, canonical_json(payload))
    return run_dir


def cmd_diagnose_dumps(orig_path: Path | str, upd_path: Path | str, out: Path | str | None) -> dict:
    """Diagnose an external model pair from two ULNS activation dumps."""
    orig = read_dump(orig_path)
    upd = read_dump(upd_path)
    if len(orig.layers) != len(upd.layers):
        raise ModelError(
            f"layer count mismatch: {len(orig.layers)} vs {len(upd.layers)}"
        )
    acts_orig = [mat.astype(np.float64) for _, mat in orig.layers]
    acts_upd = [mat.astype(np.float64) for _, mat in upd.layers]
    layers = compare_states(acts_orig, acts_upd)
    records = [
        {
            "layer": orig.layers[i][0],
            "pca_similarity": rec.pca_similarity,
            "pca_similarity_abs": rec.pca_similarity_abs,
            "shift_pc1": rec.shift_pc1,
            "shift_pc2": rec.shift_pc2,
            "cka": rec.cka,
            "eigengap": rec.eigengap,
            "degenerate_gap": rec.degenerate_gap,
            "fisher_mean": None,
        }
        for i, rec in enumerate(layers)
    ]
    payload = {
        "orig_label": orig.label,
        "upd_label": upd.label,
        "probe_source": orig.source,
        "records": records,
        "mean_pca_distance": mean_pca_distance(
            [(r.shift_pc1, r.shift_pc2) for r in layers]
        ),
    }
    if out is not None:
        atomic_write_text(out, canonical_json(payload))
    return payload


def cmd_classify(run_dir: Path | str) -> str:
    """Compute the regime verdict from metrics.csv, append it to
    diagnostics.json, and return the final summary line."""
    run_dir = Path(run_dir)
    config = _run_dir_config(run_dir)
    raw_rows = read_metrics(run_dir)
    if not raw_rows:
        raise ConfigError("metrics.csv missing; run train/unlearn/relearn first")
    rows = [
        MetricRow(r["phase"], r["corpus"], r["metric"], float(r["value"]))
        for r in raw_rows
    ]
    verdict = classify_run(rows, config.thresholds)
    diag_path = run_dir / "diagnostics.json"
    payload = (
        json.loads(diag_path.read_text("utf-8"))
        if diag_path.exists()
        else {"config": config_to_dict(config), "records": [], "run": {}, "fisher": []}
    )
    payload["verdict"] = {
        "du_forget": verdict.du_forget,
        "du_retain": verdict.du_retain,
        "dr_forget": verdict.dr_forget,
        "dr_retain": verdict.dr_retain,
        "reversibility": verdict.reversibility,
        "catastrophicity": verdict.catastrophicity,
        "label": verdict.label,
        "thresholds": {
            "catastrophic_drop": config.thresholds.catastrophic_drop,
            "irreversible_residual": config.thresholds.irreversible_residual,
            "near_zero_band": config.thresholds.near_zero_band,
        },
    }
    atomic_write_text(diag_path, canonical_json(payload))
    return (
        f"regime={verdict.label} dU_f={verdict.du_forget:.6g} "
        f"dU_r={verdict.du_retain:.6g} dR_f={verdict.dr_forget:.6g}"
    )


def cmd_probe(run_dir: Path | str, checkpoint: str = "theta0") -> Path:
    """Perturbation sweep on a stored checkpoint: increasing total budgets
    spread over all activation-moving layers, written as JSON and CSV."""
    run_dir = Path(run_dir)
    config = _run_dir_config(run_dir)
    model = _load_ckpt(run_dir, checkpoint)
    corpora, _ = _corpora(config)
    probe = build_probe_set(corpora[0], config.corpus.context_len, config.probe.size, config.seed)
    layers = perturbable_layers(model)
    unit = frobenius_norm(model.params[layers[-1]])
    budgets = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0]
    schedule = [{name: b * unit / len(layers) for name in layers} for b in budgets]
    report = perturbation_probe(model, probe, schedule, seed=config.seed)
    report["checkpoint"] = checkpoint
    report["budget_unit"] = unit
    report["config"] = config_to_dict(config)
    atomic_write_text(run_dir / "probe_report.json", canonical_json(report))
    lines = ["scale_total,layer,one_minus_similarity,one_minus_cka,delta_gram_frobenius,mean_pca_distance,delta_fisher_mean"]
    for point in report["points"]:
        for i, (sim, cka, dg) in enumerate(
            zip(
                point["one_minus_similarity"],
                point["one_minus_cka"],
                point["delta_gram_frobenius"],
            )
        ):
            lines.append(
                f"{point['total_frobenius']!r},{i},{sim!r},{cka!r},{dg!r},"
                f"{point['mean_pca_distance']!r},{point['delta_fisher_mean']!r}"
            )
    atomic_write_text(run_dir / "plots" / "probe_curves.csv", "\n".join(lines) + "\n")
    return run_dir


def cmd_report(run_dir: Path | str) -> Path:
    """Emit the figure-analog plot CSVs from diagnostics.json."""
    run_dir = Path(run_dir)
    diag_path = run_dir / "diagnostics.json"
    if not diag_path.exists():
        raise ConfigError("diagnostics.json missing; run diagnose first")
    if not _metrics_path(run_dir).exists():
        raise ConfigError("metrics.csv missing; run the pipeline phases first")
    payload = json.loads(diag_path.read_text("utf-8"))
    records = payload.get("records", [])
    plots = run_dir / "plots"

    def rows(fields: list[str]) -> list[str]:
        out = []
        for rec in records:
            out.append(",".join(repr(rec[f]) if isinstance(rec[f], float) else str(rec[f]) for f in fields))
        return out

    sim_fields = ["phase", "probe_source", "layer", "pca_similarity", "pca_similarity_abs"]
    atomic_write_text(
        plots / "similarity_vs_layer.csv",
        "\n".join([",".join(sim_fields)] + rows(sim_fields)) + "\n",
    )
    shift_fields = ["phase", "probe_source", "layer", "shift_pc1", "shift_pc2"]
    atomic_write_text(
        plots / "shift_scatter.csv",
        "\n".join([",".join(shift_fields)] + rows(shift_fields)) + "\n",
    )
    cka_fields = ["phase", "probe_source", "layer", "cka"]
    atomic_write_text(
        plots / "cka_vs_layer.csv",
        "\n".join([",".join(cka_fields)] + rows(cka_fields)) + "\n",
    )
    hist_lines = ["phase,probe_source,group,bin_lo,bin_hi,count"]
    for row in payload.get("fisher", []):
        for b, count in enumerate(row["histogram"]):
            hist_lines.append(
                f"{row['phase']},{row['probe_source']},{row['group']},"
                f"{FISHER_BIN_EDGES[b]!r},{FISHER_BIN_EDGES[b + 1]!r},{count}"
            )
    atomic_write_text(plots / "fisher_histogram.csv", "\n".join(hist_lines) + "\n")
    return run_dir


def run_config(config_path: Path | str, run_dir: Path | str) -> str:
    """The whole pipeline: train, unlearn, relearn, diagnose, classify,
    report. Returns the classifier's summary line."""
    cmd_train(config_path, run_dir)
    cmd_unlearn(run_dir)
    cmd_relearn(run_dir)
    cmd_diagnose(run_dir)
    line = cmd_classify(run_dir)
    cmd_report(run_dir)
    return line

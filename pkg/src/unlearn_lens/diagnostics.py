"""Representation-level diagnostics: layer-wise PCA similarity and shift,
mean PCA distance, linear CKA, the empirical Fisher diagonal, min-k% MIA,
and the weight-perturbation probe.

All comparisons assume a fixed probe set: the same windows are pushed
through every model state so activation matrices are row-aligned.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from .linalg import (
    LinalgError,
    as_matrix,
    center_columns,
    cosine,
    eigengap_is_degenerate,
    frobenius_norm,
    gram,
    sym_top_eigs,
)
from .model import (
    Batch,
    Corpus,
    ModelError,
    TinyLM,
    _forward_tape,
    backward_from_dlogits,
    evaluate,
    forward,
    param_order,
    snapshot,
    windows_and_targets,
)

__all__ = [
    "ProbeSet",
    "PCAState",
    "LayerDiagnostics",
    "FisherSummary",
    "MiaResult",
    "build_probe_set",
    "capture_activations",
    "pca_state_from_activations",
    "pca_states",
    "pca_similarity",
    "pca_shift",
    "mean_pca_distance",
    "linear_cka",
    "compare_states",
    "fisher_diagonal",
    "fisher_groups",
    "min_k_scores",
    "min_k_mia",
    "rank_auc",
    "perturbation_probe",
    "locality_trial",
    "FISHER_BIN_EDGES",
]

# Fixed log-spaced bins so Fisher spectra from different phases overlay.
FISHER_BIN_EDGES = np.logspace(-20.0, 2.0, 65)

DEFAULT_MIA_K = 0.2


@dataclass
class ProbeSet:
    """Fixed token windows (with next-token targets) from one data source."""

    batch: Batch
    source: str
    count: int


def build_probe_set(corpus: Corpus, context_len: int, size: int, seed: int) -> ProbeSet:
    """Deterministically sample up to ``size`` windows from a corpus."""
    batch, _ = windows_and_targets(corpus, context_len)
    n = len(batch)
    if n < 3:
        raise ModelError("probe set needs at least 3 windows")
    if n > size:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x9B0B)))
        idx = np.sort(rng.choice(n, size=size, replace=False))
        batch = batch.take(idx)
        n = size
    return ProbeSet(batch=batch, source=corpus.domain_tag, count=n)


def capture_activations(model: TinyLM, probe: ProbeSet) -> list[np.ndarray]:
    """Per-hidden-layer activation matrices, one row per probe window."""
    return forward(model, probe.batch.windows, capture=True).hidden


# ---------------------------------------------------------------------------
# PCA similarity / shift / mean distance
# ---------------------------------------------------------------------------


@dataclass
class PCAState:
    """Top-2 principal directions of one layer's (column-centered)
    activations plus the raw activation mean used for projection drift."""

    c1: np.ndarray
    c2: np.ndarray
    lam1: float
    lam2: float
    mean: np.ndarray
    projection: tuple[float, float]
    degenerate_gap: bool


def pca_state_from_activations(act) -> PCAState:
    """PCA of column-centered activations; the projection is the mean raw
    activation row projected on (c1, c2), so pure translations register."""
    act = as_matrix(act, name="activations")
    if act.shape[0] < 3:
        raise ModelError("probe set needs at least 3 windows")
    centered = center_columns(act)
    if frobenius_norm(centered) <= 1e-12 * max(1.0, frobenius_norm(act)):
        raise ModelError("collapsed layer")
    n = act.shape[0]
    cov = (centered.T @ centered) / (n - 1)
    k = min(2, cov.shape[0])
    pairs = sym_top_eigs(cov, k)
    c1 = pairs[0].vector
    lam1 = pairs[0].value
    if k == 2:
        c2, lam2 = pairs[1].vector, pairs[1].value
    else:
        c2, lam2 = np.zeros_like(c1), 0.0
    mean = act.mean(axis=0)
    return PCAState(
        c1=c1,
        c2=c2,
        lam1=lam1,
        lam2=lam2,
        mean=mean,
        projection=(float(mean @ c1), float(mean @ c2)),
        degenerate_gap=eigengap_is_degenerate(lam1, lam2),
    )


def pca_states(model: TinyLM, probe: ProbeSet) -> list[PCAState]:
    return [pca_state_from_activations(a) for a in capture_activations(model, probe)]


def pca_similarity(orig: PCAState, upd: PCAState) -> float:
    """Cosine between first principal directions (both canonically signed)."""
    return cosine(orig.c1, upd.c1)


def pca_shift(orig: PCAState, upd: PCAState) -> tuple[float, float]:
    """Displacement of the mean activation, expressed in the ORIGINAL
    state's (c1, c2) basis. Identical states give exactly (0, 0)."""
    d = upd.mean - orig.mean
    return float(d @ orig.c1), float(d @ orig.c2)


def mean_pca_distance(shifts: list[tuple[float, float]]) -> float:
    """Layer-averaged Euclidean norm of the per-layer shifts."""
    if not shifts:
        raise ModelError("mean_pca_distance needs at least one layer")
    return float(np.mean([math.hypot(s1, s2) for s1, s2 in shifts]))


# ---------------------------------------------------------------------------
# Linear CKA
# ---------------------------------------------------------------------------


def linear_cka(x, y) -> float:
    """Tr(Kx Ky) / sqrt(Tr(Kx^2) Tr(Ky^2)) with column-centered Grams.

    Invariant to orthogonal right-rotation and isotropic scaling of either
    argument; 1 for identical subspaces, 0 for orthogonal ones.
    """
    x = as_matrix(x, name="x")
    y = as_matrix(y, name="y")
    if x.shape[0] != y.shape[0]:
        raise ModelError(f"row count mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ModelError("CKA needs at least 2 rows")
    kx = gram(center_columns(x))
    ky = gram(center_columns(y))
    nx = float(np.sqrt((kx * kx).sum()))
    ny = float(np.sqrt((ky * ky).sum()))
    if nx <= 1e-300 or ny <= 1e-300:
        raise ModelError("degenerate activations")
    value = float((kx * ky).sum()) / (nx * ny)
    return float(np.clip(value, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Layer comparison records
# ---------------------------------------------------------------------------


@dataclass
class LayerDiagnostics:
    layer: int
    pca_similarity: float
    pca_similarity_abs: float
    shift_pc1: float
    shift_pc2: float
    cka: float
    eigengap: float
    degenerate_gap: bool
    fisher_mean: float | None = None


def compare_states(
    acts_orig: list[np.ndarray],
    acts_upd: list[np.ndarray],
    fisher_means: list[float] | None = None,
) -> list[LayerDiagnostics]:
    """Per-layer diagnostics between two row-aligned activation stacks."""
    if len(acts_orig) != len(acts_upd):
        raise ModelError("layer count mismatch between states")
    out: list[LayerDiagnostics] = []
    for i, (a, b) in enumerate(zip(acts_orig, acts_upd)):
        so = pca_state_from_activations(a)
        su = pca_state_from_activations(b)
        sim = pca_similarity(so, su)
        s1, s2 = pca_shift(so, su)
        out.append(
            LayerDiagnostics(
                layer=i,
                pca_similarity=sim,
                pca_similarity_abs=abs(sim),
                shift_pc1=s1,
                shift_pc2=s2,
                cka=linear_cka(a, b),
                eigengap=so.lam1 - so.lam2,
                degenerate_gap=so.degenerate_gap or su.degenerate_gap,
                fisher_mean=None if fisher_means is None else fisher_means[i],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Empirical Fisher diagonal
# ---------------------------------------------------------------------------


@dataclass
class FisherSummary:
    """Per-parameter-group mean of the Fisher diagonal plus fixed-bin
    log-spaced histograms; ``diag`` keeps the full diagonal for tests and
    delta reporting."""

    group_means: dict[str, float]
    histograms: dict[str, np.ndarray]
    total_params: int
    global_mean: float
    diag: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def fisher_groups(model: TinyLM) -> dict[str, list[str]]:
    """Parameter-tensor grouping: embedding, each hidden layer, output."""
    groups: dict[str, list[str]] = {"embed": ["embed"]}
    for i in range(len(model.hidden_widths)):
        groups[f"hidden{i}"] = [f"w{i}", f"b{i}"]
    groups["out"] = ["w_out", "b_out"]
    return groups


def fisher_diagonal(model: TinyLM, probe: ProbeSet) -> FisherSummary:
    """Mean over probe examples of the squared gradient of log p(y|x).

    Labels y are the true next tokens (empirical Fisher). Accumulation uses
    Kahan compensation so chunked/parallel evaluation orders agree to well
    below 1e-10 relative.
    """
    batch = probe.batch
    if len(batch) == 0:
        raise ModelError("empty probe set")
    acc = {n: np.zeros_like(p) for n, p in model.params.items()}
    comp = {n: np.zeros_like(p) for n, p in model.params.items()}
    for b in range(len(batch)):
        tape = _forward_tape(model, batch.windows[b : b + 1])
        dlogits = np.exp(tape.log_probs)
        dlogits[0, batch.targets[b]] -= 1.0  # d(-log p(y)) / dlogits
        grads = backward_from_dlogits(model, tape, dlogits)
        for n, g in grads.items():
            contrib = g * g - comp[n]
            total = acc[n] + contrib
            comp[n] = (total - acc[n]) - contrib
            acc[n] = total
    count = float(len(batch))
    diag = {n: a / count for n, a in acc.items()}
    groups = fisher_groups(model)
    means: dict[str, float] = {}
    hists: dict[str, np.ndarray] = {}
    for gname, members in groups.items():
        values = np.concatenate([diag[m].ravel() for m in members])
        means[gname] = float(values.mean())
        clipped = np.clip(values, FISHER_BIN_EDGES[0], FISHER_BIN_EDGES[-1])
        hists[gname] = np.histogram(clipped, bins=FISHER_BIN_EDGES)[0]
    total = sum(model.params[n].size for n in param_order(model))
    global_mean = float(
        sum(diag[n].sum() for n in param_order(model)) / total
    )
    return FisherSummary(
        group_means=means,
        histograms=hists,
        total_params=total,
        global_mean=global_mean,
        diag=diag,
    )


# ---------------------------------------------------------------------------
# Min-k% membership inference
# ---------------------------------------------------------------------------


@dataclass
class MiaResult:
    k_fraction: float
    member_scores: np.ndarray
    nonmember_scores: np.ndarray
    auc: float
    skipped_members: int
    skipped_nonmembers: int


def min_k_scores(model: TinyLM, corpus: Corpus, k: float) -> tuple[np.ndarray, int]:
    """Per-sequence score: mean of the lowest ceil(k*T) token log-probs.
    Sequences with no full window are skipped; the count is returned."""
    if not 0 < k <= 1:
        raise ModelError("k must be in (0, 1]")
    result = evaluate(model, corpus)
    scores = []
    skipped = 0
    for lp in result["per_sequence_logprobs"]:
        t = lp.size
        if t == 0:
            skipped += 1
            continue
        take = math.ceil(k * t)
        lowest = np.sort(lp)[:take]
        scores.append(float(lowest.mean()))
    return np.asarray(scores), skipped


def rank_auc(member_scores: np.ndarray, nonmember_scores: np.ndarray) -> float:
    """Mann-Whitney AUC via tie-averaged ranks: the probability that a
    member outscores a non-member, ties counting one half."""
    m = np.asarray(member_scores, dtype=np.float64)
    n = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or n.size == 0:
        raise ModelError("AUC needs non-empty member and non-member scores")
    combined = np.concatenate([m, n])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty(combined.size, dtype=np.float64)
    sorted_vals = combined[order]
    i = 0
    while i < sorted_vals.size:
        j = i
        while j + 1 < sorted_vals.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    r_members = float(ranks[: m.size].sum())
    u = r_members - m.size * (m.size + 1) / 2.0
    return u / (m.size * n.size)


def min_k_mia(
    model: TinyLM, members: Corpus, nonmembers: Corpus, k: float = DEFAULT_MIA_K
) -> MiaResult:
    """Min-k% probability membership inference summarized by AUC."""
    member_scores, skip_m = min_k_scores(model, members, k)
    nonmember_scores, skip_n = min_k_scores(model, nonmembers, k)
    return MiaResult(
        k_fraction=k,
        member_scores=member_scores,
        nonmember_scores=nonmember_scores,
        auc=rank_auc(member_scores, nonmember_scores),
        skipped_members=skip_m,
        skipped_nonmembers=skip_n,
    )


# ---------------------------------------------------------------------------
# Weight-perturbation probe
# ---------------------------------------------------------------------------


def perturbable_layers(model: TinyLM) -> list[str]:
    """Weight tensors whose perturbation moves hidden activations: the
    embedding table and every hidden-layer weight matrix. The output
    projection is excluded (it sits after the last captured activation)."""
    return ["embed"] + [f"w{i}" for i in range(len(model.hidden_widths))]


def _unit_perturbation(shape: tuple[int, ...], seed: int, name: str) -> np.ndarray:
    digest = zlib.crc32(name.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xE1, digest)))
    e = rng.standard_normal(shape)
    return e / np.linalg.norm(e)


def _perturbed_model(model: TinyLM, scales: dict[str, float], seed: int) -> TinyLM:
    out = snapshot(model)
    for name, scale in scales.items():
        if name not in out.params:
            raise ModelError(f"unknown parameter {name!r}")
        e = _unit_perturbation(out.params[name].shape, seed, name)
        out.params[name] = out.params[name] + scale * e
    return out


def perturbation_probe(
    model: TinyLM,
    probe: ProbeSet,
    schedule: list[dict[str, float]],
    seed: int = 0,
) -> dict:
    """Inject zero-mean weight perturbations and trace every diagnostic.

    Each schedule point maps parameter names to the Frobenius norm of the
    perturbation added there. Perturbation directions are fixed per (seed,
    parameter) across the schedule, so curves over scale are smooth; a zero
    scale reproduces baseline values exactly.
    """
    base_acts = capture_activations(model, probe)
    base_fisher = fisher_diagonal(model, probe)
    base_grams = [gram(center_columns(a)) for a in base_acts]
    points = []
    for scales in schedule:
        for v in scales.values():
            if not math.isfinite(v) or v < 0:
                raise ModelError("perturbation scales must be finite and >= 0")
        perturbed = _perturbed_model(model, scales, seed)
        acts = capture_activations(perturbed, probe)
        layers = compare_states(base_acts, acts)
        fisher = fisher_diagonal(perturbed, probe)
        delta_gram = [
            frobenius_norm(gram(center_columns(a)) - bg)
            for a, bg in zip(acts, base_grams)
        ]
        points.append(
            {
                "scales": dict(scales),
                "total_frobenius": float(sum(scales.values())),
                "one_minus_similarity": [1.0 - l.pca_similarity for l in layers],
                "one_minus_cka": [1.0 - l.cka for l in layers],
                "mean_pca_distance": mean_pca_distance(
                    [(l.shift_pc1, l.shift_pc2) for l in layers]
                ),
                "delta_gram_frobenius": delta_gram,
                "fisher_mean": fisher.global_mean,
                "delta_fisher_mean": fisher.global_mean - base_fisher.global_mean,
            }
        )
    return {
        "seed": seed,
        "baseline_fisher_mean": base_fisher.global_mean,
        "points": points,
    }


def locality_trial(
    model: TinyLM, probe: ProbeSet, budget: float, seed: int
) -> dict[str, float]:
    """Mean PCA distance for one localized vs one distributed perturbation
    at equal total Frobenius budget.

    "single" concentrates the budget on the last hidden weight matrix (the
    most localized choice: upstream activations stay exactly at baseline);
    "spread" splits it evenly over the embedding and all hidden weights.
    """
    layers = perturbable_layers(model)
    single = {layers[-1]: budget}
    spread = {name: budget / len(layers) for name in layers}
    report = perturbation_probe(model, probe, [single, spread], seed=seed)
    return {
        "single": report["points"][0]["mean_pca_distance"],
        "spread": report["points"][1]["mean_pca_distance"],
    }

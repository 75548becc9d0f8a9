"""Experimental pipelines: base training, single and continual unlearning
over a request stream, and the budget-limited relearning phase.

Every phase is deterministic in (seed, config): batch order is a fixed
shuffle derived from (seed, phase code, epoch), optimizer state starts
fresh per phase, and the relearning set is a seeded subsample. Rerunning a
phase from its stored inputs therefore reproduces its outputs bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import build_probe_set, min_k_mia
from .model import (
    Batch,
    Corpus,
    CorpusSpec,
    ModelError,
    OptimizerState,
    TinyLM,
    adamw_step,
    evaluate,
    init_model,
    loss_and_grads,
    make_holdout_corpus,
    make_synthetic_corpora,
    snapshot,
    windows_and_targets,
)
from .objectives import UnlearnLossSpec, compute_unlearn_loss, saliency_mask
from .regimes import RegimeThresholds, RegimeVerdict, classify, compute_deltas

__all__ = [
    "ModelConfig",
    "TrainConfig",
    "UnlearnConfig",
    "RelearnConfig",
    "ProbeConfig",
    "ExperimentConfig",
    "MetricRow",
    "ForgettingRun",
    "partition_forget",
    "train_base",
    "unlearn_single",
    "unlearn_continual",
    "relearn",
    "phase_metrics",
    "run_experiment",
    "classify_run",
    "RELEARN_SOURCES",
]

RELEARN_SOURCES = ("forget", "retain_subset", "unrelated")

# Phase codes keep the per-phase RNG streams disjoint.
_CODE_TRAIN = 0x7121
_CODE_UNLEARN = 0x7122
_CODE_RELEARN = 0x7123
_CODE_PARTITION = 0x7124
_CODE_RELEARN_PICK = 0x7125


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_widths: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 128
    peak_lr: float = 1.5e-3
    accuracy_floor: float = 0.8


@dataclass(frozen=True)
class UnlearnConfig:
    loss: UnlearnLossSpec = UnlearnLossSpec()
    peak_lr: float = 3e-4
    n_requests: int = 1
    steps_per_request: int = 40
    batch_size: int = 32


@dataclass(frozen=True)
class RelearnConfig:
    source: str = "forget"
    budget: int = 24
    steps: int = 50
    peak_lr: float = 3e-4
    batch_size: int = 64


@dataclass(frozen=True)
class ProbeConfig:
    size: int = 256
    mia_k: float = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    corpus: CorpusSpec = CorpusSpec()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    unlearn: UnlearnConfig = UnlearnConfig()
    relearn: RelearnConfig = RelearnConfig()
    probe: ProbeConfig = ProbeConfig()
    thresholds: RegimeThresholds = RegimeThresholds()

    def validate(self) -> None:
        self.corpus.validate()
        self.unlearn.loss.validate()
        self.thresholds.validate()
        if self.unlearn.n_requests < 1:
            raise ModelError("n_requests must be >= 1")
        if self.unlearn.n_requests > self.corpus.n_forget:
            raise ModelError("n_requests cannot exceed the forget-set size")
        if min(self.train.peak_lr, self.unlearn.peak_lr, self.relearn.peak_lr) <= 0:
            raise ModelError("learning rates must be > 0")
        if self.relearn.source not in RELEARN_SOURCES:
            raise ModelError(f"unknown relearn source {self.relearn.source!r}")
        if self.relearn.budget > self.corpus.n_forget:
            raise ModelError("relearn budget exceeds the size-match rule (|forget set|)")
        if not 0 < self.probe.mia_k <= 1:
            raise ModelError("mia_k must be in (0, 1]")


@dataclass(frozen=True)
class MetricRow:
    phase: str
    corpus: str
    metric: str
    value: float


@dataclass
class ForgettingRun:
    """Everything one train -> unlearn -> relearn pipeline produced."""

    config: ExperimentConfig
    theta0: TinyLM
    theta_u: TinyLM
    theta_r: TinyLM
    request_snapshots: list[TinyLM]
    partition: list[list[int]]
    metrics: list[MetricRow]
    relearn_log: dict
    meta: dict = field(default_factory=dict)
    verdict: RegimeVerdict | None = None


class _BatchStream:
    """Epoch-shuffled minibatches, replayable from (seed, code)."""

    def __init__(self, batch: Batch, batch_size: int, seed: int, code: int):
        if len(batch) == 0:
            raise ModelError("empty batch stream")
        self.batch = batch
        self.batch_size = max(1, min(batch_size, len(batch)))
        self.seed = seed
        self.code = code
        self.epoch = 0
        self.cursor = 0
        self.perm = self._shuffle()

    def _shuffle(self) -> np.ndarray:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(self.seed, self.code, self.epoch))
        )
        return rng.permutation(len(self.batch))

    def next(self) -> Batch:
        if self.cursor >= len(self.batch):
            self.epoch += 1
            self.cursor = 0
            self.perm = self._shuffle()
        idx = self.perm[self.cursor : self.cursor + self.batch_size]
        self.cursor += self.batch_size
        return self.batch.take(idx)


def _corpus_batch(corpora: list[Corpus], context_len: int) -> Batch:
    parts = [windows_and_targets(c, context_len)[0] for c in corpora]
    offsets = np.cumsum([0] + [len(c) for c in corpora[:-1]]).tolist() if corpora else []
    windows = np.concatenate([p.windows for p in parts])
    targets = np.concatenate([p.targets for p in parts])
    seq_ids = np.concatenate(
        [p.seq_ids + off for p, off in zip(parts, offsets)]
    )
    return Batch(windows, targets, seq_ids)


def _train_ce(
    model: TinyLM,
    data: Batch,
    steps: int,
    peak_lr: float,
    batch_size: int,
    seed: int,
    code: int,
) -> None:
    if steps == 0:
        return
    opt = OptimizerState.fresh(model, peak_lr)
    stream = _BatchStream(data, batch_size, seed, code)
    for _ in range(steps):
        loss, grads = loss_and_grads(model, stream.next())
        adamw_step(model, grads, opt, steps)


def train_base(config: ExperimentConfig, corpora: tuple[Corpus, Corpus, Corpus]) -> TinyLM:
    """Train the initial model on forget + retain data; errors out if the
    retain-set accuracy floor is not reached within the configured steps."""
    config.validate()
    forget, retain, _ = corpora
    model = init_model(
        vocab_size=config.corpus.vocab_size,
        context_len=config.corpus.context_len,
        embed_dim=config.model.embed_dim,
        hidden_widths=config.model.hidden_widths,
        seed=config.seed,
    )
    data = _corpus_batch([forget, retain], config.corpus.context_len)
    _train_ce(
        model, data, config.train.steps, config.train.peak_lr,
        config.train.batch_size, config.seed, _CODE_TRAIN,
    )
    acc = evaluate(model, retain)["accuracy"]
    if acc < config.train.accuracy_floor:
        raise ModelError(
            f"underfit base model: retain accuracy {acc:.3f} "
            f"< floor {config.train.accuracy_floor}"
        )
    return model


def partition_forget(n_sequences: int, n_requests: int, seed: int) -> list[list[int]]:
    """Disjoint cover of the forget sequences by n_requests near-equal
    shards, in a seeded request order."""
    if not 1 <= n_requests <= n_sequences:
        raise ModelError("n_requests must be in [1, n_sequences]")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, _CODE_PARTITION)))
    perm = rng.permutation(n_sequences)
    base, rem = divmod(n_sequences, n_requests)
    shards, start = [], 0
    for t in range(n_requests):
        size = base + (1 if t < rem else 0)
        shards.append(sorted(int(i) for i in perm[start : start + size]))
        start += size
    return shards


def _subset_corpus(corpus: Corpus, indices: list[int]) -> Corpus:
    return Corpus(
        corpus.vocab_size,
        [corpus.sequences[i] for i in indices],
        corpus.domain_tag,
        [corpus.template_ids[i] for i in indices],
    )


def unlearn_continual(
    theta0: TinyLM,
    forget: Corpus,
    retain: Corpus,
    partition: list[list[int]],
    config: ExperimentConfig,
) -> tuple[list[TinyLM], dict]:
    """Apply the configured unlearning objective over a request stream.

    Request t updates the previous model on shard t; retain batches come
    from the CURRENT retain pool (original retain data plus forget shards
    not yet requested). The reference model for KL/NPO terms is the frozen
    theta0. Returns one snapshot per request plus run metadata.
    """
    config.validate()
    spec = config.unlearn.loss
    ucfg = config.unlearn
    ctx = config.corpus.context_len
    reference = snapshot(theta0)
    model = snapshot(theta0)
    meta: dict = {"method": spec.method, "requests": len(partition)}
    needs_retain = spec.method in ("GA+GD", "GA+KL", "NPO+KL", "GA+GD+MaskedWAGLE")
    snapshots: list[TinyLM] = []
    for t, shard in enumerate(partition):
        forget_batch_all = _corpus_batch([_subset_corpus(forget, shard)], ctx)
        future = [i for s in partition[t + 1 :] for i in s]
        retain_pool = [retain] + ([_subset_corpus(forget, future)] if future else [])
        retain_stream = None
        if needs_retain:
            retain_stream = _BatchStream(
                _corpus_batch(retain_pool, ctx), ucfg.batch_size,
                config.seed, _CODE_UNLEARN + 1000 + t,
            )
        forget_stream = _BatchStream(
            forget_batch_all, ucfg.batch_size, config.seed, _CODE_UNLEARN + t
        )
        mask = None
        if spec.method == "GA+GD+MaskedWAGLE":
            mask = saliency_mask(model, forget_batch_all, spec.mask_fraction)
        if ucfg.steps_per_request > 0:
            opt = OptimizerState.fresh(model, ucfg.peak_lr)
            for step in range(ucfg.steps_per_request):
                fb = forget_stream.next()
                rb = retain_stream.next() if retain_stream is not None else None
                try:
                    loss, grads = compute_unlearn_loss(
                        spec, model, reference, fb, rb, mask=mask, meta=meta
                    )
                    adamw_step(model, grads, opt, ucfg.steps_per_request)
                except ModelError as err:
                    raise ModelError(
                        f"unlearning aborted at request {t} step {step}: {err}"
                    ) from err
        snapshots.append(snapshot(model))
    return snapshots, meta


def unlearn_single(
    theta0: TinyLM, forget: Corpus, retain: Corpus, config: ExperimentConfig
) -> tuple[TinyLM, dict]:
    """One unlearning request covering the whole forget set."""
    shard = list(range(len(forget)))
    snapshots, meta = unlearn_continual(theta0, forget, retain, [shard], config)
    return snapshots[-1], meta


def relearn(
    theta_u: TinyLM,
    corpora: tuple[Corpus, Corpus, Corpus],
    config: ExperimentConfig,
) -> tuple[TinyLM, dict]:
    """Brief cross-entropy fine-tuning of the unlearned model on a seeded,
    size-matched subsample of the configured source."""
    config.validate()
    forget, retain, unrelated = corpora
    source = {"forget": forget, "retain_subset": retain, "unrelated": unrelated}[
        config.relearn.source
    ]
    budget = config.relearn.budget
    if budget > len(forget):
        raise ModelError("relearn budget exceeds the size-match rule (|forget set|)")
    if budget > len(source):
        raise ModelError("relearn budget exceeds the source corpus size")
    model = snapshot(theta_u)
    if budget == 0 or config.relearn.steps == 0:
        picked: list[int] = []
    else:
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=(config.seed, _CODE_RELEARN_PICK))
        )
        picked = sorted(int(i) for i in rng.choice(len(source), size=budget, replace=False))
        data = _corpus_batch([_subset_corpus(source, picked)], config.corpus.context_len)
        _train_ce(
            model, data, config.relearn.steps, config.relearn.peak_lr,
            config.relearn.batch_size, config.seed, _CODE_RELEARN,
        )
    log = {
        "source": config.relearn.source,
        "sequence_count": len(picked),
        "sequence_indices": picked,
        "template_ids": [source.template_ids[i] for i in picked],
        "steps": config.relearn.steps if picked else 0,
    }
    return model, log


def phase_metrics(
    phase: str,
    model: TinyLM,
    corpora: tuple[Corpus, Corpus, Corpus],
    holdout: Corpus,
    mia_k: float,
) -> list[MetricRow]:
    """Accuracy and perplexity on each corpus plus forget-set MIA AUC."""
    forget, retain, unrelated = corpora
    rows: list[MetricRow] = []
    for tag, corpus in (("forget", forget), ("retain", retain), ("unrelated", unrelated)):
        result = evaluate(model, corpus)
        rows.append(MetricRow(phase, tag, "accuracy", result["accuracy"]))
        rows.append(MetricRow(phase, tag, "perplexity", result["perplexity"]))
    mia = min_k_mia(model, forget, holdout, mia_k)
    rows.append(MetricRow(phase, "forget", "mia_auc", mia.auc))
    return rows


def _metric(rows: list[MetricRow], phase: str, corpus: str, metric: str) -> float:
    for row in rows:
        if (row.phase, row.corpus, row.metric) == (phase, corpus, metric):
            return row.value
    raise ModelError(f"missing metric {metric} for phase {phase!r} corpus {corpus!r}")


def classify_run(metrics: list[MetricRow], thresholds: RegimeThresholds) -> RegimeVerdict:
    """Regime verdict from the stored accuracy metrics (percentage points)."""
    def acc(phase: str, corpus: str) -> float:
        return 100.0 * _metric(metrics, phase, corpus, "accuracy")

    du_f, dr_f = compute_deltas(acc("original", "forget"), acc("unlearn", "forget"),
                                acc("relearn", "forget"))
    du_r, dr_r = compute_deltas(acc("original", "retain"), acc("unlearn", "retain"),
                                acc("relearn", "retain"))
    return classify(du_f, du_r, dr_f, dr_r, thresholds)


def run_experiment(config: ExperimentConfig) -> ForgettingRun:
    """The full pipeline in memory: corpora, base training, unlearning over
    the request stream, relearning, per-phase metrics, and the verdict."""
    config.validate()
    corpora = make_synthetic_corpora(config.seed, config.corpus)
    holdout = make_holdout_corpus(config.seed, config.corpus)
    forget, retain, unrelated = corpora

    theta0 = train_base(config, corpora)
    metrics = phase_metrics("original", theta0, corpora, holdout, config.probe.mia_k)

    partition = partition_forget(len(forget), config.unlearn.n_requests, config.seed)
    snapshots, meta = unlearn_continual(theta0, forget, retain, partition, config)
    for t, snap in enumerate(snapshots[:-1]):
        metrics += phase_metrics(
            f"unlearn@{t + 1:03d}", snap, corpora, holdout, config.probe.mia_k
        )
    theta_u = snapshots[-1]
    metrics += phase_metrics("unlearn", theta_u, corpora, holdout, config.probe.mia_k)

    theta_r, relearn_log = relearn(theta_u, corpora, config)
    metrics += phase_metrics("relearn", theta_r, corpora, holdout, config.probe.mia_k)

    run = ForgettingRun(
        config=config,
        theta0=theta0,
        theta_u=theta_u,
        theta_r=theta_r,
        request_snapshots=snapshots,
        partition=partition,
        metrics=metrics,
        relearn_log=relearn_log,
        meta=meta,
    )
    run.verdict = classify_run(metrics, config.thresholds)
    return run

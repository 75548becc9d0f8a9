"""The unlearning loss functions: gradient-ascent family (GA, GA+GD, GA+KL),
negative-preference family (NPO, NPO+KL), random labels (RLabel), and a
gradient-saliency-masked GA+GD variant.

Every objective returns ``(loss, grads)`` with gradients shaped like the
model parameters, so the same AdamW step drives all of them. Composite
losses are built as exact linear combinations of their parts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import (
    Batch,
    ModelError,
    TinyLM,
    backward_from_dlogits,
    _forward_tape,
    loss_and_grads,
)

__all__ = [
    "UnlearnLossSpec",
    "METHODS",
    "ga_loss",
    "ga_gd_loss",
    "ga_kl_loss",
    "npo_loss",
    "npo_kl_loss",
    "rlabel_loss",
    "saliency_mask",
    "apply_mask",
    "compute_unlearn_loss",
]

METHODS = ("GA", "GA+GD", "GA+KL", "NPO", "NPO+KL", "RLabel", "GA+GD+MaskedWAGLE")

# Sequence log-likelihood ratios are clamped to +/- this bound (in units of
# beta * ratio) before exponentiation, so collapsed models cannot overflow.
NPO_CLAMP = 30.0


@dataclass(frozen=True)
class UnlearnLossSpec:
    """Which objective to run and its knobs."""

    method: str = "GA"
    lam: float = 1.0  # retain-term weight
    beta: float = 0.1  # NPO inverse temperature
    mask_fraction: float = 1.0  # masked variant only
    rlabel_seed: int = 0
    npo_granularity: str = "sequence"  # or "token"
    kl_direction: str = "ref_to_model"  # KL(p_ref || p_model)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ModelError(f"unknown unlearning method {self.method!r}")
        if self.lam < 0:
            raise ModelError("lam must be >= 0")
        if self.beta <= 0:
            raise ModelError("beta must be > 0")
        if not 0 < self.mask_fraction <= 1:
            raise ModelError("mask_fraction must be in (0, 1]")
        if self.npo_granularity not in ("sequence", "token"):
            raise ModelError(f"unknown npo granularity {self.npo_granularity!r}")


def _combine(*terms: tuple[float, dict[str, np.ndarray], float]) -> tuple[float, dict]:
    """Exact linear combination sum_i coeff_i * (loss_i, grads_i)."""
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for term_loss, term_grads, coeff in terms:
        loss += coeff * term_loss
        for name, g in term_grads.items():
            grads[name] = grads.get(name, 0.0) + coeff * g
    return loss, grads


def ga_loss(model: TinyLM, forget_batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Gradient ascent on the forget set: the negated cross-entropy."""
    ce, grads = loss_and_grads(model, forget_batch)
    return -ce, {k: -g for k, g in grads.items()}


def ga_gd_loss(
    model: TinyLM, forget_batch: Batch, retain_batch: Batch, lam: float
) -> tuple[float, dict[str, np.ndarray]]:
    """-CE(forget) + lam * CE(retain)."""
    ga = ga_loss(model, forget_batch)
    ce_retain = loss_and_grads(model, retain_batch)
    return _combine((*ga, 1.0), (*ce_retain, lam))


def _retain_kl(
    model: TinyLM, reference: TinyLM, retain_batch: Batch
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean KL(p_ref || p_model) over retain positions, with gradients for
    the (trainable) model only."""
    if len(retain_batch) == 0:
        raise ModelError("empty batch")
    tape = _forward_tape(model, retain_batch.windows)
    ref_lp = _forward_tape(reference, retain_batch.windows).log_probs
    ref_p = np.exp(ref_lp)
    b = len(retain_batch)
    kl = float((ref_p * (ref_lp - tape.log_probs)).sum(axis=1).mean())
    dlogits = (np.exp(tape.log_probs) - ref_p) / b
    return kl, backward_from_dlogits(model, tape, dlogits)


def ga_kl_loss(
    model: TinyLM,
    reference: TinyLM,
    forget_batch: Batch,
    retain_batch: Batch,
    lam: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """-CE(forget) + lam * KL(p_ref || p_model) on the retain batch."""
    ga = ga_loss(model, forget_batch)
    kl = _retain_kl(model, reference, retain_batch)
    return _combine((*ga, 1.0), (*kl, lam))


def _softplus(s: np.ndarray) -> np.ndarray:
    return np.maximum(s, 0.0) + np.log1p(np.exp(-np.abs(s)))


def npo_loss(
    model: TinyLM,
    reference: TinyLM,
    forget_batch: Batch,
    beta: float,
    granularity: str = "sequence",
    meta: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """(2/beta) * mean over forget sequences of log(1 + r^beta), where r is
    the model/reference likelihood ratio.

    Computed in log space on per-sequence log-likelihood ratios (or
    per-token with ``granularity="token"``). Ratios are clamped to
    +/- NPO_CLAMP / beta before exponentiation; clamping events are counted
    into ``meta`` when provided. Bounded below by 0 and decreasing in the
    reference's favor, so a model that already ignores the forget data is
    left alone.
    """
    if beta <= 0:
        raise ModelError("beta must be > 0")
    if len(forget_batch) == 0:
        raise ModelError("empty batch")
    tape = _forward_tape(model, forget_batch.windows)
    ref_lp = _forward_tape(reference, forget_batch.windows).log_probs
    rows = np.arange(len(forget_batch))
    token_ratio = (
        tape.log_probs[rows, forget_batch.targets] - ref_lp[rows, forget_batch.targets]
    )
    if granularity == "sequence" and forget_batch.seq_ids is not None:
        groups = forget_batch.seq_ids
    else:
        groups = rows  # token granularity: every window is its own group
    uniq, inv = np.unique(groups, return_inverse=True)
    ratios = np.zeros(len(uniq))
    np.add.at(ratios, inv, token_ratio)
    clamped = np.clip(ratios, -NPO_CLAMP / beta, NPO_CLAMP / beta)
    if meta is not None:
        meta["npo_clamped"] = meta.get("npo_clamped", 0) + int((clamped != ratios).sum())
    s = beta * clamped
    loss = float((2.0 / beta) * _softplus(s).mean())
    sig = 1.0 / (1.0 + np.exp(-s))
    coeff = (2.0 / len(uniq)) * sig[inv]
    probs = np.exp(tape.log_probs)
    dlogits = -coeff[:, None] * probs
    dlogits[rows, forget_batch.targets] += coeff
    return loss, backward_from_dlogits(model, tape, dlogits)


def npo_kl_loss(
    model: TinyLM,
    reference: TinyLM,
    forget_batch: Batch,
    retain_batch: Batch,
    beta: float,
    lam: float,
    granularity: str = "sequence",
    meta: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """NPO plus lam * retain KL regularization."""
    npo = npo_loss(model, reference, forget_batch, beta, granularity, meta)
    kl = _retain_kl(model, reference, retain_batch)
    return _combine((*npo, 1.0), (*kl, lam))


def rlabel_loss(
    model: TinyLM, forget_batch: Batch, seed: int
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy against labels resampled uniformly from the vocabulary,
    deterministic in ``seed``."""
    if len(forget_batch) == 0:
        raise ModelError("empty batch")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0x51AB)))
    random_targets = rng.integers(0, model.vocab_size, size=len(forget_batch), dtype=np.int64)
    return loss_and_grads(model, Batch(forget_batch.windows, random_targets))


def saliency_mask(
    model: TinyLM, forget_batch: Batch, rho: float
) -> dict[str, np.ndarray]:
    """Boolean mask selecting the top ceil(rho * P) parameters by
    |gradient * weight| on the forget batch."""
    if not 0 < rho <= 1:
        raise ModelError("rho must be in (0, 1]")
    _, grads = loss_and_grads(model, forget_batch)
    names = sorted(model.params)
    scores = np.concatenate([np.abs(grads[n] * model.params[n]).ravel() for n in names])
    total = scores.size
    keep = math.ceil(rho * total)
    flat = np.zeros(total, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    flat[order[:keep]] = True
    mask: dict[str, np.ndarray] = {}
    offset = 0
    for n in names:
        size = model.params[n].size
        mask[n] = flat[offset : offset + size].reshape(model.params[n].shape)
        offset += size
    return mask


def apply_mask(grads: dict[str, np.ndarray], mask: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Zero every gradient entry outside the mask."""
    return {k: np.where(mask[k], g, 0.0) for k, g in grads.items()}


def compute_unlearn_loss(
    spec: UnlearnLossSpec,
    model: TinyLM,
    reference: TinyLM | None,
    forget_batch: Batch,
    retain_batch: Batch | None,
    mask: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Dispatch one loss/gradient evaluation for the configured method."""
    spec.validate()
    method = spec.method
    if method == "GA":
        return ga_loss(model, forget_batch)
    if method == "GA+GD":
        assert retain_batch is not None
        return ga_gd_loss(model, forget_batch, retain_batch, spec.lam)
    if method == "GA+KL":
        assert reference is not None and retain_batch is not None
        return ga_kl_loss(model, reference, forget_batch, retain_batch, spec.lam)
    if method == "NPO":
        assert reference is not None
        return npo_loss(model, reference, forget_batch, spec.beta, spec.npo_granularity, meta)
    if method == "NPO+KL":
        assert reference is not None and retain_batch is not None
        return npo_kl_loss(
            model, reference, forget_batch, retain_batch, spec.beta, spec.lam,
            spec.npo_granularity, meta,
        )
    if method == "RLabel":
        return rlabel_loss(model, forget_batch, spec.rlabel_seed)
    if method == "GA+GD+MaskedWAGLE":
        assert retain_batch is not None
        loss, grads = ga_gd_loss(model, forget_batch, retain_batch, spec.lam)
        if mask is None:
            mask = saliency_mask(model, forget_batch, spec.mask_fraction)
        return loss, apply_mask(grads, mask)
    raise ModelError(f"unknown unlearning method {method!r}")

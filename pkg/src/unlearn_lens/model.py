"""Fixed-context feedforward next-token model trained with manual backprop.

The model embeds a window of ``context_len`` tokens, concatenates the
embeddings, pushes them through GELU hidden layers, and projects to vocab
logits for the next token. Per-layer hidden activations can be captured for
the representation diagnostics; gradients are computed by hand so the whole
stack stays deterministic and dependency-free.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModelError",
    "CorpusSpec",
    "Corpus",
    "TinyLM",
    "ForwardTrace",
    "OptimizerState",
    "Batch",
    "make_synthetic_corpora",
    "make_holdout_corpus",
    "init_model",
    "snapshot",
    "forward",
    "loss_and_grads",
    "backward_from_dlogits",
    "adamw_step",
    "learning_rate_at",
    "evaluate",
    "windows_and_targets",
    "param_order",
    "param_count",
    "global_grad_norm",
]

PERPLEXITY_OVERFLOW_NLL = 700.0

DOMAIN_TAGS = ("forget", "retain", "unrelated")

# Template-id blocks per domain keep identities globally disjoint.
_TEMPLATE_BLOCK = {"forget": 0, "retain": 100_000, "unrelated": 200_000, "holdout": 300_000}


class ModelError(ValueError):
    """Raised on malformed corpora, batches, or non-finite numerics."""


# ---------------------------------------------------------------------------
# Corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusSpec:
    """Shape of the synthetic corpora: token ranges, counts, lengths."""

    vocab_size: int = 64
    context_len: int = 8
    seq_len: int = 24
    n_forget: int = 24
    n_retain: int = 48
    n_unrelated: int = 24
    n_holdout: int = 24
    unrelated_token_lo: int = 48  # [unrelated_token_lo, vocab) reserved for "unrelated"

    def validate(self) -> None:
        if self.vocab_size < 8:
            raise ModelError("vocab_size must be >= 8")
        if self.seq_len < self.context_len + 1:
            raise ModelError("seq_len must be >= context_len + 1")
        if min(self.n_forget, self.n_retain, self.n_unrelated) < 1:
            raise ModelError("sequence counts must be >= 1")
        if not 1 <= self.unrelated_token_lo < self.vocab_size:
            raise ModelError("unrelated_token_lo must split the vocabulary")


@dataclass
class Corpus:
    """A list of token-id sequences from one domain."""

    vocab_size: int
    sequences: list[np.ndarray]
    domain_tag: str
    template_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.domain_tag not in DOMAIN_TAGS:
            raise ModelError(f"unknown domain tag {self.domain_tag!r}")
        for seq in self.sequences:
            if seq.size and (seq.min() < 0 or seq.max() >= self.vocab_size):
                raise ModelError("token id out of vocabulary")

    def __len__(self) -> int:
        return len(self.sequences)


def _template_sequence(seed: int, template_id: int, lo: int, hi: int, length: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, template_id)))
    return rng.integers(lo, hi, size=length, dtype=np.int64)


def _make_corpus(seed: int, spec: CorpusSpec, domain: str, count: int, lo: int, hi: int) -> Corpus:
    block = _TEMPLATE_BLOCK[domain]
    ids = [block + i for i in range(count)]
    seqs = [_template_sequence(seed, t, lo, hi, spec.seq_len) for t in ids]
    tag = "forget" if domain == "holdout" else domain
    return Corpus(spec.vocab_size, seqs, tag, ids)


def make_synthetic_corpora(seed: int, spec: CorpusSpec) -> tuple[Corpus, Corpus, Corpus]:
    """Build (forget, retain, unrelated) corpora, deterministic in ``seed``.

    Forget and retain sequences are drawn i.i.d. from the same token
    sub-range (shared surface statistics) but from disjoint template ids;
    the unrelated corpus lives on the reserved upper token sub-range.
    """
    spec.validate()
    forget = _make_corpus(seed, spec, "forget", spec.n_forget, 0, spec.unrelated_token_lo)
    retain = _make_corpus(seed, spec, "retain", spec.n_retain, 0, spec.unrelated_token_lo)
    unrelated = _make_corpus(
        seed, spec, "unrelated", spec.n_unrelated, spec.unrelated_token_lo, spec.vocab_size
    )
    return forget, retain, unrelated


def make_holdout_corpus(seed: int, spec: CorpusSpec) -> Corpus:
    """Fresh never-trained sequences matching the forget/retain statistics;
    the non-member side of membership inference."""
    spec.validate()
    return _make_corpus(seed, spec, "holdout", spec.n_holdout, 0, spec.unrelated_token_lo)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class TinyLM:
    context_len: int
    vocab_size: int
    embed_dim: int
    hidden_widths: tuple[int, ...]
    params: dict[str, np.ndarray]
    seed: int


@dataclass
class ForwardTrace:
    """Outputs of one forward pass: per-layer hidden activations (when
    captured), logits, and per-position log-probabilities."""

    hidden: list[np.ndarray]
    logits: np.ndarray
    log_probs: np.ndarray


@dataclass
class Batch:
    windows: np.ndarray  # (B, context_len) int64
    targets: np.ndarray  # (B,) int64
    seq_ids: np.ndarray | None = None  # (B,) source-sequence index, for
    # objectives that aggregate token log-probs per sequence

    def __len__(self) -> int:
        return int(self.windows.shape[0])

    def take(self, idx: np.ndarray) -> "Batch":
        return Batch(
            self.windows[idx],
            self.targets[idx],
            None if self.seq_ids is None else self.seq_ids[idx],
        )


def param_order(model: TinyLM) -> list[str]:
    names = ["embed"]
    for i in range(len(model.hidden_widths)):
        names += [f"w{i}", f"b{i}"]
    names += ["w_out", "b_out"]
    return names


def param_count(model: TinyLM) -> int:
    return sum(model.params[n].size for n in param_order(model))


def init_model(
    vocab_size: int = 64,
    context_len: int = 8,
    embed_dim: int = 32,
    hidden_widths: tuple[int, ...] = (64, 64),
    seed: int = 0,
) -> TinyLM:
    """Random init: N(0, 1/fan_in) weights, zero biases, N(0, 0.5^2) embeddings."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0xA11)))
    params: dict[str, np.ndarray] = {}
    params["embed"] = 0.5 * rng.standard_normal((vocab_size, embed_dim))
    fan_in = context_len * embed_dim
    for i, width in enumerate(hidden_widths):
        params[f"w{i}"] = rng.standard_normal((fan_in, width)) / math.sqrt(fan_in)
        params[f"b{i}"] = np.zeros(width)
        fan_in = width
    params["w_out"] = rng.standard_normal((fan_in, vocab_size)) / math.sqrt(fan_in)
    params["b_out"] = np.zeros(vocab_size)
    return TinyLM(context_len, vocab_size, embed_dim, tuple(hidden_widths), params, seed)


def snapshot(model: TinyLM) -> TinyLM:
    """Value copy, safe to keep as a frozen reference while training mutates."""
    return TinyLM(
        model.context_len,
        model.vocab_size,
        model.embed_dim,
        model.hidden_widths,
        {k: v.copy() for k, v in model.params.items()},
        model.seed,
    )


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(z: np.ndarray) -> np.ndarray:
    u = _GELU_C * (z + 0.044715 * z**3)
    return 0.5 * z * (1.0 + np.tanh(u))


def _gelu_grad(z: np.ndarray) -> np.ndarray:
    u = _GELU_C * (z + 0.044715 * z**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
    return 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t**2) * du


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@dataclass
class _Tape:
    """Intermediate values needed to backpropagate through one forward pass."""

    windows: np.ndarray
    x: np.ndarray
    zs: list[np.ndarray]
    hs: list[np.ndarray]
    logits: np.ndarray
    log_probs: np.ndarray


def _check_windows(model: TinyLM, windows: np.ndarray) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.int64)
    if windows.ndim == 1:
        windows = windows.reshape(1, -1)
    if windows.shape[1] != model.context_len:
        raise ModelError(
            f"window length {windows.shape[1]} != context_len {model.context_len}"
        )
    if windows.size and (windows.min() < 0 or windows.max() >= model.vocab_size):
        raise ModelError("token id out of vocabulary")
    return windows


def _forward_tape(model: TinyLM, windows: np.ndarray) -> _Tape:
    windows = _check_windows(model, windows)
    b = windows.shape[0]
    x = model.params["embed"][windows].reshape(b, -1)
    zs, hs = [], []
    h = x
    for i in range(len(model.hidden_widths)):
        z = h @ model.params[f"w{i}"] + model.params[f"b{i}"]
        if not np.isfinite(z).all():
            raise ModelError(f"non-finite activations at hidden layer {i}")
        h = _gelu(z)
        zs.append(z)
        hs.append(h)
    logits = h @ model.params["w_out"] + model.params["b_out"]
    if not np.isfinite(logits).all():
        raise ModelError(f"non-finite logits at output layer {len(model.hidden_widths)}")
    return _Tape(windows, x, zs, hs, logits, _log_softmax(logits))


def forward(model: TinyLM, windows: np.ndarray, capture: bool = False) -> ForwardTrace:
    """Run the model on (B, context_len) token windows.

    With ``capture`` the trace carries one activation matrix per hidden
    layer (row b = hidden vector for window b).
    """
    tape = _forward_tape(model, windows)
    hidden = [h.copy() for h in tape.hs] if capture else []
    return ForwardTrace(hidden=hidden, logits=tape.logits, log_probs=tape.log_probs)


def backward_from_dlogits(model: TinyLM, tape: _Tape, dlogits: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate an arbitrary dLoss/dlogits through the tape.

    Shared by cross-entropy, the unlearning objectives, and the Fisher
    accumulator, which differ only in how they set ``dlogits``.
    """
    grads: dict[str, np.ndarray] = {}
    grads["w_out"] = tape.hs[-1].T @ dlogits
    grads["b_out"] = dlogits.sum(axis=0)
    dh = dlogits @ model.params["w_out"].T
    for i in reversed(range(len(model.hidden_widths))):
        dz = dh * _gelu_grad(tape.zs[i])
        grads[f"w{i}"] = (tape.hs[i - 1].T if i > 0 else tape.x.T) @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ model.params[f"w{i}"].T
    dx = dh.reshape(tape.windows.shape[0], model.context_len, model.embed_dim)
    dembed = np.zeros_like(model.params["embed"])
    np.add.at(dembed, tape.windows.reshape(-1), dx.reshape(-1, model.embed_dim))
    grads["embed"] = dembed
    return grads


def loss_and_grads(model: TinyLM, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy and its gradients."""
    if len(batch) == 0:
        raise ModelError("empty batch")
    tape = _forward_tape(model, batch.windows)
    b = len(batch)
    rows = np.arange(b)
    loss = float(-tape.log_probs[rows, batch.targets].mean())
    if not math.isfinite(loss):
        raise ModelError(f"non-finite loss at output layer {len(model.hidden_widths)}")
    probs = np.exp(tape.log_probs)
    dlogits = probs
    dlogits[rows, batch.targets] -= 1.0
    dlogits /= b
    return loss, backward_from_dlogits(model, tape, dlogits)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """AdamW with linear warmup over the first 10% of steps, cosine decay to
    10% of peak, decoupled weight decay, and global-norm gradient clipping."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    peak_lr: float
    warmup_frac: float = 0.1
    floor_frac: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    @classmethod
    def fresh(cls, model: TinyLM, peak_lr: float, **kwargs) -> "OptimizerState":
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        return cls(
            m={k: v.copy() for k, v in zeros.items()},
            v=zeros,
            step=0,
            peak_lr=peak_lr,
            **kwargs,
        )


def learning_rate_at(
    step: float,
    total_steps: int,
    peak_lr: float,
    warmup_frac: float = 0.1,
    floor_frac: float = 0.1,
) -> float:
    """LR schedule: linear to ``peak_lr`` at ``warmup_frac * total_steps``,
    cosine down to ``floor_frac * peak_lr`` at ``total_steps``."""
    warmup = warmup_frac * total_steps
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    floor = floor_frac * peak_lr
    if total_steps <= warmup:
        return peak_lr
    progress = min(1.0, (step - warmup) / (total_steps - warmup))
    return floor + 0.5 * (peak_lr - floor) * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adamw_step(
    model: TinyLM,
    grads: dict[str, np.ndarray],
    opt: OptimizerState,
    total_steps: int,
) -> None:
    """One in-place AdamW update. Raises (leaving parameters untouched) if
    the update would introduce non-finite values."""
    if opt.step >= total_steps:
        raise ModelError(f"optimizer step {opt.step} >= total_steps {total_steps}")
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        raise ModelError("non-finite gradient norm")
    scale = opt.clip_norm / norm if norm > opt.clip_norm else 1.0
    # Schedule evaluated at the 1-based step count so the final step uses
    # the floor rate exactly.
    lr = learning_rate_at(opt.step + 1, total_steps, opt.peak_lr, opt.warmup_frac, opt.floor_frac)
    t = opt.step + 1
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    new_params: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        g = grads[name] * scale
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        update = p - lr * (m_hat / (np.sqrt(v_hat) + opt.eps) + opt.weight_decay * p)
        if not np.isfinite(update).all():
            raise ModelError(f"non-finite update for parameter {name!r}")
        new_params[name] = update
    model.params.update(new_params)
    opt.step += 1


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def windows_and_targets(corpus: Corpus, context_len: int) -> tuple[Batch, list[int]]:
    """All sliding next-token windows of a corpus plus the window count per
    sequence (sequences shorter than context_len + 1 contribute 0)."""
    windows, targets, seq_ids, counts = [], [], [], []
    for s, seq in enumerate(corpus.sequences):
        n = max(0, len(seq) - context_len)
        counts.append(n)
        for t in range(context_len, len(seq)):
            windows.append(seq[t - context_len : t])
            targets.append(seq[t])
            seq_ids.append(s)
    if not windows:
        return (
            Batch(
                np.zeros((0, context_len), dtype=np.int64),
                np.zeros(0, dtype=np.int64),
                np.zeros(0, dtype=np.int64),
            ),
            counts,
        )
    return (
        Batch(
            np.stack(windows).astype(np.int64),
            np.asarray(targets, dtype=np.int64),
            np.asarray(seq_ids, dtype=np.int64),
        ),
        counts,
    )


def evaluate(model: TinyLM, corpus: Corpus) -> dict:
    """Next-token accuracy, perplexity, and per-sequence token log-probs.

    Perplexity is exp(mean NLL); a mean NLL above 700 is reported as the
    +inf sentinel instead of overflowing.
    """
    if len(corpus) == 0:
        raise ModelError("empty corpus")
    batch, counts = windows_and_targets(corpus, model.context_len)
    if len(batch) == 0:
        raise ModelError("corpus has no full windows")
    tape = _forward_tape(model, batch.windows)
    rows = np.arange(len(batch))
    token_lp = tape.log_probs[rows, batch.targets]
    hits = tape.logits.argmax(axis=1) == batch.targets
    mean_nll = float(-token_lp.mean())
    perplexity = math.inf if mean_nll > PERPLEXITY_OVERFLOW_NLL else math.exp(mean_nll)
    per_seq: list[np.ndarray] = []
    offset = 0
    for n in counts:
        per_seq.append(token_lp[offset : offset + n].copy())
        offset += n
    return {
        "accuracy": float(hits.mean()),
        "perplexity": perplexity,
        "per_sequence_logprobs": per_seq,
    }

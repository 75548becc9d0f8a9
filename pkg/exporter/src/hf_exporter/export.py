"""Run a prompt list through a causal transformer and capture, per prompt,
the hidden state at the final token of every selected layer plus the
per-token log-probabilities.

The activations go to a ULNS dump the diagnostics engine can read
directly; the log-probs go to a CSV sidecar. No diagnostics are computed
here: collection and analysis stay separate on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ulns import SOURCE_TAGS, UlnsError, write_ulns

POOLINGS = ("final", "mean")


class ExportError(RuntimeError):
    """Raised for anything that should abort an export: model or tokenizer
    load failures, empty tokenizations, bad layer selections."""


@dataclass(frozen=True)
class ExportManifest:
    model_id: str
    prompts_path: Path
    out_path: Path
    tag: str = "forget"
    layers: str | tuple[int, ...] = "all"
    logprobs_path: Path | None = None
    pooling: str = "final"
    device: str = "cpu"

    def sidecar(self) -> Path:
        if self.logprobs_path is not None:
            return Path(self.logprobs_path)
        return Path(self.out_path).with_suffix(".logprobs.csv")

    def validate(self) -> None:
        if self.tag not in SOURCE_TAGS:
            raise ExportError(f"unknown probe tag {self.tag!r}")
        if self.pooling not in POOLINGS:
            raise ExportError(f"unknown pooling {self.pooling!r}")
        if self.layers != "all":
            if not self.layers or any(i < 0 for i in self.layers):
                raise ExportError("layer indices must be non-negative")


def load_prompts(path: Path | str) -> list[str]:
    path = Path(path)
    if not path.exists():
        raise ExportError(f"prompt file not found: {path}")
    prompts = [line.strip() for line in path.read_text("utf-8").splitlines() if line.strip()]
    if len(prompts) < 3:
        raise ExportError(f"need at least 3 prompts, found {len(prompts)}")
    return prompts


def _load_model(model_id: str, device: str):
    import torch
    from transformers import AutoModelForCausalLM, AutoTokenizer

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
    except Exception as err:
        raise ExportError(f"failed to load tokenizer for {model_id!r}: {err}") from err
    try:
        model = AutoModelForCausalLM.from_pretrained(model_id)
    except Exception as err:
        raise ExportError(f"failed to load model {model_id!r}: {err}") from err
    model.eval()
    model.to(device)
    return tokenizer, model


def _resolve_layers(selection, available: int) -> list[int]:
    """Hidden-state index 0 is the embedding output, 1..L the blocks."""
    if selection == "all":
        return list(range(available))
    indices = sorted(set(int(i) for i in selection))
    for i in indices:
        if i >= available:
            raise ExportError(
                f"layer {i} does not exist: model exposes hidden states 0..{available - 1}"
            )
    return indices


def run_export(manifest: ExportManifest) -> tuple[Path, Path]:
    """Export activations and log-probs. Returns (dump path, sidecar path).

    Deterministic: the model runs in eval mode under no_grad with plain
    greedy forward passes, so repeated exports of the same prompts are
    byte-identical.
    """
    import torch

    manifest.validate()
    prompts = load_prompts(manifest.prompts_path)
    tokenizer, model = _load_model(manifest.model_id, manifest.device)

    per_layer: dict[int, list[np.ndarray]] = {}
    layer_indices: list[int] | None = None
    csv_lines = ["prompt_id,position,token_id,logprob"]
    with torch.no_grad():
        for prompt_id, prompt in enumerate(prompts):
            encoded = tokenizer(prompt, return_tensors="pt")
            ids = encoded["input_ids"].to(manifest.device)
            if ids.numel() == 0:
                raise ExportError(f"prompt {prompt_id} tokenized to zero tokens")
            try:
                out = model(input_ids=ids, output_hidden_states=True)
            except Exception as err:
                raise ExportError(f"forward pass failed on prompt {prompt_id}: {err}") from err
            hidden = out.hidden_states
            if layer_indices is None:
                layer_indices = _resolve_layers(manifest.layers, len(hidden))
                per_layer = {i: [] for i in layer_indices}
            for i in layer_indices:
                states = hidden[i][0]  # (seq, width)
                vec = states.mean(dim=0) if manifest.pooling == "mean" else states[-1]
                per_layer[i].append(vec.to(torch.float32).cpu().numpy())
            log_probs = torch.log_softmax(out.logits[0].to(torch.float64), dim=-1)
            tokens = ids[0]
            for pos in range(1, tokens.shape[0]):
                lp = float(log_probs[pos - 1, tokens[pos]])
                csv_lines.append(f"{prompt_id},{pos},{int(tokens[pos])},{lp!r}")

    assert layer_indices is not None
    layers = [(i, np.stack(per_layer[i])) for i in layer_indices]
    try:
        write_ulns(manifest.out_path, manifest.model_id, manifest.tag, layers)
    except UlnsError as err:
        raise ExportError(str(err)) from err
    sidecar = manifest.sidecar()
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    return Path(manifest.out_path), sidecar

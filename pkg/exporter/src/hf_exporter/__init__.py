"""hf-exporter: capture per-layer transformer hidden states and token
log-probabilities as ULNS dumps for the diagnostics engine."""

from .export import ExportError, ExportManifest, load_prompts, run_export
from .ulns import SOURCE_TAGS, UlnsError, write_ulns

__version__ = "0.1.0"

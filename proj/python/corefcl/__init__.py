"""Coreference-based contrastive fine-tuning for context-aware translation."""

from ._core import (
    ConfigError,
    Error,
    __version__,
    annotate,
    augment,
    corpus_bleu,
    corrupt,
    default_config,
    evaluate,
    finetune,
    generate_corpus,
    ingest,
    margin_loss,
    resolve,
    run_all,
    synth_gen,
    train,
    translate,
)

__all__ = [
    "ConfigError",
    "Error",
    "__version__",
    "annotate",
    "augment",
    "corpus_bleu",
    "corrupt",
    "default_config",
    "evaluate",
    "finetune",
    "generate_corpus",
    "ingest",
    "margin_loss",
    "resolve",
    "run_all",
    "synth_gen",
    "train",
    "translate",
]

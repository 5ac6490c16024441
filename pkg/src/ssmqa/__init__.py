"""Selective state-space question answering for Devanagari-script languages.

Library layout:

* :mod:`ssmqa.tensor`     - dense tensors with reverse-mode autodiff
* :mod:`ssmqa.ssm`        - selective scans, block variants, full model
* :mod:`ssmqa.tokenizer`  - grapheme-aware vocabulary, encode/decode
* :mod:`ssmqa.dataset`    - SQuAD-style ingestion, span alignment, stats
* :mod:`ssmqa.lora`       - low-rank adapters over frozen base weights
* :mod:`ssmqa.training`   - fine-tuning loop, presets, checkpoints
* :mod:`ssmqa.prompting`  - prompt rendering, sampling, best-of-P selection
* :mod:`ssmqa.metrics`    - EM / F1 / BLEU / ROUGE-L / embedding score
* :mod:`ssmqa.cli`        - batch commands wiring the pipeline together
"""

__version__ = "0.1.0"

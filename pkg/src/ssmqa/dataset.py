"""SQuAD-style ingestion, span alignment, padding/masking and statistics.

Input schema (UTF-8 JSON)::

    {"data": [{"id": str, "lang": "hi"|"mr"|..., "context": str,
               "question": str, "answer": str, "answer_start": int}]}

``answer_start`` is the character index of the answer inside the context
and is validated on load. Span alignment maps it to inclusive token
indices over the context's token sequence; the decoded span must contain
the answer, and the span is shrunk to the smallest one that still does.
The statistics mirror the usual dataset diagnostics: length distributions,
answer-start versus context-length scatter pairs, and a 4x4 Pearson
correlation matrix over {context_len, question_len, answer_len,
answer_start}, per language and pooled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .prompting import PromptTemplate
from .tokenizer import (
    EOS_ID,
    PAD_ID,
    SOS_ID,
    Vocab,
    decode,
    encode,
    encode_with_offsets,
)

__all__ = [
    "DatasetError",
    "AlignmentError",
    "QaRecord",
    "DatasetStats",
    "PAPER_DATASET_SIZES",
    "load_squad_style",
    "save_records",
    "read_manifest",
    "align_span",
    "attach_spans",
    "pad_and_mask",
    "build_chat_example",
    "compute_stats",
]


class DatasetError(ValueError):
    pass


class AlignmentError(DatasetError):
    pass


# Published corpus sizes for the Hindi/Marathi QA resource this pipeline
# targets (sentence counts, train/test).
PAPER_DATASET_SIZES = {
    "hi": {"train": 21000, "test": 7000},
    "mr": {"train": 18500, "test": 7000},
}

STAT_FEATURES = ("context_len", "question_len", "answer_len", "answer_start")


@dataclass
class QaRecord:
    """One context/question/answer sample with char- and token-level spans."""

    id: str
    lang: str
    context: str
    question: str
    answer: str
    answer_start: int
    token_ids: Optional[list] = None
    token_start: Optional[int] = None
    token_end: Optional[int] = None
    attention_mask: Optional[list] = None

    def validate(self) -> None:
        end = self.answer_start + len(self.answer)
        if self.answer_start < 0 or end > len(self.context):
            raise DatasetError(
                f"record {self.id}: answer_start {self.answer_start} out of bounds"
            )
        if self.context[self.answer_start: end] != self.answer:
            raise DatasetError(
                f"record {self.id}: context slice at answer_start does not equal the answer"
            )

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "lang": self.lang,
            "context": self.context,
            "question": self.question,
            "answer": self.answer,
            "answer_start": self.answer_start,
        }
        for k in ("token_ids", "token_start", "token_end"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


_REQUIRED_FIELDS = ("id", "context", "question", "answer", "answer_start")


def load_squad_style(path) -> list:
    """Load and validate records; raises DatasetError naming the offender."""
    with open(path, encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(payload, dict) or "data" not in payload:
        raise DatasetError(f"{path}: missing top-level 'data' array")
    records = []
    for i, raw in enumerate(payload["data"]):
        rid = raw.get("id", f"<record {i}>") if isinstance(raw, dict) else f"<record {i}>"
        if not isinstance(raw, dict):
            raise DatasetError(f"record {rid}: not an object")
        for f_ in _REQUIRED_FIELDS:
            if f_ not in raw:
                raise DatasetError(f"record {rid}: missing field {f_!r}")
        if not isinstance(raw["answer_start"], int):
            raise DatasetError(f"record {rid}: answer_start must be an integer")
        rec = QaRecord(
            id=str(raw["id"]),
            lang=str(raw.get("lang", "other")),
            context=raw["context"],
            question=raw["question"],
            answer=raw["answer"],
            answer_start=raw["answer_start"],
            token_ids=raw.get("token_ids"),
            token_start=raw.get("token_start"),
            token_end=raw.get("token_end"),
        )
        rec.validate()
        records.append(rec)
    records.sort(key=lambda r: r.id)
    return records


def save_records(records: Sequence[QaRecord], path) -> None:
    """Canonical serialization: records sorted by id, stable key order.
    load -> save -> load is a fixpoint."""
    payload = {"data": [r.to_dict() for r in sorted(records, key=lambda r: r.id)]}
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, ensure_ascii=False, indent=1, sort_keys=True)
        f.write("\n")


def read_manifest(path) -> dict:
    """Declared per-split counts from a dataset file's optional manifest:
    {"manifest": {"lang": ..., "train": n, "test": n}}."""
    with open(path, encoding="utf-8") as f:
        payload = json.load(f)
    manifest = payload.get("manifest", {})
    counts = {}
    for split in ("train", "test"):
        if split in manifest:
            counts[split] = int(manifest[split])
    if "lang" in manifest:
        counts["lang"] = manifest["lang"]
    return counts


def align_span(context: str, answer: str, answer_start: int, vocab: Vocab) -> tuple:
    """Inclusive (token_start, token_end) of the answer inside the context.

    The decoded span must contain the answer; among candidate spans the
    smallest token count wins, then the smallest start index.
    """
    end = answer_start + len(answer)
    if answer_start < 0 or end > len(context):
        raise AlignmentError(f"answer_start {answer_start} out of bounds")
    if context[answer_start:end] != answer:
        raise AlignmentError("context slice at answer_start does not equal the answer")
    ids, spans = encode_with_offsets(context, vocab)
    overlapping = [
        t for t, (s, e) in enumerate(spans) if e > answer_start and s < end
    ]
    if not overlapping:
        raise AlignmentError(
            f"no context token overlaps characters [{answer_start}, {end})"
        )
    ts, te = overlapping[0], overlapping[-1]
    if answer not in decode(ids[ts: te + 1], vocab):
        raise AlignmentError(
            f"tokenization split the answer: decoded span {decode(ids[ts:te + 1], vocab)!r} "
            f"does not contain {answer!r}"
        )
    # shrink to the minimal containing span, preferring a smaller start
    while ts < te and answer in decode(ids[ts: te], vocab):
        te -= 1
    while ts < te and answer in decode(ids[ts + 1: te + 1], vocab):
        ts += 1
    return ts, te


def attach_spans(records: Sequence[QaRecord], vocab: Vocab) -> list:
    """Populate token_ids (context tokens) and the aligned token span."""
    out = []
    for rec in records:
        rec.validate()
        ts, te = align_span(rec.context, rec.answer, rec.answer_start, vocab)
        rec.token_ids = encode(rec.context, vocab)
        rec.token_start, rec.token_end = ts, te
        out.append(rec)
    return out


def pad_and_mask(sequences: Sequence[Sequence[int]], max_len: int,
                 pad_id: int = PAD_ID) -> tuple:
    """Uniform-length batch: ids [B, max_len] and a 0/1 mask that is 1
    exactly on real token positions. Overlong sequences keep their tail
    (context is left-truncated everywhere in this pipeline)."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    B = len(sequences)
    ids = np.full((B, max_len), pad_id, dtype=np.int64)
    mask = np.zeros((B, max_len), dtype=np.int64)
    for b, seq in enumerate(sequences):
        seq = list(seq)[-max_len:]
        ids[b, : len(seq)] = seq
        mask[b, : len(seq)] = 1
    return ids, mask


def mask_records(records: Sequence[QaRecord], max_len: int,
                 pad_id: int = PAD_ID) -> tuple:
    """Pad every record's context tokens to ``max_len`` and store the
    attention mask (1 on real tokens) on the records. Returns (ids, mask)."""
    for r in records:
        if r.token_ids is None:
            raise DatasetError(f"record {r.id}: tokenize before masking")
    ids, mask = pad_and_mask([r.token_ids for r in records], max_len, pad_id)
    for r, row in zip(records, mask):
        r.attention_mask = [int(v) for v in row]
    return ids, mask


def _truncate_context_left(context: str, n_words: int) -> str:
    words = context.split(" ")
    return " ".join(words[n_words:])


def build_chat_example(record: QaRecord, template: PromptTemplate, vocab: Vocab,
                       max_len: int = 2048) -> tuple:
    """(token_ids, loss_mask) for one conversational training example.

    Layout: sos, rendered system+user prefix, answer tokens, eos. The loss
    mask is 1 only on the answer tokens and the closing eos. When the
    sequence would exceed ``max_len`` the context is truncated from the
    left, word by word; if even an empty context does not fit, that is an
    error (the question and answer alone overflow).
    """
    from .prompting import render_chat

    ctx_words = 0
    total_words = len(record.context.split(" "))
    while True:
        trimmed = QaRecord(
            id=record.id, lang=record.lang,
            context=_truncate_context_left(record.context, ctx_words),
            question=record.question, answer=record.answer,
            answer_start=0,
        )
        prefix, answer_tail = render_chat(template, trimmed)
        prefix_ids = encode(prefix, vocab)
        answer_ids = encode(record.answer, vocab)
        ids = [SOS_ID] + prefix_ids + answer_ids + [EOS_ID]
        if len(ids) <= max_len:
            break
        if ctx_words >= total_words:
            raise DatasetError(
                f"record {record.id}: question and answer alone exceed max_len {max_len}"
            )
        ctx_words += max(1, (len(ids) - max_len) // 4)
    loss_mask = [0] * (1 + len(prefix_ids)) + [1] * len(answer_ids) + [1]
    return ids, loss_mask


@dataclass
class DatasetStats:
    """Per-language counts, length distributions, scatter pairs and the
    4x4 feature correlation matrix (symmetric, unit diagonal)."""

    count: int
    per_language: dict
    features: dict            # feature name -> list of values (pooled)
    langs: list               # per-record language tags
    ids: list
    correlation: list         # pooled 4x4 matrix, row order STAT_FEATURES
    per_language_correlation: dict

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "per_language": self.per_language,
            "feature_order": list(STAT_FEATURES),
            "correlation": self.correlation,
            "per_language_correlation": self.per_language_correlation,
        }

    def feature_means(self, lang: Optional[str] = None) -> dict:
        sel = [i for i, l in enumerate(self.langs) if lang is None or l == lang]
        return {
            f: float(np.mean([self.features[f][i] for i in sel]))
            for f in STAT_FEATURES
        }


def _safe_corr(matrix: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(matrix)
    corr = np.nan_to_num(corr, nan=0.0)
    np.fill_diagonal(corr, 1.0)
    return corr


def compute_stats(records: Sequence[QaRecord]) -> DatasetStats:
    """Pearson statistics over the four span features; needs >= 2 records."""
    if len(records) < 2:
        raise DatasetError("need at least 2 records to compute correlations")
    feats = {
        "context_len": [len(r.context) for r in records],
        "question_len": [len(r.question) for r in records],
        "answer_len": [len(r.answer) for r in records],
        "answer_start": [r.answer_start for r in records],
    }
    langs = [r.lang for r in records]
    pooled = np.array([feats[f] for f in STAT_FEATURES], dtype=np.float64)
    per_lang_counts: dict = {}
    per_lang_corr: dict = {}
    for lang in sorted(set(langs)):
        idx = [i for i, l in enumerate(langs) if l == lang]
        per_lang_counts[lang] = len(idx)
        if len(idx) >= 2:
            per_lang_corr[lang] = _safe_corr(pooled[:, idx]).tolist()
    return DatasetStats(
        count=len(records),
        per_language=per_lang_counts,
        features=feats,
        langs=langs,
        ids=[r.id for r in records],
        correlation=_safe_corr(pooled).tolist(),
        per_language_correlation=per_lang_corr,
    )

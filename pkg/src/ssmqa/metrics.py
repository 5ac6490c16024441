"""Answer-quality metrics: EM, token F1, BLEU, ROUGE-L and an embedding score.

All metrics normalize text first (NFC, whitespace collapse, terminal danda
and ASCII punctuation stripped) and return values in [0, 1]. EM, F1 and the
embedding score tokenize with the pipeline vocabulary when one is given;
BLEU and ROUGE-L work on whitespace tokens of the normalized text. The
embedding score replaces an external pretrained encoder with contextual
embeddings from this repo's own model (greedy cosine matching), so it is
deliberately named ``embed_score`` rather than claiming to be BERTScore.
"""

from __future__ import annotations

import csv
import json
import string
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .tokenizer import Vocab, encode

__all__ = [
    "normalize",
    "exact_match",
    "token_f1",
    "bleu",
    "rouge_l",
    "rouge_n",
    "embed_score",
    "score_sample",
    "report",
    "MetricReport",
    "METRIC_NAMES",
]

METRIC_NAMES = ("em", "f1", "bleu", "rouge_l", "embed")

_TERMINAL_CHARS = set(string.punctuation) | {"।"}  # ASCII punctuation + danda


def normalize(text: str) -> str:
    """NFC, trim, collapse internal whitespace, strip terminal danda and
    ASCII punctuation. Idempotent."""
    s = unicodedata.normalize("NFC", text)
    s = " ".join(s.split())
    while s and (s[-1] in _TERMINAL_CHARS or s[-1] == " "):
        s = s[:-1]
    return s


def _ws_tokens(text: str) -> list:
    return normalize(text).split()


def _vocab_tokens(text: str, vocab: Optional[Vocab]) -> list:
    if vocab is None:
        return _ws_tokens(text)
    ids = encode(normalize(text), vocab)
    return [i for i in ids if not vocab.is_special(i) and not vocab.is_ws_marker(i)]


def exact_match(pred: str, gold: str) -> int:
    return int(normalize(pred) == normalize(gold))


def token_f1(pred: str, gold: str, vocab: Optional[Vocab] = None) -> float:
    """Multiset token overlap F1; both empty -> 1, exactly one empty -> 0."""
    p = Counter(_vocab_tokens(pred, vocab))
    g = Counter(_vocab_tokens(gold, vocab))
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((p & g).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(p.values())
    recall = overlap / sum(g.values())
    return 2.0 * precision * recall / (precision + recall)


def _ngram_counts(tokens: list, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred: str, gold: str, n_max: int = 4) -> float:
    """Geometric mean of modified n-gram precisions for n = 1..min(n_max,
    len(pred)), times the brevity penalty min(1, exp(1 - len(gold)/len(pred))).

    No smoothing: a zero precision at any order gives 0. Empty pred -> 0.
    """
    p = _ws_tokens(pred)
    g = _ws_tokens(gold)
    if not p:
        return 0.0
    orders = range(1, min(n_max, len(p)) + 1)
    log_sum = 0.0
    for n in orders:
        pc = _ngram_counts(p, n)
        gc = _ngram_counts(g, n)
        clipped = sum(min(c, gc.get(ng, 0)) for ng, c in pc.items())
        total = sum(pc.values())
        if clipped == 0:
            return 0.0
        log_sum += np.log(clipped / total)
    geo = float(np.exp(log_sum / len(list(orders))))
    bp = min(1.0, float(np.exp(1.0 - len(g) / len(p))))
    return bp * geo


def _lcs_length(a: list, b: list) -> int:
    dp = [0] * (len(b) + 1)
    for x in a:
        prev = 0
        for j, y in enumerate(b, start=1):
            cur = dp[j]
            dp[j] = prev + 1 if x == y else max(dp[j], dp[j - 1])
            prev = cur
    return dp[-1]


def rouge_l(pred: str, gold: str) -> float:
    """LCS-based F-measure over whitespace tokens of the normalized texts."""
    p = _ws_tokens(pred)
    g = _ws_tokens(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    lcs = _lcs_length(p, g)
    if lcs == 0:
        return 0.0
    precision = lcs / len(p)
    recall = lcs / len(g)
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(pred: str, gold: str, n: int = 1) -> float:
    """N-gram overlap F-measure (available behind a flag; ROUGE-L is the default)."""
    p = _ngram_counts(_ws_tokens(pred), n)
    g = _ngram_counts(_ws_tokens(gold), n)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((p & g).values())
    if overlap == 0:
        return 0.0
    precision = overlap / sum(p.values())
    recall = overlap / sum(g.values())
    return 2.0 * precision * recall / (precision + recall)


def embed_score(
    pred: str,
    gold: str,
    embedder: Callable[[np.ndarray], np.ndarray],
    vocab: Vocab,
) -> float:
    """Greedy cosine matching of contextual token embeddings.

    ``embedder`` maps an id array [T] to embeddings [T, d] (the model's
    hidden states, or a plain table in tests). Cosines are clipped to
    [0, 1]; recall averages each gold token's best match, precision is
    symmetric, and the score is their harmonic mean. An empty side -> 0.
    """
    p_ids = _vocab_tokens(pred, vocab)
    g_ids = _vocab_tokens(gold, vocab)
    if not p_ids or not g_ids:
        return 0.0
    ep = np.asarray(embedder(np.asarray(p_ids)), dtype=np.float64)
    eg = np.asarray(embedder(np.asarray(g_ids)), dtype=np.float64)
    np_norm = np.linalg.norm(ep, axis=-1, keepdims=True)
    ng_norm = np.linalg.norm(eg, axis=-1, keepdims=True)
    ep = np.divide(ep, np_norm, out=np.zeros_like(ep), where=np_norm > 0)
    eg = np.divide(eg, ng_norm, out=np.zeros_like(eg), where=ng_norm > 0)
    sim = np.clip(ep @ eg.T, 0.0, 1.0)          # [Tp, Tg]
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def score_sample(
    pred: str,
    gold: str,
    vocab: Optional[Vocab] = None,
    embedder: Optional[Callable] = None,
) -> dict:
    """All five metrics for one prediction; embed falls back to token F1
    granularity 0/1 matching when no embedder is available."""
    row = {
        "em": float(exact_match(pred, gold)),
        "f1": token_f1(pred, gold, vocab),
        "bleu": bleu(pred, gold),
        "rouge_l": rouge_l(pred, gold),
    }
    if embedder is not None and vocab is not None:
        row["embed"] = embed_score(pred, gold, embedder, vocab)
    else:
        row["embed"] = row["f1"]
    return row


@dataclass
class MetricReport:
    """Per-sample rows plus per-language corpus means."""

    per_sample: list = field(default_factory=list)
    corpus: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_sample": self.per_sample,
            "corpus": self.corpus,
            "counts": self.counts,
        }

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["id", "lang"] + list(METRIC_NAMES))
            for row in self.per_sample:
                w.writerow([row["id"], row["lang"]] + [row[m] for m in METRIC_NAMES])

    def save_corpus_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["lang", "count"] + list(METRIC_NAMES))
            for lang in sorted(self.corpus):
                w.writerow(
                    [lang, self.counts[lang]]
                    + [self.corpus[lang][m] for m in METRIC_NAMES]
                )


def report(samples: list) -> MetricReport:
    """Aggregate scored rows ({id, lang, em, f1, bleu, rouge_l, embed}) by language."""
    if not samples:
        raise ValueError("cannot build a report from zero samples")
    by_lang: dict = {}
    for row in samples:
        by_lang.setdefault(row.get("lang", "all"), []).append(row)
    corpus = {}
    counts = {}
    for lang, rows in by_lang.items():
        corpus[lang] = {
            m: float(np.mean([r[m] for r in rows])) for m in METRIC_NAMES
        }
        counts[lang] = len(rows)
    return MetricReport(per_sample=list(samples), corpus=corpus, counts=counts)

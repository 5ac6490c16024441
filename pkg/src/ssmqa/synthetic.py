"""Synthetic Devanagari QA corpora for tests and desk-scale experiments.

Three generators:

* fact-style span QA over a small closed world (names with fixed home
  cities, favourite fruits and pets) - learnable at toy scale because the
  question determines the answer through a global fact table;
* random word-soup records with answers planted at random positions - for
  exercising span alignment at volume;
* key/value recall sequences - the memory-capacity probe for the
  scalar-per-head variant.
"""

from __future__ import annotations

import numpy as np

from .dataset import QaRecord

__all__ = [
    "FactWorld",
    "make_fact_records",
    "fact_corpus_text",
    "make_random_span_records",
    "make_stats_records",
    "make_recall_dataset",
]

NAMES = [
    "राम", "सीता", "मोहन", "राधा", "अर्जुन", "कृष्ण",
    "गीता", "विजय", "अनु", "रवि", "मीरा", "सूरज",
]
CITIES = [
    "दिल्ली", "मुंबई", "जयपुर", "पुणे", "पटना",
    "लखनऊ", "भोपाल", "नागपुर", "कानपुर", "सूरत",
]
FRUITS = ["आम", "केला", "सेब", "अंगूर", "अमरूद", "संतरा", "पपीता", "अनार"]
ANIMALS = ["गाय", "कुत्ता", "बिल्ली", "घोड़ा", "तोता", "बकरी", "खरगोश", "हाथी"]
FILLER_WORDS = [
    "गाँव", "बाज़ार", "सुबह", "शाम", "नदी", "पहाड़", "खेत", "किताब",
    "रास्ता", "मौसम", "बारिश", "धूप", "चाय", "खाना", "पानी", "फूल",
]

_SENTENCES = {
    "hi": {
        "city": "{name} {value} में रहता है।",
        "fruit": "{name} को {value} पसंद है।",
        "animal": "{name} के पास एक {value} है।",
    },
    "mr": {
        "city": "{name} {value} मध्ये राहतो।",
        "fruit": "{name} ला {value} आवडतो।",
        "animal": "{name} कडे एक {value} आहे।",
    },
}
_QUESTIONS = {
    "hi": {
        "city": "{name} कहाँ रहता है?",
        "fruit": "{name} को क्या पसंद है?",
        "animal": "{name} के पास क्या है?",
    },
    "mr": {
        "city": "{name} कुठे राहतो?",
        "fruit": "{name} ला काय आवडते?",
        "animal": "{name} कडे काय आहे?",
    },
}
_ATTRS = ("city", "fruit", "animal")


class FactWorld:
    """Fixed name -> attribute tables; the ground truth behind every record."""

    def __init__(self, seed: int = 0, n_names: int = 12):
        rng = np.random.default_rng(seed)
        self.names = list(NAMES[:n_names])
        self.facts = {
            name: {
                "city": CITIES[int(rng.integers(len(CITIES)))],
                "fruit": FRUITS[int(rng.integers(len(FRUITS)))],
                "animal": ANIMALS[int(rng.integers(len(ANIMALS)))],
            }
            for name in self.names
        }

    def answer(self, name: str, attr: str) -> str:
        return self.facts[name][attr]


def _fact_sentence(lang: str, attr: str, name: str, value: str) -> str:
    return _SENTENCES[lang][attr].format(name=name, value=value)


def make_fact_records(
    n: int,
    seed: int = 0,
    lang: str = "hi",
    world: FactWorld = None,
    distractor_prob: float = 0.5,
) -> list:
    """Fact-style records: the context states 1-3 facts about one entity
    (plus an optional distractor sentence about another), the question asks
    one of them back, and the answer is the fact word with its char offset."""
    world = world or FactWorld(seed=0)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        name = world.names[int(rng.integers(len(world.names)))]
        attrs = list(_ATTRS)
        rng.shuffle(attrs)
        n_facts = int(rng.integers(1, len(attrs) + 1))
        asked = attrs[int(rng.integers(n_facts))]
        sentences = [
            (attr, _fact_sentence(lang, attr, name, world.answer(name, attr)))
            for attr in attrs[:n_facts]
        ]
        if rng.random() < distractor_prob:
            other = world.names[int(rng.integers(len(world.names)))]
            if other != name:
                d_attr = _ATTRS[int(rng.integers(len(_ATTRS)))]
                sentences.insert(
                    int(rng.integers(len(sentences) + 1)),
                    (None, _fact_sentence(lang, d_attr, other, world.answer(other, d_attr))),
                )
        answer = world.answer(name, asked)
        context_parts = []
        answer_start = None
        offset = 0
        for attr, sent in sentences:
            if attr == asked and answer_start is None:
                answer_start = offset + sent.index(answer)
            context_parts.append(sent)
            offset += len(sent) + 1
        context = " ".join(context_parts)
        rec = QaRecord(
            id=f"{lang}-fact-{i:05d}",
            lang=lang,
            context=context,
            question=_QUESTIONS[lang][asked].format(name=name),
            answer=answer,
            answer_start=answer_start,
        )
        rec.validate()
        records.append(rec)
    return records


def fact_corpus_text(records, template=None) -> str:
    """Raw text for vocabulary training: record text plus template scaffolding."""
    parts = []
    if template is not None:
        parts.append(template.system)
        parts.append(
            template.body.replace("{system}", " ")
            .replace("{examples}", " ")
            .replace("{context}", " ")
            .replace("{question}", " ")
            .replace("{answer}", " ")
        )
    for r in records:
        parts.append(r.context)
        parts.append(r.question)
        parts.append(r.answer)
    return "\n".join(parts)


def make_random_span_records(n: int, seed: int = 0, lang: str = "hi") -> list:
    """Word-soup contexts with a randomly placed 1-3 word answer span."""
    rng = np.random.default_rng(seed)
    pool = FILLER_WORDS + CITIES + FRUITS + ANIMALS + NAMES
    records = []
    for i in range(n):
        n_words = int(rng.integers(6, 30))
        words = [pool[int(rng.integers(len(pool)))] for _ in range(n_words)]
        span_len = int(rng.integers(1, 4))
        start_w = int(rng.integers(0, n_words - span_len + 1))
        context = " ".join(words)
        answer = " ".join(words[start_w: start_w + span_len])
        answer_start = len(" ".join(words[:start_w])) + (1 if start_w else 0)
        rec = QaRecord(
            id=f"{lang}-span-{i:05d}",
            lang=lang,
            context=context,
            question="उत्तर कहाँ है?",
            answer=answer,
            answer_start=answer_start,
        )
        rec.validate()
        records.append(rec)
    return records


def make_stats_records(n: int, seed: int = 0, lang: str = "hi") -> list:
    """Records with planted positive dependence between context length and
    answer start: the answer lands in the back half of longer contexts."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        n_words = int(rng.integers(5, 60))
        words = [FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))] for _ in range(n_words)]
        frac = rng.uniform(0.3, 0.95)
        pos = min(n_words - 1, int(frac * n_words))
        words[pos] = CITIES[int(rng.integers(len(CITIES)))]
        context = " ".join(words)
        answer = words[pos]
        answer_start = len(" ".join(words[:pos])) + (1 if pos else 0)
        q_words = int(rng.integers(3, 9))
        question = " ".join(
            FILLER_WORDS[int(rng.integers(len(FILLER_WORDS)))] for _ in range(q_words)
        ) + "?"
        rec = QaRecord(
            id=f"{lang}-stat-{i:05d}",
            lang=lang,
            context=context,
            question=question,
            answer=answer,
            answer_start=answer_start,
        )
        rec.validate()
        records.append(rec)
    return records


def make_recall_dataset(
    n_pairs: int,
    n_keys: int,
    n_values: int,
    n_train: int,
    n_test: int,
    seed: int = 0,
):
    """Key/value recall task over integer tokens.

    Layout per sequence: k1 v1 k2 v2 ... km vm SEP kq, target = the value
    bound to kq earlier in the same sequence. Token ids: 0 = sep,
    1..n_keys = keys, n_keys+1.. = values. Returns ((train_x, train_y),
    (test_x, test_y), vocab_size).
    """
    rng = np.random.default_rng(seed)
    sep = 0
    vocab_size = 1 + n_keys + n_values

    def batch(n):
        xs = np.zeros((n, 2 * n_pairs + 2), dtype=np.int64)
        ys = np.zeros(n, dtype=np.int64)
        for b in range(n):
            keys = rng.choice(n_keys, size=n_pairs, replace=False) + 1
            values = rng.integers(0, n_values, size=n_pairs) + 1 + n_keys
            q = int(rng.integers(n_pairs))
            seq = np.empty(2 * n_pairs, dtype=np.int64)
            seq[0::2] = keys
            seq[1::2] = values
            xs[b, : 2 * n_pairs] = seq
            xs[b, 2 * n_pairs] = sep
            xs[b, 2 * n_pairs + 1] = keys[q]
            ys[b] = values[q]
        return xs, ys

    return batch(n_train), batch(n_test), vocab_size

"""Prompt rendering, sampling-based generation and best-of-P selection.

A template is a UTF-8 text file with named placeholders ``{system}``,
``{examples}``, ``{context}``, ``{question}`` and ``{answer}``. The system
message is spliced in from the template's own header section, each shot
renders one filled example block, and the prompt ends right where the
answer belongs so generation continues from there.

Candidate selection scores each of the P sampled answers by a mix of its
normalized log-likelihood under the model and its mean token-F1 agreement
with the other candidates (a medoid criterion); the argmax wins, ties
resolving to the lowest candidate index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .tensor import Tensor, no_grad
from .tokenizer import EOS_ID, SOS_ID, Vocab, decode, encode

__all__ = [
    "PromptTemplate",
    "SelectionConfig",
    "render_prompt",
    "render_chat",
    "generate",
    "candidate_log_likelihood",
    "select_best",
    "predict_span",
    "default_template",
]

_PLACEHOLDERS = ("{system}", "{examples}", "{context}", "{question}", "{answer}")


@dataclass
class PromptTemplate:
    """Prompt layout with a system slot, optional example blocks and the
    target context/question slot.

    ``body`` holds the full layout; ``example_block`` is the per-shot
    sub-template (context, question, answer of one worked example) and
    ``example_delimiter`` separates consecutive blocks.
    """

    system: str
    body: str
    example_block: str
    example_delimiter: str = "\n\n"

    @staticmethod
    def parse(text: str) -> "PromptTemplate":
        """Parse a template file.

        Layout: system text, a line containing only ``---``, then the body.
        The body must contain {context}, {question} and {answer}; the part
        after {examples} (up to {answer} inclusive) doubles as the example
        block format.
        """
        if "---" in text.split("\n"):
            sep = text.split("\n").index("---")
            lines = text.split("\n")
            system = "\n".join(lines[:sep]).strip()
            body = "\n".join(lines[sep + 1:])
        else:
            system = ""
            body = text
        for slot in ("{context}", "{question}", "{answer}"):
            if slot not in body:
                raise ValueError(f"template is missing the {slot} slot")
        if "{examples}" in body:
            block = body.split("{examples}", 1)[1]
        else:
            block = body
        block = block[: block.index("{answer}") + len("{answer}")]
        return PromptTemplate(system=system, body=body, example_block=block)

    @staticmethod
    def load(path) -> "PromptTemplate":
        with open(path, encoding="utf-8") as f:
            return PromptTemplate.parse(f.read())

    def check_collisions(self, texts: Sequence[str]) -> None:
        """Delimiters must not occur in corpus text, keeping rendering injective."""
        delim = self.example_delimiter.strip("\n") or self.example_delimiter
        for t in texts:
            if delim and delim in t:
                raise ValueError(
                    f"template delimiter {self.example_delimiter!r} occurs in corpus text"
                )


def default_template() -> PromptTemplate:
    text = (
        resources.files("ssmqa")
        .joinpath("templates/qa_default.txt")
        .read_text(encoding="utf-8")
    )
    return PromptTemplate.parse(text)


def _render_examples(template: PromptTemplate, examples: Sequence) -> str:
    parts = []
    for ex in examples:
        parts.append(
            template.example_block.format(
                context=ex.context, question=ex.question, answer=ex.answer
            )
            + template.example_delimiter
        )
    return "".join(parts)


def render_chat(template: PromptTemplate, record, examples: Sequence = ()) -> tuple:
    """(prefix, answer) rendering: prefix is everything before the answer slot."""
    if examples and "{examples}" not in template.body:
        raise ValueError("template has no {examples} slot but examples were given")
    body = template.body.replace("{system}", template.system)
    filled = body.format(
        system=template.system,
        examples=_render_examples(template, examples),
        context=record.context,
        question=record.question,
        answer="\x00",
    )
    prefix, _, tail = filled.partition("\x00")
    return prefix, record.answer + tail


def render_prompt(template: PromptTemplate, record, examples: Sequence = ()) -> str:
    """Deterministic prompt text ending where the answer should begin."""
    prefix, _ = render_chat(template, record, examples)
    return prefix


@dataclass
class SelectionConfig:
    """Best-of-P sampling settings: P candidates, temperature, a token cap,
    and the likelihood-vs-agreement mixing weight."""

    p_samples: int = 1
    temperature: float = 0.0
    max_tokens: int = 32
    lam: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.p_samples < 1:
            raise ValueError("P must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def _greedy_or_sample(model, ids: list, max_tokens: int, temperature: float,
                      rng: Optional[np.random.Generator]) -> list:
    out = []
    cur = list(ids)
    for _ in range(max_tokens):
        logits = model.forward(np.asarray([cur])).data[0, -1]
        if temperature == 0.0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            z = z - z.max()
            probs = np.exp(z)
            probs /= probs.sum()
            nxt = int(rng.choice(len(probs), p=probs))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        cur.append(nxt)
    return out


def generate(model, prompt_ids: Sequence[int], config: SelectionConfig,
             vocab: Vocab) -> list:
    """P decoded candidate answers for the prompt.

    Temperature 0 is greedy (all P entries collapse to one distinct
    string); otherwise each candidate draws from its own RNG stream seeded
    by (seed, candidate index), so reruns reproduce the same list.
    """
    prompt_ids = list(int(i) for i in prompt_ids)
    budget = model.config.max_seq_len - config.max_tokens
    if len(prompt_ids) > budget:
        raise ValueError(
            f"prompt of {len(prompt_ids)} tokens exceeds the {budget}-token "
            f"budget (max_seq_len {model.config.max_seq_len} - max_tokens "
            f"{config.max_tokens})"
        )
    with no_grad():
        if config.temperature == 0.0:
            toks = _greedy_or_sample(model, prompt_ids, config.max_tokens, 0.0, None)
            text = decode(toks, vocab).strip()
            return [text] * config.p_samples
        outs = []
        for i in range(config.p_samples):
            rng = np.random.default_rng((config.seed, i))
            toks = _greedy_or_sample(
                model, prompt_ids, config.max_tokens, config.temperature, rng
            )
            outs.append(decode(toks, vocab).strip())
    return outs


def candidate_log_likelihood(model, prompt_ids: Sequence[int], answer_ids: Sequence[int]) -> float:
    """Mean per-token log-probability of the answer (plus eos) given the prompt."""
    ids = list(prompt_ids) + list(answer_ids) + [EOS_ID]
    with no_grad():
        logits = model.forward(np.asarray([ids[:-1]])).data[0]
    total = 0.0
    targets = ids[len(prompt_ids):]
    start = len(prompt_ids) - 1
    for k, tgt in enumerate(targets):
        row = logits[start + k]
        row = row - row.max()
        logz = math.log(np.exp(row).sum())
        total += row[tgt] - logz
    return total / len(targets)


def select_best(candidates: Sequence[str], model, prompt_ids: Sequence[int],
                config: SelectionConfig, vocab: Vocab) -> tuple:
    """Pick the best candidate: lam * normalized log-likelihood +
    (1 - lam) * mean token-F1 agreement with the other candidates."""
    if not candidates:
        raise ValueError("select_best needs at least one candidate")
    n = len(candidates)
    scores = []
    for i, cand in enumerate(candidates):
        if n == 1:
            agreement = 1.0
        else:
            agreement = float(
                np.mean([metrics.token_f1(cand, candidates[j], vocab)
                         for j in range(n) if j != i])
            )
        if config.lam > 0.0:
            ll = candidate_log_likelihood(model, prompt_ids, encode(cand, vocab))
        else:
            ll = 0.0
        scores.append(config.lam * ll + (1.0 - config.lam) * agreement)
    best = 0
    for i in range(1, n):
        if scores[i] > scores[best]:
            best = i
    return candidates[best], scores[best]


def build_span_input(question: str, context: str, vocab: Vocab) -> tuple:
    """Token layout for span prediction: sos, question, eos, context, eos.

    The question comes first so every context position is scored with the
    question already in state (the model is causal). Returns (ids,
    context_token_ids, offset of the context segment).
    """
    q_ids = encode(question, vocab)
    c_ids = encode(context, vocab)
    ids = [SOS_ID] + q_ids + [EOS_ID] + c_ids + [EOS_ID]
    offset = 1 + len(q_ids) + 1
    return ids, c_ids, offset


def predict_span(model, record, vocab: Vocab, max_answer_tokens: int = 64) -> tuple:
    """(token_start, token_end, text): constrained argmax of
    start_logit[i] + end_logit[j] over i <= j <= i + max_answer_tokens."""
    if model.span_head is None:
        raise ValueError("model has no span head attached")
    ids, c_ids, offset = build_span_input(record.question, record.context, vocab)
    if not c_ids:
        raise ValueError(f"record {record.id}: empty context")
    with no_grad():
        h = model.hidden(np.asarray(ids))
        s_log, e_log = model.span_head.logits(h)
    s = s_log.data[offset: offset + len(c_ids)]
    e = e_log.data[offset: offset + len(c_ids)]
    best = (-np.inf, 0, 0)
    for j in range(len(c_ids)):
        lo = max(0, j - max_answer_tokens)
        i = lo + int(np.argmax(s[lo: j + 1]))
        score = s[i] + e[j]
        if score > best[0]:
            best = (score, i, j)
    _, i, j = best
    text = decode(c_ids[i: j + 1], vocab).strip()
    return i, j, text

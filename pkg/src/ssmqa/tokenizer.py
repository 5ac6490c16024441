"""Grapheme-cluster-aware tokenizer and vocabulary for Devanagari text.

Segmentation follows the extended-grapheme-cluster rules that matter for
Devanagari (and ASCII) text: combining and spacing marks attach to their
base, CRLF stays together, and a virama joins the following consonant so
conjuncts like "क्ष" stay whole. Vocabulary pieces are whitespace-delimited
units, ranked by corpus frequency; encoding falls back to greedy
longest-match over a word's grapheme clusters, with unknown clusters
mapped to <unk>. Whitespace is encoded as explicit marker pieces so
decoding is lossless.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Optional

__all__ = [
    "PAD_ID",
    "UNK_ID",
    "SOS_ID",
    "EOS_ID",
    "SPECIAL_PIECES",
    "Vocab",
    "segment_graphemes",
    "train_vocab",
    "encode",
    "encode_with_offsets",
    "decode",
]

PAD_ID, UNK_ID, SOS_ID, EOS_ID = 0, 1, 2, 3
SPECIAL_PIECES = ("<pad>", "<unk>", "<sos>", "<eos>")
UNK_GLYPH = "⁇"  # '⁇'

# whitespace characters get visible marker pieces so the vocab file stays
# line oriented and decode stays lossless
WS_TO_MARKER = {" ": "␣", "\n": "␤", "\t": "␉"}
MARKER_TO_WS = {m: w for w, m in WS_TO_MARKER.items()}

_ZERO_WIDTH_JOINERS = {"‌", "‍"}  # ZWNJ, ZWJ
_VIRAMA = "्"


def _is_devanagari_letter(ch: str) -> bool:
    return "ऀ" <= ch <= "ॿ" and unicodedata.category(ch) == "Lo"


def segment_graphemes(text: str) -> list:
    """Split ``text`` into extended grapheme clusters.

    Concatenating the result reproduces the input exactly. Combining marks
    (Mn/Me), spacing marks (Mc) and zero-width joiners attach to the
    preceding base; a Devanagari virama additionally glues the following
    consonant into the same cluster.
    """
    clusters: list = []
    current = ""
    for ch in text:
        if "\ud800" <= ch <= "\udfff":
            raise ValueError("invalid encoding: lone surrogate in text")
        if not current:
            current = ch
            continue
        prev = current[-1]
        if prev == "\r" and ch == "\n":
            current += ch
            continue
        cat = unicodedata.category(ch)
        if cat in ("Mn", "Mc", "Me") or ch in _ZERO_WIDTH_JOINERS:
            current += ch
            continue
        joiner_back = current[-1] in _ZERO_WIDTH_JOINERS and len(current) >= 2
        prev_core = current[-2] if joiner_back else prev
        if prev_core == _VIRAMA and _is_devanagari_letter(ch):
            current += ch
            continue
        clusters.append(current)
        current = ch
    if current:
        clusters.append(current)
    return clusters


def _iter_units(text: str):
    """Yield (kind, unit, char_start) with kind 'word' or 'ws'."""
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            yield "ws", ch, i
            i += 1
        else:
            j = i
            while j < n and not text[j].isspace():
                j += 1
            yield "word", text[i:j], i
            i = j


@dataclass
class Vocab:
    """Piece table with reserved specials pad=0, unk=1, sos=2, eos=3."""

    pieces: list = field(default_factory=lambda: list(SPECIAL_PIECES))
    counts: list = field(default_factory=lambda: [0, 0, 0, 0])
    piece_to_id: dict = None

    def __post_init__(self):
        if self.piece_to_id is None:
            self.piece_to_id = {p: i for i, p in enumerate(self.pieces)}

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def size(self) -> int:
        return len(self.pieces)

    def id_of(self, piece: str) -> Optional[int]:
        return self.piece_to_id.get(piece)

    def piece_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.pieces):
            raise ValueError(f"token id {idx} out of range for vocab of {len(self)}")
        return self.pieces[idx]

    def is_special(self, idx: int) -> bool:
        return idx in (PAD_ID, SOS_ID, EOS_ID)

    def is_ws_marker(self, idx: int) -> bool:
        return self.pieces[idx] in MARKER_TO_WS

    def add(self, piece: str, count: int = 0) -> int:
        if piece in self.piece_to_id:
            raise ValueError(f"piece {piece!r} already present")
        self.pieces.append(piece)
        self.counts.append(count)
        self.piece_to_id[piece] = len(self.pieces) - 1
        return len(self.pieces) - 1

    # -- persistence: line oriented, id<TAB>piece<TAB>count, specials first

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for i, (p, c) in enumerate(zip(self.pieces, self.counts)):
                f.write(f"{i}\t{p}\t{c}\n")

    @staticmethod
    def load(path) -> "Vocab":
        pieces: list = []
        counts: list = []
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx_s, piece, count_s = line.split("\t")
                if int(idx_s) != len(pieces):
                    raise ValueError(f"vocab file ids not contiguous at line {line_no + 1}")
                pieces.append(piece)
                counts.append(int(count_s))
        if pieces[: len(SPECIAL_PIECES)] != list(SPECIAL_PIECES):
            raise ValueError("vocab file does not start with the reserved specials")
        return Vocab(pieces=pieces, counts=counts)


def train_vocab(corpus: str, target_size: int) -> Vocab:
    """Frequency-ranked vocabulary over whitespace-delimited units.

    Candidates are the corpus words plus one marker piece per whitespace
    character seen; the most frequent pieces are admitted up to
    ``target_size`` (ties broken lexicographically). Deterministic.
    """
    if target_size <= 4:
        raise ValueError(f"target_size must exceed the 4 reserved specials, got {target_size}")
    if not corpus.strip():
        raise ValueError("empty corpus")
    freq: dict = {}
    for kind, unit, _ in _iter_units(corpus):
        piece = WS_TO_MARKER.get(unit, unit) if kind == "ws" else unit
        if kind == "ws" and unit not in WS_TO_MARKER:
            continue  # exotic whitespace falls back to <unk> at encode time
        if piece in SPECIAL_PIECES:
            continue  # reserved ids are never assigned to corpus pieces
        freq[piece] = freq.get(piece, 0) + 1
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    vocab = Vocab()
    for piece, count in ranked[: target_size - len(SPECIAL_PIECES)]:
        vocab.add(piece, count)
    return vocab


def _encode_word(word: str, vocab: Vocab, start: int):
    """Greedy longest-match over the word's grapheme clusters."""
    wid = vocab.id_of(word)
    if wid is not None:
        return [(wid, start, start + len(word))]
    clusters = segment_graphemes(word)
    offsets = [start]
    for c in clusters:
        offsets.append(offsets[-1] + len(c))
    out = []
    i = 0
    while i < len(clusters):
        match = None
        for j in range(len(clusters), i, -1):
            cand = "".join(clusters[i:j])
            cid = vocab.id_of(cand)
            if cid is not None:
                match = (cid, offsets[i], offsets[j], j)
                break
        if match is None:
            out.append((UNK_ID, offsets[i], offsets[i + 1]))
            i += 1
        else:
            out.append(match[:3])
            i = match[3]
    return out


def encode_with_offsets(text: str, vocab: Vocab, add_bounds: bool = False):
    """Token ids plus per-token (char_start, char_end) source spans.

    Bound tokens (sos/eos) carry empty spans at the text edges.
    """
    ids: list = []
    spans: list = []
    if add_bounds:
        ids.append(SOS_ID)
        spans.append((0, 0))
    for kind, unit, start in _iter_units(text):
        if kind == "ws":
            marker = WS_TO_MARKER.get(unit)
            mid = vocab.id_of(marker) if marker else None
            ids.append(mid if mid is not None else UNK_ID)
            spans.append((start, start + 1))
        else:
            for tid, s, e in _encode_word(unit, vocab, start):
                ids.append(tid)
                spans.append((s, e))
    if add_bounds:
        ids.append(EOS_ID)
        spans.append((len(text), len(text)))
    return ids, spans


def encode(text: str, vocab: Vocab, add_bounds: bool = False) -> list:
    return encode_with_offsets(text, vocab, add_bounds)[0]


def decode(ids: Iterable[int], vocab: Vocab, strip_specials: bool = True,
           unk_glyph: str = UNK_GLYPH) -> str:
    """Inverse of encode. pad/sos/eos are dropped when ``strip_specials``;
    <unk> renders as the replacement glyph."""
    parts = []
    for idx in ids:
        idx = int(idx)
        piece = vocab.piece_of(idx)
        if idx == UNK_ID:
            parts.append(unk_glyph)
        elif vocab.is_special(idx):
            if not strip_specials:
                parts.append(piece)
        elif piece in MARKER_TO_WS:
            parts.append(MARKER_TO_WS[piece])
        else:
            parts.append(piece)
    return "".join(parts)

"""Byte-level BPE with word segmentation and word-to-token alignment."""

from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from .errors import ContractError, FormatError, InputError

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
N_SPECIAL = len(SPECIALS)
BYTE_OFFSET = N_SPECIAL
ALPHABET_SIZE = 256 + N_SPECIAL
DEFAULT_VOCAB = 2048
VOCAB_HEADER = "attnmem-bpe v1"

# Chunks never cross a word boundary, so a merged token belongs to at most
# one word. Concatenating the matches reproduces the input exactly.
_CHUNK_RE = re.compile(r" ?[^\W_]+| ?[^\s\w]+| ?_+|\s+(?!\S)|\s+")
WORD_RE = re.compile(r"[^\W_]+(?:-[^\W_]+)*")


def words_of(text: str) -> list[str]:
    """Lowercased maximal alphanumeric runs; hyphens may join runs."""
    return [m.group(0).lower() for m in WORD_RE.finditer(text)]


@dataclass(frozen=True)
class WordSpan:
    word: str
    token_range: tuple[int, int]
    char_range: tuple[int, int]

    @property
    def n_tokens(self) -> int:
        return self.token_range[1] - self.token_range[0]


class Vocab:
    """An immutable fitted vocabulary.

    Ids 0-2 are the specials, 3-258 the raw bytes, then one id per new
    token in the order merges were learned. Two merge paths can spell the
    same bytes; they share the first id.
    """

    def __init__(self, merges: list[tuple[bytes, bytes]]):
        self.merges = list(merges)
        self.id_to_token: list[bytes] = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(256)]
        self.token_to_id: dict[bytes, int] = {tok: i for i, tok in enumerate(self.id_to_token) if i >= N_SPECIAL}
        for a, b in self.merges:
            if a + b not in self.token_to_id:
                self.token_to_id[a + b] = len(self.id_to_token)
                self.id_to_token.append(a + b)
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[int]] = {}

    pad_id, bos_id, eos_id = PAD, BOS, EOS

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.merges == other.merges

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def _encode_chunk(self, chunk: str) -> list[int]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        parts = [bytes([b]) for b in chunk.encode("utf-8")]
        while len(parts) > 1:
            best, best_rank = -1, None
            for i in range(len(parts) - 1):
                r = self._ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            parts[best : best + 2] = [parts[best] + parts[best + 1]]
        ids = [self.token_to_id[p] for p in parts]
        self._cache[chunk] = ids
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for m in _CHUNK_RE.finditer(text):
            ids.extend(self._encode_chunk(m.group(0)))
        return ids

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.id_to_token[i] for i in ids if i >= N_SPECIAL)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def word_spans(self, text: str, ids) -> list[WordSpan]:
        """Align each word of ``text`` with the tokens that spell it.

        A token joins a word when their byte ranges overlap; tokens made only
        of whitespace or punctuation belong to no word.
        """
        ids = list(ids)
        raw = text.encode("utf-8")
        if self.decode_bytes(ids) != raw:
            raise ContractError("ids do not encode the given text")
        if any(i < N_SPECIAL for i in ids):
            raise ContractError("word_spans expects ids without special tokens")
        tok_end = []
        pos = 0
        for i in ids:
            pos += len(self.id_to_token[i])
            tok_end.append(pos)

        # char offsets -> byte offsets
        byte_at = [0]
        for ch in text:
            byte_at.append(byte_at[-1] + len(ch.encode("utf-8")))

        spans: list[WordSpan] = []
        t = 0
        for m in WORD_RE.finditer(text):
            b0, b1 = byte_at[m.start()], byte_at[m.end()]
            while t < len(ids) and tok_end[t] <= b0:
                t += 1
            start = t
            while t < len(ids) and tok_end[t] - len(self.id_to_token[ids[t]]) < b1:
                t += 1
            if t == start:
                raise ContractError(f"no tokens cover word {m.group(0)!r}")
            if spans and tok_end[spans[-1].token_range[1] - 1] > b0:
                raise ContractError(f"token {start} straddles two words")
            spans.append(WordSpan(m.group(0).lower(), (start, t), (m.start(), m.end())))
        return spans

    # serialization ------------------------------------------------------

    def dumps(self) -> str:
        lines = [VOCAB_HEADER, f"merges {len(self.merges)}"]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        lines.append(f"tokens {len(self.id_to_token)}")
        lines += [f"{i} {tok.hex()}" for i, tok in enumerate(self.id_to_token)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> Vocab:
        lines = text.splitlines()
        if not lines or lines[0] != VOCAB_HEADER:
            raise FormatError(f"expected header {VOCAB_HEADER!r}", field="header")
        try:
            n_merges = int(lines[1].split()[1])
            merges = []
            for line in lines[2 : 2 + n_merges]:
                a, b = line.split()
                merges.append((bytes.fromhex(a), bytes.fromhex(b)))
            n_tokens = int(lines[2 + n_merges].split()[1])
            table = [line.split() for line in lines[3 + n_merges : 3 + n_merges + n_tokens]]
        except (IndexError, ValueError) as exc:
            raise FormatError(f"truncated or malformed vocab: {exc}", field="merges") from exc
        if len(merges) != n_merges or len(table) != n_tokens:
            raise FormatError("truncated vocab file", field="tokens")
        vocab = cls(merges)
        if len(vocab) != n_tokens or any(vocab.id_to_token[int(i)].hex() != h for i, h in table):
            raise FormatError("token table disagrees with merges", field="tokens")
        return vocab

    @classmethod
    def load(cls, path) -> Vocab:
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def fit(corpus: str, target_vocab: int = DEFAULT_VOCAB) -> Vocab:
    """Learn merges until the vocabulary reaches ``target_vocab`` entries.

    The most frequent adjacent pair is merged each round; ties go to the
    lexicographically smallest (left bytes, right bytes) pair.
    """
    if not corpus:
        raise InputError("cannot fit a tokenizer on an empty corpus")
    if target_vocab < ALPHABET_SIZE:
        raise InputError(f"target_vocab must be at least {ALPHABET_SIZE}")

    chunk_counts = Counter(m.group(0) for m in _CHUNK_RE.finditer(corpus))
    words = [[bytes([b]) for b in c.encode("utf-8")] for c in chunk_counts]
    freqs = list(chunk_counts.values())

    pair_counts: Counter[tuple[bytes, bytes]] = Counter()
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for wi, (w, f) in enumerate(zip(words, freqs)):
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    merges: list[tuple[bytes, bytes]] = []
    known = {bytes([b]) for b in range(256)}
    while ALPHABET_SIZE + len(known) - 256 < target_vocab and pair_counts:
        best = min(pair_counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if pair_counts[best] <= 0:
            break
        a, b = best
        merged = a + b
        merges.append(best)
        for wi in sorted(where.pop(best, ())):
            w, f = words[wi], freqs[wi]
            for pair in zip(w, w[1:]):
                pair_counts[pair] -= f
            out, i = [], 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            words[wi] = out
            for pair in zip(out, out[1:]):
                pair_counts[pair] += f
                where[pair].add(wi)
        for pair in [p for p, c in pair_counts.items() if c <= 0]:
            del pair_counts[pair]
        known.add(merged)
    return Vocab(merges)

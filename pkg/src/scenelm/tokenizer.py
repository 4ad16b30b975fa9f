"""Minimal byte-pair tokenizer: 256 byte tokens, 4 specials, learned merges.

Merges are learned over raw UTF-8 byte sequences of the training texts
(most frequent adjacent pair first, ties broken lexicographically) until the
vocabulary is full or no pair repeats. Vocabulary files are plain JSON.
"""

from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Iterable, List, Sequence

PAD, BOS, EOS, GROUND = 256, 257, 258, 259
NUM_SPECIALS = 4
SPECIAL_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", GROUND: "<ground>"}


class ByteBpeTokenizer:
    def __init__(self, merges: Sequence[tuple] | None = None, vocab_size: int = 512):
        self.vocab_size = vocab_size
        self.merges: List[tuple] = [tuple(m) for m in (merges or [])]
        if 256 + NUM_SPECIALS + len(self.merges) > vocab_size:
            raise ValueError("more merges than the vocabulary allows")

    # -- training ------------------------------------------------------------

    @classmethod
    def train(cls, corpus: Iterable[str], vocab_size: int = 512) -> "ByteBpeTokenizer":
        sequences = [list(text.encode("utf-8")) for text in corpus]
        merges: List[tuple] = []
        next_id = 256 + NUM_SPECIALS
        while next_id < vocab_size:
            counts = Counter()
            for seq in sequences:
                counts.update(zip(seq, seq[1:]))
            if not counts:
                break
            best_count = max(counts.values())
            if best_count < 2:
                break
            pair = min(p for p, c in counts.items() if c == best_count)
            merges.append(pair)
            sequences = [cls._apply_merge(seq, pair, next_id) for seq in sequences]
            next_id += 1
        return cls(merges=merges, vocab_size=vocab_size)

    @staticmethod
    def _apply_merge(seq: List[int], pair: tuple, new_id: int) -> List[int]:
        out = []
        k = 0
        while k < len(seq):
            if k + 1 < len(seq) and (seq[k], seq[k + 1]) == pair:
                out.append(new_id)
                k += 2
            else:
                out.append(seq[k])
                k += 1
        return out

    # -- encode / decode -------------------------------------------------------

    def encode(self, text: str) -> List[int]:
        seq = list(text.encode("utf-8"))
        for offset, pair in enumerate(self.merges):
            seq = self._apply_merge(seq, pair, 256 + NUM_SPECIALS + offset)
        return seq

    def decode(self, ids: Iterable[int]) -> str:
        def expand(tid):
            if tid < 256:
                return bytes([tid])
            if tid < 256 + NUM_SPECIALS:
                return b""
            a, b = self.merges[tid - 256 - NUM_SPECIALS]
            return expand(a) + expand(b)

        return b"".join(expand(t) for t in ids).decode("utf-8", errors="replace")

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        Path(path).write_text(json.dumps({
            "vocab_size": self.vocab_size,
            "specials": {str(k): v for k, v in SPECIAL_NAMES.items()},
            "merges": [list(m) for m in self.merges],
        }, indent=1))

    @classmethod
    def load(cls, path) -> "ByteBpeTokenizer":
        blob = json.loads(Path(path).read_text())
        return cls(merges=[tuple(m) for m in blob["merges"]], vocab_size=blob["vocab_size"])

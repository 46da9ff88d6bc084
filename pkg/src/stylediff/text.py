"""Character-level token vocabulary."""

import re
from pathlib import Path

PAD_ID = 0
UNK_TOKEN = "<unk>"


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().lower()


class Vocabulary:
    """Symbols get ids ``1..len(symbols)`` in the given order; pad is 0 and the
    unknown id is ``len(symbols) + 1``."""

    def __init__(self, symbols):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in vocabulary")
        if any(len(s) != 1 for s in symbols):
            raise ValueError("vocabulary symbols must be single characters")
        self.symbols = symbols
        self.sym_to_id = {s: i + 1 for i, s in enumerate(symbols)}
        self.pad_id = PAD_ID
        self.unk_id = len(symbols) + 1

    def __len__(self):
        """Embedding table size: pad + symbols + unk."""
        return len(self.symbols) + 2

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.symbols == other.symbols

    @classmethod
    def from_texts(cls, texts):
        chars = set()
        for t in texts:
            chars.update(normalize_text(t))
        return cls(sorted(chars))

    def save(self, path):
        Path(path).write_text("".join(s + "\n" for s in self.symbols), encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(lines)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    text = normalize_text(text)
    if not text:
        raise ValueError("text is empty after whitespace normalisation")
    return [vocab.sym_to_id.get(ch, vocab.unk_id) for ch in text]


def detokenize(ids, vocab: Vocabulary) -> str:
    ids = list(ids)
    if not ids:
        raise ValueError("empty id sequence")
    out = []
    for i in ids:
        i = int(i)
        if i == vocab.unk_id:
            out.append(UNK_TOKEN)
        elif 1 <= i <= len(vocab.symbols):
            out.append(vocab.symbols[i - 1])
        else:
            raise ValueError(f"token id {i} out of range")
    return "".join(out)

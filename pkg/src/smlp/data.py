"""Character-level corpus handling and deterministic batching."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

SPECIALS = ("<pad>", "<unk>")
PAD, UNK = 0, 1


@dataclass
class Vocab:
    chars: list[str]

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(sorted(set(text)))

    def __post_init__(self):
        self._stoi = {c: i + len(SPECIALS) for i, c in enumerate(self.chars)}

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.chars)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self._stoi.get(c, UNK) for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        k = len(SPECIALS)
        return "".join(self.chars[i - k] for i in np.asarray(ids).tolist() if i >= k)

    def to_codes(self) -> list[int]:
        return [ord(c) for c in self.chars]

    @classmethod
    def from_codes(cls, codes) -> "Vocab":
        return cls([chr(int(c)) for c in codes])


@dataclass
class Corpus:
    vocab: Vocab
    tokens: np.ndarray
    split: int  # tokens[:split] train, tokens[split:] valid

    @classmethod
    def from_text(cls, text: str, valid_fraction: float = 0.1, vocab: Vocab | None = None) -> "Corpus":
        if not text:
            raise ConfigError("corpus is empty")
        vocab = vocab or Vocab.from_text(text)
        toks = vocab.encode(text)
        split = len(toks) - int(round(valid_fraction * len(toks)))
        return cls(vocab, toks, split)

    @classmethod
    def from_file(cls, path: str | Path, valid_fraction: float = 0.1, vocab: Vocab | None = None) -> "Corpus":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read corpus {path}: {e}") from None
        return cls.from_text(text, valid_fraction, vocab)

    @property
    def train(self) -> np.ndarray:
        return self.tokens[:self.split]

    @property
    def valid(self) -> np.ndarray:
        return self.tokens[self.split:]


def windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    """Non-overlapping input windows of ``seq_len`` tokens plus one target token.

    Shape (n, seq_len + 1); window i covers tokens[i*T : i*T + T + 1].
    """
    n = (len(tokens) - 1) // seq_len
    if n < 1:
        return np.zeros((0, seq_len + 1), dtype=np.int64)
    idx = np.arange(n)[:, None] * seq_len + np.arange(seq_len + 1)[None, :]
    return tokens[idx]


def batch_for_step(wins: np.ndarray, step: int, batch_size: int, seed: int) -> np.ndarray:
    """Batch for 1-based ``step``: windows in a seeded per-epoch permutation.

    A pure function of its arguments, so resuming at any step reproduces the
    same stream.
    """
    n = len(wins)
    if n == 0:
        raise ConfigError("training split shorter than one window")
    out = np.empty((batch_size, wins.shape[1]), dtype=np.int64)
    perms: dict[int, np.ndarray] = {}
    for j in range(batch_size):
        g = (step - 1) * batch_size + j
        epoch, pos = divmod(g, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out[j] = wins[perms[epoch][pos]]
    return out


_ONSETS = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "th", "st", "ch", "br", "tr"]
_NUCLEI = ["a", "e", "i", "o", "u", "ea", "ou", "ai"]
_CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "ng", "st"]


def synthetic_text(n_chars: int, seed: int = 0, lexicon_size: int = 600) -> str:
    """English-like prose from a seeded toy grammar over an invented lexicon.

    Word frequencies are Zipfian and sentences follow a handful of templates,
    so the text has word, bigram and punctuation structure a char model can learn.
    """
    rng = np.random.default_rng(seed)

    def word(min_syl=1, max_syl=3):
        k = rng.integers(min_syl, max_syl + 1)
        return "".join(rng.choice(_ONSETS) + rng.choice(_NUCLEI) + rng.choice(_CODAS) for _ in range(k))

    def lexicon(n):
        out = []
        seen = set()
        while len(out) < n:
            w = word()
            if w not in seen:
                seen.add(w)
                out.append(w)
        return out

    nouns, verbs, adjs = lexicon(lexicon_size // 2), lexicon(lexicon_size // 3), lexicon(lexicon_size // 6)
    verbs = [v + "s" if not v.endswith("s") else v for v in verbs]
    dets = ["the", "a", "this", "every", "one", "my", "our"]
    preps = ["in", "on", "with", "under", "near", "for", "from"]
    conj = ["and", "but", "so", "while"]

    def zipf(words):
        w = 1.0 / np.arange(1, len(words) + 1)
        return words, w / w.sum()

    nz, vz, az = zipf(nouns), zipf(verbs), zipf(adjs)

    def pick(z):
        return z[0][rng.choice(len(z[0]), p=z[1])]

    def np_phrase():
        parts = [dets[rng.integers(len(dets))]]
        if rng.random() < 0.4:
            parts.append(pick(az))
        parts.append(pick(nz))
        return " ".join(parts)

    def clause():
        s = f"{np_phrase()} {pick(vz)} {np_phrase()}"
        if rng.random() < 0.35:
            s += f" {preps[rng.integers(len(preps))]} {np_phrase()}"
        return s

    out, size = [], 0
    para = 0
    while size < n_chars:
        s = clause()
        if rng.random() < 0.3:
            s += f", {conj[rng.integers(len(conj))]} {clause()}"
        s = s[0].upper() + s[1:] + ("?" if rng.random() < 0.08 else ".")
        para += 1
        sep = "\n" if para % 6 == 0 else " "
        out.append(s + sep)
        size += len(s) + 1
    return "".join(out)[:n_chars]

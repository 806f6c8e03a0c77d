"""Zero-shot multiple-choice scoring: pick the candidate the LM finds most likely."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import PAD, Vocab
from .errors import ConfigError
from .model import Model, forward_lm

log = logging.getLogger(__name__)

NORMALIZE_MODES = ("none", "per-token")


@dataclass
class ChoiceItem:
    prompt: str
    candidates: list[str]
    gold: int

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ConfigError("a choice item needs at least two candidates")
        if not 0 <= self.gold < len(self.candidates):
            raise ConfigError(f"gold index {self.gold} out of range")
        if any(len(c) == 0 for c in self.candidates):
            raise ConfigError("empty candidate")


@dataclass
class ChoiceTask:
    items: list[ChoiceItem]

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "ChoiceTask":
        items = []
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except (OSError, UnicodeDecodeError) as e:
            raise ConfigError(f"cannot read task file {path}: {e}") from None
        for n, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                items.append(ChoiceItem(rec["prompt"], list(rec["candidates"]), int(rec["gold"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ConfigError(f"{path}:{n}: bad task record ({e})") from None
        if not items:
            raise ConfigError(f"task file {path} has no items")
        return cls(items)


@dataclass
class ScoreResult:
    accuracy: float
    predictions: list[int]
    scores: list[list[float] | None] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)


def candidate_logprob(model: Model, vocab: Vocab, prompt: str, candidate: str) -> float | None:
    """Sum of log p(candidate tokens | pad-as-BOS, prompt, earlier candidate tokens).

    Returns None when the sequence does not fit the model's context.
    """
    n = model.cfg.seq_len
    seq = np.concatenate([[PAD], vocab.encode(prompt), vocab.encode(candidate)])
    if len(seq) - 1 > n:
        return None
    inputs = np.full(n, PAD, dtype=np.int64)
    inputs[:len(seq) - 1] = seq[:-1]
    with T.no_grad():
        logp = T.log_softmax(forward_lm(model, inputs).logits, axis=-1).data
    start = len(seq) - len(candidate)
    pos = np.arange(start, len(seq))
    return float(logp[pos - 1, seq[pos]].sum())


def score_choices(model: Model, vocab: Vocab, task: ChoiceTask, normalize: str = "none") -> ScoreResult:
    """Accuracy of argmax-score selection. Ties go to the lowest index; items that
    do not fit the context are skipped and counted wrong."""
    if normalize not in NORMALIZE_MODES:
        raise ConfigError(f"normalize must be one of {NORMALIZE_MODES}")
    preds, scores, skipped = [], [], []
    correct = 0
    for i, item in enumerate(task.items):
        s = [candidate_logprob(model, vocab, item.prompt, c) for c in item.candidates]
        if any(v is None for v in s):
            log.warning("item %d does not fit a context of %d tokens; counted as incorrect",
                        i, model.cfg.seq_len)
            skipped.append(i)
            preds.append(-1)
            scores.append(None)
            continue
        if normalize == "per-token":
            s = [v / len(c) for v, c in zip(s, item.candidates)]
        pick = int(np.argmax(s))  # first maximum
        preds.append(pick)
        scores.append(s)
        correct += pick == item.gold
    return ScoreResult(correct / len(task.items), preds, scores, skipped)

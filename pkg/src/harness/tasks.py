"""
Synthetic sequence tasks with exactly checkable answers.

Every example is ``prompt + answer`` in a small character vocabulary. The
prompt starts with BOS and a task marker and ends with the separator ``=``;
the answer ends with EOS. Splits are assigned by hashing the prompt together
with the seed, so they are disjoint and independent of generation order.
"""

import hashlib
import string
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core.errors import ConfigError

PAD, BOS, EOS, SEP, QUERY = "_", "^", "$", "=", "?"
SPECIALS = PAD + BOS + EOS + SEP + QUERY
TASK_MARKERS = "CRMK"
ALPHABET = SPECIALS + string.digits + string.ascii_lowercase + TASK_MARKERS


class CharTokenizer:
    """Character-level tokenizer over a fixed alphabet."""

    def __init__(self, alphabet: str = ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ConfigError("tokenizer alphabet has duplicate characters")
        self.alphabet = alphabet
        self._index = {ch: i for i, ch in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    def encode(self, text: str) -> List[int]:
        try:
            return [self._index[ch] for ch in text]
        except KeyError as e:
            raise ValueError(f"character {e.args[0]!r} is not in the alphabet") from e

    def decode(self, ids: Sequence[int]) -> str:
        return "".join(self.alphabet[int(i)] for i in ids)


class TaskKind(str, Enum):
    """Task families; the class label of a kind is its index + 1 (0 is null)."""

    COPY = "copy"
    REVERSE = "reverse"
    MODULAR_SUM = "modular_sum"
    KEYED_RECALL = "keyed_recall"

    @property
    def marker(self) -> str:
        return TASK_MARKERS[list(TaskKind).index(self)]

    @property
    def class_id(self) -> int:
        return list(TaskKind).index(self) + 1

    @classmethod
    def from_marker(cls, marker: str) -> "TaskKind":
        return list(cls)[TASK_MARKERS.index(marker)]


N_TASK_CLASSES = len(TaskKind)


@dataclass
class TaskSizes:
    """Knobs controlling example counts and lengths."""

    n_examples: int = 2000
    payload_len: int = 6
    n_symbols: int = 10
    n_operands: int = 4
    n_distractors: int = 3
    n_pairs: int = 4
    prime: int = 7

    def __post_init__(self):
        for name in ("n_examples", "payload_len", "n_symbols", "n_operands", "n_pairs", "prime"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", field=name)
        if self.n_distractors < 0:
            raise ConfigError("n_distractors must be >= 0", field="n_distractors")


@dataclass(frozen=True)
class Example:
    prompt: List[int]
    answer: List[int]
    class_id: int

    @property
    def tokens(self) -> List[int]:
        return self.prompt + self.answer


@dataclass
class Task:
    """A deterministic dataset of one task kind split into train/val/test."""

    kind: TaskKind
    sizes: TaskSizes
    seed: int
    tokenizer: CharTokenizer
    train: List[Example] = field(default_factory=list)
    val: List[Example] = field(default_factory=list)
    test: List[Example] = field(default_factory=list)

    @property
    def class_id(self) -> int:
        return self.kind.class_id

    @property
    def max_len(self) -> int:
        return max(len(ex.tokens) for ex in self.train + self.val + self.test)

    def split(self, name: str) -> List[Example]:
        if name not in ("train", "val", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _symbols(sizes: TaskSizes) -> str:
    return string.ascii_lowercase[:sizes.n_symbols]


def _check_vocab(kind: TaskKind, sizes: TaskSizes) -> None:
    if sizes.n_symbols > len(string.ascii_lowercase):
        raise ConfigError(f"n_symbols={sizes.n_symbols} exceeds the 26 available letters",
                          field="n_symbols")
    if kind is TaskKind.MODULAR_SUM and sizes.prime > 10:
        raise ConfigError(f"prime {sizes.prime} needs more than one digit per answer",
                          field="prime")
    if kind is TaskKind.KEYED_RECALL and sizes.n_pairs > sizes.n_symbols:
        raise ConfigError(f"{sizes.n_pairs} distinct keys need at least that many symbols "
                          f"(n_symbols={sizes.n_symbols})", field="n_pairs")


def _generate_text(kind: TaskKind, sizes: TaskSizes,
                   rng: np.random.Generator) -> Tuple[str, str]:
    """One example as text ``prompt + answer``."""
    symbols = _symbols(sizes)
    if kind in (TaskKind.COPY, TaskKind.REVERSE):
        payload = "".join(rng.choice(list(symbols), size=sizes.payload_len))
        answer = payload if kind is TaskKind.COPY else payload[::-1]
        body = payload
    elif kind is TaskKind.MODULAR_SUM:
        operands = [str(d) for d in rng.integers(0, 10, size=sizes.n_operands)]
        distractors = list(rng.choice(list(symbols), size=sizes.n_distractors))
        items = operands + distractors
        order = rng.permutation(len(items))
        body = "".join(items[i] for i in order)
        answer = str(sum(int(d) for d in operands) % sizes.prime)
    else:
        keys = rng.choice(list(symbols), size=sizes.n_pairs, replace=False)
        values = rng.integers(0, 10, size=sizes.n_pairs)
        query = int(rng.integers(0, sizes.n_pairs))
        body = "".join(f"{k}{v}" for k, v in zip(keys, values)) + QUERY + keys[query]
        answer = str(values[query])
    return f"{BOS}{kind.marker}{body}{SEP}", f"{answer}{EOS}"


def split_of(prompt: str, seed: int) -> str:
    """Assign a prompt to train/val/test (90/5/5) by salted hashing."""
    digest = hashlib.sha256(f"{seed}:{prompt}".encode("utf-8")).hexdigest()
    bucket = int(digest[:8], 16) % 100
    if bucket < 90:
        return "train"
    return "val" if bucket < 95 else "test"


def make_task(kind: Union[TaskKind, str], sizes: Optional[TaskSizes] = None, seed: int = 0,
              tokenizer: Optional[CharTokenizer] = None) -> Task:
    """
    Generate a deterministic dataset of ``sizes.n_examples`` distinct prompts.

    Raises:
        ConfigError: if the task's symbol requirements exceed the vocabulary.
    """
    kind = TaskKind(kind)
    sizes = sizes or TaskSizes()
    tokenizer = tokenizer or CharTokenizer()
    _check_vocab(kind, sizes)

    salt = int(hashlib.sha256(kind.value.encode("utf-8")).hexdigest()[:8], 16)
    rng = np.random.default_rng([seed, salt])
    task = Task(kind=kind, sizes=sizes, seed=seed, tokenizer=tokenizer)

    seen = set()
    attempts = 0
    while len(seen) < sizes.n_examples and attempts < 50 * sizes.n_examples:
        attempts += 1
        prompt, answer = _generate_text(kind, sizes, rng)
        if prompt in seen:
            continue
        seen.add(prompt)
        example = Example(tokenizer.encode(prompt), tokenizer.encode(answer), kind.class_id)
        task.split(split_of(prompt, seed)).append(example)

    if not task.train:
        raise ConfigError(f"{kind.value} produced no training examples", field="n_examples")
    return task


def oracle_answer(prompt: str, prime: int = 7) -> str:
    """Solve a prompt directly from its text (independent of the generator)."""
    if not (prompt.startswith(BOS) and prompt.endswith(SEP)):
        raise ValueError(f"malformed prompt {prompt!r}")
    kind = TaskKind.from_marker(prompt[1])
    body = prompt[2:-1]
    if kind is TaskKind.COPY:
        return body + EOS
    if kind is TaskKind.REVERSE:
        return body[::-1] + EOS
    if kind is TaskKind.MODULAR_SUM:
        digits = [int(ch) for ch in body if ch.isdigit()]
        return f"{sum(digits) % prime}{EOS}"
    pairs, query = body.split(QUERY)
    table: Dict[str, str] = {pairs[i]: pairs[i + 1] for i in range(0, len(pairs), 2)}
    return table[query] + EOS


def truncate_at_eos(tokens: Sequence[int], eos_id: int) -> List[int]:
    """Tokens up to and including the first EOS."""
    out: List[int] = []
    for token in tokens:
        out.append(int(token))
        if token == eos_id:
            break
    return out


def exact_match(generated: Sequence[int], answer: Sequence[int], eos_id: int) -> bool:
    """True when the generation, cut at its first EOS, equals the answer."""
    return truncate_at_eos(generated, eos_id) == list(answer)


def load_tasks(kinds: Sequence[str], sizes: TaskSizes, seed: int,
               tokenizer: Optional[CharTokenizer] = None) -> List[Task]:
    tokenizer = tokenizer or CharTokenizer()
    return [make_task(kind, sizes, seed, tokenizer) for kind in kinds]

"""Synthetic two-view tasks: a descriptor-to-pattern translation task and copy.

Token layout: 0=PAD, 1=BOS, 2=EOS, 3=MASK, 4=SEP, 5.. content.
A full sequence is ``BOS [inst] query SEP answer EOS``.

Marks are absolute positions in the full sequence:

* ``query_start``: the position right before the first query token (BOS, or
  the last instruction token once an instruction is prepended), so the state
  there carries no query content yet.
* ``query_end``: last query token.
* ``answer_end``: the EOS position.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .model import BOS, EOS, SEP

STAR, STARSTAR, NONE = "STAR", "STARSTAR", "NONE"
SUFFIX_CLASSES = (STAR, STARSTAR, NONE)

# pattern task vocabulary
_Q_OPS = {"CONTAINS": 5, "THEN": 6, "OPTIONAL": 7, "REPEATED": 8}
_Q_CLASSES = {
    "LETTER": 9, "DIGIT": 10, "VOWEL": 11, "CAPITAL": 12,
    "LOWER": 13, "DOG": 14, "TRUCK": 15, "ANYCHAR": 16,
}
# suffix phrasing: "followed by anything" vs the rarer "and then anything"
_Q_TAIL_STAR, _Q_TAIL_STARSTAR = 17, 18
_Q_AND = 19

_P_ATOMS = {
    "LETTER": 20, "DIGIT": 21, "VOWEL": 22, "CAPITAL": 23,
    "LOWER": 24, "DOG": 25, "TRUCK": 26, "ANYCHAR": 27,
}
_P_DOTSTAR, _P_QMARK, _P_PLUS, _P_LPAREN, _P_RPAREN = 28, 29, 30, 31, 32
PATTERN_VOCAB_USED = 33

# instruction tokens ("convert description to pattern")
INSTRUCTION = [33, 34, 35, 36]

COPY_ALPHABET_START = 40


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class Marks:
    query_start: int
    query_end: int
    answer_end: int


@dataclass(frozen=True)
class ExamplePair:
    query: tuple[int, ...]
    answer: tuple[int, ...]
    suffix_class: str = NONE
    instruction: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.answer:
            raise TaskError("answer must be nonempty")
        if self.suffix_class not in SUFFIX_CLASSES:
            raise TaskError(f"unknown suffix class {self.suffix_class!r}")

    @property
    def prompt(self) -> list[int]:
        return [BOS, *self.instruction, *self.query, SEP]

    @property
    def tokens(self) -> list[int]:
        return [*self.prompt, *self.answer, EOS]

    @property
    def marks(self) -> Marks:
        qs = len(self.instruction)
        qe = qs + len(self.query)
        return Marks(qs, qe, len(self.tokens) - 1)

    def loss_mask(self) -> np.ndarray:
        """Flags over next-token targets; True where the target is answer or EOS."""
        n = len(self.tokens)
        mask = np.zeros(n - 1, dtype=bool)
        mask[len(self.prompt) - 1:] = True
        return mask


@dataclass
class DatasetSplit:
    train: list[ExamplePair]
    test: list[ExamplePair]
    seed: int
    task: str
    meta: dict = field(default_factory=dict)


def _clause_pattern(op: str, cls: str) -> list[int]:
    atom = _P_ATOMS[cls]
    if op == "CONTAINS":
        return [_P_DOTSTAR, atom]
    if op == "THEN":
        return [atom]
    if op == "OPTIONAL":
        return [_P_LPAREN, atom, _P_RPAREN, _P_QMARK]
    if op == "REPEATED":
        return [_P_LPAREN, atom, _P_RPAREN, _P_PLUS]
    raise TaskError(op)


def pattern_for(clauses, suffix_class: str) -> tuple[list[int], list[int]]:
    """Deterministic grammar: (op, class) clauses -> (query ids, pattern ids)."""
    query, answer = [], []
    for i, (op, cls) in enumerate(clauses):
        if i:
            query.append(_Q_AND)
        query.extend([_Q_OPS[op], _Q_CLASSES[cls]])
        answer.extend(_clause_pattern(op, cls))
    if suffix_class == STAR:
        query.append(_Q_TAIL_STAR)
        answer.append(_P_DOTSTAR)
    elif suffix_class == STARSTAR:
        query.append(_Q_TAIL_STARSTAR)
        answer.extend([_P_DOTSTAR, _P_DOTSTAR])
    else:
        raise TaskError(f"pattern task needs STAR or STARSTAR, got {suffix_class}")
    return query, answer


def _all_clause_lists(min_clauses: int, max_clauses: int):
    units = list(itertools.product(_Q_OPS, _Q_CLASSES))
    for k in range(min_clauses, max_clauses + 1):
        yield from itertools.product(units, repeat=k)


def generate_pattern_task(
    seed: int,
    n_train: int = 800,
    n_test: int = 200,
    suffix_ratio: float = 8.0,
    min_clauses: int = 2,
    max_clauses: int = 3,
    max_seq_len: int = 96,
) -> DatasetSplit:
    """Descriptor-to-pattern translation with a skewed suffix preference.

    Clause lists are drawn without replacement from one shuffled enumeration,
    train first, so train and test queries never coincide.  Each example ends
    with STAR with probability ratio/(ratio+1), STARSTAR otherwise.
    """
    if n_train < 64:
        raise TaskError("n_train must be >= 64")
    if suffix_ratio < 1:
        raise TaskError("suffix_ratio must be >= 1")
    pool = list(_all_clause_lists(min_clauses, max_clauses))
    if n_train + n_test > len(pool):
        raise TaskError(f"requested {n_train + n_test} examples, grammar has {len(pool)} queries")
    longest = 1 + 3 * max_clauses + 1 + 4 * max_clauses + 2 + 1
    if longest > max_seq_len:
        raise TaskError(f"sequences of length {longest} exceed max_seq_len {max_seq_len}")

    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(pool), size=n_train + n_test, replace=False)
    p_star = suffix_ratio / (suffix_ratio + 1.0)
    star_draw = rng.random(n_train + n_test) < p_star
    pairs = []
    for idx, is_star in zip(chosen, star_draw):
        cls = STAR if is_star else STARSTAR
        q, a = pattern_for(pool[idx], cls)
        pairs.append(ExamplePair(tuple(q), tuple(a), cls))
    return DatasetSplit(
        pairs[:n_train], pairs[n_train:], seed, "pattern",
        {"suffix_ratio": suffix_ratio},
    )


def generate_copy_task(
    seed: int,
    n: int = 800,
    payload_len: int = 8,
    n_test: int = 200,
    alphabet_size: int = 16,
    disjoint_alphabets: bool = False,
    max_seq_len: int = 96,
    vocab_size: int = 64,
) -> DatasetSplit:
    """query = random payload, answer = the same payload.

    With ``disjoint_alphabets`` the test payloads use the upper half of the
    alphabet and train payloads the lower half.
    """
    if 2 * payload_len + 3 > max_seq_len:
        raise TaskError(f"payload_len {payload_len} does not fit max_seq_len {max_seq_len}")
    if COPY_ALPHABET_START + alphabet_size > vocab_size:
        raise TaskError("copy alphabet overflows the vocabulary")
    rng = np.random.default_rng(seed)
    alphabet = np.arange(COPY_ALPHABET_START, COPY_ALPHABET_START + alphabet_size)
    if disjoint_alphabets:
        half = alphabet_size // 2
        train_alpha, test_alpha = alphabet[:half], alphabet[half:]
    else:
        train_alpha = test_alpha = alphabet

    seen: set[tuple[int, ...]] = set()

    def draw(alpha, count):
        out = []
        while len(out) < count:
            payload = tuple(int(x) for x in rng.choice(alpha, size=payload_len))
            if payload in seen:
                continue
            seen.add(payload)
            out.append(ExamplePair(payload, payload, NONE))
        return out

    train = draw(train_alpha, n)
    test = draw(test_alpha, n_test)
    return DatasetSplit(train, test, seed, "copy", {"payload_len": payload_len})


def subset_fraction(split: DatasetSplit, n: int, seed: int, half_compute: bool = False):
    """Keep floor(len/n) training examples; return (subset, epoch_multiplier, lr_scale).

    Full compute runs n x epochs at the base learning rate; half compute runs
    n/2 x epochs at 2x the learning rate.
    """
    if n not in (1, 2, 4, 8, 16, 32):
        raise TaskError(f"fraction divisor must be a power of two in [1, 32], got {n}")
    size = len(split.train) // n
    if size < 1:
        raise TaskError(f"1/{n} of {len(split.train)} examples leaves nothing to train on")
    if n == 1:
        subset = list(split.train)
    else:
        rng = np.random.default_rng([seed, n])
        keep = np.sort(rng.choice(len(split.train), size=size, replace=False))
        subset = [split.train[i] for i in keep]
    out = DatasetSplit(subset, split.test, split.seed, split.task, dict(split.meta))
    if half_compute:
        return out, max(n / 2, 1), 2.0
    return out, n, 1.0


def prepend_instruction(pair: ExamplePair, inst_tokens, max_seq_len: int = 96) -> ExamplePair:
    """Insert instruction tokens after BOS; every mark shifts by their count."""
    inst = tuple(int(t) for t in inst_tokens)
    out = replace(pair, instruction=pair.instruction + inst)
    if len(out.tokens) > max_seq_len:
        raise TaskError(f"instruction pushes length to {len(out.tokens)} > {max_seq_len}")
    return out


# ---------------------------------------------------------------------------
# text dump: "query ids<TAB>answer ids<TAB>suffix_class" per line
# ---------------------------------------------------------------------------


def dump_examples(pairs, path) -> None:
    lines = [
        f"{' '.join(map(str, p.query))}\t{' '.join(map(str, p.answer))}\t{p.suffix_class}\n"
        for p in pairs
    ]
    Path(path).write_text("".join(lines))


def load_examples(path) -> list[ExamplePair]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise TaskError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            query = tuple(int(x) for x in parts[0].split())
            answer = tuple(int(x) for x in parts[1].split())
        except ValueError:
            raise TaskError(f"{path}:{lineno}: token ids must be integers") from None
        pairs.append(ExamplePair(query, answer, parts[2].strip()))
    return pairs


def dump_split(split: DatasetSplit, directory) -> tuple[Path, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    train, test = d / "train.txt", d / "test.txt"
    dump_examples(split.train, train)
    dump_examples(split.test, test)
    return train, test

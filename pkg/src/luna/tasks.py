"""Deterministic synthetic tasks: mini ListOps, majority vote, and copy.

Every example is a pure function of ``(spec, index)``. Train examples use
indices ``[0, n_train)`` and validation examples ``[n_train, n_train + n_val)``.

Token ids 0..3 are reserved (PAD, CLS, SEP, BOS); task symbols start at 4.
"""
from __future__ import annotations

import json
import re
import statistics
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

from .errors import ConfigError
from .numerics import rng as rngmod

PAD, CLS, SEP, BOS = 0, 1, 2, 3
N_SPECIAL = 4
KINDS = ("listops_mini", "majority", "copy")

OPS = ("MAX", "MIN", "MED", "SM")
LISTOPS_SYMBOLS = [f"[{op}" for op in OPS] + ["]"] + [str(i) for i in range(10)]
LISTOPS_IDS = {s: i + N_SPECIAL for i, s in enumerate(LISTOPS_SYMBOLS)}
LISTOPS_NAMES = {i: s for s, i in LISTOPS_IDS.items()}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "majority"
    min_len: int = 129
    max_len: int = 129
    depth: int = 3
    max_args: int = 4
    symbols: int = 8
    seed: int = 0
    n_train: int = 2000
    n_val: int = 500

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {KINDS}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")
        if self.kind == "listops_mini":
            if not 1 <= self.depth <= 4:
                raise ConfigError(f"listops_mini depth must be in [1, 4], got {self.depth}")
            if self.max_len > 256:
                raise ConfigError(f"listops_mini length must be <= 256, got {self.max_len}")
            if self.max_args < 2:
                raise ConfigError("listops_mini needs max_args >= 2")
        if self.kind == "majority" and (self.min_len % 2 == 0 or self.max_len % 2 == 0):
            raise ConfigError("majority lengths must be odd to avoid ties")

    @property
    def vocab(self) -> int:
        if self.kind == "listops_mini":
            return N_SPECIAL + len(LISTOPS_SYMBOLS)
        if self.kind == "majority":
            return N_SPECIAL + 2
        return N_SPECIAL + self.symbols

    @property
    def classes(self) -> int:
        return {"listops_mini": 10, "majority": 2}.get(self.kind, self.vocab)

    def split(self, name: str) -> range:
        if name == "train":
            return range(0, self.n_train)
        if name == "val":
            return range(self.n_train, self.n_train + self.n_val)
        raise ValueError(f"unknown split {name!r}")


# -- ListOps --------------------------------------------------------------------

def apply_op(op: str, args: list[int]) -> int:
    if op == "MAX":
        return max(args)
    if op == "MIN":
        return min(args)
    if op == "MED":
        return int(statistics.median_low(args))
    if op == "SM":
        return sum(args) % 10
    raise ValueError(f"unknown operator {op!r}")


def tokenize_listops(text: str) -> list[str]:
    return re.findall(r"\[[A-Z]+|\]|\d", text)


def evaluate_listops(tokens) -> int:
    """Evaluate a bracketed expression given as a string or symbol list."""
    if isinstance(tokens, str):
        tokens = tokenize_listops(tokens)
    pos = 0

    def expr() -> int:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        if tok.isdigit():
            return int(tok)
        if not tok.startswith("["):
            raise ValueError(f"unexpected token {tok!r}")
        args = []
        while tokens[pos] != "]":
            args.append(expr())
        pos += 1
        return apply_op(tok[1:], args)

    value = expr()
    if pos != len(tokens):
        raise ValueError("trailing tokens after expression")
    return value


def _gen_expr(rng: np.random.Generator, depth: int, max_args: int) -> list[str]:
    if depth == 0:
        return [str(int(rng.integers(10)))]
    op = OPS[int(rng.integers(len(OPS)))]
    out = [f"[{op}"]
    k = int(rng.integers(2, max_args + 1))
    deep = int(rng.integers(k))  # one argument carries the full remaining depth
    for i in range(k):
        if i == deep:
            sub = depth - 1
        else:
            sub = int(rng.integers(0, depth)) if rng.random() < 0.3 else 0
        out.extend(_gen_expr(rng, sub, max_args))
    out.append("]")
    return out


def gen_listops_mini(spec: TaskSpec, index: int) -> tuple[list[int], int]:
    if spec.kind != "listops_mini":
        raise ConfigError(f"spec is for {spec.kind!r}")
    rng = rngmod.stream(spec.seed, "listops_mini", index)
    while True:
        depth = int(rng.integers(1, spec.depth + 1))
        syms = _gen_expr(rng, depth, spec.max_args)
        if spec.min_len <= len(syms) <= spec.max_len:
            break
    return [LISTOPS_IDS[s] for s in syms], evaluate_listops(syms)


def listops_text(ids: Iterable[int]) -> str:
    return " ".join(LISTOPS_NAMES[i] for i in ids).replace(" ]", "]")


# -- majority -------------------------------------------------------------------

def gen_majority(spec: TaskSpec, index: int) -> tuple[list[int], int]:
    if spec.kind != "majority":
        raise ConfigError(f"spec is for {spec.kind!r}")
    rng = rngmod.stream(spec.seed, "majority", index)
    n = int(rng.choice(np.arange(spec.min_len, spec.max_len + 1, 2)))
    # balanced labels, with counts drawn so the margin varies
    label = int(rng.integers(2))
    ones = int(rng.integers(n // 2 + 1, n + 1)) if label else int(rng.integers(0, n // 2 + 1))
    bits = np.zeros(n, dtype=np.int64)
    bits[rng.permutation(n)[:ones]] = 1
    return [int(b) + N_SPECIAL for b in bits], label


def majority_label(ids: Iterable[int]) -> int:
    bits = [i - N_SPECIAL for i in ids]
    return int(2 * sum(bits) > len(bits))


# -- copy -------------------------------------------------------------------------

def gen_copy(spec: TaskSpec, index: int) -> tuple[list[int], list[int]]:
    if spec.kind != "copy":
        raise ConfigError(f"spec is for {spec.kind!r}")
    rng = rngmod.stream(spec.seed, "copy", index)
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    src = [int(s) + N_SPECIAL for s in rng.integers(spec.symbols, size=n)]
    return src, list(src)


def copy_lm_sequence(src: list[int]) -> tuple[list[int], list[int]]:
    """LM view: inputs ``src SEP src[:-1]`` predict ``src`` after the separator."""
    seq = src + [SEP] + src
    inputs, targets = seq[:-1], seq[1:]
    ignore = len(src)  # positions before the separator's prediction are not scored
    return inputs, [-100] * ignore + targets[ignore:]


GENERATORS = {"listops_mini": gen_listops_mini, "majority": gen_majority, "copy": gen_copy}


def generate(spec: TaskSpec, index: int):
    return GENERATORS[spec.kind](spec, index)


def dataset(spec: TaskSpec, split: str) -> list:
    return [generate(spec, i) for i in spec.split(split)]


def dump_jsonl(spec: TaskSpec, split: str, path) -> None:
    with open(path, "w") as f:
        for tokens, label in dataset(spec, split):
            f.write(json.dumps({"tokens": tokens, "label": label}) + "\n")


def spec_dict(spec: TaskSpec) -> dict:
    return asdict(spec)

"""Context-free command grammar: loading, sampling, parsing and exact enumeration."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

EPS = "EPS"
CATEGORIES = ("object", "spatial", "grammatical")


class GrammarError(ValueError):
    pass


@dataclass
class Vocabulary:
    words: list[str]
    category: dict[str, str]

    def __post_init__(self):
        self.index = {w: i for i, w in enumerate(self.words)}
        self.objects = [w for w in self.words if self.category[w] == "object"]
        self.object_index = {w: i for i, w in enumerate(self.objects)}

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def ids(self, words: Sequence[str]) -> list[int]:
        out = []
        for w in words:
            if w not in self.index:
                raise KeyError(f"word {w!r} not in vocabulary")
            out.append(self.index[w])
        return out

    def words_of(self, ids: Sequence[int]) -> list[str]:
        return [self.words[i] for i in ids]

    def of_category(self, cat: str) -> list[str]:
        return [w for w in self.words if self.category[w] == cat]

    @classmethod
    def parse(cls, text: str) -> "Vocabulary":
        words, cats = [], {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2 or parts[1] not in CATEGORIES:
                raise GrammarError(f"vocabulary line {n}: expected '<word> <category>', got {raw!r}")
            if parts[0] in cats:
                raise GrammarError(f"vocabulary line {n}: duplicate word {parts[0]!r}")
            words.append(parts[0])
            cats[parts[0]] = parts[1]
        return cls(words, cats)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocabulary":
        if path is None:
            return cls.parse(resources.files("gftnav").joinpath("data/vocab.txt").read_text())
        return cls.parse(Path(path).read_text())


@dataclass
class Grammar:
    """Productions keyed by nonterminal; each alternative is a tuple of symbols.

    A symbol is a nonterminal if it has productions, otherwise a terminal word.
    """

    rules: dict[str, list[tuple[str, ...]]]
    start: str = "S"
    vocab: Vocabulary | None = None
    _acyclic: bool = field(default=False, init=False, repr=False)

    def is_nonterminal(self, sym: str) -> bool:
        return sym in self.rules

    def terminals(self) -> set[str]:
        return {s for alts in self.rules.values() for alt in alts for s in alt if s not in self.rules}

    @classmethod
    def parse(cls, text: str, vocab: Vocabulary | None = None, start: str = "S") -> "Grammar":
        rules: dict[str, list[tuple[str, ...]]] = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "->" not in line:
                raise GrammarError(f"grammar line {n}: missing '->' in {raw!r}")
            lhs, rhs = (p.strip() for p in line.split("->", 1))
            if not lhs or " " in lhs:
                raise GrammarError(f"grammar line {n}: bad nonterminal {lhs!r}")
            alts = []
            for alt in rhs.split("|"):
                syms = tuple(alt.split())
                if not syms:
                    raise GrammarError(f"grammar line {n}: empty alternative (write {EPS})")
                alts.append(() if syms == (EPS,) else syms)
            rules.setdefault(lhs, []).extend(alts)
        if vocab is not None:
            for lhs, alts in rules.items():
                expanded = []
                for alt in alts:
                    if len(alt) == 1 and alt[0].startswith("@"):
                        cat = alt[0][1:]
                        if cat not in CATEGORIES:
                            raise GrammarError(f"unknown category {alt[0]!r} in rule {lhs}")
                        expanded.extend((w,) for w in vocab.of_category(cat))
                    else:
                        expanded.append(alt)
                rules[lhs] = expanded
        g = cls(rules, start, vocab)
        if start not in rules:
            raise GrammarError(f"start symbol {start!r} has no productions")
        if vocab is not None:
            missing = sorted(t for t in g.terminals() if t not in vocab)
            if missing:
                raise GrammarError(f"terminals not in vocabulary: {missing}")
        return g

    @classmethod
    def load(cls, path: str | Path | None = None, vocab: Vocabulary | None = None) -> "Grammar":
        vocab = vocab or Vocabulary.load()
        if path is None:
            text = resources.files("gftnav").joinpath("data/grammar.txt").read_text()
        else:
            text = Path(path).read_text()
        return cls.parse(text, vocab)

    # ------------------------------------------------------------ structure

    def check_acyclic(self) -> None:
        """Reject grammars with recursive productions (they generate infinitely many sentences)."""
        if self._acyclic:
            return
        state: dict[str, int] = {}

        def visit(sym, path):
            mark = state.get(sym, 0)
            if mark == 1:
                cycle = path[path.index(sym):] + [sym]
                raise GrammarError("recursive grammar: " + " -> ".join(cycle))
            if mark == 2:
                return
            state[sym] = 1
            for alt in self.rules[sym]:
                for s in alt:
                    if s in self.rules:
                        visit(s, path + [sym])
            state[sym] = 2

        for sym in self.rules:
            visit(sym, [])
        self._acyclic = True

    def derivation_count(self, sym: str | None = None) -> int:
        """Number of derivation trees: the closed-form product/sum over template slots."""
        self.check_acyclic()
        memo: dict[str, int] = {}

        def count(s):
            if s not in self.rules:
                return 1
            if s not in memo:
                total = 0
                for alt in self.rules[s]:
                    prod = 1
                    for x in alt:
                        prod *= count(x)
                    total += prod
                memo[s] = total
            return memo[s]

        return count(sym or self.start)

    def length_range(self, sym: str | None = None) -> tuple[int, int]:
        self.check_acyclic()

        @lru_cache(maxsize=None)
        def rng(s):
            if s not in self.rules:
                return 1, 1
            lo, hi = None, 0
            for alt in self.rules[s]:
                parts = [rng(x) for x in alt]
                a, b = sum(p[0] for p in parts), sum(p[1] for p in parts)
                lo = a if lo is None else min(lo, a)
                hi = max(hi, b)
            return lo or 0, hi

        return rng(sym or self.start)

    # ------------------------------------------------------------ enumeration

    def sentences(self, sym: str | None = None) -> set[tuple[str, ...]]:
        """Every distinct token sequence derivable from ``sym``."""
        self.check_acyclic()
        memo: dict[str, set] = {}

        def expand(s):
            if s not in self.rules:
                return {(s,)}
            if s not in memo:
                out = set()
                for alt in self.rules[s]:
                    partial = {()}
                    for x in alt:
                        partial = {p + q for p in partial for q in expand(x)}
                    out |= partial
                memo[s] = out
            return memo[s]

        return expand(sym or self.start)

    def iter_sentences(self, sym: str | None = None) -> Iterator[tuple[str, ...]]:
        yield from sorted(self.sentences(sym))

    # ------------------------------------------------------------ sampling

    def sample(self, rng: np.random.Generator, sym: str | None = None,
               fill: dict[str, list[str]] | None = None) -> list[tuple[str, str]]:
        """Random derivation, returned as (parent nonterminal, word) leaves.

        ``fill`` maps a nonterminal to the words its successive occurrences
        must produce (used to slot referents into OBJ positions).
        """
        queues = {k: list(v) for k, v in (fill or {}).items()}
        leaves: list[tuple[str, str]] = []

        def walk(s):
            if s in queues:
                if not queues[s]:
                    raise GrammarError(f"template needs more {s} fillers than supplied")
                leaves.append((s, queues[s].pop(0)))
                return
            alts = self.rules[s]
            for x in alts[int(rng.integers(len(alts)))]:
                if x in self.rules:
                    walk(x)
                else:
                    leaves.append((s, x))

        walk(sym or self.start)
        return leaves

    # ------------------------------------------------------------ parsing

    def parses(self, tokens: Sequence[str], sym: str | None = None) -> list[tuple]:
        """All parses of ``tokens`` from ``sym``.

        Each parse is returned as a tuple of (parent nonterminal, word) leaves
        plus the chain of nonterminals expanded directly under the start
        symbol, which is how callers recover the task type.
        """
        self.check_acyclic()
        tokens = tuple(tokens)
        memo: dict[tuple[str, int], list] = {}

        def match(s, pos):
            key = (s, pos)
            if key in memo:
                return memo[key]
            results = []
            for alt in self.rules[s]:
                results.extend(match_seq(s, alt, 0, pos))
            memo[key] = results
            return results

        def match_seq(parent, alt, k, pos):
            if k == len(alt):
                return [(pos, ())]
            x = alt[k]
            heads = []
            if x in self.rules:
                heads = [(end, leaves) for end, leaves in match(x, pos)]
            elif pos < len(tokens) and tokens[pos] == x:
                heads = [(pos + 1, ((parent, x),))]
            out = []
            for end, leaves in heads:
                for end2, rest in match_seq(parent, alt, k + 1, end):
                    out.append((end2, leaves + rest))
            return out

        start = sym or self.start
        found = []
        for alt in self.rules[start]:
            for end, leaves in match_seq(start, alt, 0, 0):
                if end == len(tokens):
                    found.append((alt, leaves))
        return found

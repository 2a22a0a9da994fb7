import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gftnav.grammar import Grammar, GrammarError, Vocabulary

TOY = """
S -> A B | C
A -> x | y | EPS
B -> z w | w
C -> x w z
"""


def brute_force(rules, sym):
    """All derivations as a list (duplicates kept), by plain recursion."""
    if sym not in rules:
        return [(sym,)]
    out = []
    for alt in rules[sym]:
        for combo in itertools.product(*[brute_force(rules, x) for x in alt]):
            out.append(tuple(w for part in combo for w in part))
    return out


def test_toy_grammar_counts():
    g = Grammar.parse(TOY)
    derivs = brute_force(g.rules, "S")
    assert g.derivation_count() == len(derivs) == 7
    assert g.sentences() == set(derivs)
    assert g.length_range() == (1, 3)
    assert ("w",) in g.sentences()


def test_ambiguous_grammar_counts_differ():
    g = Grammar.parse("S -> A | B\nA -> a\nB -> a")
    assert g.derivation_count() == 2
    assert g.sentences() == {("a",)}


@st.composite
def toy_grammars(draw):
    """Random acyclic grammars: nonterminal k only refers to nonterminals > k."""
    n = draw(st.integers(1, 4))
    words = ["a", "b", "c", "d"]
    rules = {}
    for k in range(n):
        alts = []
        for _ in range(draw(st.integers(1, 3))):
            length = draw(st.integers(0, 3))
            syms = []
            for _ in range(length):
                if k + 1 < n and draw(st.booleans()):
                    syms.append(f"N{draw(st.integers(k + 1, n - 1))}")
                else:
                    syms.append(draw(st.sampled_from(words)))
            alts.append(" ".join(syms) or "EPS")
        rules[f"N{k}"] = alts
    text = "\n".join(f"{k} -> {' | '.join(v)}" for k, v in rules.items())
    return Grammar.parse(text, start="N0")


@settings(max_examples=80, deadline=None)
@given(toy_grammars())
def test_enumeration_matches_brute_force(g):
    derivs = brute_force(g.rules, "N0")
    assert len(derivs) <= 10 ** 5
    assert g.derivation_count() == len(derivs)
    assert g.sentences() == set(derivs)
    lo, hi = g.length_range()
    assert lo == min(map(len, derivs)) and hi == max(map(len, derivs))


def test_recursion_rejected():
    g = Grammar.parse("S -> a S | b")
    with pytest.raises(GrammarError):
        g.derivation_count()


def test_parse_errors():
    with pytest.raises(GrammarError):
        Grammar.parse("S a b")
    with pytest.raises(GrammarError):
        Grammar.parse("S -> a || b")
    with pytest.raises(GrammarError):
        Grammar.parse("T -> a")  # no start symbol
    vocab = Vocabulary.parse("a grammatical\nb object")
    with pytest.raises(GrammarError):
        Grammar.parse("S -> a zebra", vocab)
    with pytest.raises(GrammarError):
        Grammar.parse("S -> @colour", vocab)


def test_vocabulary_parse_and_lookup():
    v = Vocabulary.parse("# header\napple object\nleft spatial\ngo grammatical\n")
    assert len(v) == 3 and v.objects == ["apple"]
    assert v.ids(["go", "apple"]) == [2, 0]
    assert v.words_of([1]) == ["left"]
    with pytest.raises(KeyError):
        v.ids(["pear"])
    with pytest.raises(GrammarError):
        Vocabulary.parse("apple fruit")
    with pytest.raises(GrammarError):
        Vocabulary.parse("apple object\napple object")


# ---------------------------------------------------------------- bundled grammar

@pytest.fixture(scope="module")
def bundled():
    return Grammar.load()


def test_bundled_vocabulary_structure(bundled):
    v = bundled.vocab
    assert len(v.of_category("object")) == 16
    assert len(v.of_category("spatial")) == 8
    assert len(v) == 64


def test_bundled_grammar_is_unambiguous(bundled):
    n = bundled.derivation_count()
    assert n == 162240
    assert len(bundled.sentences()) == n
    assert bundled.length_range() == (3, 15)


def test_bundled_per_task_counts(bundled):
    counts = {t: len(bundled.sentences(t)) for t in ("NAV", "NAV_NR", "NAV_BW", "NAV_AVOID", "NAV_DIR")}
    assert counts == {"NAV": 1696, "NAV_NR": 11808, "NAV_BW": 119808, "NAV_AVOID": 1376, "NAV_DIR": 27552}
    assert sum(counts.values()) == bundled.derivation_count()


def test_samples_have_legal_length_and_parse(bundled):
    rng = np.random.default_rng(0)
    for _ in range(300):
        leaves = bundled.sample(rng)
        words = [w for _, w in leaves]
        assert 1 <= len(words) <= 15
        parses = bundled.parses(words)
        assert len(parses) == 1
        assert parses[0][1] == tuple(leaves)


def test_sample_fill_slots_objects(bundled):
    rng = np.random.default_rng(1)
    leaves = bundled.sample(rng, "NAV_BW", fill={"OBJ": ["cat", "dog"]})
    objs = [w for p, w in leaves if p == "OBJ"]
    assert objs == ["cat", "dog"]
    with pytest.raises(GrammarError):
        bundled.sample(rng, "NAV_BW", fill={"OBJ": ["cat"]})


def test_non_sentences_do_not_parse(bundled):
    assert bundled.parses("go to the the cat .".split()) == []
    assert bundled.parses([]) == []

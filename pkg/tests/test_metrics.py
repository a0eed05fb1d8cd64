import itertools
import random
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sspo.metrics import (
    UndefinedStatistic,
    fleiss_kappa,
    quadratic_weighted_kappa,
    set_metrics,
    spearman_rho,
    ssv_metric,
)
from sspo.rewards import structure_reward
from sspo.synth import TaskSpec, teacher_trace
from sspo.trace import parse_trace

F = frozenset


def test_hand_counted_micro():
    m = set_metrics([(F("A"), F("A")), (F("AB"), F("BC"))])
    assert m.micro_precision == m.micro_recall == m.micro_f1 == 2 / 3
    assert (m.per_label["A"].tp, m.per_label["C"].fp, m.per_label["A"].fn) == (1, 1, 1)


def test_perfect_and_empty():
    pairs = [(F("A"), F("A")), (F("BC"), F("BC"))]
    assert set_metrics(pairs).summary() == dict.fromkeys(set_metrics(pairs).summary(), 1.0)
    empty = set_metrics([(F("A"), F()), (F("B"), F())])
    assert empty.micro_precision == 0.0 and empty.micro_recall == 0.0 and empty.micro_f1 == 0.0
    with pytest.raises(ValueError):
        set_metrics([])


def test_macro_over_truth_labels():
    # C appears only as a false positive, so it is not averaged into macro
    m = set_metrics([(F("A"), F("AC")), (F("B"), F("B"))])
    assert m.macro_f1 == 1.0
    assert m.micro_f1 == 0.8


sets = st.frozensets(st.sampled_from("ABCDE"))


@given(st.lists(st.tuples(sets, sets), min_size=1, max_size=12), st.randoms())
def test_metric_ranges_and_order_invariance(pairs, rnd):
    m = set_metrics(pairs)
    for v in m.summary().values():
        assert 0.0 <= v <= 1.0
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert set_metrics(shuffled).micro_f1 == m.micro_f1
    assert set_metrics(shuffled).macro_f1 == pytest.approx(m.macro_f1, abs=1e-15)


def test_ssv():
    spec = TaskSpec()
    good = [parse_trace(teacher_trace(["MI"], spec), spec.label_vocab)] * 2
    bad = [parse_trace("<think>", spec.label_vocab)] * 2
    assert ssv_metric(good) == 100.0
    assert ssv_metric(good + bad) == 50.0
    mixed = good + bad[:1]
    assert ssv_metric(mixed) == pytest.approx(100 * np.mean([structure_reward(t) == 1.0 for t in mixed]))
    with pytest.raises(ValueError):
        ssv_metric([])


def test_fleiss_hand_fixture():
    # counts per subject [cat0, cat1] with 3 raters: [3,0] [2,1] [0,3] [1,2] [3,0]
    ratings = [[0, 0, 0], [0, 0, 1], [1, 1, 1], [0, 1, 1], [0, 0, 0]]
    # P_bar = 11/15, P_e = 13/25 -> kappa = 4/9
    assert fleiss_kappa(ratings) == pytest.approx(4 / 9, abs=1e-9)


def test_fleiss_identity_and_degenerate():
    rng = np.random.default_rng(0)
    cats = rng.integers(0, 4, size=30)
    assert fleiss_kappa(np.repeat(cats[:, None], 5, axis=1)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(UndefinedStatistic):
        fleiss_kappa([[1, 1], [1, 1]])


def test_fleiss_uniform_random_near_zero():
    rng = np.random.default_rng(1)
    assert abs(fleiss_kappa(rng.integers(0, 5, size=(10_000, 4)))) < 0.02


def _fleiss_oracle(ratings):
    ratings = [list(r) for r in ratings]
    n = len(ratings[0])
    cats = sorted({c for r in ratings for c in r})
    p_i = [Fraction(sum(r.count(c) ** 2 for c in cats) - n, n * (n - 1)) for r in ratings]
    p_bar = sum(p_i) / len(ratings)
    p_e = sum(Fraction(sum(r.count(c) for r in ratings), n * len(ratings)) ** 2 for c in cats)
    return float((p_bar - p_e) / (1 - p_e))


def _qwk_oracle(a, b, lo, hi):
    k = hi - lo + 1
    obs = [[0] * k for _ in range(k)]
    for x, y in zip(a, b):
        obs[x - lo][y - lo] += 1
    rows = [sum(r) for r in obs]
    cols = [sum(obs[i][j] for i in range(k)) for j in range(k)]
    num = den = Fraction(0)
    for i, j in itertools.product(range(k), repeat=2):
        w = Fraction((i - j) ** 2, (k - 1) ** 2)
        num += w * obs[i][j]
        den += w * Fraction(rows[i] * cols[j], len(a))
    return float(1 - num / den)


def _avg_ranks(x):
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [Fraction(0)] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = Fraction(i + j + 2, 2)
        i = j + 1
    return ranks


def _spearman_oracle(a, b):
    ra, rb = _avg_ranks(a), _avg_ranks(b)
    ma, mb = sum(ra) / len(ra), sum(rb) / len(rb)
    cov = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    va = sum((x - ma) ** 2 for x in ra)
    vb = sum((y - mb) ** 2 for y in rb)
    return float(cov) / float(va * vb) ** 0.5


@pytest.mark.parametrize("seed", range(5))
def test_agreement_against_direct_oracles(seed):
    rnd = random.Random(seed)
    ratings = [[rnd.randint(0, 3) for _ in range(4)] for _ in range(25)]
    assert fleiss_kappa(ratings) == pytest.approx(_fleiss_oracle(ratings), abs=1e-9)
    a = [rnd.randint(1, 5) for _ in range(40)]
    b = [rnd.randint(1, 5) for _ in range(40)]
    assert quadratic_weighted_kappa(a, b) == pytest.approx(_qwk_oracle(a, b, min(a + b), max(a + b)), abs=1e-9)
    x = [rnd.randint(0, 6) for _ in range(30)]
    y = [rnd.randint(0, 6) for _ in range(30)]
    assert spearman_rho(x, y) == pytest.approx(_spearman_oracle(x, y), abs=1e-9)


@pytest.mark.parametrize("seed", range(3))
def test_identity_ratings_give_one(seed):
    rnd = random.Random(seed)
    a = [rnd.randint(0, 4) for _ in range(20)]
    assert quadratic_weighted_kappa(a, a) == 1.0
    assert spearman_rho(a, a) == pytest.approx(1.0, abs=1e-12)
    assert fleiss_kappa([[v, v, v] for v in a]) == pytest.approx(1.0, abs=1e-12)


def test_qwk_perfect_disagreement():
    assert quadratic_weighted_kappa([0, 1, 0, 1], [1, 0, 1, 0]) == -1.0
    with pytest.raises(ValueError):
        quadratic_weighted_kappa([1, 2], [1])


def test_spearman_cases():
    a = [0.3, 1.2, 5.0, 7.7, 9.1]
    assert spearman_rho(a, np.exp(a)) == pytest.approx(1.0, abs=1e-12)
    assert spearman_rho(a, [-v for v in a]) == pytest.approx(-1.0, abs=1e-12)
    # average ranks [1, 2.5, 2.5, 4] vs [1, 2, 3.5, 3.5] -> 3.75 / 4.5
    assert spearman_rho([1, 2, 2, 3], [10, 20, 30, 30]) == pytest.approx(5 / 6, abs=1e-9)
    with pytest.raises(UndefinedStatistic):
        spearman_rho([1, 1, 1], [1, 2, 3])

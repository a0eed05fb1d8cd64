import dataclasses

import numpy as np
import pytest

from sspo.metrics import set_metrics
from sspo.rewards import dice_reward, structure_reward
from sspo.synth import (
    NORM,
    SynthRecord,
    TaskSpec,
    bayes_oracle,
    generate_dataset,
    make_record,
    read_jsonl,
    write_jsonl,
)
from sspo.trace import make_label_set, parse_trace

SPEC = TaskSpec()


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SPEC)


def test_noiseless_single_label_equals_template():
    spec = TaskSpec(noise_sigma=0.0, max_labels=1, n_train=200, n_val=0, n_test=0)
    recs = [r for r in generate_dataset(spec)["train"] if r.truth == {"MI"}]
    assert recs
    for r in recs:
        assert np.array_equal(r.signal, spec.waveform("MI"))


def test_teacher_traces_are_perfect(data):
    for split in data.values():
        for r in split:
            t = parse_trace(r.teacher_trace, SPEC.label_vocab)
            assert t.tags_valid
            assert structure_reward(t) == 1.0
            assert dice_reward(r.truth, t.answer_set) == 1.0


def test_norm_iff_no_disease(data):
    for r in data["train"]:
        assert (NORM in r.truth) == (r.truth == {NORM})
        assert 1 <= len(r.truth) <= 3


def test_splits_disjoint_and_sized(data):
    assert [len(data[k]) for k in ("train", "val", "test")] == [2000, 200, 200]
    ids = [r.id for s in data.values() for r in s]
    assert len(ids) == len(set(ids))


def test_regeneration_bit_identical(data):
    again = generate_dataset(SPEC)
    for split in data:
        for a, b in zip(data[split], again[split]):
            assert a.signal.tobytes() == b.signal.tobytes()
            assert a.truth == b.truth and a.teacher_trace == b.teacher_trace


def test_sharded_generation_matches():
    spec = dataclasses.replace(SPEC, n_train=20, n_val=5, n_test=5)
    full = generate_dataset(spec)
    shard = [make_record(spec, i, f"val-{i - 20:05d}") for i in range(20, 25)]
    assert [r.signal.tobytes() for r in shard] == [r.signal.tobytes() for r in full["val"]]


def test_label_marginals_within_three_sigma():
    spec = TaskSpec(n_train=10_000, n_val=0, n_test=0, noise_sigma=0.0, seed=7)
    recs = generate_dataset(spec)["train"]
    n = len(recs)
    expected = spec.label_marginals()
    for label, p in expected.items():
        count = sum(label in r.truth for r in recs)
        assert abs(count - n * p) <= 3 * np.sqrt(n * p * (1 - p)), label


def test_marginals_oracle_by_hand():
    # NORM only when all four diseases are off; rejection drops the all-four-on draw
    p = SPEC.activation_prob
    kept = 1 - p**4
    assert SPEC.label_marginals()[NORM] == pytest.approx((1 - p) ** 4 / kept, abs=1e-15)


def test_infeasible_spec_rejected():
    with pytest.raises(ValueError):
        generate_dataset(TaskSpec(min_labels=9, max_labels=9))
    with pytest.raises(ValueError):
        generate_dataset(TaskSpec(labels=("NORM", "XYZ")))


def test_oracle_noiseless_and_zero():
    spec = TaskSpec(noise_sigma=0.0, n_train=300, n_val=0, n_test=0)
    for r in generate_dataset(spec)["train"]:
        assert bayes_oracle(r.signal, spec) == r.truth
    assert bayes_oracle(np.zeros((256, 4)), spec) == {NORM}


def test_oracle_ceiling_at_default_noise(data):
    m = set_metrics([(r.truth, bayes_oracle(r.signal, SPEC)) for r in data["test"]])
    assert m.micro_f1 >= 0.95


def _majority_f1(records):
    counts = {}
    for r in records:
        for l in r.truth:
            counts[l] = counts.get(l, 0) + 1
    top = make_label_set([max(counts, key=counts.get)])
    return set_metrics([(r.truth, top) for r in records]).micro_f1


@pytest.mark.parametrize("sigma", [0.0, 0.4, 0.8, 1.2, 1.6])
def test_task_learnable_at_noise(sigma):
    spec = TaskSpec(noise_sigma=sigma, n_train=400, n_val=0, n_test=0, seed=3)
    recs = generate_dataset(spec)["train"]
    oracle = set_metrics([(r.truth, bayes_oracle(r.signal, spec)) for r in recs]).micro_f1
    assert oracle > _majority_f1(recs)


def test_jsonl_round_trip(tmp_path, data):
    path = tmp_path / "x.jsonl"
    write_jsonl(path, data["val"][:5])
    back = read_jsonl(path)
    for a, b in zip(data["val"][:5], back):
        assert a.id == b.id and a.truth == b.truth and a.teacher_trace == b.teacher_trace
        assert a.signal.tobytes() == b.signal.tobytes()
    assert isinstance(back[0], SynthRecord)


def test_task_spec_json_round_trip():
    assert TaskSpec.from_json(SPEC.to_json()) == SPEC

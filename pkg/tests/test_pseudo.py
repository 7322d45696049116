import math

import numpy as np
import pytest

from dpg.data import DomainKind, EmbeddingRecord, EmbeddingSet, Label
from dpg.errors import ConfigError
from dpg.model import init_model
from dpg.numerics import RngStream
from dpg.pseudo import (BankEntry, CurriculumSchedule, FeatureBank, bank_label,
                        build_bank, generate_pseudo_labels, threshold_at)
from tests.conftest import randomized_state


def _state_with_confidences(dim=4):
    """Identity adapter; head logit_fake = 8 * x[0], so conf is set by x[0]."""
    state = init_model(dim, RngStream.from_seed(0, "model-init"))
    state.head_w = np.zeros((2, dim))
    state.head_w[1, 0] = 8.0
    return state


def _sample_for_confidence(conf, fake_side, dim=4):
    """Unit vector whose head confidence is exactly conf (on the given side)."""
    logit = math.log(conf / (1.0 - conf)) / 8.0
    x0 = logit if fake_side else -logit
    rest = math.sqrt(1.0 - x0 * x0)
    v = np.zeros(dim)
    v[0], v[1] = x0, rest
    return v


def _target_set(samples, dim=4):
    records = [EmbeddingRecord(id=f"t{i:03d}", video_id=f"t{i:03d}",
                               domain_kind=DomainKind.TARGET_UNLABELED,
                               dataset_tag="d", label=Label.UNKNOWN, feature=np.asarray(v))
               for i, v in enumerate(samples)]
    return EmbeddingSet(dim, records)


def test_build_bank_retains_at_threshold():
    state = _state_with_confidences()
    tset = _target_set([_sample_for_confidence(c, fake_side=True) for c in (0.95, 0.91, 0.89)])
    bank = build_bank(state, tset, 0.9)
    assert [e.sample_id for e in bank.fake_entries] == ["t000", "t001"]
    assert bank.real_entries == []
    assert all(e.confidence >= 0.9 for e in bank.fake_entries)


def test_build_bank_all_below_threshold():
    state = _state_with_confidences()
    tset = _target_set([_sample_for_confidence(0.6, fake_side=True)])
    bank = build_bank(state, tset, 0.9)
    assert bank.real_entries == [] and bank.fake_entries == []


def test_build_bank_partition_no_overlap(tiny_synth):
    _, _, target = tiny_synth
    state = randomized_state(target.dim, seed=1)
    bank = build_bank(state, target, 0.5)
    real_ids = {e.sample_id for e in bank.real_entries}
    fake_ids = {e.sample_id for e in bank.fake_entries}
    assert not (real_ids & fake_ids)
    assert len(real_ids) + len(fake_ids) == len(target)  # every conf >= 0.5


def _bank_with_fake_at(distance, dim=4):
    z = np.zeros(dim)
    z[0] = 1.0
    entry_vec = z.copy()
    entry_vec[0] -= distance  # L2 distance is exactly `distance` from z
    return z, FeatureBank(real_entries=[], fake_entries=[BankEntry("f0", entry_vec, 0.95)],
                          built_at_epoch=0, tf_threshold=0.9)


def test_bank_label_distance_rule():
    z, bank = _bank_with_fake_at(0.6)
    assert bank_label(z, bank).label == Label.REAL
    z, bank = _bank_with_fake_at(0.3)
    assert bank_label(z, bank).label == Label.FAKE
    z, bank = _bank_with_fake_at(0.0)
    vote = bank_label(z, bank)
    assert vote.d_fake == 0.0 and vote.label == Label.FAKE


def test_bank_label_abstains_without_fake_bank():
    bank = FeatureBank(real_entries=[BankEntry("r0", np.ones(4) / 2.0, 0.95)],
                       fake_entries=[], built_at_epoch=0, tf_threshold=0.9)
    vote = bank_label(np.ones(4) / 2.0, bank)
    assert vote.abstained and vote.label is None and vote.d_real is not None


def test_bank_label_nearest_rule():
    real = BankEntry("r0", np.array([1.0, 0.0, 0.0, 0.0]), 0.95)
    fake = BankEntry("f0", np.array([0.0, 1.0, 0.0, 0.0]), 0.95)
    bank = FeatureBank(real_entries=[real], fake_entries=[fake],
                       built_at_epoch=0, tf_threshold=0.9)
    near_real = np.array([0.9, 0.1, 0.0, 0.0])
    assert bank_label(near_real, bank, rule="nearest").label == Label.REAL
    near_fake = np.array([0.1, 0.9, 0.0, 0.0])
    assert bank_label(near_fake, bank, rule="nearest").label == Label.FAKE
    tie = np.array([0.5, 0.5, 0.0, 0.0])
    assert bank_label(tie, bank, rule="nearest").label == Label.FAKE
    one_sided = FeatureBank(real_entries=[], fake_entries=[fake],
                            built_at_epoch=0, tf_threshold=0.9)
    assert bank_label(near_fake, one_sided, rule="nearest").abstained


def test_bank_label_rejects_unknown_rule():
    _, bank = _bank_with_fake_at(0.3)
    with pytest.raises(ConfigError):
        bank_label(np.ones(4), bank, rule="midpoint")


def test_threshold_endpoints_exact():
    schedule = CurriculumSchedule(start=0.85, end=0.70, total_epochs=9)
    assert threshold_at(schedule, 0) == 0.85
    assert threshold_at(schedule, 9) == 0.70


def test_threshold_midpoint():
    schedule = CurriculumSchedule(start=0.85, end=0.70, total_epochs=10)
    assert abs(threshold_at(schedule, 5) - 0.775) <= 1e-12


def test_threshold_non_increasing():
    schedule = CurriculumSchedule(start=0.85, end=0.70, total_epochs=137)
    values = [threshold_at(schedule, t) for t in range(138)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_threshold_out_of_range():
    schedule = CurriculumSchedule(start=0.85, end=0.70, total_epochs=5)
    with pytest.raises(ConfigError):
        threshold_at(schedule, -1)
    with pytest.raises(ConfigError):
        threshold_at(schedule, 6)


def _agreeing_setup(conf, dim=4):
    """State + one-sample target where the classifier and bank agree on fake."""
    state = _state_with_confidences(dim)
    x = _sample_for_confidence(conf, fake_side=True, dim=dim)
    tset = _target_set([x], dim=dim)
    z = x  # identity adapter on a unit vector
    bank = FeatureBank(real_entries=[BankEntry("r", -z, 0.95)],
                       fake_entries=[BankEntry("f", z, 0.95)],
                       built_at_epoch=0, tf_threshold=0.9)
    return state, tset, bank


def test_generate_acceptance_rule():
    state, tset, bank = _agreeing_setup(0.90)
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85)
    assert d.accepted and d.clip_label == Label.FAKE and d.bank_label == Label.FAKE

    state, tset, bank = _agreeing_setup(0.80)
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85)
    assert not d.accepted  # confidence below the threshold

    state, tset, bank = _agreeing_setup(0.95)
    bank.fake_entries[0] = BankEntry("f", -tset.records[0].feature, 0.95)  # far away
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85)
    assert d.bank_label == Label.REAL and not d.accepted  # disagreement


def test_generate_paper_le_rule_flips_predicate():
    state, tset, bank = _agreeing_setup(0.90)
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85, threshold_rule="paper-le")
    assert not d.accepted
    state, tset, bank = _agreeing_setup(0.80)
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85, threshold_rule="paper-le")
    assert d.accepted


def test_generate_requires_both_banks():
    state, tset, bank = _agreeing_setup(0.95)
    bank.real_entries = []
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85)
    assert d.bank_label == Label.FAKE  # distance rule still votes
    assert not d.accepted              # but one-sided banks cannot verify


def test_generate_is_exhaustive_and_ordered(tiny_synth):
    _, _, target = tiny_synth
    state = randomized_state(target.dim, seed=2)
    bank = build_bank(state, target, 0.6)
    decisions = generate_pseudo_labels(state, target, bank, 0.7)
    assert [d.sample_id for d in decisions] == target.ids
    assert all(d.lt_threshold == 0.7 for d in decisions)


def test_lowering_threshold_never_shrinks_accepted_set(tiny_synth):
    _, _, target = tiny_synth
    state = randomized_state(target.dim, seed=3)
    bank = build_bank(state, target, 0.6)
    accepted_prev: set = set()
    for lam in (0.85, 0.80, 0.75, 0.70):
        decisions = generate_pseudo_labels(state, target, bank, lam)
        accepted = {d.sample_id for d in decisions if d.accepted}
        assert accepted >= accepted_prev
        accepted_prev = accepted


def test_accepted_decisions_satisfy_predicates_brute_force(tiny_synth):
    # independent recomputation from raw features
    _, _, target = tiny_synth
    state = randomized_state(target.dim, seed=4)
    bank = build_bank(state, target, 0.55)
    lam = 0.75
    decisions = generate_pseudo_labels(state, target, bank, lam)
    fake_mat = np.stack([e.feature for e in bank.fake_entries])
    for d, rec in zip(decisions, target.records):
        u = state.adapter_w @ rec.feature + state.adapter_b
        z = u / math.sqrt(float(u @ u))
        logits = state.head_w @ z + state.head_b
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        clip = 1 if p[1] >= p[0] else 0
        conf = float(p.max())
        d_fake = min(math.sqrt(float((z - b) @ (z - b))) for b in fake_mat)
        vote = 0 if d_fake > 0.5 else 1
        expect = bool(bank.real_entries and bank.fake_entries
                      and vote == clip and conf >= lam)
        assert int(d.clip_label) == clip
        assert int(d.bank_label) == vote
        assert abs(d.clip_confidence - conf) <= 1e-12
        assert abs(d.d_fake - d_fake) <= 1e-12
        assert d.accepted == expect


def test_decision_to_dict_is_json_ready():
    state, tset, bank = _agreeing_setup(0.9)
    (d,) = generate_pseudo_labels(state, tset, bank, 0.85)
    payload = d.to_dict()
    assert payload["sample_id"] == "t000"
    assert payload["accepted"] is True
    assert set(payload) == {"sample_id", "clip_label", "clip_confidence", "bank_label",
                            "d_fake", "d_real", "lt_threshold", "accepted"}

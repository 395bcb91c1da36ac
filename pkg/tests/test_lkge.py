import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import lkge_oracles as oracle
from gradcheck import numeric_grad, rel_error
from lkge_bench.errors import ConfigurationError, UndefinedQuantityError
from lkge_bench.lkge import (FactLedger, LkgeConfig, LkgeObjective, Reconstruction, entity_fact_counts, mae_loss,
                             reconstruct_entity, reconstruct_relation, reg_loss, reg_weight, reg_weights,
                             total_loss, transfer_entity_init, transfer_init, transfer_relation_init)
from lkge_bench.transe import EmbeddingState, GradBuffer, corrupt_batch


def ledger_for(prev_e, curr_e, prev_r, curr_r):
    return FactLedger(np.array(prev_e), np.array(curr_e), np.array(prev_r), np.array(curr_r))


def random_instance(rng, ne=6, nr=2, d=4, n_old_e=4, n_old_r=1, n_facts=8):
    """A snapshot-i state: frozen tables for old items, random current tables and ledger."""
    E = rng.normal(size=(ne, d))
    R = rng.normal(size=(nr, d))
    st_ = EmbeddingState(E, R, rng.normal(size=(n_old_e, d)), rng.normal(size=(n_old_r, d)))
    facts = np.stack([rng.integers(ne, size=n_facts), rng.integers(nr, size=n_facts),
                      rng.integers(ne, size=n_facts)], axis=1)
    prev_e = np.concatenate([rng.integers(0, 4, size=n_old_e), np.zeros(ne - n_old_e, int)])
    prev_r = np.concatenate([rng.integers(0, 4, size=n_old_r), np.zeros(nr - n_old_r, int)])
    ledger = FactLedger(prev_e, entity_fact_counts(facts, ne), prev_r, oracle.relation_counts(facts, nr))
    return st_, facts, ledger


# ---- examples ------------------------------------------------------------------------


def test_reconstruct_entity_examples():
    st_ = EmbeddingState(np.array([[0.0, 0.0], [4.0, 4.0]]), np.zeros((1, 2)), np.array([[1.0, 1.0]]))
    led = ledger_for([2, 0], [1, 1], [0], [1])
    np.testing.assert_allclose(reconstruct_entity(0, [(0, 0, 1)], st_, led), [2.0, 2.0])

    st_ = EmbeddingState(np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 2.0]]), np.zeros((1, 2)))
    led = ledger_for([0, 0, 0], [2, 1, 1], [0], [2])
    np.testing.assert_allclose(reconstruct_entity(0, [(0, 0, 1), (0, 0, 2)], st_, led), [2.0, 1.0])


def test_reconstruct_relation_example():
    st_ = EmbeddingState(np.array([[0.0, 0.0], [4.0, 0.0]]), np.zeros((1, 2)), np.zeros((2, 2)), np.zeros((1, 2)))
    led = ledger_for([0, 0], [1, 1], [3], [1])
    np.testing.assert_allclose(reconstruct_relation(0, [(0, 0, 1)], st_, led), [1.0, 0.0])


def test_reconstruct_undefined():
    st_ = EmbeddingState(np.zeros((2, 2)), np.zeros((1, 2)))
    led = ledger_for([0, 0], [0, 0], [0], [0])
    with pytest.raises(UndefinedQuantityError):
        reconstruct_entity(1, [], st_, led)
    with pytest.raises(UndefinedQuantityError):
        reconstruct_relation(0, [], st_, led)


def test_object_side_and_self_loop():
    E = np.array([[1.0, 2.0], [5.0, 5.0]])
    R = np.array([[0.5, 0.5]])
    st_ = EmbeddingState(E, R)
    led = ledger_for([0, 0], [1, 1], [0], [1])
    np.testing.assert_allclose(reconstruct_entity(1, [(0, 0, 1)], st_, led), E[0] + R[0])
    with pytest.raises(UndefinedQuantityError):
        reconstruct_entity(1, [(0, 0, 1)], st_, led, subject_only=True)
    # a self-loop is one fact and contributes once, via the subject side
    assert entity_fact_counts(np.array([[1, 0, 1]]), 2).tolist() == [0, 1]
    np.testing.assert_allclose(reconstruct_entity(1, [(1, 0, 1)], st_, ledger_for([0, 0], [0, 1], [0], [1])),
                               E[1] - R[0])


def test_transfer_examples():
    prev_E = np.array([[3.0, 2.0], [1.0, 1.0], [4.0, 1.0]])
    prev_R = np.array([[1.0, 0.0]])
    np.testing.assert_allclose(transfer_entity_init(5, [(5, 0, 0)], prev_E, prev_R), [2.0, 2.0])
    assert transfer_entity_init(5, [(5, 0, 6), (6, 0, 5)], prev_E, prev_R) is None
    # subject side gives (3,2)-(1,0) = (2,2); object side gives (-1,-1)+(1,1) = (0,0)
    prev_E2 = np.array([[3.0, 2.0], [-1.0, -1.0]])
    prev_R2 = np.array([[1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(transfer_entity_init(7, [(7, 0, 0), (1, 1, 7)], prev_E2, prev_R2), [1.0, 1.0])

    np.testing.assert_allclose(transfer_relation_init(3, [(1, 3, 2)], prev_E), [3.0, 0.0])
    assert transfer_relation_init(3, [(1, 3, 9)], prev_E) is None
    E3 = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    np.testing.assert_allclose(transfer_relation_init(3, [(0, 3, 1), (0, 3, 2)], E3), [2.0, 0.0])


def test_transfer_ignores_unseen_relation():
    prev_E = np.array([[3.0, 2.0]])
    assert transfer_entity_init(2, [(2, 5, 0)], prev_E, np.zeros((1, 2))) is None


def test_reg_weight_examples():
    assert reg_weight(3, 1) == 0.75
    assert reg_weight(0, 4) == 0.0
    assert reg_weight(4, 0) == 1.0
    with pytest.raises(UndefinedQuantityError):
        reg_weight(0, 0)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_reg_weight_range(prev, curr):
    if prev + curr == 0:
        return
    w = reg_weight(prev, curr)
    assert 0.0 <= w <= 1.0
    assert reg_weight(prev, curr + 1) <= w


def test_reg_loss_examples():
    st_ = EmbeddingState(np.zeros((2, 2)), np.zeros((1, 2)))
    assert reg_loss(st_, FactLedger(curr_entity=[1, 1], curr_relation=[1])) == 0.0
    st_ = EmbeddingState(np.array([[2.0, 0.0]]), np.zeros((0, 2)), np.zeros((1, 2)), np.zeros((0, 2)))
    assert reg_loss(st_, ledger_for([1], [1], [], [])) == pytest.approx(2.0)


def test_mae_examples():
    st_ = EmbeddingState(np.array([[0.0, 0.0]]), np.zeros((0, 2)), np.array([[1.0, 1.0]]), np.zeros((0, 2)))
    assert mae_loss(np.zeros((0, 3), int), st_, ledger_for([1], [0], [], [])) == pytest.approx(2.0)


def test_mae_zero_at_perfect_reconstruction():
    # a consistent translation: e1 = e0 + r, and no history
    E = np.array([[0.0, 1.0], [2.0, 1.0]])
    R = np.array([[2.0, 0.0]])
    facts = np.array([[0, 0, 1]])
    st_ = EmbeddingState(E, R)
    led = FactLedger(curr_entity=[1, 1], curr_relation=[1])
    buf = GradBuffer(2, 1, 2)
    assert mae_loss(facts, st_, led, buf) == 0.0
    assert not buf.entity.any() and not buf.relation.any()


# ---- oracles ----------------------------------------------------------------------------


def test_encoder_matches_exact_average():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d, ne, nr = 3, 5, 2
        # history: two earlier snapshots, each with its own tables and facts
        hist_facts, hist_contrib_e, hist_contrib_r = [], {e: [] for e in range(ne)}, {r: [] for r in range(nr)}
        for _ in range(2):
            E_j, R_j = rng.normal(size=(ne, d)), rng.normal(size=(nr, d))
            facts_j = rng.integers(0, [ne, nr, ne], size=(4, 3))
            for e in range(ne):
                hist_contrib_e[e] += oracle.entity_contributions(e, facts_j, E_j, R_j)
            for r in range(nr):
                hist_contrib_r[r] += oracle.relation_contributions(r, facts_j, E_j)
            hist_facts.append(facts_j)
        frozen_E = np.array([np.mean(hist_contrib_e[e], axis=0) if hist_contrib_e[e] else np.zeros(d)
                             for e in range(ne)])
        frozen_R = np.array([np.mean(hist_contrib_r[r], axis=0) if hist_contrib_r[r] else np.zeros(d)
                             for r in range(nr)])
        E, R = rng.normal(size=(ne, d)), rng.normal(size=(nr, d))
        facts = rng.integers(0, [ne, nr, ne], size=(4, 3))
        st_ = EmbeddingState(E, R, frozen_E, frozen_R)
        led = FactLedger(np.array([len(hist_contrib_e[e]) for e in range(ne)]), entity_fact_counts(facts, ne),
                         np.array([len(hist_contrib_r[r]) for r in range(nr)]), oracle.relation_counts(facts, nr))
        rec = Reconstruction(facts, led, frozen_E, frozen_R, ne, nr)
        rec_E, rec_R = rec.reconstruct(E, R)
        for e in range(ne):
            allc = hist_contrib_e[e] + oracle.entity_contributions(e, facts, E, R)
            if not allc:
                continue
            exact = np.mean(allc, axis=0)
            np.testing.assert_allclose(reconstruct_entity(e, facts.tolist(), st_, led), exact, atol=1e-10, rtol=0)
            np.testing.assert_allclose(rec_E[e], exact, atol=1e-10, rtol=0)
        for r in range(nr):
            allc = hist_contrib_r[r] + oracle.relation_contributions(r, facts, E)
            if not allc:
                continue
            exact = np.mean(allc, axis=0)
            np.testing.assert_allclose(reconstruct_relation(r, facts.tolist(), st_, led), exact, atol=1e-10, rtol=0)
            np.testing.assert_allclose(rec_R[r], exact, atol=1e-10, rtol=0)


@pytest.mark.parametrize("subject_only", [False, True])
def test_mae_matches_termwise(subject_only):
    rng = np.random.default_rng(1)
    for _ in range(10):
        st_, facts, led = random_instance(rng)
        if subject_only:
            led.curr_entity = entity_fact_counts(facts, st_.num_entities, subject_only=True)
        got = mae_loss(facts, st_, led, subject_only=subject_only)
        want = oracle.mae(facts, st_.entity_table, st_.relation_table, st_.prev_entity_table, st_.prev_relation_table,
                          led.prev_entity, led.prev_relation, subject_only)
        assert got == pytest.approx(want, rel=1e-12)


def test_reg_matches_termwise():
    rng = np.random.default_rng(2)
    for _ in range(10):
        st_, facts, led = random_instance(rng)
        want = oracle.reg(st_.entity_table, st_.relation_table, st_.prev_entity_table, st_.prev_relation_table,
                          led.prev_entity, led.curr_entity, led.prev_relation, led.curr_relation)
        assert reg_loss(st_, led) == pytest.approx(want, rel=1e-12)


def test_term_sum_oracle():
    rng = np.random.default_rng(3)
    st_, _, _ = random_instance(rng, ne=4, nr=2, d=3, n_old_e=3, n_old_r=1, n_facts=3)
    facts = np.array([[0, 0, 1], [1, 1, 3], [2, 0, 2]])
    neg = np.array([[3, 0, 1], [1, 1, 0], [2, 0, 1]])
    led = FactLedger(np.array([2, 1, 0, 0]), entity_fact_counts(facts, 4), np.array([1, 0]),
                     oracle.relation_counts(facts, 2))
    out = total_loss(facts, neg, st_, led, LkgeConfig(alpha=1.0, beta=1.0, margin=2.0), facts)
    args = (st_.entity_table, st_.relation_table, st_.prev_entity_table, st_.prev_relation_table)
    want = (oracle.margin(facts, neg, st_.entity_table, st_.relation_table, 2.0)
            + oracle.reg(*args, led.prev_entity, led.curr_entity, led.prev_relation, led.curr_relation)
            + oracle.mae(facts, *args, led.prev_entity, led.prev_relation))
    assert out["total"] == pytest.approx(want, rel=1e-12)


def test_zero_weights_is_margin_only():
    rng = np.random.default_rng(4)
    st_, facts, led = random_instance(rng)
    neg = corrupt_batch(facts, st_.num_entities, rng)
    out = total_loss(facts, neg, st_, led, LkgeConfig(alpha=0.0, beta=0.0), facts)
    assert out["total"] == pytest.approx(oracle.margin(facts, neg, st_.entity_table, st_.relation_table, 1.0))
    assert out["old"] == out["mae"] == 0.0


def test_toggles_do_not_change_other_terms():
    rng = np.random.default_rng(5)
    st_, facts, led = random_instance(rng)
    neg = corrupt_batch(facts, st_.num_entities, rng)
    full = total_loss(facts, neg, st_, led, LkgeConfig(), facts)
    no_reg = total_loss(facts, neg, st_, led, LkgeConfig(use_regularization=False), facts)
    no_mae = total_loss(facts, neg, st_, led, LkgeConfig(use_autoencoder=False), facts)
    assert no_reg["old"] == 0.0 and no_reg["mae"] == full["mae"] and no_reg["new"] == full["new"]
    assert no_mae["mae"] == 0.0 and no_mae["old"] == full["old"] and no_mae["new"] == full["new"]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        LkgeConfig(alpha=-1)
    with pytest.raises(ConfigurationError):
        LkgeConfig(margin=0)
    with pytest.raises(ConfigurationError):
        LkgeConfig(loss_scope="epoch")


# ---- gradients ---------------------------------------------------------------------------


@pytest.mark.parametrize("term", ["mae", "reg", "mae_subject", "total"])
def test_gradients_finite_difference(term):
    rng = np.random.default_rng(6)
    for _ in range(5):
        st_, facts, led = random_instance(rng, d=3)
        neg = corrupt_batch(facts, st_.num_entities, rng)
        if term == "mae":
            fn = lambda s, g=None: mae_loss(facts, s, led, g)
        elif term == "mae_subject":
            fn = lambda s, g=None: mae_loss(facts, s, led, g, subject_only=True)
        elif term == "reg":
            fn = lambda s, g=None: reg_loss(s, led, g)
        else:
            cfg = LkgeConfig(alpha=0.7, beta=0.3, margin=3.0)
            fn = lambda s, g=None: total_loss(facts, neg, s, led, cfg, facts, g)["total"]
        buf = GradBuffer(st_.num_entities, st_.num_relations, st_.dim)
        fn(st_, buf)
        dE, dR = numeric_grad(lambda s: fn(s), st_)
        assert rel_error(np.concatenate([buf.entity.ravel(), buf.relation.ravel()]),
                         np.concatenate([dE.ravel(), dR.ravel()])) < 1e-4


def test_batch_scope_restricts_rows():
    rng = np.random.default_rng(7)
    st_, facts, led = random_instance(rng, ne=8)
    obj = LkgeObjective(LkgeConfig(loss_scope="batch"), facts, st_, led)
    pos = facts[:1]
    neg = pos.copy()
    out = obj(pos, neg, st_)
    full = LkgeObjective(LkgeConfig(), facts, st_, led)(pos, neg, st_)
    assert out["mae"] <= full["mae"] and out["old"] <= full["old"]


# ---- ledger and transfer -------------------------------------------------------------


def test_ledger_advance():
    led = FactLedger()
    led.advance(np.array([[0, 0, 1], [1, 0, 1]]), 2, 1)
    assert led.curr_entity.tolist() == [1, 2] and led.prev_entity.tolist() == [0, 0]
    led.advance(np.array([[2, 1, 2]]), 3, 2)
    assert led.prev_entity.tolist() == [1, 2, 0] and led.curr_entity.tolist() == [0, 0, 1]
    assert led.prev_relation.tolist() == [2, 0] and led.curr_relation.tolist() == [0, 1]
    back = FactLedger.from_arrays(led.arrays())
    assert back.prev_entity.tolist() == led.prev_entity.tolist()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_ledger_counts_match_oracle(seed):
    rng = np.random.default_rng(seed)
    facts = rng.integers(0, [6, 3, 6], size=(rng.integers(0, 15), 3))
    assert entity_fact_counts(facts, 6).tolist() == oracle.entity_counts(facts, 6).tolist()


def test_batched_transfer_matches_single_item():
    rng = np.random.default_rng(8)
    for _ in range(20):
        prev_E, prev_R = rng.normal(size=(5, 3)), rng.normal(size=(2, 3))
        facts = rng.integers(0, [9, 4, 9], size=(12, 3))
        ent, ent_ok, rel, rel_ok = transfer_init(facts, prev_E, prev_R, 9, 4)
        for k, e in enumerate(range(5, 9)):
            want = transfer_entity_init(e, facts.tolist(), prev_E, prev_R)
            assert ent_ok[k] == (want is not None)
            if want is not None:
                np.testing.assert_allclose(ent[k], want)
        for k, r in enumerate(range(2, 4)):
            want = transfer_relation_init(r, facts.tolist(), prev_E)
            assert rel_ok[k] == (want is not None)
            if want is not None:
                np.testing.assert_allclose(rel[k], want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_transfer_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    prev_E, prev_R = rng.normal(size=(4, 3)), rng.normal(size=(2, 3))
    facts = rng.integers(0, [7, 3, 7], size=(10, 3))
    a = transfer_init(facts, prev_E, prev_R, 7, 3)
    b = transfer_init(facts[rng.permutation(10)], prev_E, prev_R, 7, 3)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, atol=1e-12)


def test_reg_weights_vectorised():
    w, ok = reg_weights(np.array([3, 0, 4, 0]), np.array([1, 4, 0, 0]))
    assert w.tolist() == [0.75, 0.0, 1.0, 0.0] and ok.tolist() == [True, True, True, False]

import math

import numpy as np
import pytest

from relphormer import numcore as nc
from relphormer.kgcore import HEAD, TAIL, Triple
from relphormer.model import (ContrastiveBank, ModelConfig, Relphormer, bank_update, batch_contextual_loss,
                              collate, contextual_loss, mkm_loss, total_loss)
from relphormer.numcore import Tensor
from relphormer.structbias import adjacency_powers, normalize_adjacency, structure_bias
from relphormer.triple2seq import ContextSubgraph, MaskedSample, make_sample, mask_center

from conftest import make_kg


def tiny_kg():
    return make_kg(["a r b", "b r c", "c r2 a", "a r2 d", "d r e", "e r3 b", "b r3 d", "c r f"],
                   test=["a r c"])


def tiny_model(kg, seed=0, **kw):
    cfg = dict(vocab_size=kg.vocab_size, hidden=8, layers=2, heads=2, ffn=16, dropout=0.0)
    cfg.update(kw)
    return Relphormer(ModelConfig(**cfg), seed=seed)


def randomize_structure(model, rng):
    for k, v in model.params.items():
        if k.startswith("struct."):
            v.data[...] = rng.normal(size=v.shape)


def six_node_sample(kg, slot=TAIL):
    # center (a r b) + context (a r2 d): nodes G a r b r2 d
    a, b, d = kg.node_id("a"), kg.node_id("b"), kg.node_id("d")
    r, r2 = kg.node_id("r"), kg.node_id("r2")
    sub = ContextSubgraph(Triple(a, r, b), (Triple(a, r2, d),), kg.global_id)
    return mask_center(sub, slot, np.random.default_rng(0), kg.mask_id)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, hidden=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, tau=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, lam=-1)


def test_logits_shape_any_length(rng):
    kg = tiny_kg()
    model = tiny_model(kg)
    for k in (0, 1, 3, 8):
        s = make_sample(kg, kg.train[0], TAIL, k, rng)
        logits, c = model.forward_sample(s)
        assert logits.shape == (kg.vocab_size,) and c.shape == (8,)


def test_length_mismatch_rejected():
    kg = tiny_kg()
    s = six_node_sample(kg)
    bad = MaskedSample(s.sequence, s.adjacency[:4, :4], s.target, s.mask_slot, s.center_key, s.roles)
    with pytest.raises(ValueError):
        collate([bad], 2)


def test_batched_matches_single(rng):
    kg = tiny_kg()
    model = tiny_model(kg)
    randomize_structure(model, rng)
    samples = [make_sample(kg, t, HEAD, k, rng) for t, k in zip(kg.train, (0, 2, 5, 1, 3, 0, 4, 2))]
    batched, _ = model.forward(collate(samples, 2))
    for i, s in enumerate(samples):
        single, _ = model.forward_sample(s)
        np.testing.assert_allclose(batched.data[i], single.data, rtol=0, atol=1e-12)


def test_model_bias_matches_reference(rng):
    kg = tiny_kg()
    model = tiny_model(kg, m=3)
    randomize_structure(model, rng)
    s = make_sample(kg, kg.train[1], TAIL, 4, rng)
    phi = model.structure_bias(collate([s], 3), 0).data[0]
    ref = structure_bias(adjacency_powers(normalize_adjacency(s.adjacency), 3), model.params["struct.0"].data)
    np.testing.assert_allclose(phi, ref, atol=1e-14)


def test_phi_neutrality_bit_identical(umls):
    rng = np.random.default_rng(0)
    cfg = dict(vocab_size=umls.vocab_size, hidden=16, heads=4, ffn=32, dropout=0.0)
    with_bias = Relphormer(ModelConfig(**cfg), seed=3)
    without = Relphormer(ModelConfig(use_structure=False, **cfg), seed=3)
    with_bias.zero_structure()
    for _ in range(20):
        t = umls.train[int(rng.integers(len(umls.train)))]
        s = make_sample(umls, t, "random-entity", 8, rng)
        a, ca = with_bias.forward_sample(s)
        b, cb = without.forward_sample(s)
        assert np.array_equal(a.data, b.data) and np.array_equal(ca.data, cb.data)


def test_tied_head_score_property(rng):
    kg = tiny_kg()
    model = tiny_model(kg)
    s = make_sample(kg, kg.train[2], TAIL, 3, rng)
    logits, h = model.forward_sample(s)
    W = model.params["embed"].data
    z, hv = logits.data, h.data
    for i in range(kg.vocab_size):
        for j in range(kg.vocab_size):
            assert z[i] - z[j] == pytest.approx(float((W[i] - W[j]) @ hv), abs=1e-12)
    ents = np.arange(kg.n_entities)
    assert np.array_equal(np.argsort(-z[ents], kind="stable"), np.argsort(-(W[ents] @ hv), kind="stable"))
    # tying is structural: one tensor serves both roles
    assert model.params["embed"].data is W


def test_permutation_covariance(umls):
    rng = np.random.default_rng(9)
    model = Relphormer(ModelConfig(vocab_size=umls.vocab_size, hidden=16, heads=4, ffn=32, dropout=0.0), seed=1)
    randomize_structure(model, rng)
    for _ in range(10):
        s = make_sample(umls, umls.train[int(rng.integers(len(umls.train)))], TAIL, 8, rng)
        n = len(s)
        perm = np.concatenate([np.arange(4), 4 + rng.permutation(n - 4)])
        p = MaskedSample(s.sequence[perm], s.adjacency[np.ix_(perm, perm)], s.target, s.mask_slot,
                         s.center_key, s.roles[perm])
        a, _ = model.forward_sample(s)
        b, _ = model.forward_sample(p)
        np.testing.assert_allclose(a.data, b.data, rtol=0, atol=1e-10)


# -- losses ---------------------------------------------------------------------------

def test_mkm_uniform_is_log_vocab():
    assert mkm_loss(Tensor(np.zeros(183)), 17).item() == pytest.approx(math.log(183), abs=1e-12)
    assert math.log(183) == pytest.approx(5.209, abs=1e-3)


def test_mkm_bce_saturation():
    loss = mkm_loss(Tensor(np.full(20, -30.0)), 3, "bce").item()
    assert loss == pytest.approx(30.0, abs=1e-9 + 19 * 1e-13)


def test_contextual_equal_similarity_is_ln2():
    c = np.array([1.0, 2.0, 0.5])
    loss = contextual_loss(c, c, [c * 3.0], tau=0.7).item()
    assert loss == pytest.approx(math.log(2), abs=1e-5)


@pytest.mark.parametrize("tau,expected", [(1.0, 0.31326), (0.5, 0.12693)])
def test_contextual_known_values(tau, expected):
    loss = contextual_loss(np.array([1.0, 0.0]), np.array([2.0, 0.0]), [np.array([0.0, 1.0])], tau).item()
    assert loss == pytest.approx(expected, abs=1e-5)
    assert loss == pytest.approx(-math.log(math.exp(1 / tau) / (math.exp(1 / tau) + 1)), abs=1e-12)


def test_contextual_saturates_to_zero():
    loss = contextual_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]), [np.array([-1.0, 0.0])] * 3, 0.05).item()
    assert 0 <= loss < 1e-6


def test_contextual_nonnegative(rng):
    for _ in range(200):
        c, p = rng.normal(size=4), rng.normal(size=4)
        negs = [rng.normal(size=4) for _ in range(int(rng.integers(0, 5)))]
        assert contextual_loss(c, p, negs, float(rng.uniform(0.05, 2))).item() >= 0


def test_contextual_first_epoch_zero():
    assert contextual_loss(np.ones(3), None, [], 0.1).item() == 0.0


def test_contextual_zero_norm_rejected():
    with pytest.raises(ValueError):
        contextual_loss(np.ones(2), np.zeros(2), [], 0.1)


def test_contextual_no_gradient_into_bank(rng):
    c = Tensor(rng.normal(size=4), requires_grad=True)
    prev = rng.normal(size=4)
    loss = contextual_loss(c, prev, [rng.normal(size=4)], 0.2)
    nc.backward(loss)
    assert c.grad is not None and np.any(c.grad != 0)
    assert all(p is c or not p.requires_grad for p in nc._topo(loss) if not p._parents)


def test_batch_contextual_matches_single(rng):
    c = rng.normal(size=(4, 5))
    prev = rng.normal(size=(4, 5))
    has = np.array([True, False, True, True])
    batched = batch_contextual_loss(Tensor(c), prev, has, 0.3).item()
    rows = np.flatnonzero(has)
    singles = [contextual_loss(c[i], prev[i], [prev[j] for j in rows if j != i], 0.3).item() for i in rows]
    assert batched == pytest.approx(np.mean(singles), abs=1e-12)


def test_total_loss():
    assert total_loss(5.2, 0.69, 0.0) == 5.2
    assert total_loss(5.2, 0.69, 0.1) == pytest.approx(5.269, abs=1e-12)
    assert total_loss(5.2, 0.0, 3.0) == 5.2


def test_bank():
    bank = ContrastiveBank()
    assert bank.get("x") is None
    v = np.array([1.0, 2.0])
    bank_update(bank, "x", v)
    v[0] = 9.0
    np.testing.assert_array_equal(bank.get("x"), [1.0, 2.0])
    bank_update(bank, "x", Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(bank.get("x"), [3.0, 4.0])
    assert len(bank) == 1


# -- gradient checks --------------------------------------------------------------------

def test_grad_single_attention_layer_with_bias(rng):
    kg = tiny_kg()
    model = tiny_model(kg, layers=1)
    randomize_structure(model, rng)
    batch = collate([six_node_sample(kg)], 2)

    def f():
        logits, _ = model.forward(batch)
        return mkm_loss(logits, batch.targets)

    assert nc.grad_check(f, model.parameters()) < 1e-5


@pytest.mark.parametrize("loss_kind", ["ce", "bce"])
def test_grad_full_model_joint_loss(rng, loss_kind):
    kg = tiny_kg()
    model = tiny_model(kg, loss_kind=loss_kind, lam=0.5, tau=0.3)
    randomize_structure(model, rng)
    batch = collate([six_node_sample(kg, TAIL), six_node_sample(kg, HEAD)], 2)
    prev = rng.normal(size=(2, 8))

    def f():
        logits, c = model.forward(batch)
        ctx = batch_contextual_loss(c, prev, np.array([True, True]), 0.3)
        return total_loss(mkm_loss(logits, batch.targets, loss_kind), ctx, 0.5)

    assert nc.grad_check(f, model.parameters()) < 1e-4


def test_state_dict_round_trip(tmp_path):
    kg = tiny_kg()
    a, b = tiny_model(kg, seed=1), tiny_model(kg, seed=2)
    nc.save_tensors(tmp_path / "m.rlph", a.params)
    b.load_state_dict(nc.load_tensors(tmp_path / "m.rlph"))
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)


def test_load_state_shape_mismatch():
    kg = tiny_kg()
    a = tiny_model(kg)
    state = a.state_dict()
    state["embed"] = state["embed"][:-1]
    with pytest.raises(nc.CheckpointError):
        a.load_state_dict(state)


def test_import_embeddings():
    kg = tiny_kg()
    model = tiny_model(kg)
    model.import_embeddings({2: np.arange(8.0)})
    np.testing.assert_array_equal(model.params["embed"].data[2], np.arange(8.0))
    with pytest.raises(ValueError):
        model.import_embeddings({2: np.arange(3.0)})

import math

import numpy as np
import pytest

from argex.data import ConfigError, DataConfig, OntologyConfig, generate_dataset, generate_ontology
from argex.model import ArgumentExtractor
from argex.numerics import ContractViolation, Tape, Tensor, make_rng
from argex.prefixes import (
    FALLBACK_TYPE,
    PassPrefixes,
    gate_weights,
    guide_prefix,
    make_variant,
    normalize_variant,
    scaled_length,
)
from argex.train_eval import AdamW, TrainConfig, optimizer_step
from argex.transformer import ModelConfig


def model_config(**kw) -> ModelConfig:
    defaults = dict(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1, ffn_dim=12,
                    vocab_size=40, max_seq_len=48, msl=4, len_ins=3, len_tem=2)
    defaults.update(kw)
    return ModelConfig(**defaults)


def small_setup(variant="full", seed=3, **kw):
    onto = generate_ontology(
        OntologyConfig(n_types=3, n_roles=4, roles_per_type=2, entity_pool_size=8,
                       filler_pool_size=4), seed=1)
    cfg = model_config(variant=variant, vocab_size=0, **kw)
    return onto, ArgumentExtractor(cfg, onto, seed=seed)


# ---------------------------------------------------------------------------
# gating math
# ---------------------------------------------------------------------------


def test_gate_weights_at_zero_guide():
    a = gate_weights(Tensor(np.zeros((1, 4))), Tensor(np.ones((4, 3))))
    assert np.allclose(a.data, 0.5)


def test_gate_weights_zero_projection():
    rng = make_rng(0, 1)
    a = gate_weights(Tensor(rng.normal(size=(1, 4))), Tensor(np.zeros((4, 3))))
    assert np.allclose(a.data, 0.5)


def test_gate_weights_closed_form():
    h = Tensor([[1.0, 0.0]])
    w = Tensor([[0.5, -0.25], [9.0, 9.0]])  # second row never touched by h
    a = gate_weights(h, w)
    assert abs(a.data[0, 0] - 1.0 / (1.0 + math.exp(-0.5))) < 1e-12
    assert abs(a.data[0, 0] - 0.62246) < 1e-5


def test_gate_outputs_strictly_inside_unit_interval():
    rng = make_rng(0, 2)
    for _ in range(25):
        h = Tensor(rng.normal(scale=30.0, size=(1, 6)))
        w = Tensor(rng.normal(scale=30.0, size=(6, 5)))
        a = gate_weights(h, w).data
        assert np.all(a > 0.0) and np.all(a < 1.0)


def test_guide_prefix_lambda_zero_annihilates():
    rng = make_rng(0, 3)
    kv = guide_prefix(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 4))),
                      Tensor(rng.uniform(0.1, 0.9, size=(1, 3))), Tensor([0.0]))
    assert np.all(kv.key.data == 0.0)
    assert np.all(kv.value.data == 0.0)
    assert np.all(kv.gate.data == 0.0)


def test_guide_prefix_identity_when_gate_is_one():
    rng = make_rng(0, 4)
    key = rng.normal(size=(2, 4))
    val = rng.normal(size=(2, 4))
    kv = guide_prefix(Tensor(key), Tensor(val), Tensor(np.ones((1, 2))), Tensor([1.0]))
    assert np.array_equal(kv.key.data, key)
    assert np.array_equal(kv.value.data, val)
    assert np.allclose(kv.gate.data, 1.0)


def test_guide_prefix_lambda_times_gate_equal_one():
    kv = guide_prefix(Tensor([[1.0, -1.0]]), Tensor([[2.0, 0.5]]),
                      Tensor([[0.5]]), Tensor([2.0]))
    assert np.array_equal(kv.key.data, [[1.0, -1.0]])
    assert np.array_equal(kv.value.data, [[2.0, 0.5]])


def test_guide_prefix_length_mismatch():
    with pytest.raises(Exception):
        guide_prefix(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))),
                     Tensor(np.zeros((1, 2))), Tensor([1.0]))


# ---------------------------------------------------------------------------
# bank selection
# ---------------------------------------------------------------------------


def test_shared_bank_returns_same_matrices_for_all_types():
    onto, ex = small_setup("full")
    t0, t1 = onto.type_names()[:2]
    a = ex.bank.select("enc", 0, "tem", t0)
    b = ex.bank.select("enc", 0, "tem", t1)
    assert a[0] is b[0] and a[1] is b[1]


def test_per_type_bank_returns_distinct_parameters():
    onto, ex = small_setup("tst")
    t0, t1 = onto.type_names()[:2]
    a = ex.bank.select("enc", 0, "tem", t0)
    b = ex.bank.select("enc", 0, "tem", t1)
    assert a[0] is not b[0]
    fallback = ex.bank.select("enc", 0, "tem", "never.seen")
    assert fallback[0] is ex.bank.params[f"prefix.enc.tem.type.{FALLBACK_TYPE}.layer.0.key"]
    # instance family stays shared under tst
    assert ex.bank.select("enc", 0, "ins", t0)[0] is ex.bank.select("enc", 0, "ins", t1)[0]


def test_disabled_family_raises_contract_violation():
    _onto, ex = small_setup("only-iop")
    with pytest.raises(ContractViolation):
        ex.bank.select("enc", 0, "tem", None)
    _onto, ex2 = small_setup("only-top")
    with pytest.raises(ContractViolation):
        ex2.bank.select("dec", 0, "ins", None)


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------


def test_variant_name_normalization():
    assert normalize_variant("FULL") == "full"
    assert normalize_variant("w/o DEGAP".replace(" ", "-").lower()) == "none"
    assert normalize_variant("no_egag") == "no-egag"
    with pytest.raises(ConfigError):
        normalize_variant("bogus")


def test_none_variant_has_no_prefix_parameters():
    _onto, ex = small_setup("none")
    assert ex.bank.named_parameters() == {}
    assert ex.wiring.context_family is None and ex.wiring.template_family is None


def test_no_egag_scales_lengths_one_point_five_times():
    assert scaled_length(40, 1.5) == 60
    assert scaled_length(1, 1.5) == 2   # .5 rounds up
    assert scaled_length(3, 1.5) == 5
    onto, ex = small_setup("no-egag", len_ins=4, len_tem=2)
    assert ex.bank.lengths == {"ins": 6, "tem": 3}
    assert not ex.wiring.gating
    assert not any(k.startswith("gate.") for k in ex.bank.named_parameters())


def test_sp_consults_one_family_for_both_passes():
    onto, ex = small_setup("sp")
    assert ex.wiring.context_family == "ins"
    assert ex.wiring.template_family == "ins"
    assert not any(".tem." in k for k in ex.bank.named_parameters())


def test_s_guided_uses_first_token():
    _onto, ex = small_setup("s-guided")
    assert ex.wiring.guide == "sentence"
    provider = ex._provider("enc", "ins", ex.ontology.type_names()[0], [4, 5])
    assert provider.guide_positions == [0]


def test_zero_length_family_is_disabled_even_under_full():
    _onto, ex = small_setup("full", len_tem=0)
    assert ex.wiring.template_family is None


# ---------------------------------------------------------------------------
# model-level invariants
# ---------------------------------------------------------------------------


def instances_for(onto, n=6, seed=5):
    return generate_dataset(
        onto, DataConfig(n_contexts=n, overlap_prob=0.3, context_len=64), seed)


def test_lambda_zero_matches_prefix_free_model():
    onto, full = small_setup("full", seed=9)
    _onto2, none = small_setup("none", seed=9)
    none_params = none.named_parameters()
    full_params = full.named_parameters()
    for k in none_params:
        none_params[k].data = full_params[k].data.copy()
    for k, p in full_params.items():
        if k.endswith(".lambda"):
            p.data[:] = 0.0
    for inst in instances_for(onto):
        a, _ = full.loss(inst)
        b, _ = none.loss(inst)
        assert abs(a.item() - b.item()) < 1e-9


def test_gradients_flow_to_gating_parameters():
    onto, ex = small_setup("full", seed=11)
    insts = instances_for(onto, n=10)
    gate_names = [k for k in ex.bank.named_parameters()]
    assert any(k.endswith(".lambda") for k in gate_names)
    hit = 0
    trials = 0
    params = ex.named_parameters()
    for inst in insts:
        with Tape() as tape:
            loss, _ = ex.loss(inst)
            tape.backward(loss)
        for name in gate_names:
            trials += 1
            g = params[name].grad
            if g is not None and float(np.abs(g).sum()) > 0.0:
                hit += 1
        for p in params.values():
            p.grad = None
    assert hit / trials >= 0.95


def test_tst_update_isolates_other_types():
    onto, ex = small_setup("tst", seed=13)
    insts = instances_for(onto, n=8)
    target_type = insts[0].event_type
    other_types = [t for t in onto.type_names() if t != target_type] + [FALLBACK_TYPE]
    before = {
        k: p.data.copy() for k, p in ex.bank.named_parameters().items()
        if ".tem.type." in k and not f".type.{target_type}." in k
    }
    assert before
    params = ex.named_parameters()
    optimizer = AdamW(params)
    config = TrainConfig(training_steps=10, batch_size=1)
    with Tape() as tape:
        loss, _ = ex.loss(insts[0])
        tape.backward(loss)
    optimizer_step(optimizer, 1, config)
    for k, old in before.items():
        assert np.array_equal(params[k].data, old), f"{k} changed"


def test_tst_touched_type_parameters_move():
    onto, ex = small_setup("tst", seed=13)
    insts = instances_for(onto, n=8)
    target_type = insts[0].event_type
    name = f"prefix.enc.tem.type.{target_type}.layer.0.key"
    params = ex.named_parameters()
    before = params[name].data.copy()
    optimizer = AdamW(params)
    with Tape() as tape:
        loss, _ = ex.loss(insts[0])
        tape.backward(loss)
    optimizer_step(optimizer, 1, TrainConfig())
    assert not np.array_equal(params[name].data, before)

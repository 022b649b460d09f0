"""Acceptance suite: one test per criterion, each printing a PASS line.

The learning-sanity and ablation-ordering criteria train real models on the
committed synthetic corpus config (10 event types, 6 roles, 800 train / 200
test events, overlap 0.3, seed 1); their expected scores live in
tests/fixtures/acceptance_baseline.json, written by the calibration run and
treated as a regression baseline.

Run with: pytest tests/test_acceptance.py -v -s
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from argex.cli import main as cli_main
from argex.data import (
    DataConfig,
    OntologyConfig,
    Vocab,
    generate_dataset,
    generate_ontology,
)
from argex.model import (
    ArgumentExtractor,
    decode_slot,
    enumerate_candidates,
    prepare_context,
    span_score,
)
from argex.numerics import Tensor, make_rng
from argex.prefixes import scaled_length
from argex.train_eval import (
    TrainConfig,
    ablation_markdown,
    ablation_suite,
    evaluate_f1,
    gradient_audit,
    predictions_for,
    train,
    variant_parameter_count,
)
from argex.transformer import ModelConfig, PrefixKV, TransformerCore

FIXTURE_PATH = Path(__file__).parent / "fixtures" / "acceptance_baseline.json"
BASELINE = json.loads(FIXTURE_PATH.read_text())


def acceptance_ontology():
    return generate_ontology(
        OntologyConfig(n_types=10, n_roles=6, roles_per_type=3,
                       slot_multiplicity_prob=0.25), seed=1)


def acceptance_corpus():
    """800 train / 200 test events (seed 1, disjoint streams) using the
    committed corpus knobs: multi-event contexts with shared arguments,
    heavy distractors, and unfilled role slots."""
    onto = acceptance_ontology()
    spec = BASELINE["corpus"]
    data_cfg = DataConfig.from_dict({k: v for k, v in spec.items()
                                     if k not in ("n_train_contexts", "n_test_contexts")})
    train_cfg = DataConfig.from_dict(data_cfg.to_dict())
    train_cfg.n_contexts = spec["n_train_contexts"]
    test_cfg = DataConfig.from_dict(data_cfg.to_dict())
    test_cfg.n_contexts = spec["n_test_contexts"]
    train_insts = generate_dataset(onto, train_cfg, 1, stream=0)[:800]
    test_insts = generate_dataset(onto, test_cfg, 1, stream=1)[:200]
    assert len(train_insts) == 800 and len(test_insts) == 200
    return onto, train_insts, test_insts


def acceptance_model_config(**kw) -> ModelConfig:
    cfg = dict(BASELINE["model"])
    cfg.update(kw)
    return ModelConfig(**cfg)


@pytest.fixture(scope="module")
def corpus():
    return acceptance_corpus()


def report_pass(n: int, text: str) -> None:
    print(f"\nACCEPTANCE {n}: {text} ... PASS")


# ---------------------------------------------------------------------------
# 1. gradient fidelity
# ---------------------------------------------------------------------------


def test_acceptance_1_gradient_fidelity():
    started = time.time()
    onto = generate_ontology(
        OntologyConfig(n_types=2, n_roles=3, roles_per_type=2, slot_multiplicity_prob=0.5,
                       entity_pool_size=8, filler_pool_size=4), seed=1)
    vocab_size = len(Vocab.build(onto))
    assert vocab_size <= 64, f"tiny-model vocab is {vocab_size}"
    instances = generate_dataset(
        onto, DataConfig(n_contexts=2, events_per_context={1: 1.0}, overlap_prob=0.0,
                         distractor_rate=0.2, context_len=64), seed=1)[:2]
    config = ModelConfig(d_model=8, n_heads=2, n_enc_layers=2, n_dec_layers=1,
                         ffn_dim=16, vocab_size=0, max_seq_len=80, msl=5,
                         len_ins=4, len_tem=4, variant="full")
    extractor = ArgumentExtractor(config, onto, seed=1)
    audit = gradient_audit(extractor, instances, samples_per_family=30, eps=1e-4, seed=0)
    elapsed = time.time() - started
    assert audit["n_checked"] >= 200
    assert len(audit["per_family"]) == 8, "every parameter family must be sampled"
    assert audit["worst"] < 1e-4, f"worst relative error {audit['worst']:.3e}"
    assert elapsed < 120.0, f"took {elapsed:.1f}s"
    report_pass(1, f"gradient fidelity: {audit['n_checked']} samples across "
                   f"{len(audit['per_family'])} families, worst rel err "
                   f"{audit['worst']:.2e} in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. zero-gate equivalence
# ---------------------------------------------------------------------------


def test_acceptance_2_zero_gate_equivalence():
    onto = acceptance_ontology()
    instances = generate_dataset(
        onto, DataConfig(n_contexts=40, overlap_prob=0.3), seed=21)[:50]
    assert len(instances) == 50
    kw = dict(d_model=16, n_heads=2, n_enc_layers=2, n_dec_layers=1, ffn_dim=32,
              vocab_size=0, max_seq_len=128, msl=10, len_ins=8, len_tem=4)
    full = ArgumentExtractor(ModelConfig(variant="full", **kw), onto, seed=9)
    none = ArgumentExtractor(ModelConfig(variant="none", **kw), onto, seed=9)
    none_params = none.named_parameters()
    full_params = full.named_parameters()
    for k in none_params:
        none_params[k].data = full_params[k].data.copy()
    for k, p in full_params.items():
        if k.endswith(".lambda"):
            p.data[:] = 0.0
    worst = 0.0
    for inst in instances:
        loss_a, _ = full.loss(inst)
        loss_b, _ = none.loss(inst)
        worst = max(worst, abs(loss_a.item() - loss_b.item()))
        sa, ea = full.span_logits(prepare_context(inst, full.vocab),
                                  full.template(inst.event_type))
        sb, eb = none.span_logits(prepare_context(inst, none.vocab),
                                  none.template(inst.event_type))
        worst = max(worst, float(np.max(np.abs(sa.data - sb.data))),
                    float(np.max(np.abs(ea.data - eb.data))))
    assert worst < 1e-9, f"worst deviation {worst:.2e}"
    report_pass(2, f"zero-gate forward equivalence on 50 instances, worst dev {worst:.2e}")


# ---------------------------------------------------------------------------
# 3. attention slicing and permutation invariance
# ---------------------------------------------------------------------------


def test_acceptance_3_attention_slicing_and_permutation():
    core = TransformerCore.create(
        ModelConfig(d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1, ffn_dim=12,
                    vocab_size=32, max_seq_len=32, msl=4, len_ins=4, len_tem=4),
        make_rng(31, 0))
    rng = make_rng(31, 1)
    for plen in range(9):
        for _ in range(4):
            n = int(rng.integers(1, 8))
            h = Tensor(rng.normal(size=(n, 8)))
            prefix = None
            if plen:
                prefix = PrefixKV(Tensor(rng.normal(size=(plen, 8))),
                                  Tensor(rng.normal(size=(plen, 8))),
                                  Tensor(rng.uniform(0.0, 1.3, size=(1, plen))))
            out = core.prefixed_self_attention(h, "enc.layer.0.attn", "enc.layer.0.ln1", prefix)
            assert out.shape == (n, 8)
    worst = 0.0
    for _ in range(20):
        n, plen = int(rng.integers(1, 7)), int(rng.integers(2, 9))
        h = Tensor(rng.normal(size=(n, 8)))
        key, val = rng.normal(size=(plen, 8)), rng.normal(size=(plen, 8))
        gate = rng.uniform(0.0, 1.3, size=(1, plen))
        perm = rng.permutation(plen)
        a = core.prefixed_self_attention(h, "enc.layer.0.attn", "enc.layer.0.ln1",
                                         PrefixKV(Tensor(key), Tensor(val), Tensor(gate)))
        b = core.prefixed_self_attention(h, "enc.layer.0.attn", "enc.layer.0.ln1",
                                         PrefixKV(Tensor(key[perm]), Tensor(val[perm]),
                                                  Tensor(gate[:, perm])))
        worst = max(worst, float(np.max(np.abs(a.data - b.data))))
    assert worst < 1e-12, f"permutation deviation {worst:.2e}"
    report_pass(3, f"output length preserved for prefix lengths 0..8; "
                   f"permutation invariance worst dev {worst:.2e}")


# ---------------------------------------------------------------------------
# 4. decode oracle
# ---------------------------------------------------------------------------


def test_acceptance_4_decode_matches_enumeration():
    rng = make_rng(41, 0)
    checked = 0
    ties_seen = 0
    for case in range(100):
        n = int(rng.integers(2, 20))
        m = 6
        msl = int(rng.choice([2, 5, 10]))
        phi_s = rng.normal(size=m)
        phi_e = rng.normal(size=m)
        h_x = rng.normal(size=(n, m))
        sl = h_x @ phi_s
        el = h_x @ phi_e
        if case % 4 == 0:
            sl, el = np.round(sl), np.round(el)  # provoke score ties
        best = (0, 0)
        best_score = span_score(sl, el, 0, 0)
        for l, r in sorted(enumerate_candidates(n, msl)):
            s = span_score(sl, el, l, r)
            if s > best_score:
                best, best_score = (l, r), s
        scores = [span_score(sl, el, l, r) for l, r in enumerate_candidates(n, msl)]
        ties_seen += int(sum(1 for s in scores if s == best_score) > 1)
        got = decode_slot(sl, el, msl)
        assert got == (best[0], best[1], best_score), f"case {case}: {got} vs {best}"
        checked += 1
    assert checked == 100 and ties_seen > 0
    report_pass(4, f"decode equals exhaustive enumeration on 100 cases ({ties_seen} with ties)")


# ---------------------------------------------------------------------------
# 5. metric correctness
# ---------------------------------------------------------------------------


def _mk_inst(doc, golds):
    from argex.data import EventInstance
    return EventInstance(doc, list(range(12)), (0, 1), "t.a", golds)


def _mk_preds(inst, spans):
    return {"doc_id": inst.doc_id, "event_type": inst.event_type,
            "predictions": [{"start": s, "end": e, "role": r} for s, e, r in spans]}


def test_acceptance_5_metric_fixtures_and_oracle():
    fixtures = [
        # (golds, predictions, arg_i (p, r, f1), arg_c (p, r, f1))
        ([(2, 4, "a"), (5, 6, "b")], [(2, 4, "a"), (5, 6, "b")],
         (1.0, 1.0, 1.0), (1.0, 1.0, 1.0)),
        ([(2, 4, "a"), (5, 6, "b")], [(2, 4, "b"), (7, 8, "a")],
         (0.5, 0.5, 0.5), (0.0, 0.0, 0.0)),
        ([(2, 4, "a")], [], (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        ([(2, 4, "a")], [(2, 4, "a"), (6, 7, "a")],
         (0.5, 1.0, 2 / 3), (0.5, 1.0, 2 / 3)),
        ([(2, 4, "a"), (2, 4, "b")], [(2, 4, "a")],
         (1.0, 0.5, 2 / 3), (1.0, 0.5, 2 / 3)),
    ]
    for golds, preds, want_i, want_c in fixtures:
        inst = _mk_inst("d0", golds)
        rep = evaluate_f1([_mk_preds(inst, preds)], [inst])
        got_i = (rep.arg_i.precision, rep.arg_i.recall, rep.arg_i.f1)
        got_c = (rep.arg_c.precision, rep.arg_c.recall, rep.arg_c.f1)
        assert got_i == pytest.approx(want_i), (golds, preds, got_i)
        assert got_c == pytest.approx(want_c), (golds, preds, got_c)

    rng = make_rng(51, 0)
    roles = ["a", "b", "c"]
    for _ in range(200):
        golds = [(int(l), int(l) + int(rng.integers(1, 3)), str(rng.choice(roles)))
                 for l in rng.integers(0, 9, size=int(rng.integers(0, 6)))]
        preds = sorted({(int(l), int(l) + int(rng.integers(1, 3)), str(rng.choice(roles)))
                        for l in rng.integers(0, 9, size=int(rng.integers(0, 6)))})
        inst = _mk_inst("d0", golds)
        rep = evaluate_f1([_mk_preds(inst, preds)], [inst])
        # independent multiset-intersection oracle
        def inter(ps, gs):
            gs = list(gs)
            tp = 0
            for p in ps:
                if p in gs:
                    gs.remove(p)
                    tp += 1
            return tp
        tp_i = inter([(s, e) for s, e, _ in preds], [(s, e) for s, e, _ in golds])
        tp_c = inter(preds, golds)
        assert rep.arg_i.tp == tp_i and rep.arg_c.tp == tp_c
    report_pass(5, "metrics match 5 hand fixtures and 200 random oracle cases")


# ---------------------------------------------------------------------------
# 6. learning sanity (regression fixture)
# ---------------------------------------------------------------------------


def test_acceptance_6_learning_sanity(corpus):
    onto, train_insts, test_insts = corpus

    # overfit-one: loss under 1% of its starting value within 500 steps
    ex = ArgumentExtractor(acceptance_model_config(d_model=16, ffn_dim=32,
                                                   len_ins=2, len_tem=2), onto, seed=5)
    one = train(ex, [train_insts[0]],
                TrainConfig(batch_size=1, training_steps=500, learning_rate=3e-3,
                            warmup_ratio=0.05, eval_every=1000))
    ratio = one.loss_curve[-1] / one.loss_curve[0]
    assert ratio < 0.01, f"overfit-one ratio {ratio:.4f}"

    started = time.time()
    spec = BASELINE["learning"]
    extractor = ArgumentExtractor(acceptance_model_config(), onto, seed=spec["seed"])
    t_cfg = TrainConfig(batch_size=spec["batch_size"], training_steps=spec["steps"],
                        learning_rate=spec["learning_rate"], eval_every=500,
                        seed=spec["seed"])
    train(extractor, train_insts, t_cfg)
    report = evaluate_f1(predictions_for(extractor, test_insts), test_insts)
    elapsed = time.time() - started
    f1 = report.arg_c.f1
    fixture = BASELINE["learning"]["arg_c_f1_fixture"]
    threshold = BASELINE["learning"]["arg_c_f1_threshold"]
    assert f1 >= threshold, f"Arg-C F1 {f1:.4f} below threshold {threshold}"
    assert abs(f1 - fixture) <= 0.02 + 1e-9, f"Arg-C F1 {f1:.4f} vs fixture {fixture}"
    assert elapsed <= 900.0, f"took {elapsed:.0f}s"
    report_pass(6, f"overfit-one ratio {ratio:.4f}; corpus Arg-C F1 {f1:.4f} "
                   f"(fixture {fixture}, threshold {threshold}) in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. ablation ordering
# ---------------------------------------------------------------------------


def test_acceptance_7_ablation_ordering(corpus, tmp_path):
    onto, train_insts, test_insts = corpus
    spec = BASELINE["ablation"]
    t_cfg = TrainConfig(batch_size=spec["batch_size"], training_steps=spec["steps"],
                        learning_rate=spec["learning_rate"],
                        eval_every=spec["steps"], dev_fraction=0.0)
    started = time.time()
    rows = ablation_suite(onto, train_insts, test_insts, acceptance_model_config(),
                          t_cfg, ["full", "none", "no-egag"], seeds=[1, 2, 3, 4, 5])
    elapsed = time.time() - started
    md = ablation_markdown(rows)
    (tmp_path / "ablation.md").write_text(md)
    print("\n" + md)

    def mean_for(variant):
        vals = [r["arg_c_f1"] for r in rows if r["variant"] == variant]
        assert len(vals) == 5
        return float(np.mean(vals))

    full_mean = mean_for("full")
    none_mean = mean_for("none")
    noegag_mean = mean_for("no-egag")
    assert full_mean >= none_mean, f"full {full_mean:.4f} < none {none_mean:.4f}"
    assert full_mean >= noegag_mean, f"full {full_mean:.4f} < no-egag {noegag_mean:.4f}"
    report_pass(7, f"mean Arg-C over 5 seeds: full {full_mean:.4f} >= "
                   f"none {none_mean:.4f} and >= ungated {noegag_mean:.4f} "
                   f"({elapsed:.0f}s)")


# ---------------------------------------------------------------------------
# 8. determinism
# ---------------------------------------------------------------------------


def test_acceptance_8_byte_determinism(tmp_path):
    gen = ["gen-data", "--seed", "1", "--n-types", "4", "--n-roles", "4",
           "--roles-per-type", "2", "--train-contexts", "20", "--test-contexts", "6"]
    assert cli_main(gen + ["--out", str(tmp_path / "g1")]) == 0
    assert cli_main(gen + ["--out", str(tmp_path / "g2")]) == 0
    for name in ("ontology.json", "train.jsonl", "test.jsonl"):
        assert (tmp_path / "g1" / name).read_bytes() == (tmp_path / "g2" / name).read_bytes()

    tr = ["train", "--ontology", str(tmp_path / "g1" / "ontology.json"),
          "--data", str(tmp_path / "g1" / "train.jsonl"),
          "--seed", "3", "--steps", "12", "--batch-size", "2", "--d-model", "8",
          "--n-heads", "2", "--enc-layers", "1", "--dec-layers", "1", "--ffn-dim", "12",
          "--len-ins", "2", "--len-tem", "2", "--msl", "4", "--max-seq-len", "80"]
    assert cli_main(tr + ["--out", str(tmp_path / "t1")]) == 0
    assert cli_main(tr + ["--out", str(tmp_path / "t2")]) == 0
    c1 = (tmp_path / "t1" / "loss_curve.csv").read_bytes()
    c2 = (tmp_path / "t2" / "loss_curve.csv").read_bytes()
    assert c1 == c2
    k1 = (tmp_path / "t1" / "checkpoint.json").read_bytes()
    k2 = (tmp_path / "t2" / "checkpoint.json").read_bytes()
    assert k1 == k2
    report_pass(8, "gen-data and train artifacts are byte-identical across re-runs")


# ---------------------------------------------------------------------------
# 9. parameter-count ledger
# ---------------------------------------------------------------------------


def test_acceptance_9_parameter_count_ledger():
    onto = acceptance_ontology()
    mc = acceptance_model_config()
    counts = {v: variant_parameter_count(mc, onto, v)
              for v in ("tst", "full", "only-iop", "none", "no-egag")}
    assert counts["tst"] > counts["full"] > counts["only-iop"] > counts["none"], counts
    # the ungated variant's 1.5x lengths keep its parameter count near full's
    assert scaled_length(mc.len_ins, 1.5) == 12
    gap = abs(counts["no-egag"] - counts["full"])
    assert gap < counts["full"] - counts["none"], counts
    report_pass(9, f"parameter counts: tst {counts['tst']} > full {counts['full']} > "
                   f"only-iop {counts['only-iop']} > none {counts['none']} "
                   f"(ungated {counts['no-egag']})")

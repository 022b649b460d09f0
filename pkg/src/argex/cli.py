"""Command-line surface: data generation, training, evaluation, prediction,
ablations, prefix-length sweeps, and the gradient audit.

A run is driven by one JSON config document (sections: seed, variant, model,
train, data, ontology); individual flags override config values, and the
fully resolved config is written into the run directory so any run can be
reproduced bit-for-bit from its artifacts. All randomness comes from the
single seed; no environment variables are consulted.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import (
    ConfigError,
    DataConfig,
    EventOntology,
    GenerationError,
    OntologyConfig,
    ParseError,
    ValidationError,
    Vocab,
    dataset_statistics,
    generate_dataset,
    generate_ontology,
    read_jsonl,
    write_jsonl,
)
from .model import ArgumentExtractor, load_checkpoint, save_checkpoint
from .numerics import ContractViolation
from .train_eval import (
    ABLATION_ORDER,
    TrainConfig,
    ablation_markdown,
    ablation_suite,
    aggregate_rows,
    evaluate_f1,
    gradient_audit,
    predictions_for,
    prefix_length_sweep,
    sweep_svg,
    train,
    write_loss_curve,
    write_rows_csv,
)
from .transformer import ModelConfig

RUN_CONFIG_SECTIONS = ("model", "train", "data", "ontology")


@dataclass
class RunConfig:
    seed: int = 1
    variant: str = "full"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    ontology: OntologyConfig = field(default_factory=OntologyConfig)

    def resolved(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": self.data.to_dict(),
            "ontology": self.ontology.to_dict(),
            "version": __version__,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:10]


def load_run_config(path: str | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - set(RUN_CONFIG_SECTIONS) - {"seed", "variant"}
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    cfg.seed = int(doc.get("seed", cfg.seed))
    cfg.variant = str(doc.get("variant", cfg.variant))
    if "model" in doc:
        cfg.model = ModelConfig.from_dict(doc["model"])
    if "train" in doc:
        cfg.train = TrainConfig.from_dict(doc["train"])
    if "data" in doc:
        cfg.data = DataConfig.from_dict(doc["data"])
    if "ontology" in doc:
        cfg.ontology = OntologyConfig.from_dict(doc["ontology"])
    return cfg


_MODEL_FLAGS = {
    "d_model": "d_model", "n_heads": "n_heads", "enc_layers": "n_enc_layers",
    "dec_layers": "n_dec_layers", "ffn_dim": "ffn_dim", "msl": "msl",
    "len_ins": "len_ins", "len_tem": "len_tem", "max_seq_len": "max_seq_len",
    "template_variant": "template_variant",
}
_TRAIN_FLAGS = {
    "steps": "training_steps", "lr": "learning_rate", "batch_size": "batch_size",
    "warmup_ratio": "warmup_ratio", "max_grad_norm": "max_grad_norm",
    "eval_every": "eval_every",
}


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Flags win over the config file."""
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if getattr(args, "variant", None) is not None:
        cfg.variant = args.variant
    cfg.model.variant = cfg.variant
    for flag, fieldname in _MODEL_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.model, fieldname, v)
    for flag, fieldname in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            setattr(cfg.train, fieldname, v)
    cfg.train.seed = cfg.seed
    return cfg


def prepare_run_dir(cfg: RunConfig, out: str | None, command: str) -> Path:
    if out is not None:
        run_dir = Path(out)
    else:
        run_dir = Path("runs") / f"{command}-{cfg.config_hash()}-s{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.resolved(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    (run_dir / "version.txt").write_text(f"argex {__version__}\n", encoding="utf-8")
    return run_dir


def _parse_int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip() != ""]


def _parse_dist(text: str) -> dict[int, float]:
    out: dict[int, float] = {}
    for part in text.split(","):
        k, v = part.split(":")
        out[int(k)] = float(v)
    return out


def _load_corpus(ontology_path: str, data_path: str):
    ontology = EventOntology.load(ontology_path)
    vocab = Vocab.build(ontology)
    instances = read_jsonl(data_path, vocab)
    return ontology, vocab, instances


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    for flag, fieldname in [("n_types", "n_types"), ("n_roles", "n_roles"),
                            ("roles_per_type", "roles_per_type"),
                            ("slot_multiplicity_prob", "slot_multiplicity_prob")]:
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg.ontology, fieldname, v)
    for flag, fieldname in [("overlap_prob", "overlap_prob"),
                            ("distractor_rate", "distractor_rate"),
                            ("context_len", "context_len")]:
        v = getattr(args, flag)
        if v is not None:
            setattr(cfg.data, fieldname, v)
    if args.events_per_context is not None:
        cfg.data.events_per_context = _parse_dist(args.events_per_context)
    if args.train_contexts is not None:
        cfg.data.n_contexts = args.train_contexts

    run_dir = prepare_run_dir(cfg, args.out, "gen-data")
    ontology = generate_ontology(cfg.ontology, cfg.seed)
    vocab = Vocab.build(ontology)
    ontology.save(run_dir / "ontology.json")

    train_insts = generate_dataset(ontology, cfg.data, cfg.seed, stream=0)
    test_cfg = DataConfig.from_dict(cfg.data.to_dict())
    test_cfg.n_contexts = args.test_contexts or max(1, cfg.data.n_contexts // 4)
    test_insts = generate_dataset(ontology, test_cfg, cfg.seed, stream=1)
    write_jsonl(run_dir / "train.jsonl", train_insts, vocab)
    write_jsonl(run_dir / "test.jsonl", test_insts, vocab)
    stats = {
        "train": dataset_statistics(train_insts),
        "test": dataset_statistics(test_insts),
        "vocab_size": len(vocab),
    }
    with open(run_dir / "stats.json", "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"wrote ontology + {len(train_insts)} train / {len(test_insts)} test events to {run_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    ontology, vocab, instances = _load_corpus(args.ontology, args.data)
    dev = read_jsonl(args.dev, vocab) if args.dev is not None else None
    run_dir = prepare_run_dir(cfg, args.out, "train")

    cfg.model.vocab_size = 0
    extractor = ArgumentExtractor(cfg.model, ontology, seed=cfg.seed)
    started = time.time()
    last = {"step": 0}

    def progress(step: int, loss: float) -> None:
        if args.verbose and (step % 100 == 0 or step == 1):
            print(f"step {step:6d}  loss {loss:10.4f}")
        last["step"] = step

    result = train(extractor, instances, cfg.train, dev_instances=dev, progress=progress)
    save_checkpoint(run_dir / "checkpoint.json", extractor)
    write_loss_curve(run_dir / "loss_curve.csv", result.loss_curve)
    summary = {
        "steps": last["step"],
        "final_loss": result.loss_curve[-1],
        "best_dev_arg_c_f1": result.best_dev_f1,
        "best_step": result.best_step,
        "wall_seconds": time.time() - started,
    }
    with open(run_dir / "train_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    print(f"trained {last['step']} steps; best dev Arg-C F1 "
          f"{result.best_dev_f1:.4f} at step {result.best_step}; artifacts in {run_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ontology, _vocab, instances = _load_corpus(args.ontology, args.data)
    extractor = load_checkpoint(args.checkpoint, ontology)
    report = evaluate_f1(predictions_for(extractor, instances), instances)
    doc = report.to_dict()
    text = json.dumps(doc, sort_keys=True, indent=1)
    if args.out is not None:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)
    print(f"Arg-I F1 {report.arg_i.f1:.4f} | Arg-C F1 {report.arg_c.f1:.4f} "
          f"over {report.n_events} events")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    ontology, _vocab, instances = _load_corpus(args.ontology, args.data)
    extractor = load_checkpoint(args.checkpoint, ontology)
    pred_sets = predictions_for(extractor, instances)
    with open(args.out, "w", encoding="utf-8") as fh:
        for ps in pred_sets:
            fh.write(json.dumps(ps, sort_keys=True) + "\n")
    print(f"wrote predictions for {len(pred_sets)} events to {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    ontology, _vocab, train_insts = _load_corpus(args.ontology, args.train_data)
    test_insts = read_jsonl(args.test_data, Vocab.build(ontology))
    run_dir = prepare_run_dir(cfg, args.out, "ablate")
    variants = args.variants.split(",") if args.variants else list(ABLATION_ORDER)
    seeds = _parse_int_list(args.seeds)

    def progress(msg: str) -> None:
        print(msg)

    rows = ablation_suite(ontology, train_insts, test_insts, cfg.model, cfg.train,
                          variants, seeds, progress=progress if args.verbose else None)
    write_rows_csv(run_dir / "ablation.csv", rows)
    md = ablation_markdown(rows)
    (run_dir / "ablation.md").write_text(md, encoding="utf-8")
    print(md)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    ontology, _vocab, train_insts = _load_corpus(args.ontology, args.train_data)
    test_insts = read_jsonl(args.test_data, Vocab.build(ontology))
    run_dir = prepare_run_dir(cfg, args.out, "sweep")
    lengths = _parse_int_list(args.lengths)
    seeds = _parse_int_list(args.seeds)
    rows = []
    for family in args.families.split(","):
        rows.extend(prefix_length_sweep(
            ontology, train_insts, test_insts, cfg.model, cfg.train,
            family.strip(), lengths, seeds,
            progress=print if args.verbose else None,
        ))
    write_rows_csv(run_dir / "sweep.csv", rows)
    if args.plot:
        sweep_svg(rows, run_dir / "sweep.svg")
    for family in sorted({r["family"] for r in rows}):
        fam_rows = [r for r in rows if r["family"] == family]
        for agg in sorted(aggregate_rows(fam_rows, key="length"), key=lambda a: a["length"]):
            print(f"{family} length {agg['length']:3d}: Arg-C F1 {100 * agg['arg_c_f1_mean']:.1f}"
                  f" +- {100 * agg['arg_c_f1_std']:.1f}")
    print(f"sweep artifacts in {run_dir}")
    return 0


def cmd_grad_check(args: argparse.Namespace) -> int:
    onto_cfg = OntologyConfig(n_types=2, n_roles=3, roles_per_type=2,
                              slot_multiplicity_prob=0.5, entity_pool_size=8,
                              filler_pool_size=4)
    ontology = generate_ontology(onto_cfg, args.seed)
    data_cfg = DataConfig(n_contexts=2, events_per_context={1: 1.0}, overlap_prob=0.0,
                          distractor_rate=0.2, context_len=64)
    instances = generate_dataset(ontology, data_cfg, args.seed)[:2]
    model_cfg = ModelConfig(
        d_model=args.d_model, n_heads=2, n_enc_layers=2, n_dec_layers=1,
        ffn_dim=2 * args.d_model, msl=5, len_ins=4, len_tem=4,
        max_seq_len=80, variant="full",
    )
    extractor = ArgumentExtractor(model_cfg, ontology, seed=args.seed)
    audit = gradient_audit(extractor, instances, samples_per_family=args.samples,
                           eps=args.eps, seed=args.seed)
    for family, worst in sorted(audit["per_family"].items()):
        print(f"{family:14s} worst relative error {worst:.3e}")
    print(f"checked {audit['n_checked']} sampled parameters; "
          f"worst relative error {audit['worst']:.3e} (tolerance {args.tolerance:.1e})")
    return 0 if audit["worst"] < args.tolerance else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="argex",
        description="Span-based event argument extraction with gated attention prefixes.",
    )
    parser.add_argument("--version", action="version", version=f"argex {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, config: bool = True) -> None:
        if config:
            p.add_argument("--config", help="JSON run config; flags override it")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate ontology + JSONL corpus")
    common(p)
    p.add_argument("--out", help="output directory (default: runs/<hash>-s<seed>)")
    p.add_argument("--n-types", type=int)
    p.add_argument("--n-roles", type=int)
    p.add_argument("--roles-per-type", type=int)
    p.add_argument("--slot-multiplicity-prob", type=float)
    p.add_argument("--train-contexts", type=int)
    p.add_argument("--test-contexts", type=int)
    p.add_argument("--overlap-prob", type=float)
    p.add_argument("--distractor-rate", type=float)
    p.add_argument("--context-len", type=int)
    p.add_argument("--events-per-context", help='distribution like "1:0.6,2:0.4"')
    p.set_defaults(func=cmd_gen_data)

    def model_train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--variant", help="prefix variant (full, sp, only-iop, ...)")
        p.add_argument("--d-model", type=int)
        p.add_argument("--n-heads", type=int)
        p.add_argument("--enc-layers", type=int)
        p.add_argument("--dec-layers", type=int)
        p.add_argument("--ffn-dim", type=int)
        p.add_argument("--msl", type=int)
        p.add_argument("--len-ins", type=int)
        p.add_argument("--len-tem", type=int)
        p.add_argument("--max-seq-len", type=int)
        p.add_argument("--template-variant", choices=["type-part", "type-markers"])
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--warmup-ratio", type=float)
        p.add_argument("--max-grad-norm", type=float)
        p.add_argument("--eval-every", type=int)

    p = sub.add_parser("train", help="train a model on a JSONL corpus")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True, help="training JSONL")
    p.add_argument("--dev", help="dev JSONL (default: split from training data)")
    p.add_argument("--out", help="run directory")
    model_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a JSONL corpus")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="write the report JSON here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump predictions JSONL for a corpus")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ontology", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="train and compare prefix variants")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--variants", help="comma list (default: all)")
    p.add_argument("--seeds", default="1,2,3,4,5")
    model_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="prefix-length sweep for one or both families")
    common(p)
    p.add_argument("--ontology", required=True)
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", help="run directory")
    p.add_argument("--families", default="ins", help="comma list out of ins,tem")
    p.add_argument("--lengths", required=True, help="comma list of prefix lengths")
    p.add_argument("--seeds", default="1")
    p.add_argument("--plot", action="store_true", help="also write an SVG curve")
    model_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("grad-check", help="finite-difference audit of the tape gradients")
    common(p, config=False)
    p.add_argument("--d-model", type=int, default=8)
    p.add_argument("--samples", type=int, default=30, help="samples per parameter family")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seed", None) is None and hasattr(args, "seed"):
        args.seed = 1
    try:
        return args.func(args)
    except (ConfigError, ParseError, ValidationError, GenerationError,
            ContractViolation, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Training loop, AdamW with linear warmup/decay, metrics, and experiment harnesses.

Metrics: a predicted argument counts for identification (Arg-I) when its
boundary equals some gold span of the event, and for classification (Arg-C)
when boundary and role both match. Scores are micro-averaged over all events;
matching is multiset intersection so a span can absorb at most as many
predictions as it has gold occurrences.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import numerics as nm
from .data import ConfigError, EventInstance, EventOntology, ValidationError
from .model import ArgumentExtractor, parameter_families
from .numerics import Tape, Tensor, finite_diff_gradient, make_rng, relative_error
from .prefixes import VARIANTS, normalize_variant
from .transformer import ModelConfig


@dataclass
class TrainConfig:
    batch_size: int = 8
    training_steps: int = 1200
    learning_rate: float = 3e-4
    warmup_ratio: float = 0.1
    max_grad_norm: float = 5.0
    weight_decay: float = 0.01
    seed: int = 1
    eval_every: int = 300
    dev_fraction: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside [0, 1)")
        for name in ("batch_size", "training_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0 or self.max_grad_norm <= 0:
            raise ConfigError("learning_rate and max_grad_norm must be positive")
        if not 0.0 <= self.dev_fraction < 1.0:
            raise ConfigError("dev_fraction must be in [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def warmup_steps(config: TrainConfig) -> int:
    return max(1, round(config.training_steps * config.warmup_ratio))


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Learning rate at a 1-indexed step: linear ramp to the configured rate
    over the warmup, then linear decay to 0 at training_steps (0 afterwards)."""
    w = warmup_steps(config)
    t = config.training_steps
    if step <= w:
        return config.learning_rate * step / w
    if step >= t:
        return 0.0
    return config.learning_rate * (t - step) / (t - w)


def clip_global_norm(grads: Iterable[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is <= max_norm;
    returns the factor applied (1.0 when already under the bound)."""
    gs = list(grads)
    total = math.sqrt(sum(float((g * g).sum()) for g in gs))
    if total <= max_norm or total == 0.0:
        return 1.0
    factor = max_norm / total
    for g in gs:
        g *= factor
    return factor


class AdamW:
    """Decoupled-weight-decay Adam. Parameters whose grad is None are left
    untouched entirely (no decay), so unused per-type prefixes stay fixed."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data)
                self._v[name] = np.zeros_like(p.data)
                self._t[name] = 0
            self._t[name] += 1
            t = self._t[name]
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def optimizer_step(optimizer: AdamW, step: int, config: TrainConfig) -> float:
    """Clip, look up the scheduled rate for this 1-indexed step, update.
    Returns the learning rate used."""
    grads = [p.grad for p in optimizer.params.values() if p.grad is not None]
    clip_global_norm(grads, config.max_grad_norm)
    lr = lr_schedule(step, config)
    optimizer.step(lr)
    optimizer.zero_grad()
    return lr


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class MetricBlock:
    tp: int = 0
    n_pred: int = 0
    n_gold: int = 0

    @property
    def precision(self) -> float:
        return self.tp / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def add(self, tp: int, n_pred: int, n_gold: int) -> None:
        self.tp += tp
        self.n_pred += n_pred
        self.n_gold += n_gold

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1,
                "tp": self.tp, "n_pred": self.n_pred, "n_gold": self.n_gold}


@dataclass
class EvalReport:
    arg_i: MetricBlock = field(default_factory=MetricBlock)
    arg_c: MetricBlock = field(default_factory=MetricBlock)
    n_events: int = 0
    breakdowns: dict[str, "EvalReport"] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"arg_i": self.arg_i.to_dict(), "arg_c": self.arg_c.to_dict(),
               "n_events": self.n_events}
        if self.breakdowns:
            out["breakdowns"] = {k: v.to_dict() for k, v in self.breakdowns.items()}
        return out


Prediction = tuple[int, int, str]  # (start, end, role); an optional score may trail


def _as_spans(preds: Iterable) -> list[tuple[int, int, str]]:
    return [(int(p[0]), int(p[1]), str(p[2])) for p in preds]


def _count_event(block_i: MetricBlock, block_c: MetricBlock,
                 preds: list[tuple[int, int, str]],
                 golds: list[tuple[int, int, str]]) -> None:
    pred_spans = Counter((s, e) for s, e, _r in preds)
    gold_spans = Counter((s, e) for s, e, _r in golds)
    tp_i = sum(min(c, gold_spans[k]) for k, c in pred_spans.items())
    pred_full = Counter(preds)
    gold_full = Counter(golds)
    tp_c = sum(min(c, gold_full[k]) for k, c in pred_full.items())
    block_i.add(tp_i, len(preds), len(golds))
    block_c.add(tp_c, len(preds), len(golds))


def evaluate_f1(pred_sets: list[dict], instances: list[EventInstance]) -> EvalReport:
    """Micro-averaged Arg-I / Arg-C over all events, with breakdowns by
    events-per-context (single vs multi) and argument overlap.

    pred_sets[i] must describe instances[i]: {"doc_id", "event_type",
    "predictions": [{"start", "end", "role", ...}]}.
    """
    if len(pred_sets) != len(instances):
        raise ValidationError(
            f"{len(pred_sets)} prediction sets for {len(instances)} instances"
        )
    by_doc: dict[str, list[EventInstance]] = {}
    for inst in instances:
        by_doc.setdefault(inst.doc_id, []).append(inst)

    report = EvalReport()
    for key in ("single", "multi", "overlapping", "non_overlapping"):
        report.breakdowns[key] = EvalReport()

    for ps, inst in zip(pred_sets, instances):
        if ps["doc_id"] != inst.doc_id:
            raise ValidationError(f"prediction doc_id {ps['doc_id']!r} != {inst.doc_id!r}")
        preds = _as_spans((p["start"], p["end"], p["role"]) for p in ps["predictions"])
        golds = [(s, e, r) for (s, e, r) in inst.gold_args]

        siblings = [o for o in by_doc[inst.doc_id] if o is not inst]
        sibling_spans = {(s, e) for o in siblings for (s, e, _r) in o.gold_args}
        is_multi = bool(siblings)
        overlaps = any((s, e) in sibling_spans for (s, e, _r) in inst.gold_args)

        targets = [report, report.breakdowns["multi" if is_multi else "single"],
                   report.breakdowns["overlapping" if overlaps else "non_overlapping"]]
        for tgt in targets:
            _count_event(tgt.arg_i, tgt.arg_c, preds, golds)
            tgt.n_events += 1
    return report


def predictions_for(extractor: ArgumentExtractor,
                    instances: list[EventInstance]) -> list[dict]:
    """Run prediction over a dataset; output matches the dump JSONL schema."""
    out = []
    for inst in instances:
        preds = extractor.predict(inst)
        out.append({
            "doc_id": inst.doc_id,
            "event_type": inst.event_type,
            "predictions": [
                {"start": s, "end": e, "role": r, "score": sc} for (s, e, r, sc) in preds
            ],
        })
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    loss_curve: list[float]
    dev_history: list[tuple[int, float]]     # (step, dev Arg-C f1)
    best_dev_f1: float
    best_step: int
    final_params: dict[str, np.ndarray]      # best-dev snapshot, already restored


def split_dev(instances: list[EventInstance], fraction: float, seed: int
              ) -> tuple[list[EventInstance], list[EventInstance]]:
    """Split off a dev set by whole contexts so sibling events never leak."""
    docs = sorted({i.doc_id for i in instances})
    rng = make_rng(seed, 41)
    order = rng.permutation(len(docs))
    n_dev = int(len(docs) * fraction)
    dev_docs = {docs[i] for i in order[:n_dev]}
    train = [i for i in instances if i.doc_id not in dev_docs]
    dev = [i for i in instances if i.doc_id in dev_docs]
    return train, dev


def train(extractor: ArgumentExtractor, instances: list[EventInstance],
          config: TrainConfig, dev_instances: Optional[list[EventInstance]] = None,
          progress: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Supervised loop over the span loss with periodic dev evaluation;
    the best-dev parameter snapshot is restored before returning."""
    config.validate()
    if not instances:
        raise ConfigError("empty training set")
    if dev_instances is None:
        train_insts, dev_insts = split_dev(instances, config.dev_fraction, config.seed)
        if not train_insts:  # tiny datasets: train on everything, skip dev
            train_insts, dev_insts = instances, []
    else:
        train_insts, dev_insts = instances, dev_instances

    params = extractor.named_parameters()
    optimizer = AdamW(params, weight_decay=config.weight_decay)
    rng = make_rng(config.seed, 42)
    order: list[int] = []
    loss_curve: list[float] = []
    dev_history: list[tuple[int, float]] = []
    best_f1, best_step = -1.0, 0
    best_snapshot: Optional[dict[str, np.ndarray]] = None
    reduction = extractor.config.loss_reduction

    def eval_dev(step: int) -> None:
        nonlocal best_f1, best_step, best_snapshot
        if not dev_insts:
            return
        report = evaluate_f1(predictions_for(extractor, dev_insts), dev_insts)
        f1 = report.arg_c.f1
        dev_history.append((step, f1))
        if f1 > best_f1:
            best_f1, best_step = f1, step
            best_snapshot = {k: p.data.copy() for k, p in params.items()}

    for step in range(1, config.training_steps + 1):
        batch = []
        for _ in range(config.batch_size):
            if not order:
                order = list(rng.permutation(len(train_insts)))
            batch.append(train_insts[order.pop()])
        try:
            with Tape() as tape:
                total = None
                for inst in batch:
                    loss, _targets = extractor.loss(inst)
                    total = loss if total is None else nm.add(total, loss)
                if reduction == "mean":
                    total = nm.scale(total, 1.0 / len(batch))
                tape.backward(total)
            value = total.item()
        except (nm.ContractViolation, FloatingPointError) as exc:
            # saturated attention / overflowed activations: the run has diverged
            raise RuntimeError(
                f"divergence at step {step}: forward failed ({exc}); lower the learning rate"
            ) from exc
        if not math.isfinite(value):
            raise RuntimeError(
                f"divergence at step {step}: loss={value}; lower the learning rate"
            )
        loss_curve.append(value)
        optimizer_step(optimizer, step, config)
        if progress is not None:
            progress(step, value)
        if step % config.eval_every == 0 or step == config.training_steps:
            eval_dev(step)

    if best_snapshot is None:
        best_snapshot = {k: p.data.copy() for k, p in params.items()}
        best_step = config.training_steps
    else:
        for k, p in params.items():
            p.data = best_snapshot[k].copy()
    return TrainResult(
        loss_curve=loss_curve,
        dev_history=dev_history,
        best_dev_f1=best_f1,
        best_step=best_step,
        final_params=best_snapshot,
    )


def gradient_audit(extractor: ArgumentExtractor, instances: list[EventInstance],
                   samples_per_family: int = 30, eps: float = 1e-4,
                   seed: int = 0) -> dict:
    """Compare tape gradients of the span loss against central differences.

    Gold-to-slot targets are assigned once at the current parameters and
    frozen, so the objective probed by the finite differences is a fixed
    smooth function. Sampled indices are drawn per parameter family,
    preferring entries with nonzero analytic gradient (rows of unused token
    embeddings would only compare zero against zero). Returns the worst
    relative error overall and per family.
    """
    params = extractor.named_parameters()
    families = parameter_families(list(params))
    frozen = [extractor.loss(inst)[1] for inst in instances]

    def objective() -> float:
        return sum(
            extractor.loss(inst, frozen_targets=tg)[0].item()
            for inst, tg in zip(instances, frozen)
        )

    with Tape() as tape:
        total = None
        for inst, tg in zip(instances, frozen):
            loss, _ = extractor.loss(inst, frozen_targets=tg)
            total = loss if total is None else nm.add(total, loss)
        tape.backward(total)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None

    rng = make_rng(seed, 77)
    worst_overall = 0.0
    per_family: dict[str, float] = {}
    n_checked = 0
    for family, names in families.items():
        worst = 0.0
        for _ in range(samples_per_family):
            name = names[int(rng.integers(len(names)))]
            flat = analytic[name].reshape(-1)
            candidates = np.flatnonzero(flat)
            if candidates.size == 0:
                candidates = np.arange(flat.size)
            idx = int(candidates[int(rng.integers(candidates.size))])
            fd = finite_diff_gradient(objective, params[name], idx, eps)
            err = relative_error(float(flat[idx]), fd)
            worst = max(worst, err)
            n_checked += 1
        per_family[family] = worst
        worst_overall = max(worst_overall, worst)
    return {"worst": worst_overall, "per_family": per_family, "n_checked": n_checked}


def smoothed(values: list[float], window: int) -> list[float]:
    """Trailing moving average; shorter prefixes average what exists."""
    out = []
    acc = 0.0
    for i, v in enumerate(values):
        acc += v
        if i >= window:
            acc -= values[i - window]
        out.append(acc / min(i + 1, window))
    return out


# ---------------------------------------------------------------------------
# experiment harnesses
# ---------------------------------------------------------------------------

ABLATION_ORDER = ["full", "sp", "only-iop", "only-top", "none", "tst", "no-egag", "s-guided"]
ABLATION_LABELS = {
    "full": "full (dual gated prefixes)",
    "sp": "shared prefix",
    "only-iop": "only instance prefix",
    "only-top": "only template prefix",
    "none": "no prefixes",
    "tst": "per-type template prefix",
    "no-egag": "ungated (1.5x length)",
    "s-guided": "sentence-guided gate",
}


def build_extractor(model_config: ModelConfig, ontology: EventOntology,
                    variant: str, seed: int) -> ArgumentExtractor:
    cfg = ModelConfig.from_dict(model_config.to_dict())
    cfg.variant = normalize_variant(variant)
    cfg.vocab_size = 0  # re-derive from the ontology
    return ArgumentExtractor(cfg, ontology, seed=seed)


def variant_parameter_count(model_config: ModelConfig, ontology: EventOntology,
                            variant: str) -> int:
    return build_extractor(model_config, ontology, variant, seed=0).parameter_count()


def run_single_arm(ontology: EventOntology, train_insts: list[EventInstance],
                   test_insts: list[EventInstance], model_config: ModelConfig,
                   train_config: TrainConfig, variant: str, seed: int) -> dict:
    extractor = build_extractor(model_config, ontology, variant, seed)
    t_cfg = TrainConfig.from_dict(train_config.to_dict())
    t_cfg.seed = seed
    result = train(extractor, train_insts, t_cfg)
    report = evaluate_f1(predictions_for(extractor, test_insts), test_insts)
    return {
        "variant": normalize_variant(variant),
        "seed": seed,
        "arg_i_f1": report.arg_i.f1,
        "arg_c_f1": report.arg_c.f1,
        "arg_i_precision": report.arg_i.precision,
        "arg_i_recall": report.arg_i.recall,
        "arg_c_precision": report.arg_c.precision,
        "arg_c_recall": report.arg_c.recall,
        "param_count": extractor.parameter_count(),
        "best_dev_f1": result.best_dev_f1,
        "final_train_loss": result.loss_curve[-1],
    }


def ablation_suite(ontology: EventOntology, train_insts: list[EventInstance],
                   test_insts: list[EventInstance], model_config: ModelConfig,
                   train_config: TrainConfig, variants: list[str], seeds: list[int],
                   progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train and evaluate each variant under identical data and seeds."""
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    variants = [normalize_variant(v) for v in variants]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}")
    rows = []
    for variant in sorted(variants, key=ABLATION_ORDER.index):
        for seed in seeds:
            if progress is not None:
                progress(f"training variant={variant} seed={seed}")
            rows.append(run_single_arm(ontology, train_insts, test_insts,
                                       model_config, train_config, variant, seed))
    return rows


def aggregate_rows(rows: list[dict], key: str = "variant") -> list[dict]:
    groups: dict[object, list[dict]] = {}
    for row in rows:
        groups.setdefault(row[key], []).append(row)
    out = []
    for k, grp in groups.items():
        entry = {key: k, "n_runs": len(grp)}
        for metric in ("arg_i_f1", "arg_c_f1"):
            vals = np.array([r[metric] for r in grp])
            entry[f"{metric}_mean"] = float(vals.mean())
            entry[f"{metric}_std"] = float(vals.std())
        entry["param_count"] = grp[0]["param_count"]
        out.append(entry)
    return out


def ablation_markdown(rows: list[dict]) -> str:
    """Aggregate per-variant table in the two-column ablation layout."""
    agg = {a["variant"]: a for a in aggregate_rows(rows)}
    lines = [
        "| No. | Model | Arg-I F1 | Arg-C F1 | Params |",
        "|----:|:------|:--------:|:--------:|------:|",
    ]
    idx = 0
    for variant in ABLATION_ORDER:
        if variant not in agg:
            continue
        idx += 1
        a = agg[variant]
        lines.append(
            "| {no} | {label} | {i_mean:.1f} +- {i_std:.1f} | {c_mean:.1f} +- {c_std:.1f} | {params} |".format(
                no=idx, label=ABLATION_LABELS[variant],
                i_mean=100 * a["arg_i_f1_mean"], i_std=100 * a["arg_i_f1_std"],
                c_mean=100 * a["arg_c_f1_mean"], c_std=100 * a["arg_c_f1_std"],
                params=a["param_count"],
            )
        )
    return "\n".join(lines) + "\n"


def write_rows_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_loss_curve(path, curve: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(curve, start=1):
            writer.writerow([i, repr(v)])


def prefix_length_sweep(ontology: EventOntology, train_insts: list[EventInstance],
                        test_insts: list[EventInstance], model_config: ModelConfig,
                        train_config: TrainConfig, family: str, lengths: list[int],
                        seeds: list[int],
                        progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    """Train once per (length, seed) for one prefix family, the other fixed."""
    if family not in ("ins", "tem"):
        raise ConfigError(f"family must be 'ins' or 'tem', got {family!r}")
    if not lengths:
        raise ConfigError("sweep needs at least one length")
    rows = []
    for length in lengths:
        if length < 0:
            raise ConfigError("prefix lengths must be >= 0")
        cfg = ModelConfig.from_dict(model_config.to_dict())
        if family == "ins":
            cfg.len_ins = length
        else:
            cfg.len_tem = length
        for seed in seeds:
            if progress is not None:
                progress(f"training family={family} length={length} seed={seed}")
            row = run_single_arm(ontology, train_insts, test_insts, cfg,
                                 train_config, cfg.variant, seed)
            rows.append({"family": family, "length": length, **row})
    return rows


def sweep_svg(rows: list[dict], path) -> None:
    """Line plot of mean Arg-C F1 against prefix length, one line per family."""
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    for family in sorted({r["family"] for r in rows}):
        sub = [r for r in rows if r["family"] == family]
        lengths = sorted({r["length"] for r in sub})
        means = [float(np.mean([r["arg_c_f1"] for r in sub if r["length"] == L])) for L in lengths]
        ax.plot(lengths, [100 * v for v in means], marker="o", label=f"{family} prefix")
    ax.set_xlabel("prefix length")
    ax.set_ylabel("Arg-C F1")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)

"""End-to-end span extraction head.

Pipeline per event (one event per forward pass): mark the trigger in the
context, run the context through encoder+decoder with instance prefixes,
run the event's template through encoder+decoder (cross-attending the
context encoding) with template prefixes, pool a selector vector per role
slot, score every context position for span start/end, and pick the best
candidate span per slot.

Span convention: (l, r) with l inclusive and r exclusive; the end logit for
a non-empty span is read at position r - 1, and the empty span (0, 0) reads
both logits at the sequence-start token. A slot's candidate set is
{(l, r) : 0 < r - l < msl} plus the empty span, so spans are at most
msl - 1 tokens long.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .data import (
    ConfigError,
    EventInstance,
    EventOntology,
    TemplateSpec,
    ValidationError,
    Vocab,
    build_template,
    template_type_guide_positions,
)
from .numerics import Tensor, make_rng
from .prefixes import PassPrefixes, make_variant
from .transformer import ModelConfig, TransformerCore

CHECKPOINT_FORMAT = "argex-checkpoint@1"


@dataclass
class PreparedContext:
    """Context with trigger markers inserted and all spans re-indexed."""

    doc_id: str
    event_type: str
    ids: list[int]
    trigger_positions: list[int]
    gold_args: list[tuple[int, int, str]]
    pos_to_orig: list[Optional[int]]  # prepared position -> original token index

    @property
    def length(self) -> int:
        return len(self.ids)


def prepare_context(instance: EventInstance, vocab: Vocab) -> PreparedContext:
    """Insert <t>...</t> around the trigger and wrap in sequence delimiters.

    Original token i moves to i+1 before the trigger, i+2 inside it, and
    i+3 after it (start token plus zero, one, or two markers in front).
    """
    n = len(instance.context_tokens)
    ts, te = instance.trigger
    if not (0 <= ts < te <= n):
        raise ValidationError(f"{instance.doc_id}: trigger {instance.trigger} out of bounds")

    toks = instance.context_tokens
    ids = (
        [vocab.encode(Vocab.BOS)]
        + toks[:ts]
        + [vocab.encode(Vocab.TRIG_OPEN)]
        + toks[ts:te]
        + [vocab.encode(Vocab.TRIG_CLOSE)]
        + toks[te:]
        + [vocab.encode(Vocab.EOS)]
    )

    def remap(i: int) -> int:
        if i < ts:
            return i + 1
        if i < te:
            return i + 2
        return i + 3

    pos_to_orig: list[Optional[int]] = [None] * len(ids)
    for i in range(n):
        pos_to_orig[remap(i)] = i

    gold = [(remap(s), remap(e - 1) + 1, r) for (s, e, r) in instance.gold_args]
    return PreparedContext(
        doc_id=instance.doc_id,
        event_type=instance.event_type,
        ids=ids,
        trigger_positions=list(range(remap(ts), remap(te - 1) + 1)),
        gold_args=gold,
        pos_to_orig=pos_to_orig,
    )


def prepared_span_to_original(prepared: PreparedContext, l: int, r: int) -> Optional[tuple[int, int]]:
    """Map a prepared-coordinate span back to original token coordinates.

    Marker and delimiter positions are clipped away; a span covering no
    real tokens maps to None (treated as no argument).
    """
    reals = [o for p in range(l, r) if 0 <= p < len(prepared.pos_to_orig)
             and (o := prepared.pos_to_orig[p]) is not None]
    if not reals:
        return None
    return (min(reals), max(reals) + 1)


# ---------------------------------------------------------------------------
# candidate spans, decoding, gold assignment, loss
# ---------------------------------------------------------------------------


def enumerate_candidates(n: int, msl: int) -> list[tuple[int, int]]:
    """The empty span plus every (l, r) with 0 < r - l < msl, r <= n."""
    out = [(0, 0)]
    for l in range(n):
        for r in range(l + 1, min(l + msl - 1, n) + 1):
            out.append((l, r))
    return out


def span_score(start_row: np.ndarray, end_row: np.ndarray, l: int, r: int) -> float:
    if (l, r) == (0, 0):
        return float(start_row[0] + end_row[0])
    return float(start_row[l] + end_row[r - 1])


def decode_slot(start_row: np.ndarray, end_row: np.ndarray, msl: int) -> tuple[int, int, float]:
    """Argmax over the candidate set with the documented tie-break:
    smallest l, then smallest r, and (0, 0) wins any tie it is part of."""
    n = start_row.shape[0]
    empty_score = float(start_row[0] + end_row[0])
    score = np.full((n, n + 1), -np.inf)
    for w in range(1, min(msl - 1, n) + 1):
        ls = np.arange(0, n - w + 1)
        score[ls, ls + w] = start_row[: n - w + 1] + end_row[w - 1 : n]
    flat = int(np.argmax(score))  # row-major: first max is lexicographically least (l, r)
    best = float(score.reshape(-1)[flat])
    if empty_score >= best:
        return (0, 0, empty_score)
    return (flat // (n + 1), flat % (n + 1), best)


@dataclass
class SpanPrediction:
    """Per-slot picks plus the deduplicated event-level prediction set."""

    slot_spans: list[tuple[int, int, float]]          # (l, r, score) per slot
    arguments: list[tuple[int, int, str, float]]      # deduplicated (l, r, role, score)


def decode_spans(start_logits: np.ndarray, end_logits: np.ndarray,
                 slot_roles: list[str], msl: int) -> SpanPrediction:
    slot_spans = [
        decode_slot(start_logits[k], end_logits[k], msl) for k in range(start_logits.shape[0])
    ]
    best: dict[tuple[int, int, str], float] = {}
    for (l, r, score), role in zip(slot_spans, slot_roles):
        if (l, r) == (0, 0):
            continue
        key = (l, r, role)
        if key not in best or score > best[key]:
            best[key] = score
    arguments = sorted((l, r, role, s) for (l, r, role), s in best.items())
    return SpanPrediction(slot_spans=slot_spans, arguments=arguments)


def _log_softmax(rows: np.ndarray) -> np.ndarray:
    shifted = rows - rows.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def assign_gold_targets(
    template: TemplateSpec,
    gold_args: list[tuple[int, int, str]],
    start_logits: np.ndarray,
    end_logits: np.ndarray,
) -> list[tuple[int, int]]:
    """Assign gold spans to slots of the same role by minimum total loss.

    Returns per-slot (start, end) target indices in logit coordinates:
    a non-empty gold (l, r) becomes (l, r - 1); unfilled slots get (0, 0).
    Slot multiplicities are small, so the per-role assignment is exhausted
    by brute force over permutations.
    """
    ls, le = _log_softmax(start_logits), _log_softmax(end_logits)
    slots_by_role: dict[str, list[int]] = {}
    for k, (role, _rng) in enumerate(template.slot_positions):
        slots_by_role.setdefault(role, []).append(k)
    golds_by_role: dict[str, list[tuple[int, int]]] = {}
    for s, e, r in gold_args:
        golds_by_role.setdefault(r, []).append((s, e))

    targets: list[tuple[int, int]] = [(0, 0)] * len(template.slot_positions)
    for role, golds in golds_by_role.items():
        slots = slots_by_role.get(role, [])
        if len(golds) > len(slots):
            raise ValidationError(
                f"{len(golds)} gold args for role {role!r} but only {len(slots)} slots"
            )
        best_cost, best_perm = None, None
        for perm in itertools.permutations(slots, len(golds)):
            cost = 0.0
            for (s, e), k in zip(golds, perm):
                cost -= ls[k, s] + le[k, e - 1]
            if best_cost is None or cost < best_cost:
                best_cost, best_perm = cost, perm
        for (s, e), k in zip(golds, best_perm or ()):
            targets[k] = (s, e - 1)
    return targets


def compute_loss(start_logits: Tensor, end_logits: Tensor,
                 targets: list[tuple[int, int]]) -> Tensor:
    """Sum over slots of start and end negative log-likelihoods."""
    return nm.add(
        nm.row_nll(start_logits, [t[0] for t in targets]),
        nm.row_nll(end_logits, [t[1] for t in targets]),
    )


# ---------------------------------------------------------------------------
# the assembled extractor
# ---------------------------------------------------------------------------


class ArgumentExtractor:
    """Transformer core + prefix bank + span head, bound to one ontology."""

    def __init__(self, config: ModelConfig, ontology: EventOntology, seed: int):
        self.vocab = Vocab.build(ontology)
        if config.vocab_size == 0:
            config.vocab_size = len(self.vocab)
        if config.vocab_size != len(self.vocab):
            raise ConfigError(
                f"config vocab_size {config.vocab_size} does not match"
                f" ontology vocab size {len(self.vocab)}"
            )
        config.validate()
        self.config = config
        self.ontology = ontology
        self.core = TransformerCore.create(config, make_rng(seed, 11))
        self.bank, self.wiring = make_variant(config, ontology.type_names(), make_rng(seed, 12))
        self._templates: dict[str, TemplateSpec] = {}

    # -- plumbing -----------------------------------------------------------

    def template(self, event_type: str) -> TemplateSpec:
        if event_type not in self._templates:
            self._templates[event_type] = build_template(
                self.ontology, event_type, self.vocab, self.config.template_variant
            )
        return self._templates[event_type]

    def named_parameters(self) -> dict[str, Tensor]:
        merged = dict(self.core.params)
        merged.update(self.bank.named_parameters())
        return merged

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def _provider(self, side: str, family: Optional[str], event_type: str,
                  guide_positions: list[int]) -> Optional[PassPrefixes]:
        if family is None:
            return None
        guide = [0] if self.wiring.guide == "sentence" else guide_positions
        return PassPrefixes(self.bank, side, family, event_type, guide)

    # -- encoding passes ------------------------------------------------------

    def run_context_pass(self, prepared: PreparedContext) -> tuple[Tensor, Tensor]:
        fam = self.wiring.context_family
        enc = self._provider("enc", fam, prepared.event_type, prepared.trigger_positions)
        dec = self._provider("dec", fam, prepared.event_type, prepared.trigger_positions)
        h_enc = self.core.encoder_forward(prepared.ids, enc)
        h_dec = self.core.decoder_forward(h_enc, h_enc, dec)
        return h_enc, h_dec

    def run_template_pass(self, template: TemplateSpec, context_enc: Tensor) -> Tensor:
        fam = self.wiring.template_family
        guide = template_type_guide_positions(template)
        enc = self._provider("enc", fam, template.event_type, guide)
        dec = self._provider("dec", fam, template.event_type, guide)
        h_enc = self.core.encoder_forward(template.tokens, enc)
        return self.core.decoder_forward(h_enc, context_enc, dec)

    def build_span_selectors(self, template_hidden: Tensor,
                             template: TemplateSpec) -> list[tuple[Tensor, Tensor]]:
        w_start = self.core.params["span.w_start"]
        w_end = self.core.params["span.w_end"]
        selectors = []
        for _role, (lo, hi) in template.slot_positions:
            h_k = nm.mean_pool_rows(template_hidden, list(range(lo, hi)))
            selectors.append((nm.mul(h_k, w_start), nm.mul(h_k, w_end)))
        return selectors

    def span_logits(self, prepared: PreparedContext,
                    template: TemplateSpec) -> tuple[Tensor, Tensor]:
        context_enc, context_hidden = self.run_context_pass(prepared)
        template_hidden = self.run_template_pass(template, context_enc)
        selectors = self.build_span_selectors(template_hidden, template)
        context_t = nm.transpose(context_hidden)
        starts = [nm.matmul(phi_s, context_t) for phi_s, _ in selectors]
        ends = [nm.matmul(phi_e, context_t) for _, phi_e in selectors]
        return nm.concat_rows(starts), nm.concat_rows(ends)

    # -- public entry points --------------------------------------------------

    def loss(self, instance: EventInstance,
             frozen_targets: Optional[list[tuple[int, int]]] = None
             ) -> tuple[Tensor, list[tuple[int, int]]]:
        """Training loss for one event; returns (loss, per-slot targets).

        Targets come from min-loss gold assignment under the current logits
        unless frozen_targets pins them (needed by finite-difference checks,
        where the objective must stay a fixed function of the parameters).
        """
        prepared = prepare_context(instance, self.vocab)
        template = self.template(instance.event_type)
        start_logits, end_logits = self.span_logits(prepared, template)
        targets = frozen_targets
        if targets is None:
            targets = assign_gold_targets(template, prepared.gold_args,
                                          start_logits.data, end_logits.data)
        return compute_loss(start_logits, end_logits, targets), targets

    def predict(self, instance: EventInstance) -> list[tuple[int, int, str, float]]:
        """Deduplicated (start, end, role, score) predictions in original
        token coordinates; empty-span slots contribute nothing."""
        prepared = prepare_context(instance, self.vocab)
        template = self.template(instance.event_type)
        start_logits, end_logits = self.span_logits(prepared, template)
        roles = [role for role, _rng in template.slot_positions]
        decoded = decode_spans(start_logits.data, end_logits.data, roles, self.config.msl)
        out: dict[tuple[int, int, str], float] = {}
        for l, r, role, score in decoded.arguments:
            mapped = prepared_span_to_original(prepared, l, r)
            if mapped is None:
                continue
            key = (mapped[0], mapped[1], role)
            if key not in out or score > out[key]:
                out[key] = score
        return sorted((s, e, role, sc) for (s, e, role), sc in out.items())

    def forward_full(self, instance: EventInstance, mode: str = "train") -> dict:
        if mode == "train":
            loss, targets = self.loss(instance)
            return {"loss": loss, "targets": targets}
        if mode == "predict":
            return {"predictions": self.predict(instance)}
        raise ConfigError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def parameter_families(names: list[str]) -> dict[str, list[str]]:
    """Group parameter names into the families the gradient audit samples."""
    fams: dict[str, list[str]] = {
        "embeddings": [], "attention": [], "ffn": [], "layer_norm": [],
        "prefixes": [], "gate_w": [], "gate_lambda": [], "span_selector": [],
    }
    for n in names:
        if n.startswith("embed."):
            fams["embeddings"].append(n)
        elif ".ffn." in n:
            fams["ffn"].append(n)
        elif ".ln" in n:
            fams["layer_norm"].append(n)
        elif n.startswith(("enc.", "dec.")):
            fams["attention"].append(n)
        elif n.startswith("prefix."):
            fams["prefixes"].append(n)
        elif n.startswith("gate.") and n.endswith(".lambda"):
            fams["gate_lambda"].append(n)
        elif n.startswith("gate."):
            fams["gate_w"].append(n)
        elif n.startswith("span."):
            fams["span_selector"].append(n)
        else:
            raise ValueError(f"parameter {n!r} fits no family")
    return {k: v for k, v in fams.items() if v}


def save_checkpoint(path, extractor: ArgumentExtractor) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "model_config": extractor.config.to_dict(),
        "params": {
            name: {"shape": list(p.data.shape), "data": p.data.reshape(-1).tolist()}
            for name, p in extractor.named_parameters().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path, ontology: EventOntology) -> ArgumentExtractor:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"not an {CHECKPOINT_FORMAT} file: {path}")
    config = ModelConfig.from_dict(doc["model_config"])
    vocab = Vocab.build(ontology)
    if config.vocab_size != len(vocab):
        raise ConfigError(
            f"checkpoint vocab size {config.vocab_size} does not match"
            f" ontology vocab size {len(vocab)}; wrong ontology for this checkpoint"
        )
    extractor = ArgumentExtractor(config, ontology, seed=0)
    params = extractor.named_parameters()
    saved = doc["params"]
    if set(saved) != set(params):
        missing = sorted(set(params) - set(saved))[:3]
        extra = sorted(set(saved) - set(params))[:3]
        raise ConfigError(f"checkpoint parameter names mismatch (missing {missing}, extra {extra})")
    for name, entry in saved.items():
        arr = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
        if arr.shape != params[name].data.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        params[name].data = arr
    return extractor

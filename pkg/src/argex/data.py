"""Event ontology, templates, synthetic corpus generation, and JSONL persistence.

The corpus generator renders each event as a clause: the type's trigger word
followed by cue-word/entity pairs, one pair per filled role slot, with filler
tokens sprinkled in between. Role cue words are the role names themselves, so
the role-to-span mapping is learnable from surface evidence but degrades as
distractor_rate rises. Two events in one context can share an argument span
(the shared-role realization appears once and both events point at it).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .numerics import make_rng


class ConfigError(ValueError):
    """A generation or model config fails validation."""


class GenerationError(RuntimeError):
    """The requested corpus cannot be realized under the given config."""


class ValidationError(ValueError):
    """Data violates a documented invariant."""


class ParseError(ValueError):
    """A persisted file is malformed; carries the offending line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# Word pools for synthetic data. Role names double as in-context cue words.
ROLE_WORDS = [
    "agent", "target", "victim", "place", "instrument", "buyer", "seller",
    "origin", "destination", "beneficiary", "recipient", "artifact",
    "vehicle", "organization", "adjudicator", "prosecutor",
]
TRIGGER_WORDS = [
    "attacked", "arrested", "acquired", "departed", "elected", "injured",
    "merged", "convicted", "transported", "protested", "founded", "fined",
    "rescued", "appointed", "demolished", "audited",
]
TYPE_DOMAINS = [
    "conflict", "justice", "business", "movement",
    "personnel", "life", "transaction", "contact",
]
ENTITY_WORDS = [
    "archer", "barton", "calder", "dupont", "elmhurst", "farrow", "gideon",
    "harlow", "ibarra", "juneau", "keller", "lorne", "mercer", "navarro",
    "orchard", "pellman", "quimby", "rhodes", "sable", "thorne", "ulrich",
    "vance", "walsh", "yates",
]
FILLER_WORDS = [
    "again", "already", "meanwhile", "quietly", "reportedly", "soon",
    "then", "there", "today", "yesterday", "afterwards", "briefly",
    "later", "nearby", "officials", "said",
]
CONNECTIVE_WORDS = ["near", "with", "from", "toward", "against", "beside", "during", "after"]
CUE_ALIAS_WORDS = ["involving", "regarding", "concerning", "amid", "upon", "via", "per", "about"]
TYPE_PART_WORDS = ["event", "type", "is"]

TEMPLATE_TYPE_PART = "type-part"
TEMPLATE_TYPE_MARKERS = "type-markers"


@dataclass
class EventTypeDef:
    name: str
    roles: list[str]
    slot_counts: dict[str, int]
    schema_text: str
    role_cues: dict[str, str] = field(default_factory=dict)

    def cue_for(self, role: str) -> str:
        """In-context cue word announcing an argument of this role. Defaults
        to the role name; under cue aliasing the word is drawn from a small
        shared pool, so the same cue means different roles for different
        event types and the mapping is only learnable conditioned on the
        type."""
        return self.role_cues.get(role, role)

    def validate(self) -> None:
        for r in self.roles:
            if self.slot_counts.get(r, 0) < 1:
                raise ValidationError(f"{self.name}: slot count for role {r!r} must be >= 1")
        refs: dict[str, int] = {}
        for tok in self.schema_text.split():
            if tok.startswith("[") and tok.endswith("]"):
                refs[tok[1:-1]] = refs.get(tok[1:-1], 0) + 1
        if refs != {r: self.slot_counts[r] for r in self.roles}:
            raise ValidationError(
                f"{self.name}: schema_text slot references {refs} do not match slot_counts"
            )
        cues = [self.cue_for(r) for r in self.roles]
        if len(set(cues)) != len(cues):
            raise ValidationError(f"{self.name}: role cue words must be distinct within a type")


@dataclass
class EventOntology:
    event_types: list[EventTypeDef]
    roles: list[str]
    triggers: dict[str, str]
    entity_pool: list[str]
    filler_pool: list[str]

    def type_names(self) -> list[str]:
        return [t.name for t in self.event_types]

    def get_type(self, name: str) -> EventTypeDef:
        for t in self.event_types:
            if t.name == name:
                return t
        raise KeyError(f"unknown event type {name!r}")

    def to_json(self) -> str:
        doc = {
            "event_types": [
                {
                    "name": t.name,
                    "roles": t.roles,
                    "slot_counts": t.slot_counts,
                    "schema_text": t.schema_text,
                    "role_cues": t.role_cues,
                }
                for t in self.event_types
            ],
            "roles": self.roles,
            "lexicon": {
                "triggers": self.triggers,
                "entities": self.entity_pool,
                "fillers": self.filler_pool,
            },
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EventOntology":
        doc = json.loads(text)
        types = [
            EventTypeDef(
                name=t["name"],
                roles=list(t["roles"]),
                slot_counts={k: int(v) for k, v in t["slot_counts"].items()},
                schema_text=t["schema_text"],
                role_cues=dict(t.get("role_cues", {})),
            )
            for t in doc["event_types"]
        ]
        onto = cls(
            event_types=types,
            roles=list(doc["roles"]),
            triggers=dict(doc["lexicon"]["triggers"]),
            entity_pool=list(doc["lexicon"]["entities"]),
            filler_pool=list(doc["lexicon"]["fillers"]),
        )
        for t in types:
            t.validate()
        return onto

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EventOntology":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


class Vocab:
    """Word-level token/id map with fixed reserved ids.

    id 0 is the sequence-start token; the empty span (0, 0) points at it.
    Type-marker tokens are always present so a single vocab serves both
    template variants of the same ontology.
    """

    BOS = "<s>"
    EOS = "</s>"
    TRIG_OPEN = "<t>"
    TRIG_CLOSE = "</t>"
    PAD = "<pad>"
    UNK = "<unk>"
    SPECIALS = [BOS, EOS, TRIG_OPEN, TRIG_CLOSE, PAD, UNK]

    def __init__(self, words: list[str]):
        self._id_to_word = list(self.SPECIALS) + [w for w in words if w not in self.SPECIALS]
        self._word_to_id = {w: i for i, w in enumerate(self._id_to_word)}
        if len(self._word_to_id) != len(self._id_to_word):
            raise ValidationError("duplicate words in vocab")

    @classmethod
    def build(cls, ontology: EventOntology) -> "Vocab":
        words: list[str] = []
        seen: set[str] = set()

        def put(w: str) -> None:
            if w not in seen:
                seen.add(w)
                words.append(w)

        for w in TYPE_PART_WORDS:
            put(w)
        for t in ontology.event_types:
            put(t.name)
            put(type_marker_open(t.name))
            put(type_marker_close(t.name))
            for tok in t.schema_text.split():
                put(tok[1:-1] if tok.startswith("[") else tok)
            for cue in t.role_cues.values():
                put(cue)
        for r in ontology.roles:
            put(r)
        for w in ontology.triggers.values():
            put(w)
        for w in ontology.entity_pool:
            put(w)
        for w in ontology.filler_pool:
            put(w)
        return cls(words)

    def __len__(self) -> int:
        return len(self._id_to_word)

    def encode(self, word: str) -> int:
        return self._word_to_id.get(word, self._word_to_id[self.UNK])

    def encode_all(self, words: list[str]) -> list[int]:
        return [self.encode(w) for w in words]

    def decode(self, token_id: int) -> str:
        return self._id_to_word[token_id]

    def decode_all(self, ids: list[int]) -> list[str]:
        return [self._id_to_word[i] for i in ids]

    @property
    def bos_id(self) -> int:
        return 0


def type_marker_open(type_name: str) -> str:
    return f"<{type_name}>"


def type_marker_close(type_name: str) -> str:
    return f"</{type_name}>"


@dataclass
class TemplateSpec:
    """A rendered event template with slot and type-token position maps."""

    event_type: str
    tokens: list[int]
    words: list[str]
    slot_positions: list[tuple[str, tuple[int, int]]]  # slot k -> (role, token range)
    type_positions: tuple[int, int]
    variant: str

    @property
    def n_slots(self) -> int:
        return len(self.slot_positions)


def build_template(ontology: EventOntology, event_type_name: str, vocab: Vocab,
                   variant: str = TEMPLATE_TYPE_PART) -> TemplateSpec:
    """Render the template for an event type: type part plus schema part.

    Slots appear in schema order; a role with multiplicity c contributes c
    slots. Under the type-markers variant the type part is replaced by a
    learnable open/close marker pair enclosing the schema.
    """
    tdef = ontology.get_type(event_type_name)
    words: list[str] = [Vocab.BOS]
    slot_positions: list[tuple[str, tuple[int, int]]] = []

    def emit_schema() -> None:
        for tok in tdef.schema_text.split():
            if tok.startswith("[") and tok.endswith("]"):
                role = tok[1:-1]
                slot_positions.append((role, (len(words), len(words) + 1)))
                words.append(role)
            else:
                words.append(tok)

    if variant == TEMPLATE_TYPE_PART:
        words.extend(TYPE_PART_WORDS)
        type_positions = (len(words), len(words) + 1)
        words.append(tdef.name)
        words.extend([Vocab.EOS, Vocab.BOS])
        emit_schema()
        words.append(Vocab.EOS)
    elif variant == TEMPLATE_TYPE_MARKERS:
        open_pos = len(words)
        words.append(type_marker_open(tdef.name))
        emit_schema()
        close_pos = len(words)
        words.append(type_marker_close(tdef.name))
        words.append(Vocab.EOS)
        type_positions = (open_pos, close_pos)
    else:
        raise ConfigError(f"unknown template variant {variant!r}")

    return TemplateSpec(
        event_type=event_type_name,
        tokens=vocab.encode_all(words),
        words=words,
        slot_positions=slot_positions,
        type_positions=type_positions,
        variant=variant,
    )


def template_type_guide_positions(template: TemplateSpec) -> list[int]:
    """Token positions pooled into the type hidden state for gating."""
    if template.variant == TEMPLATE_TYPE_MARKERS:
        return [template.type_positions[0], template.type_positions[1]]
    return list(range(*template.type_positions))


@dataclass
class EventInstance:
    """One event in one context; spans are token-based, end-exclusive."""

    doc_id: str
    context_tokens: list[int]
    trigger: tuple[int, int]
    event_type: str
    gold_args: list[tuple[int, int, str]]

    def validate(self, n_roles_cap: dict[str, int] | None = None, msl: int | None = None) -> None:
        n = len(self.context_tokens)
        ts, te = self.trigger
        if not (0 <= ts < te <= n):
            raise ValidationError(f"{self.doc_id}: trigger {self.trigger} out of bounds for n={n}")
        per_role: dict[str, int] = {}
        for s, e, r in self.gold_args:
            if not (0 <= s < e <= n):
                raise ValidationError(f"{self.doc_id}: span ({s},{e}) out of bounds for n={n}")
            if msl is not None and e - s > msl - 1:
                raise ValidationError(f"{self.doc_id}: span ({s},{e}) longer than {msl - 1} tokens")
            per_role[r] = per_role.get(r, 0) + 1
        if n_roles_cap is not None:
            for r, c in per_role.items():
                if c > n_roles_cap.get(r, 0):
                    raise ValidationError(
                        f"{self.doc_id}: {c} gold args for role {r!r} exceed slot count"
                    )


@dataclass
class OntologyConfig:
    n_types: int = 10
    n_roles: int = 6
    roles_per_type: int = 3
    slot_multiplicity_prob: float = 0.25
    entity_pool_size: int = 24
    filler_pool_size: int = 12
    # > 0: draw in-context role cues from a pool this size instead of using
    # role names; cues then collide across types and disambiguating them
    # requires the event type
    cue_alias_pool: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "OntologyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ontology config keys: {sorted(unknown)}")
        return cls(**d)

    def validate(self) -> None:
        if self.roles_per_type < 1 or self.n_roles < self.roles_per_type:
            raise ConfigError(
                f"need n_roles >= roles_per_type >= 1, got {self.n_roles}/{self.roles_per_type}"
            )
        if self.n_types < 1:
            raise ConfigError("n_types must be >= 1")
        if self.n_types > len(TRIGGER_WORDS) * len(TYPE_DOMAINS):
            raise ConfigError(f"at most {len(TRIGGER_WORDS) * len(TYPE_DOMAINS)} event types supported")
        if not 0.0 <= self.slot_multiplicity_prob <= 1.0:
            raise ConfigError("slot_multiplicity_prob must be in [0,1]")
        if not 1 <= self.entity_pool_size <= len(ENTITY_WORDS):
            raise ConfigError(f"entity_pool_size must be in 1..{len(ENTITY_WORDS)}")
        if not 1 <= self.filler_pool_size <= len(FILLER_WORDS):
            raise ConfigError(f"filler_pool_size must be in 1..{len(FILLER_WORDS)}")
        if self.cue_alias_pool < 0 or self.cue_alias_pool > len(CUE_ALIAS_WORDS):
            raise ConfigError(f"cue_alias_pool must be in 0..{len(CUE_ALIAS_WORDS)}")
        if self.cue_alias_pool and self.cue_alias_pool < self.roles_per_type:
            raise ConfigError("cue_alias_pool must cover roles_per_type (cues are "
                              "distinct within a type)")


def _pad_pool(base: list[str], n: int, prefix: str) -> list[str]:
    out = list(base[:n])
    for i in range(len(base), n):
        out.append(f"{prefix}{i}")
    return out


def generate_ontology(config: OntologyConfig, seed: int) -> EventOntology:
    """Sample an ontology; roles are shared across types whenever the pool
    is smaller than the total demand (pigeonhole), which is what makes
    cross-event template relationships exercisable."""
    config.validate()
    rng = make_rng(seed, 101)
    role_pool = _pad_pool(ROLE_WORDS, config.n_roles, "role")

    pairs = [(d, t) for d in TYPE_DOMAINS for t in TRIGGER_WORDS]
    order = rng.permutation(len(pairs))
    chosen: list[tuple[str, str]] = []
    used_triggers: set[str] = set()
    for idx in order:  # prefer distinct trigger words while they last
        d, t = pairs[idx]
        if t not in used_triggers:
            chosen.append((d, t))
            used_triggers.add(t)
        if len(chosen) == config.n_types:
            break
    for idx in order:
        if len(chosen) == config.n_types:
            break
        if pairs[idx] not in chosen:
            chosen.append(pairs[idx])

    types: list[EventTypeDef] = []
    triggers: dict[str, str] = {}
    for domain, trig in chosen:
        name = f"{domain}.{trig}"
        roles = [role_pool[i] for i in sorted(rng.choice(config.n_roles, size=config.roles_per_type, replace=False))]
        slot_counts = {
            r: 2 if rng.random() < config.slot_multiplicity_prob else 1 for r in roles
        }
        role_cues: dict[str, str] = {}
        if config.cue_alias_pool:
            alias_idx = rng.choice(config.cue_alias_pool, size=len(roles), replace=False)
            role_cues = {r: CUE_ALIAS_WORDS[i] for r, i in zip(roles, alias_idx)}
        def slot_refs(role: str) -> list[str]:
            refs = ["[%s]" % role]
            for _ in range(slot_counts[role] - 1):
                refs.extend(["and", "[%s]" % role])
            return refs

        parts: list[str] = slot_refs(roles[0])
        parts.append(trig)
        conn_order = rng.permutation(len(CONNECTIVE_WORDS))
        for j, role in enumerate(roles[1:]):
            parts.append(CONNECTIVE_WORDS[conn_order[j % len(conn_order)]])
            parts.extend(slot_refs(role))
        tdef = EventTypeDef(name=name, roles=roles, slot_counts=slot_counts,
                            schema_text=" ".join(parts), role_cues=role_cues)
        tdef.validate()
        types.append(tdef)
        triggers[name] = trig

    return EventOntology(
        event_types=types,
        roles=role_pool,
        triggers=triggers,
        entity_pool=ENTITY_WORDS[: config.entity_pool_size],
        filler_pool=FILLER_WORDS[: config.filler_pool_size],
    )


@dataclass
class DataConfig:
    n_contexts: int = 200
    events_per_context: dict[int, float] = field(default_factory=lambda: {1: 0.6, 2: 0.4})
    overlap_prob: float = 0.3
    distractor_rate: float = 0.3
    context_len: int = 96
    arg_fill_prob: float = 0.85
    max_span_tokens: int = 3

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["events_per_context"] = {str(k): v for k, v in self.events_per_context.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown data config keys: {sorted(unknown)}")
        d = dict(d)
        if "events_per_context" in d:
            d["events_per_context"] = {int(k): float(v) for k, v in d["events_per_context"].items()}
        return cls(**d)

    def validate(self) -> None:
        if self.n_contexts < 1:
            raise ConfigError("n_contexts must be >= 1")
        if not self.events_per_context or any(k < 1 for k in self.events_per_context):
            raise ConfigError("events_per_context needs counts >= 1")
        total = sum(self.events_per_context.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"events_per_context probabilities sum to {total}, expected 1")
        for p, nm in [(self.overlap_prob, "overlap_prob"), (self.distractor_rate, "distractor_rate"),
                      (self.arg_fill_prob, "arg_fill_prob")]:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{nm} must be in [0,1]")
        if self.max_span_tokens < 1:
            raise ConfigError("max_span_tokens must be >= 1")


def generate_dataset(ontology: EventOntology, config: DataConfig, seed: int,
                     stream: int = 0) -> list[EventInstance]:
    """Sample a corpus of EventInstances (one instance per event).

    stream selects an independent substream of the seed, so train/test
    splits can share one seed without sharing any randomness.
    """
    config.validate()
    rng = make_rng(seed, 202, stream)
    vocab = Vocab.build(ontology)
    counts = sorted(config.events_per_context)
    probs = [config.events_per_context[c] for c in counts]
    instances: list[EventInstance] = []

    for ci in range(config.n_contexts):
        doc_id = f"doc{ci:05d}"
        k = int(rng.choice(counts, p=probs))
        first = ontology.event_types[int(rng.integers(len(ontology.event_types)))]
        chosen = [first]
        share_role: str | None = None
        if k >= 2 and rng.random() < config.overlap_prob:
            # force the second event to share a role with the first; the
            # first type always shares with itself, so this cannot stall
            candidates = [t for t in ontology.event_types if set(t.roles) & set(first.roles)]
            second = candidates[int(rng.integers(len(candidates)))]
            share_role = str(rng.choice(sorted(set(second.roles) & set(first.roles))))
            chosen.append(second)
        while len(chosen) < k:
            chosen.append(ontology.event_types[int(rng.integers(len(ontology.event_types)))])

        words: list[str] = []
        events: list[tuple[EventTypeDef, tuple[int, int], list[tuple[int, int, str]]]] = []

        def maybe_fill() -> None:
            if rng.random() < config.distractor_rate:
                words.append(str(rng.choice(ontology.filler_pool)))

        maybe_fill()
        shared_span: tuple[int, int] | None = None
        for ei, tdef in enumerate(chosen):
            trig_word = ontology.triggers[tdef.name]
            trig = (len(words), len(words) + 1)
            words.append(trig_word)
            gold: list[tuple[int, int, str]] = []
            if ei == 1 and share_role is not None and shared_span is not None:
                gold.append((shared_span[0], shared_span[1], share_role))
            for role in tdef.roles:
                for slot_i in range(tdef.slot_counts[role]):
                    if ei == 1 and role == share_role and slot_i == 0:
                        continue  # realized by the shared span
                    if rng.random() >= config.arg_fill_prob:
                        continue
                    maybe_fill()
                    words.append(tdef.cue_for(role))
                    span_len = int(rng.integers(1, config.max_span_tokens + 1))
                    start = len(words)
                    for _ in range(span_len):
                        words.append(str(rng.choice(ontology.entity_pool)))
                    gold.append((start, start + span_len, role))
                    if ei == 0 and role == share_role and shared_span is None:
                        shared_span = (start, start + span_len)
            events.append((tdef, trig, gold))
            maybe_fill()

        if share_role is not None and shared_span is None:
            # the first event happened to leave the shared role unfilled;
            # realize it explicitly so the overlap actually exists
            tdef, trig, gold = events[0]
            words.append(tdef.cue_for(share_role))
            start = len(words)
            words.append(str(rng.choice(ontology.entity_pool)))
            shared_span = (start, start + 1)
            gold.append((start, start + 1, share_role))
            events[1][2].insert(0, (shared_span[0], shared_span[1], share_role))

        if len(words) > config.context_len:
            raise GenerationError(
                f"{doc_id}: rendered context has {len(words)} tokens,"
                f" over context_len={config.context_len}; raise context_len"
                f" or lower events/slots"
            )

        ids = vocab.encode_all(words)
        for tdef, trig, gold in events:
            inst = EventInstance(
                doc_id=doc_id,
                context_tokens=ids,
                trigger=trig,
                event_type=tdef.name,
                gold_args=sorted(gold),
            )
            inst.validate(n_roles_cap=tdef.slot_counts)
            instances.append(inst)

    return instances


def dataset_statistics(instances: list[EventInstance]) -> dict[str, float]:
    """Fractions of multi-event contexts and of span-sharing contexts."""
    by_doc: dict[str, list[EventInstance]] = {}
    for inst in instances:
        by_doc.setdefault(inst.doc_id, []).append(inst)
    n_docs = len(by_doc)
    multi = sum(1 for v in by_doc.values() if len(v) > 1)
    shared = 0
    for v in by_doc.values():
        span_sets = [{(s, e) for (s, e, _r) in inst.gold_args} for inst in v]
        if any(span_sets[i] & span_sets[j] for i in range(len(v)) for j in range(i + 1, len(v))):
            shared += 1
    return {
        "n_contexts": float(n_docs),
        "n_events": float(len(instances)),
        "multi_event_fraction": multi / n_docs if n_docs else 0.0,
        "shared_span_fraction": shared / n_docs if n_docs else 0.0,
    }


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def instance_to_obj(inst: EventInstance, vocab: Vocab) -> dict:
    return {
        "doc_id": inst.doc_id,
        "tokens": vocab.decode_all(inst.context_tokens),
        "trigger": [inst.trigger[0], inst.trigger[1]],
        "event_type": inst.event_type,
        "arguments": [{"start": s, "end": e, "role": r} for (s, e, r) in inst.gold_args],
    }


def instance_from_obj(obj: dict, vocab: Vocab) -> EventInstance:
    return EventInstance(
        doc_id=obj["doc_id"],
        context_tokens=vocab.encode_all(list(obj["tokens"])),
        trigger=(int(obj["trigger"][0]), int(obj["trigger"][1])),
        event_type=obj["event_type"],
        gold_args=[(int(a["start"]), int(a["end"]), a["role"]) for a in obj["arguments"]],
    )


def write_jsonl(path, instances: list[EventInstance], vocab: Vocab) -> None:
    """One JSON object per line; key order fixed so output is byte-stable."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(instance_to_obj(inst, vocab), sort_keys=True) + "\n")


def read_jsonl(path, vocab: Vocab) -> list[EventInstance]:
    instances: list[EventInstance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from exc
            try:
                inst = instance_from_obj(obj, vocab)
                inst.validate()
            except (KeyError, TypeError) as exc:
                raise ParseError(f"missing or malformed field ({exc})", lineno) from exc
            except ValidationError as exc:
                raise ParseError(str(exc), lineno) from exc
            instances.append(inst)
    return instances

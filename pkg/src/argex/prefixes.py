"""Dual prefix banks with event-guided adaptive gating, plus ablation variants.

Two prefix families exist bank-wide: an instance-oriented family consulted
when encoding contexts and a template-oriented family consulted when encoding
templates. Each (side, layer, family) slot holds independent key and value
matrices. Gating scores every prefix row from a pooled guide vector (trigger
tokens for contexts, type tokens for templates): a = sigmoid(h W), then the
row is scaled by lambda * a and its attention mass is weighted by
(lambda * a)^2. The squared mass keeps the weighting nonnegative for any sign
of lambda, vanishes exactly when the gate closes, and equals 1 when
lambda = a = 1, so the ungated variant is plain prefix tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import numerics as nm
from .data import ConfigError
from .numerics import ContractViolation, Tensor
from .transformer import ModelConfig, PrefixKV

VARIANTS = ("full", "sp", "only-iop", "only-top", "none", "tst", "no-egag", "s-guided")

FALLBACK_TYPE = "__fallback__"

SIDES = ("enc", "dec")


def normalize_variant(name: str) -> str:
    key = name.strip().lower().replace("_", "-")
    aliases = {
        "degap": "full", "degap-sp": "sp", "only-iop-w/o-top": "only-iop",
        "w/o-degap": "none", "degap-tst": "tst", "w/o-egag": "no-egag",
        "degap-s": "s-guided",
    }
    key = aliases.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return key


def scaled_length(length: int, factor: float) -> int:
    """Round half up; used for the ungated variant's 1.5x length match."""
    return int(math.floor(length * factor + 0.5))


@dataclass
class VariantWiring:
    """How the two encoding passes consult the bank."""

    name: str
    context_family: Optional[str]   # family for the context pass, or None
    template_family: Optional[str]  # family for the template pass, or None
    gating: bool                    # False: rows join ungated (a=1, lambda=1)
    guide: str                      # "event" or "sentence" (first token only)


class PrefixBank:
    """Owns prefix and gate parameters for every (side, layer, family)."""

    def __init__(self, config: ModelConfig, wiring: VariantWiring,
                 lengths: dict[str, int], type_names: list[str],
                 per_type_template: bool, rng: np.random.Generator):
        self.config = config
        self.wiring = wiring
        self.lengths = dict(lengths)
        self.per_type_template = per_type_template
        self.type_names = list(type_names)
        self.params: dict[str, Tensor] = {}
        m = config.d_model
        layers = {"enc": config.n_enc_layers, "dec": config.n_dec_layers}

        def add(name: str, shape: tuple[int, ...], std: float = 0.02) -> None:
            self.params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        for family, length in self.lengths.items():
            if length == 0:
                continue
            for side in SIDES:
                for i in range(layers[side]):
                    if family == "tem" and per_type_template:
                        for tname in self.type_names + [FALLBACK_TYPE]:
                            add(f"prefix.{side}.tem.type.{tname}.layer.{i}.key", (length, m))
                            add(f"prefix.{side}.tem.type.{tname}.layer.{i}.val", (length, m))
                    else:
                        add(f"prefix.{side}.{family}.layer.{i}.key", (length, m))
                        add(f"prefix.{side}.{family}.layer.{i}.val", (length, m))
                    if wiring.gating:
                        add(f"gate.{side}.{family}.layer.{i}.W", (m, length))
                        self.params[f"gate.{side}.{family}.layer.{i}.lambda"] = Tensor(
                            np.ones(1), requires_grad=True
                        )

    def enabled(self, family: str) -> bool:
        return self.lengths.get(family, 0) > 0

    def select(self, side: str, layer: int, family: str,
               event_type: Optional[str]) -> tuple[Tensor, Tensor]:
        """Fetch the raw (key, value) prefix matrices for one attention call."""
        if side not in SIDES:
            raise ConfigError(f"unknown side {side!r}")
        if not self.enabled(family):
            raise ContractViolation(
                f"prefix family {family!r} is disabled under variant {self.wiring.name!r}"
            )
        if family == "tem" and self.per_type_template:
            tname = event_type if event_type in self.type_names else FALLBACK_TYPE
            base = f"prefix.{side}.tem.type.{tname}.layer.{layer}"
        else:
            base = f"prefix.{side}.{family}.layer.{layer}"
        return self.params[f"{base}.key"], self.params[f"{base}.val"]

    def gate_params(self, side: str, layer: int, family: str) -> tuple[Tensor, Tensor]:
        if not self.wiring.gating:
            raise ContractViolation("gate parameters do not exist when gating is bypassed")
        base = f"gate.{side}.{family}.layer.{layer}"
        return self.params[f"{base}.W"], self.params[f"{base}.lambda"]

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


def gate_weights(h_guide: Tensor, w: Tensor) -> Tensor:
    """Per-row gate activations a = sigmoid(h W), each strictly in (0, 1)."""
    return nm.sigmoid(nm.matmul(h_guide, w))


def guide_prefix(key_prefix: Tensor, val_prefix: Tensor, a: Tensor, lam: Tensor) -> PrefixKV:
    """Scale prefix rows by lambda * a and attach the squared attention mass."""
    if a.data.size != key_prefix.shape[0]:
        raise nm.ShapeError(f"gate length {a.data.size} vs prefix length {key_prefix.shape[0]}")
    g = nm.scale_by(a, lam)  # 1 x len
    return PrefixKV(
        key=nm.scale_rows(key_prefix, g),
        value=nm.scale_rows(val_prefix, g),
        gate=nm.mul(g, g),
    )


@dataclass
class PassPrefixes:
    """Prefix provider bound to one encoding pass.

    Called once per layer with the layer's input hidden states; pools the
    guide positions, gates the layer's prefix, and returns the PrefixKV the
    attention block will consume.
    """

    bank: PrefixBank
    side: str
    family: str
    event_type: Optional[str]
    guide_positions: list[int]

    def __call__(self, layer: int, hidden: Tensor) -> Optional[PrefixKV]:
        key, val = self.bank.select(self.side, layer, self.family, self.event_type)
        if not self.bank.wiring.gating:
            return PrefixKV(key=key, value=val, gate=None)
        if not self.guide_positions:
            raise ContractViolation("gated pass needs nonempty guide positions")
        w, lam = self.bank.gate_params(self.side, layer, self.family)
        h_guide = nm.mean_pool_rows(hidden, self.guide_positions)
        return guide_prefix(key, val, gate_weights(h_guide, w), lam)


def make_variant(config: ModelConfig, type_names: list[str],
                 rng: np.random.Generator) -> tuple[PrefixBank, VariantWiring]:
    """Build the prefix bank and pass wiring for the configured variant.

    full      dual gated families
    sp        a single family (instance length) consulted by both passes
    only-iop  template family disabled
    only-top  instance family disabled
    none      both disabled: the prefix-free baseline
    tst       full, but the template family is keyed by event type
    no-egag   gating bypassed, both lengths scaled 1.5x (parameter match)
    s-guided  full, but guided by the first token instead of trigger/type
    """
    name = normalize_variant(config.variant)
    len_ins, len_tem = config.len_ins, config.len_tem
    gating = True
    guide = "event"
    per_type = False
    ctx_fam: Optional[str] = "ins"
    tem_fam: Optional[str] = "tem"
    lengths = {"ins": len_ins, "tem": len_tem}

    if name == "sp":
        tem_fam = "ins"
        lengths = {"ins": len_ins, "tem": 0}
    elif name == "only-iop":
        tem_fam = None
        lengths = {"ins": len_ins, "tem": 0}
    elif name == "only-top":
        ctx_fam = None
        lengths = {"ins": 0, "tem": len_tem}
    elif name == "none":
        ctx_fam = tem_fam = None
        lengths = {"ins": 0, "tem": 0}
    elif name == "tst":
        per_type = True
    elif name == "no-egag":
        gating = False
        lengths = {"ins": scaled_length(len_ins, 1.5), "tem": scaled_length(len_tem, 1.5)}
    elif name == "s-guided":
        guide = "sentence"

    if ctx_fam is not None and lengths.get(ctx_fam, 0) == 0:
        ctx_fam = None
    if tem_fam is not None and lengths.get(tem_fam, 0) == 0:
        tem_fam = None

    wiring = VariantWiring(name=name, context_family=ctx_fam, template_family=tem_fam,
                           gating=gating, guide=guide)
    bank = PrefixBank(config, wiring, lengths, type_names, per_type, rng)
    return bank, wiring

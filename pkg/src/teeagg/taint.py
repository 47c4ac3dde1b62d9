"""Provenance labels carried on values and (in debug builds) on message frames."""
from __future__ import annotations

import enum
from dataclasses import dataclass


class TaintError(RuntimeError):
    pass


class PrivacyViolation(RuntimeError):
    """A raw update or raw data reached an enclave that must never see one."""


class LabelKind(enum.IntEnum):
    CONTROL = 0
    RAW_DATA = 1
    RAW_GRADIENT = 2
    MASKED = 3
    PARTIAL_AGGREGATE = 4
    FULL_AGGREGATE = 5
    MODEL_WEIGHTS = 6
    MASK_MATERIAL = 7


RAW_KINDS = frozenset({LabelKind.RAW_DATA, LabelKind.RAW_GRADIENT})


@dataclass(frozen=True)
class TaintLabel:
    kind: LabelKind
    members: frozenset[int] = frozenset()

    @classmethod
    def control(cls):
        return cls(LabelKind.CONTROL)

    @classmethod
    def raw_data(cls, owner: int):
        return cls(LabelKind.RAW_DATA, frozenset({owner}))

    @classmethod
    def raw_gradient(cls, enclave: int):
        return cls(LabelKind.RAW_GRADIENT, frozenset({enclave}))

    @classmethod
    def mask(cls):
        return cls(LabelKind.MASK_MATERIAL)

    @classmethod
    def model(cls):
        return cls(LabelKind.MODEL_WEIGHTS)

    @property
    def is_raw(self) -> bool:
        return self.kind in RAW_KINDS

    def __str__(self):
        if self.members:
            return f"{self.kind.name}({','.join(map(str, sorted(self.members)))})"
        return self.kind.name


def promote(label: TaintLabel, participants) -> TaintLabel:
    """An aggregate whose members cover every participant is a full aggregate."""
    if label.kind in (LabelKind.RAW_GRADIENT, LabelKind.MASKED, LabelKind.PARTIAL_AGGREGATE):
        if label.members >= frozenset(participants):
            return TaintLabel(LabelKind.FULL_AGGREGATE, label.members)
    return label


def combine(a: TaintLabel, b: TaintLabel, participants=None) -> TaintLabel:
    """Label of ``a + b``."""
    ka, kb = a.kind, b.kind
    members = a.members | b.members
    if LabelKind.RAW_DATA in (ka, kb):
        out = TaintLabel(LabelKind.RAW_DATA, members)
    elif {ka, kb} == {LabelKind.RAW_GRADIENT, LabelKind.MASK_MATERIAL}:
        out = TaintLabel(LabelKind.MASKED, members)
    elif ka == kb == LabelKind.MASK_MATERIAL:
        out = a
    elif LabelKind.FULL_AGGREGATE in (ka, kb) or LabelKind.CONTROL in (ka, kb):
        raise TaintError(f"cannot combine {a} with {b}")
    elif {ka, kb} <= {LabelKind.MASKED, LabelKind.PARTIAL_AGGREGATE}:
        out = TaintLabel(LabelKind.PARTIAL_AGGREGATE, members)
    elif {ka, kb} <= {LabelKind.RAW_GRADIENT, LabelKind.PARTIAL_AGGREGATE}:
        # tree mode: raw gradients are summed inside trusted training enclaves
        out = TaintLabel(LabelKind.PARTIAL_AGGREGATE, members)
    else:
        raise TaintError(f"cannot combine {a} with {b}")
    if participants is not None:
        out = promote(out, participants)
    return out

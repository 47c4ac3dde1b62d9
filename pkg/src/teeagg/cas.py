"""Configuration and attestation service.

Enclave trust is hash equality between an enclave's code measurement and the
measurement its owners approved.  Secrets flow only through :meth:`CAS.provision`
and every release lands in an append-only log that :func:`audit` can replay.
"""
from __future__ import annotations

import hashlib
import json
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .crypto import KeyTag, SymmetricKey, keygen

MODEL_OWNER = "model"


def data_owner(i: int) -> str:
    return f"data:{i}"


class AttestationError(Exception):
    pass


class PolicyError(ValueError):
    """A submitted policy would break the release invariants."""


class ProvisionDenied(PermissionError):
    def __init__(self, enclave_id: str, secret_id: str, rule: str):
        super().__init__(f"{secret_id} denied to {enclave_id}: {rule}")
        self.enclave_id = enclave_id
        self.secret_id = secret_id
        self.rule = rule


@dataclass(frozen=True)
class Role:
    kind: str  # training | aggregator | admin
    index: int | None = None

    @classmethod
    def training(cls, i: int | None = None) -> Role:
        return cls("training", i)

    @classmethod
    def aggregator(cls) -> Role:
        return cls("aggregator")

    @classmethod
    def admin(cls) -> Role:
        return cls("admin")

    def matches(self, concrete: Role) -> bool:
        return self.kind == concrete.kind and (self.index is None or self.index == concrete.index)

    def __str__(self):
        if self.kind == "training":
            return f"training({'*' if self.index is None else self.index})"
        return self.kind

    @classmethod
    def parse(cls, s: str) -> Role:
        if s.startswith("training("):
            inner = s[len("training(") : -1]
            return cls.training(None if inner == "*" else int(inner))
        if s not in ("aggregator", "admin"):
            raise ValueError(f"unknown role {s!r}")
        return cls(s)


def code_identity(role_kind: str, code_version: str, placeholders) -> str:
    """Canonical identity string: code only, never placeholder values."""
    return f"role={role_kind};code={code_version};placeholders={','.join(sorted(placeholders))}"


@dataclass(frozen=True)
class CodeMeasurement:
    digest: bytes

    @classmethod
    def of(cls, identity: str) -> CodeMeasurement:
        return cls(hashlib.sha256(identity.encode("utf-8")).digest())

    @property
    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True)
class SecretRule:
    secret_id: str
    allowed_role: Role
    required_measurement: str | None  # hex digest; None = whatever attested for the role
    approvers: frozenset[str] = frozenset()

    @property
    def rule_id(self) -> str:
        return f"{self.secret_id}->{self.allowed_role}"


@dataclass
class SecretPolicy:
    rules: list[SecretRule] = field(default_factory=list)
    # owner -> {(role kind, measurement hex)}
    approvals: dict[str, set[tuple[str, str]]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "rules": [
                    {
                        "secret_id": r.secret_id,
                        "role": str(r.allowed_role),
                        "measurement": r.required_measurement,
                        "approvers": sorted(r.approvers),
                    }
                    for r in self.rules
                ],
                "approvals": {o: sorted(map(list, a)) for o, a in sorted(self.approvals.items())},
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> SecretPolicy:
        raw = json.loads(text)
        rules = [
            SecretRule(r["secret_id"], Role.parse(r["role"]), r["measurement"], frozenset(r["approvers"]))
            for r in raw["rules"]
        ]
        approvals = {o: {tuple(a) for a in lst} for o, lst in raw.get("approvals", {}).items()}
        return cls(rules, approvals)


@dataclass
class EnclaveRecord:
    enclave_id: str
    role: Role
    measurement: CodeMeasurement
    attested: bool = False
    provisioned: set[str] = field(default_factory=set)


@dataclass(frozen=True)
class Release:
    seq: int
    enclave_id: str
    role: Role
    secret_id: str


def _secret_kind(secret_id: str) -> tuple[str, tuple[str, ...]]:
    kind, *args = secret_id.split("/")
    return kind, tuple(args)


def validate_rule(rule: SecretRule) -> None:
    kind, args = _secret_kind(rule.secret_id)
    role = rule.allowed_role
    if kind == "data":
        owner = int(args[0])
        if role.kind != "training" or role.index != owner:
            raise PolicyError(f"{rule.secret_id} may only go to training({owner}), not {role}")
        need = {data_owner(owner), MODEL_OWNER}
        if not need <= rule.approvers:
            raise PolicyError(f"{rule.secret_id} must be approved by {sorted(need)}")
    elif kind == "model":
        if role.kind == "admin":
            raise PolicyError("the admin enclave never receives the model key")
        if role.kind == "aggregator" and rule.approvers != {MODEL_OWNER}:
            raise PolicyError("the aggregator is attested by the model owner only")
    elif kind == "mask":
        if role.kind != "training":
            raise PolicyError("mask keys go to training enclaves only")
    else:
        raise PolicyError(f"unknown secret kind in {rule.secret_id!r}")


class CAS:
    """Single logical service; every public call is serialized by one lock."""

    def __init__(self, rng: np.random.Generator | None = None, n_data_owners: int | None = None):
        self._lock = threading.RLock()
        self._rng = rng
        self.n_data_owners = n_data_owners
        self.keys: dict[str, SymmetricKey] = {}
        self.rules: dict[str, list[SecretRule]] = {}
        self.approvals: dict[str, set[tuple[str, str]]] = {}
        self.enclaves: dict[str, EnclaveRecord] = {}
        self.owner_messages: Counter[str] = Counter()
        self.release_log: list[Release] = []
        self.attestation_log: list[tuple[str, str, bool, str]] = []
        self.residual_recipients: dict[str, int] = {}
        self.claimed_mask_sets: list[int] = []
        self._released_once: dict[str, str] = {}
        self._sessions: dict[tuple[str, str], SymmetricKey] = {}

    # owners -------------------------------------------------------------

    def register_owner(self, owner: str, keys, rules, approvals) -> None:
        """An owner's single interaction: hand over keys, rules and approvals."""
        with self._lock:
            self.owner_messages[owner] += 1
            if self.owner_messages[owner] > 1:
                raise PolicyError(f"owner {owner} already registered")
            for r in rules:
                validate_rule(r)
            for k in keys:
                if k.secret_id in self.keys:
                    raise PolicyError(f"secret {k.secret_id} already registered")
            for k in keys:
                self.keys[k.secret_id] = k
            for r in rules:
                self.rules.setdefault(r.secret_id, []).append(r)
            self.approvals[owner] = set(approvals)

    def register_policy(self, owner: str, policy: SecretPolicy, keys=()) -> None:
        self.register_owner(owner, keys, policy.rules, policy.approvals.get(owner, set()))

    def _approved(self, owner: str, role_kind: str, measurement_hex: str) -> bool:
        return (role_kind, measurement_hex) in self.approvals.get(owner, set())

    def _role_approvers(self, role: Role) -> set[str]:
        if role.kind == "aggregator":
            return {MODEL_OWNER}
        if role.kind == "training":
            return {MODEL_OWNER, data_owner(role.index)}
        n = self.n_data_owners
        if n is None:
            n = len([o for o in self.approvals if o.startswith("data:")])
        return {MODEL_OWNER} | {data_owner(i) for i in range(n)}

    # enclaves -----------------------------------------------------------

    def attest(self, record: EnclaveRecord) -> bool:
        with self._lock:
            if record.role.kind not in ("training", "aggregator", "admin"):
                reason = f"unknown role {record.role.kind}"
                ok = False
            else:
                approvers = self._role_approvers(record.role)
                missing = [
                    o for o in sorted(approvers)
                    if not self._approved(o, record.role.kind, record.measurement.hex)
                ]
                ok = not missing
                reason = "ok" if ok else f"measurement not approved by {missing}"
            record.attested = ok
            if not ok:
                record.provisioned.clear()
            self.enclaves[record.enclave_id] = record
            self.attestation_log.append((record.enclave_id, str(record.role), ok, reason))
            return ok

    def _check_rule(self, rec: EnclaveRecord, rule: SecretRule) -> str | None:
        if not rule.allowed_role.matches(rec.role):
            return f"role {rec.role} not allowed by {rule.rule_id}"
        if rule.required_measurement is not None and rule.required_measurement != rec.measurement.hex:
            return f"measurement mismatch for {rule.rule_id}"
        for o in sorted(rule.approvers):
            if not self._approved(o, rec.role.kind, rec.measurement.hex):
                return f"{o} has not approved this measurement for {rule.rule_id}"
        return None

    def provision(self, enclave_id: str, secret_id: str) -> SymmetricKey:
        with self._lock:
            rec = self.enclaves.get(enclave_id)
            if rec is None or not rec.attested:
                raise ProvisionDenied(enclave_id, secret_id, "unattested")
            if secret_id in rec.provisioned:
                return self.keys[secret_id]
            if secret_id not in self.keys:
                raise ProvisionDenied(enclave_id, secret_id, "unknown-secret")
            kind, args = _secret_kind(secret_id)
            if kind == "data" and rec.role.kind != "training":
                raise ProvisionDenied(enclave_id, secret_id, "no-data-key-outside-training")
            rules = list(self.rules.get(secret_id, []))
            if kind == "mask" and secret_id in self.residual_recipients:
                rules.append(
                    SecretRule(secret_id, Role.training(self.residual_recipients[secret_id]), None)
                )
            reasons = [self._check_rule(rec, r) for r in rules]
            if not rules or all(r is not None for r in reasons):
                raise ProvisionDenied(enclave_id, secret_id, "; ".join(r for r in reasons if r) or "no-rule")
            if kind == "mask":
                holder = self._released_once.get(secret_id)
                if holder is not None and holder != enclave_id:
                    raise ProvisionDenied(enclave_id, secret_id, f"mask-already-released-to-{holder}")
                self._released_once[secret_id] = enclave_id
            return self._release(rec, secret_id)

    def _release(self, rec: EnclaveRecord, secret_id: str) -> SymmetricKey:
        rec.provisioned.add(secret_id)
        self.release_log.append(Release(len(self.release_log), rec.enclave_id, rec.role, secret_id))
        return self.keys[secret_id]

    def session_key(self, enclave_id: str, peer_id: str) -> SymmetricKey:
        """Channel key for an attested pair, standing in for an in-enclave TLS session."""
        with self._lock:
            rec = self.enclaves.get(enclave_id)
            peer = self.enclaves.get(peer_id)
            tag = KeyTag.session(enclave_id, peer_id)
            sid = str(tag)
            if rec is None or not rec.attested:
                raise ProvisionDenied(enclave_id, sid, "unattested")
            if peer is None or not peer.attested:
                raise ProvisionDenied(enclave_id, sid, "peer-unattested")
            pair = tuple(sorted((enclave_id, peer_id)))
            if pair not in self._sessions:
                key = keygen(tag, self._rng)
                self._sessions[pair] = key
                self.keys[sid] = key
            if sid in rec.provisioned:
                return self._sessions[pair]
            return self._release(rec, sid)

    # admin hooks --------------------------------------------------------

    def _require_admin(self, admin_id: str) -> None:
        rec = self.enclaves.get(admin_id)
        if rec is None or not rec.attested or rec.role.kind != "admin":
            raise ProvisionDenied(admin_id, "-", "caller is not an attested admin enclave")

    def register_mask_keys(self, admin_id: str, keys) -> None:
        with self._lock:
            self._require_admin(admin_id)
            for k in keys:
                kind, args = _secret_kind(k.secret_id)
                if kind != "mask":
                    raise PolicyError(f"admin may only register mask keys, got {k.secret_id}")
                if k.secret_id in self.keys:
                    raise PolicyError(f"mask key {k.secret_id} already registered")
                self.keys[k.secret_id] = k
                self.rules[k.secret_id] = [SecretRule(k.secret_id, Role.training(int(args[1])), None)]

    def designate_residual(self, admin_id: str, secret_id: str, recipient: int) -> None:
        with self._lock:
            self._require_admin(admin_id)
            if secret_id in self._released_once:
                raise ProvisionDenied(admin_id, secret_id, "mask already released")
            self.residual_recipients[secret_id] = int(recipient)

    def claim_mask_set(self, admin_id: str, set_index: int) -> None:
        with self._lock:
            self._require_admin(admin_id)
            if set_index in self.claimed_mask_sets:
                raise ProvisionDenied(admin_id, f"mask-set/{set_index}", "mask set already claimed")
            self.claimed_mask_sets.append(set_index)

    def next_unclaimed_set(self) -> int:
        with self._lock:
            return max(self.claimed_mask_sets, default=-1) + 1

    # views --------------------------------------------------------------

    def held_by(self, enclave_id: str) -> set[str]:
        with self._lock:
            rec = self.enclaves.get(enclave_id)
            return set(rec.provisioned) if rec else set()


def audit(cas: CAS) -> list[str]:
    """Replay the release log against the release predicate; return violations."""
    out = []
    mask_holders: dict[str, set[str]] = {}
    for rel in cas.release_log:
        rec = cas.enclaves.get(rel.enclave_id)
        kind, args = _secret_kind(rel.secret_id)
        where = f"release #{rel.seq} {rel.secret_id} -> {rel.enclave_id}"
        if rec is None or not rec.attested:
            out.append(f"{where}: enclave not attested")
            continue
        m = rec.measurement.hex
        if kind == "data":
            i = int(args[0])
            ok = (
                rel.role == Role.training(i)
                and cas._approved(data_owner(i), "training", m)
                and cas._approved(MODEL_OWNER, "training", m)
            )
            if not ok:
                out.append(f"{where}: data key outside its owner's training enclave")
        elif kind == "model":
            if rel.role.kind == "aggregator":
                ok = cas._approved(MODEL_OWNER, "aggregator", m)
            else:
                ok = rel.role.kind == "training" and cas._approved(MODEL_OWNER, "training", m)
            if not ok:
                out.append(f"{where}: model key to unapproved enclave")
        elif kind == "mask":
            target = int(args[1])
            allowed = {target}
            if rel.secret_id in cas.residual_recipients:
                allowed.add(cas.residual_recipients[rel.secret_id])
            if rel.role.kind != "training" or rel.role.index not in allowed:
                out.append(f"{where}: mask key to wrong enclave")
            mask_holders.setdefault(rel.secret_id, set()).add(rel.enclave_id)
        elif kind == "session":
            if rel.enclave_id not in args:
                out.append(f"{where}: session key to a non-endpoint")
        else:
            out.append(f"{where}: unknown secret kind")
    for sid, holders in mask_holders.items():
        if len(holders) > 1:
            out.append(f"{sid}: mask key released to {sorted(holders)}")
    return out

"""Trusted-third-party patient list: storage with main/secondary identities,
KVNR plausibility, tentative matches, merge/split/delete, and on-demand
derivation of domain-scoped pseudonyms.

All mutations go through an append-only event log; replaying the log rebuilds
the state exactly. Pseudonyms are never persisted: each one is a keyed
format-preserving permutation of the entry's internal index, so derivation is
deterministic and injective per domain, and resolution inverts the permutation.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import json
import os
import secrets as _secrets
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives import hashes as _hashes

from .errors import (
    InvalidKeyError,
    InvalidSubsetError,
    KvnrConflictOtherError,
    KvnrConflictPatientError,
    SelfMergeError,
    UnauthorizedError,
    UnknownDomainError,
    UnknownPatientError,
)
from .idmodel import (
    IdentityRecord,
    KvnrKind,
    NormalizedIdentity,
    normalize,
    normalized_from_json,
    normalized_to_json,
    validate_kvnr,
)
from .linkage import LinkageConfig, Verdict, classify, score_pair
from .pprl import KeyStore


class LogicalClock:
    """Monotone counter standing in for wall time, so replays and scenario
    runs are byte-reproducible."""

    def __init__(self, start: int = 0):
        self._t = start

    def tick(self) -> int:
        self._t += 1
        return self._t

    def set_at_least(self, t: int) -> None:
        self._t = max(self._t, t)


# --- pseudonym derivation ----------------------------------------------------

PSN_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
PSN_LENGTH = 10
_PSN_BITS = PSN_LENGTH * 5  # 5 bits per symbol
_HALF_BITS = _PSN_BITS // 2
_HALF_MASK = (1 << _HALF_BITS) - 1


@dataclass(frozen=True)
class PseudonymDomain:
    domainId: str
    derivationKeyId: str
    length: int = PSN_LENGTH
    checkChar: bool = True

    def __post_init__(self):
        if self.length < 8:
            raise ValueError("pseudonym length must be >= 8")


@dataclass(frozen=True)
class DerivedPseudonym:
    domainId: str
    token: str


def _round_fn(key: bytes, domain_id: str, rnd: int, half: int) -> int:
    msg = f"psn|{domain_id}|{rnd}|{half}".encode()
    d = hmac.new(key, msg, hashlib.sha256).digest()
    return int.from_bytes(d[:8], "big") & _HALF_MASK


def _feistel(key: bytes, domain_id: str, x: int, inverse: bool = False) -> int:
    left, right = x >> _HALF_BITS, x & _HALF_MASK
    rounds = range(3, -1, -1) if inverse else range(4)
    for r in rounds:
        if inverse:
            left, right = right ^ _round_fn(key, domain_id, r, left), left
        else:
            left, right = right, left ^ _round_fn(key, domain_id, r, right)
    return (left << _HALF_BITS) | right


def _check_symbol(symbols: Sequence[int]) -> str:
    return PSN_ALPHABET[sum(symbols) % 32]


def derive_token(index: int, domain: PseudonymDomain, keys: KeyStore) -> str:
    key = keys.get(domain.derivationKeyId)
    v = _feistel(key, domain.domainId, index)
    symbols = [(v >> (5 * i)) & 31 for i in range(PSN_LENGTH - 1, -1, -1)]
    token = "".join(PSN_ALPHABET[s] for s in symbols)
    if domain.checkChar:
        token += _check_symbol(symbols)
    return token


def invert_token(token: str, domain: PseudonymDomain, keys: KeyStore) -> Optional[int]:
    """Internal index a token was derived from, or None for malformed input."""
    body = token
    if domain.checkChar:
        if len(token) != PSN_LENGTH + 1:
            return None
        body, check = token[:-1], token[-1]
    elif len(token) != PSN_LENGTH:
        return None
    try:
        symbols = [PSN_ALPHABET.index(c) for c in body]
    except ValueError:
        return None
    if domain.checkChar and _check_symbol(symbols) != check:
        return None
    v = 0
    for s in symbols:
        v = (v << 5) | s
    key = keys.get(domain.derivationKeyId)
    return _feistel(key, domain.domainId, v, inverse=True)


# --- pseudonym sealing (recipient public key) --------------------------------

def generate_seal_keypair() -> tuple[bytes, bytes]:
    """(private, public) raw X25519 key bytes."""
    priv = X25519PrivateKey.generate()
    priv_raw = priv.private_bytes(
        serialization.Encoding.Raw,
        serialization.PrivateFormat.Raw,
        serialization.NoEncryption(),
    )
    pub_raw = priv.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return priv_raw, pub_raw


def _seal_key(shared: bytes) -> bytes:
    return HKDF(
        algorithm=_hashes.SHA256(), length=32, salt=None, info=b"linkwerk-seal"
    ).derive(shared)


def seal_pseudonym(p: DerivedPseudonym, recipient_public: bytes) -> bytes:
    """Randomized sealing: only the recipient's private key recovers the token."""
    if len(recipient_public) != 32:
        raise InvalidKeyError("recipient public key must be 32 raw bytes")
    eph = X25519PrivateKey.generate()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_public))
    nonce = _secrets.token_bytes(12)
    ct = AESGCM(_seal_key(shared)).encrypt(
        nonce, f"{p.domainId}|{p.token}".encode(), None
    )
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return eph_pub + nonce + ct


def open_sealed(blob: bytes, recipient_private: bytes) -> DerivedPseudonym:
    if len(blob) < 44:
        raise InvalidKeyError("sealed blob too short")
    eph_pub, nonce, ct = blob[:32], blob[32:44], blob[44:]
    priv = X25519PrivateKey.from_private_bytes(recipient_private)
    shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    try:
        plain = AESGCM(_seal_key(shared)).decrypt(nonce, ct, None)
    except Exception as exc:
        raise InvalidKeyError("sealed blob does not open with this key") from exc
    domain_id, token = plain.decode().split("|", 1)
    return DerivedPseudonym(domain_id, token)


# --- patient entries ---------------------------------------------------------

class AddOutcome(str, enum.Enum):
    EXISTING = "EXISTING"
    NEW = "NEW"
    TENTATIVE_NEW = "TENTATIVE_NEW"


@dataclass(frozen=True)
class AddResult:
    pseudonym: DerivedPseudonym
    outcome: AddOutcome


class DeleteReason(str, enum.Enum):
    WITHDRAWAL = "WITHDRAWAL"
    ADMIN = "ADMIN"


@dataclass
class PatientEntry:
    internalId: int
    mainIdentity: NormalizedIdentity
    secondaryIdentities: list[NormalizedIdentity] = field(default_factory=list)
    kvnr: Optional[str] = None
    tentative: bool = False
    tentativeNearest: Optional[int] = None
    consentIds: list[str] = field(default_factory=list)
    submitters: list[str] = field(default_factory=list)
    createdAt: int = 0
    updatedAt: int = 0

    def identities(self) -> list[NormalizedIdentity]:
        return [self.mainIdentity, *self.secondaryIdentities]


LOG_HEADER = {"format": "linkwerk-events", "version": 1}


class EventLog:
    """Append-only JSON-lines event log with a version header and strictly
    increasing sequence numbers."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self._seq = 0
        self._fh = None
        if path:
            exists = os.path.exists(path) and os.path.getsize(path) > 0
            self._fh = open(path, "a", encoding="utf-8")
            if not exists:
                self._fh.write(json.dumps(LOG_HEADER, sort_keys=True) + "\n")
                self._fh.flush()

    @staticmethod
    def read(path: str) -> list[dict]:
        events = []
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                if i == 0 and obj.get("format") == "linkwerk-events":
                    continue
                events.append(obj)
        return events

    def append(self, event: dict) -> dict:
        self._seq += 1
        event = {"seq": self._seq, **event}
        if self._fh:
            self._fh.write(json.dumps(event, sort_keys=True) + "\n")
            self._fh.flush()
        return event

    def note_replayed(self, seq: int) -> None:
        self._seq = max(self._seq, seq)

    def close(self) -> None:
        if self._fh:
            self._fh.close()
            self._fh = None


class PatientList:
    """Single-writer linearizable patient list with event-sourced persistence."""

    def __init__(
        self,
        cfg: LinkageConfig,
        domains: dict[str, PseudonymDomain],
        keys: KeyStore,
        event_path: Optional[str] = None,
        clock: Optional[LogicalClock] = None,
        clearing_actors: Optional[set[str]] = None,
    ):
        self.cfg = cfg
        self.domains = domains
        self.keys = keys
        self.clock = clock or LogicalClock()
        self.clearing_actors = clearing_actors if clearing_actors is not None else {"clearing"}
        self.entries: dict[int, PatientEntry] = {}
        self.aliases: dict[int, int] = {}  # absorbed id -> surviving id
        self.kvnr_index: dict[str, int] = {}
        self.audit: list[dict] = []
        self._next_index = 1
        self.log = EventLog(event_path)

    @classmethod
    def open(
        cls,
        cfg: LinkageConfig,
        domains: dict[str, PseudonymDomain],
        keys: KeyStore,
        event_path: str,
        clearing_actors: Optional[set[str]] = None,
    ) -> "PatientList":
        events = EventLog.read(event_path) if os.path.exists(event_path) else []
        pl = cls(cfg, domains, keys, event_path=event_path, clearing_actors=clearing_actors)
        for ev in events:
            pl._apply(ev)
            pl.log.note_replayed(ev["seq"])
            pl.clock.set_at_least(ev["ts"])
        return pl

    # -- event machinery ------------------------------------------------------

    def _emit(self, event_type: str, payload: dict) -> dict:
        ev = self.log.append({"ts": self.clock.tick(), "type": event_type, "payload": payload})
        self._apply(ev)
        return ev

    def _apply(self, ev: dict) -> None:
        handler = getattr(self, "_apply_" + ev["type"].lower())
        handler(ev["payload"], ev["ts"], ev["seq"])

    def _audit(self, seq: int, ts: int, action: str, details: dict) -> None:
        self.audit.append({"seq": seq, "ts": ts, "action": action, "details": details})

    # -- pseudonyms -----------------------------------------------------------

    def _resolve_alias(self, internal_id: int) -> int:
        while internal_id in self.aliases:
            internal_id = self.aliases[internal_id]
        return internal_id

    def derive_pseudonym(self, internal_id: int, domain_id: str) -> DerivedPseudonym:
        domain = self.domains.get(domain_id)
        if domain is None:
            raise UnknownDomainError(f"unknown domain {domain_id!r}")
        internal_id = self._resolve_alias(internal_id)
        if internal_id not in self.entries:
            raise UnknownPatientError(str(internal_id))
        return DerivedPseudonym(domain_id, derive_token(internal_id, domain, self.keys))

    def resolve_pseudonym(self, domain_id: str, token: str) -> int:
        """Token -> surviving internal id; follows the merge alias table."""
        domain = self.domains.get(domain_id)
        if domain is None:
            raise UnknownDomainError(f"unknown domain {domain_id!r}")
        idx = invert_token(token, domain, self.keys)
        if idx is None:
            raise UnknownPatientError(token)
        idx = self._resolve_alias(idx)
        if idx not in self.entries:
            raise UnknownPatientError(token)
        return idx

    # -- add ------------------------------------------------------------------

    def _best_match(self, identity: NormalizedIdentity) -> tuple[Optional[int], Optional[Verdict], float]:
        best_id, best_verdict, best_total = None, None, float("-inf")
        for entry in self.entries.values():
            for stored in entry.identities():
                score = score_pair(identity, stored, self.cfg)
                if score.total > best_total:
                    best_total = score.total
                    best_id = entry.internalId
                    best_verdict = classify(score, self.cfg).verdict
        return best_id, best_verdict, best_total

    def add_patient(self, record: IdentityRecord, domain_id: str, submitter: Optional[str] = None) -> AddResult:
        if domain_id not in self.domains:
            raise UnknownDomainError(f"unknown domain {domain_id!r}")
        identity = normalize(record)
        best_id, best_verdict, _ = self._best_match(identity)

        kvnr = identity.kvnr
        kvnr_valid = kvnr is not None and validate_kvnr(kvnr).kind is KvnrKind.VALID
        if kvnr_valid:
            matched = best_id if best_verdict is Verdict.MATCH else None
            if matched is not None:
                existing = self.entries[matched].kvnr
                if existing and validate_kvnr(existing).kind is KvnrKind.VALID and existing != kvnr:
                    raise KvnrConflictPatientError(
                        "matched patient already carries a different KVNR"
                    )
            bound = self.kvnr_index.get(kvnr)
            if bound is not None and bound != matched:
                raise KvnrConflictOtherError("KVNR already bound to a different patient")

        if best_verdict is Verdict.MATCH:
            entry = self.entries[best_id]
            known = {normalized_to_json(i) == normalized_to_json(identity) for i in entry.identities()}
            self._emit(
                "patient_matched",
                {
                    "internalId": best_id,
                    "identity": normalized_to_json(identity),
                    "attach": True not in known,
                    "kvnr": kvnr if kvnr_valid else None,
                    "submitter": submitter,
                },
            )
            return AddResult(self.derive_pseudonym(best_id, domain_id), AddOutcome.EXISTING)

        internal_id = self._next_index
        tentative = best_verdict is Verdict.POSSIBLE
        self._emit(
            "patient_created",
            {
                "internalId": internal_id,
                "identity": normalized_to_json(identity),
                "tentative": tentative,
                "tentativeNearest": best_id if tentative else None,
                "kvnr": kvnr if kvnr_valid else None,
                "submitter": submitter,
            },
        )
        outcome = AddOutcome.TENTATIVE_NEW if tentative else AddOutcome.NEW
        return AddResult(self.derive_pseudonym(internal_id, domain_id), outcome)

    def _apply_patient_created(self, p: dict, ts: int, seq: int) -> None:
        entry = PatientEntry(
            internalId=p["internalId"],
            mainIdentity=normalized_from_json(p["identity"]),
            tentative=p["tentative"],
            tentativeNearest=p.get("tentativeNearest"),
            kvnr=p.get("kvnr") or normalized_from_json(p["identity"]).kvnr,
            createdAt=ts,
            updatedAt=ts,
        )
        if p.get("submitter"):
            entry.submitters.append(p["submitter"])
        self.entries[entry.internalId] = entry
        self._next_index = max(self._next_index, entry.internalId + 1)
        if p.get("kvnr"):
            self.kvnr_index[p["kvnr"]] = entry.internalId

    def _apply_patient_matched(self, p: dict, ts: int, seq: int) -> None:
        entry = self.entries[p["internalId"]]
        if p["attach"]:
            entry.secondaryIdentities.append(normalized_from_json(p["identity"]))
        if p.get("kvnr") and not entry.kvnr:
            entry.kvnr = p["kvnr"]
            self.kvnr_index[p["kvnr"]] = entry.internalId
        if p.get("submitter") and p["submitter"] not in entry.submitters:
            entry.submitters.append(p["submitter"])
        entry.updatedAt = ts

    # -- merge / split / delete ----------------------------------------------

    def _require_clearing(self, actor: str) -> None:
        if actor not in self.clearing_actors:
            raise UnauthorizedError(f"actor {actor!r} may not perform clearing actions")

    def merge_patients(self, keep_id: int, absorb_id: int, actor: str) -> PatientEntry:
        self._require_clearing(actor)
        keep_id = self._resolve_alias(keep_id)
        absorb_id = self._resolve_alias(absorb_id)
        if keep_id == absorb_id:
            raise SelfMergeError("cannot merge an entry with itself")
        if keep_id not in self.entries or absorb_id not in self.entries:
            raise UnknownPatientError("merge target missing")
        self._emit("patients_merged", {"keepId": keep_id, "absorbId": absorb_id, "actor": actor})
        return self.entries[keep_id]

    def _apply_patients_merged(self, p: dict, ts: int, seq: int) -> None:
        keep = self.entries[p["keepId"]]
        absorb = self.entries.pop(p["absorbId"])
        keep.secondaryIdentities.extend(absorb.identities())
        if absorb.kvnr and not keep.kvnr:
            keep.kvnr = absorb.kvnr
        for k, v in list(self.kvnr_index.items()):
            if v == absorb.internalId:
                self.kvnr_index[k] = keep.internalId
        self.aliases[absorb.internalId] = keep.internalId
        keep.tentative = False
        keep.tentativeNearest = None
        for entry in self.entries.values():
            if entry.tentativeNearest in (p["keepId"], p["absorbId"]):
                entry.tentative = False
                entry.tentativeNearest = None
        keep.updatedAt = ts
        self._audit(seq, ts, "merge", {"keepId": p["keepId"], "absorbId": p["absorbId"], "actor": p["actor"]})

    def split_patient(self, internal_id: int, subset_record_ids: Sequence[str], actor: str) -> tuple[PatientEntry, PatientEntry]:
        self._require_clearing(actor)
        internal_id = self._resolve_alias(internal_id)
        entry = self.entries.get(internal_id)
        if entry is None:
            raise UnknownPatientError(str(internal_id))
        all_ids = [i.recordId for i in entry.identities()]
        subset = list(subset_record_ids)
        if not subset or not set(subset) < set(all_ids) or len(subset) >= len(all_ids):
            raise InvalidSubsetError("subset must be a proper non-empty subset")
        new_id = self._next_index
        self._emit(
            "patient_split",
            {"internalId": internal_id, "newId": new_id, "subset": subset, "actor": actor},
        )
        return self.entries[internal_id], self.entries[new_id]

    def _apply_patient_split(self, p: dict, ts: int, seq: int) -> None:
        entry = self.entries[p["internalId"]]
        subset = set(p["subset"])
        moved = [i for i in entry.identities() if i.recordId in subset]
        remaining = [i for i in entry.identities() if i.recordId not in subset]
        entry.mainIdentity = remaining[0]
        entry.secondaryIdentities = remaining[1:]
        entry.updatedAt = ts
        new_entry = PatientEntry(
            internalId=p["newId"],
            mainIdentity=moved[0],
            secondaryIdentities=moved[1:],
            createdAt=ts,
            updatedAt=ts,
        )
        self.entries[new_entry.internalId] = new_entry
        self._next_index = max(self._next_index, new_entry.internalId + 1)
        self._audit(seq, ts, "split", {"internalId": p["internalId"], "newId": p["newId"], "actor": p["actor"]})

    def delete_patient(self, internal_id: int, reason: DeleteReason) -> dict:
        internal_id = self._resolve_alias(internal_id)
        if internal_id not in self.entries:
            raise UnknownPatientError(str(internal_id))
        self._emit("patient_deleted", {"internalId": internal_id, "reason": reason.value})
        return {"deleted": True, "reason": reason.value}

    def _apply_patient_deleted(self, p: dict, ts: int, seq: int) -> None:
        internal_id = p["internalId"]
        self.entries.pop(internal_id, None)
        for k in [k for k, v in self.kvnr_index.items() if v == internal_id]:
            del self.kvnr_index[k]
        for k in [k for k, v in self.aliases.items() if v == internal_id or k == internal_id]:
            del self.aliases[k]
        for entry in self.entries.values():
            if entry.tentativeNearest == internal_id:
                entry.tentative = False
                entry.tentativeNearest = None
        # Tombstone carries no IDAT.
        self._audit(seq, ts, "delete", {"internalId": internal_id, "reason": p["reason"]})

    # -- introspection --------------------------------------------------------

    def get_entry(self, internal_id: int) -> PatientEntry:
        internal_id = self._resolve_alias(internal_id)
        entry = self.entries.get(internal_id)
        if entry is None:
            raise UnknownPatientError(str(internal_id))
        return entry

    def state_digest(self) -> str:
        state = {
            "entries": {
                str(i): {
                    "main": normalized_to_json(e.mainIdentity),
                    "secondary": [normalized_to_json(s) for s in e.secondaryIdentities],
                    "kvnr": e.kvnr,
                    "tentative": e.tentative,
                    "tentativeNearest": e.tentativeNearest,
                    "submitters": e.submitters,
                    "createdAt": e.createdAt,
                    "updatedAt": e.updatedAt,
                }
                for i, e in sorted(self.entries.items())
            },
            "aliases": {str(k): v for k, v in sorted(self.aliases.items())},
            "kvnr": dict(sorted(self.kvnr_index.items())),
            "audit": self.audit,
        }
        return hashlib.sha256(json.dumps(state, sort_keys=True).encode()).hexdigest()

"""Federated trusted-third-party simulator: sites submit Bloom-encoded IDAT,
the fTTP matches them into entries with a four-outcome rule, hands each site
only its own DIZ pseudonym, and escalates gray-zone pairs to a clearing
workflow with plaintext escalation and irrevocable deletion.

The core is an event-sourced single-writer state machine. Clearing plaintext
never reaches the event log: logged provisions are ciphertext under a per-case
key held in a spill file that is deleted (key destruction = cryptographic
shredding) on resolution, void, or withdrawal.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import json
import os
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AlreadyWithdrawnError,
    CallerIsSiteError,
    ConsentInactiveError,
    LinkwerkError,
    NotInvolvedError,
    ParamsMismatchError,
    UnknownConsentError,
    UnknownPseudonymError,
    WrongStatusError,
)
from .idmodel import (
    IdentityRecord,
    NormalizedIdentity,
    normalize,
    record_from_json,
    record_to_json,
)
from .pprl import BloomEncoding, BloomParams, KeyStore, dice_similarity, encode_bloom
from .registry import (
    EventLog,
    LogicalClock,
    PseudonymDomain,
    derive_token,
    invert_token,
)


class OutcomeKind(str, enum.Enum):
    PERFECT_MATCH = "PERFECT_MATCH"
    AUTOMATIC_MERGE = "AUTOMATIC_MERGE"
    POSSIBLE_MATCH = "POSSIBLE_MATCH"
    NON_MATCH = "NON_MATCH"


class CaseStatus(str, enum.Enum):
    OPEN = "OPEN"
    AWAITING_PLAINTEXT = "AWAITING_PLAINTEXT"
    RESOLVED_MERGE = "RESOLVED_MERGE"
    RESOLVED_SEPARATE = "RESOLVED_SEPARATE"
    VOID = "VOID"


class ConsentStatus(str, enum.Enum):
    ACTIVE = "ACTIVE"
    WITHDRAWN = "WITHDRAWN"


@dataclass(frozen=True)
class SubmissionMessage:
    txId: str
    siteId: str
    encoding: BloomEncoding
    consentRef: str


@dataclass
class Contribution:
    siteId: str
    consentRef: str
    encoding: str  # serialized BloomEncoding


@dataclass
class FttpEntry:
    index: int  # internal; basis of pseudonym derivation, never exported
    contributions: list[Contribution] = field(default_factory=list)
    tentative: bool = False

    def sites(self) -> list[str]:
        seen = []
        for c in self.contributions:
            if c.siteId not in seen:
                seen.append(c.siteId)
        return seen


@dataclass
class ClearingCase:
    caseId: str
    involvedEntries: list[int]
    involvedSites: list[str]
    status: CaseStatus = CaseStatus.OPEN
    plaintextSlots: dict[str, IdentityRecord] = field(default_factory=dict)
    provided: list[str] = field(default_factory=list)
    resolvedBy: Optional[str] = None
    version: int = 0

    @property
    def resolvable(self) -> bool:
        return self.status is CaseStatus.AWAITING_PLAINTEXT and set(self.provided) >= set(
            self.involvedSites
        )


@dataclass
class ConsentRecord:
    consentId: str
    siteId: str
    status: ConsentStatus = ConsentStatus.ACTIVE
    subjectEntry: Optional[int] = None
    createdAt: int = 0
    updatedAt: int = 0


@dataclass(frozen=True)
class FttpConfig:
    bloomParams: BloomParams
    upperThreshold: float = 0.80
    lowerThreshold: float = 0.60
    pseudonymKeyId: str = "fttp-psn"


HUB = "hub"
CLEARING = "clearing"
XSITE_DOMAIN = "xsite"


def _diz_domain(site_id: str, key_id: str) -> PseudonymDomain:
    return PseudonymDomain(f"diz:{site_id}", key_id)


class FttpCore:
    """The fTTP state machine. Mutations emit events; replay rebuilds state."""

    def __init__(
        self,
        config: FttpConfig,
        keys: KeyStore,
        event_path: Optional[str] = None,
        spill_dir: Optional[str] = None,
        seed: int = 0,
    ):
        self.config = config
        self.keys = keys
        self.clock = LogicalClock()
        self.log = EventLog(event_path)
        self.spill_dir = spill_dir
        if spill_dir:
            os.makedirs(spill_dir, exist_ok=True)
        self._rng = random.Random(seed)
        self.entries: dict[int, FttpEntry] = {}
        self.consents: dict[str, ConsentRecord] = {}
        self.cases: dict[str, ClearingCase] = {}
        self.tx_responses: dict[str, dict] = {}
        self.sites: list[str] = []
        self.alias: dict[int, int] = {}
        self._next_index = 1
        self._next_case = 1
        self._case_keys: dict[str, bytes] = {}  # in-memory copy of spill keys

    @classmethod
    def open(
        cls,
        config: FttpConfig,
        keys: KeyStore,
        event_path: str,
        spill_dir: Optional[str] = None,
        seed: int = 0,
    ) -> "FttpCore":
        events = EventLog.read(event_path) if os.path.exists(event_path) else []
        core = cls(config, keys, event_path=event_path, spill_dir=spill_dir, seed=seed)
        for ev in events:
            core._apply(ev)
            core.log.note_replayed(ev["seq"])
            core.clock.set_at_least(ev["ts"])
        return core

    # -- event plumbing -------------------------------------------------------

    def _emit(self, event_type: str, payload: dict) -> dict:
        ev = self.log.append({"ts": self.clock.tick(), "type": event_type, "payload": payload})
        self._apply(ev)
        return ev

    def _message(self, sender: str, recipient: str, kind: str, body: dict) -> None:
        self._emit(
            "message", {"from": sender, "to": recipient, "kind": kind, "body": body}
        )

    def _apply(self, ev: dict) -> None:
        name = "_apply_" + ev["type"]
        handler = getattr(self, name, None)
        if handler:
            handler(ev["payload"], ev["ts"], ev["seq"])

    def _apply_message(self, p: dict, ts: int, seq: int) -> None:
        pass  # messages are log-only; state changes come from their companion events

    # -- pseudonyms -----------------------------------------------------------

    def _resolve_alias(self, index: int) -> int:
        while index in self.alias:
            index = self.alias[index]
        return index

    def diz_pseudonym(self, index: int, site_id: str) -> str:
        return derive_token(
            self._resolve_alias(index), _diz_domain(site_id, self.config.pseudonymKeyId), self.keys
        )

    def cross_site_pseudonym(self, index: int) -> str:
        return derive_token(
            self._resolve_alias(index),
            PseudonymDomain(XSITE_DOMAIN, self.config.pseudonymKeyId),
            self.keys,
        )

    # -- site and consent registration ---------------------------------------

    def register_site(self, site_id: str) -> None:
        if site_id not in self.sites:
            self._emit("site_registered", {"siteId": site_id})

    def _apply_site_registered(self, p: dict, ts: int, seq: int) -> None:
        if p["siteId"] not in self.sites:
            self.sites.append(p["siteId"])

    def register_consent(self, consent_id: str, site_id: str) -> None:
        self._emit("consent_registered", {"consentId": consent_id, "siteId": site_id})

    def _apply_consent_registered(self, p: dict, ts: int, seq: int) -> None:
        self.consents[p["consentId"]] = ConsentRecord(
            p["consentId"], p["siteId"], createdAt=ts, updatedAt=ts
        )

    # -- submission -----------------------------------------------------------

    def _best_entry(self, enc: BloomEncoding) -> tuple[Optional[int], float, bool]:
        """(entry index, best dice, bit-identical?) over all stored encodings."""
        serialized = enc.serialize()
        best_idx, best_dice = None, -1.0
        for idx, entry in self.entries.items():
            for c in entry.contributions:
                if c.encoding == serialized:
                    return idx, 1.0, True
                d = dice_similarity(enc, BloomEncoding.deserialize(c.encoding))
                if d > best_dice:
                    best_idx, best_dice = idx, d
        return best_idx, best_dice, False

    def submit_encoding(self, msg: SubmissionMessage) -> dict:
        if msg.txId in self.tx_responses:
            return self.tx_responses[msg.txId]  # idempotent replay
        consent = self.consents.get(msg.consentRef)
        if consent is None or consent.status is not ConsentStatus.ACTIVE:
            raise ConsentInactiveError(f"consent {msg.consentRef!r} not active")
        if msg.encoding.paramsFingerprint != self.config.bloomParams.fingerprint():
            raise ParamsMismatchError("submission used different Bloom params")

        best_idx, best_dice, identical = self._best_entry(msg.encoding)
        case_id = None
        if identical:
            kind, entry_idx, store = OutcomeKind.PERFECT_MATCH, best_idx, False
        elif best_idx is not None and best_dice >= self.config.upperThreshold:
            kind, entry_idx, store = OutcomeKind.AUTOMATIC_MERGE, best_idx, True
        elif best_idx is not None and best_dice >= self.config.lowerThreshold:
            kind, entry_idx, store = OutcomeKind.POSSIBLE_MATCH, self._next_index, True
            case_id = f"C{self._next_case}"
        else:
            kind, entry_idx, store = OutcomeKind.NON_MATCH, self._next_index, True

        self._emit(
            "submission_processed",
            {
                "txId": msg.txId,
                "siteId": msg.siteId,
                "consentRef": msg.consentRef,
                "encoding": msg.encoding.serialize() if store else None,
                "outcome": kind.value,
                "entry": entry_idx,
                "nearest": best_idx if kind is OutcomeKind.POSSIBLE_MATCH else None,
                "caseId": case_id,
            },
        )
        if case_id is not None:
            self._open_case(case_id, entry_idx, best_idx)
        response = {"dizPseudonym": self.diz_pseudonym(entry_idx, msg.siteId), "outcome": kind.value}
        self.tx_responses[msg.txId] = response
        self._emit("tx_recorded", {"txId": msg.txId, "response": response})
        self._message("fttp", msg.siteId, "submission_response", {"txId": msg.txId, **response})
        return response

    def _apply_submission_processed(self, p: dict, ts: int, seq: int) -> None:
        idx = p["entry"]
        if idx not in self.entries and p["encoding"] is not None:
            self.entries[idx] = FttpEntry(idx, tentative=p["outcome"] == "POSSIBLE_MATCH")
            self._next_index = max(self._next_index, idx + 1)
        if p["encoding"] is not None:
            self.entries[idx].contributions.append(
                Contribution(p["siteId"], p["consentRef"], p["encoding"])
            )
        consent = self.consents.get(p["consentRef"])
        if consent and consent.subjectEntry is None:
            consent.subjectEntry = idx
            consent.updatedAt = ts

    def _apply_tx_recorded(self, p: dict, ts: int, seq: int) -> None:
        self.tx_responses[p["txId"]] = p["response"]

    # -- clearing -------------------------------------------------------------

    def _case_key(self, case_id: str) -> bytes:
        if case_id in self._case_keys:
            return self._case_keys[case_id]
        if self.spill_dir:
            path = os.path.join(self.spill_dir, f"case-{case_id}.key")
            if os.path.exists(path):
                with open(path, "rb") as fh:
                    key = fh.read()
                self._case_keys[case_id] = key
                return key
        raise WrongStatusError(f"no spill key for case {case_id}")

    def _create_case_key(self, case_id: str) -> None:
        key = bytes(self._rng.randrange(256) for _ in range(32))
        self._case_keys[case_id] = key
        if self.spill_dir:
            with open(os.path.join(self.spill_dir, f"case-{case_id}.key"), "wb") as fh:
                fh.write(key)

    def _shred_case_key(self, case_id: str) -> None:
        self._case_keys.pop(case_id, None)
        if self.spill_dir:
            path = os.path.join(self.spill_dir, f"case-{case_id}.key")
            if os.path.exists(path):
                os.remove(path)

    def _open_case(self, case_id: str, new_entry: int, nearest_entry: int) -> None:
        sites = []
        for idx in (nearest_entry, new_entry):
            for s in self.entries[idx].sites():
                if s not in sites:
                    sites.append(s)
        self._create_case_key(case_id)
        self._emit(
            "case_opened",
            {"caseId": case_id, "entries": [nearest_entry, new_entry], "sites": sites},
        )
        for s in sites:
            self._message("fttp", s, "clearing_pending", {"caseId": case_id})

    def _apply_case_opened(self, p: dict, ts: int, seq: int) -> None:
        self.cases[p["caseId"]] = ClearingCase(p["caseId"], p["entries"], p["sites"])
        num = int(p["caseId"][1:]) if p["caseId"][1:].isdigit() else self._next_case
        self._next_case = max(self._next_case, num + 1)

    def request_plaintext(self, case_id: str) -> ClearingCase:
        case = self.cases.get(case_id)
        if case is None or case.status is not CaseStatus.OPEN:
            raise WrongStatusError(f"case {case_id} not OPEN")
        self._emit("plaintext_requested", {"caseId": case_id})
        for s in case.involvedSites:
            self._message("fttp", s, "plaintext_request", {"caseId": case_id})
        return case

    def _apply_plaintext_requested(self, p: dict, ts: int, seq: int) -> None:
        case = self.cases[p["caseId"]]
        case.status = CaseStatus.AWAITING_PLAINTEXT
        case.version += 1

    def provide_plaintext(self, case_id: str, site_id: str, identity: IdentityRecord) -> ClearingCase:
        case = self.cases.get(case_id)
        if case is None or case.status is not CaseStatus.AWAITING_PLAINTEXT:
            raise WrongStatusError(f"case {case_id} not awaiting plaintext")
        if site_id not in case.involvedSites:
            raise NotInvolvedError(f"site {site_id} not involved in {case_id}")
        key = self._case_key(case_id)
        nonce = hashlib.sha256(f"{case_id}|{site_id}|{case.version}".encode()).digest()[:12]
        ct = AESGCM(key).encrypt(nonce, json.dumps(record_to_json(identity), sort_keys=True).encode(), None)
        overwrite = site_id in case.provided
        self._emit(
            "plaintext_provided",
            {
                "caseId": case_id,
                "siteId": site_id,
                "ciphertext": base64.b64encode(nonce + ct).decode(),
                "overwrite": overwrite,
            },
        )
        return case

    def _apply_plaintext_provided(self, p: dict, ts: int, seq: int) -> None:
        case = self.cases[p["caseId"]]
        if p["siteId"] not in case.provided:
            case.provided.append(p["siteId"])
        case.version += 1
        # Decrypt into the in-memory slot; impossible (and irrelevant) once
        # the spill key was shredded.
        try:
            key = self._case_key(p["caseId"])
        except LinkwerkError:
            return
        blob = base64.b64decode(p["ciphertext"])
        try:
            plain = AESGCM(key).decrypt(blob[:12], blob[12:], None)
        except Exception:
            return
        case.plaintextSlots[p["siteId"]] = record_from_json(json.loads(plain))

    def resolve_clearing(self, case_id: str, verdict: str, actor: str) -> dict:
        case = self.cases.get(case_id)
        if case is None or not case.resolvable:
            raise WrongStatusError(f"case {case_id} not resolvable")
        if verdict not in ("MERGE", "SEPARATE"):
            raise WrongStatusError(f"unknown verdict {verdict!r}")
        self._emit(
            "case_resolved", {"caseId": case_id, "verdict": verdict, "actor": actor}
        )
        return {"caseId": case_id, "status": self.cases[case_id].status.value}

    def _apply_case_resolved(self, p: dict, ts: int, seq: int) -> None:
        case = self.cases[p["caseId"]]
        if p["verdict"] == "MERGE":
            keep, absorb = case.involvedEntries[0], case.involvedEntries[1]
            keep, absorb = self._resolve_alias(keep), self._resolve_alias(absorb)
            if keep != absorb and absorb in self.entries:
                absorbed = self.entries.pop(absorb)
                self.entries[keep].contributions.extend(absorbed.contributions)
                self.alias[absorb] = keep
                for c in self.consents.values():
                    if c.subjectEntry == absorb:
                        c.subjectEntry = keep
            self.entries[keep].tentative = False
            case.status = CaseStatus.RESOLVED_MERGE
        else:
            for idx in case.involvedEntries:
                idx = self._resolve_alias(idx)
                if idx in self.entries:
                    self.entries[idx].tentative = False
            case.status = CaseStatus.RESOLVED_SEPARATE
        case.plaintextSlots.clear()
        case.resolvedBy = p["actor"]
        case.version += 1
        self._shred_case_key(p["caseId"])

    # -- hub translation ------------------------------------------------------

    def translate_for_hub(self, diz_pseudonym: str, site_id: str, caller: str) -> str:
        if caller != HUB:
            raise CallerIsSiteError("only the transfer hub may translate pseudonyms")
        idx = invert_token(
            diz_pseudonym, _diz_domain(site_id, self.config.pseudonymKeyId), self.keys
        )
        if idx is None:
            raise UnknownPseudonymError(diz_pseudonym)
        idx = self._resolve_alias(idx)
        if idx not in self.entries:
            raise UnknownPseudonymError(diz_pseudonym)
        return self.cross_site_pseudonym(idx)

    # -- withdrawal -----------------------------------------------------------

    def withdraw_consent(self, consent_id: str) -> dict:
        consent = self.consents.get(consent_id)
        if consent is None:
            raise UnknownConsentError(consent_id)
        if consent.status is ConsentStatus.WITHDRAWN:
            raise AlreadyWithdrawnError(consent_id)
        entry_idx = self._resolve_alias(consent.subjectEntry) if consent.subjectEntry else None
        involved_sites = self.entries[entry_idx].sites() if entry_idx in self.entries else []
        voided = [
            c.caseId
            for c in self.cases.values()
            if entry_idx is not None
            and c.status in (CaseStatus.OPEN, CaseStatus.AWAITING_PLAINTEXT)
            and any(self._resolve_alias(e) == entry_idx for e in c.involvedEntries)
        ]
        self._emit(
            "consent_withdrawn",
            {"consentId": consent_id, "entry": entry_idx, "voidedCases": voided},
        )
        for s in involved_sites:
            self._message("fttp", s, "deletion_notice", {"consentId": consent_id})
        return {"consentId": consent_id, "removedEntry": entry_idx is not None, "voidedCases": voided}

    def _apply_consent_withdrawn(self, p: dict, ts: int, seq: int) -> None:
        consent = self.consents[p["consentId"]]
        consent.status = ConsentStatus.WITHDRAWN
        consent.updatedAt = ts
        entry_idx = p["entry"]
        if entry_idx is not None:
            self.entries.pop(entry_idx, None)
            for k in [k for k, v in self.alias.items() if v == entry_idx or k == entry_idx]:
                del self.alias[k]
        for case_id in p["voidedCases"]:
            case = self.cases[case_id]
            case.status = CaseStatus.VOID
            case.plaintextSlots.clear()
            case.version += 1
            self._shred_case_key(case_id)

    # -- introspection --------------------------------------------------------

    def encodings_for_entry(self, index: int) -> list[str]:
        entry = self.entries.get(self._resolve_alias(index))
        return [c.encoding for c in entry.contributions] if entry else []

    def state_digest(self) -> str:
        state = {
            "entries": {
                str(i): {
                    "contributions": [
                        {"siteId": c.siteId, "consentRef": c.consentRef, "encoding": c.encoding}
                        for c in e.contributions
                    ],
                    "tentative": e.tentative,
                }
                for i, e in sorted(self.entries.items())
            },
            "alias": {str(k): v for k, v in sorted(self.alias.items())},
            "consents": {
                cid: {"siteId": c.siteId, "status": c.status.value, "subject": c.subjectEntry}
                for cid, c in sorted(self.consents.items())
            },
            "cases": {
                cid: {
                    "entries": c.involvedEntries,
                    "sites": c.involvedSites,
                    "status": c.status.value,
                    "provided": c.provided,
                    "resolvedBy": c.resolvedBy,
                }
                for cid, c in sorted(self.cases.items())
            },
            "tx": dict(sorted(self.tx_responses.items())),
            "sites": self.sites,
        }
        return hashlib.sha256(json.dumps(state, sort_keys=True).encode()).hexdigest()


# --- site-side helper --------------------------------------------------------

ENCODED_FIELDS = ("firstName", "lastName", "birthDate", "sex")


def encode_identity(identity: NormalizedIdentity, params: BloomParams, keys: KeyStore) -> BloomEncoding:
    """The field set every site feeds into its submission Bloom filter."""
    fields = [
        identity.firstName,
        identity.lastName,
        identity.birthDate.isoformat(),
        identity.sex.value,
    ]
    return encode_bloom(fields, params, keys)


# --- scenario runner ---------------------------------------------------------

SCRIPT_HEADER = {"format": "linkwerk-scenario", "version": 1}


@dataclass
class ScenarioResult:
    events: list[dict]
    core: FttpCore
    responses: dict[str, dict]  # txId -> submission response


def load_script(path) -> list[dict]:
    actions = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: invalid JSON: {exc}") from None
            if i == 1 and obj.get("format") == "linkwerk-scenario":
                continue
            if "op" not in obj or "actor" not in obj:
                raise ValueError(f"{path}:{i}: action needs 'op' and 'actor'")
            actions.append(obj)
    return actions


def run_scenario(
    actions: Sequence[dict],
    config: FttpConfig,
    keys: KeyStore,
    event_path: Optional[str] = None,
    spill_dir: Optional[str] = None,
    seed: int = 0,
) -> ScenarioResult:
    """Execute scripted site actions deterministically; every protocol
    message, state change and rejection lands in the event log."""
    core = FttpCore(config, keys, event_path=event_path, spill_dir=spill_dir, seed=seed)
    collected: list[dict] = []
    original_append = core.log.append

    def tee_append(event: dict) -> dict:
        ev = original_append(event)
        collected.append(ev)
        return ev

    core.log.append = tee_append  # type: ignore[method-assign]
    responses: dict[str, dict] = {}

    for action in actions:
        op, actor, args = action["op"], action["actor"], action.get("args", {})
        try:
            if op == "register_site":
                core.register_site(actor)
            elif op == "register_consent":
                core.register_consent(args["consentId"], actor)
            elif op == "submit":
                identity = normalize(record_from_json(args["identity"]))
                enc = encode_identity(identity, config.bloomParams, keys)
                resp = core.submit_encoding(
                    SubmissionMessage(args["txId"], actor, enc, args["consentRef"])
                )
                responses[args["txId"]] = resp
            elif op == "request_plaintext":
                core.request_plaintext(args["caseId"])
            elif op == "provide_plaintext":
                core.provide_plaintext(
                    args["caseId"], actor, record_from_json(args["identity"])
                )
            elif op == "resolve":
                core.resolve_clearing(args["caseId"], args["verdict"], actor)
            elif op == "withdraw":
                core.withdraw_consent(args["consentId"])
            elif op == "translate":
                psn = responses[args["txId"]]["dizPseudonym"] if "txId" in args else args["dizPseudonym"]
                token = core.translate_for_hub(psn, args["siteId"], actor)
                core._emit("translation", {"caller": actor, "siteId": args["siteId"]})
                _ = token  # cross-site token never logged
            else:
                raise ValueError(f"unknown op {op!r}")
        except LinkwerkError as exc:
            core._emit("rejected", {"op": op, "actor": actor, "code": exc.code})
    return ScenarioResult(collected, core, responses)


# --- invariant scanners ------------------------------------------------------

def site_addressed_messages(events: Sequence[dict]) -> list[dict]:
    return [
        e for e in events
        if e["type"] == "message" and e["payload"]["to"] not in (HUB, CLEARING, "fttp")
    ]


def scan_cross_site_leak(events: Sequence[dict], core: FttpCore) -> list[dict]:
    """Site-addressed messages containing any cross-site pseudonym token."""
    tokens = {core.cross_site_pseudonym(i) for i in core.entries}
    leaks = []
    for e in site_addressed_messages(events):
        blob = json.dumps(e["payload"])
        if any(t in blob for t in tokens):
            leaks.append(e)
    return leaks


def scan_plaintext_leak(events: Sequence[dict], plaintext_values: Sequence[str]) -> list[dict]:
    """Events whose serialized form contains any of the given IDAT strings."""
    needles = [v for v in plaintext_values if len(v) >= 3]
    hits = []
    for e in events:
        blob = json.dumps(e)
        if any(n in blob for n in needles):
            hits.append(e)
    return hits

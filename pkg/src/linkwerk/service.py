"""HTTP service exposing the patient list, the fTTP protocol and the clearing
workflow. Authentication is a static API key per principal; every mutating
call appends exactly one event to the underlying event logs, so a restart
replays to the identical state.
"""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Request
from fastapi.responses import JSONResponse

from . import fttp as fttp_mod
from .errors import (
    CallerIsSiteError,
    LinkwerkError,
    UnauthorizedError,
    WrongStatusError,
)
from .idmodel import (
    Agreement,
    IdentityRecord,
    compare_date,
    levenshtein_similarity,
    normalize,
    normalized_to_json,
    record_from_json,
    record_to_json,
)
from .linkage import load_config, load_preset, score_pair
from .pprl import BloomEncoding, BloomParams, KeyStore
from .registry import DeleteReason, PatientList, PseudonymDomain

API_VERSION = "v1"
MEDIA_TYPE = "application/vnd.linkwerk.v1+json"

_ERROR_STATUS = {
    "UNAUTHORIZED": 403,
    "CALLER_IS_SITE": 403,
    "UNKNOWN_PATIENT": 404,
    "UNKNOWN_DOMAIN": 404,
    "UNKNOWN_PSEUDONYM": 404,
    "UNKNOWN_CONSENT": 404,
    "NOT_INVOLVED": 403,
    "WRONG_STATUS": 409,
    "KVNR_CONFLICT_PATIENT": 409,
    "KVNR_CONFLICT_OTHER": 409,
    "ALREADY_WITHDRAWN": 409,
    "CONSENT_INACTIVE": 409,
    "PARAMS_MISMATCH": 422,
    "EMPTY_IDENTITY": 422,
}


class PrincipalKind(str, enum.Enum):
    SITE = "SITE"
    HUB = "HUB"
    CLEARING_ACTOR = "CLEARING_ACTOR"
    ADMIN = "ADMIN"


@dataclass(frozen=True)
class Principal:
    kind: PrincipalKind
    siteId: Optional[str] = None


@dataclass
class ServiceConfig:
    state_dir: str
    key_file: str
    preset: Optional[str]
    config_path: Optional[str]
    domains: dict[str, PseudonymDomain]
    api_keys: dict[str, Principal]
    fttp_config: fttp_mod.FttpConfig
    seed: int = 0


def load_service_config(path: str) -> ServiceConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)

    def fail(msg: str):
        raise ValueError(f"{path}: {msg}")

    state_dir = os.environ.get("LINKWERK_STATE_DIR") or raw.get("stateDir")
    key_file = os.environ.get("LINKWERK_KEYFILE") or raw.get("keyFile")
    if not state_dir:
        fail("field 'stateDir' missing (or set LINKWERK_STATE_DIR)")
    if not key_file:
        fail("field 'keyFile' missing (or set LINKWERK_KEYFILE)")
    if not raw.get("domains"):
        fail("field 'domains' must name at least one pseudonym domain")
    domains = {
        did: PseudonymDomain(did, d["derivationKeyId"], checkChar=d.get("checkChar", True))
        for did, d in raw["domains"].items()
    }
    api_keys = {}
    for key, spec in (raw.get("apiKeys") or {}).items():
        kind = PrincipalKind(spec["principal"])
        if kind is PrincipalKind.SITE and not spec.get("siteId"):
            fail(f"apiKeys[{key!r}]: SITE principal needs a siteId")
        api_keys[key] = Principal(kind, spec.get("siteId"))
    fraw = raw.get("fttp") or {}
    fttp_config = fttp_mod.FttpConfig(
        bloomParams=BloomParams.from_json(fraw.get("bloomParams") or {}),
        upperThreshold=fraw.get("upperThreshold", 0.80),
        lowerThreshold=fraw.get("lowerThreshold", 0.60),
        pseudonymKeyId=fraw.get("pseudonymKeyId", "fttp-psn"),
    )
    return ServiceConfig(
        state_dir=state_dir,
        key_file=key_file,
        preset=raw.get("preset"),
        config_path=raw.get("linkageConfig"),
        domains=domains,
        api_keys=api_keys,
        fttp_config=fttp_config,
        seed=raw.get("seed", 0),
    )


class ServiceState:
    def __init__(self, cfg: ServiceConfig):
        self.cfg = cfg
        os.makedirs(cfg.state_dir, exist_ok=True)
        self.keys = KeyStore.from_file(cfg.key_file)
        linkage_cfg = (
            load_config(cfg.config_path) if cfg.config_path else load_preset(cfg.preset or "registry-probabilistic")
        )
        self.linkage_cfg = linkage_cfg
        self.patients = PatientList.open(
            linkage_cfg,
            cfg.domains,
            self.keys,
            event_path=os.path.join(cfg.state_dir, "patients.events"),
            clearing_actors={"clearing"},
        )
        self.fttp = fttp_mod.FttpCore.open(
            cfg.fttp_config,
            self.keys,
            event_path=os.path.join(cfg.state_dir, "fttp.events"),
            spill_dir=os.path.join(cfg.state_dir, "spill"),
            seed=cfg.seed,
        )

    def state_digest(self) -> str:
        import hashlib

        combined = self.patients.state_digest() + self.fttp.state_digest()
        return hashlib.sha256(combined.encode()).hexdigest()

    def audit_entries(self, since: int = 0) -> list[dict]:
        """Merged audit view: patient-list audit plus fTTP adjudication events."""
        entries = [dict(e, source="patients") for e in self.patients.audit]
        path = self.fttp.log.path
        if path and os.path.exists(path):
            from .registry import EventLog

            for ev in EventLog.read(path):
                if ev["type"] in ("case_resolved", "consent_withdrawn"):
                    entries.append(
                        {
                            "seq": ev["seq"],
                            "ts": ev["ts"],
                            "action": ev["type"],
                            "details": ev["payload"],
                            "source": "fttp",
                        }
                    )
        entries.sort(key=lambda e: (e["source"], e["seq"]))
        for i, e in enumerate(entries, 1):
            e["auditSeq"] = i
        return [e for e in entries if e["auditSeq"] > since]


def _case_view(state: ServiceState, case: fttp_mod.ClearingCase, with_plaintext: bool) -> dict:
    view = {
        "caseId": case.caseId,
        "status": case.status.value,
        "involvedSites": list(case.involvedSites),
        "provided": list(case.provided),
        "resolvable": case.resolvable,
        "version": case.version,
        "submittedAt": case.version,  # logical time
    }
    if with_plaintext and case.plaintextSlots:
        identities = {s: record_to_json(r) for s, r in case.plaintextSlots.items()}
        view["identities"] = identities
        if len(case.plaintextSlots) >= 2:
            view["fieldComparison"] = _field_comparison(list(case.plaintextSlots.values()))
    return view


def _field_comparison(records: list[IdentityRecord]) -> list[dict]:
    a, b = normalize(records[0]), normalize(records[1])
    rows = []
    for name in ("firstName", "lastName", "birthDate", "sex", "postalCode", "city"):
        va, vb = a.get(name), b.get(name)
        if name == "birthDate":
            cmp = compare_date(va, vb)
            sim = cmp.similarity
            va, vb = va.isoformat(), vb.isoformat()
        elif va is None or vb is None:
            sim = None
        elif name == "sex":
            va, vb = va.value, vb.value
            sim = 1.0 if va == vb else 0.0
        else:
            sim = levenshtein_similarity(str(va), str(vb))
        rows.append({"field": name, "a": va, "b": vb, "similarity": sim})
    return rows


def create_app(cfg: ServiceConfig) -> FastAPI:
    state = ServiceState(cfg)
    app = FastAPI(title="linkwerk", version=API_VERSION)
    app.state.linkwerk = state

    def principal(x_api_key: str = Header(default="")) -> Principal:
        p = cfg.api_keys.get(x_api_key)
        if p is None:
            raise HTTPException(status_code=401, detail={"code": "UNAUTHENTICATED"})
        return p

    def require(p: Principal, *kinds: PrincipalKind) -> None:
        if p.kind not in kinds:
            raise HTTPException(
                status_code=403, detail={"code": "UNAUTHORIZED", "principal": p.kind.value}
            )

    @app.exception_handler(LinkwerkError)
    async def on_domain_error(request: Request, exc: LinkwerkError):
        status = _ERROR_STATUS.get(exc.code, 400)
        return JSONResponse(status_code=status, content={"code": exc.code, "detail": str(exc)})

    @app.middleware("http")
    async def version_header(request: Request, call_next):
        response = await call_next(request)
        response.headers["Content-Type"] = MEDIA_TYPE
        return response

    # -- patients -------------------------------------------------------------

    @app.post("/v1/patients")
    async def add_patient(body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE, PrincipalKind.ADMIN)
        record = record_from_json(body["identity"])
        result = state.patients.add_patient(record, body["domain"], submitter=p.siteId)
        return {
            "pseudonym": {"domain": result.pseudonym.domainId, "token": result.pseudonym.token},
            "outcome": result.outcome.value,
        }

    @app.get("/v1/patients/{domain}/{psn}")
    async def get_patient(domain: str, psn: str, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE, PrincipalKind.CLEARING_ACTOR)
        internal = state.patients.resolve_pseudonym(domain, psn)
        entry = state.patients.get_entry(internal)
        if p.kind is PrincipalKind.SITE and p.siteId not in entry.submitters:
            raise UnauthorizedError("site does not own this patient")
        return {
            "mainIdentity": normalized_to_json(entry.mainIdentity),
            "secondaryIdentities": [normalized_to_json(i) for i in entry.secondaryIdentities],
            "tentative": entry.tentative,
        }

    @app.delete("/v1/patients/{domain}/{psn}")
    async def delete_patient(domain: str, psn: str, body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE, PrincipalKind.ADMIN, PrincipalKind.CLEARING_ACTOR)
        internal = state.patients.resolve_pseudonym(domain, psn)
        if p.kind is PrincipalKind.SITE:
            entry = state.patients.get_entry(internal)
            if p.siteId not in entry.submitters:
                raise UnauthorizedError("site does not own this patient")
        reason = DeleteReason(body.get("reason", "ADMIN"))
        state.patients.delete_patient(internal, reason)
        return {"tombstone": {"reason": reason.value}}

    # -- fTTP -----------------------------------------------------------------

    @app.post("/v1/fttp/sites")
    async def register_site(p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE)
        state.fttp.register_site(p.siteId)
        return {"siteId": p.siteId}

    @app.post("/v1/consents")
    async def register_consent(body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE)
        state.fttp.register_consent(body["consentId"], p.siteId)
        return {"consentId": body["consentId"], "status": "ACTIVE"}

    @app.post("/v1/fttp/submissions")
    async def submit(body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE)
        if body.get("siteId") != p.siteId:
            raise UnauthorizedError("siteId does not match API key")
        msg = fttp_mod.SubmissionMessage(
            txId=body["txId"],
            siteId=p.siteId,
            encoding=BloomEncoding.deserialize(body["encoding"]),
            consentRef=body["consentRef"],
        )
        return state.fttp.submit_encoding(msg)

    @app.post("/v1/fttp/translate")
    async def translate(body: dict, p: Principal = Depends(principal)):
        if p.kind is PrincipalKind.SITE:
            # Sites may never learn cross-site pseudonyms.
            raise CallerIsSiteError("sites may not call translate")
        require(p, PrincipalKind.HUB)
        token = state.fttp.translate_for_hub(body["dizPseudonym"], body["siteId"], fttp_mod.HUB)
        return {"crossSitePseudonym": token}

    # -- clearing -------------------------------------------------------------

    @app.get("/v1/clearing/cases")
    async def list_cases(status: Optional[str] = None, p: Principal = Depends(principal)):
        require(p, PrincipalKind.CLEARING_ACTOR, PrincipalKind.ADMIN, PrincipalKind.SITE)
        with_plaintext = p.kind is PrincipalKind.CLEARING_ACTOR
        cases = [
            _case_view(state, c, with_plaintext)
            for c in state.fttp.cases.values()
            if status is None or c.status.value == status
        ]
        return {"cases": cases}

    @app.post("/v1/clearing/cases/{case_id}/plaintext-request")
    async def request_plaintext(case_id: str, p: Principal = Depends(principal)):
        require(p, PrincipalKind.CLEARING_ACTOR)
        case = state.fttp.request_plaintext(case_id)
        return _case_view(state, case, True)

    @app.post("/v1/clearing/cases/{case_id}/plaintext")
    async def provide_plaintext(case_id: str, body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE)
        site_id = body.get("siteId", p.siteId)
        if site_id != p.siteId:
            raise UnauthorizedError("siteId does not match API key")
        case = state.fttp.provide_plaintext(case_id, site_id, record_from_json(body["identity"]))
        return {"caseId": case.caseId, "status": case.status.value, "resolvable": case.resolvable}

    @app.post("/v1/clearing/cases/{case_id}/resolution")
    async def resolve(case_id: str, body: dict, p: Principal = Depends(principal)):
        require(p, PrincipalKind.CLEARING_ACTOR)
        expected = body.get("expectedVersion")
        case = state.fttp.cases.get(case_id)
        if expected is not None and case is not None and case.version != expected:
            raise WrongStatusError(
                f"case {case_id} is at version {case.version}, expected {expected}"
            )
        return state.fttp.resolve_clearing(case_id, body["verdict"], "clearing")

    # -- consents and audit ---------------------------------------------------

    @app.post("/v1/consents/{consent_id}/withdrawal")
    async def withdraw(consent_id: str, p: Principal = Depends(principal)):
        require(p, PrincipalKind.SITE, PrincipalKind.ADMIN)
        if p.kind is PrincipalKind.SITE:
            consent = state.fttp.consents.get(consent_id)
            if consent and consent.siteId != p.siteId:
                raise UnauthorizedError("consent belongs to another site")
        return state.fttp.withdraw_consent(consent_id)

    @app.get("/v1/audit")
    async def audit(since: int = 0, p: Principal = Depends(principal)):
        require(p, PrincipalKind.CLEARING_ACTOR, PrincipalKind.ADMIN)
        return {"entries": state.audit_entries(since)}

    @app.get("/v1/health")
    async def health():
        return {"status": "ok", "stateDigest": state.state_digest()}

    return app

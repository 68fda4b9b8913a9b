"""HTTP service: authentication, endpoint behavior, persistence semantics."""

import base64
import json
import os

import pytest
from fastapi.testclient import TestClient

from linkwerk import fttp as fttp_mod
from linkwerk.idmodel import Sex, normalize, record_to_json
from linkwerk.pprl import BloomParams, KeyStore
from linkwerk.registry import PseudonymDomain
from linkwerk.service import (
    MEDIA_TYPE,
    Principal,
    PrincipalKind,
    ServiceConfig,
    create_app,
    load_service_config,
)

from conftest import make_record


PARAMS = BloomParams(mBits=1024, kHashes=8, qGramSize=2, padding=True, keyId="site-bloom")

HANS = dict(first="Hans", last="Maier", year=1980, month=5, day=2, sex=Sex.M, city="Berlin")
HANS_GRAY = dict(HANS, last="Schmidt")
PETRA = dict(first="Petra", last="Schulz", year=1963, month=11, day=30, sex=Sex.F)

KEYS = {
    "site-a-key": Principal(PrincipalKind.SITE, "siteA"),
    "site-b-key": Principal(PrincipalKind.SITE, "siteB"),
    "hub-key": Principal(PrincipalKind.HUB),
    "clearing-key": Principal(PrincipalKind.CLEARING_ACTOR),
    "admin-key": Principal(PrincipalKind.ADMIN),
}


def write_keyfile(path):
    secrets = {"psn": b"q" * 32, "site-bloom": b"s" * 32, "fttp-psn": b"f" * 32}
    path.write_text(json.dumps({k: base64.b64encode(v).decode() for k, v in secrets.items()}))


def service_config(tmp_path) -> ServiceConfig:
    keyfile = tmp_path / "keys.json"
    if not keyfile.exists():
        write_keyfile(keyfile)
    return ServiceConfig(
        state_dir=str(tmp_path / "state"),
        key_file=str(keyfile),
        preset="registry-probabilistic",
        config_path=None,
        domains={"research": PseudonymDomain("research", "psn")},
        api_keys=KEYS,
        fttp_config=fttp_mod.FttpConfig(bloomParams=PARAMS),
        seed=7,
    )


@pytest.fixture
def client(tmp_path):
    return TestClient(create_app(service_config(tmp_path)))


def hdr(key):
    return {"X-Api-Key": key}


def add_patient(client, key, fields, domain="research"):
    return client.post(
        "/v1/patients",
        json={"identity": record_to_json(make_record("r1", **fields)), "domain": domain},
        headers=hdr(key),
    )


def submission_body(tx, consent, fields, site_id):
    keys = KeyStore({"site-bloom": b"s" * 32})
    enc = fttp_mod.encode_identity(normalize(make_record(tx, **fields)), PARAMS, keys)
    return {"txId": tx, "siteId": site_id, "consentRef": consent, "encoding": enc.serialize()}


def prime_fttp(client):
    for key in ("site-a-key", "site-b-key"):
        assert client.post("/v1/fttp/sites", headers=hdr(key)).status_code == 200
    client.post("/v1/consents", json={"consentId": "con-a"}, headers=hdr("site-a-key"))
    client.post("/v1/consents", json={"consentId": "con-b"}, headers=hdr("site-b-key"))


class TestAuth:
    def test_missing_key(self, client):
        assert client.post("/v1/patients", json={}).status_code == 401

    def test_unknown_key(self, client):
        assert client.post("/v1/patients", json={}, headers=hdr("nope")).status_code == 401

    @pytest.mark.parametrize(
        "method,path,key",
        [
            ("POST", "/v1/patients", "hub-key"),
            ("POST", "/v1/fttp/submissions", "clearing-key"),
            ("POST", "/v1/clearing/cases/C1/plaintext-request", "site-a-key"),
            ("POST", "/v1/clearing/cases/C1/resolution", "admin-key"),
            ("GET", "/v1/audit", "site-a-key"),
        ],
    )
    def test_wrong_principal_rejected(self, client, method, path, key):
        r = client.request(method, path, headers=hdr(key), json={})
        assert r.status_code == 403

    def test_health_is_open(self, client):
        r = client.get("/v1/health")
        assert r.status_code == 200 and r.json()["status"] == "ok"

    def test_media_type_header(self, client):
        assert client.get("/v1/health").headers["content-type"] == MEDIA_TYPE


class TestPatients:
    def test_add_and_fetch(self, client):
        r = add_patient(client, "site-a-key", HANS)
        assert r.status_code == 200
        body = r.json()
        assert body["outcome"] == "NEW"
        token = body["pseudonym"]["token"]
        got = client.get(f"/v1/patients/research/{token}", headers=hdr("site-a-key"))
        assert got.status_code == 200
        assert got.json()["mainIdentity"]["lastName"] == "MAIER"

    def test_resubmission_existing(self, client):
        first = add_patient(client, "site-a-key", HANS).json()
        again = add_patient(client, "site-a-key", HANS).json()
        assert again["outcome"] == "EXISTING"
        assert again["pseudonym"] == first["pseudonym"]

    def test_non_submitting_site_cannot_read(self, client):
        token = add_patient(client, "site-a-key", HANS).json()["pseudonym"]["token"]
        r = client.get(f"/v1/patients/research/{token}", headers=hdr("site-b-key"))
        assert r.status_code == 403

    def test_clearing_actor_can_read(self, client):
        token = add_patient(client, "site-a-key", HANS).json()["pseudonym"]["token"]
        r = client.get(f"/v1/patients/research/{token}", headers=hdr("clearing-key"))
        assert r.status_code == 200

    def test_unknown_pseudonym_404(self, client):
        r = client.get("/v1/patients/research/AAAAAAAAAAA", headers=hdr("clearing-key"))
        assert r.status_code == 404

    def test_delete(self, client):
        token = add_patient(client, "site-a-key", HANS).json()["pseudonym"]["token"]
        r = client.request(
            "DELETE", f"/v1/patients/research/{token}",
            json={"reason": "WITHDRAWAL"}, headers=hdr("site-a-key"),
        )
        assert r.status_code == 200
        assert r.json()["tombstone"]["reason"] == "WITHDRAWAL"
        gone = client.get(f"/v1/patients/research/{token}", headers=hdr("clearing-key"))
        assert gone.status_code == 404

    def test_each_mutation_appends_one_event(self, client, tmp_path):
        log = tmp_path / "state" / "patients.events"
        before = len(log.read_text().splitlines())
        add_patient(client, "site-a-key", HANS)
        after = len(log.read_text().splitlines())
        assert after == before + 1


class TestFttpEndpoints:
    def test_submission_flow(self, client):
        prime_fttp(client)
        r1 = client.post("/v1/fttp/submissions",
                         json=submission_body("t1", "con-a", HANS, "siteA"),
                         headers=hdr("site-a-key"))
        assert r1.status_code == 200 and r1.json()["outcome"] == "NON_MATCH"
        r2 = client.post("/v1/fttp/submissions",
                         json=submission_body("t2", "con-b", HANS, "siteB"),
                         headers=hdr("site-b-key"))
        assert r2.json()["outcome"] == "PERFECT_MATCH"
        assert r2.json()["dizPseudonym"] != r1.json()["dizPseudonym"]

    def test_site_id_must_match_key(self, client):
        prime_fttp(client)
        r = client.post("/v1/fttp/submissions",
                        json=submission_body("t1", "con-a", HANS, "siteB"),
                        headers=hdr("site-a-key"))
        assert r.status_code == 403

    def test_params_mismatch_422(self, client):
        prime_fttp(client)
        other = BloomParams(mBits=512, kHashes=8, qGramSize=2, padding=True, keyId="site-bloom")
        keys = KeyStore({"site-bloom": b"s" * 32})
        enc = fttp_mod.encode_identity(normalize(make_record("t1", **HANS)), other, keys)
        r = client.post("/v1/fttp/submissions",
                        json={"txId": "t1", "siteId": "siteA", "consentRef": "con-a",
                              "encoding": enc.serialize()},
                        headers=hdr("site-a-key"))
        assert r.status_code == 422

    def test_translate_hub_only(self, client):
        prime_fttp(client)
        psn = client.post("/v1/fttp/submissions",
                          json=submission_body("t1", "con-a", HANS, "siteA"),
                          headers=hdr("site-a-key")).json()["dizPseudonym"]
        ok = client.post("/v1/fttp/translate",
                         json={"dizPseudonym": psn, "siteId": "siteA"}, headers=hdr("hub-key"))
        assert ok.status_code == 200
        assert ok.json()["crossSitePseudonym"] != psn
        denied = client.post("/v1/fttp/translate",
                             json={"dizPseudonym": psn, "siteId": "siteA"},
                             headers=hdr("site-a-key"))
        assert denied.status_code == 403
        assert denied.json()["code"] == "CALLER_IS_SITE"


def open_case(client):
    prime_fttp(client)
    client.post("/v1/fttp/submissions", json=submission_body("t1", "con-a", HANS, "siteA"),
                headers=hdr("site-a-key"))
    r = client.post("/v1/fttp/submissions", json=submission_body("t2", "con-b", HANS_GRAY, "siteB"),
                    headers=hdr("site-b-key"))
    assert r.json()["outcome"] == "POSSIBLE_MATCH"


class TestClearingEndpoints:
    def test_full_workflow(self, client):
        open_case(client)
        cases = client.get("/v1/clearing/cases", params={"status": "OPEN"},
                           headers=hdr("clearing-key")).json()["cases"]
        assert [c["caseId"] for c in cases] == ["C1"]
        client.post("/v1/clearing/cases/C1/plaintext-request", headers=hdr("clearing-key"))
        for key, fields in (("site-a-key", HANS), ("site-b-key", HANS_GRAY)):
            r = client.post("/v1/clearing/cases/C1/plaintext",
                            json={"identity": record_to_json(make_record("p", **fields))},
                            headers=hdr(key))
            assert r.status_code == 200
        view = client.get("/v1/clearing/cases", headers=hdr("clearing-key")).json()["cases"][0]
        assert view["resolvable"]
        assert {row["field"] for row in view["fieldComparison"]} >= {"firstName", "lastName"}
        done = client.post("/v1/clearing/cases/C1/resolution", json={"verdict": "MERGE"},
                           headers=hdr("clearing-key"))
        assert done.status_code == 200
        assert done.json()["status"] == "RESOLVED_MERGE"

    def test_sites_never_see_plaintext_in_case_list(self, client):
        open_case(client)
        client.post("/v1/clearing/cases/C1/plaintext-request", headers=hdr("clearing-key"))
        client.post("/v1/clearing/cases/C1/plaintext",
                    json={"identity": record_to_json(make_record("p", **HANS))},
                    headers=hdr("site-a-key"))
        view = client.get("/v1/clearing/cases", headers=hdr("site-a-key")).json()["cases"][0]
        assert "identities" not in view
        assert "Maier" not in json.dumps(view)

    def test_resolution_before_plaintext_409(self, client):
        open_case(client)
        r = client.post("/v1/clearing/cases/C1/resolution", json={"verdict": "MERGE"},
                        headers=hdr("clearing-key"))
        assert r.status_code == 409

    def test_stale_expected_version_409(self, client):
        open_case(client)
        client.post("/v1/clearing/cases/C1/plaintext-request", headers=hdr("clearing-key"))
        stale = client.get("/v1/clearing/cases",
                           headers=hdr("clearing-key")).json()["cases"][0]["version"]
        for key, fields in (("site-a-key", HANS), ("site-b-key", HANS_GRAY)):
            client.post("/v1/clearing/cases/C1/plaintext",
                        json={"identity": record_to_json(make_record("p", **fields))},
                        headers=hdr(key))
        r = client.post("/v1/clearing/cases/C1/resolution",
                        json={"verdict": "MERGE", "expectedVersion": stale},
                        headers=hdr("clearing-key"))
        assert r.status_code == 409
        current = client.get("/v1/clearing/cases",
                             headers=hdr("clearing-key")).json()["cases"][0]["version"]
        r = client.post("/v1/clearing/cases/C1/resolution",
                        json={"verdict": "MERGE", "expectedVersion": current},
                        headers=hdr("clearing-key"))
        assert r.status_code == 200


class TestConsentWithdrawal:
    def test_withdrawal_and_conflict(self, client):
        prime_fttp(client)
        client.post("/v1/fttp/submissions", json=submission_body("t1", "con-a", HANS, "siteA"),
                    headers=hdr("site-a-key"))
        r = client.post("/v1/consents/con-a/withdrawal", headers=hdr("site-a-key"))
        assert r.status_code == 200 and r.json()["removedEntry"]
        again = client.post("/v1/consents/con-a/withdrawal", headers=hdr("site-a-key"))
        assert again.status_code == 409

    def test_other_sites_consent_protected(self, client):
        prime_fttp(client)
        r = client.post("/v1/consents/con-b/withdrawal", headers=hdr("site-a-key"))
        assert r.status_code == 403


class TestAudit:
    def test_adjudications_visible_and_since_filter(self, client):
        open_case(client)
        client.post("/v1/clearing/cases/C1/plaintext-request", headers=hdr("clearing-key"))
        for key, fields in (("site-a-key", HANS), ("site-b-key", HANS_GRAY)):
            client.post("/v1/clearing/cases/C1/plaintext",
                        json={"identity": record_to_json(make_record("p", **fields))},
                        headers=hdr(key))
        client.post("/v1/clearing/cases/C1/resolution", json={"verdict": "MERGE"},
                    headers=hdr("clearing-key"))
        entries = client.get("/v1/audit", headers=hdr("admin-key")).json()["entries"]
        assert any(e["action"] == "case_resolved" for e in entries)
        last = entries[-1]["auditSeq"]
        rest = client.get("/v1/audit", params={"since": last},
                          headers=hdr("admin-key")).json()["entries"]
        assert rest == []


class TestRestart:
    def test_state_digest_survives_restart(self, tmp_path):
        cfg = service_config(tmp_path)
        with TestClient(create_app(cfg)) as client:
            add_patient(client, "site-a-key", HANS)
            prime_fttp(client)
            client.post("/v1/fttp/submissions",
                        json=submission_body("t1", "con-a", HANS, "siteA"),
                        headers=hdr("site-a-key"))
            digest = client.get("/v1/health").json()["stateDigest"]
        with TestClient(create_app(service_config(tmp_path))) as fresh:
            assert fresh.get("/v1/health").json()["stateDigest"] == digest


class TestConfigLoading:
    def _raw(self, tmp_path, **overrides):
        write_keyfile(tmp_path / "keys.json")
        raw = {
            "stateDir": str(tmp_path / "state"),
            "keyFile": str(tmp_path / "keys.json"),
            "domains": {"research": {"derivationKeyId": "psn"}},
            "apiKeys": {"k1": {"principal": "SITE", "siteId": "siteA"}},
        }
        raw.update(overrides)
        return raw

    def _write(self, tmp_path, raw):
        path = tmp_path / "service.json"
        path.write_text(json.dumps(raw))
        return str(path)

    def test_load_ok(self, tmp_path):
        cfg = load_service_config(self._write(tmp_path, self._raw(tmp_path)))
        assert cfg.api_keys["k1"] == Principal(PrincipalKind.SITE, "siteA")
        assert "research" in cfg.domains

    def test_missing_domains_diagnosed(self, tmp_path):
        raw = self._raw(tmp_path)
        raw.pop("domains")
        with pytest.raises(ValueError, match="domains"):
            load_service_config(self._write(tmp_path, raw))

    def test_site_key_needs_site_id(self, tmp_path):
        raw = self._raw(tmp_path, apiKeys={"k1": {"principal": "SITE"}})
        with pytest.raises(ValueError, match="siteId"):
            load_service_config(self._write(tmp_path, raw))

    def test_env_overrides(self, tmp_path, monkeypatch):
        raw = self._raw(tmp_path)
        monkeypatch.setenv("LINKWERK_STATE_DIR", str(tmp_path / "elsewhere"))
        cfg = load_service_config(self._write(tmp_path, raw))
        assert cfg.state_dir == str(tmp_path / "elsewhere")

"""fTTP simulator: four-outcome matching, clearing, withdrawal, scenarios."""

import json
import os

import pytest

from linkwerk.errors import (
    AlreadyWithdrawnError,
    CallerIsSiteError,
    ConsentInactiveError,
    NotInvolvedError,
    ParamsMismatchError,
    UnknownPseudonymError,
    WrongStatusError,
)
from linkwerk.idmodel import Sex, normalize
from linkwerk.pprl import BloomParams, KeyStore
from linkwerk.registry import EventLog
from linkwerk.fttp import (
    CaseStatus,
    FttpConfig,
    FttpCore,
    HUB,
    OutcomeKind,
    SubmissionMessage,
    encode_identity,
    load_script,
    run_scenario,
    scan_cross_site_leak,
    scan_plaintext_leak,
    site_addressed_messages,
)

from conftest import make_record


PARAMS = BloomParams(mBits=1024, kHashes=8, qGramSize=2, padding=True, keyId="site-bloom")
CONFIG = FttpConfig(bloomParams=PARAMS)

HANS = dict(first="Hans", last="Maier", year=1980, month=5, day=2, sex=Sex.M)
HANS_TYPO = dict(HANS, last="Mayer")
# Same first name and birth date with a different surname sits in the gray zone
# of the Dice thresholds.
HANS_GRAY = dict(HANS, last="Schmidt")
PETRA = dict(first="Petra", last="Schulz", year=1963, month=11, day=30, sex=Sex.F)


def fresh_core(tmp_path=None, **kw):
    keys = KeyStore({"site-bloom": b"s" * 32, "fttp-psn": b"f" * 32})
    if tmp_path is not None:
        kw.setdefault("event_path", str(tmp_path / "fttp.events"))
        kw.setdefault("spill_dir", str(tmp_path / "spill"))
    return FttpCore(CONFIG, keys, **kw), keys


def submit(core, keys, tx, site, consent, fields):
    enc = encode_identity(normalize(make_record(tx, **fields)), PARAMS, keys)
    return core.submit_encoding(SubmissionMessage(tx, site, enc, consent))


def prepared(tmp_path=None):
    core, keys = fresh_core(tmp_path)
    for s in ("siteA", "siteB", "siteC"):
        core.register_site(s)
    core.register_consent("con-a", "siteA")
    core.register_consent("con-b", "siteB")
    core.register_consent("con-c", "siteC")
    return core, keys


class TestOutcomes:
    def test_first_submission_is_non_match(self):
        core, keys = prepared()
        resp = submit(core, keys, "t1", "siteA", "con-a", HANS)
        assert resp["outcome"] == OutcomeKind.NON_MATCH.value
        assert len(core.entries) == 1

    def test_identical_encoding_is_perfect_match_not_restored(self):
        core, keys = prepared()
        submit(core, keys, "t1", "siteA", "con-a", HANS)
        resp = submit(core, keys, "t2", "siteB", "con-b", HANS)
        assert resp["outcome"] == OutcomeKind.PERFECT_MATCH.value
        assert len(core.entries[1].contributions) == 1

    def test_close_variant_merges_automatically(self):
        core, keys = prepared()
        submit(core, keys, "t1", "siteA", "con-a", HANS)
        resp = submit(core, keys, "t2", "siteB", "con-b", HANS_TYPO)
        assert resp["outcome"] == OutcomeKind.AUTOMATIC_MERGE.value
        assert len(core.entries) == 1
        assert core.entries[1].sites() == ["siteA", "siteB"]

    def test_gray_zone_opens_case(self):
        core, keys = prepared()
        submit(core, keys, "t1", "siteA", "con-a", HANS)
        resp = submit(core, keys, "t2", "siteB", "con-b", HANS_GRAY)
        assert resp["outcome"] == OutcomeKind.POSSIBLE_MATCH.value
        assert len(core.entries) == 2
        assert core.entries[2].tentative
        assert core.cases["C1"].involvedEntries == [1, 2]
        assert set(core.cases["C1"].involvedSites) == {"siteA", "siteB"}

    def test_distinct_person_is_non_match(self):
        core, keys = prepared()
        submit(core, keys, "t1", "siteA", "con-a", HANS)
        resp = submit(core, keys, "t2", "siteB", "con-b", PETRA)
        assert resp["outcome"] == OutcomeKind.NON_MATCH.value
        assert len(core.entries) == 2

    def test_consent_required(self):
        core, keys = prepared()
        with pytest.raises(ConsentInactiveError):
            submit(core, keys, "t1", "siteA", "no-such-consent", HANS)

    def test_params_fingerprint_enforced(self):
        core, keys = prepared()
        other = BloomParams(mBits=512, kHashes=8, qGramSize=2, padding=True, keyId="site-bloom")
        enc = encode_identity(normalize(make_record("t1", **HANS)), other, keys)
        with pytest.raises(ParamsMismatchError):
            core.submit_encoding(SubmissionMessage("t1", "siteA", enc, "con-a"))


class TestIdempotency:
    def test_tx_replay_returns_same_response_without_side_effects(self):
        core, keys = prepared()
        first = submit(core, keys, "t1", "siteA", "con-a", HANS)
        digest = core.state_digest()
        again = submit(core, keys, "t1", "siteA", "con-a", HANS)
        assert again == first
        assert core.state_digest() == digest


class TestPseudonyms:
    def test_sites_get_distinct_diz_pseudonyms(self):
        core, keys = prepared()
        a = submit(core, keys, "t1", "siteA", "con-a", HANS)
        b = submit(core, keys, "t2", "siteB", "con-b", HANS_TYPO)
        assert a["dizPseudonym"] != b["dizPseudonym"]
        assert core.cross_site_pseudonym(1) not in (a["dizPseudonym"], b["dizPseudonym"])

    def test_hub_translation_converges(self):
        """Two sites' tokens for the same person translate to one hub token."""
        core, keys = prepared()
        a = submit(core, keys, "t1", "siteA", "con-a", HANS)
        b = submit(core, keys, "t2", "siteB", "con-b", HANS_TYPO)
        xa = core.translate_for_hub(a["dizPseudonym"], "siteA", caller=HUB)
        xb = core.translate_for_hub(b["dizPseudonym"], "siteB", caller=HUB)
        assert xa == xb

    def test_sites_cannot_translate(self):
        core, keys = prepared()
        a = submit(core, keys, "t1", "siteA", "con-a", HANS)
        with pytest.raises(CallerIsSiteError):
            core.translate_for_hub(a["dizPseudonym"], "siteA", caller="siteA")

    def test_unknown_pseudonym(self):
        core, _ = prepared()
        with pytest.raises(UnknownPseudonymError):
            core.translate_for_hub("0000000000", "siteA", caller=HUB)


def open_gray_case(tmp_path=None):
    core, keys = prepared(tmp_path)
    submit(core, keys, "t1", "siteA", "con-a", HANS)
    submit(core, keys, "t2", "siteB", "con-b", HANS_GRAY)
    return core, keys


class TestClearing:
    def test_full_merge_flow(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.request_plaintext("C1")
        assert core.cases["C1"].status is CaseStatus.AWAITING_PLAINTEXT
        with pytest.raises(WrongStatusError):
            core.resolve_clearing("C1", "MERGE", actor="clearing")  # not all provided
        core.provide_plaintext("C1", "siteA", make_record("p1", **HANS))
        core.provide_plaintext("C1", "siteB", make_record("p2", **HANS_GRAY))
        assert core.cases["C1"].resolvable
        core.resolve_clearing("C1", "MERGE", actor="clearing")
        case = core.cases["C1"]
        assert case.status is CaseStatus.RESOLVED_MERGE
        assert case.plaintextSlots == {}
        assert len(core.entries) == 1
        assert core.alias == {2: 1}

    def test_separate_clears_tentative(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.request_plaintext("C1")
        core.provide_plaintext("C1", "siteA", make_record("p1", **HANS))
        core.provide_plaintext("C1", "siteB", make_record("p2", **HANS_GRAY))
        core.resolve_clearing("C1", "SEPARATE", actor="clearing")
        assert core.cases["C1"].status is CaseStatus.RESOLVED_SEPARATE
        assert len(core.entries) == 2
        assert not core.entries[2].tentative

    def test_uninvolved_site_rejected(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.request_plaintext("C1")
        with pytest.raises(NotInvolvedError):
            core.provide_plaintext("C1", "siteC", make_record("p", **PETRA))

    def test_provide_requires_awaiting_state(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        with pytest.raises(WrongStatusError):
            core.provide_plaintext("C1", "siteA", make_record("p", **HANS))

    def test_spill_key_shredded_on_resolution(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        key_path = tmp_path / "spill" / "case-C1.key"
        assert key_path.exists()
        core.request_plaintext("C1")
        core.provide_plaintext("C1", "siteA", make_record("p1", **HANS))
        core.provide_plaintext("C1", "siteB", make_record("p2", **HANS_GRAY))
        core.resolve_clearing("C1", "MERGE", actor="clearing")
        assert not key_path.exists()

    def test_event_log_never_contains_clearing_plaintext(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.request_plaintext("C1")
        core.provide_plaintext("C1", "siteA", make_record("p1", **HANS))
        core.provide_plaintext("C1", "siteB", make_record("p2", **HANS_GRAY))
        core.resolve_clearing("C1", "MERGE", actor="clearing")
        events = EventLog.read(str(tmp_path / "fttp.events"))
        hits = scan_plaintext_leak(events, ["MAIER", "Maier", "SCHMIDT", "Schmidt", "1980-05-02"])
        assert hits == []


class TestWithdrawal:
    def test_entry_removed_and_cases_voided(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        out = core.withdraw_consent("con-b")
        assert out["removedEntry"]
        assert out["voidedCases"] == ["C1"]
        assert 2 not in core.entries
        assert core.cases["C1"].status is CaseStatus.VOID
        assert not (tmp_path / "spill" / "case-C1.key").exists()

    def test_deletion_notices_sent(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.withdraw_consent("con-b")
        events = EventLog.read(str(tmp_path / "fttp.events"))
        notices = [
            e for e in events
            if e["type"] == "message" and e["payload"]["kind"] == "deletion_notice"
        ]
        assert {e["payload"]["to"] for e in notices} == {"siteB"}

    def test_double_withdrawal_rejected(self):
        core, keys = prepared()
        submit(core, keys, "t1", "siteA", "con-a", HANS)
        core.withdraw_consent("con-a")
        with pytest.raises(AlreadyWithdrawnError):
            core.withdraw_consent("con-a")


class TestPersistence:
    def test_replay_rebuilds_state(self, tmp_path):
        core, keys = open_gray_case(tmp_path)
        core.request_plaintext("C1")
        core.provide_plaintext("C1", "siteA", make_record("p1", **HANS))
        digest = core.state_digest()
        core.log.close()
        reopened = FttpCore.open(
            CONFIG, keys, str(tmp_path / "fttp.events"), spill_dir=str(tmp_path / "spill")
        )
        assert reopened.state_digest() == digest
        # the spill key survives the restart, so the flow can finish
        reopened.provide_plaintext("C1", "siteB", make_record("p2", **HANS_GRAY))
        reopened.resolve_clearing("C1", "MERGE", actor="clearing")
        assert reopened.cases["C1"].status is CaseStatus.RESOLVED_MERGE


def scenario_actions():
    def rec(rid, fields):
        from linkwerk.idmodel import record_to_json
        return record_to_json(make_record(rid, **fields))

    return [
        {"op": "register_site", "actor": "siteA"},
        {"op": "register_site", "actor": "siteB"},
        {"op": "register_consent", "actor": "siteA", "args": {"consentId": "con-a"}},
        {"op": "register_consent", "actor": "siteB", "args": {"consentId": "con-b"}},
        {"op": "submit", "actor": "siteA",
         "args": {"txId": "t1", "consentRef": "con-a", "identity": rec("t1", HANS)}},
        {"op": "submit", "actor": "siteB",
         "args": {"txId": "t2", "consentRef": "con-b", "identity": rec("t2", HANS_GRAY)}},
        {"op": "request_plaintext", "actor": "clearing", "args": {"caseId": "C1"}},
        {"op": "provide_plaintext", "actor": "siteA",
         "args": {"caseId": "C1", "identity": rec("p1", HANS)}},
        {"op": "provide_plaintext", "actor": "siteB",
         "args": {"caseId": "C1", "identity": rec("p2", HANS_GRAY)}},
        {"op": "resolve", "actor": "clearing", "args": {"caseId": "C1", "verdict": "MERGE"}},
        {"op": "translate", "actor": "hub", "args": {"txId": "t1", "siteId": "siteA"}},
        {"op": "translate", "actor": "siteA", "args": {"txId": "t1", "siteId": "siteA"}},
    ]


class TestScenario:
    def test_deterministic_event_log(self, tmp_path):
        keys = KeyStore({"site-bloom": b"s" * 32, "fttp-psn": b"f" * 32})
        runs = []
        for i in (1, 2):
            path = tmp_path / f"run{i}.events"
            run_scenario(scenario_actions(), CONFIG, keys,
                         event_path=str(path), spill_dir=str(tmp_path / f"spill{i}"), seed=7)
            runs.append(path.read_bytes())
        assert runs[0] == runs[1]

    def test_rejected_action_logged(self, tmp_path):
        keys = KeyStore({"site-bloom": b"s" * 32, "fttp-psn": b"f" * 32})
        result = run_scenario(scenario_actions(), CONFIG, keys, seed=7)
        rejected = [e for e in result.events if e["type"] == "rejected"]
        assert len(rejected) == 1
        assert rejected[0]["payload"] == {"op": "translate", "actor": "siteA",
                                         "code": "CALLER_IS_SITE"}

    def test_no_cross_site_or_plaintext_leaks(self):
        keys = KeyStore({"site-bloom": b"s" * 32, "fttp-psn": b"f" * 32})
        result = run_scenario(scenario_actions(), CONFIG, keys, seed=7)
        assert scan_cross_site_leak(result.events, result.core) == []
        site_msgs = site_addressed_messages(result.events)
        assert site_msgs  # the scan is not vacuous
        hits = scan_plaintext_leak(site_msgs, ["MAIER", "SCHMIDT", "1980-05-02"])
        assert hits == []

    def test_load_script_validation(self, tmp_path):
        good = tmp_path / "good.scenario"
        good.write_text(
            json.dumps({"format": "linkwerk-scenario", "version": 1}) + "\n"
            + json.dumps({"op": "register_site", "actor": "siteA"}) + "\n"
        )
        assert load_script(good) == [{"op": "register_site", "actor": "siteA"}]
        bad = tmp_path / "bad.scenario"
        bad.write_text('{"op": "register_site"}\n')
        with pytest.raises(ValueError, match="actor"):
            load_script(bad)
        garbled = tmp_path / "garbled.scenario"
        garbled.write_text("not json\n")
        with pytest.raises(ValueError, match="invalid JSON"):
            load_script(garbled)

"""Batch CLI: normalize, encode, link, cascade, gen-corpus, evaluate,
simulate, serve. Every run writes a RunManifest next to its output so results
can be reproduced from config digest + seeds + input digests.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import json
import os
import sys

import click

from . import __version__, evalgen, fttp as fttp_mod, linkage
from .errors import LinkwerkError
from .idmodel import (
    normalize,
    normalized_to_json,
    read_records_csv,
    write_records_csv,
)
from .linkage import load_config, load_preset
from .pprl import BloomParams, KeyStore, encode_bloom
from .registry import EventLog


def _digest_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_path: str, subcommand: str, seeds: dict, inputs: dict, config_digest: str = "") -> None:
    manifest = {
        "tool": "linkwerk",
        "version": __version__,
        "subcommand": subcommand,
        "configDigest": config_digest,
        "seeds": seeds,
        "inputDigests": {name: _digest_file(p) for name, p in inputs.items() if os.path.exists(p)},
        "outputDigest": _digest_file(out_path) if os.path.exists(out_path) else None,
        "createdAt": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _cleanup(path: str) -> None:
    for p in (path, path + ".manifest.json"):
        if p and os.path.exists(p):
            os.remove(p)


def _config_from_flags(preset: str | None, config: str | None) -> linkage.LinkageConfig:
    if config:
        return load_config(config)
    return load_preset(preset or "registry-probabilistic")


@click.group()
@click.version_option(__version__)
def main():
    """Privacy-preserving record linkage toolkit."""


@main.command("normalize")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
def cmd_normalize(in_path, out_path, fmt):
    """Canonicalize a record CSV and attach phonetic codes."""
    try:
        records = read_records_csv(in_path)
        normalized = [normalize(r) for r in records]
        if fmt == "json":
            with open(out_path, "w", encoding="utf-8") as fh:
                json.dump([normalized_to_json(n) for n in normalized], fh, indent=2, sort_keys=True)
                fh.write("\n")
        else:
            with open(out_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["record_id", "first_name", "last_name", "phonetic_first", "phonetic_last", "birth_date", "sex"])
                for n in normalized:
                    writer.writerow([n.recordId, n.firstName, n.lastName, n.phoneticFirstName, n.phoneticLastName, n.birthDate.isoformat(), n.sex.value])
        _write_manifest(out_path, "normalize", {}, {"in": in_path})
    except (LinkwerkError, ValueError, KeyError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("encode")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--keyfile", envvar="LINKWERK_KEYFILE", required=True, type=click.Path(exists=True))
@click.option("--key-id", default="default")
@click.option("--m-bits", default=1024)
@click.option("--k-hashes", default=8)
@click.option("--hardening", type=click.Choice(["NONE", "BALANCED"]), default="NONE")
def cmd_encode(in_path, out_path, keyfile, key_id, m_bits, k_hashes, hardening):
    """Bloom-encode the name/birth-date fields of a record CSV."""
    try:
        from .pprl import Hardening

        keys = KeyStore.from_file(keyfile)
        params = BloomParams(mBits=m_bits, kHashes=k_hashes, keyId=key_id, hardening=Hardening(hardening))
        records = read_records_csv(in_path)
        rows = []
        for r in records:
            n = normalize(r)
            enc = fttp_mod.encode_identity(n, params, keys)
            rows.append({"recordId": r.recordId, "encoding": enc.serialize()})
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"params": params.to_json(), "encodings": rows}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out_path, "encode", {}, {"in": in_path})
    except (LinkwerkError, ValueError, KeyError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("link")
@click.option("--in", "in_path", required=True, type=click.Path(exists=True), help="dataset A (CSV)")
@click.option("--in-b", "in_b_path", type=click.Path(exists=True), help="dataset B; defaults to A (dedup)")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--preset", default=None)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
def cmd_link(in_path, in_b_path, out_path, preset, config_path, fmt):
    """Probabilistic linkage of two record CSVs."""
    try:
        cfg = _config_from_flags(preset, config_path)
        a = [normalize(r) for r in read_records_csv(in_path)]
        if in_b_path:
            b = [normalize(r) for r in read_records_csv(in_b_path)]
        else:
            b = a
        result = linkage.link_datasets(a, b, cfg, dedup=in_b_path is None)
        if fmt == "json":
            with open(out_path, "w", encoding="utf-8") as fh:
                json.dump(result.to_json(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        else:
            with open(out_path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["a", "b", "verdict", "total"])
                for p in [*result.matches, *result.possibles]:
                    writer.writerow([p.aId, p.bId, p.verdict.value, f"{p.score.total:.4f}"])
        inputs = {"in": in_path}
        if in_b_path:
            inputs["inB"] = in_b_path
        cfg_digest = hashlib.sha256(
            json.dumps(linkage.config_to_json(cfg), sort_keys=True).encode()
        ).hexdigest()
        _write_manifest(out_path, "link", {"seed": cfg.seed}, inputs, cfg_digest)
    except (LinkwerkError, ValueError, KeyError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("cascade")
@click.option("--in", "claims_path", required=True, type=click.Path(exists=True), help="claims CSV")
@click.option("--registry", "registry_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0)
def cmd_cascade(claims_path, registry_path, out_path, seed):
    """Deterministic claims-to-registry assignment cascade."""
    try:
        claims = _read_cascade_csv(claims_path)
        registry = _read_cascade_csv(registry_path)
        assignment = linkage.deterministic_cascade(claims, registry, seed)
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"seed": seed, "assignment": assignment}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out_path, "cascade", {"seed": seed}, {"claims": claims_path, "registry": registry_path})
    except (LinkwerkError, ValueError, KeyError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


def _read_cascade_csv(path) -> list[linkage.CascadeRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            linkage.CascadeRecord(
                recordId=row["record_id"],
                birthYear=int(row["birth_year"]),
                sex=row["sex"],
                municipalityCode=row["municipality_code"],
                cancerType=row["cancer_type"],
                diagnosisDate=_dt.date.fromisoformat(row["diagnosis_date"]),
                icdCode=row["icd_code"],
                diagnosisSource=row["diagnosis_source"],
            )
            for row in csv.DictReader(fh)
        ]


@main.command("gen-corpus")
@click.option("--out", "out_path", required=True, type=click.Path(), help="records CSV; truth and provenance written alongside")
@click.option("--entities", default=100)
@click.option("--records-per-entity", default=2.5)
@click.option("--typo-rate", default=0.05)
@click.option("--swap-rate", default=0.02)
@click.option("--date-error-rate", default=0.0)
@click.option("--missing-rate", default=0.05)
@click.option("--name-change-rate", default=0.0)
@click.option("--seed", default=0)
def cmd_gen_corpus(out_path, entities, records_per_entity, typo_rate, swap_rate, date_error_rate, missing_rate, name_change_rate, seed):
    """Generate a synthetic identity corpus with ground truth."""
    try:
        cfg = evalgen.CorruptionConfig(
            typoRate=typo_rate,
            fieldSwapRate=swap_rate,
            dateErrorRate=date_error_rate,
            missingRate=missing_rate,
            nameChangeRate=name_change_rate,
            seed=seed,
        )
        records, truth, provenance = evalgen.generate_corpus(entities, records_per_entity, cfg)
        write_records_csv(out_path, records)
        base = out_path.rsplit(".", 1)[0]
        evalgen.write_truth_csv(base + ".truth.csv", truth)
        with open(base + ".provenance.json", "w", encoding="utf-8") as fh:
            json.dump(provenance, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_manifest(out_path, "gen-corpus", {"seed": seed}, {})
    except (LinkwerkError, ValueError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("evaluate")
@click.option("--in", "result_path", required=True, type=click.Path(exists=True), help="LinkageResult JSON")
@click.option("--truth", "truth_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["json", "csv"]), default="json")
def cmd_evaluate(result_path, truth_path, out_path, fmt):
    """Score a linkage result against ground truth."""
    try:
        with open(result_path, encoding="utf-8") as fh:
            raw = json.load(fh)
        pairs = [(m["a"], m["b"]) for m in raw.get("matches", [])]
        truth = evalgen.read_truth_csv(truth_path)
        report = evalgen.evaluate(pairs, truth)
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        click.echo(report.table())
        _write_manifest(out_path, "evaluate", {}, {"in": result_path, "truth": truth_path})
    except (LinkwerkError, ValueError, KeyError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("simulate")
@click.option("--in", "script_path", required=True, type=click.Path(exists=True), help="scenario script (JSON lines)")
@click.option("--out", "out_path", required=True, type=click.Path(), help="event log (JSON lines)")
@click.option("--keyfile", envvar="LINKWERK_KEYFILE", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0)
@click.option("--upper", default=0.80)
@click.option("--lower", default=0.60)
@click.option("--bloom-key-id", default="site-bloom")
def cmd_simulate(script_path, out_path, keyfile, seed, upper, lower, bloom_key_id):
    """Run a multi-site fTTP scenario deterministically."""
    try:
        keys = KeyStore.from_file(keyfile)
        config = fttp_mod.FttpConfig(
            bloomParams=BloomParams(keyId=bloom_key_id),
            upperThreshold=upper,
            lowerThreshold=lower,
        )
        actions = fttp_mod.load_script(script_path)
        spill = out_path + ".spill"
        result = fttp_mod.run_scenario(
            actions, config, keys, event_path=out_path, spill_dir=spill, seed=seed
        )
        click.echo(f"{len(result.events)} events, {len(result.core.entries)} entries, "
                   f"{len(result.core.cases)} clearing cases")
        _write_manifest(out_path, "simulate", {"seed": seed}, {"script": script_path})
    except (LinkwerkError, ValueError) as exc:
        _cleanup(out_path)
        raise click.ClickException(str(exc))


@main.command("serve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1")
@click.option("--port", default=8423)
def cmd_serve(config_path, host, port):
    """Start the HTTP service."""
    import uvicorn

    from .service import create_app, load_service_config

    try:
        cfg = load_service_config(config_path)
        app = create_app(cfg)
    except (LinkwerkError, ValueError, KeyError) as exc:
        raise click.ClickException(str(exc))
    uvicorn.run(app, host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()

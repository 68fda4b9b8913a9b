"""Synthetic identity corpora with controlled error injection, plus
linkage-quality evaluation (homonym/synonym rates, sensitivity/specificity)
against known ground truth.

Error counting is pairwise: a homonym error is a predicted same-entity pair
the truth denies, a synonym error a true pair the prediction misses. The
specificity denominator is restricted to the supplied candidate universe when
one is given (an all-pairs denominator is uninformative at scale).
"""

from __future__ import annotations

import csv
import itertools
import json
import random
import string
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional, Sequence, Union

from .errors import UnknownRecordError
from .idmodel import IdentityRecord, PartialDate, Sex
from .linkage import LinkageResult


# --- bundled frequency data --------------------------------------------------

def _data_text(name: str) -> str:
    return resources.files("linkwerk").joinpath(f"data/{name}").read_text(encoding="utf-8")


def load_first_names() -> list[tuple[str, Sex]]:
    rows = list(csv.DictReader(_data_text("first_names.csv").splitlines()))
    return [(r["name"], Sex(r["sex"])) for r in rows]


def load_last_names() -> list[str]:
    return [l for l in _data_text("last_names.txt").splitlines() if l]


def load_cities() -> list[tuple[str, str]]:
    rows = list(csv.DictReader(_data_text("cities.csv").splitlines()))
    return [(r["city"], r["postal_code"]) for r in rows]


def load_streets() -> list[str]:
    return [l for l in _data_text("streets.txt").splitlines() if l]


# --- corpus generation -------------------------------------------------------

@dataclass(frozen=True)
class CorruptionConfig:
    typoRate: float = 0.0
    fieldSwapRate: float = 0.0
    dateErrorRate: float = 0.0
    missingRate: float = 0.0
    nameChangeRate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("typoRate", "fieldSwapRate", "dateErrorRate", "missingRate", "nameChangeRate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0,1]")


@dataclass(frozen=True)
class GroundTruth:
    entity_of: dict[str, str]  # recordId -> entityId

    def true_pairs(self) -> set[frozenset[str]]:
        clusters: dict[str, list[str]] = {}
        for rid, eid in self.entity_of.items():
            clusters.setdefault(eid, []).append(rid)
        pairs = set()
        for members in clusters.values():
            for a, b in itertools.combinations(sorted(members), 2):
                pairs.add(frozenset((a, b)))
        return pairs


_TYPO_FIELDS = ("firstName", "lastName", "city", "street", "birthPlace")
_OPTIONAL_FIELDS = ("nationality", "street", "houseNumber", "postalCode", "city", "birthPlace", "kvnr")
_LETTERS = string.ascii_lowercase


def _typo(value: str, rng: random.Random) -> str:
    """One random substitution, transposition or deletion (edit distance 1)."""
    if not value:
        return value
    kind = rng.choice(["sub", "swap", "del"]) if len(value) > 1 else "sub"
    i = rng.randrange(len(value))
    if kind == "sub":
        repl = rng.choice([c for c in _LETTERS if c != value[i].lower()])
        return value[:i] + repl + value[i + 1 :]
    if kind == "swap":
        i = rng.randrange(len(value) - 1)
        if value[i] == value[i + 1]:
            return _typo(value, rng)
        return value[:i] + value[i + 1] + value[i] + value[i + 2 :]
    return value[:i] + value[i + 1 :]


def corrupt(
    record: IdentityRecord, cfg: CorruptionConfig, rng: random.Random,
    surnames: Optional[Sequence[str]] = None,
) -> tuple[IdentityRecord, list[str]]:
    """Apply each configured corruption channel independently; returns the
    corrupted record and its provenance notes."""
    fields = {
        "firstName": record.firstName,
        "lastName": record.lastName,
        "nationality": record.nationality,
        "street": record.street,
        "houseNumber": record.houseNumber,
        "postalCode": record.postalCode,
        "city": record.city,
        "birthPlace": record.birthPlace,
        "kvnr": record.kvnr,
    }
    birth = record.birthDate
    former = list(record.formerNames)
    notes: list[str] = []

    if rng.random() < cfg.nameChangeRate:
        pool = [s for s in (surnames or load_last_names()) if s != fields["lastName"]]
        new = rng.choice(pool)
        former.append(fields["lastName"])
        notes.append(f"name_change:{fields['lastName']}->{new}")
        fields["lastName"] = new

    for name in _TYPO_FIELDS:
        if fields.get(name) and rng.random() < cfg.typoRate:
            before = fields[name]
            fields[name] = _typo(before, rng)
            notes.append(f"typo:{name}")

    if rng.random() < cfg.fieldSwapRate:
        fields["firstName"], fields["lastName"] = fields["lastName"], fields["firstName"]
        notes.append("field_swap:first<->last")

    if birth.day is not None and rng.random() < cfg.dateErrorRate:
        if birth.day <= 12 and birth.day != birth.month:
            birth = PartialDate(birth.year, birth.day, birth.month)
            notes.append("date:day_month_transposed")
        else:
            new_day = rng.randrange(1, 29)
            if new_day != birth.day:
                birth = PartialDate(birth.year, birth.month, new_day)
                notes.append("date:day_changed")

    for name in _OPTIONAL_FIELDS:
        if fields.get(name) and rng.random() < cfg.missingRate:
            fields[name] = None
            notes.append(f"missing:{name}")

    out = IdentityRecord(
        recordId=record.recordId,
        firstName=fields["firstName"],
        lastName=fields["lastName"],
        formerNames=tuple(former),
        birthDate=birth,
        sex=record.sex,
        nationality=fields["nationality"],
        street=fields["street"],
        houseNumber=fields["houseNumber"],
        postalCode=fields["postalCode"],
        city=fields["city"],
        birthPlace=fields["birthPlace"],
        kvnr=fields["kvnr"],
    )
    return out, notes


def _records_per_entity(dist: Union[float, dict[int, float]], rng: random.Random) -> int:
    if isinstance(dist, dict):
        counts = sorted(dist)
        weights = [dist[c] for c in counts]
        return rng.choices(counts, weights=weights)[0]
    # Mean-based: 1 + Poisson-ish extra records.
    mean_extra = max(dist - 1.0, 0.0)
    n = 1
    while rng.random() < mean_extra / (mean_extra + 1.0):
        n += 1
    return n


def generate_corpus(
    n_entities: int,
    records_per_entity: Union[float, dict[int, float]],
    corruption: CorruptionConfig,
) -> tuple[list[IdentityRecord], GroundTruth, dict[str, list[str]]]:
    """(records, truth, provenance). Deterministic under corruption.seed."""
    if n_entities < 1:
        raise ValueError("n_entities must be >= 1")
    rng = random.Random(corruption.seed)
    first_names = load_first_names()
    last_names = load_last_names()
    cities = load_cities()
    streets = load_streets()

    records: list[IdentityRecord] = []
    truth: dict[str, str] = {}
    provenance: dict[str, list[str]] = {}
    rec_no = 0
    for e in range(n_entities):
        entity_id = f"E{e:06d}"
        first, sex = rng.choice(first_names)
        last = rng.choice(last_names)
        city, plz = rng.choice(cities)
        year = rng.randrange(1930, 2010)
        month = rng.randrange(1, 13)
        day = rng.randrange(1, 29)
        base = IdentityRecord(
            recordId="pending",
            firstName=first,
            lastName=last,
            birthDate=PartialDate(year, month, day),
            sex=sex,
            street=rng.choice(streets),
            houseNumber=str(rng.randrange(1, 200)),
            postalCode=plz,
            city=city,
            birthPlace=rng.choice(cities)[0],
        )
        n_records = _records_per_entity(records_per_entity, rng)
        for i in range(n_records):
            rec_no += 1
            rid = f"R{rec_no:07d}"
            rec = IdentityRecord(**{**base.__dict__, "recordId": rid})
            if i == 0:
                notes: list[str] = []
            else:
                rec, notes = corrupt(rec, corruption, rng, last_names)
            records.append(rec)
            truth[rid] = entity_id
            provenance[rid] = notes
    return records, GroundTruth(truth), provenance


# --- evaluation --------------------------------------------------------------

@dataclass(frozen=True)
class LinkageReport:
    truePairs: int
    predictedPairs: int
    truePositivePairs: int
    homonymErrors: int
    synonymErrors: int
    homonymRate: float
    synonymRate: float
    sensitivity: float
    specificity: float
    precision: float
    recall: float
    candidateUniverse: Optional[int] = None

    def to_json(self) -> dict:
        return self.__dict__.copy()

    def table(self) -> str:
        rows = [
            ("true pairs", self.truePairs),
            ("predicted pairs", self.predictedPairs),
            ("true positives", self.truePositivePairs),
            ("homonym errors", self.homonymErrors),
            ("synonym errors", self.synonymErrors),
            ("homonym rate", f"{self.homonymRate:.4%}"),
            ("synonym rate", f"{self.synonymRate:.4%}"),
            ("sensitivity", f"{self.sensitivity:.4%}"),
            ("specificity", f"{self.specificity:.4%}"),
            ("precision", f"{self.precision:.4%}"),
            ("recall", f"{self.recall:.4%}"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


class _UnionFind:
    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, x: str) -> str:
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: str, b: str) -> None:
        self.parent[self.find(a)] = self.find(b)


def predicted_pairs_from(
    prediction: Union[LinkageResult, Iterable[tuple[str, str]], dict[str, str]],
) -> set[frozenset[str]]:
    """Same-cluster pairs implied by a prediction (transitive closure)."""
    uf = _UnionFind()
    if isinstance(prediction, LinkageResult):
        edges = [(p.aId, p.bId) for p in prediction.matches]
    elif isinstance(prediction, dict):
        # recordId -> clusterId
        clusters: dict[str, list[str]] = {}
        for rid, cid in prediction.items():
            clusters.setdefault(cid, []).append(rid)
        edges = [
            (members[0], other) for members in clusters.values() for other in members[1:]
        ]
    else:
        edges = list(prediction)
    for a, b in edges:
        uf.union(a, b)
    clusters2: dict[str, list[str]] = {}
    for rid in uf.parent:
        clusters2.setdefault(uf.find(rid), []).append(rid)
    pairs = set()
    for members in clusters2.values():
        for a, b in itertools.combinations(sorted(members), 2):
            pairs.add(frozenset((a, b)))
    return pairs


def evaluate(
    prediction: Union[LinkageResult, Iterable[tuple[str, str]], dict[str, str]],
    truth: GroundTruth,
    candidate_pairs: Optional[set[frozenset[str]]] = None,
) -> LinkageReport:
    predicted = predicted_pairs_from(prediction)
    for pair in predicted:
        for rid in pair:
            if rid not in truth.entity_of:
                raise UnknownRecordError(rid)
    true_pairs = truth.true_pairs()

    tp_pairs = predicted & true_pairs
    homonyms = predicted - true_pairs
    synonyms = true_pairs - predicted

    n_true, n_pred = len(true_pairs), len(predicted)
    sensitivity = len(tp_pairs) / n_true if n_true else 1.0
    precision = len(tp_pairs) / n_pred if n_pred else 1.0

    if candidate_pairs is not None:
        universe = candidate_pairs
    else:
        universe = set()
        ids = sorted(truth.entity_of)
        for a, b in itertools.combinations(ids, 2):
            universe.add(frozenset((a, b)))
    negatives = universe - true_pairs
    fp_in_universe = len(homonyms & universe) if candidate_pairs is not None else len(homonyms)
    specificity = (
        (len(negatives) - fp_in_universe) / len(negatives) if negatives else 1.0
    )

    return LinkageReport(
        truePairs=n_true,
        predictedPairs=n_pred,
        truePositivePairs=len(tp_pairs),
        homonymErrors=len(homonyms),
        synonymErrors=len(synonyms),
        homonymRate=len(homonyms) / n_pred if n_pred else 0.0,
        synonymRate=len(synonyms) / n_true if n_true else 0.0,
        sensitivity=sensitivity,
        specificity=specificity,
        precision=precision,
        recall=sensitivity,
        candidateUniverse=len(universe) if candidate_pairs is not None else None,
    )


def write_truth_csv(path, truth: GroundTruth) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["record_id", "entity_id"])
        for rid, eid in sorted(truth.entity_of.items()):
            writer.writerow([rid, eid])


def read_truth_csv(path) -> GroundTruth:
    with open(path, newline="", encoding="utf-8") as fh:
        return GroundTruth({r["record_id"]: r["entity_id"] for r in csv.DictReader(fh)})

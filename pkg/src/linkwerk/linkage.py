"""Matching engines: exact, rule-based, deterministic cascade, and
Fellegi-Sunter probabilistic linkage with exchange groups, blocking and
three-zone classification.

Agreement/disagreement weights are log2(m/u) and log2((1-m)/(1-u)). Partial
string agreement interpolates linearly between the two weights above a
per-attribute floor. Missing values either count as disagreement or are
dropped with renormalization of the remaining weight mass.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import random
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

from .errors import ConfigError
from .idmodel import (
    Agreement,
    NormalizedIdentity,
    PartialDate,
    cologne_phonetic,
    compare_date,
    levenshtein_similarity,
)
from . import pprl

MISSING_TOKEN = "⟂"  # ⟂, the reserved missing-block-part marker


class Comparator(str, enum.Enum):
    EXACT = "EXACT"
    LEVENSHTEIN = "LEVENSHTEIN"
    DATE = "DATE"
    PHONETIC = "PHONETIC"
    BLOOM_DICE = "BLOOM_DICE"
    UNIQUE_ID = "UNIQUE_ID"


class MissingPolicy(str, enum.Enum):
    IGNORE_RENORMALIZE = "IGNORE_RENORMALIZE"
    DISAGREE = "DISAGREE"


class Verdict(str, enum.Enum):
    MATCH = "MATCH"
    POSSIBLE = "POSSIBLE"
    NON_MATCH = "NON_MATCH"


@dataclass(frozen=True)
class FrequencyTable:
    attribute: str
    frequencies: dict[str, float]
    default: float

    def __post_init__(self):
        if self.default <= 0:
            raise ValueError("default frequency must be > 0")
        for v, f in self.frequencies.items():
            if not 0 < f <= 1:
                raise ValueError(f"frequency of {v!r} out of (0,1]")

    def u_for(self, value: Optional[str]) -> float:
        if value is None:
            return self.default
        return max(self.frequencies.get(value, self.default), self.default)

    @classmethod
    def from_corpus(cls, attribute: str, values: Sequence[str]) -> "FrequencyTable":
        n = len(values)
        counts: dict[str, int] = {}
        for v in values:
            counts[v] = counts.get(v, 0) + 1
        return cls(attribute, {v: c / n for v, c in counts.items()}, 1.0 / (2 * n))


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    comparator: Comparator
    mProb: float
    uProb: Union[float, str]  # float, or the name of a frequency table
    missingPolicy: MissingPolicy = MissingPolicy.IGNORE_RENORMALIZE
    exchangeGroup: Optional[str] = None
    partialFloor: float = 0.0

    def __post_init__(self):
        if not 0 < self.mProb < 1:
            raise ValueError("mProb must be in (0,1)")
        if isinstance(self.uProb, float):
            if not 0 < self.uProb < 1:
                raise ValueError("uProb must be in (0,1)")
            if self.mProb <= self.uProb:
                raise ValueError("mProb must exceed uProb")
        if not 0 <= self.partialFloor < 1:
            raise ValueError("partialFloor must be in [0,1)")


@dataclass(frozen=True)
class BlockingSpec:
    keyParts: tuple[str, ...]

    def __post_init__(self):
        if not self.keyParts:
            raise ValueError("keyParts must be non-empty")
        if isinstance(self.keyParts, list):
            object.__setattr__(self, "keyParts", tuple(self.keyParts))


@dataclass(frozen=True)
class LinkageConfig:
    attributes: tuple[AttributeSpec, ...]
    upperThreshold: float
    lowerThreshold: float
    blocking: tuple[BlockingSpec, ...] = ()
    seed: int = 0
    frequencyTables: dict[str, FrequencyTable] = field(default_factory=dict)
    bloomParams: Optional[pprl.BloomParams] = None

    def __post_init__(self):
        if not self.attributes:
            raise ValueError("at least one attribute required")
        if self.lowerThreshold > self.upperThreshold:
            raise ValueError("lowerThreshold must not exceed upperThreshold")
        for key, conv in (("attributes", tuple), ("blocking", tuple)):
            v = getattr(self, key)
            if isinstance(v, list):
                object.__setattr__(self, key, conv(v))

    def table_for(self, spec: AttributeSpec) -> Optional[FrequencyTable]:
        if isinstance(spec.uProb, str):
            try:
                return self.frequencyTables[spec.uProb]
            except KeyError:
                raise ConfigError(f"unknown frequency table {spec.uProb!r}") from None
        return None


@dataclass(frozen=True)
class AttributeContribution:
    name: str
    similarity: Optional[float]  # None when missing under IGNORE_RENORMALIZE
    weightContribution: float


@dataclass(frozen=True)
class MatchScore:
    total: float
    perAttribute: tuple[AttributeContribution, ...]
    permutationUsed: Optional[dict[str, str]] = None

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "perAttribute": [
                {"name": c.name, "similarity": c.similarity, "weight": c.weightContribution}
                for c in self.perAttribute
            ],
            "permutationUsed": self.permutationUsed,
        }


@dataclass(frozen=True)
class MatchDecision:
    verdict: Verdict


def agreement_weights(
    spec: AttributeSpec,
    observed_value: Optional[str] = None,
    table: Optional[FrequencyTable] = None,
) -> tuple[float, float]:
    """(wAgree, wDisagree) = (log2(m/u), log2((1-m)/(1-u)))."""
    m = spec.mProb
    if table is not None:
        u = table.u_for(observed_value)
    elif isinstance(spec.uProb, str):
        raise ConfigError(f"frequency table {spec.uProb!r} not supplied")
    else:
        u = spec.uProb
    if m <= u:
        # A value so common that agreement carries no evidence; clamp just
        # below m to keep the weight finite and non-positive-free.
        u = min(u, m * 0.999)
    w_agree = math.log2(m / u)
    w_disagree = math.log2((1 - m) / (1 - u))
    return w_agree, w_disagree


def classify(score: MatchScore, cfg: LinkageConfig) -> MatchDecision:
    if score.total >= cfg.upperThreshold:
        return MatchDecision(Verdict.MATCH)
    if score.total < cfg.lowerThreshold:
        return MatchDecision(Verdict.NON_MATCH)
    return MatchDecision(Verdict.POSSIBLE)


# --- attribute access and comparison -----------------------------------------

def attribute_value(n: NormalizedIdentity, name: str):
    v = n.get(name)
    if v == "" or v == ():
        return None
    return v


def _similarity(
    spec: AttributeSpec,
    va,
    vb,
    cfg: LinkageConfig,
    bloom_cache: Optional[dict] = None,
) -> float:
    c = spec.comparator
    if c is Comparator.EXACT or c is Comparator.UNIQUE_ID:
        return 1.0 if va == vb else 0.0
    if c is Comparator.LEVENSHTEIN:
        return levenshtein_similarity(str(va), str(vb))
    if c is Comparator.PHONETIC:
        return 1.0 if cologne_phonetic(str(va)) == cologne_phonetic(str(vb)) else 0.0
    if c is Comparator.DATE:
        return compare_date(va, vb).similarity
    if c is Comparator.BLOOM_DICE:
        params = cfg.bloomParams or pprl.BloomParams()
        keys = _BLOOM_KEYS

        def enc(s: str) -> pprl.BloomEncoding:
            if bloom_cache is not None and s in bloom_cache:
                return bloom_cache[s]
            e = pprl.encode_bloom([s], params, keys)
            if bloom_cache is not None:
                bloom_cache[s] = e
            return e

        return pprl.dice_similarity(enc(str(va)), enc(str(vb)))
    raise ConfigError(f"unsupported comparator {c}")


# Comparator-internal Bloom key; the BLOOM_DICE comparator only needs a fixed
# secret shared by both sides of a comparison, not per-site key management.
_BLOOM_KEYS = pprl.KeyStore({"default": b"linkwerk-comparator-bloom-key"})


def _contribution(
    spec: AttributeSpec,
    va,
    vb,
    cfg: LinkageConfig,
    bloom_cache: Optional[dict],
) -> AttributeContribution:
    table = cfg.table_for(spec)
    if va is None or vb is None:
        if spec.missingPolicy is MissingPolicy.IGNORE_RENORMALIZE:
            return AttributeContribution(spec.name, None, 0.0)
        w_agree, w_disagree = agreement_weights(spec, None, table)
        return AttributeContribution(spec.name, 0.0, w_disagree)
    observed = str(va) if table is not None else None
    w_agree, w_disagree = agreement_weights(spec, observed, table)
    s = _similarity(spec, va, vb, cfg, bloom_cache)
    w = w_disagree + s * (w_agree - w_disagree) if s >= spec.partialFloor else w_disagree
    return AttributeContribution(spec.name, s, w)


def _full_weight(spec: AttributeSpec, cfg: LinkageConfig) -> float:
    w_agree, _ = agreement_weights(spec, None, cfg.table_for(spec))
    return w_agree


def score_pair(
    a: NormalizedIdentity,
    b: NormalizedIdentity,
    cfg: LinkageConfig,
    bloom_cache: Optional[dict] = None,
) -> MatchScore:
    """Weighted-sum score with exchange-group permutation maximization."""
    for spec in cfg.attributes:
        if not hasattr(a, spec.name) and not hasattr(b, spec.name):
            raise ConfigError(f"attribute {spec.name!r} unknown to both identities")

    groups: dict[str, list[AttributeSpec]] = {}
    singles: list[AttributeSpec] = []
    for spec in cfg.attributes:
        if spec.exchangeGroup:
            groups.setdefault(spec.exchangeGroup, []).append(spec)
        else:
            singles.append(spec)

    contributions: dict[str, AttributeContribution] = {}
    for spec in singles:
        contributions[spec.name] = _contribution(
            spec, attribute_value(a, spec.name), attribute_value(b, spec.name), cfg, bloom_cache
        )

    permutation_used: dict[str, str] = {}
    for gid, specs in groups.items():
        b_values = [attribute_value(b, s.name) for s in specs]
        best, best_assign = None, None
        for perm in itertools.permutations(range(len(specs))):
            contribs = [
                _contribution(s, attribute_value(a, s.name), b_values[perm[i]], cfg, bloom_cache)
                for i, s in enumerate(specs)
            ]
            total = sum(c.weightContribution for c in contribs)
            if best is None or total > best[0]:
                best = (total, contribs)
                best_assign = perm
        for c in best[1]:
            contributions[c.name] = c
        if best_assign != tuple(range(len(specs))):
            # Record which of b's fields fed each attribute slot.
            permutation_used.update(
                {specs[i].name: specs[best_assign[i]].name for i in range(len(specs))}
            )

    # Renormalize for attributes ignored because of missing values.
    full_sum = sum(_full_weight(s, cfg) for s in cfg.attributes)
    present = [s for s in cfg.attributes if contributions[s.name].similarity is not None]
    present_sum = sum(_full_weight(s, cfg) for s in present)
    scale = full_sum / present_sum if present_sum > 0 else 0.0
    scaled = tuple(
        replace(c, weightContribution=c.weightContribution * scale)
        if c.similarity is not None
        else c
        for c in (contributions[s.name] for s in cfg.attributes)
    )
    total = sum(c.weightContribution for c in scaled)
    return MatchScore(total, scaled, permutation_used or None)


# --- blocking ----------------------------------------------------------------

def _apply_key_part(n: NormalizedIdentity, part: str) -> Optional[str]:
    if "(" in part:
        fn, arg = part.rstrip(")").split("(", 1)
        v = attribute_value(n, arg)
        if v is None:
            return None
        fn = fn.upper()
        if fn == "PHONETIC":
            return cologne_phonetic(str(v)) or None
        if fn == "YEAR":
            return str(v.year) if isinstance(v, PartialDate) else str(v)
        if fn == "INITIAL":
            return str(v)[:1] or None
        if fn == "PREFIX3":
            return str(v)[:3] or None
        raise ConfigError(f"unknown blocking transform {fn!r}")
    v = attribute_value(n, part)
    if v is None:
        return None
    if isinstance(v, PartialDate):
        return v.isoformat()
    if isinstance(v, enum.Enum):
        return v.value
    return str(v)


def block_key(n: NormalizedIdentity, spec: BlockingSpec) -> str:
    parts = [_apply_key_part(n, p) or MISSING_TOKEN for p in spec.keyParts]
    return "|".join(parts)


def generate_candidates(
    a_records: Sequence[NormalizedIdentity],
    b_records: Sequence[NormalizedIdentity],
    cfg: LinkageConfig,
) -> Iterator[tuple[NormalizedIdentity, NormalizedIdentity]]:
    """Cross-block pairs sharing a key under any BlockingSpec, deduplicated."""
    if not cfg.blocking:
        for a in a_records:
            for b in b_records:
                yield a, b
        return
    seen: set[tuple[str, str]] = set()
    for spec in cfg.blocking:
        buckets: dict[str, list[NormalizedIdentity]] = {}
        for b in b_records:
            buckets.setdefault(block_key(b, spec), []).append(b)
        for a in a_records:
            key = block_key(a, spec)
            for b in buckets.get(key, ()):
                pair_id = (a.recordId, b.recordId)
                if pair_id not in seen:
                    seen.add(pair_id)
                    yield a, b


# --- rule-based and exact engines --------------------------------------------

@dataclass(frozen=True)
class RuleAttribute:
    name: str
    transform: Optional[str] = None  # PHONETIC | YEAR | None

    def value(self, n: NormalizedIdentity):
        v = attribute_value(n, self.name)
        if v is None:
            return None
        if self.transform == "PHONETIC":
            return cologne_phonetic(str(v))
        if self.transform == "YEAR":
            return v.year if isinstance(v, PartialDate) else v
        return v


@dataclass(frozen=True)
class LinkRule:
    attributes: tuple[RuleAttribute, ...]
    minAgreeing: int
    mandatory: frozenset[str] = frozenset()

    def __post_init__(self):
        names = {a.name for a in self.attributes}
        if not set(self.mandatory) <= names:
            raise ConfigError("mandatory attributes must be a subset of rule attributes")


def rule_based_link(a: NormalizedIdentity, b: NormalizedIdentity, rule: LinkRule) -> bool:
    """True iff >= minAgreeing attributes agree and every mandatory one agrees."""
    agreeing = set()
    for attr in rule.attributes:
        va, vb = attr.value(a), attr.value(b)
        if va is not None and va == vb:
            agreeing.add(attr.name)
    if len(agreeing) < rule.minAgreeing:
        return False
    return set(rule.mandatory) <= agreeing


@dataclass(frozen=True)
class UniqueIdResult:
    matches: tuple[tuple[str, str], ...]  # (recordId in A, recordId in B)
    unlinkedA: tuple[str, ...]
    unlinkedB: tuple[str, ...]
    duplicatesA: tuple[str, ...]  # identifier values duplicated within A
    duplicatesB: tuple[str, ...]

    @property
    def synonym_share(self) -> float:
        n = len(self.matches) + len(self.unlinkedA)
        return len(self.unlinkedA) / n if n else 0.0


def unique_id_link(
    a_records: Sequence[NormalizedIdentity],
    b_records: Sequence[NormalizedIdentity],
    attr: str,
) -> UniqueIdResult:
    """Exact linkage on a unique identifier; intra-dataset duplicates are
    reported, never silently linked."""

    def index(records):
        by_id: dict[str, list[str]] = {}
        for r in records:
            v = attribute_value(r, attr)
            if v is not None:
                by_id.setdefault(str(v), []).append(r.recordId)
        dups = tuple(v for v, ids in by_id.items() if len(ids) > 1)
        return by_id, dups

    idx_a, dups_a = index(a_records)
    idx_b, dups_b = index(b_records)
    matches, linked_a, linked_b = [], set(), set()
    for v, ids_a in idx_a.items():
        if v in dups_a or v in dups_b:
            continue
        ids_b = idx_b.get(v)
        if ids_b:
            matches.append((ids_a[0], ids_b[0]))
            linked_a.add(ids_a[0])
            linked_b.add(ids_b[0])
    unlinked_a = tuple(r.recordId for r in a_records if r.recordId not in linked_a)
    unlinked_b = tuple(r.recordId for r in b_records if r.recordId not in linked_b)
    return UniqueIdResult(tuple(matches), unlinked_a, unlinked_b, dups_a, dups_b)


# --- deterministic cascade (claims vs registry) ------------------------------

@dataclass(frozen=True)
class CascadeRecord:
    recordId: str
    birthYear: int
    sex: str
    municipalityCode: str
    cancerType: str
    diagnosisDate: date
    icdCode: str
    diagnosisSource: str  # INPATIENT | OUTPATIENT


def _cascade_pick(
    claim: CascadeRecord, candidates: list[CascadeRecord], rng: random.Random
) -> CascadeRecord:
    """Tie-break cascade: 4-digit ICD, 3-digit ICD, inpatient, closest date,
    seeded random."""
    pool = candidates
    for width in (4, 3):
        narrowed = [c for c in pool if c.icdCode[:width] == claim.icdCode[:width]]
        if len(narrowed) == 1:
            return narrowed[0]
        if narrowed:
            pool = narrowed
    inpatient = [c for c in pool if c.diagnosisSource == "INPATIENT"]
    if len(inpatient) == 1:
        return inpatient[0]
    if inpatient:
        pool = inpatient
    best_delta = min(abs((c.diagnosisDate - claim.diagnosisDate).days) for c in pool)
    closest = [c for c in pool if abs((c.diagnosisDate - claim.diagnosisDate).days) == best_delta]
    if len(closest) == 1:
        return closest[0]
    return rng.choice(sorted(closest, key=lambda c: c.recordId))


def deterministic_cascade(
    claims: Sequence[CascadeRecord],
    registry: Sequence[CascadeRecord],
    seed: int,
    max_days: int = 90,
) -> dict[str, str]:
    """Claims-record -> registry-record assignment, each registry record used
    at most once; claims processed in recordId order."""
    rng = random.Random(seed)
    assigned: dict[str, str] = {}
    taken: set[str] = set()
    for claim in sorted(claims, key=lambda c: c.recordId):
        candidates = [
            r
            for r in registry
            if r.recordId not in taken
            and r.birthYear == claim.birthYear
            and r.sex == claim.sex
            and r.municipalityCode == claim.municipalityCode
            and r.cancerType == claim.cancerType
            and abs((r.diagnosisDate - claim.diagnosisDate).days) <= max_days
        ]
        if not candidates:
            continue
        pick = candidates[0] if len(candidates) == 1 else _cascade_pick(claim, candidates, rng)
        assigned[claim.recordId] = pick.recordId
        taken.add(pick.recordId)
    return assigned


# --- full dataset linkage ----------------------------------------------------

@dataclass(frozen=True)
class ScoredPair:
    aId: str
    bId: str
    score: MatchScore
    verdict: Verdict


@dataclass(frozen=True)
class LinkageResult:
    matches: tuple[ScoredPair, ...]
    possibles: tuple[ScoredPair, ...]
    nonMatchedA: tuple[str, ...]
    nonMatchedB: tuple[str, ...]

    def to_json(self) -> dict:
        def pair(p: ScoredPair) -> dict:
            return {
                "a": p.aId,
                "b": p.bId,
                "verdict": p.verdict.value,
                "score": p.score.to_json(),
            }

        return {
            "matches": [pair(p) for p in self.matches],
            "possibles": [pair(p) for p in self.possibles],
            "nonMatchedA": list(self.nonMatchedA),
            "nonMatchedB": list(self.nonMatchedB),
        }


def link_datasets(
    a_records: Sequence[NormalizedIdentity],
    b_records: Sequence[NormalizedIdentity],
    cfg: LinkageConfig,
    dedup: bool = False,
) -> LinkageResult:
    """Candidate generation, scoring, classification, then greedy one-to-one
    assignment of MATCH pairs by descending score (ties by record id).

    With dedup=True both sequences are treated as one dataset: self pairs and
    mirror-image pairs are skipped and all MATCH pairs are kept, since
    duplicate groups can be larger than two.
    """
    bloom_cache: dict = {}
    match_pairs: list[ScoredPair] = []
    possible_pairs: list[ScoredPair] = []
    for a, b in generate_candidates(a_records, b_records, cfg):
        if dedup and a.recordId >= b.recordId:
            continue
        score = score_pair(a, b, cfg, bloom_cache)
        verdict = classify(score, cfg).verdict
        if verdict is Verdict.MATCH:
            match_pairs.append(ScoredPair(a.recordId, b.recordId, score, verdict))
        elif verdict is Verdict.POSSIBLE:
            possible_pairs.append(ScoredPair(a.recordId, b.recordId, score, verdict))

    match_pairs.sort(key=lambda p: (-p.score.total, p.aId, p.bId))
    used_a: set[str] = set()
    used_b: set[str] = set()
    assigned: list[ScoredPair] = []
    if dedup:
        assigned = match_pairs
        for p in match_pairs:
            used_a.add(p.aId)
            used_a.add(p.bId)
            used_b.add(p.aId)
            used_b.add(p.bId)
    else:
        for p in match_pairs:
            if p.aId not in used_a and p.bId not in used_b:
                assigned.append(p)
                used_a.add(p.aId)
                used_b.add(p.bId)
    non_a = tuple(r.recordId for r in a_records if r.recordId not in used_a)
    non_b = tuple(r.recordId for r in b_records if r.recordId not in used_b)
    return LinkageResult(tuple(assigned), tuple(possible_pairs), non_a, non_b)


# --- config (de)serialization and presets ------------------------------------

def config_to_json(cfg: LinkageConfig) -> dict:
    return {
        "attributes": [
            {
                "name": s.name,
                "comparator": s.comparator.value,
                "mProb": s.mProb,
                "uProb": s.uProb,
                "missingPolicy": s.missingPolicy.value,
                "exchangeGroup": s.exchangeGroup,
                "partialFloor": s.partialFloor,
            }
            for s in cfg.attributes
        ],
        "upperThreshold": cfg.upperThreshold,
        "lowerThreshold": cfg.lowerThreshold,
        "blocking": [list(b.keyParts) for b in cfg.blocking],
        "seed": cfg.seed,
        "frequencyTables": {
            name: {"attribute": t.attribute, "frequencies": t.frequencies, "default": t.default}
            for name, t in cfg.frequencyTables.items()
        },
        "bloomParams": cfg.bloomParams.to_json() if cfg.bloomParams else None,
    }


def config_from_json(d: dict) -> LinkageConfig:
    return LinkageConfig(
        attributes=tuple(
            AttributeSpec(
                name=s["name"],
                comparator=Comparator(s["comparator"]),
                mProb=s["mProb"],
                uProb=s["uProb"],
                missingPolicy=MissingPolicy(s.get("missingPolicy", "IGNORE_RENORMALIZE")),
                exchangeGroup=s.get("exchangeGroup"),
                partialFloor=s.get("partialFloor", 0.0),
            )
            for s in d["attributes"]
        ),
        upperThreshold=d["upperThreshold"],
        lowerThreshold=d["lowerThreshold"],
        blocking=tuple(BlockingSpec(tuple(parts)) for parts in d.get("blocking", [])),
        seed=d.get("seed", 0),
        frequencyTables={
            name: FrequencyTable(t["attribute"], t["frequencies"], t["default"])
            for name, t in d.get("frequencyTables", {}).items()
        },
        bloomParams=pprl.BloomParams.from_json(d["bloomParams"]) if d.get("bloomParams") else None,
    )


def load_config(path) -> LinkageConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_json(json.load(fh))


def load_preset(name: str) -> LinkageConfig:
    from importlib import resources

    ref = resources.files("linkwerk").joinpath(f"presets/{name}.json")
    try:
        text = ref.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"unknown preset {name!r}") from None
    return config_from_json(json.loads(text))

"""Canonical identity model: records, normalization, phonetics, comparators, KVNR.

All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import csv
import enum
import re
import unicodedata
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Iterable, Optional, Sequence

from .errors import EmptyIdentityError

# Transliteration applied before generic diacritic stripping.
_UMLAUT_MAP = {
    "Ä": "AE", "Ö": "OE", "Ü": "UE", "ä": "AE", "ö": "OE", "ü": "UE",
    "ß": "SS", "ẞ": "SS",
}

_ALLOWED = re.compile(r"[^A-Z0-9 \-]")
_WS = re.compile(r"\s+")

MIN_BIRTH_YEAR = 1850


class Sex(str, enum.Enum):
    M = "M"
    F = "F"
    X = "X"
    UNKNOWN = "U"


@dataclass(frozen=True, order=True)
class PartialDate:
    """Date with optional month/day; year is always present."""

    year: int
    month: Optional[int] = None
    day: Optional[int] = None

    def __post_init__(self):
        if self.day is not None and self.month is None:
            raise ValueError("day requires month")
        if not (MIN_BIRTH_YEAR <= self.year <= date.today().year):
            raise ValueError(f"year {self.year} out of range")
        if self.month is not None and not 1 <= self.month <= 12:
            raise ValueError(f"month {self.month} out of range")
        if self.day is not None and not 1 <= self.day <= 31:
            raise ValueError(f"day {self.day} out of range")

    def isoformat(self) -> str:
        s = f"{self.year:04d}"
        if self.month is not None:
            s += f"-{self.month:02d}"
        if self.day is not None:
            s += f"-{self.day:02d}"
        return s

    @classmethod
    def parse(cls, s: str) -> "PartialDate":
        parts = s.strip().split("-")
        if not parts or not parts[0]:
            raise ValueError(f"unparseable date: {s!r}")
        nums = [int(p) for p in parts[:3]]
        return cls(*nums)


@dataclass(frozen=True)
class IdentityRecord:
    recordId: str
    firstName: str
    lastName: str
    birthDate: PartialDate
    sex: Sex = Sex.UNKNOWN
    formerNames: tuple[str, ...] = ()
    nationality: Optional[str] = None
    street: Optional[str] = None
    houseNumber: Optional[str] = None
    postalCode: Optional[str] = None
    city: Optional[str] = None
    birthPlace: Optional[str] = None
    kvnr: Optional[str] = None

    def __post_init__(self):
        if not self.recordId:
            raise ValueError("recordId must be non-empty")
        if isinstance(self.formerNames, list):
            object.__setattr__(self, "formerNames", tuple(self.formerNames))


@dataclass(frozen=True)
class NormalizedIdentity:
    """IdentityRecord after canonicalization, plus phonetic name codes."""

    recordId: str
    firstName: str
    lastName: str
    birthDate: PartialDate
    sex: Sex
    phoneticFirstName: str
    phoneticLastName: str
    sourceRecordId: str
    formerNames: tuple[str, ...] = ()
    nationality: Optional[str] = None
    street: Optional[str] = None
    houseNumber: Optional[str] = None
    postalCode: Optional[str] = None
    city: Optional[str] = None
    birthPlace: Optional[str] = None
    kvnr: Optional[str] = None

    def get(self, name: str):
        return getattr(self, name, None)


def normalize_string(s: Optional[str]) -> str:
    """Uppercase, transliterate umlauts, strip diacritics and punctuation."""
    if s is None:
        return ""
    out = []
    for ch in unicodedata.normalize("NFC", s):
        out.append(_UMLAUT_MAP.get(ch, ch))
    s = "".join(out).upper()
    # Strip remaining diacritics down to their base letters.
    s = unicodedata.normalize("NFKD", s)
    s = "".join(ch for ch in s if not unicodedata.combining(ch))
    s = _ALLOWED.sub("", s)
    s = _WS.sub(" ", s).strip()
    # Collapsing may leave stray space-hyphen runs; keep the hyphen compact.
    s = re.sub(r" ?- ?", "-", s)
    return s


def normalize(r: IdentityRecord) -> NormalizedIdentity:
    """Canonicalize a record and attach Cologne phonetic codes.

    Raises EmptyIdentityError when first or last name vanish under
    normalization.
    """
    first = normalize_string(r.firstName)
    last = normalize_string(r.lastName)
    if not first or not last:
        raise EmptyIdentityError(f"empty name after normalization: {r.recordId}")

    def opt(s: Optional[str]) -> Optional[str]:
        if s is None:
            return None
        n = normalize_string(s)
        return n or None

    former = tuple(n for n in (normalize_string(f) for f in r.formerNames) if n)
    return NormalizedIdentity(
        recordId=r.recordId,
        sourceRecordId=r.recordId,
        firstName=first,
        lastName=last,
        formerNames=former,
        birthDate=r.birthDate,
        sex=r.sex,
        nationality=opt(r.nationality),
        street=opt(r.street),
        houseNumber=opt(r.houseNumber),
        postalCode=opt(r.postalCode),
        city=opt(r.city),
        birthPlace=opt(r.birthPlace),
        kvnr=opt(r.kvnr),
        phoneticFirstName=cologne_phonetic(first),
        phoneticLastName=cologne_phonetic(last),
    )


def renormalize(n: NormalizedIdentity) -> NormalizedIdentity:
    """Run the normalization pipeline again on an already-normalized identity."""
    rec = IdentityRecord(
        recordId=n.sourceRecordId,
        firstName=n.firstName,
        lastName=n.lastName,
        formerNames=n.formerNames,
        birthDate=n.birthDate,
        sex=n.sex,
        nationality=n.nationality,
        street=n.street,
        houseNumber=n.houseNumber,
        postalCode=n.postalCode,
        city=n.city,
        birthPlace=n.birthPlace,
        kvnr=n.kvnr,
    )
    out = normalize(rec)
    return replace(out, recordId=n.recordId)


# --- Cologne phonetics (Postel 1969 rule table) ------------------------------
#
# Letter-to-digit rules, applied with left/right context:
#   A E I J O U Y -> 0        H -> (silent)
#   B -> 1                    P -> 1, but P before H -> 3
#   D T -> 2, but before C S Z -> 8
#   F V W -> 3
#   G K Q -> 4
#   C -> 4 word-initially before A H K L O Q R U X,
#        4 after a vowel-ish context before A H K O Q U X,
#        8 after S or Z, 8 otherwise
#   X -> 48, but after C K Q -> 8
#   L -> 5   M N -> 6   R -> 7   S Z -> 8
# Afterwards: collapse runs of equal digits, drop every '0' except a leading one.

_C_INITIAL_NEXT = set("AHKLOQRUX")
_C_INNER_NEXT = set("AHKOQUX")


def cologne_phonetic(s: str) -> str:
    """Cologne Phonetics code of a name; empty input yields the empty code."""
    letters = [ch for ch in s.upper() if "A" <= ch <= "Z"]
    if not letters:
        return ""
    raw = []
    n = len(letters)
    for i, ch in enumerate(letters):
        prev = letters[i - 1] if i > 0 else ""
        nxt = letters[i + 1] if i + 1 < n else ""
        if ch in "AEIJOUY":
            raw.append("0")
        elif ch == "H":
            continue
        elif ch == "B":
            raw.append("1")
        elif ch == "P":
            raw.append("3" if nxt == "H" else "1")
        elif ch in "DT":
            raw.append("8" if nxt in {"C", "S", "Z"} else "2")
        elif ch in "FVW":
            raw.append("3")
        elif ch in "GKQ":
            raw.append("4")
        elif ch == "C":
            if i == 0:
                raw.append("4" if nxt in _C_INITIAL_NEXT else "8")
            elif prev in {"S", "Z"}:
                raw.append("8")
            else:
                raw.append("4" if nxt in _C_INNER_NEXT else "8")
        elif ch == "X":
            raw.append("8" if prev in {"C", "K", "Q"} else "48")
        elif ch == "L":
            raw.append("5")
        elif ch in "MN":
            raw.append("6")
        elif ch == "R":
            raw.append("7")
        elif ch in "SZ":
            raw.append("8")
    code = "".join(raw)
    # Collapse adjacent duplicates, then drop non-leading zeros.
    collapsed = []
    for d in code:
        if not collapsed or collapsed[-1] != d:
            collapsed.append(d)
    out = [d for i, d in enumerate(collapsed) if d != "0" or i == 0]
    return "".join(out)


# --- String and date comparators ---------------------------------------------

def levenshtein_distance(a: str, b: str) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def levenshtein_similarity(a: str, b: str) -> float:
    """1 - d(a,b)/max(|a|,|b|); two empty strings compare as 1."""
    if not a and not b:
        return 1.0
    return 1.0 - levenshtein_distance(a, b) / max(len(a), len(b))


class Agreement(str, enum.Enum):
    AGREE = "AGREE"
    DISAGREE = "DISAGREE"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class DateComparison:
    year: Agreement
    month: Agreement
    day: Agreement

    @property
    def similarity(self) -> float:
        """Fraction of known components that agree; all-unknown -> 0.5."""
        known = [c for c in (self.year, self.month, self.day) if c != Agreement.UNKNOWN]
        if not known:
            return 0.5
        return sum(1 for c in known if c == Agreement.AGREE) / len(known)


def compare_date(a: PartialDate, b: PartialDate) -> DateComparison:
    """Component-wise comparison; missing components are UNKNOWN, never DISAGREE."""

    def cmp(x, y) -> Agreement:
        if x is None or y is None:
            return Agreement.UNKNOWN
        return Agreement.AGREE if x == y else Agreement.DISAGREE

    return DateComparison(cmp(a.year, b.year), cmp(a.month, b.month), cmp(a.day, b.day))


# --- KVNR validation ---------------------------------------------------------

class KvnrKind(str, enum.Enum):
    VALID = "VALID"
    ERSATZ = "ERSATZ"
    INVALID = "INVALID"


# Fixed placeholder codes used when no insurance number exists.
ERSATZ_CODES = {
    "970100001": "Asylbewerber:innen",
    "970000099": "Keine Angabe zum Kostenträger",
    "970001001": "Kostenträger ohne IK-Nummer",
    "970000022": "Privatversichert, Kasse unbekannt",
    "970000011": "Selbstzahlende",
}

_KVNR_RE = re.compile(r"^[A-Z][0-9]{9}$")


@dataclass(frozen=True)
class KvnrStatus:
    kind: KvnrKind
    ersatzCategory: Optional[str] = None


def validate_kvnr(s: str) -> KvnrStatus:
    """Syntactic check: letter + 9 digits is VALID; Ersatzcodes are ERSATZ."""
    if s in ERSATZ_CODES:
        return KvnrStatus(KvnrKind.ERSATZ, ERSATZ_CODES[s])
    if _KVNR_RE.match(s or ""):
        return KvnrStatus(KvnrKind.VALID)
    return KvnrStatus(KvnrKind.INVALID)


# --- JSON interchange --------------------------------------------------------

def normalized_to_json(n: NormalizedIdentity) -> dict:
    return {
        "recordId": n.recordId,
        "sourceRecordId": n.sourceRecordId,
        "firstName": n.firstName,
        "lastName": n.lastName,
        "formerNames": list(n.formerNames),
        "birthDate": n.birthDate.isoformat(),
        "sex": n.sex.value,
        "nationality": n.nationality,
        "street": n.street,
        "houseNumber": n.houseNumber,
        "postalCode": n.postalCode,
        "city": n.city,
        "birthPlace": n.birthPlace,
        "kvnr": n.kvnr,
        "phoneticFirstName": n.phoneticFirstName,
        "phoneticLastName": n.phoneticLastName,
    }


def normalized_from_json(d: dict) -> NormalizedIdentity:
    return NormalizedIdentity(
        recordId=d["recordId"],
        sourceRecordId=d.get("sourceRecordId", d["recordId"]),
        firstName=d["firstName"],
        lastName=d["lastName"],
        formerNames=tuple(d.get("formerNames") or ()),
        birthDate=PartialDate.parse(d["birthDate"]),
        sex=Sex(d.get("sex", "U")),
        nationality=d.get("nationality"),
        street=d.get("street"),
        houseNumber=d.get("houseNumber"),
        postalCode=d.get("postalCode"),
        city=d.get("city"),
        birthPlace=d.get("birthPlace"),
        kvnr=d.get("kvnr"),
        phoneticFirstName=d.get("phoneticFirstName", ""),
        phoneticLastName=d.get("phoneticLastName", ""),
    )


def record_to_json(r: IdentityRecord) -> dict:
    return {
        "recordId": r.recordId,
        "firstName": r.firstName,
        "lastName": r.lastName,
        "formerNames": list(r.formerNames),
        "birthDate": r.birthDate.isoformat(),
        "sex": r.sex.value,
        "nationality": r.nationality,
        "street": r.street,
        "houseNumber": r.houseNumber,
        "postalCode": r.postalCode,
        "city": r.city,
        "birthPlace": r.birthPlace,
        "kvnr": r.kvnr,
    }


def record_from_json(d: dict) -> IdentityRecord:
    return IdentityRecord(
        recordId=d["recordId"],
        firstName=d["firstName"],
        lastName=d["lastName"],
        formerNames=tuple(d.get("formerNames") or ()),
        birthDate=PartialDate.parse(d["birthDate"]),
        sex=Sex(d.get("sex", "U")),
        nationality=d.get("nationality"),
        street=d.get("street"),
        houseNumber=d.get("houseNumber"),
        postalCode=d.get("postalCode"),
        city=d.get("city"),
        birthPlace=d.get("birthPlace"),
        kvnr=d.get("kvnr"),
    )


# --- CSV interchange ---------------------------------------------------------

CSV_HEADER = [
    "record_id", "first_name", "last_name", "former_names", "birth_date",
    "sex", "nationality", "street", "house_number", "postal_code", "city",
    "birth_place", "kvnr",
]


def record_to_row(r: IdentityRecord) -> list[str]:
    return [
        r.recordId, r.firstName, r.lastName, "|".join(r.formerNames),
        r.birthDate.isoformat(), r.sex.value, r.nationality or "",
        r.street or "", r.houseNumber or "", r.postalCode or "",
        r.city or "", r.birthPlace or "", r.kvnr or "",
    ]


def row_to_record(row: dict[str, str]) -> IdentityRecord:
    def opt(key: str) -> Optional[str]:
        v = (row.get(key) or "").strip()
        return v or None

    return IdentityRecord(
        recordId=row["record_id"].strip(),
        firstName=row["first_name"],
        lastName=row["last_name"],
        formerNames=tuple(p for p in (row.get("former_names") or "").split("|") if p),
        birthDate=PartialDate.parse(row["birth_date"]),
        sex=Sex(row.get("sex") or "U"),
        nationality=opt("nationality"),
        street=opt("street"),
        houseNumber=opt("house_number"),
        postalCode=opt("postal_code"),
        city=opt("city"),
        birthPlace=opt("birth_place"),
        kvnr=opt("kvnr"),
    )


def read_records_csv(path) -> list[IdentityRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        records = [row_to_record(row) for row in reader]
    seen = set()
    for r in records:
        if r.recordId in seen:
            raise ValueError(f"duplicate record_id {r.recordId!r}")
        seen.add(r.recordId)
    return records


def write_records_csv(path, records: Iterable[IdentityRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            writer.writerow(record_to_row(r))

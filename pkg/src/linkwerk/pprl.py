"""Privacy-preserving encodings: q-gram Bloom filters and two-stage control numbers.

Bloom bit positions come from a keyed PRF (HMAC-SHA256) with domain separation
per hash index; double hashing is deliberately not used so positions stay
independent. Control numbers are 22 one-way-hashed identity components with a
reversible, keyed second stage (AES single-block, tokens are exactly one block)
and project over-encryption.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import json
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from .errors import KeyNotFoundError, ParamsMismatchError, StageError, WrongKeyError
from .idmodel import NormalizedIdentity, cologne_phonetic

PAD_CHAR = "#"
TOKEN_WIDTH = 16  # one AES block
EMPTY_TOKEN = b"\x00" * TOKEN_WIDTH


class Hardening(str, enum.Enum):
    NONE = "NONE"
    BALANCED = "BALANCED"


@dataclass(frozen=True)
class BloomParams:
    mBits: int = 1024
    kHashes: int = 8
    qGramSize: int = 2
    padding: bool = False
    keyId: str = "default"
    hardening: Hardening = Hardening.NONE

    def __post_init__(self):
        if self.kHashes < 1:
            raise ValueError("kHashes must be >= 1")
        if self.mBits < 64:
            raise ValueError("mBits must be >= 64")
        if self.qGramSize not in (1, 2, 3):
            raise ValueError("qGramSize must be 1, 2 or 3")

    def fingerprint(self) -> str:
        payload = json.dumps(
            {
                "m": self.mBits,
                "k": self.kHashes,
                "q": self.qGramSize,
                "pad": self.padding,
                "keyId": self.keyId,
                "hardening": self.hardening.value,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "mBits": self.mBits,
            "kHashes": self.kHashes,
            "qGramSize": self.qGramSize,
            "padding": self.padding,
            "keyId": self.keyId,
            "hardening": self.hardening.value,
        }

    @classmethod
    def from_json(cls, d: dict) -> "BloomParams":
        return cls(
            mBits=d.get("mBits", 1024),
            kHashes=d.get("kHashes", 8),
            qGramSize=d.get("qGramSize", 2),
            padding=d.get("padding", False),
            keyId=d.get("keyId", "default"),
            hardening=Hardening(d.get("hardening", "NONE")),
        )


@dataclass(frozen=True)
class BloomEncoding:
    bits: bytes  # packed little-endian bit vector
    nBits: int
    paramsFingerprint: str
    hardened: bool

    def bit(self, i: int) -> bool:
        return bool(self.bits[i // 8] >> (i % 8) & 1)

    def weight(self) -> int:
        return sum(bin(b).count("1") for b in self.bits)

    def serialize(self) -> str:
        return f"{self.paramsFingerprint}:{self.nBits}:{int(self.hardened)}:" + base64.b64encode(self.bits).decode()

    @classmethod
    def deserialize(cls, s: str) -> "BloomEncoding":
        fp, n, hard, b64 = s.split(":", 3)
        return cls(base64.b64decode(b64), int(n), fp, bool(int(hard)))


class KeyStore:
    """keyId -> secret map, loaded once from a JSON file of base64 values."""

    def __init__(self, keys: Optional[dict[str, bytes]] = None):
        self._keys = dict(keys or {})

    @classmethod
    def from_file(cls, path) -> "KeyStore":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls({k: base64.b64decode(v) for k, v in raw.items()})

    @classmethod
    def ephemeral(cls, ids: Sequence[str], seed: int = 0) -> "KeyStore":
        rng = random.Random(seed)
        return cls({i: bytes(rng.randrange(256) for _ in range(32)) for i in ids})

    def add(self, key_id: str, secret: bytes) -> None:
        self._keys[key_id] = secret

    def get(self, key_id: str) -> bytes:
        try:
            return self._keys[key_id]
        except KeyError:
            raise KeyNotFoundError(f"no key for id {key_id!r}") from None


def qgrams(s: str, params: BloomParams) -> Counter:
    """Overlapping q-grams as a multiset; short inputs become a single gram."""
    q = params.qGramSize
    if params.padding:
        s = PAD_CHAR + s + PAD_CHAR
    if len(s) < q:
        return Counter({s: 1}) if s else Counter()
    return Counter(s[i : i + q] for i in range(len(s) - q + 1))


def _prf_index(key: bytes, gram: str, occurrence: int, hash_index: int, m: int) -> int:
    msg = f"bloom|{hash_index}|{occurrence}|{gram}".encode()
    digest = hmac.new(key, msg, hashlib.sha256).digest()
    return int.from_bytes(digest[:8], "big") % m


def _balanced_permutation(key: bytes, fingerprint: str, n: int) -> list[int]:
    seed = hmac.new(key, f"balance-perm|{fingerprint}".encode(), hashlib.sha256).digest()
    rng = random.Random(int.from_bytes(seed, "big"))
    perm = list(range(n))
    rng.shuffle(perm)
    return perm


def encode_bloom(fields: Sequence[str], params: BloomParams, keys: KeyStore) -> BloomEncoding:
    """Encode the q-grams of all fields into one keyed Bloom filter."""
    key = keys.get(params.keyId)
    m = params.mBits
    raw = bytearray((m + 7) // 8)
    for f in fields:
        for gram, count in qgrams(f, params).items():
            # Repeated grams get separate positions so the multiset survives.
            for occ in range(count):
                for i in range(params.kHashes):
                    idx = _prf_index(key, gram, occ, i, m)
                    raw[idx // 8] |= 1 << (idx % 8)
    fp = params.fingerprint()
    if params.hardening is Hardening.NONE:
        return BloomEncoding(bytes(raw), m, fp, False)

    # BALANCED: concatenate bits with their complement (weight becomes exactly
    # mBits), then apply a keyed permutation of all 2m positions.
    doubled = bytearray((2 * m + 7) // 8)
    perm = _balanced_permutation(key, fp, 2 * m)
    for i in range(2 * m):
        if i < m:
            val = raw[i // 8] >> (i % 8) & 1
        else:
            val = 1 - (raw[(i - m) // 8] >> ((i - m) % 8) & 1)
        if val:
            j = perm[i]
            doubled[j // 8] |= 1 << (j % 8)
    return BloomEncoding(bytes(doubled), 2 * m, fp, True)


def dice_similarity(a: BloomEncoding, b: BloomEncoding) -> float:
    """2*|a AND b| / (|a| + |b|); two all-zero filters compare as 1."""
    if a.paramsFingerprint != b.paramsFingerprint or a.hardened != b.hardened:
        raise ParamsMismatchError("encodings built with different params")
    wa, wb = a.weight(), b.weight()
    if wa + wb == 0:
        return 1.0
    inter = sum(bin(x & y).count("1") for x, y in zip(a.bits, b.bits))
    return 2.0 * inter / (wa + wb)


def plaintext_qgram_dice(a: str, b: str, params: BloomParams) -> float:
    """Reference Dice over plaintext q-gram multisets."""
    ga, gb = qgrams(a, params), qgrams(b, params)
    na, nb = sum(ga.values()), sum(gb.values())
    if na + nb == 0:
        return 1.0
    inter = sum((ga & gb).values())
    return 2.0 * inter / (na + nb)


# --- Control numbers ---------------------------------------------------------

class Stage(str, enum.Enum):
    STAGE1 = "STAGE1"
    STAGE2 = "STAGE2"
    PROJECT = "PROJECT"


# The 22 canonical components, in fixed order. Any deterministic list of 22
# works; this one covers name tokens, phonetics, birth date parts, sex,
# address and a full-name digest.
COMPONENT_NAMES = (
    "first_name_1", "first_name_2", "surname_1", "surname_2",
    "birth_name_1", "birth_name_2",
    "phonetic_first_1", "phonetic_surname_1", "phonetic_birth_name_1",
    "birth_day", "birth_month", "birth_year", "sex",
    "postal_code", "city", "street",
    "first_initial", "surname_initial", "birth_name_initial",
    "former_surname_1", "phonetic_former_surname_1",
    "full_name_digest",
)

assert len(COMPONENT_NAMES) == 22


@dataclass(frozen=True)
class ControlNumberSet:
    components: tuple[bytes, ...]
    stage: Stage
    keyId: Optional[str] = None
    tag: Optional[bytes] = None  # integrity MAC, present for STAGE2/PROJECT

    def __post_init__(self):
        if len(self.components) != 22:
            raise ValueError("control number set must have exactly 22 components")
        if any(len(c) != TOKEN_WIDTH for c in self.components):
            raise ValueError(f"all tokens must be {TOKEN_WIDTH} bytes")


def _token(label: str, value: str) -> bytes:
    if not value:
        return EMPTY_TOKEN
    return hashlib.sha256(f"cn|{label}|{value}".encode()).digest()[:TOKEN_WIDTH]


def _name_tokens(name: str) -> list[str]:
    return name.replace("-", " ").split() if name else []


def _component_values(n: NormalizedIdentity) -> list[tuple[str, str]]:
    first = _name_tokens(n.firstName)
    last = _name_tokens(n.lastName)
    former = [t for f in n.formerNames for t in _name_tokens(f)]
    birth_name = former  # former surnames stand in for the birth name
    bd = n.birthDate
    full = f"{n.firstName}|{n.lastName}|{bd.isoformat()}"
    vals = {
        "first_name_1": first[0] if first else "",
        "first_name_2": first[1] if len(first) > 1 else "",
        "surname_1": last[0] if last else "",
        "surname_2": last[1] if len(last) > 1 else "",
        "birth_name_1": birth_name[0] if birth_name else "",
        "birth_name_2": birth_name[1] if len(birth_name) > 1 else "",
        "phonetic_first_1": cologne_phonetic(first[0]) if first else "",
        "phonetic_surname_1": cologne_phonetic(last[0]) if last else "",
        "phonetic_birth_name_1": cologne_phonetic(birth_name[0]) if birth_name else "",
        "birth_day": str(bd.day) if bd.day is not None else "",
        "birth_month": str(bd.month) if bd.month is not None else "",
        "birth_year": str(bd.year),
        "sex": n.sex.value if n.sex.value != "U" else "",
        "postal_code": n.postalCode or "",
        "city": n.city or "",
        "street": n.street or "",
        "first_initial": first[0][0] if first else "",
        "surname_initial": last[0][0] if last else "",
        "birth_name_initial": birth_name[0][0] if birth_name else "",
        "former_surname_1": former[0] if former else "",
        "phonetic_former_surname_1": cologne_phonetic(former[0]) if former else "",
        "full_name_digest": full,
    }
    return [(name, vals[name]) for name in COMPONENT_NAMES]


def derive_control_numbers(n: NormalizedIdentity) -> ControlNumberSet:
    """Stage-1 set: each component through one fixed one-way hash."""
    tokens = tuple(_token(label, value) for label, value in _component_values(n))
    return ControlNumberSet(tokens, Stage.STAGE1)


def _aes_block(key: bytes, block: bytes, decrypt: bool = False) -> bytes:
    cipher = Cipher(algorithms.AES(hashlib.sha256(key).digest()), modes.ECB())
    ctx = cipher.decryptor() if decrypt else cipher.encryptor()
    return ctx.update(block) + ctx.finalize()


def _mac(key: bytes, stage: Stage, tokens: Sequence[bytes]) -> bytes:
    return hmac.new(key, stage.value.encode() + b"".join(tokens), hashlib.sha256).digest()[:TOKEN_WIDTH]


def encrypt_stage2(c: ControlNumberSet, key_id: str, keys: KeyStore) -> ControlNumberSet:
    """Wrap each token in the reversible site-specific layer."""
    if c.stage is not Stage.STAGE1:
        raise StageError(f"expected STAGE1 input, got {c.stage.value}")
    key = keys.get(key_id)
    tokens = tuple(_aes_block(key, t) for t in c.components)
    return ControlNumberSet(tokens, Stage.STAGE2, key_id, _mac(key, Stage.STAGE2, tokens))


def decrypt_stage2(c: ControlNumberSet, key_id: str, keys: KeyStore) -> ControlNumberSet:
    if c.stage is not Stage.STAGE2:
        raise StageError(f"expected STAGE2 input, got {c.stage.value}")
    key = keys.get(key_id)
    if key_id != c.keyId or _mac(key, Stage.STAGE2, c.components) != c.tag:
        raise WrongKeyError("site key does not match this control number set")
    tokens = tuple(_aes_block(key, t, decrypt=True) for t in c.components)
    return ControlNumberSet(tokens, Stage.STAGE1)


def reencrypt_to_project(
    c: ControlNumberSet, site_key_id: str, project_key_id: str, keys: KeyStore
) -> ControlNumberSet:
    """Strip the site layer and apply the project layer instead."""
    stage1 = decrypt_stage2(c, site_key_id, keys)
    key = keys.get(project_key_id)
    tokens = tuple(_aes_block(key, t) for t in stage1.components)
    return ControlNumberSet(tokens, Stage.PROJECT, project_key_id, _mac(key, Stage.PROJECT, tokens))

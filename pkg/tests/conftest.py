import random

import pytest

from linkwerk import evalgen, pprl
from linkwerk.idmodel import IdentityRecord, PartialDate, Sex, normalize


@pytest.fixture
def keys():
    ks = pprl.KeyStore(
        {
            "default": b"d" * 32,
            "siteA": b"a" * 32,
            "siteB": b"b" * 32,
            "project": b"p" * 32,
            "psn": b"q" * 32,
            "site-bloom": b"s" * 32,
            "fttp-psn": b"f" * 32,
        }
    )
    return ks


def make_record(
    rid="r1",
    first="Hans",
    last="Maier",
    year=1980,
    month=5,
    day=2,
    sex=Sex.M,
    **kw,
):
    return IdentityRecord(
        recordId=rid,
        firstName=first,
        lastName=last,
        birthDate=PartialDate(year, month, day),
        sex=sex,
        **kw,
    )


def random_identity(rng: random.Random, rid: str) -> IdentityRecord:
    first_names = evalgen.load_first_names()
    last_names = evalgen.load_last_names()
    first, sex = rng.choice(first_names)
    return make_record(
        rid=rid,
        first=first,
        last=rng.choice(last_names),
        year=rng.randrange(1930, 2005),
        month=rng.randrange(1, 13),
        day=rng.randrange(1, 29),
        sex=sex,
    )


@pytest.fixture
def normalized_pair():
    a = normalize(make_record("a1", "Hans", "Maier"))
    b = normalize(make_record("b1", "Hans", "Mayer"))
    return a, b

import datetime as dt

import pytest
from hypothesis import given, strategies as st

from conftest import ADA_RECORD
from oracles import sha256_pure
from didb.core import (
    DidbRecord,
    IdentityFields,
    canonicalize,
    derive_prefix,
    make_record,
    parse_record,
    truncated_sha256,
)
from didb.errors import (
    BadDigestAlphabet,
    BadLength,
    BadPrefix,
    FieldContainsSeparator,
    InvalidDate,
    InvalidField,
)


def test_canonicalize_example(ada):
    assert canonicalize(ada) == b"123|ADA LOVELACE|1980-12-05|B+|Dhaka|2016-10-02"


def test_canonicalize_ignores_surrounding_whitespace(ada):
    padded = IdentityFields("  123\t", "Ada Lovelace", ada.date_of_birth, " b+ ", "Dhaka  ",
                            ada.issue_date)
    assert canonicalize(padded) == canonicalize(ada)


def test_canonicalize_separator_rejected(ada):
    bad = IdentityFields("123", "A|B", ada.date_of_birth, "", "", ada.issue_date)
    with pytest.raises(FieldContainsSeparator):
        canonicalize(bad)


def test_canonicalize_case_rules(ada):
    other = IdentityFields("abc", "ada lovelace", ada.date_of_birth, "B+", "dhaka", ada.issue_date)
    text = canonicalize(other).decode()
    assert text.startswith("abc|ADA LOVELACE|")
    assert text.endswith("|B+|dhaka|2016-10-02")


def test_canonicalize_unicode_composed(ada):
    decomposed = IdentityFields("1", "José", ada.date_of_birth, "", "", ada.issue_date)
    composed = IdentityFields("1", "José", ada.date_of_birth, "", "", ada.issue_date)
    assert canonicalize(decomposed) == canonicalize(composed)


@pytest.mark.parametrize("data, expected", [
    (b"", "e3b0c44298fc1c149afbf4c8996fb92427ae41e4"),
    (b"abc", "ba7816bf8f01cfea414140de5dae2223b00361a3"),
])
def test_truncated_sha256_vectors(data, expected):
    assert truncated_sha256(data) == expected


@given(st.binary(max_size=300))
def test_truncated_sha256_matches_pure_oracle(data):
    out = truncated_sha256(data)
    assert out == sha256_pure(data)[:40]
    assert len(out) == 40 and set(out) <= set("0123456789abcdef")


@pytest.mark.parametrize("date, prefix", [
    (dt.date(1980, 12, 5), "198012"),
    (dt.date(2001, 1, 31), "200101"),
    (dt.date(1999, 9, 9), "199909"),
])
def test_derive_prefix(date, prefix):
    assert derive_prefix(date) == prefix


def test_make_record_golden(ada):
    # digest computed with sha256sum over the canonical bytes
    assert make_record(ada).encode() == ADA_RECORD
    assert make_record(ada) == make_record(ada)


def test_make_record_serial_change(ada):
    other = IdentityFields("124", ada.name, ada.date_of_birth, ada.blood_group,
                           ada.place_of_birth, ada.issue_date)
    a, b = make_record(ada), make_record(other)
    assert a.prefix == b.prefix == "198012"
    assert b.digest == "9b76f6d4595e98226cddad56ed0724f3522cb8dc"
    assert a.digest != b.digest


def test_parse_record_published_layout():
    rec = parse_record("198012aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d")
    assert rec.prefix == "198012"
    assert rec.digest == "aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d"


@pytest.mark.parametrize("text, exc", [
    ("198012aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434", BadLength),
    ("198013aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d", BadPrefix),
    ("198000aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d", BadPrefix),
    ("179912aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d", BadPrefix),
    ("1980a2aaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d", BadPrefix),
    ("198012AAF4C61DDCC5E8A2DABEDE0F3B482CD9AEA9434D", BadDigestAlphabet),
    ("198012gaf4c61ddcc5e8a2dabede0f3b482cd9aea9434d", BadDigestAlphabet),
])
def test_parse_record_errors(text, exc):
    with pytest.raises(exc):
        parse_record(text)


def test_parse_record_rejects_unicode_digits():
    with pytest.raises(BadPrefix):
        parse_record("١٩٨٠١٢" + "a" * 40)


@pytest.mark.parametrize("kwargs, exc", [
    (dict(serial="  "), InvalidField),
    (dict(name=""), InvalidField),
    (dict(date_of_birth=dt.date(1700, 1, 1)), InvalidDate),
    (dict(issue_date="2016-10-02"), InvalidDate),
])
def test_identity_invariants(ada, kwargs, exc):
    base = dict(serial=ada.serial, name=ada.name, date_of_birth=ada.date_of_birth,
                blood_group=ada.blood_group, place_of_birth=ada.place_of_birth,
                issue_date=ada.issue_date)
    base.update(kwargs)
    with pytest.raises(exc):
        IdentityFields(**base)


@pytest.mark.parametrize("bad", ["1980-13-05", "1980-02-30", "80-12-05", "1980/12/05", ""])
def test_from_strings_invalid_dates(bad):
    with pytest.raises(InvalidDate):
        IdentityFields.from_strings("1", "A", bad, "", "", "2016-10-02")


prefixes = st.builds(lambda y, m: f"{y:04d}{m:02d}", st.integers(1800, 9999), st.integers(1, 12))
digests = st.text("0123456789abcdef", min_size=40, max_size=40)


@given(prefixes, digests)
def test_encode_parse_roundtrip(prefix, digest):
    s = prefix + digest
    assert parse_record(s).encode() == s
    assert parse_record(s.encode()) == DidbRecord(prefix, digest)


@given(st.lists(st.tuples(prefixes, digests), max_size=30))
def test_record_order_matches_encoding_order(pairs):
    recs = [DidbRecord(p, d) for p, d in pairs]
    assert [r.encode() for r in sorted(recs)] == sorted(r.encode() for r in recs)


text_fields = st.text(st.characters(blacklist_characters="|", blacklist_categories=("Cs",)), max_size=20)


@given(text_fields, text_fields, st.dates(dt.date(1800, 1, 1)), text_fields, text_fields, st.dates())
def test_make_record_pure_and_whitespace_stable(serial, name, dob, blood, place, issue):
    serial, name = "s" + serial, "n" + name
    f = IdentityFields(serial, name, dob, blood, place, issue)
    g = IdentityFields(f" {serial} ", f"\t{name}", dob, f"{blood} ", place, issue)
    assert make_record(f) == make_record(g)
    assert make_record(f).prefix == f"{dob.year:04d}{dob.month:02d}"
    assert make_record(f).digest == sha256_pure(canonicalize(f))[:40]

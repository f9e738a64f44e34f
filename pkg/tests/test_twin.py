import json
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aact import twin
from aact.twin import BomEntry, Policy, Signature
from conftest import data_json, data_path

MIB = 1 << 20


def make_signatures(rng: random.Random, n: int) -> list[Signature]:
    return [Signature(f"SIG-{i:02d}", f"comp{i:02d}", f"{i}.{rng.randint(0, 9)}",
                      rng.randbytes(rng.randint(8, 24))) for i in range(n)]


def plant(rng: random.Random, sigs, size: int = MIB) -> tuple[bytes, dict[str, int]]:
    blob = bytearray(rng.randbytes(size))
    slots = sorted(rng.sample(range(size // 64 - 1), len(sigs)))
    offsets = {}
    for sig, slot in zip(sigs, slots):
        off = slot * 64 + rng.randint(0, 64 - len(sig.pattern))
        blob[off:off + len(sig.pattern)] = sig.pattern
        offsets[sig.signature_id] = off
    return bytes(blob), offsets


def sliding_oracle(blob: bytes, sigs) -> list[tuple[int, str]]:
    """First occurrence of every signature by full window comparison."""
    arr = np.frombuffer(blob, dtype=np.uint8)
    found = []
    for sig in sigs:
        pat = np.frombuffer(sig.pattern, dtype=np.uint8)
        windows = np.lib.stride_tricks.sliding_window_view(arr, len(pat))
        hits = np.flatnonzero((windows == pat).all(axis=1))
        if len(hits):
            found.append((int(hits[0]), sig.signature_id))
    return sorted(found)


def as_bytes(entries) -> bytes:
    return json.dumps([e.to_json() for e in entries], sort_keys=True).encode()


def test_twelve_planted_signatures():
    rng = random.Random(4)
    sigs = make_signatures(rng, 12)
    blob, offsets = plant(rng, sigs)
    bom = twin.scan_firmware(blob, sigs)
    assert len(bom) == 12
    assert {b.signature_id: b.offset for b in bom} == offsets
    assert [(b.offset, b.signature_id) for b in bom] == sliding_oracle(blob, sigs)
    assert [b.offset for b in bom] == sorted(b.offset for b in bom)


def test_random_blobs_have_no_matches():
    rng = random.Random(5)
    sigs = make_signatures(rng, 12)
    for _ in range(100):
        assert twin.scan_firmware(rng.randbytes(MIB), sigs) == []


@pytest.mark.parametrize("chunk,workers", [(7, 1), (4096, 1), (65537, 4), (MIB // 3, 8), (2 * MIB, 2)])
def test_chunked_scan_equals_single_pass(chunk, workers):
    rng = random.Random(6)
    sigs = make_signatures(rng, 12)
    blob, _ = plant(rng, sigs)
    if chunk == 7:
        blob = blob[:64 * 1024]
    single = twin.scan_firmware(blob, sigs)
    assert as_bytes(twin.scan_firmware(blob, sigs, chunk_size=chunk, workers=workers)) == as_bytes(single)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(1, 300))
def test_chunk_boundaries_property(seed, chunk):
    rng = random.Random(seed)
    sigs = make_signatures(rng, 4)
    blob = bytearray(rng.randbytes(2000))
    for sig in sigs:
        for _ in range(rng.randint(0, 3)):
            off = rng.randrange(len(blob) - len(sig.pattern))
            blob[off:off + len(sig.pattern)] = sig.pattern
    blob = bytes(blob)
    single = twin.scan_firmware(blob, sigs)
    assert [(b.offset, b.signature_id) for b in single] == sliding_oracle(blob, sigs)
    assert twin.scan_firmware(blob, sigs, chunk_size=chunk, workers=3) == single


def test_duplicates_collapse_to_first_offset():
    sig = Signature("S", "c", "1.0", b"ABCDEFGH")
    other = Signature("T", "c", "1.0", b"12345678")
    blob = b"xx12345678" + b"." * 20 + b"ABCDEFGH" + b"ABCDEFGH"
    assert twin.scan_firmware(blob, [sig, other]) == [BomEntry("c", "1.0", 2, "T")]


def test_short_patterns_rejected():
    with pytest.raises(twin.InvariantViolation):
        Signature("S", "c", "1", b"1234567")


def test_demo_sigdb_scans_demo_firmware():
    from aact.pipeline import demo_firmware
    bom = twin.scan_firmware(demo_firmware(), twin.load_signatures(data_path("sigdb.json")))
    assert [(b.name, b.version, b.offset) for b in bom] == [("bt_stack", "5.43", 0x1400)]


# ---------------------------------------------------------------------------
# versions and vulnerability matching


@pytest.mark.parametrize("a,b,expected", [
    ("1.0.1f", "1.0.1g", -1), ("1.0.1", "1.0.1a", -1), ("1.10", "1.9", 1),
    ("5.43", "5.50", -1), ("2", "2.0", -1), ("3.8", "3.8", 0),
])
def test_compare_versions(a, b, expected):
    assert twin.compare_versions(a, b) == expected
    assert twin.compare_versions(b, a) == -expected


@pytest.mark.parametrize("text", ["", "v1", "1..2", "1.0-rc1", "1.0ab"])
def test_bad_versions(text):
    with pytest.raises(twin.VersionParseError):
        twin.parse_version(text)


@given(st.lists(st.integers(0, 99), min_size=1, max_size=4), st.sampled_from(["", "a", "k"]),
       st.lists(st.integers(0, 99), min_size=1, max_size=4), st.sampled_from(["", "b", "z"]))
def test_version_order_is_total_and_antisymmetric(x, xs, y, ys):
    a = ".".join(map(str, x)) + xs
    b = ".".join(map(str, y)) + ys
    assert twin.compare_versions(a, b) == -twin.compare_versions(b, a)
    assert (twin.compare_versions(a, b) == 0) == ((x, xs) == (y, ys))


def test_range_is_inclusive():
    v = twin.VulnRecord("V", "openssl", ("1.0.1", "1.0.1g"), "CWE-126", "eth")
    hits = lambda ver: twin.match_vulnerabilities([BomEntry("openssl", ver)], [v])
    assert hits("1.0.1") and hits("1.0.1g") and hits("1.0.1c")
    assert not hits("1.0.1h") and not hits("1.0.0")
    assert not twin.match_vulnerabilities([BomEntry("OpenSSL", "1.0.1c")], [v])


def test_unparseable_version_is_skipped():
    skipped = []
    v = twin.VulnRecord("V", "x", ("1", "2"), "CWE-1", "bt")
    assert twin.match_vulnerabilities([BomEntry("x", "beta")], [v], skipped=skipped) == []
    assert skipped == ["x beta"]


def test_inverted_range_rejected():
    with pytest.raises(twin.InvariantViolation):
        twin.VulnRecord("V", "x", ("2.0", "1.0"), "CWE-1", "bt")


# ---------------------------------------------------------------------------
# twin document, policies, assembly


def test_twin_json_round_trip():
    doc = data_json("twin.json")
    t = twin.twin_from_json(doc)
    assert twin.twin_from_json(t.to_json()) == t
    # bt_stack only enters the BOM through the firmware scan
    assert len(twin.twin_problems(t)) == 1
    assembled = twin.assemble_twin([BomEntry("bt_stack", "5.43", 0x1400)], doc)
    assert twin.twin_problems(assembled) == []


@pytest.mark.parametrize("edit", [
    lambda d: d.update(bom="x"),
    lambda d: d["bom"].append({"name": 3, "version": "1"}),
    lambda d: d["interfaces"].append({"kind": "bt"}),
    lambda d: d["flowGraph"]["edges"].append({"from": "s0", "to": "s1"}),
    lambda d: d.update(credentials=["root"]),
])
def test_malformed_twin(edit):
    doc = data_json("twin.json")
    edit(doc)
    with pytest.raises(twin.FormatError):
        twin.twin_from_json(doc)


def test_twin_problems_detected():
    doc = data_json("twin.json")
    doc["interfaces"].append({"kind": "wifi", "id": "bt0"})
    doc["flowGraph"]["nodes"].append({"id": "s9", "kind": "entry", "component": "ghost"})
    doc["flowGraph"]["edges"].append({"from": "s9", "to": "nowhere", "trigger": "gps.fix"})
    problems = twin.twin_problems(twin.twin_from_json(doc))
    text = "\n".join(problems)
    for needle in ("unknown kind 'wifi'", "'bt0' duplicated", "'ghost' absent",
                   "missing node 'nowhere'", "'s9' has no edge"):
        assert needle in text


def _policy_twin():
    doc = data_json("twin.json")
    doc["credentials"] = [{"user": "root", "password": "root"}, {"user": "diag", "password": "x9!"}]
    doc["securityConfig"] = {"secureBoot": False, "tls": {"minVersion": "1.1"}}
    doc["firewallRules"] = []
    return twin.twin_from_json(doc)


def test_policies():
    t = _policy_twin()
    policies = [
        Policy("securityConfig.secureBoot", "eq", True),
        Policy("securityConfig.tls.minVersion", "version_ge", "1.2"),
        Policy("firewallRules", "exists", "nonempty"),
        Policy("credentials[root].password", "eq", "changed"),
        Policy("credentials[*].user", "exists"),
        Policy("kernelConfig.CONFIG_STRICT_DEVMEM", "exists"),
        Policy("os.name", "eq", "linux"),
    ]
    violations = twin.check_policies(t, policies)
    assert [(v.path, v.reason) for v in violations] == [
        ("securityConfig.secureBoot", "not equal"),
        ("securityConfig.tls.minVersion", "version too low"),
        ("firewallRules", "empty"),
        ("credentials[0].password", "not equal"),
        ("kernelConfig.CONFIG_STRICT_DEVMEM", "missing"),
    ]


def test_bad_policy_path_is_reported_not_raised():
    v = twin.check_policies(_policy_twin(), [Policy("credentials[nobody].user", "exists"),
                                             Policy("os..name", "exists")])
    assert len(v) == 2 and all(x.reason.startswith("bad path") for x in v)


def test_assemble_scan_wins_conflicts():
    doc = data_json("twin.json")
    doc["bom"].append({"name": "bt_stack", "version": "5.0"})
    t = twin.assemble_twin([BomEntry("bt_stack", "5.43", 0x1400, "SIG-BT-543")], doc)
    assert t.bom_entry("bt_stack").version == "5.43"
    assert t.conflicts == [{"name": "bt_stack", "scanVersion": "5.43", "fileVersion": "5.0",
                            "resolution": "scan"}]
    assert {b.name for b in t.bom} == {"bt_stack", "SQLite"}


def test_assemble_rejects_inconsistent_twin():
    doc = data_json("twin.json")
    # bt_stack is named by a flow node but comes only from a scan that found nothing
    with pytest.raises(twin.InvariantViolation):
        twin.assemble_twin([], doc)

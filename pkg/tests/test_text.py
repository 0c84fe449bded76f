import logging

import numpy as np
import pytest

from core.errors import ConfigError, DataError
from core.text import (
    FileLookupProvider,
    HashedBowProvider,
    RewriteRule,
    embed_text,
    load_pairs,
    load_rules,
    make_provider,
    normalize_caption,
    token_frequencies,
    write_embedding_bank,
    write_frequency_report,
    write_pairs,
)

CORPUS = [
    "A ped crossing the road near parked veh",
    "hidden ped behind a truck, car waiting at the intersection",
    "Car turn left then turn right at the intxn",
    "turn right at the light and turn left after",
    "ppl waiting at an intersection",
    "hidden peds and peds on the sidewalk",
    "a quiet street with trees",
    "Pedestrians, hidden pedestrians, and cyclists!",
    "",
]


@pytest.fixture(scope="module")
def rules():
    return load_rules()


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("ped crossing", "pedestrians crossing"),
        ("peds near the bus stop", "pedestrians near the bus stop"),
        ("a car and a hidden ped", "a car and a"),
        ("car waiting at the intersection", "car at the intersection"),
        ("car turn left then turn right", "car turn left then"),
        ("Turn Right, then turn left!", "turn right then"),
        ("speed limit sign", "speed limit sign"),
    ],
)
def test_caption_edits(rules, raw, expected):
    assert normalize_caption(raw, rules) == expected


def test_normalization_is_idempotent(rules):
    for caption in CORPUS:
        once = normalize_caption(caption, rules)
        assert normalize_caption(once, rules) == once


def test_rules_are_applied_in_priority_order(tmp_path):
    path = tmp_path / "rules.tsv"
    path.write_text("# priority\tkind\tpattern\treplacement\n20\treplace_word\tcar\tvehicle\n10\treplace_word\tauto\tcar\n")
    loaded = load_rules(path)
    assert [rule.priority for rule in loaded] == [10, 20]
    assert normalize_caption("auto", loaded) == "vehicle"


def test_rule_file_errors_name_the_line(tmp_path):
    path = tmp_path / "rules.tsv"
    path.write_text("10\treplace_word\tped\tpedestrians\nhigh\treplace_word\tveh\tvehicles\n")
    with pytest.raises(ConfigError, match=":2:"):
        load_rules(path)
    path.write_text("10\tshout\tped\tPED\n")
    with pytest.raises(ConfigError, match="shout"):
        load_rules(path)
    with pytest.raises(ConfigError):
        load_rules(tmp_path / "missing.tsv")


def test_rule_validation():
    with pytest.raises(ConfigError, match="re-introduces"):
        RewriteRule(30, "replace_word", "ped", "ped crossing")
    with pytest.raises(ConfigError):
        RewriteRule(40, "resolve_conflict", "turn left")
    assert RewriteRule(40, "resolve_conflict", "go|stop").alternatives == ["go", "stop"]


def test_pair_manifest_keeps_first_slot_and_last_caption(tmp_path, rules, caplog):
    path = tmp_path / "pairs.tsv"
    path.write_text("000001\tped crossing\n000002\ta quiet street\n000001\thidden ped and veh\n")
    with caplog.at_level(logging.WARNING, logger="EqDiff"):
        manifest = load_pairs(path, rules)
    assert [r.frame_id for r in manifest] == ["000001", "000002"]
    assert manifest[0].normalized == "and vehicles"
    assert manifest.duplicates == 1
    assert "1 duplicate" in caplog.text
    assert manifest.by_frame()["000002"].raw == "a quiet street"

    out = tmp_path / "normalized.tsv"
    write_pairs(manifest, out)
    assert out.read_text().splitlines() == ["000001\tand vehicles", "000002\ta quiet street"]


def test_malformed_manifest_line(tmp_path, rules):
    path = tmp_path / "pairs.tsv"
    path.write_text("000001\tok\nno tab here\n")
    with pytest.raises(DataError, match=":2:"):
        load_pairs(path, rules)


def test_token_frequency_report(tmp_path, rules):
    path = tmp_path / "pairs.tsv"
    path.write_text("a\tped and ped\nb\tveh\n")
    counts = token_frequencies(load_pairs(path, rules))
    assert counts["pedestrians"] == 2 and counts["vehicles"] == 1
    report = tmp_path / "tokens.tsv"
    write_frequency_report(counts, report)
    assert report.read_text().splitlines() == ["token\tcount", "pedestrians\t2", "and\t1", "vehicles\t1"]


def test_hashed_bow_embeddings():
    provider = HashedBowProvider(dim=512, seed=0)
    e = embed_text("pedestrians at the intersection", provider)
    assert e.vector.shape == (512,) and e.provider == "hashed_bow"
    assert np.linalg.norm(e.vector) == pytest.approx(1.0)
    assert np.array_equal(e.vector, provider.embed("pedestrians at the intersection").vector)
    assert not np.array_equal(e.vector, HashedBowProvider(dim=512, seed=1).embed("pedestrians at the intersection").vector)

    empty = provider.embed("")
    assert empty.provider == "empty" and not empty.vector.any()


def test_disjoint_captions_are_nearly_orthogonal():
    provider = HashedBowProvider(dim=512)
    cosines = []
    for i in range(100):
        a = provider.embed(f"alpha{i} bravo{i} charlie{i}").vector
        b = provider.embed(f"delta{i} echo{i} foxtrot{i}").vector
        cosines.append(abs(float(a @ b)))
    assert np.mean(cosines) < 0.3


def test_file_lookup_provider(tmp_path):
    vectors = {"a quiet street": np.array([3.0, 4.0]), "pedestrians": np.array([0.0, 2.0])}
    write_embedding_bank(tmp_path / "bank", vectors)
    provider = make_provider("file_lookup", bank=str(tmp_path / "bank"))
    assert isinstance(provider, FileLookupProvider) and provider.dim == 2
    np.testing.assert_allclose(provider.embed("a quiet street").vector, [0.6, 0.8])
    with pytest.raises(DataError, match="busy road"):
        provider.embed("busy road")


def test_provider_selection_errors():
    with pytest.raises(ConfigError):
        make_provider("clip")
    with pytest.raises(ConfigError):
        make_provider("file_lookup")
    assert isinstance(make_provider("hashed_bow", dim=8), HashedBowProvider)

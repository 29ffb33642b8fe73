import pytest

from ealm.data import (
    DataError,
    DatasetRecord,
    dataset_stats,
    generate_synthetic_corpus,
    load_jsonl,
    save_jsonl,
)
from ealm.tinylm import encode_example


def test_record_validation():
    with pytest.raises(DataError):
        DatasetRecord(prompt="", reference="x")
    with pytest.raises(DataError):
        DatasetRecord(prompt="x", reference="   ")


def test_jsonl_roundtrip_and_determinism(tmp_path):
    recs = generate_synthetic_corpus(seed=3, n_records=10)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_jsonl(recs, p1)
    save_jsonl(generate_synthetic_corpus(seed=3, n_records=10), p2)
    assert p1.read_bytes() == p2.read_bytes()  # byte-identical regeneration
    assert load_jsonl(p1) == recs


def test_jsonl_errors(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"prompt": "a"}\n')
    with pytest.raises(DataError, match="bad record"):
        load_jsonl(p)
    p.write_text("not json\n")
    with pytest.raises(DataError):
        load_jsonl(p)
    p.write_text("\n\n")
    with pytest.raises(DataError, match="empty"):
        load_jsonl(p)
    with pytest.raises(DataError):
        load_jsonl(tmp_path / "missing.jsonl")


def test_corpus_shape_and_learnability():
    recs = generate_synthetic_corpus(seed=0, n_records=16, grammar_size=4)
    assert len(recs) == 16
    assert len({r.prompt for r in recs}) == 16  # fault codes are unique
    # prompt -> reference is a function of the symptom class
    by_class = {}
    for i, r in enumerate(recs):
        by_class.setdefault(i % 4, set()).add(r.reference)
    assert all(len(v) == 1 for v in by_class.values())

    other = generate_synthetic_corpus(seed=1, n_records=16, grammar_size=4)
    assert [r.reference for r in other] != [r.reference for r in recs] or \
        [r.prompt for r in other] == [r.prompt for r in recs]

    with pytest.raises(DataError):
        generate_synthetic_corpus(seed=0, n_records=0)


def test_dataset_stats():
    recs = [DatasetRecord("a b", "c d"), DatasetRecord("a" * 30, "b" * 30)]
    stats = dataset_stats(recs, bucket_width=16)
    lengths = [len(encode_example(r.prompt, r.reference)) for r in recs]
    assert stats["count"] == 2
    assert stats["max"] == max(lengths)
    assert stats["mean"] == pytest.approx(sum(lengths) / 2)
    assert sum(stats["histogram"].values()) == 2
    for key in stats["histogram"]:
        lo = int(key[1:].split(",")[0])
        assert lo % 16 == 0
    with pytest.raises(DataError):
        dataset_stats([])

import hashlib
import json

import numpy as np
import pytest

from lapa.data import (
    DataError,
    QASample,
    SyntheticSpec,
    generate,
    load,
    load_dataset,
    write_dataset,
)

SMALL = SyntheticSpec(n_train=64, n_val=16, n_test=16, seed=3)


@pytest.fixture(scope="module")
def default_data():
    return generate(SyntheticSpec())


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


def decode(image, organs, diseases):
    """Read (organ, disease) back off a noise-free image: quadrant of the lesion, its level and stripes."""
    region = image > 0.2
    ys, xs = np.nonzero(region)
    half = image.shape[0] // 2
    organ = 2 * int(ys.mean() >= half) + int(xs.mean() >= half)
    peak = image[region].max()
    level = int(round((peak - 0.45) / 0.55 * 4)) - 1
    striped = len(np.unique(np.round(image[region], 6))) > 1
    return organ, level + 4 * striped


def test_files_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    write_dataset(generate(SMALL), a, SMALL)
    write_dataset(generate(SMALL), b, SMALL)
    assert digest(a) == digest(b)
    assert {"train.jsonl", "val.jsonl", "test.jsonl", "vocab.json", "graph.json"} <= set(digest(a))


def test_vocabulary_size(default_data):
    assert len(default_data.vocab) == 4 + 8 + 2
    assert default_data.vocab[:2] == ["yes", "no"]
    assert len(set(default_data.vocab)) == len(default_data.vocab)


def test_answers_follow_from_the_image(default_data):
    graph = default_data.graph
    organs, diseases = graph.names[:4], graph.names[4:]
    for s in default_data.train + default_data.val:
        o, d = decode(s.image, 4, 8)
        assert graph.adjacency[o, 4 + d] == 1
        if s.qtype == "open":
            assert s.answer == (organs[o] if "organ" in s.question else diseases[d])
        else:
            named = s.question.split()[-1]
            truth = organs[o] if s.question.startswith("is the organ") else diseases[d]
            assert s.answer == ("yes" if named == truth else "no")


def test_closed_answers_balanced(default_data):
    closed = [s for s in default_data.train + default_data.val + default_data.test if s.qtype == "closed"]
    assert len(closed) >= 300
    big = generate(SyntheticSpec(n_train=1200, seed=11))
    closed = [s for s in big.train if s.qtype == "closed"]
    assert len(closed) >= 500
    share = np.mean([s.answer == "yes" for s in closed])
    assert abs(share - 0.5) <= 0.05


def test_question_templates(default_data):
    allowed_open = {"what organ is shown", "what disease is present"}
    for s in default_data.train:
        if s.qtype == "open":
            assert s.question in allowed_open
        else:
            assert s.question.startswith(("is the organ ", "is the disease ")) and s.answer in ("yes", "no")


def test_splits_disjoint(default_data):
    keys = [{s.image.tobytes() for s in split} for split in (default_data.train, default_data.val, default_data.test)]
    assert not (keys[0] & keys[1]) and not (keys[0] & keys[2]) and not (keys[1] & keys[2])


def test_noise_changes_pixels_within_range():
    clean = generate(SyntheticSpec(n_train=8, n_val=1, n_test=1, noise=0.0))
    noisy = generate(SyntheticSpec(n_train=8, n_val=1, n_test=1, noise=0.2))
    assert not np.array_equal(clean.train[0].image, noisy.train[0].image)
    assert all(0 <= s.image.min() and s.image.max() <= 1 for s in noisy.train)


@pytest.mark.parametrize(
    "change",
    [dict(n_train=0), dict(n_val=0), dict(organs=5, diseases=4), dict(noise=0.3), dict(image_size=30)],
)
def test_invalid_specs(change):
    spec = SyntheticSpec(**{**SyntheticSpec().__dict__, **change})
    with pytest.raises(DataError):
        generate(spec)


def test_round_trip(tmp_path):
    data = generate(SMALL)
    write_dataset(data, tmp_path, SMALL)
    loaded = load_dataset(tmp_path)
    for name in ("train", "val", "test"):
        assert loaded[name] == data.split(name)
    assert loaded["vocab"] == data.vocab
    np.testing.assert_array_equal(loaded["graph"].adjacency, data.graph.adjacency)


def record(**kw):
    base = {"image": [[0.0, 0.5], [1.0, 0.25]], "question": "is the organ liver", "answer": "yes", "qtype": "closed"}
    return json.dumps({**base, **kw})


@pytest.mark.parametrize(
    "line, msg",
    [
        (record(answer="maybe"), "not in vocabulary"),
        (record(answer="liver"), "closed question"),
        (record(qtype="both"), "qtype"),
        (record(image=[[2.0]]), r"\[0, 1\]"),
        ("{not json", "malformed"),
        (json.dumps({"question": "q"}), "missing"),
    ],
)
def test_bad_records_name_the_line(tmp_path, line, msg):
    path = tmp_path / "split.jsonl"
    path.write_text(record() + "\n" + line + "\n")
    with pytest.raises(DataError, match=f"split.jsonl:2: .*{msg}"):
        load(path, ["yes", "no", "liver", "maybe"][:3])


def test_empty_file_is_an_error(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    with pytest.raises(DataError):
        load(path, ["yes", "no"])


def test_sample_equality():
    a = QASample(np.zeros((2, 2)), "q", "yes", "closed")
    assert a == QASample(np.zeros((2, 2)), "q", "yes", "closed")
    assert a != QASample(np.ones((2, 2)), "q", "yes", "closed")

import json
import os
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vldebias.embed_store import (
    LabeledEmbeddingSet,
    SampleLabel,
    load_set,
    normalize_rows,
    pair_counterfactuals,
    save_set,
    set_paths,
)
from vldebias.errors import ConsistencyError, DataError, FormatError, IoError, PairingError

from .conftest import make_set


def write_raw(stem, matrix, records, header=None):
    matrix = np.asarray(matrix, dtype="<f4")
    rows = matrix.shape[0]
    dim = matrix.shape[1] if matrix.ndim == 2 else 0
    leb, jsonl = set_paths(stem)
    with open(leb, "wb") as fh:
        fh.write(struct.pack("<4sII", b"LEB1", rows, dim) + matrix.tobytes())
    header = header or {"dim": dim, "normalized": True, "attribute_vocab": {}}
    with open(jsonl, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in records:
            fh.write(json.dumps(r) + "\n")


def rec(i, modality="image", concept="c", **attrs):
    return {"id": i, "modality": modality, "concept": concept, "attributes": attrs,
            "counterfactual_of": None, "prompt_text": None}


def test_load_unit_rows(tmp_path):
    write_raw(tmp_path / "s", [[1, 0, 0, 0], [0, 1, 0, 0]], [rec("a"), rec("b")])
    s = load_set(tmp_path / "s")
    assert s.dim == 4
    assert np.array_equal(np.linalg.norm(s.matrix, axis=1), [1.0, 1.0])


def test_load_normalizes_when_flagged(tmp_path):
    write_raw(tmp_path / "s", [[3, 4, 0, 0]], [rec("a")],
              {"dim": 4, "normalized": False, "attribute_vocab": {}})
    s = load_set(tmp_path / "s")
    assert np.allclose(s.matrix[0], [0.6, 0.8, 0, 0], atol=1e-15)
    assert s.normalized


def test_empty_manifest_rejected(tmp_path):
    write_raw(tmp_path / "s", np.zeros((0, 4)), [], {"dim": 4, "normalized": True, "attribute_vocab": {}})
    with pytest.raises(ConsistencyError):
        load_set(tmp_path / "s")


def test_row_count_mismatch(tmp_path):
    write_raw(tmp_path / "s", [[1, 0], [0, 1]], [rec("a")])
    with pytest.raises(ConsistencyError):
        load_set(tmp_path / "s")


def test_non_finite_rejected(tmp_path):
    write_raw(tmp_path / "s", [[np.nan, 1.0]], [rec("a")])
    with pytest.raises(DataError):
        load_set(tmp_path / "s")


def test_bad_manifest_json(tmp_path):
    write_raw(tmp_path / "s", [[1, 0]], [rec("a")])
    with open(tmp_path / "s.jsonl", "a") as fh:
        fh.write("{not json\n")
    with pytest.raises(FormatError):
        load_set(tmp_path / "s")


def test_corrupt_header_byte(tmp_path, small_synth):
    save_set(small_synth.gallery, tmp_path / "g")
    path = tmp_path / "g.leb"
    data = bytearray(path.read_bytes())
    data[1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_set(tmp_path / "g")


def test_truncated_payload(tmp_path, small_synth):
    save_set(small_synth.gallery, tmp_path / "g")
    path = tmp_path / "g.leb"
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        load_set(tmp_path / "g")


def test_matrix_file_size(tmp_path):
    rng = np.random.default_rng(0)
    n, d = 1000, 512
    s = make_set(rng.standard_normal((n, d)), [(f"i{i}", "image", "c", {}) for i in range(n)])
    save_set(s, tmp_path / "big")
    assert os.path.getsize(tmp_path / "big.leb") == 12 + 4 * n * d


def test_roundtrip_synth(tmp_path, small_synth):
    save_set(small_synth.train, tmp_path / "t")
    once = load_set(tmp_path / "t")
    assert np.array_equal(once.matrix, small_synth.train.matrix.astype(np.float32).astype(np.float64))
    assert once.labels == small_synth.train.labels
    save_set(once, tmp_path / "t2")
    assert load_set(tmp_path / "t2") == once
    assert (tmp_path / "t.leb").read_bytes() == (tmp_path / "t2.leb").read_bytes()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(2, 5)),
              elements=st.floats(-10, 10, width=32)))
def test_roundtrip_property(tmp_path_factory, m):
    m = m.astype(np.float64)
    m[np.linalg.norm(m, axis=1) == 0, 0] = 1.0
    unit = normalize_rows(m).astype(np.float32).astype(np.float64)
    labels = tuple(SampleLabel(id=f"r{i}", modality="image", concept="c") for i in range(len(m)))
    s = LabeledEmbeddingSet(labels=labels, matrix=unit)
    path = tmp_path_factory.mktemp("rt") / "s"
    save_set(s, path)
    back = load_set(path)
    assert back == s
    assert np.array_equal(back.matrix, s.matrix)


def test_transformed_set_kept_verbatim(tmp_path, small_synth):
    raw = small_synth.gallery.with_matrix(small_synth.gallery.matrix * 0.5, transform="scaled")
    save_set(raw, tmp_path / "r")
    back = load_set(tmp_path / "r")
    assert back.transform == "scaled"
    assert np.allclose(back.matrix, raw.matrix, atol=1e-7)


def test_unwritable_path(small_synth):
    with pytest.raises(IoError):
        save_set(small_synth.queries, "/nonexistent-dir/x/s")


def test_normalization_idempotent(small_synth):
    m = small_synth.gallery.matrix
    assert np.max(np.abs(normalize_rows(m) - m)) <= 1e-12
    assert np.allclose(np.linalg.norm(m, axis=1), 1.0, atol=1e-6)


def test_set_invariants():
    with pytest.raises(ConsistencyError):
        make_set([[1, 0], [0, 1]], [("a", "image", "c", {}), ("a", "image", "c", {})])
    with pytest.raises(ConsistencyError):
        make_set([[1, 0]], [("a", "audio", "c", {})])
    with pytest.raises(ConsistencyError):
        make_set([[1, 0]], [("a", "text", "c", {"gender": "other"})], vocab={"gender": ["male"]})
    with pytest.raises(ConsistencyError):
        make_set([[1.0]], [("a", "image", "c", {})])
    with pytest.raises(ConsistencyError):  # partner with identical attributes
        make_set([[1, 0], [0, 1]], [("a", "text", "c", {"g": "m"}, "b"), ("b", "text", "c", {"g": "m"})])
    s = make_set([[1, 0]], [("a", "image", "c", {})])
    with pytest.raises(ValueError):
        s.matrix[0, 0] = 2.0


def dancer_set():
    return make_set(
        [[1, 0, 0], [0, 1, 0]],
        [("t-male", "text", "dancer", {"gender": "male"}),
         ("t-female", "text", "dancer", {"gender": "female"})],
    )


def test_pairing_binary_is_mutual():
    m = pair_counterfactuals(dancer_set(), ["gender"])
    assert m == {"t-male": "t-female", "t-female": "t-male"}


def test_pairing_involution(small_synth):
    m = pair_counterfactuals(small_synth.train, ["gender"])
    assert all(m[m[k]] == k for k in m)
    for k, v in m.items():
        a, b = small_synth.train.labels[small_synth.train.index_of(k)], \
            small_synth.train.labels[small_synth.train.index_of(v)]
        assert a.concept == b.concept and a.attributes["gender"] != b.attributes["gender"]


def test_pairing_single_row():
    s = make_set([[1, 0]], [("t", "text", "dancer", {"gender": "male"})],
                 vocab={"gender": ["male", "female"]})
    with pytest.raises(PairingError) as info:
        pair_counterfactuals(s, ["gender"])
    assert info.value.unmatched == ["t"]


def age_set():
    ages = ["young", "middle-aged", "old"]
    rows = np.eye(3)
    return make_set(rows, [(f"t-{a}", "text", "doctor", {"age": a}) for a in ages],
                    vocab={"age": ages})


def test_pairing_multivalued_uniform_and_seeded():
    s = age_set()
    a = pair_counterfactuals(s, ["age"], seed=5)
    assert a == pair_counterfactuals(s, ["age"], seed=5)
    counts = Counter()
    for seed in range(400):
        m = pair_counterfactuals(s, ["age"], seed=seed)
        assert m["t-young"] in {"t-middle-aged", "t-old"}
        counts[m["t-young"]] += 1
    # uniform over the two other values: 200 +- ~4 sigma
    assert abs(counts["t-old"] - 200) < 40


def test_pairing_missing_axis_label():
    s = make_set([[1, 0], [0, 1]], [("a", "text", "c", {}), ("b", "text", "c", {})])
    with pytest.raises(PairingError):
        pair_counterfactuals(s, ["gender"])


def test_pairing_all_axes_vary(small_synth):
    from vldebias.synthgen import UNIVERSAL_AXES, SynthConfig, generate

    data = generate(SynthConfig(dim=40, concepts=2, samples_per_concept=18, gallery_per_concept=18,
                                axes=UNIVERSAL_AXES))
    text = data.text_set
    m = pair_counterfactuals(text, list(UNIVERSAL_AXES), seed=1)
    for k, v in m.items():
        a = text.labels[text.index_of(k)].attributes
        b = text.labels[text.index_of(v)].attributes
        assert all(a[ax] != b[ax] for ax in UNIVERSAL_AXES)


def test_select_drops_dangling_links(small_synth):
    text = small_synth.text_set
    sub = text.select([0])
    assert sub.labels[0].counterfactual_of is None

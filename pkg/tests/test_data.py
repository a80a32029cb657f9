from __future__ import annotations

import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmlop.data import (
    CountMismatchError,
    DataError,
    EmbeddingFile,
    MalformedHeaderError,
    NormViolationError,
    TaskSpec,
    all_classes,
    gen_synthetic,
    load_embeddings,
    load_task,
    save_embeddings,
    save_task,
    split_base_novel,
    split_classes,
)
from mmlop.encoder import build_anchor, build_backbone, encode_image


def test_noiseless_samples_identical_within_class():
    task = gen_synthetic(TaskSpec(noise=0.0), seed=0)
    for c in range(task.n_classes):
        xs = task.train_x[task.train_y == c]
        assert np.all(xs == xs[0])
        assert np.all(xs[0] == xs[0][0])


def test_generation_deterministic():
    assert gen_synthetic(TaskSpec(), 3).equals(gen_synthetic(TaskSpec(), 3))
    assert not gen_synthetic(TaskSpec(), 3).equals(gen_synthetic(TaskSpec(), 4))


def test_shapes_and_counts():
    spec = TaskSpec(n_classes=6, shots=5, n_test=7)
    task = gen_synthetic(spec, 0)
    assert task.train_x.shape == (30, spec.n_patches, spec.d_in)
    assert task.test_x.shape == (42, spec.n_patches, spec.d_in)
    assert np.bincount(task.train_y).tolist() == [5] * 6
    assert np.allclose(np.linalg.norm(task.prototypes, axis=1), 1)


def test_zero_shot_separability():
    # small noise and orthogonal prototypes: the frozen anchor should classify base classes
    task = gen_synthetic(TaskSpec(noise=0.1), 0)
    bb = build_backbone()
    base, _ = split_base_novel(task)
    anchor = build_anchor(bb, base.class_words)
    pred = (encode_image(bb, None, base.test_x).data @ anchor.features.T).argmax(1)
    assert (pred == base.test_y).mean() >= 0.95


@pytest.mark.parametrize("kw", [{"n_classes": 1}, {"shots": 0}, {"noise": -1.0}, {"d_in": 0}])
def test_invalid_spec(kw):
    with pytest.raises(DataError):
        gen_synthetic(replace(TaskSpec(), **kw), 0)


def test_split_sizes():
    assert split_classes(10) == (list(range(5)), list(range(5, 10)))
    base, novel = split_classes(11)
    assert len(base) == 6 and len(novel) == 5


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 40))
def test_split_is_partition(c):
    base, novel = split_classes(c)
    assert sorted(base + novel) == list(range(c))
    assert not set(base) & set(novel)
    assert len(base) - len(novel) in (0, 1)


def test_split_local_labels():
    task = gen_synthetic(TaskSpec(n_classes=5, shots=3, n_test=2), 1)
    base, novel = split_base_novel(task)
    assert base.classes == [0, 1, 2] and novel.classes == [3, 4]
    assert set(novel.train_y.tolist()) == {0, 1}
    assert np.array_equal(novel.train_x, task.train_x[task.train_y >= 3])
    assert len(base.test_y) + len(novel.test_y) == len(task.test_y)
    assert all_classes(task).n_classes == 5


# ---------------------------------------------------------------- embedding files


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 9))
def test_embedding_roundtrip_bitwise(seed, count, dim):
    import tempfile
    from pathlib import Path

    values = np.random.default_rng(seed).normal(size=(count, dim)) * 10.0 ** np.random.default_rng(seed).integers(-5, 5)
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "e.json"
        save_embeddings(EmbeddingFile("prompted", values, list(range(count))), path)
        back = load_embeddings(path)
    assert np.array_equal(back.values, values)
    assert back.kind == "prompted" and back.labels == list(range(count))


def test_unit_kind_roundtrip(tmp_path):
    v = np.random.default_rng(0).normal(size=(4, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    save_embeddings(EmbeddingFile("anchor", v, ["a", "b", "c", "d"]), tmp_path / "a.json")
    back = load_embeddings(tmp_path / "a.json")
    assert np.array_equal(back.values, v) and back.labels == ["a", "b", "c", "d"]


def test_truncated_payload(tmp_path):
    save_embeddings(EmbeddingFile("image", np.ones((3, 2))), tmp_path / "e.json")
    obj = json.loads((tmp_path / "e.json").read_text())
    obj["data"] = obj["data"][:2]
    (tmp_path / "e.json").write_text(json.dumps(obj))
    with pytest.raises(CountMismatchError):
        load_embeddings(tmp_path / "e.json")


def test_row_width_mismatch(tmp_path):
    obj = {"kind": "image", "dim": 2, "count": 2, "labels": [0, 1], "data": [[1.0, 2.0], [3.0]]}
    (tmp_path / "e.json").write_text(json.dumps(obj))
    with pytest.raises(CountMismatchError):
        load_embeddings(tmp_path / "e.json")


def test_norm_violation_names_row(tmp_path):
    v = np.eye(4)
    v[2] *= 1.1
    save_embeddings(EmbeddingFile("anchor", v), tmp_path / "a.json")
    with pytest.raises(NormViolationError) as info:
        load_embeddings(tmp_path / "a.json")
    assert info.value.row == 2


@pytest.mark.parametrize(
    "text",
    ["not json", json.dumps({"kind": "anchor", "dim": 2}), json.dumps({"kind": "weird", "dim": 1, "count": 0, "data": []})],
)
def test_malformed_header(tmp_path, text):
    (tmp_path / "e.json").write_text(text)
    with pytest.raises(MalformedHeaderError):
        load_embeddings(tmp_path / "e.json")


def test_task_roundtrip(tmp_path):
    task = gen_synthetic(TaskSpec(n_classes=5), 9)
    save_task(task, tmp_path / "t.json")
    assert load_task(tmp_path / "t.json").equals(task)


def test_task_file_kind_checked(tmp_path):
    save_embeddings(EmbeddingFile("image", np.ones((1, 2))), tmp_path / "e.json")
    with pytest.raises(MalformedHeaderError):
        load_task(tmp_path / "e.json")

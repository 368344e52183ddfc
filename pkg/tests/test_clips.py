import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tan2d import autograd as ag
from tan2d.clips import (
    ClipFeatureSequence, project_clip_features, read_feature_file, read_manifest, sample_clips,
    write_feature_file,
)
from tan2d.errors import ConfigError, DataError, FormatError
from tan2d.optim import grad_check
from tan2d.synthetic import CorpusSpec, generate_synthetic_corpus, is_ordinal, planted_direction


def seq_of(values, tau=1.0):
    return ClipFeatureSequence(np.asarray(values, dtype=float).reshape(len(values), -1), tau, "v")


def test_sample_identity():
    s = sample_clips(seq_of(np.arange(6)), 6)
    np.testing.assert_array_equal(s.features[:, 0], np.arange(6))
    np.testing.assert_array_equal(s.source_start, np.arange(6))


def test_sample_constant():
    s = sample_clips(seq_of(np.full(8, 2.5)), 4)
    np.testing.assert_array_equal(s.features, 2.5)


def test_sample_stride_max_by_hand():
    s = sample_clips(seq_of(np.arange(8)), 4)
    np.testing.assert_array_equal(s.features[:, 0], [1, 3, 5, 7])


def test_sample_upsamples_by_repetition():
    s = sample_clips(seq_of([10.0, 20.0]), 4)
    np.testing.assert_array_equal(s.features[:, 0], [10, 10, 20, 20])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 90), st.integers(1, 40), st.floats(0.1, 3.0))
def test_sample_shape_and_duration(n_clips, n, tau):
    seq = ClipFeatureSequence(np.random.default_rng(n_clips).standard_normal((n_clips, 3)), tau)
    s = sample_clips(seq, n)
    assert s.features.shape == (n, 3)
    assert abs(n * s.clip_duration - n_clips * tau) < 1e-9
    # every source clip is covered when downsampling
    if n_clips >= n:
        assert s.source_start[0] == 0 and s.source_stop[-1] == n_clips
        np.testing.assert_array_equal(s.source_start[1:], s.source_stop[:-1])


def test_sample_bad_n():
    with pytest.raises(ConfigError):
        sample_clips(seq_of([1.0]), 0)


def test_empty_sequence_rejected():
    with pytest.raises(DataError):
        ClipFeatureSequence(np.zeros((0, 3)), 1.0)


def test_projection_identity_and_zero():
    x = ag.tensor(np.random.default_rng(0).standard_normal((4, 3)))
    np.testing.assert_array_equal(project_clip_features(x, ag.tensor(np.eye(3)), ag.tensor(np.zeros(3))).data, x.data)
    np.testing.assert_array_equal(project_clip_features(x, ag.tensor(np.zeros((3, 5)))).data, 0.0)


def test_projection_dim_mismatch():
    with pytest.raises(ConfigError):
        project_clip_features(ag.tensor(np.ones((4, 3))), ag.tensor(np.ones((2, 5))))


def test_projection_gradcheck():
    rng = np.random.default_rng(1)
    x = ag.tensor(rng.standard_normal((4, 3)))
    r = rng.standard_normal((4, 2))
    b = ag.tensor(rng.standard_normal(2))
    assert grad_check(lambda w: (project_clip_features(x, w, b) * r).sum(), rng.standard_normal((3, 2))) < 1e-4


def test_feature_file_roundtrip(tmp_path):
    feats = np.random.default_rng(2).standard_normal((7, 5)).astype(np.float32).astype(np.float64)
    p = tmp_path / "a.bin"
    write_feature_file(p, ClipFeatureSequence(feats, 0.25, "a"))
    back = read_feature_file(p)
    np.testing.assert_array_equal(back.features, feats)
    assert back.clip_duration == 0.25
    assert p.read_bytes()[:8] == b"TAN2DFTR"
    assert len(p.read_bytes()) == 8 + 4 + 4 + 4 + 8 + 7 * 5 * 4


def test_feature_file_truncated(tmp_path):
    p = tmp_path / "a.bin"
    write_feature_file(p, seq_of(np.arange(6.0)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_feature_file(p)


def test_feature_file_bad_magic(tmp_path):
    p = tmp_path / "a.bin"
    write_feature_file(p, seq_of(np.arange(6.0)))
    p.write_bytes(b"XXXXXXXX" + p.read_bytes()[8:])
    with pytest.raises(FormatError):
        read_feature_file(p)


def test_feature_file_zero_clips(tmp_path):
    import struct

    p = tmp_path / "a.bin"
    p.write_bytes(struct.pack("<8sIIId", b"TAN2DFTR", 1, 0, 4, 1.0))
    with pytest.raises(DataError):
        read_feature_file(p)


SMALL = CorpusSpec(n_videos=40)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    return generate_synthetic_corpus(out, seed=7, spec=SMALL), out


def _digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generator_deterministic(small_corpus, tmp_path):
    _, first = small_corpus
    generate_synthetic_corpus(tmp_path, seed=7, spec=SMALL)
    assert _digest(first) == _digest(tmp_path)


def test_generator_manifests_parse(small_corpus):
    man, out = small_corpus
    total = 0
    for split in ("train", "val", "test"):
        part = read_manifest(out / f"{split}.jsonl")
        part.validate()
        assert all(a.split == split for a in part.annotations)
        total += len(part)
    assert total == len(man)
    report = json.loads((out / "generation_report.json").read_text())
    assert report["queries"] == len(man)


def test_generator_ground_truth_semantics(small_corpus):
    man, out = small_corpus
    feats = man.load_features()
    plan = json.loads((out / "plan.json").read_text())
    n_again = 0
    for a in man.annotations:
        seq = feats[a.video_id]
        assert 0 <= a.start_sec < a.end_sec <= seq.duration
        tau = seq.clip_duration
        occ = [p for p in plan[a.video_id] if p["activity"] in a.query]
        spans = [(p["start_clip"] * tau, (p["start_clip"] + p["n_clips"]) * tau) for p in occ]
        if " again" in a.query or "second time" in a.query:
            n_again += 1
            assert len(spans) >= 2 and (a.start_sec, a.end_sec) == spans[1]
        elif "first time" in a.query:
            assert len(spans) >= 2 and (a.start_sec, a.end_sec) == spans[0]
        else:
            assert not is_ordinal(a.query)
            assert spans == [(a.start_sec, a.end_sec)]
    assert n_again > 0


def test_planted_direction_margin(small_corpus):
    man, _ = small_corpus
    feats = man.load_features()
    for a in man.annotations:
        seq = feats[a.video_id]
        proj = seq.features @ planted_direction(a.query, SMALL.d_in, 7)
        lo = int(round(a.start_sec / seq.clip_duration))
        hi = int(round(a.end_sec / seq.clip_duration))
        inside = proj[lo:hi].mean()
        outside = np.delete(proj, np.arange(lo, hi)).mean()
        assert inside - outside > 0

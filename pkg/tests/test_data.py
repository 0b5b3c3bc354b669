"""Corpus generation, codec, batching, and TextGrid export tests."""

import numpy as np
import pytest

from neufa import data
from neufa.boundary import BoundarySet
from neufa.errors import ConfigurationError, CorpusFormatError, InputError


def small_spec(**over):
    base = dict(corpus_size=6, seed=7)
    base.update(over)
    return data.SyntheticSpec(**base)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        data.SyntheticSpec(duration_min=0)
    with pytest.raises(ConfigurationError):
        data.SyntheticSpec(duration_max=1, duration_min=2)
    with pytest.raises(ConfigurationError):
        data.SyntheticSpec(noise=-0.1)
    with pytest.raises(ConfigurationError):
        data.SyntheticSpec.from_dict({"vocal_size": 3})


def test_generation_is_deterministic():
    a = data.generate_synthetic_corpus(small_spec())
    b = data.generate_synthetic_corpus(small_spec())
    assert data.corpora_equal(a, b)
    c = data.generate_synthetic_corpus(small_spec(seed=8))
    assert not data.corpora_equal(a, c)


def test_generation_construction_invariants():
    corpus = data.generate_synthetic_corpus(small_spec(corpus_size=20))
    for utt in corpus:
        durations_ms = utt.gt_boundaries.rights_ms - utt.gt_boundaries.lefts_ms
        assert np.all(durations_ms >= 2 * 10.0 - 1e-9)
        assert np.all(durations_ms <= 8 * 10.0 + 1e-9)
        # contiguous spans: last right edge is the utterance end
        assert utt.gt_boundaries.rights_ms[-1] == pytest.approx(utt.n_frames * 10.0)
        assert utt.gt_boundaries.lefts_ms[0] == pytest.approx(0.0)
        np.testing.assert_allclose(
            utt.gt_boundaries.lefts_ms[1:], utt.gt_boundaries.rights_ms[:-1], atol=1e-9
        )
        assert 3 <= utt.n_tokens <= 12


def test_noise_free_frames_are_prototype_copies():
    spec = small_spec(noise=0.0, duration_min=3, duration_max=3, corpus_size=4)
    corpus = data.generate_synthetic_corpus(spec)
    for utt in corpus:
        for k, tok in enumerate(utt.tokens):
            span = utt.frames[3 * k : 3 * (k + 1)]
            np.testing.assert_array_equal(span[0], span[1])
            np.testing.assert_array_equal(span[1], span[2])
        assert np.all(utt.gt_boundaries.lefts_ms % 30.0 == 0.0)
    # the same token always emits the same prototype
    seen = {}
    for utt in corpus:
        for k, tok in enumerate(utt.tokens):
            row = tuple(utt.frames[3 * k])
            assert seen.setdefault(tok, row) == row


def test_silence_insertion():
    spec = small_spec(silence_frames=2, corpus_size=5)
    corpus = data.generate_synthetic_corpus(spec)
    for utt in corpus:
        gaps = utt.gt_boundaries.lefts_ms[1:] - utt.gt_boundaries.rights_ms[:-1]
        np.testing.assert_allclose(gaps, 20.0, atol=1e-9)


def test_codec_roundtrip(tmp_path):
    corpus = data.generate_synthetic_corpus(small_spec())
    path = tmp_path / "corpus.jsonl"
    data.save_corpus(corpus, path)
    assert data.corpora_equal(data.load_corpus(path), corpus)


def test_codec_roundtrip_empties(tmp_path):
    path = tmp_path / "empty.jsonl"
    data.save_corpus([], path)
    assert data.load_corpus(path) == []


def test_codec_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    corpus = data.generate_synthetic_corpus(small_spec(corpus_size=3))
    data.save_corpus(corpus, path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][: len(lines[2]) // 2]  # truncate a record mid-json
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(CorpusFormatError) as err:
        data.load_corpus(path)
    assert "line 3" in str(err.value)


def test_codec_version_and_header_checks(tmp_path):
    path = tmp_path / "v999.jsonl"
    path.write_text('{"format": "corpus", "version": 999}\n')
    with pytest.raises(CorpusFormatError):
        data.load_corpus(path)
    path.write_text('{"something": "else"}\n')
    with pytest.raises(CorpusFormatError):
        data.load_corpus(path)
    path.write_text("")
    with pytest.raises(CorpusFormatError):
        data.load_corpus(path)


def test_batches_pad_and_mask():
    corpus = data.generate_synthetic_corpus(small_spec(corpus_size=5))
    batches = data.make_batches(corpus, batch_size=2, seed=1)
    assert [b.size for b in batches] == [2, 2, 1]
    for b in batches:
        t_max = max(b.text_lengths)
        assert b.tokens.shape == (b.size, t_max)
        for i, utt in enumerate(b.utterances):
            np.testing.assert_array_equal(
                b.text_mask[i], [1.0] * utt.n_tokens + [0.0] * (t_max - utt.n_tokens)
            )
            np.testing.assert_array_equal(b.frames[i, : utt.n_frames], utt.frames)
            np.testing.assert_array_equal(b.frames[i, utt.n_frames :], 0.0)
            assert list(b.tokens[i, : utt.n_tokens]) == utt.tokens


def test_batches_shuffle_by_seed_and_cover_corpus():
    corpus = data.generate_synthetic_corpus(small_spec(corpus_size=8))
    b1 = data.make_batches(corpus, 3, seed=0)
    b2 = data.make_batches(corpus, 3, seed=0)
    b3 = data.make_batches(corpus, 3, seed=1)
    ids = lambda bs: [u.id for b in bs for u in b.utterances]
    assert ids(b1) == ids(b2)
    assert ids(b1) != ids(b3)
    assert sorted(ids(b1)) == sorted(u.id for u in corpus)


def test_single_batch_when_size_exceeds_corpus():
    corpus = data.generate_synthetic_corpus(small_spec(corpus_size=3))
    batches = data.make_batches(corpus, batch_size=50, seed=0)
    assert len(batches) == 1 and batches[0].size == 3
    with pytest.raises(ConfigurationError):
        data.make_batches(corpus, 0, seed=0)


def test_utterance_validation():
    good = BoundarySet([0.0], [30.0])
    with pytest.raises(InputError):
        data.Utterance("u", [], np.zeros((3, 2)), good)
    with pytest.raises(InputError):
        data.Utterance("u", [1, 2], np.zeros((3, 2)), good)
    with pytest.raises(InputError):  # boundary beyond the last frame
        data.Utterance("u", [1], np.zeros((2, 2)), good)
    overlapping = BoundarySet([0.0, 10.0], [20.0, 30.0])
    with pytest.raises(InputError):
        data.Utterance("u", [1, 2], np.zeros((3, 2)), overlapping)


def test_textgrid_single_token(tmp_path):
    utt = data.Utterance("u", [7], np.zeros((10, 2)), BoundarySet([0.0], [100.0]))
    path = tmp_path / "u.TextGrid"
    data.export_textgrid(utt, utt.gt_boundaries, path)
    text = path.read_text()
    assert 'File type = "ooTextFile"' in text
    assert "xmax = 0.100000" in text
    assert 'text = "7"' in text
    assert "intervals: size = 1" in text


def test_textgrid_gaps_and_shared_edges(tmp_path):
    bounds = BoundarySet([0.0, 30.0, 60.0], [30.0, 50.0, 80.0])
    utt = data.Utterance("u", [1, 2, 3], np.zeros((8, 2)), bounds)
    path = tmp_path / "u.TextGrid"
    data.export_textgrid(utt, bounds, path)
    text = path.read_text()
    # tokens 1 and 2 share the 0.03 edge; gap after token 2 gets an empty label
    assert text.count('text = ""') == 1
    assert "intervals: size = 4" in text
    lines = [l.strip() for l in text.splitlines()]
    # skip the file and tier headers: interval times start at index 2
    xs = [float(l.split(" = ")[1]) for l in lines if l.startswith("xmin")][2:]
    ys = [float(l.split(" = ")[1]) for l in lines if l.startswith("xmax")][2:]
    # the tier must tile [0, xmax]: each interval starts where the previous ended
    for prev_end, next_start in zip(ys, xs[1:]):
        assert prev_end == pytest.approx(next_start)
    assert xs[0] == 0.0 and ys[-1] == pytest.approx(0.08)


def test_textgrid_clips_overlapping_predictions(tmp_path):
    utt = data.Utterance(
        "u", [1, 2], np.zeros((10, 2)), BoundarySet([0.0, 40.0], [40.0, 100.0])
    )
    messy = BoundarySet([0.0, 30.0], [50.0, 90.0])  # unit 2 starts inside unit 1
    path = tmp_path / "u.TextGrid"
    data.export_textgrid(utt, messy, path)
    lines = [l.strip() for l in path.read_text().splitlines()]
    xs = [float(l.split(" = ")[1]) for l in lines if l.startswith("xmin")][2:]
    ys = [float(l.split(" = ")[1]) for l in lines if l.startswith("xmax")][2:]
    assert all(y >= x for x, y in zip(xs, ys))
    for prev_end, next_start in zip(ys, xs[1:]):
        assert prev_end == pytest.approx(next_start)


# -- alignment files ---------------------------------------------------------------


def sample_alignments():
    return {
        "u0": BoundarySet([0.0, 31.4159], [31.4159, 72.5]),
        "u1": BoundarySet([10.0], [50.0], frame_shift_ms=5.0),
    }


def test_alignments_roundtrip_bit_exact(tmp_path):
    path = tmp_path / "a.jsonl"
    original = sample_alignments()
    data.save_alignments(original, path)
    loaded = data.load_alignments(path)
    assert list(loaded) == list(original)
    for uid, bounds in original.items():
        got = loaded[uid]
        np.testing.assert_array_equal(got.lefts_ms, bounds.lefts_ms)
        np.testing.assert_array_equal(got.rights_ms, bounds.rights_ms)
        assert got.frame_shift_ms == bounds.frame_shift_ms


def test_alignments_empty_file_rejected(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text("")
    with pytest.raises(CorpusFormatError, match="header"):
        data.load_alignments(path)


def test_alignments_wrong_format_rejected(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"format": "corpus", "version": 1}\n')
    with pytest.raises(CorpusFormatError, match="not an alignments file"):
        data.load_alignments(path)


def test_alignments_wrong_version_rejected(tmp_path):
    path = tmp_path / "a.jsonl"
    path.write_text('{"format": "alignments", "version": 99}\n')
    with pytest.raises(CorpusFormatError, match="version"):
        data.load_alignments(path)


def test_alignments_bad_record_names_line(tmp_path):
    path = tmp_path / "a.jsonl"
    data.save_alignments(sample_alignments(), path)
    with open(path, "a") as fh:
        fh.write('{"id": "u2", "lefts_ms": [0.0]}\n')
    with pytest.raises(CorpusFormatError, match="line 4"):
        data.load_alignments(path)


def test_alignments_duplicate_id_rejected(tmp_path):
    path = tmp_path / "a.jsonl"
    data.save_alignments(sample_alignments(), path)
    with open(path, "a") as fh:
        fh.write(
            '{"id": "u0", "frame_shift_ms": 10.0, "lefts_ms": [0.0], "rights_ms": [10.0]}\n'
        )
    with pytest.raises(CorpusFormatError, match="duplicate"):
        data.load_alignments(path)

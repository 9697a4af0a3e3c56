import ast
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import wstan
from wstan.synth import (CorpusParseError, DataConfig, GenerationError, SamplingError, gen_corpus,
                         load_corpus, make_training_pair, nearest_prototype_accuracy, save_corpus)

SMALL = DataConfig(n_train=30, n_test=10)


@pytest.fixture(scope="module")
def corpus():
    return gen_corpus(SMALL, seed=7)


def gt_span_readers():
    """``module:function`` for every function in the package touching ``gt_spans``."""
    readers = set()
    root = Path(wstan.__file__).parent
    for path in sorted(root.glob("*.py")):
        tree = ast.parse(path.read_text())

        def visit(node, scope):
            for child in ast.iter_child_nodes(node):
                name = scope
                if isinstance(child, (ast.FunctionDef, ast.AsyncFunctionDef, ast.ClassDef)):
                    name = f"{scope}.{child.name}" if scope else child.name
                hit = (isinstance(child, ast.Attribute) and child.attr == "gt_spans") or \
                      (isinstance(child, ast.Constant) and child.value == "gt_spans")
                if hit:
                    readers.add(f"{path.stem}:{scope}")
                visit(child, name)

        visit(tree, "")
    return readers


class TestGeneration:
    def test_deterministic(self, tmp_path):
        a, b = gen_corpus(SMALL, 3), gen_corpus(SMALL, 3)
        save_corpus(a[0] + a[1], tmp_path / "a.jsonl")
        save_corpus(b[0] + b[1], tmp_path / "b.jsonl")
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_seed_matters(self):
        assert gen_corpus(SMALL, 3)[0][0] != gen_corpus(SMALL, 4)[0][0]

    def test_zero_noise_clips_are_prototype_sums(self):
        train, _, protos = gen_corpus(replace(SMALL, noise=0.0), 5)
        by_sentence = {p.sentence: p.vector for p in protos}
        for ep in train:
            expected = np.zeros_like(ep.clips)
            for sent, (i, j) in zip(ep.sentences, ep.gt_spans):
                expected[i:j + 1] += by_sentence[sent]
            assert np.array_equal(ep.clips, expected)

    def test_pigeonhole(self):
        with pytest.raises(GenerationError):
            gen_corpus(replace(SMALL, np_max=6, span_min=3), 0)

    def test_span_invariants(self, corpus):
        train, test, _ = corpus
        for ep in train + test:
            assert SMALL.np_min <= len(ep.sentences) <= SMALL.np_max
            assert len(ep.sentences) == len(ep.gt_spans) == len(set(ep.sentences))
            covered = np.zeros(SMALL.n_clips, int)
            for i, j in ep.gt_spans:
                assert 0 <= i <= j <= SMALL.n_clips - 1
                assert SMALL.span_min <= j - i + 1 <= SMALL.span_max
                covered[i:j + 1] += 1
            assert covered.max() <= 1  # non-overlapping
            assert SMALL.duration_min <= ep.duration <= SMALL.duration_max

    def test_prototype_separation(self, corpus):
        vecs = np.stack([p.vector for p in corpus[2]])
        dist = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
        np.fill_diagonal(dist, np.inf)
        assert dist.min() >= 1.0

    def test_sentence_template(self, corpus):
        for p in corpus[2]:
            words = p.sentence.split()
            assert words[0] == "person" and words[2] == "the"
            assert len(words) in (4, 5)

    def test_learnability_floor(self):
        cfg = replace(SMALL, noise=0.2, n_events=8, n_train=60)
        train, _, protos = gen_corpus(cfg, 11)
        assert nearest_prototype_accuracy(train, protos) >= 0.95


class TestTrainingPairs:
    def test_negative_rate(self, corpus):
        train = corpus[0]
        rng = np.random.default_rng(0)
        negatives = sum(make_training_pair(train[n % len(train)], train, rng).y_m == 0
                        for n in range(10_000))
        assert abs(negatives / 10_000 - 0.5) <= 0.02

    def test_label_matches_source(self, corpus):
        train = corpus[0]
        rng = np.random.default_rng(1)
        for n in range(500):
            ep = train[n % len(train)]
            pair = make_training_pair(ep, train, rng)
            assert pair.y_m == int(pair.source_id == ep.id)
            source = next(e for e in train if e.id == pair.source_id)
            assert len(pair.sentences) == len(source.sentences) - 1
            assert set(pair.sentences) <= set(source.sentences)

    def test_single_sentence_never_dropped(self, corpus):
        train = corpus[0]
        ep = replace(train[0], sentences=train[0].sentences[:1], gt_spans=train[0].gt_spans[:1])
        rng = np.random.default_rng(2)
        for _ in range(50):
            pair = make_training_pair(ep, [ep, replace(ep, id=999)], rng)
            assert len(pair.sentences) == 1

    def test_singleton_corpus(self, corpus):
        with pytest.raises(SamplingError):
            make_training_pair(corpus[0][0], corpus[0][:1], np.random.default_rng(0))

    def test_stream_deterministic(self, corpus):
        train = corpus[0]

        def stream(seed):
            rng = np.random.default_rng(seed)
            return [(p.source_id, p.y_m, tuple(p.sentences))
                    for p in (make_training_pair(e, train, rng) for e in train)]

        assert stream(5) == stream(5)


class TestCodec:
    def test_round_trip(self, corpus, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus[0], path)
        assert load_corpus(path) == corpus[0]

    def test_truncated_file_names_line(self, corpus, tmp_path):
        path = tmp_path / "c.jsonl"
        save_corpus(corpus[0][:3], path)
        text = path.read_text()
        path.write_text(text[: len(text) - 40])
        with pytest.raises(CorpusParseError) as info:
            load_corpus(path)
        assert info.value.line == 3
        assert "3" in str(info.value)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_corpus(path) == []


def test_ground_truth_readers_are_evaluation_only():
    readers = gt_span_readers()
    allowed = {
        "synth:Episode.__eq__",                  # codec equality
        "synth:episode_to_json",                 # serialization
        "synth:episode_from_dict",               # deserialization
        "synth:nearest_prototype_accuracy",      # generator sanity oracle
        "pipeline:_episode_queries",             # evaluation
        "pipeline:random_baseline",              # evaluation
    }
    assert readers <= allowed, sorted(readers - allowed)
    training_path = {"pipeline:train", "pipeline:compute_losses", "synth:make_training_pair",
                     "model:WSTAN.forward"}
    assert not readers & training_path

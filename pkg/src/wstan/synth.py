"""Reproducible weakly supervised corpora with planted events.

Each episode is a video of ``N`` clip features.  A handful of events occupy
non-overlapping clip spans; an event clip holds that event's prototype
vector plus Gaussian noise, background clips hold noise only.  Every event
comes with a templated sentence.  Ground-truth spans are stored for
evaluation and nothing on the training path reads them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "DataConfig", "EventPrototype", "Episode", "TrainingPair", "GenerationError",
    "SamplingError", "CorpusParseError", "make_prototypes", "gen_corpus",
    "make_training_pair", "save_corpus", "load_corpus", "nearest_prototype_accuracy",
]

VERBS = ["opens", "closes", "holds", "throws", "washes", "takes", "puts", "eats",
         "watches", "cleans", "fixes", "carries"]
OBJECTS = ["door", "window", "book", "cup", "phone", "towel", "laptop", "sandwich",
           "box", "bag", "chair", "blanket"]
MODIFIERS = ["slowly", "quickly", "twice", "again", "carefully", "happily", "loudly",
             "quietly", "briefly", "outside"]


class GenerationError(ValueError):
    pass


class SamplingError(ValueError):
    pass


class CorpusParseError(ValueError):
    def __init__(self, line: int, msg: str):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 500
    n_test: int = 100
    n_clips: int = 16
    d_v: int = 16
    n_events: int = 24
    n_verbs: int = 12
    n_objects: int = 12
    n_modifiers: int = 10
    np_min: int = 2
    np_max: int = 3
    span_min: int = 3
    span_max: int = 8
    noise: float = 0.1
    proto_scale: float = 1.0
    duration_min: float = 20.0
    duration_max: float = 40.0


@dataclass(frozen=True)
class EventPrototype:
    id: int
    vector: np.ndarray
    verb: str
    obj: str
    modifier: str | None = None

    @property
    def sentence(self) -> str:
        words = ["person", self.verb, "the", self.obj]
        if self.modifier:
            words.append(self.modifier)
        return " ".join(words)


@dataclass
class Episode:
    id: int
    duration: float
    clips: np.ndarray  # [N, d_v]
    sentences: list[str]
    gt_spans: list[tuple[int, int]]  # clip indices, inclusive

    def __eq__(self, other) -> bool:
        return (isinstance(other, Episode) and self.id == other.id
                and self.duration == other.duration
                and self.clips.shape == other.clips.shape
                and bool(np.array_equal(self.clips, other.clips))
                and self.sentences == other.sentences
                and [tuple(s) for s in self.gt_spans] == [tuple(s) for s in other.gt_spans])


@dataclass
class TrainingPair:
    episode: Episode
    sentences: list[str]
    source_id: int
    y_m: int


def make_prototypes(cfg: DataConfig, rng: np.random.Generator) -> list[EventPrototype]:
    """Events with distinct (verb, object, modifier) phrases and well separated vectors."""
    verbs, objs, mods = (VERBS[:cfg.n_verbs], OBJECTS[:cfg.n_objects],
                         MODIFIERS[:cfg.n_modifiers])
    combos = [(v, o) for v in verbs for o in objs]
    if cfg.n_events > len(combos):
        raise GenerationError(f"{cfg.n_events} events exceed {len(combos)} verb/object pairs")
    pick = rng.choice(len(combos), size=cfg.n_events, replace=False)
    for _ in range(100):
        vecs = rng.normal(0.0, cfg.proto_scale, size=(cfg.n_events, cfg.d_v))
        dist = np.linalg.norm(vecs[:, None] - vecs[None], axis=-1)
        np.fill_diagonal(dist, np.inf)
        if cfg.n_events < 2 or dist.min() >= 1.0:
            break
    else:
        raise GenerationError("could not draw prototypes with pairwise distance >= 1")
    protos = []
    for e, ci in enumerate(pick):
        v, o = combos[int(ci)]
        mod = mods[int(rng.integers(len(mods)))] if mods and rng.random() < 0.5 else None
        protos.append(EventPrototype(e, vecs[e], v, o, mod))
    return protos


def _sample_spans(n: int, k: int, lo: int, hi: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """``k`` non-overlapping spans with lengths in ``[lo, hi]``, sorted by start."""
    hi = min(hi, n)
    lengths = rng.integers(lo, hi + 1, size=k)
    while lengths.sum() > n:
        lengths[int(np.argmax(lengths))] -= 1
    free = n - int(lengths.sum())
    # split the free clips into k+1 gaps uniformly
    cuts = np.sort(rng.integers(0, free + 1, size=k))
    gaps = np.diff(np.concatenate([[0], cuts]))
    order = rng.permutation(k)
    spans, pos = [], 0
    for gap, length in zip(gaps, lengths[order]):
        pos += int(gap)
        spans.append((pos, pos + int(length) - 1))
        pos += int(length)
    return spans


def _episode(cfg: DataConfig, eid: int, protos: Sequence[EventPrototype],
             rng: np.random.Generator) -> Episode:
    n_p = int(rng.integers(cfg.np_min, cfg.np_max + 1))
    spans = _sample_spans(cfg.n_clips, n_p, cfg.span_min, cfg.span_max, rng)
    events = rng.choice(len(protos), size=n_p, replace=False)
    clips = np.zeros((cfg.n_clips, cfg.d_v))
    for (i, j), e in zip(spans, events):
        clips[i:j + 1] += protos[int(e)].vector
    clips += rng.normal(0.0, cfg.noise, size=clips.shape) if cfg.noise > 0 else 0.0
    duration = float(np.round(rng.uniform(cfg.duration_min, cfg.duration_max), 2))
    # sentences listed in random order so position does not leak time
    order = rng.permutation(n_p)
    return Episode(eid, duration, clips,
                   [protos[int(events[o])].sentence for o in order],
                   [spans[o] for o in order])


def gen_corpus(cfg: DataConfig, seed: int) -> tuple[list[Episode], list[Episode], list[EventPrototype]]:
    """Train and test episodes plus the event prototypes, all determined by ``seed``."""
    if cfg.np_min < 1 or cfg.np_max < cfg.np_min:
        raise GenerationError("need 1 <= np_min <= np_max")
    if cfg.span_min < 1 or cfg.span_max < cfg.span_min:
        raise GenerationError("need 1 <= span_min <= span_max")
    if cfg.np_max * cfg.span_min > cfg.n_clips:
        raise GenerationError(
            f"{cfg.np_max} spans of length >= {cfg.span_min} cannot fit in {cfg.n_clips} clips")
    if cfg.np_max > cfg.n_events:
        raise GenerationError("more sentences per video than distinct events")
    root = np.random.SeedSequence(seed)
    proto_seq, ep_seq = root.spawn(2)
    protos = make_prototypes(cfg, np.random.default_rng(proto_seq))
    total = cfg.n_train + cfg.n_test
    # per-episode sub-seeds keep generation order-independent
    eps = [_episode(cfg, eid, protos, np.random.default_rng(s))
           for eid, s in enumerate(ep_seq.spawn(total))]
    return eps[:cfg.n_train], eps[cfg.n_train:], protos


def make_training_pair(episode: Episode, corpus: Sequence[Episode],
                       rng: np.random.Generator) -> TrainingPair:
    """Pair a video with its own paragraph or, half the time, another video's.

    One sentence is then dropped at random when at least two remain.
    """
    if len(corpus) < 2:
        raise SamplingError("negative sampling needs at least two episodes")
    if rng.random() < 0.5:
        others = [e for e in corpus if e.id != episode.id]
        source = others[int(rng.integers(len(others)))]
        y_m = 0
    else:
        source, y_m = episode, 1
    sentences = list(source.sentences)
    if len(sentences) >= 2:
        del sentences[int(rng.integers(len(sentences)))]
    return TrainingPair(episode, sentences, source.id, y_m)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def episode_to_json(ep: Episode) -> str:
    # clip values go through float() with 17 significant digits for exact round trips
    clips = "[" + ",".join("[" + ",".join(_fmt(v) for v in row) + "]" for row in ep.clips) + "]"
    head = json.dumps({"id": ep.id, "duration": ep.duration})[:-1]
    tail = json.dumps({"sentences": ep.sentences, "gt_spans": [list(s) for s in ep.gt_spans]})[1:]
    return f'{head}, "clips": {clips}, {tail}'


def save_corpus(corpus: Sequence[Episode], path) -> None:
    with open(path, "w") as fh:
        for ep in corpus:
            fh.write(episode_to_json(ep) + "\n")


def episode_from_dict(rec: dict) -> Episode:
    return Episode(int(rec["id"]), float(rec["duration"]),
                   np.asarray(rec["clips"], dtype=np.float64),
                   [str(s) for s in rec["sentences"]],
                   [(int(a), int(b)) for a, b in rec["gt_spans"]])


def load_corpus(path) -> list[Episode]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(episode_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise CorpusParseError(lineno, str(exc)) from None
    return out


def nearest_prototype_accuracy(corpus: Sequence[Episode], protos: Sequence[EventPrototype]) -> float:
    """Fraction of event clips whose nearest prototype is their own event.

    Sanity oracle on the generated features; reads ground truth, so it
    belongs with evaluation code, never with training.
    """
    by_sentence = {p.sentence: p for p in protos}
    vecs = np.stack([p.vector for p in protos])
    hits = total = 0
    for ep in corpus:
        for sent, (i, j) in zip(ep.sentences, ep.gt_spans):
            target = by_sentence[sent].id
            d = np.linalg.norm(ep.clips[i:j + 1, None] - vecs[None], axis=-1)
            hits += int((d.argmin(axis=1) == target).sum())
            total += j - i + 1
    return hits / total if total else float("nan")

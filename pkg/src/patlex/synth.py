"""Synthetic corpora with known phones and planted words.

Each phone is a small diagonal GMM. An utterance is a random filler phone
sequence, optionally with one planted multi-phone word in the middle; every
phone lasts a random number of frames. Queries are fresh realizations of
each word, and a query's relevant documents are the utterances containing
its word.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import Corpus, FeatureSequence, WordAnnotation, write_features, write_manifest
from .errors import ValidationError


@dataclass
class SynthConfig:
    n_phones: int = 20
    n_utterances: int = 300
    n_words: int = 10
    word_phones: tuple = (3, 5)
    filler_phones: tuple = (2, 5)
    phone_frames: tuple = (3, 7)
    word_prob: float = 0.8
    dim: int = 6
    spread: float = 2.0
    noise: float = 1.0
    components: int = 2
    seed: int = 0
    max_frames: int = None

    def validate(self):
        lo, hi = self.word_phones
        if not 1 <= lo <= hi:
            raise ValidationError("word_phones must satisfy 1 <= lo <= hi")
        if self.filler_phones[0] < 1 or self.filler_phones[0] > self.filler_phones[1]:
            raise ValidationError("filler_phones must satisfy 1 <= lo <= hi")
        if self.phone_frames[0] < 1 or self.phone_frames[0] > self.phone_frames[1]:
            raise ValidationError("phone_frames must satisfy 1 <= lo <= hi")
        if self.n_phones < 3:
            raise ValidationError("need at least 3 phones")
        if self.n_words < 1 or self.n_utterances < 1:
            raise ValidationError("need at least one word and one utterance")
        if self.noise < 0:
            raise ValidationError("noise must be >= 0")
        if self.max_frames is not None:
            longest = (hi + 2 * self.filler_phones[1]) * self.phone_frames[1]
            if longest > self.max_frames:
                raise ValidationError(
                    f"utterances may reach {longest} frames, above max_frames={self.max_frames}")
        if self.n_words > self.n_phones ** lo:
            raise ValidationError("not enough distinct phone sequences for the words")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("word_phones", "filler_phones", "phone_frames"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class SynthCorpus:
    corpus: Corpus
    queries: list
    query_words: dict       # query id -> word
    judgments: dict         # query id -> set of doc ids
    words: dict             # word -> phone tuple
    phone_means: np.ndarray


def _phone_inventory(cfg, rng):
    centers = rng.normal(0.0, cfg.spread, size=(cfg.n_phones, cfg.dim))
    offsets = rng.normal(0.0, 0.5, size=(cfg.n_phones, cfg.components, cfg.dim))
    return centers, centers[:, None, :] + offsets * (cfg.noise > 0)


def _words(cfg, rng):
    words, seen = {}, set()
    while len(words) < cfg.n_words:
        length = int(rng.integers(cfg.word_phones[0], cfg.word_phones[1] + 1))
        phones = tuple(int(p) for p in rng.integers(0, cfg.n_phones, size=length))
        if phones in seen or any(a == b for a, b in zip(phones, phones[1:])):
            continue
        seen.add(phones)
        words[f"w{len(words):02d}"] = phones
    return words


def _filler(cfg, rng, avoid_first=None, avoid_last=None):
    length = int(rng.integers(cfg.filler_phones[0], cfg.filler_phones[1] + 1))
    out = []
    for i in range(length):
        while True:
            p = int(rng.integers(0, cfg.n_phones))
            if out and p == out[-1]:
                continue
            if i == 0 and p == avoid_first:
                continue
            if i == length - 1 and p == avoid_last:
                continue
            break
        out.append(p)
    return out


def _render(phones, comp_means, cfg, rng):
    frames, bounds = [], []
    pos = 0
    for p in phones:
        L = int(rng.integers(cfg.phone_frames[0], cfg.phone_frames[1] + 1))
        comp = rng.integers(0, cfg.components, size=L)
        x = comp_means[p, comp] + cfg.noise * rng.normal(size=(L, cfg.dim))
        frames.append(x)
        bounds.append((pos, pos + L))
        pos += L
    return np.concatenate(frames), bounds


def generate(cfg):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    centers, comp_means = _phone_inventory(cfg, rng)
    words = _words(cfg, rng)
    names = sorted(words)

    utterances, annotations = [], []
    contains = {w: [] for w in names}
    for i in range(cfg.n_utterances):
        utt_id = f"utt{i:04d}"
        if rng.random() < cfg.word_prob:
            word = names[int(rng.integers(0, len(names)))]
            wp = list(words[word])
            left = _filler(cfg, rng, avoid_last=wp[0])
            right = _filler(cfg, rng, avoid_first=wp[-1])
            frames, bounds = _render(left + wp + right, comp_means, cfg, rng)
            start = bounds[len(left)][0]
            end = bounds[len(left) + len(wp) - 1][1]
            annotations.append(WordAnnotation(utt_id, word, start, end))
            contains[word].append(utt_id)
        else:
            frames, _ = _render(_filler(cfg, rng) + _filler(cfg, rng), comp_means, cfg, rng)
        utterances.append(FeatureSequence(utt_id, frames))

    queries, query_words, judgments = [], {}, {}
    for word in names:
        qid = f"q_{word}"
        frames, _ = _render(list(words[word]), comp_means, cfg, rng)
        queries.append(FeatureSequence(qid, frames))
        query_words[qid] = word
        if contains[word]:
            judgments[qid] = set(contains[word])
    return SynthCorpus(Corpus(utterances, annotations or None), queries, query_words,
                       judgments, words, centers)


def write_synth(out_dir, synth, cfg=None):
    """Manifest, features, queries and judgments under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", synth.corpus)
    qdir = out / "queries"
    qdir.mkdir(exist_ok=True)
    with open(out / "queries.jsonl", "w") as fh:
        for q in synth.queries:
            write_features(qdir / f"{q.utterance_id}.plxf", q)
            fh.write(json.dumps({"query": q.utterance_id,
                                 "features": f"queries/{q.utterance_id}.plxf",
                                 "word": synth.query_words[q.utterance_id]}) + "\n")
    with open(out / "judgments.jsonl", "w") as fh:
        for qid in sorted(synth.judgments):
            fh.write(json.dumps({"query": qid, "relevant": sorted(synth.judgments[qid])}) + "\n")
    with open(out / "words.json", "w") as fh:
        json.dump({w: list(p) for w, p in synth.words.items()}, fh, indent=1, sort_keys=True)
    if cfg is not None:
        with open(out / "synth_config.json", "w") as fh:
            json.dump(asdict(cfg), fh, indent=1, sort_keys=True)
    return out

"""Query-by-example spoken term detection over decoded pattern sequences."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmm
from .errors import QueryError, ValidationError

logger = logging.getLogger(__name__)


@dataclass
class MatchingMatrix:
    entries: np.ndarray
    doc_id: str = ""
    query_id: str = ""


@dataclass
class RankedList:
    query_id: str
    results: list                                   # [(doc_id, fused_score)]
    breakdown: dict = field(default_factory=dict)   # (m, n) -> {doc_id: R}

    @property
    def doc_ids(self):
        return [d for d, _ in self.results]

    def top(self, k):
        return RankedList(self.query_id, self.results[:k], self.breakdown)


def matching_matrix(doc_seq, query_seq, sim, doc_id="", query_id=""):
    S = sim.entries if hasattr(sim, "entries") else np.asarray(sim)
    d = np.asarray(doc_seq, dtype=np.int64)
    q = np.asarray(query_seq, dtype=np.int64)
    n = S.shape[0]
    for name, seq in (("document", d), ("query", q)):
        if seq.size and (seq.min() < 0 or seq.max() >= n):
            raise ValidationError(f"{name} pattern index outside [0, {n})")
    return MatchingMatrix(S[np.ix_(d, q)], doc_id, query_id)


def relevance(W):
    """Best diagonal sum ``max_i sum_j W[i + j, j]``.

    Offsets run from -(Q - 1) to D - 1 so every diagonal with at least one
    cell counts; cells outside the matrix contribute zero.
    """
    W = W.entries if isinstance(W, MatchingMatrix) else np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ValidationError("matching matrix must be non-empty")
    D, Q = W.shape
    return float(max(np.trace(W, offset=-i) for i in range(-(Q - 1), D)))


def rank(scores):
    """Sort (doc_id, score) by descending score, ties by doc_id."""
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


def score_archive(query_seq, archive_seqs, sim):
    """R(d, q) for every document of one pattern set."""
    return {doc: relevance(matching_matrix(seq, query_seq, sim))
            for doc, seq in archive_seqs.items()}


def fuse(per_set):
    """Equal-weight mean over grid points: {point: {doc: R}} -> {doc: mean R}."""
    points = sorted(per_set)
    docs = sorted(per_set[points[0]])
    return {doc: float(np.mean([per_set[pt][doc] for pt in points])) for doc in docs}


def search(query, archive, pattern_sets, sims, query_id=None):
    """Rank archive documents for one spoken query.

    ``archive`` maps point -> {doc_id: pattern sequence}; ``pattern_sets``
    and ``sims`` map point -> PatternSet / SimilarityMatrix.
    """
    points = sorted(pattern_sets)
    max_m = max(m for m, _ in points)
    if query.num_frames < max_m:
        raise QueryError(
            f"query has {query.num_frames} frames, shorter than the longest pattern ({max_m})")
    per_set = {}
    for pt in points:
        q_seq = hmm.viterbi_decode(query, pattern_sets[pt]).patterns
        per_set[pt] = score_archive(q_seq, archive[pt], sims[pt])
    fused = fuse(per_set)
    return RankedList(query_id or query.utterance_id, rank(fused), per_set)


def archive_from_labels(grid_labels, points=None):
    points = points or grid_labels.points
    return {pt: {utt: lab.patterns for utt, lab in grid_labels[pt].items()} for pt in points}


def decode_archive(corpus, pattern_set, cache_path=None):
    """Decoded pattern sequences for every utterance, cached on disk keyed by
    the model digest."""
    digest = pattern_set.digest()
    if cache_path is not None and Path(cache_path).exists():
        with open(cache_path) as fh:
            header = json.loads(fh.readline())
            if header.get("model") == digest:
                cached = {}
                for line in fh:
                    rec = json.loads(line)
                    cached[rec["utt"]] = rec["seq"]
                if set(cached) == set(corpus.ids):
                    return cached
    seqs = {u.utterance_id: hmm.viterbi_decode(u, pattern_set).patterns for u in corpus}
    if cache_path is not None:
        with open(cache_path, "w") as fh:
            fh.write(json.dumps({"model": digest}) + "\n")
            for utt in sorted(seqs):
                fh.write(json.dumps({"utt": utt, "seq": seqs[utt]}) + "\n")
    return seqs


def write_tsv(fh, ranked, points=None, top=None):
    points = sorted(ranked.breakdown) if points is None else points
    cols = ["rank", "doc_id", "fused_score"] + [f"R_{m}x{n}" for m, n in points]
    fh.write("\t".join(cols) + "\n")
    results = ranked.results if top is None else ranked.results[:top]
    for i, (doc, score) in enumerate(results, 1):
        row = [str(i), doc, repr(float(score))]
        row += [repr(float(ranked.breakdown[pt][doc])) for pt in points]
        fh.write("\t".join(row) + "\n")

"""Gini impurity of decoded word realizations, and (mean) average precision."""

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorpusIOError, ValidationError


class WordNotFoundError(ValidationError, LookupError):
    pass


@dataclass
class ImpurityReport:
    word: str
    realizations: int
    distinct_sequences: int
    fractions: list
    impurity: float


def gini_impurity(fractions):
    f = np.asarray(fractions, dtype=np.float64)
    if f.size == 0 or np.any(f < 0) or abs(f.sum() - 1.0) > 1e-9:
        raise ValidationError(f"fractions must be non-negative and sum to 1, got {f.tolist()}")
    return float(np.sum(f * (1.0 - f)))


def realization_sequence(labeling, start, end):
    """Patterns of the segments whose central frame lies in [start, end)."""
    return tuple(p for p, s, e in labeling.segments if start <= (s + e) // 2 < end)


def word_impurity(labels, annotations, word):
    by_utt = {lab.utterance_id: lab for lab in labels}
    key = word.casefold()
    seqs = [realization_sequence(by_utt[a.utterance_id], a.start_frame, a.end_frame)
            for a in annotations
            if a.word.casefold() == key and a.utterance_id in by_utt]
    if not seqs:
        raise WordNotFoundError(f"no realizations of {word!r}")
    counts = sorted(Counter(seqs).values(), reverse=True)
    total = len(seqs)
    fractions = [c / total for c in counts]
    return ImpurityReport(word, total, len(counts), fractions, gini_impurity(fractions))


def word_counts(annotations):
    return Counter(a.word.casefold() for a in annotations)


def select_words(annotations, selector):
    """``top:K`` (K most frequent, ties by word) or ``band:LO-HI`` (counts in
    the inclusive range)."""
    counts = word_counts(annotations)
    kind, _, arg = selector.partition(":")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if kind == "top":
        return [w for w, _ in ordered[:int(arg)]]
    if kind == "band":
        lo, hi = (int(x) for x in arg.split("-"))
        return [w for w, c in ordered if lo <= c <= hi]
    if kind == "all":
        return [w for w, _ in ordered]
    raise ValidationError(f"bad word selector {selector!r}")


def mean_impurity(labels, annotations, words):
    return float(np.mean([word_impurity(labels, annotations, w).impurity for w in words]))


def average_precision(ranked, relevant):
    ranked = list(ranked)
    if not ranked:
        raise ValidationError("empty ranking")
    relevant = set(relevant)
    if not relevant:
        raise ValidationError("no relevant documents")
    hits, total = 0, 0.0
    for i, doc in enumerate(ranked, 1):
        if doc in relevant:
            hits += 1
            total += hits / i
    return total / len(relevant)


def mean_average_precision(runs, judgments):
    """``runs``: query -> ranked doc ids (or RankedList);
    ``judgments``: query -> relevant doc ids."""
    aps = []
    for query in sorted(judgments):
        if query not in runs:
            raise ValidationError(f"no ranking for judged query {query!r}")
        ranked = runs[query]
        ranked = getattr(ranked, "doc_ids", ranked)
        aps.append(average_precision(ranked, judgments[query]))
    return float(np.mean(aps))


def per_query_ap(runs, judgments):
    return {q: average_precision(getattr(runs[q], "doc_ids", runs[q]), judgments[q])
            for q in sorted(judgments)}


def per_set_map(runs, judgments):
    """MAP of every grid point ranked on its own R(d, q) scores."""
    points = sorted(next(iter(runs.values())).breakdown)
    out = {}
    for pt in points:
        single = {q: [d for d, _ in sorted(r.breakdown[pt].items(), key=lambda kv: (-kv[1], kv[0]))]
                  for q, r in runs.items()}
        out[pt] = mean_average_precision(single, judgments)
    return out


def load_judgments(path):
    """JSON-lines ``{"query": id, "relevant": [doc, ...]}``."""
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[str(rec["query"])] = set(rec["relevant"])
    for q, rel in out.items():
        if not rel:
            raise ValidationError(f"query {q!r} has no relevant documents")
    return out

"""Context-consistency relabeling of decoded pattern sequences.

Every segment is relabeled with the pattern that maximizes the product of
six Katz-smoothed conditionals: forward and backward bigrams in time, and
conditionals given the co-located pattern (by central frame) in the
adjacent phonetic and temporal granularities. A factor whose context is
missing (sequence edge or grid edge) counts as 1.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import PatlexError, ValidationError
from .grid import GridLabeling

logger = logging.getLogger(__name__)

BOUNDARY = -1
KATZ_CUTOFF = 5
ABSOLUTE_DISCOUNT = 0.5

TIME_TABLES = ("time_prev", "time_next")
CROSS_TABLES = ("phon_lower", "phon_upper", "temp_lower", "temp_upper")
TABLES = TIME_TABLES + CROSS_TABLES


class UnknownTableError(PatlexError, KeyError):
    pass


@dataclass
class Discount:
    """Per-count multipliers d_r for r = 1..cutoff."""

    method: str
    ratios: dict = field(default_factory=dict)

    def apply(self, counts):
        out = counts.astype(np.float64)
        for r, d in self.ratios.items():
            out[counts == r] = r * d
        return out


def katz_discount(counts, cutoff=KATZ_CUTOFF):
    """Good-Turing discount ratios with the Katz cutoff, or absolute
    discounting (D = 0.5) when a count-of-counts needed by Good-Turing is
    zero or the resulting ratios fall outside (0, 1]."""
    counts = np.asarray(counts)
    nr = {r: int(np.sum(counts == r)) for r in range(1, cutoff + 2)}
    if all(nr[r] > 0 for r in nr):
        tail = (cutoff + 1) * nr[cutoff + 1] / nr[1]
        if tail < 1.0:
            ratios = {}
            for r in range(1, cutoff + 1):
                r_star = (r + 1) * nr[r + 1] / nr[r]
                ratios[r] = (r_star / r - tail) / (1.0 - tail)
            if all(0.0 < d <= 1.0 for d in ratios.values()):
                return Discount("good-turing", ratios)
    return Discount("absolute", {r: (r - ABSOLUTE_DISCOUNT) / r for r in range(1, cutoff + 1)})


def katz_table(counts, unigram, cutoff=KATZ_CUTOFF):
    """Conditional probabilities P(w | c) for a (contexts x vocab) count table.

    Seen pairs get discounted relative frequencies; the freed mass goes to
    unseen words in proportion to the unigram. A context whose words are
    all seen is renormalized over them. A context with unseen words but no
    discounted count gives up 0.5 per seen word so that unseen words stay
    above zero. Unseen contexts fall back to the unigram.
    """
    counts = np.asarray(counts, dtype=np.int64)
    disc = katz_discount(counts, cutoff)
    discounted = disc.apply(counts)
    probs = np.empty(counts.shape, dtype=np.float64)
    for c in range(counts.shape[0]):
        row = counts[c]
        total = row.sum()
        if total == 0:
            probs[c] = unigram
            continue
        seen = row > 0
        if seen.all():
            probs[c] = discounted[c] / discounted[c].sum()
            continue
        d_row = discounted[c]
        if np.array_equal(d_row[seen], row[seen].astype(np.float64)):
            d_row = np.where(seen, row - ABSOLUTE_DISCOUNT, 0.0)
        p_seen = d_row / total
        leftover = 1.0 - p_seen[seen].sum()
        alpha = leftover / unigram[~seen].sum()
        probs[c] = np.where(seen, p_seen, alpha * unigram)
    return probs, disc


def add_one_unigram(pattern_counts):
    pattern_counts = np.asarray(pattern_counts, dtype=np.float64)
    return (pattern_counts + 1.0) / (pattern_counts.sum() + pattern_counts.size)


@dataclass
class BigramModel:
    """Smoothed conditionals for one grid point. ``tables[name]`` has shape
    (context vocabulary, vocab_size); absent tables are grid-edge contexts."""

    vocab_size: int
    unigram: np.ndarray
    tables: dict
    counts: dict
    discounts: dict

    def log_tables(self):
        return {name: np.log(t) for name, t in self.tables.items()}

    def dump(self):
        """Flat records ``{table, context, w, prob}`` for debugging."""
        for name, table in self.tables.items():
            for c in range(table.shape[0]):
                for w in range(table.shape[1]):
                    yield {"table": name, "context": c, "w": w, "prob": float(table[c, w])}


def katz_prob(model, table, w, context):
    if table not in TABLES:
        raise UnknownTableError(table)
    if not 0 <= w < model.vocab_size:
        raise ValidationError(f"pattern {w} outside vocabulary of size {model.vocab_size}")
    if context == BOUNDARY or context is None or table not in model.tables:
        return 1.0
    return float(model.tables[table][context, w])


def align_context(labeling_self, labeling_neighbor, position):
    """Neighbor pattern whose segment contains the central frame of segment
    ``position`` of ``labeling_self``."""
    if not 0 <= position < len(labeling_self.segments):
        raise IndexError(f"segment {position} out of range for {labeling_self.utterance_id}")
    _, s, e = labeling_self.segments[position]
    return labeling_neighbor.segments[labeling_neighbor.segment_at_frame((s + e) // 2)][0]


def context_arrays(grid_labels, grid, point, utterance_id):
    """Context pattern for every segment and table, BOUNDARY where absent.
    Tables without a neighbor point are omitted."""
    lab = grid_labels[point][utterance_id]
    pats = np.asarray(lab.patterns, dtype=np.int64)
    L = len(pats)
    prev = np.full(L, BOUNDARY, dtype=np.int64)
    nxt = np.full(L, BOUNDARY, dtype=np.int64)
    prev[1:] = pats[:-1]
    nxt[:-1] = pats[1:]
    ctx = {"time_prev": prev, "time_next": nxt}
    central = np.asarray(lab.central_frames(), dtype=np.int64)
    for name, nb in grid.neighbors(point).items():
        if nb is None or nb not in grid_labels.labels:
            continue
        frame_labels = grid_labels[nb][utterance_id].frame_labels()
        ctx[name] = frame_labels[central]
    return pats, ctx


def estimate_bigrams(grid_labels, grid, cutoff=KATZ_CUTOFF):
    models = {}
    for point in _present(grid_labels, grid):
        n = point[1]
        neighbors = grid.neighbors(point)
        counts = {"time_prev": np.zeros((n, n), dtype=np.int64),
                  "time_next": np.zeros((n, n), dtype=np.int64)}
        for name, nb in neighbors.items():
            if nb is not None and nb in grid_labels.labels:
                counts[name] = np.zeros((nb[1], n), dtype=np.int64)
        uni = np.zeros(n, dtype=np.int64)
        for utt in grid_labels.utterances(point):
            pats, ctx = context_arrays(grid_labels, grid, point, utt)
            if pats.size and (pats.max() >= n or pats.min() < 0):
                raise ValidationError(f"{utt} at {point}: pattern index outside [0, {n})")
            np.add.at(uni, pats, 1)
            for name, c in ctx.items():
                ok = c != BOUNDARY
                if name in CROSS_TABLES and c[ok].max(initial=-1) >= counts[name].shape[0]:
                    raise ValidationError(f"{utt}: neighbor pattern outside vocabulary")
                np.add.at(counts[name], (c[ok], pats[ok]), 1)
        unigram = add_one_unigram(uni)
        tables, discounts = {}, {}
        for name, table_counts in counts.items():
            tables[name], discounts[name] = katz_table(table_counts, unigram, cutoff)
        models[point] = BigramModel(n, unigram, tables, counts, discounts)
    return models


def _present(grid_labels, grid):
    """Grid points that have labels; a failed point acts as a grid edge."""
    return [pt for pt in grid.points() if pt in grid_labels.labels]


def position_scores(model, contexts, log_tables=None):
    """Log of the six-factor product for every candidate w, for each
    segment: array (L, vocab)."""
    log_tables = log_tables or model.log_tables()
    L = len(next(iter(contexts.values())))
    score = np.zeros((L, model.vocab_size))
    for name, ctx in contexts.items():
        if name not in log_tables:
            continue
        ok = ctx != BOUNDARY
        score[ok] += log_tables[name][ctx[ok]]
    return score


def relabel_position(grid_labels, bigrams, point, utterance_id, l, grid):
    _, ctx = context_arrays(grid_labels, grid, point, utterance_id)
    ctx = {name: c[l:l + 1] for name, c in ctx.items()}
    return int(np.argmax(position_scores(bigrams[point], ctx)[0]))


@dataclass
class RelabelResult:
    labels: GridLabeling
    bigrams: dict
    changed: dict       # point -> number of segments whose pattern changed
    total: dict         # point -> number of segments


def relabel_pass(grid_labels, grid, cutoff=KATZ_CUTOFF):
    """Relabel every segment at every grid point. All decisions read the
    input labels only and are applied together; boundaries are unchanged."""
    bigrams = estimate_bigrams(grid_labels, grid, cutoff)
    out, changed, total = {}, {}, {}
    for point in _present(grid_labels, grid):
        model = bigrams[point]
        log_tables = model.log_tables()
        per_utt = {}
        n_changed = n_total = 0
        for utt in grid_labels.utterances(point):
            pats, ctx = context_arrays(grid_labels, grid, point, utt)
            new = np.argmax(position_scores(model, ctx, log_tables), axis=1)
            n_changed += int(np.sum(new != pats))
            n_total += len(pats)
            per_utt[utt] = grid_labels[point][utt].with_patterns(new.tolist())
        out[point] = per_utt
        changed[point], total[point] = n_changed, n_total
        logger.debug("relabel %s: %d/%d segments changed", point, n_changed, n_total)
    return RelabelResult(GridLabeling(out, relabeled=True), bigrams, changed, total)


def dump_bigrams(path, bigrams):
    with open(path, "w") as fh:
        for point, model in bigrams.items():
            for rec in model.dump():
                rec["point"] = f"{point[0]}x{point[1]}"
                fh.write(json.dumps(rec) + "\n")

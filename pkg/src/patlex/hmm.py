"""GMM-HMM acoustic patterns: initial labels, pattern-loop decoding and
label-constrained re-estimation.

A segment's score is the likelihood of its frames under one pattern HMM
entered in state 0 and exited from the last state, i.e. it includes the
final exit transition. Decoding adds ``log(1/n)`` for every pattern entry.
"""

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.special import logsumexp

from . import _kernels
from .errors import DecodeError, FormatError, NumericError, ValidationError

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"PLXM"
MODEL_VERSION = 1
LOOP_MIN, LOOP_MAX = 1e-3, 1.0 - 1e-3
SPLIT_OFFSET = 0.2
SPLIT_EM_ITERS = 2
KMEANS_ITERS = 20
_MIN_OCCUPANCY = 1e-8
_ABS_VAR_FLOOR = 1e-6
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Granularity:
    m: int
    n: int
    gaussians_per_state: int = 4

    def __post_init__(self):
        if self.m < 1 or self.n < 2 or self.gaussians_per_state < 1:
            raise ValidationError(f"invalid granularity {self}")

    @property
    def key(self):
        return f"{self.m}x{self.n}"


@dataclass(frozen=True)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    variance: np.ndarray


@dataclass
class PatternHMM:
    """One pattern's parameters. Arrays are indexed [state, component, dim]."""

    pattern_index: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    self_loop_prob: np.ndarray

    @property
    def num_states(self):
        return self.weights.shape[0]

    @property
    def states(self):
        return [[GaussianComponent(float(w), mu, var)
                 for w, mu, var in zip(self.weights[s], self.means[s], self.variances[s])]
                for s in range(self.num_states)]


@dataclass
class PatternSet:
    """All n patterns of one granularity, stored as stacked arrays:
    weights (n, m, G), means/variances (n, m, G, F), self_loop (n, m)."""

    granularity: Granularity
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    self_loop: np.ndarray

    def __post_init__(self):
        n, m, G, F = self.means.shape
        if (m, n) != (self.granularity.m, self.granularity.n):
            raise ValidationError(
                f"parameter shape (m={m}, n={n}) does not match {self.granularity}")
        if not np.allclose(self.weights.sum(axis=2), 1.0, atol=1e-9):
            raise ValidationError("mixture weights must sum to 1")

    @property
    def n(self):
        return self.granularity.n

    @property
    def m(self):
        return self.granularity.m

    @property
    def num_components(self):
        return self.means.shape[2]

    @property
    def dim(self):
        return self.means.shape[3]

    def pattern(self, i):
        return PatternHMM(i, self.weights[i], self.means[i], self.variances[i], self.self_loop[i])

    @property
    def patterns(self):
        return [self.pattern(i) for i in range(self.n)]

    @classmethod
    def from_patterns(cls, granularity, patterns):
        if [p.pattern_index for p in patterns] != list(range(len(patterns))):
            raise ValidationError("pattern indices must be exactly 0..n-1")
        return cls(granularity,
                   np.stack([p.weights for p in patterns]),
                   np.stack([p.means for p in patterns]),
                   np.stack([p.variances for p in patterns]),
                   np.stack([p.self_loop_prob for p in patterns]))

    def copy(self):
        return PatternSet(self.granularity, self.weights.copy(), self.means.copy(),
                          self.variances.copy(), self.self_loop.copy())

    def log_transitions(self):
        return np.log(self.self_loop), np.log1p(-self.self_loop)

    def state_loglik(self, frames):
        """Per-state emission log-likelihoods, shape (T, n, m)."""
        comp = _component_loglik(frames, self.weights, self.means, self.variances)
        return logsumexp(comp, axis=-1)

    def to_bytes(self):
        n, m, G, F = self.means.shape
        out = [MODEL_MAGIC, struct.pack("<5I", MODEL_VERSION, m, n, G, F)]
        for p in range(n):
            for s in range(m):
                block = np.concatenate([self.weights[p, s], self.means[p, s].ravel(),
                                        self.variances[p, s].ravel(), self.self_loop[p, s:s + 1]])
                out.append(block.astype("<f8").tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data, gaussians_per_state=None):
        if data[:4] != MODEL_MAGIC:
            raise FormatError(f"bad model magic {data[:4]!r}")
        version, m, n, G, F = struct.unpack_from("<5I", data, 4)
        if version != MODEL_VERSION:
            raise FormatError(f"unsupported model version {version}")
        per_state = G + 2 * G * F + 1
        body = np.frombuffer(data, dtype="<f8", offset=24)
        if body.size != n * m * per_state:
            raise FormatError("model payload size mismatch")
        body = body.reshape(n, m, per_state)
        weights = body[:, :, :G].copy()
        means = body[:, :, G:G + G * F].reshape(n, m, G, F).copy()
        variances = body[:, :, G + G * F:G + 2 * G * F].reshape(n, m, G, F).copy()
        self_loop = body[:, :, -1].copy()
        psi = Granularity(m, n, gaussians_per_state or G)
        return cls(psi, weights, means, variances, self_loop)

    def digest(self):
        return hashlib.sha256(self.to_bytes()).hexdigest()[:16]


def save_model(path, pattern_set):
    with open(path, "wb") as fh:
        fh.write(pattern_set.to_bytes())


def load_model(path, gaussians_per_state=None):
    with open(path, "rb") as fh:
        return PatternSet.from_bytes(fh.read(), gaussians_per_state)


def _component_loglik(frames, weights, means, variances):
    """log w + log N(x | mean, diag var) for every component: (T, *weights.shape)."""
    lead = weights.shape
    F = means.shape[-1]
    mu = means.reshape(-1, F)
    prec = 1.0 / variances.reshape(-1, F)
    const = -0.5 * (F * _LOG_2PI + np.log(variances.reshape(-1, F)).sum(axis=1)
                    + (mu * mu * prec).sum(axis=1))
    quad = -0.5 * ((frames * frames) @ prec.T) + frames @ (mu * prec).T
    with np.errstate(divide="ignore"):
        logw = np.log(weights.reshape(-1))
    return (quad + const + logw).reshape((frames.shape[0],) + lead)


@dataclass
class Labeling:
    utterance_id: str
    segments: list
    log_likelihood: float = 0.0

    def __post_init__(self):
        self.segments = [(int(p), int(s), int(e)) for p, s, e in self.segments]

    def __len__(self):
        return len(self.segments)

    @property
    def patterns(self):
        return [p for p, _, _ in self.segments]

    @property
    def num_frames(self):
        return self.segments[-1][2] if self.segments else 0

    def central_frames(self):
        return [(s + e) // 2 for _, s, e in self.segments]

    def segment_at_frame(self, frame):
        """Index of the segment that covers ``frame``."""
        ends = [e for _, _, e in self.segments]
        lo, hi = 0, len(ends)
        while lo < hi:
            mid = (lo + hi) // 2
            if ends[mid] <= frame:
                lo = mid + 1
            else:
                hi = mid
        if lo >= len(ends) or frame < 0:
            raise IndexError(f"frame {frame} outside {self.utterance_id}")
        return lo

    def frame_labels(self):
        out = np.empty(self.num_frames, dtype=np.int64)
        for p, s, e in self.segments:
            out[s:e] = p
        return out

    def validate(self, num_frames, min_length=1, n=None):
        if not self.segments:
            raise ValidationError(f"{self.utterance_id}: empty labeling")
        pos = 0
        for p, s, e in self.segments:
            if s != pos or e - s < min_length:
                raise ValidationError(
                    f"{self.utterance_id}: segment ({p}, {s}, {e}) breaks tiling "
                    f"(expected start {pos}, min length {min_length})")
            if p < 0 or (n is not None and p >= n):
                raise ValidationError(f"{self.utterance_id}: pattern index {p} out of range")
            pos = e
        if pos != num_frames:
            raise ValidationError(
                f"{self.utterance_id}: segments end at {pos}, utterance has {num_frames} frames")

    def with_patterns(self, patterns):
        return Labeling(self.utterance_id,
                        [(q, s, e) for q, (_, s, e) in zip(patterns, self.segments)],
                        self.log_likelihood)

    def to_json(self, relabeled=False):
        rec = {"utt": self.utterance_id, "segs": [list(seg) for seg in self.segments],
               "ll": self.log_likelihood}
        if relabeled:
            rec["relabeled"] = True
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line):
        rec = json.loads(line)
        return cls(rec["utt"], rec["segs"], rec.get("ll", 0.0))


def save_labels(path, labels, relabeled=False):
    with open(path, "w") as fh:
        for lab in labels:
            fh.write(lab.to_json(relabeled) + "\n")


def load_labels(path):
    with open(path) as fh:
        return [Labeling.from_json(line) for line in fh if line.strip()]


def split_usable(corpus, psi):
    """Utterances long enough for initialization (T >= 2m), and the rest."""
    keep, skipped = [], []
    for utt in corpus:
        (keep if utt.num_frames >= 2 * psi.m else skipped).append(utt.utterance_id)
    return keep, skipped


def chunk_bounds(num_frames, chunk):
    k = num_frames // chunk
    bounds = [(i * chunk, (i + 1) * chunk) for i in range(k)]
    bounds[-1] = (bounds[-1][0], num_frames)
    return bounds


def init_labels(corpus, psi, seed):
    """Initial labels: fixed-length chunks of 2m frames clustered by k-means
    on their mean vectors."""
    keep, skipped = split_usable(corpus, psi)
    for utt_id in skipped:
        logger.warning("skipping %s: fewer than %d frames", utt_id, 2 * psi.m)
    if not keep:
        raise ValidationError(f"no utterance has at least {2 * psi.m} frames")

    owners, bounds, means = [], [], []
    for utt_id in keep:
        frames = corpus[utt_id].frames
        for s, e in chunk_bounds(frames.shape[0], 2 * psi.m):
            owners.append(utt_id)
            bounds.append((s, e))
            means.append(frames[s:e].mean(axis=0))
    data = np.asarray(means)
    assign = _cluster(data, psi.n, seed)

    per_utt = {utt_id: [] for utt_id in keep}
    for utt_id, (s, e), c in zip(owners, bounds, assign):
        per_utt[utt_id].append((int(c), s, e))
    return [Labeling(utt_id, segs) for utt_id, segs in per_utt.items()]


def _cluster(data, k, seed):
    uniq, first, inverse = np.unique(data, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    if len(uniq) <= k:
        # fewer distinct points than clusters: one cluster per distinct point,
        # numbered by first appearance
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        return rank[inverse]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        _, labels = kmeans2(data, k, iter=KMEANS_ITERS, minit="++",
                            seed=np.random.default_rng(seed), missing="warn")
    return labels


def viterbi_decode(features, pattern_set):
    T = features.num_frames
    if T < pattern_set.m:
        raise DecodeError(
            f"{features.utterance_id}: {T} frames cannot fit a {pattern_set.m}-state pattern")
    emit = pattern_set.state_loglik(features.frames)
    log_stay, log_adv = pattern_set.log_transitions()
    score, pats, starts = _kernels.viterbi_loop(
        emit, log_stay, log_adv, -np.log(pattern_set.n))
    ends = list(starts[1:]) + [T]
    return Labeling(features.utterance_id, list(zip(pats, starts, ends)), float(score))


def decode_corpus(corpus, pattern_set, ids=None):
    ids = corpus.ids if ids is None else ids
    return [viterbi_decode(corpus[u], pattern_set) for u in ids]


def segment_logliks(features, pattern_set, labels):
    """Forward log-likelihood of every labeled segment."""
    labels.validate(features.num_frames, pattern_set.m, pattern_set.n)
    emit = pattern_set.state_loglik(features.frames)
    log_stay, log_adv = pattern_set.log_transitions()
    out = np.empty(len(labels))
    for i, (p, s, e) in enumerate(labels.segments):
        _, ll = _kernels.forward_backward(
            np.ascontiguousarray(emit[s:e, p]), np.array([0, e - s]), log_stay[p], log_adv[p])
        out[i] = ll[0]
    return out


def loglik(features, pattern_set, labels):
    return float(segment_logliks(features, pattern_set, labels).sum())


def path_score(features, pattern_set, labels):
    """Score of the best state path consistent with ``labels``, on the same
    scale as the log_likelihood reported by viterbi_decode."""
    labels.validate(features.num_frames, pattern_set.m, pattern_set.n)
    emit = pattern_set.state_loglik(features.frames)
    log_stay, log_adv = pattern_set.log_transitions()
    total = -np.log(pattern_set.n) * len(labels)
    for p, s, e in labels.segments:
        total += _kernels.segment_viterbi(np.ascontiguousarray(emit[s:e, p]),
                                          log_stay[p], log_adv[p])
    return float(total)


# --- re-estimation -----------------------------------------------------------

@dataclass
class _PatternData:
    frames: np.ndarray
    offsets: np.ndarray
    sq: np.ndarray = field(init=False)

    def __post_init__(self):
        self.sq = self.frames * self.frames

    @property
    def num_segments(self):
        return len(self.offsets) - 1


def variance_floor(corpus, ids=None):
    utts = corpus.utterances if ids is None else [corpus[u] for u in ids]
    var = np.concatenate([u.frames for u in utts]).var(axis=0)
    return np.maximum(1e-3 * var, _ABS_VAR_FLOOR)


def _gather(corpus, labels, psi):
    pieces = [[] for _ in range(psi.n)]
    for lab in labels:
        if lab.utterance_id not in corpus:
            raise ValidationError(f"labels reference unknown utterance {lab.utterance_id!r}")
        frames = corpus[lab.utterance_id].frames
        lab.validate(frames.shape[0], 1, None)
        for p, s, e in lab.segments:
            if p >= psi.n:
                raise ValidationError(
                    f"{lab.utterance_id}: pattern index {p} >= n={psi.n}")
            pieces[p].append(frames[s:e])
    data = []
    for segs in pieces:
        if not segs:
            data.append(None)
            continue
        lengths = np.array([len(x) for x in segs])
        offsets = np.concatenate([[0], np.cumsum(lengths)])
        data.append(_PatternData(np.concatenate(segs), offsets))
    return data


def _flat_start(d, m, floor, global_mean, global_var):
    """Single-Gaussian states from a uniform split of every segment."""
    F = global_mean.shape[0]
    means = np.tile(global_mean, (m, 1))
    variances = np.tile(np.maximum(global_var, floor), (m, 1))
    loop = np.full(m, 0.5)
    if d is None:
        return means, variances, loop
    state_frames = [[] for _ in range(m)]
    for a, b in zip(d.offsets[:-1], d.offsets[1:]):
        L = b - a
        cuts = (np.arange(m + 1) * L) // m
        for s in range(m):
            if cuts[s + 1] > cuts[s]:
                state_frames[s].append(d.frames[a + cuts[s]:a + cuts[s + 1]])
    nseg = d.num_segments
    for s in range(m):
        if not state_frames[s]:
            continue
        x = np.concatenate(state_frames[s])
        means[s] = x.mean(axis=0)
        variances[s] = np.maximum(x.var(axis=0), floor)
        stays = len(x) - nseg
        loop[s] = np.clip(stays / len(x), LOOP_MIN, LOOP_MAX) if stays > 0 else LOOP_MIN
    assert means.shape == (m, F)
    return means, variances, loop


def _em_step(d, weights, means, variances, loop, floor):
    """One Baum-Welch iteration for one pattern on fixed segments.
    Returns updated (weights, means, variances, loop) and the pre-update
    log-likelihood of the assigned data."""
    comp = _component_loglik(d.frames, weights, means, variances)      # (N, m, G)
    emit = logsumexp(comp, axis=-1)
    gamma, seg_ll = _kernels.forward_backward(
        emit, d.offsets, np.log(loop), np.log1p(-loop))
    ll = float(np.sum(seg_ll))
    with np.errstate(invalid="ignore"):
        post = np.exp(comp - emit[..., None])
    post = np.nan_to_num(post) * gamma[..., None]                       # (N, m, G)

    occ = post.sum(axis=0)                                              # (m, G)
    sum_x = np.einsum("nsg,nf->sgf", post, d.frames)
    sum_xx = np.einsum("nsg,nf->sgf", post, d.sq)
    new_w, new_mu, new_var = weights.copy(), means.copy(), variances.copy()
    for s in range(weights.shape[0]):
        if np.any(occ[s] < _MIN_OCCUPANCY):
            continue
        mu = sum_x[s] / occ[s][:, None]
        var = sum_xx[s] / occ[s][:, None] - mu * mu
        new_w[s] = occ[s] / occ[s].sum()
        new_mu[s] = mu
        new_var[s] = np.maximum(var, floor)
    state_occ = occ.sum(axis=1)
    new_loop = loop.copy()
    ok = state_occ > _MIN_OCCUPANCY
    new_loop[ok] = np.clip(1.0 - d.num_segments / state_occ[ok], LOOP_MIN, LOOP_MAX)
    return new_w, new_mu, new_var, new_loop, ll


def _assigned_loglik(d, weights, means, variances, loop):
    emit = logsumexp(_component_loglik(d.frames, weights, means, variances), axis=-1)
    _, seg_ll = _kernels.forward_backward(emit, d.offsets, np.log(loop), np.log1p(-loop))
    return float(np.sum(seg_ll))


def _split(weights, means, variances, target):
    """Split the heaviest components of every state until each has ``target``."""
    while weights.shape[1] < target:
        G = weights.shape[1]
        k = min(G, target - G)
        new_w, new_mu, new_var = [], [], []
        for s in range(weights.shape[0]):
            order = np.argsort(-weights[s], kind="stable")
            chosen = set(order[:k].tolist())
            w_s, mu_s, var_s = [], [], []
            for g in range(G):
                if g in chosen:
                    off = SPLIT_OFFSET * np.sqrt(variances[s, g])
                    w_s += [weights[s, g] / 2, weights[s, g] / 2]
                    mu_s += [means[s, g] - off, means[s, g] + off]
                    var_s += [variances[s, g], variances[s, g]]
                else:
                    w_s.append(weights[s, g])
                    mu_s.append(means[s, g])
                    var_s.append(variances[s, g])
            new_w.append(w_s)
            new_mu.append(mu_s)
            new_var.append(var_s)
        weights, means, variances = np.array(new_w), np.array(new_mu), np.array(new_var)
        yield weights, means, variances


def train_models(corpus, labels, psi, em_iters, prior=None, floor=None, trace=None):
    """Re-estimate every pattern on the frames of its labeled segments.

    Without ``prior`` the patterns are flat-started with one Gaussian per
    state and grown to ``psi.gaussians_per_state`` by binary splitting.
    With ``prior`` EM continues from the prior parameters. Patterns with no
    assigned segments keep their prior parameters.

    If ``trace`` is a list, one record per EM stage is appended:
    ``{"pattern": p, "G": G, "loglik": [ll_0, ..., ll_k]}`` where ll_0 is
    the assigned-data log-likelihood before the first iteration of the
    stage and ll_k after the last.
    """
    if em_iters < 1:
        raise ValidationError("em_iters must be >= 1")
    if prior is not None and (prior.m, prior.n) != (psi.m, psi.n):
        raise ValidationError(f"prior granularity {prior.granularity} != {psi}")
    data = _gather(corpus, labels, psi)
    ids = [lab.utterance_id for lab in labels]
    if floor is None:
        floor = variance_floor(corpus, ids)
    m, G = psi.m, psi.gaussians_per_state
    F = corpus.dim

    if prior is None:
        stacked = np.concatenate([corpus[u].frames for u in ids])
        gmean, gvar = stacked.mean(axis=0), stacked.var(axis=0)
        W = np.ones((psi.n, m, 1))
        MU = np.empty((psi.n, m, 1, F))
        VAR = np.empty((psi.n, m, 1, F))
        LOOP = np.empty((psi.n, m))
        for p in range(psi.n):
            mu, var, loop = _flat_start(data[p], m, floor, gmean, gvar)
            MU[p, :, 0], VAR[p, :, 0], LOOP[p] = mu, var, loop
    else:
        W, MU, VAR, LOOP = prior.weights, prior.means, prior.variances, prior.self_loop

    out_w, out_mu, out_var, out_loop = [], [], [], []
    for p in range(psi.n):
        w, mu, var, loop = W[p], MU[p], VAR[p], LOOP[p]
        d = data[p]
        if d is None:
            if w.shape[1] < G:
                *_, (w, mu, var) = _split(w, mu, var, G)
            out_w.append(w.copy())
            out_mu.append(mu.copy())
            out_var.append(var.copy())
            out_loop.append(loop.copy())
            continue
        w, mu, var, loop = _run_em(d, w, mu, var, loop, floor, em_iters, p, trace)
        for w, mu, var in _split(w, mu, var, G):
            w, mu, var, loop = _run_em(d, w, mu, var, loop, floor, SPLIT_EM_ITERS, p, trace)
        out_w.append(w)
        out_mu.append(mu)
        out_var.append(var)
        out_loop.append(loop)

    result = PatternSet(psi, np.stack(out_w), np.stack(out_mu), np.stack(out_var),
                        np.stack(out_loop))
    if not np.all(np.isfinite(result.means)) or not np.all(np.isfinite(result.variances)):
        raise NumericError(f"non-finite parameters after training {psi.key}")
    return result


def _run_em(d, w, mu, var, loop, floor, iters, p, trace):
    lls = []
    for _ in range(iters):
        w, mu, var, loop, ll = _em_step(d, w, mu, var, loop, floor)
        lls.append(ll)
    if trace is not None:
        lls.append(_assigned_loglik(d, w, mu, var, loop))
        trace.append({"pattern": p, "G": w.shape[1], "loglik": lls})
    return w, mu, var, loop

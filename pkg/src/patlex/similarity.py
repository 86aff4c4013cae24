"""Pattern-to-pattern similarity from a variational KL approximation.

KL between two pattern HMMs is the symmetric variational KL between their
state mixtures, states matched by index and summed. Similarity is
``exp(-KL / beta)``.
"""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import FormatError, ValidationError

SIM_MAGIC = b"PLXS"
SIM_VERSION = 1
DEFAULT_BETA = 100.0
_TINY = np.finfo(np.float64).tiny


def gaussian_kl(mean_a, var_a, mean_b, var_b):
    """KL(a || b) in nats for diagonal Gaussians. Broadcasts over leading axes."""
    mean_a, var_a = np.asarray(mean_a, float), np.asarray(var_a, float)
    mean_b, var_b = np.asarray(mean_b, float), np.asarray(var_b, float)
    diff = mean_a - mean_b
    terms = np.log(var_b / var_a) + (var_a + diff * diff) / var_b - 1.0
    return 0.5 * np.sum(terms, axis=-1)


def _pairwise_kl(means_a, vars_a, means_b, vars_b):
    """(Ga, Gb) matrix of KL(a_i || b_j)."""
    return gaussian_kl(means_a[:, None, :], vars_a[:, None, :],
                       means_b[None, :, :], vars_b[None, :, :])


def gmm_kl_variational(f, g):
    """Variational approximation of KL(f || g) between two diagonal GMMs.

    ``f`` and ``g`` are (weights (G,), means (G, F), variances (G, F)).
    Negative values from rounding are clamped to zero.
    """
    wf, mf, vf = (np.asarray(x, float) for x in f)
    wg, mg, vg = (np.asarray(x, float) for x in g)
    self_kl = _pairwise_kl(mf, vf, mf, vf)
    cross_kl = _pairwise_kl(mf, vf, mg, vg)
    if wf.size == 1 and wg.size == 1:
        return max(float(cross_kl[0, 0]), 0.0)
    num = logsumexp(-self_kl, b=wf[None, :], axis=1)
    den = logsumexp(-cross_kl, b=wg[None, :], axis=1)
    return max(float(np.sum(wf * (num - den))), 0.0)


def _state(pattern, s):
    return pattern.weights[s], pattern.means[s], pattern.variances[s]


def hmm_kl(p, q):
    """Symmetric state-wise KL between two pattern HMMs of equal length."""
    if p.num_states != q.num_states:
        raise ValidationError(
            f"state count mismatch: {p.num_states} vs {q.num_states}")
    total = 0.0
    for s in range(p.num_states):
        a, b = _state(p, s), _state(q, s)
        total += gmm_kl_variational(a, b) + gmm_kl_variational(b, a)
    return total


def similarity_from_kl(kl, beta):
    if not beta > 0:
        raise ValidationError(f"beta must be positive, got {beta}")
    return np.maximum(np.exp(-np.asarray(kl, float) / beta), _TINY)


@dataclass
class SimilarityMatrix:
    granularity: object
    beta: float
    entries: np.ndarray

    @property
    def n(self):
        return self.entries.shape[0]

    def to_bytes(self):
        iu = np.triu_indices(self.n)
        return (SIM_MAGIC + struct.pack("<I", self.n)
                + self.entries[iu].astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, data, granularity=None, beta=DEFAULT_BETA):
        if data[:4] != SIM_MAGIC:
            raise FormatError(f"bad similarity magic {data[:4]!r}")
        (n,) = struct.unpack_from("<I", data, 4)
        upper = np.frombuffer(data, dtype="<f8", offset=8)
        if upper.size != n * (n + 1) // 2:
            raise FormatError("similarity payload size mismatch")
        entries = np.zeros((n, n))
        entries[np.triu_indices(n)] = upper
        entries = entries + np.triu(entries, 1).T
        return cls(granularity, beta, entries)


def kl_matrix(pattern_set):
    patterns = pattern_set.patterns
    n = len(patterns)
    kl = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            kl[i, j] = kl[j, i] = hmm_kl(patterns[i], patterns[j])
    return kl


def similarity_matrix(pattern_set, beta=DEFAULT_BETA):
    entries = similarity_from_kl(kl_matrix(pattern_set), beta)
    np.fill_diagonal(entries, 1.0)
    return SimilarityMatrix(pattern_set.granularity, float(beta), entries)


def save_similarity(path, sim):
    with open(path, "wb") as fh:
        fh.write(sim.to_bytes())


def load_similarity(path, granularity=None, beta=DEFAULT_BETA):
    with open(path, "rb") as fh:
        return SimilarityMatrix.from_bytes(fh.read(), granularity, beta)

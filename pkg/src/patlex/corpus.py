"""Feature files, corpus manifests and word annotations.

Binary feature layout (``.plxf``)::

    b"PLXF" | u32 T | u32 F | T*F float32, little-endian, row-major

Manifests are JSON-lines. A line is either an utterance record
``{"utt": id, "features": path}`` or an annotation record
``{"utt": id, "word": w, "start": s, "end": e}`` (frames, end exclusive).
Relative feature paths resolve against the manifest's directory.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorpusIOError, FormatError, ValidationError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"PLXF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sII")


@dataclass
class FeatureSequence:
    utterance_id: str
    frames: np.ndarray
    frame_period_ms: float = 10.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] < 1:
            raise ValidationError(
                f"{self.utterance_id}: frames must be a non-empty T x F matrix, "
                f"got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise ValidationError(f"{self.utterance_id}: non-finite feature values")
        if not self.frame_period_ms > 0:
            raise ValidationError("frame_period_ms must be positive")
        self.frames = frames

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def dim(self):
        return self.frames.shape[1]


@dataclass(frozen=True)
class WordAnnotation:
    utterance_id: str
    word: str
    start_frame: int
    end_frame: int


@dataclass
class Corpus:
    utterances: list
    annotations: Optional[list] = None
    _index: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self._index = {}
        for i, utt in enumerate(self.utterances):
            if utt.utterance_id in self._index:
                raise ValidationError(f"duplicate utterance id {utt.utterance_id!r}")
            self._index[utt.utterance_id] = i
        dims = {u.dim for u in self.utterances}
        if len(dims) > 1:
            raise FormatError(f"feature dimension mismatch across utterances: {sorted(dims)}")
        bad = [a for a in (self.annotations or []) if not self._annotation_ok(a)]
        if bad:
            listing = "; ".join(
                f"{a.utterance_id}:{a.word}[{a.start_frame},{a.end_frame})" for a in bad)
            raise ValidationError(f"annotation out of range: {listing}")

    def _annotation_ok(self, ann):
        i = self._index.get(ann.utterance_id)
        if i is None:
            return False
        return 0 <= ann.start_frame < ann.end_frame <= self.utterances[i].num_frames

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def __getitem__(self, utterance_id):
        return self.utterances[self._index[utterance_id]]

    def __contains__(self, utterance_id):
        return utterance_id in self._index

    @property
    def ids(self):
        return [u.utterance_id for u in self.utterances]

    @property
    def dim(self):
        return self.utterances[0].dim if self.utterances else 0

    def subset(self, ids):
        keep = set(ids)
        anns = None
        if self.annotations is not None:
            anns = [a for a in self.annotations if a.utterance_id in keep]
        return Corpus([u for u in self.utterances if u.utterance_id in keep], anns)

    def global_variance(self):
        stacked = np.concatenate([u.frames for u in self.utterances], axis=0)
        return stacked.var(axis=0)


def write_features(path, seq):
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    T, F = frames.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, T, F))
        fh.write(frames.tobytes())


def read_features(path, utterance_id=None):
    """Read a ``.plxf`` binary file, or a CSV file (one frame per row)."""
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    utt = utterance_id if utterance_id is not None else path.stem
    if path.suffix.lower() == ".csv":
        try:
            frames = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        if frames.size == 0:
            raise FormatError(f"{path}: empty CSV feature file")
        return FeatureSequence(utt, frames)

    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, T, F = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if T == 0 or F == 0:
        raise FormatError(f"{path}: empty feature matrix (T={T}, F={F})")
    expected = _HEADER.size + 4 * T * F
    if len(data) < expected:
        raise FormatError(f"{path}: truncated payload ({len(data)} < {expected} bytes)")
    frames = np.frombuffer(data, dtype="<f4", count=T * F, offset=_HEADER.size)
    return FeatureSequence(utt, frames.reshape(T, F).astype(np.float64))


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    base = path.parent
    utterances, annotations = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if "features" in rec:
                fpath = Path(rec["features"])
                if not fpath.is_absolute():
                    fpath = base / fpath
                utterances.append(read_features(fpath, utterance_id=str(rec["utt"])))
            elif "word" in rec:
                try:
                    annotations.append(WordAnnotation(
                        str(rec["utt"]), str(rec["word"]), int(rec["start"]), int(rec["end"])))
                except KeyError as exc:
                    raise FormatError(f"{path}:{lineno}: missing field {exc}") from None
            else:
                raise FormatError(f"{path}:{lineno}: unrecognised record")
    corpus = Corpus(utterances, annotations or None)
    logger.debug("loaded %d utterances, %d annotations from %s",
                 len(utterances), len(annotations), path)
    return corpus


def write_manifest(path, corpus, feature_dir="features"):
    """Write every utterance as ``.plxf`` under ``feature_dir`` (relative to
    the manifest) and emit the manifest itself."""
    path = Path(path)
    fdir = path.parent / feature_dir
    fdir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for utt in corpus.utterances:
            rel = Path(feature_dir) / f"{utt.utterance_id}.plxf"
            write_features(path.parent / rel, utt)
            fh.write(json.dumps({"utt": utt.utterance_id, "features": rel.as_posix()}) + "\n")
        for a in corpus.annotations or []:
            fh.write(json.dumps({"utt": a.utterance_id, "word": a.word,
                                 "start": a.start_frame, "end": a.end_frame}) + "\n")

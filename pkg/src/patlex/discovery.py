"""Iterative pattern discovery over a granularity grid.

Plain discovery alternates re-estimation and decoding at every grid point
independently. The enhanced loop inserts one relabeling pass over all grid
points between each decode and the following re-estimation.
"""

import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hmm
from .errors import PatlexError, ValidationError
from .grid import GranularityGrid, GridLabeling, parse_point, point_key
from .relabel import relabel_pass

logger = logging.getLogger(__name__)

HISTORY_FILE = "history.json"


@dataclass
class DiscoveryConfig:
    t_max: int = 10
    em_iters: int = 3
    relabel_enabled: bool = False
    seed: int = 0
    convergence: float = 0.01
    jobs: int = 1

    def __post_init__(self):
        if self.t_max < 1:
            raise ValidationError("t_max must be >= 1")
        if self.em_iters < 1:
            raise ValidationError("em_iters must be >= 1")

    def to_dict(self):
        return asdict(self)


def point_seed(seed, point):
    return (int(seed) ^ zlib.crc32(point_key(point).encode())) & 0xFFFFFFFF


def change_ratio(old, new):
    """Fraction of new segments whose pattern differs from the old label at
    the segment's central frame."""
    changed = total = 0
    for lab in new:
        ref = old[lab.utterance_id].frame_labels()
        central = np.asarray(lab.central_frames())
        changed += int(np.sum(ref[central] != np.asarray(lab.patterns)))
        total += len(lab)
    return changed / total if total else 0.0


@dataclass
class GridModels:
    grid: GranularityGrid
    sets: dict
    labels: GridLabeling
    history: dict
    relabeled: GridLabeling = None
    errors: dict = field(default_factory=dict)
    skipped: list = field(default_factory=list)
    iterations: int = 0
    converged: dict = field(default_factory=dict)
    convergence: float = 0.01

    @property
    def points(self):
        return [pt for pt in self.grid.points() if pt in self.sets]

    def final_loglik(self, point):
        return self.history[point][-1]["loglik"]


@dataclass
class PointResult:
    pattern_set: hmm.PatternSet
    labels: list
    history: list
    skipped: list


def _map(fn, items, jobs):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _guarded(fn):
    def run(point):
        try:
            return point, fn(point), None
        except (PatlexError, FloatingPointError, np.linalg.LinAlgError) as exc:
            logger.error("grid point %s failed: %s", point_key(point), exc)
            return point, None, f"{type(exc).__name__}: {exc}"
    return run


def usable_ids(corpus, grid):
    psi = hmm.Granularity(max(grid.temporal_values), min(grid.phonetic_values),
                          grid.gaussians_per_state)
    keep, skipped = hmm.split_usable(corpus, psi)
    for utt in skipped:
        logger.warning("skipping %s: shorter than %d frames", utt, 2 * psi.m)
    if not keep:
        raise ValidationError("corpus is empty after skipping short utterances")
    return keep, skipped


def _initial_iteration(corpus, grid, cfg, ids, point):
    psi = grid.granularity(point)
    init = hmm.init_labels(corpus, psi, point_seed(cfg.seed, point))
    floor = hmm.variance_floor(corpus, ids)
    model = hmm.train_models(corpus, init, psi, cfg.em_iters, floor=floor)
    decoded = hmm.decode_corpus(corpus, model, ids)
    ratio = change_ratio({lab.utterance_id: lab for lab in init}, decoded)
    return model, decoded, ratio


def _reestimate(corpus, grid, cfg, ids, prior, train_labels, prev_labels, point):
    psi = grid.granularity(point)
    floor = hmm.variance_floor(corpus, ids)
    model = hmm.train_models(corpus, train_labels, psi, cfg.em_iters, prior=prior, floor=floor)
    decoded = hmm.decode_corpus(corpus, model, ids)
    return model, decoded, change_ratio(prev_labels, decoded)


def _record(gm, point, model, decoded, ratio, iteration, relabel_changed=None):
    gm.sets[point] = model
    gm.labels.labels[point] = {lab.utterance_id: lab for lab in decoded}
    entry = {"iteration": iteration,
             "loglik": float(sum(lab.log_likelihood for lab in decoded)),
             "change_ratio": ratio}
    if relabel_changed is not None:
        entry["relabel_changed"] = relabel_changed
    gm.history.setdefault(point, []).append(entry)
    gm.converged[point] = ratio < gm.convergence


def discover_grid(corpus, grid, cfg, resume=None, checkpoint=None):
    """Run discovery at every grid point.

    ``resume`` continues a partially completed GridModels; ``checkpoint`` is
    called with the GridModels after every outer iteration.
    """
    ids, skipped = usable_ids(corpus, grid)
    corpus = corpus.subset(ids)
    if resume is None:
        gm = GridModels(grid, {}, GridLabeling({}), {}, skipped=skipped,
                        convergence=cfg.convergence)
        results = _map(_guarded(lambda pt: _initial_iteration(corpus, grid, cfg, ids, pt)),
                       grid.points(), cfg.jobs)
        for point, res, err in results:
            if err:
                gm.errors[point] = err
            else:
                _record(gm, point, *res, iteration=1)
        gm.iterations = 1
        if checkpoint:
            checkpoint(gm)
    else:
        gm = resume
        gm.convergence = cfg.convergence

    while gm.iterations < cfg.t_max:
        if cfg.relabel_enabled:
            if all(gm.converged.get(pt, True) for pt in gm.points):
                break
            enhance_step(gm, corpus, cfg, ids)
        else:
            active = [pt for pt in gm.points if not gm.converged[pt]]
            if not active:
                break
            t = gm.iterations + 1
            prev = {pt: gm.labels[pt] for pt in active}
            results = _map(_guarded(lambda pt: _reestimate(
                corpus, grid, cfg, ids, gm.sets[pt], list(prev[pt].values()), prev[pt], pt)),
                active, cfg.jobs)
            for point, res, err in results:
                if err:
                    _drop(gm, point, err)
                else:
                    _record(gm, point, *res, iteration=t)
            gm.iterations = t
        if checkpoint:
            checkpoint(gm)
    return gm


def _drop(gm, point, err):
    gm.errors[point] = err
    gm.sets.pop(point, None)
    gm.labels.labels.pop(point, None)
    gm.converged.pop(point, None)


def enhance_step(gm, corpus, cfg, ids=None):
    """Relabel the current decodes across the grid, re-estimate every set on
    the relabeled sequences, and decode again."""
    ids = ids if ids is not None else gm.labels.utterances()
    relabeled = relabel_pass(gm.labels, gm.grid)
    gm.relabeled = relabeled.labels
    t = gm.iterations + 1
    points = gm.points
    prev = {pt: gm.labels[pt] for pt in points}
    results = _map(_guarded(lambda pt: _reestimate(
        corpus, gm.grid, cfg, ids, gm.sets[pt],
        list(relabeled.labels[pt].values()), prev[pt], pt)), points, cfg.jobs)
    for point, res, err in results:
        if err:
            _drop(gm, point, err)
        else:
            _record(gm, point, *res, iteration=t, relabel_changed=relabeled.changed[point])
    gm.iterations = t
    return gm


def discover(corpus, psi, cfg):
    """Discovery at a single granularity."""
    grid = GranularityGrid((psi.m,), (psi.n,), psi.gaussians_per_state)
    gm = discover_grid(corpus, grid, cfg)
    point = (psi.m, psi.n)
    if point in gm.errors:
        raise ValidationError(gm.errors[point])
    labels = list(gm.labels[point].values())
    return PointResult(gm.sets[point], labels, gm.history[point], gm.skipped)


# --- run directory -----------------------------------------------------------

def save_run(run_dir, gm, extra=None):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    for point in gm.points:
        pdir = run_dir / point_key(point)
        pdir.mkdir(exist_ok=True)
        _atomic_write(pdir / "model.plxm", gm.sets[point].to_bytes())
        hmm.save_labels(pdir / "labels.jsonl", gm.labels[point].values())
        if gm.relabeled is not None and point in gm.relabeled.labels:
            hmm.save_labels(pdir / "relabeled.jsonl", gm.relabeled[point].values(),
                            relabeled=True)
    history = {
        "grid": gm.grid.to_dict(),
        "iterations": gm.iterations,
        "points": {point_key(pt): h for pt, h in gm.history.items() if pt in gm.sets},
        "converged": {point_key(pt): bool(v) for pt, v in gm.converged.items()},
        "errors": {point_key(pt): e for pt, e in gm.errors.items()},
        "skipped": gm.skipped,
    }
    if extra:
        history.update(extra)
    _atomic_write(run_dir / HISTORY_FILE,
                  (json.dumps(history, indent=1, sort_keys=True) + "\n").encode())


def load_run(run_dir):
    run_dir = Path(run_dir)
    with open(run_dir / HISTORY_FILE) as fh:
        history = json.load(fh)
    g = history["grid"]
    grid = GranularityGrid(tuple(g["temporal_values"]), tuple(g["phonetic_values"]),
                           g["gaussians_per_state"])
    sets, labels, relabeled, hist, conv = {}, {}, {}, {}, {}
    for key, entries in history["points"].items():
        point = parse_point(key)
        pdir = run_dir / key
        sets[point] = hmm.load_model(pdir / "model.plxm", grid.gaussians_per_state)
        labels[point] = {lab.utterance_id: lab for lab in hmm.load_labels(pdir / "labels.jsonl")}
        if (pdir / "relabeled.jsonl").exists():
            relabeled[point] = {lab.utterance_id: lab
                                for lab in hmm.load_labels(pdir / "relabeled.jsonl")}
        hist[point] = entries
        conv[point] = history["converged"].get(key, False)
    gm = GridModels(grid, sets, GridLabeling(labels), hist,
                    relabeled=GridLabeling(relabeled, relabeled=True) if relabeled else None,
                    errors={parse_point(k): v for k, v in history.get("errors", {}).items()},
                    skipped=history.get("skipped", []),
                    iterations=history["iterations"], converged=conv)
    return gm, history


def _atomic_write(path, data):
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)

"""``patlex`` command line.

Subcommands: features, synth, discover, search, eval impurity, eval map.
Logs go to stderr as one JSON object per line; tabular results go to stdout
and, for search and eval, into the run directory.
"""

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__, evaluation, hmm, report, retrieval, similarity, synth
from .corpus import FEATURE_VERSION, Corpus, WordAnnotation, load_manifest, read_features, write_manifest
from .discovery import DiscoveryConfig, discover_grid, load_run, save_run
from .errors import CorpusIOError, NumericError, PatlexError, ValidationError
from .grid import GranularityGrid, point_key
from .mfcc import wav_to_features

logger = logging.getLogger("patlex")

CONFIG_FILE = "config.json"
DISCOVER_DONE = "discover.complete"
SIMILARITY_DONE = "similarity.complete"

DEFAULTS = {
    "manifest": None,
    "run_dir": None,
    "grid": {"temporal_values": [3], "phonetic_values": [50], "gaussians_per_state": 4},
    "t_max": 10,
    "em_iters": 3,
    "relabel": False,
    "seed": 0,
    "beta": similarity.DEFAULT_BETA,
    "convergence": 0.01,
}


class JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"ts": round(record.created, 3), "level": record.levelname.lower(),
               "logger": record.name, "event": getattr(record, "event", "message"),
               "msg": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, sort_keys=True)


def log_event(event, msg="", level=logging.INFO, **fields):
    logger.log(level, msg or event, extra={"event": event, "fields": fields})


def setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read_json(path):
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def _atomic_json(path, obj):
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


# --- features -----------------------------------------------------------------

def _load_sequence(path):
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    if path.suffix.lower() == ".wav":
        return wav_to_features(path)
    return read_features(path)


def cmd_features(args):
    paths = []
    for p in map(Path, args.inputs):
        if p.is_dir():
            paths += sorted(p.glob("*.wav"))
        elif p.exists():
            paths.append(p)
        else:
            raise CorpusIOError(p)
    if not paths:
        raise ValidationError("no audio files found")
    utts = []
    for p in paths:
        utts.append(wav_to_features(p))
        log_event("features", utt=utts[-1].utterance_id, frames=utts[-1].num_frames)
    annotations = None
    if args.annotations:
        annotations = []
        with open(args.annotations) as fh:
            for line in fh:
                if line.strip():
                    r = json.loads(line)
                    annotations.append(WordAnnotation(r["utt"], r["word"], int(r["start"]),
                                                      int(r["end"])))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(out / "manifest.jsonl", Corpus(utts, annotations))
    log_event("done", manifest=str(out / "manifest.jsonl"), utterances=len(utts))
    return 0


# --- synth --------------------------------------------------------------------

def cmd_synth(args):
    spec = _read_json(args.config) if args.config else {}
    for key in ("seed", "n_utterances", "n_phones", "n_words", "noise", "spread", "dim"):
        val = getattr(args, key)
        if val is not None:
            spec[key] = val
    try:
        cfg = synth.SynthConfig.from_dict(spec)
    except TypeError as exc:
        raise ValidationError(f"bad synth config: {exc}") from None
    data = synth.generate(cfg)
    out = synth.write_synth(args.out, data, cfg)
    log_event("done", out=str(out), utterances=len(data.corpus.ids), words=len(data.words))
    return 0


# --- discover -----------------------------------------------------------------

def resolve_config(args):
    cfg = json.loads(json.dumps(DEFAULTS))
    if args.config:
        loaded = _read_json(args.config)
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        base = Path(args.config).parent
        for key in ("manifest", "run_dir"):
            if loaded.get(key) and not Path(loaded[key]).is_absolute():
                loaded[key] = str(base / loaded[key])
        grid = dict(cfg["grid"], **loaded.pop("grid", {}))
        cfg.update(loaded)
        cfg["grid"] = grid
    flags = {"manifest": args.manifest, "run_dir": args.run, "t_max": args.t_max,
             "em_iters": args.em_iters, "relabel": args.relabel, "seed": args.seed,
             "beta": args.beta, "convergence": args.convergence}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    for key, val in (("temporal_values", args.m), ("phonetic_values", args.n),
                     ("gaussians_per_state", args.gaussians)):
        if val is not None:
            cfg["grid"][key] = val
    if not cfg["manifest"]:
        raise ValidationError("no corpus manifest given (--manifest or config)")
    if not cfg["run_dir"]:
        raise ValidationError("no run directory given (--run or config)")
    cfg["manifest"] = str(Path(cfg["manifest"]).resolve())
    cfg["run_dir"] = str(Path(cfg["run_dir"]).resolve())
    if not Path(cfg["manifest"]).exists():
        raise CorpusIOError(cfg["manifest"])
    if not cfg["beta"] > 0:
        raise ValidationError("beta must be positive")
    return cfg


def _grid(cfg):
    g = cfg["grid"]
    return GranularityGrid(tuple(g["temporal_values"]), tuple(g["phonetic_values"]),
                           int(g["gaussians_per_state"]))


def _discovery_config(cfg, jobs):
    return DiscoveryConfig(t_max=int(cfg["t_max"]), em_iters=int(cfg["em_iters"]),
                           relabel_enabled=bool(cfg["relabel"]), seed=int(cfg["seed"]),
                           convergence=float(cfg["convergence"]), jobs=jobs)


def cmd_discover(args):
    cfg = resolve_config(args)
    grid = _grid(cfg)
    dcfg = _discovery_config(cfg, args.jobs)
    run = Path(cfg["run_dir"])
    run.mkdir(parents=True, exist_ok=True)
    stored = run / CONFIG_FILE
    if stored.exists() and _read_json(stored) != cfg:
        if not args.force:
            raise ValidationError(f"{run} holds a run with a different configuration; "
                                  "use a new directory or --force")
        for marker in (DISCOVER_DONE, SIMILARITY_DONE, "history.json"):
            (run / marker).unlink(missing_ok=True)
    _atomic_json(stored, cfg)

    if (run / DISCOVER_DONE).exists():
        log_event("stage_skipped", stage="discover", run=str(run))
    else:
        corpus = load_manifest(cfg["manifest"])
        log_event("corpus", utterances=len(corpus), dim=corpus.dim)
        resume = None
        if (run / "history.json").exists():
            resume, _ = load_run(run)
            log_event("resume", iteration=resume.iterations)
        started = time.monotonic()

        def checkpoint(gm):
            save_run(run, gm)
            for point in gm.points:
                entry = gm.history[point][-1]
                if entry["iteration"] == gm.iterations:
                    log_event("iteration", point=point_key(point), **entry)
            for point, err in gm.errors.items():
                log_event("point_failed", level=logging.ERROR, point=point_key(point), error=err)

        gm = discover_grid(corpus, grid, dcfg, resume=resume, checkpoint=checkpoint)
        save_run(run, gm)
        if not gm.points:
            raise NumericError("every grid point failed")
        (run / DISCOVER_DONE).write_text(f"{gm.iterations}\n")
        log_event("stage_done", stage="discover", iterations=gm.iterations,
                  seconds=round(time.monotonic() - started, 2),
                  failed=[point_key(p) for p in gm.errors])

    if (run / SIMILARITY_DONE).exists():
        log_event("stage_skipped", stage="similarity")
    else:
        gm, _ = load_run(run)
        for point in gm.points:
            sim = similarity.similarity_matrix(gm.sets[point], cfg["beta"])
            similarity.save_similarity(run / point_key(point) / "similarity.plxs", sim)
        (run / SIMILARITY_DONE).write_text("ok\n")
        log_event("stage_done", stage="similarity", points=len(gm.points))
    return 0


# --- search -------------------------------------------------------------------

class RunIndex:
    """Models, similarity matrices and decoded archive of a finished run."""

    def __init__(self, run_dir, manifest=None):
        self.run = Path(run_dir)
        if not (self.run / DISCOVER_DONE).exists() or not (self.run / SIMILARITY_DONE).exists():
            raise ValidationError(f"{self.run} has no completed discover run")
        self.config = _read_json(self.run / CONFIG_FILE)
        self.corpus = load_manifest(manifest or self.config["manifest"])
        gm, _ = load_run(self.run)
        self.gm = gm
        self.points = gm.points
        self.sets = {pt: gm.sets[pt] for pt in self.points}
        self.sims = {pt: similarity.load_similarity(self.run / point_key(pt) / "similarity.plxs",
                                                    gm.sets[pt].granularity, self.config["beta"])
                     for pt in self.points}
        max_m = max(m for m, _ in self.points)
        docs = self.corpus.subset([u.utterance_id for u in self.corpus if u.num_frames >= max_m])
        self.archive = {pt: retrieval.decode_archive(docs, self.sets[pt],
                                                     self.run / point_key(pt) / "archive.jsonl")
                        for pt in self.points}

    def search(self, query):
        return retrieval.search(query, self.archive, self.sets, self.sims)


def _write_ranked(path, ranked, points, top=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        retrieval.write_tsv(fh, ranked, points, top)


def cmd_search(args):
    index = RunIndex(args.run)
    query = _load_sequence(args.query)
    ranked = index.search(query)
    retrieval.write_tsv(sys.stdout, ranked, index.points, args.top)
    _write_ranked(index.run / "search" / f"{query.utterance_id}.tsv", ranked, index.points, args.top)
    log_event("search", query=query.utterance_id, documents=len(ranked.results))
    return 0


# --- eval ---------------------------------------------------------------------

def _labels_for(run, gm, point, relabeled):
    if relabeled:
        if gm.relabeled is None or point not in gm.relabeled.labels:
            raise ValidationError(f"no relabeled sequences stored for {point_key(point)}")
        return list(gm.relabeled[point].values())
    return list(gm.labels[point].values())


def cmd_eval_impurity(args):
    run = Path(args.run)
    if not (run / DISCOVER_DONE).exists():
        raise ValidationError(f"{run} has no completed discover run")
    cfg = _read_json(run / CONFIG_FILE)
    corpus = load_manifest(args.manifest or cfg["manifest"])
    if not corpus.annotations:
        raise ValidationError("corpus has no word annotations")
    gm, _ = load_run(run)
    words = evaluation.select_words(corpus.annotations, args.words)
    if not words:
        raise ValidationError(f"selector {args.words!r} matched no words")
    rows, per_point, per_word = [], {}, {w: [] for w in words}
    for point in gm.points:
        labels = _labels_for(run, gm, point, args.relabeled)
        vals = []
        for w in words:
            rep = evaluation.word_impurity(labels, corpus.annotations, w)
            rows.append((w, point, rep))
            vals.append(rep.impurity)
            per_word[w].append(rep.impurity)
        per_point[point] = sum(vals) / len(vals)
    reports = run / "reports"
    reports.mkdir(exist_ok=True)
    suffix = "_relabeled" if args.relabeled else ""
    lines = ["word\tm\tn\tcount\tdistinct\timpurity"]
    lines += [f"{w}\t{pt[0]}\t{pt[1]}\t{r.realizations}\t{r.distinct_sequences}\t{r.impurity!r}"
              for w, pt, r in rows]
    text = "\n".join(lines) + "\n"
    (reports / f"impurity{suffix}.tsv").write_text(text)
    sys.stdout.write(text)
    report.grid_heatmap(reports / f"impurity_grid{suffix}.png", gm.grid, per_point,
                        f"mean Gini impurity ({len(words)} words)", "impurity", cmap="magma_r")
    report.bar_chart(reports / f"impurity_words{suffix}.png", words,
                     [sum(v) / len(v) for v in per_word.values()],
                     "impurity per word, mean over grid", "impurity")
    report.history_plot(reports / "loglik_history.png", gm.history)
    log_event("eval_impurity", words=len(words), points=len(gm.points),
              mean=sum(per_point.values()) / len(per_point))
    return 0


def load_queries(path):
    path = Path(path)
    if not path.exists():
        raise CorpusIOError(path)
    queries = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                fpath = Path(rec["features"])
                if not fpath.is_absolute():
                    fpath = path.parent / fpath
                seq = _load_sequence(fpath)
                seq.utterance_id = str(rec["query"])
                queries.append(seq)
    return queries


def cmd_eval_map(args):
    index = RunIndex(args.run, args.manifest)
    judgments = evaluation.load_judgments(args.judgments)
    qpath = Path(args.queries) if args.queries else Path(args.judgments).parent / "queries.jsonl"
    queries = [q for q in load_queries(qpath) if q.utterance_id in judgments]
    missing = set(judgments) - {q.utterance_id for q in queries}
    if missing:
        raise ValidationError(f"no query features for {sorted(missing)}")
    runs = {}
    for q in queries:
        runs[q.utterance_id] = ranked = index.search(q)
        _write_ranked(index.run / "search" / f"{q.utterance_id}.tsv", ranked, index.points)
    aps = evaluation.per_query_ap(runs, judgments)
    overall = evaluation.mean_average_precision(runs, judgments)
    per_set = evaluation.per_set_map(runs, judgments)

    reports = index.run / "reports"
    reports.mkdir(exist_ok=True)
    lines = ["query\tap"] + [f"{q}\t{ap!r}" for q, ap in aps.items()] + [f"MAP\t{overall!r}"]
    text = "\n".join(lines) + "\n"
    (reports / "map.tsv").write_text(text)
    (reports / "map_per_set.tsv").write_text(
        "m\tn\tmap\n" + "".join(f"{m}\t{n}\t{v!r}\n" for (m, n), v in per_set.items())
        + f"fused\tfused\t{overall!r}\n")
    sys.stdout.write(text)
    report.grid_heatmap(reports / "map_grid.png", index.gm.grid, per_set,
                        f"single-set MAP (fused {overall:.3f})", "MAP")
    report.bar_chart(reports / "ap_queries.png", list(aps), list(aps.values()),
                     "average precision per query", "AP", reference=overall)
    log_event("eval_map", queries=len(aps), map=overall,
              best_single=max(per_set.values()))
    return 0


# --- entry point --------------------------------------------------------------

def version_text():
    return (f"patlex {__version__}\n"
            f"features PLXF v{FEATURE_VERSION}\n"
            f"model PLXM v{hmm.MODEL_VERSION}\n"
            f"similarity PLXS v{similarity.SIM_VERSION}\n")


class _Version(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, default=argparse.SUPPRESS, **kw)

    def __call__(self, parser, namespace, values, option_string=None):
        sys.stdout.write(version_text())
        parser.exit()


def build_parser():
    p = argparse.ArgumentParser(prog="patlex", description=__doc__.splitlines()[0])
    p.add_argument("--version", action=_Version, help="print versions of the tool and file formats")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                   help="worker cap for parallel stages (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("features", help="MFCC features from 16 kHz mono WAV files")
    f.add_argument("inputs", nargs="+", help="WAV files or directories of them")
    f.add_argument("--out", required=True)
    f.add_argument("--annotations", help="JSON-lines word annotations to include")
    f.set_defaults(func=cmd_features)

    s = sub.add_parser("synth", help="generate a synthetic corpus with planted words")
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="JSON synth config")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-utterances", dest="n_utterances", type=int)
    s.add_argument("--n-phones", dest="n_phones", type=int)
    s.add_argument("--n-words", dest="n_words", type=int)
    s.add_argument("--noise", type=float)
    s.add_argument("--spread", type=float)
    s.add_argument("--dim", type=int)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("discover", help="discover pattern sets over a granularity grid")
    d.add_argument("--config", help="JSON run config; flags override it")
    d.add_argument("--manifest")
    d.add_argument("--run", help="run directory")
    d.add_argument("--m", type=_int_list, help="states per pattern, e.g. 3,5")
    d.add_argument("--n", type=_int_list, help="patterns per set, e.g. 50,100")
    d.add_argument("--gaussians", type=int)
    d.add_argument("--t-max", dest="t_max", type=int)
    d.add_argument("--em-iters", dest="em_iters", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--beta", type=float)
    d.add_argument("--convergence", type=float)
    d.add_argument("--relabel", dest="relabel", action="store_true", default=None)
    d.add_argument("--no-relabel", dest="relabel", action="store_false")
    d.add_argument("--force", action="store_true", help="restart a run whose config changed")
    d.set_defaults(func=cmd_discover)

    q = sub.add_parser("search", help="rank archive utterances for a spoken query")
    q.add_argument("--run", required=True)
    q.add_argument("--query", required=True, help=".wav, .plxf or .csv")
    q.add_argument("--top", type=int)
    q.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="impurity and MAP reports")
    esub = e.add_subparsers(dest="eval_command", required=True)
    ei = esub.add_parser("impurity")
    ei.add_argument("--run", required=True)
    ei.add_argument("--words", default="all", help="top:K, band:LO-HI or all")
    ei.add_argument("--manifest", help="annotated manifest (default: the run's)")
    ei.add_argument("--relabeled", action="store_true", help="score the relabeled sequences")
    ei.set_defaults(func=cmd_eval_impurity)
    em = esub.add_parser("map")
    em.add_argument("--run", required=True)
    em.add_argument("--judgments", required=True)
    em.add_argument("--queries", help="JSON-lines query list (default: queries.jsonl beside the judgments)")
    em.add_argument("--manifest")
    em.set_defaults(func=cmd_eval_map)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    if args.jobs < 1:
        log_event("error", "--jobs must be >= 1", level=logging.ERROR, type="ValidationError")
        return 2
    try:
        return args.func(args)
    except PatlexError as exc:
        code = exc.exit_code
        err = exc
    except (FloatingPointError, ArithmeticError) as exc:
        code, err = 4, exc
    except OSError as exc:
        code, err = 3, exc
    except (KeyError, json.JSONDecodeError) as exc:
        code, err = 2, exc
    log_event("error", str(err), level=logging.ERROR, type=type(err).__name__, exit_code=code)
    return code


if __name__ == "__main__":
    sys.exit(main())

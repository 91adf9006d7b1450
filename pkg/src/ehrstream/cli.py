"""Command-line entry point for the event-stream pipeline.

Every command takes a JSON config (``--config``) plus flag overrides, writes
its outputs into one directory via temp-then-rename, and leaves a
``<command>.manifest.json`` recording the resolved config, its hash, seeds,
tool version and input/output digests.  Passing a manifest back as
``--config`` replays the run.

Exit status: 0 success, 1 validation/config error (JSON report on stderr),
2 usage error (unknown command or bad flag).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from ._io import OutputSet, canonical_json, sha256_file, sha256_json
from .evaluation import (
    FEW_SHOT_KS,
    SingleClassError,
    TaskData,
    bootstrap_compare,
    context_window,
    evaluate_predictions,
    featurize_many,
    few_shot,
    stratified_brier,
    stratified_compare,
    train_head,
    zero_shot_prob,
)
from .evaluation.features import read_embeddings
from .events import (
    DatasetSplit,
    IngestError,
    TaskLabel,
    read_events,
    read_labels,
    split as split_patients,
    write_events_csv,
    write_events_jsonl,
    write_labels,
)
from .ngram import NGramModel, read_logprobs, write_logprobs
from .perplexity import median_by_position, per_token_ppl, strided_scores
from .properties import (
    histogram,
    metric_rows,
    quartiles_by_task,
    task_metric_table,
    task_metric_values,
    write_metric_rows,
)
from .synth import (
    CodeBook,
    ConfigError,
    LabelModel,
    SynthConfig,
    generate_labels,
    generate_patient,
    sample_event_counts,
)
from .tokenizer import (
    EncodingError,
    Vocabulary,
    att_days,
    build_vocabulary,
    encode_corpus,
    read_token_sequences,
    write_token_sequences,
)

log = logging.getLogger("ehrstream")

OUT_ENV = "EHRSTREAM_OUT"
REQUIRED = object()

# Per-command config schema: key -> (default, kind).  kind "path" marks an
# input file that must exist; "seed" marks a required explicit seed.
SCHEMAS: dict[str, dict[str, tuple[Any, str]]] = {
    "synth": {
        "seed": (REQUIRED, "seed"),
        "synth": ({}, "dict"),
        "labels": ([], "list"),
        "split": ([0.8, 0.1, 0.1], "list"),
        "format": ("jsonl", "str"),
    },
    "ingest": {
        "events": (REQUIRED, "path"),
        "strict": (False, "bool"),
        "format": ("jsonl", "str"),
        "split": (None, "list"),
        "seed": (None, "seed"),
    },
    "vocab": {
        "events": (REQUIRED, "path"),
        "split": (None, "path"),
        "top_k": (1000, "int"),
        "att": (False, "bool"),
    },
    "encode": {
        "events": (REQUIRED, "path"),
        "vocab": (REQUIRED, "path"),
        "att": (None, "bool"),
    },
    "metrics": {
        "events": (REQUIRED, "path"),
        "labels": (None, "path"),
        "min_events": (0, "int"),
        "bins": (50, "int"),
        "scale": ("linear", "str"),
    },
    "fit-lm": {
        "tokens": (REQUIRED, "path"),
        "vocab": (REQUIRED, "path"),
        "split": (None, "path"),
        "order": (3, "int"),
        "kappa": (0.1, "float"),
    },
    "ppl": {
        "tokens": (None, "path"),
        "model": (None, "path"),
        "logprobs": (None, "path"),
        "split": (None, "path"),
        "context_len": (512, "int"),
        "stride": (32, "int"),
        "ema_span": (250, "int"),
    },
    "eval": {
        "tokens": (REQUIRED, "path"),
        "labels": (REQUIRED, "path"),
        "split": (REQUIRED, "path"),
        "vocab": (REQUIRED, "path"),
        "featurizer": ("bag", "str"),
        "model": (None, "path"),
        "embeddings": (None, "path"),
        "model_id": ("model", "str"),
        "context_len": (512, "int"),
        "l2_grid": (None, "list"),
        "bootstrap_n": (1000, "int"),
        "seed": (REQUIRED, "seed"),
    },
    "fewshot": {
        "tokens": (REQUIRED, "path"),
        "labels": (REQUIRED, "path"),
        "split": (REQUIRED, "path"),
        "vocab": (REQUIRED, "path"),
        "featurizer": ("bag", "str"),
        "model": (None, "path"),
        "embeddings": (None, "path"),
        "model_id": ("model", "str"),
        "context_len": (512, "int"),
        "l2_grid": (None, "list"),
        "ks": (list(FEW_SHOT_KS), "list"),
        "n_seeds": (5, "int"),
        "seed": (REQUIRED, "seed"),
    },
    "zeroshot": {
        "tokens": (REQUIRED, "path"),
        "labels": (REQUIRED, "path"),
        "vocab": (REQUIRED, "path"),
        "model": (REQUIRED, "path"),
        "split": (None, "path"),
        "tasks": (REQUIRED, "dict"),
        "model_id": ("model", "str"),
        "context_len": (512, "int"),
        "n_timelines": (20, "int"),
        "temperature": (1.0, "float"),
        "max_tokens": (4096, "int"),
        "bootstrap_n": (1000, "int"),
        "seed": (REQUIRED, "seed"),
    },
    "strat": {
        "predictions": (REQUIRED, "path"),
        "events": (REQUIRED, "path"),
        "labels": (REQUIRED, "path"),
        "metric": ("rr1", "str"),
        "min_events": (0, "int"),
        "partition": ("test", "str"),
    },
    "compare": {
        "predictions_a": (REQUIRED, "path"),
        "predictions_b": (REQUIRED, "path"),
        "events": (None, "path"),
        "labels": (None, "path"),
        "metric": ("rr1", "str"),
        "min_events": (0, "int"),
        "partition": ("test", "str"),
        "bootstrap_n": (1000, "int"),
        "seed": (REQUIRED, "seed"),
    },
}
COMMANDS = tuple(SCHEMAS)
HASH_EXCLUDED = ("out", "threads")
STRAT_METRICS = {"rr1": "rr1", "irregularity-std": "irregularity_std", "irregularity_std": "irregularity_std"}


class CliError(Exception):
    def __init__(self, kind: str, message: str, **detail):
        super().__init__(message)
        self.kind = kind
        self.detail = detail


# ---------------------------------------------------------------------------
# config resolution


def _check_kind(key: str, value: Any, kind: str) -> Any:
    if value is None:
        return None
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "seed": lambda v: isinstance(v, int) and not isinstance(v, bool) and v >= 0,
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "path": lambda v: isinstance(v, str),
        "list": lambda v: isinstance(v, list),
        "dict": lambda v: isinstance(v, dict),
    }[kind]
    if not ok(value):
        raise CliError("config", f"config key {key!r} must be of type {kind}", key=key)
    return float(value) if kind == "float" else value


def resolve_config(command: str, raw: dict[str, Any]) -> dict[str, Any]:
    schema = SCHEMAS[command]
    unknown = sorted(set(raw) - set(schema) - set(HASH_EXCLUDED))
    if unknown:
        raise CliError("config", f"unknown config keys for {command}: {unknown}", keys=unknown)
    cfg: dict[str, Any] = {}
    for key, (default, kind) in schema.items():
        if key in raw:
            value = _check_kind(key, raw[key], kind)
        elif default is REQUIRED:
            what = "seed" if kind == "seed" else "config key"
            raise CliError("config", f"missing required {what} {key!r}", key=key)
        else:
            value = default
        if kind == "path" and value is not None:
            p = Path(value)
            if not p.is_file():
                raise CliError("missing_input", f"input file not found: {value}", key=key, path=value)
            value = str(p.resolve())
        cfg[key] = value
    return cfg


def load_config_file(path: str, command: str) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise CliError("missing_input", f"config file not found: {path}", path=path) from None
    except json.JSONDecodeError as e:
        raise CliError("config", f"config is not valid JSON: {e}", path=path) from None
    if not isinstance(obj, dict):
        raise CliError("config", "config must be a JSON object")
    if "command" in obj and "config" in obj:
        # a manifest from an earlier run
        if obj["command"] != command:
            raise CliError("config", f"manifest is for command {obj['command']!r}, not {command!r}")
        obj = dict(obj["config"])
    return obj


# ---------------------------------------------------------------------------
# helpers


def _load_split(path: str | None) -> DatasetSplit | None:
    if path is None:
        return None
    with open(path, encoding="utf-8") as fh:
        return DatasetSplit.from_json(json.load(fh))


def _write_split_json(sp: DatasetSplit) -> str:
    return json.dumps(sp.to_json(), sort_keys=True, indent=1) + "\n"


def _load_predictions(path: str) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, rec in enumerate(csv.DictReader(fh), start=2):
            try:
                rows.append({
                    "task": rec["task"],
                    "patient_id": rec["patient_id"],
                    "prediction_time": int(rec["prediction_time"]),
                    "split": rec["split"],
                    "label": rec["label"] == "1",
                    "prob": float(rec["prob"]),
                })
            except (KeyError, ValueError) as e:
                raise CliError("input", f"{path} row {i}: bad prediction row ({e})", row=i) from None
    return rows


PRED_COLUMNS = ["task", "patient_id", "prediction_time", "split", "label", "prob"]


def _write_predictions(rows: list[dict], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(PRED_COLUMNS)
    for r in rows:
        w.writerow([r["task"], r["patient_id"], r["prediction_time"], r["split"],
                    int(r["label"]), repr(float(r["prob"]))])


def _json_text(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def _task_features(cfg: dict, n_vocab: int):
    """Feature matrix per labelled row, grouped by task and split part."""
    seqs = {s.patient_id: s for s in read_token_sequences(cfg["tokens"])}
    labels = read_labels(cfg["labels"])
    sp = _load_split(cfg["split"])
    mode = cfg["featurizer"]
    lm = NGramModel.load(cfg["model"]) if cfg["model"] else None
    if mode == "lm" and lm is None:
        raise CliError("config", "featurizer 'lm' needs a model path")
    emb = read_embeddings(cfg["embeddings"]) if cfg["embeddings"] else None
    if mode == "external" and emb is None:
        raise CliError("config", "featurizer 'external' needs an embeddings path")
    if mode not in ("bag", "lm", "external"):
        raise CliError("config", f"unknown featurizer {mode!r}")
    by_task: dict[str, dict[str, list[TaskLabel]]] = {}
    for lab in labels:
        part = sp.part_of(lab.patient_id)
        if part is None:
            continue
        by_task.setdefault(lab.task_name, {"train": [], "val": [], "test": []})[part].append(lab)
    out = {}
    for task in sorted(by_task):
        parts = {}
        for part, labs in by_task[task].items():
            windows = []
            ext = [] if emb is not None else None
            for lab in labs:
                seq = seqs.get(lab.patient_id)
                windows.append([] if seq is None else context_window(seq, lab.prediction_time, cfg["context_len"]))
                if ext is not None:
                    key = (lab.patient_id, lab.prediction_time)
                    if key not in emb:
                        raise CliError("input", f"no embedding for {key}")
                    ext.append(emb[key])
            dim = n_vocab if emb is None else len(next(iter(emb.values())))
            X, _ = featurize_many(windows, dim, mode, lm, ext)
            y = np.array([lab.label for lab in labs], dtype=bool)
            parts[part] = (labs, X, y)
        out[task] = parts
    return out


def _l2_grid(cfg: dict):
    from .evaluation import DEFAULT_L2_GRID

    return tuple(cfg["l2_grid"]) if cfg["l2_grid"] else DEFAULT_L2_GRID


# ---------------------------------------------------------------------------
# commands


def _gen_chunk(args):
    cfg_json, seed, lo, hi, counts = args
    cfg = SynthConfig.from_json(cfg_json)
    book = CodeBook.build(cfg)
    return [generate_patient(cfg, seed, i, counts[i - lo], book) for i in range(lo, hi)]


def cmd_synth(cfg: dict, out: OutputSet, threads: int) -> None:
    try:
        sc = SynthConfig.from_json(cfg["synth"])
        models = [LabelModel.from_json(m) for m in cfg["labels"]]
    except TypeError as e:
        raise CliError("config", str(e)) from None
    if cfg["format"] not in ("jsonl", "csv"):
        raise CliError("config", f"unknown format {cfg['format']!r}")
    seed = cfg["seed"]
    counts = sample_event_counts(sc, seed)
    n = sc.n_patients
    if threads > 1 and n > 1:
        bounds = np.linspace(0, n, min(threads * 4, n) + 1).astype(int)
        jobs = [(sc.to_json(), seed, int(a), int(b), counts[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            corpus = [tl for chunk in pool.map(_gen_chunk, jobs) for tl in chunk]
    else:
        book = CodeBook.build(sc)
        corpus = [generate_patient(sc, seed, i, counts[i], book) for i in range(n)]
    with out.open(f"events.{cfg['format']}") as fh:
        (write_events_jsonl if cfg["format"] == "jsonl" else write_events_csv)(corpus, fh)
    sp = split_patients([tl.patient_id for tl in corpus], tuple(cfg["split"]), seed)
    out.write_text("split.json", _write_split_json(sp))
    if models:
        ls = generate_labels(corpus, models, seed, sc)
        with out.open("labels.csv") as fh:
            write_labels(ls.labels, fh)
        out.write_text("label_truth.json", ls.truth_json())


def cmd_ingest(cfg: dict, out: OutputSet, threads: int) -> None:
    timelines = read_events(cfg["events"], strict=cfg["strict"])
    if cfg["format"] not in ("jsonl", "csv"):
        raise CliError("config", f"unknown format {cfg['format']!r}")
    with out.open(f"events.{cfg['format']}") as fh:
        (write_events_jsonl if cfg["format"] == "jsonl" else write_events_csv)(timelines, fh)
    if cfg["split"] is not None:
        if cfg["seed"] is None:
            raise CliError("config", "splitting needs an explicit seed", key="seed")
        sp = split_patients([tl.patient_id for tl in timelines], tuple(cfg["split"]), cfg["seed"])
        out.write_text("split.json", _write_split_json(sp))


def cmd_vocab(cfg: dict, out: OutputSet, threads: int) -> None:
    timelines = read_events(cfg["events"])
    sp = _load_split(cfg["split"])
    if sp is not None:
        timelines = [tl for tl in timelines if tl.patient_id in sp.train]
    vocab = build_vocabulary(timelines, cfg["top_k"], with_att=cfg["att"])
    out.write_text("vocab.json", vocab.dumps())


def cmd_encode(cfg: dict, out: OutputSet, threads: int) -> None:
    vocab = Vocabulary.load(cfg["vocab"])
    att = vocab.has_att if cfg["att"] is None else cfg["att"]
    seqs = encode_corpus(read_events(cfg["events"]), vocab, with_att=att)
    with out.open("tokens.jsonl") as fh:
        write_token_sequences(seqs, fh)


def cmd_metrics(cfg: dict, out: OutputSet, threads: int) -> None:
    timelines = read_events(cfg["events"])
    if cfg["scale"] not in ("linear", "log10"):
        raise CliError("config", f"unknown scale {cfg['scale']!r}")
    if cfg["labels"]:
        by_id = {tl.patient_id: tl for tl in timelines}
        labels = read_labels(cfg["labels"])
        table = task_metric_table(by_id, labels, cfg["min_events"])
        rows = sorted(
            (pid, task, name, v)
            for task, by_pid in table.items()
            for pid, m in by_pid.items()
            for name, v in m.items()
        )
    else:
        rows = metric_rows(timelines, min_events=cfg["min_events"])
    with out.open("metrics.csv") as fh:
        write_metric_rows(rows, fh)
    by_metric: dict[str, list[float]] = {}
    for _, _, name, v in rows:
        by_metric.setdefault(name, []).append(v)
    for name in sorted(by_metric):
        vals = by_metric[name]
        if cfg["scale"] == "log10":
            vals = [v for v in vals if v > 0]
        h = histogram(vals, cfg["bins"], cfg["scale"], name)
        with out.open(f"hist_{name}.csv") as fh:
            h.write_csv(fh)


def cmd_fit_lm(cfg: dict, out: OutputSet, threads: int) -> None:
    vocab = Vocabulary.load(cfg["vocab"])
    sp = _load_split(cfg["split"])
    seqs = read_token_sequences(cfg["tokens"])
    if sp is not None:
        seqs = [s for s in seqs if s.patient_id in sp.train]
    model = NGramModel.fit(
        (s.token_ids for s in seqs),
        order=cfg["order"],
        vocab_size=len(vocab),
        kappa=cfg["kappa"],
        bos_id=vocab.special("[BOS]"),
        eos_id=None,
    )
    with out.open("model.json") as fh:
        model.dump(fh)


def cmd_ppl(cfg: dict, out: OutputSet, threads: int) -> None:
    sp = _load_split(cfg["split"])
    if cfg["logprobs"]:
        rows = read_logprobs(cfg["logprobs"])
    else:
        if not (cfg["tokens"] and cfg["model"]):
            raise CliError("config", "ppl needs either logprobs or tokens and model")
        model = NGramModel.load(cfg["model"])
        rows = []
        for s in read_token_sequences(cfg["tokens"]):
            if sp is not None and s.patient_id not in sp.test:
                continue
            rows.append((s.patient_id, strided_scores(model, s.token_ids, cfg["context_len"], cfg["stride"])))
        with out.open("logprobs.jsonl") as fh:
            write_logprobs(rows, fh)
    if sp is not None:
        rows = [r for r in rows if r[0] in sp.test]
    if not rows:
        raise CliError("input", "no sequences to score")
    curve = median_by_position((per_token_ppl(lp) for _, lp in rows), ema_span=cfg["ema_span"])
    with out.open("ppl.csv") as fh:
        curve.write_csv(fh)


def cmd_eval(cfg: dict, out: OutputSet, threads: int) -> None:
    vocab = Vocabulary.load(cfg["vocab"])
    data = _task_features(cfg, len(vocab))
    reports, preds = [], []
    for task, parts in data.items():
        (_, Xtr, ytr), (_, Xva, yva), (labs_te, Xte, yte) = parts["train"], parts["val"], parts["test"]
        try:
            head = train_head(Xtr, ytr, Xva, yva, _l2_grid(cfg))
        except SingleClassError as e:
            reports.append({"task": task, "model_id": cfg["model_id"], "skipped": str(e)})
            continue
        for part in ("train", "val", "test"):
            labs, X, y = parts[part]
            if not labs:
                continue
            probs = head.predict_proba(X)
            for lab, p in zip(labs, probs):
                preds.append({"task": task, "patient_id": lab.patient_id,
                              "prediction_time": lab.prediction_time, "split": part,
                              "label": lab.label, "prob": float(p)})
        if not labs_te:
            reports.append({"task": task, "model_id": cfg["model_id"], "skipped": "empty test set"})
            continue
        rep = evaluate_predictions(head.predict_proba(Xte), yte, task=task, model_id=cfg["model_id"],
                                   n_bootstrap=cfg["bootstrap_n"], seed=cfg["seed"])
        rep.extra = {"l2_lambda": head.l2_lambda}
        reports.append(rep.to_json())
    with out.open("predictions.csv") as fh:
        _write_predictions(preds, fh)
    out.write_text("report.json", _json_text({"reports": reports}))


def cmd_fewshot(cfg: dict, out: OutputSet, threads: int) -> None:
    vocab = Vocabulary.load(cfg["vocab"])
    data = _task_features(cfg, len(vocab))
    ks = [int(k) for k in cfg["ks"]]
    if not ks or any(k < 1 for k in ks):
        raise CliError("config", "ks must be positive integers")
    results = []
    for task, parts in data.items():
        td = TaskData(task, parts["train"][1], parts["train"][2], parts["val"][1], parts["val"][2],
                      parts["test"][1], parts["test"][2])
        for k in ks:
            runs = []
            for s in range(cfg["n_seeds"]):
                try:
                    rep = few_shot(td, k, cfg["seed"] + s, _l2_grid(cfg), model_id=cfg["model_id"])
                except SingleClassError as e:
                    runs = None
                    results.append({"task": task, "k": k, "skipped": str(e)})
                    break
                runs.append({"seed": cfg["seed"] + s, "auroc": rep.auroc, "brier": rep.brier,
                             "l2_lambda": rep.extra["l2_lambda"]})
            if runs is None:
                continue
            au = [r["auroc"] for r in runs if r["auroc"] is not None]
            results.append({
                "task": task,
                "k": k,
                "model_id": cfg["model_id"],
                "mean_auroc": float(np.mean(au)) if au else None,
                "mean_brier": float(np.mean([r["brier"] for r in runs])),
                "runs": runs,
            })
    out.write_text("fewshot.json", _json_text({"results": results}))


def cmd_zeroshot(cfg: dict, out: OutputSet, threads: int) -> None:
    vocab = Vocabulary.load(cfg["vocab"])
    lm = NGramModel.load(cfg["model"])
    seqs = {s.patient_id: s for s in read_token_sequences(cfg["tokens"])}
    labels = read_labels(cfg["labels"])
    sp = _load_split(cfg["split"])
    gaps = {vocab.att(name): att_days(name) for name in vocab_att_gap_names(vocab)}
    reports, preds = [], []
    for task in sorted(cfg["tasks"]):
        spec = cfg["tasks"][task]
        if not isinstance(spec, dict) or "codes" not in spec:
            raise CliError("config", f"zero-shot task {task!r} needs a 'codes' list")
        pos = sorted({i for c in spec["codes"] for i in vocab.ids_for_code(c)})
        if not pos:
            raise CliError("config", f"zero-shot task {task!r}: no vocabulary tokens for its codes")
        ht, hd = spec.get("horizon_tokens"), spec.get("horizon_days")
        if (ht is None) == (hd is None):
            raise CliError("config", f"zero-shot task {task!r} needs exactly one of horizon_tokens/horizon_days")
        if hd is not None and not gaps:
            raise CliError("config", "a day horizon needs a vocabulary with ATT tokens")
        labs = [lab for lab in labels if lab.task_name == task
                and (sp is None or lab.patient_id in sp.test)]
        probs, ys = [], []
        for i, lab in enumerate(labs):
            seq = seqs.get(lab.patient_id)
            window = [] if seq is None else context_window(seq, lab.prediction_time, cfg["context_len"])
            p = zero_shot_prob(lm, window, pos, horizon_tokens=ht, horizon_days=hd, att_days=gaps,
                               n_timelines=cfg["n_timelines"], seed=cfg["seed"] * 1_000_003 + i,
                               temperature=cfg["temperature"], max_tokens=cfg["max_tokens"])
            probs.append(p)
            ys.append(lab.label)
            preds.append({"task": task, "patient_id": lab.patient_id, "prediction_time": lab.prediction_time,
                          "split": "test" if sp is not None else "all", "label": lab.label, "prob": p})
        if not labs:
            reports.append({"task": task, "model_id": cfg["model_id"], "skipped": "no labels"})
            continue
        rep = evaluate_predictions(probs, ys, task=task, model_id=cfg["model_id"],
                                   n_bootstrap=cfg["bootstrap_n"], seed=cfg["seed"])
        reports.append(rep.to_json())
    with out.open("zeroshot_predictions.csv") as fh:
        _write_predictions(preds, fh)
    out.write_text("zeroshot_report.json", _json_text({"reports": reports}))


def vocab_att_gap_names(vocab: Vocabulary) -> list[str]:
    if not vocab.has_att:
        return []
    return [t.name for t in vocab.tokens if t.kind == "att" and t.name not in ("VS", "VE")]


def _quartiles(cfg: dict, rows: list[dict]):
    metric = STRAT_METRICS.get(cfg["metric"])
    if metric is None:
        raise CliError("config", f"unknown stratification metric {cfg['metric']!r}")
    by_id = {tl.patient_id: tl for tl in read_events(cfg["events"])}
    wanted = {(r["task"], r["patient_id"], r["prediction_time"]) for r in rows}
    labels = [lab for lab in read_labels(cfg["labels"])
              if (lab.task_name, lab.patient_id, lab.prediction_time) in wanted]
    return quartiles_by_task(task_metric_values(by_id, labels, metric, cfg["min_events"]))


def _select(rows: list[dict], partition: str) -> list[dict]:
    return [r for r in rows if partition == "all" or r["split"] == partition]


def cmd_strat(cfg: dict, out: OutputSet, threads: int) -> None:
    rows = _select(_load_predictions(cfg["predictions"]), cfg["partition"])
    q = _quartiles(cfg, rows)
    kept = [(r["task"], r["patient_id"], r["prob"], r["label"]) for r in rows
            if r["patient_id"] in q.get(r["task"], {})]
    table = stratified_brier(kept, q)
    res = table.to_json()
    res["metric"] = STRAT_METRICS[cfg["metric"]]
    res["n_rows"] = len(kept)
    res["n_excluded_undefined"] = len(rows) - len(kept)
    out.write_text("strat.json", _json_text(res))
    with out.open("strat.csv") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quartile", "mean_brier"])
        for name, v in res["cells"].items():
            w.writerow([name, repr(v)])


def cmd_compare(cfg: dict, out: OutputSet, threads: int) -> None:
    ra = _select(_load_predictions(cfg["predictions_a"]), cfg["partition"])
    rb = _select(_load_predictions(cfg["predictions_b"]), cfg["partition"])
    key = lambda r: (r["task"], r["patient_id"], r["prediction_time"])
    bmap = {key(r): r for r in rb}
    if len(bmap) != len(ra) or any(key(r) not in bmap for r in ra):
        raise CliError("input", "prediction files do not cover the same examples")
    ra = sorted(ra, key=key)
    rb = [bmap[key(r)] for r in ra]
    res: dict[str, Any] = {"tasks": {}}
    for task in sorted({r["task"] for r in ra}):
        ia = [i for i, r in enumerate(ra) if r["task"] == task]
        pa = [ra[i]["prob"] for i in ia]
        pb = [rb[i]["prob"] for i in ia]
        y = [ra[i]["label"] for i in ia]
        res["tasks"][task] = {}
        for metric in ("auroc", "brier"):
            if metric == "auroc" and len(set(y)) < 2:
                continue
            r = bootstrap_compare(pa, pb, y, metric, cfg["bootstrap_n"], cfg["seed"])
            res["tasks"][task][metric] = r.to_json()
    if cfg["events"] and cfg["labels"]:
        q = _quartiles(cfg, ra)
        keep = [i for i, r in enumerate(ra) if r["patient_id"] in q.get(r["task"], {})]
        rows_a = [(ra[i]["task"], ra[i]["patient_id"], ra[i]["prob"], ra[i]["label"]) for i in keep]
        rows_b = [(rb[i]["task"], rb[i]["patient_id"], rb[i]["prob"], rb[i]["label"]) for i in keep]
        res["stratified"] = {
            "metric": STRAT_METRICS[cfg["metric"]],
            "a": stratified_brier(rows_a, q).cells,
            "b": stratified_brier(rows_b, q).cells,
            "quartiles": stratified_compare(rows_a, rows_b, q, cfg["bootstrap_n"], cfg["seed"]),
        }
    out.write_text("compare.json", _json_text(res))


HANDLERS: dict[str, Callable[[dict, OutputSet, int], None]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "vocab": cmd_vocab,
    "encode": cmd_encode,
    "metrics": cmd_metrics,
    "fit-lm": cmd_fit_lm,
    "ppl": cmd_ppl,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "zeroshot": cmd_zeroshot,
    "strat": cmd_strat,
    "compare": cmd_compare,
}


# ---------------------------------------------------------------------------
# driver


def seeds_of(cfg: dict) -> dict[str, int]:
    return {k: v for k, v in cfg.items() if SCHEMAS_KIND.get(k) == "seed" and v is not None}


SCHEMAS_KIND = {k: kind for schema in SCHEMAS.values() for k, (_, kind) in schema.items()}


def run(command: str, raw_config: dict[str, Any], out_dir: str | Path, threads: int = 1) -> dict:
    """Run one command; returns the manifest.  Raises CliError on bad input."""
    if command not in HANDLERS:
        raise CliError("usage", f"unknown command {command!r}")
    if threads < 1:
        raise CliError("config", "threads must be >= 1")
    cfg = resolve_config(command, raw_config)
    inputs = {k: v for k, v in cfg.items() if SCHEMAS[command][k][1] == "path" and v is not None}
    input_hashes = {k: sha256_file(v) for k, v in sorted(inputs.items())}
    out = OutputSet(out_dir)
    try:
        HANDLERS[command](cfg, out, threads)
        outputs = {p.name: sha256_file(out.temp_path(p)) for p in out.names}
        finals = out.commit()
    except BaseException:
        out.abort()
        raise
    manifest = {
        "command": command,
        "config": cfg,
        "config_hash": sha256_json(cfg),
        "seeds": seeds_of(cfg),
        "version": __version__,
        "inputs": input_hashes,
        "outputs": outputs,
    }
    mout = OutputSet(out_dir)
    mout.write_text(f"{command}.manifest.json", json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    mout.commit()
    log.info("%s wrote %d files to %s", command, len(finals), out_dir)
    return manifest


OVERRIDES = [
    # flag, config key, argparse kwargs
    ("--events", "events", {}),
    ("--labels", "labels", {}),
    ("--vocab", "vocab", {}),
    ("--tokens", "tokens", {}),
    ("--model", "model", {}),
    ("--split-file", "split", {}),
    ("--predictions", "predictions", {}),
    ("--top-k", "top_k", {"type": int}),
    ("--context-len", "context_len", {"type": int}),
    ("--seed", "seed", {"type": int}),
    ("--bootstrap-n", "bootstrap_n", {"type": int}),
    ("--stride", "stride", {"type": int}),
    ("--ema-span", "ema_span", {"type": int}),
    ("--metric", "metric", {"choices": ["rr1", "irregularity-std"]}),
    ("--min-events", "min_events", {"type": int}),
]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ehrstream", description="Event-stream EHR modelling pipeline.")
    ap.add_argument("--version", action="version", version=f"ehrstream {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", help="JSON config or manifest from an earlier run")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or .)")
        p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
        p.add_argument("--att", action="store_true", default=None, help="use ATT gap tokens")
        p.add_argument("--k", type=int, action="append", help="few-shot k (repeatable)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="set any config key to a JSON value")
        p.add_argument("-v", "--verbose", action="store_true")
        for flag, _, kw in OVERRIDES:
            p.add_argument(flag, default=None, **kw)
    return ap


def _raw_config(args: argparse.Namespace) -> dict[str, Any]:
    raw = load_config_file(args.config, args.command) if args.config else {}
    schema = SCHEMAS[args.command]
    for flag, key, _ in OVERRIDES:
        val = getattr(args, flag.lstrip("-").replace("-", "_"))
        if val is None:
            continue
        if key not in schema:
            raise CliError("config", f"option for {key!r} does not apply to {args.command}")
        raw[key] = val
    if args.att is not None:
        if "att" not in schema:
            raise CliError("config", f"--att does not apply to {args.command}")
        raw["att"] = True
    if args.k:
        if "ks" not in schema:
            raise CliError("config", f"--k does not apply to {args.command}")
        raw["ks"] = args.k
    for item in args.set:
        key, sep, text = item.partition("=")
        if not sep:
            raise CliError("config", f"--set expects KEY=JSON, got {item!r}")
        try:
            raw[key] = json.loads(text)
        except json.JSONDecodeError:
            raw[key] = text
    return raw


def _report_error(kind: str, message: str, **detail) -> None:
    sys.stderr.write(canonical_json({"error": kind, "message": message, **detail}) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = _raw_config(args)
        out_dir = args.out or raw.get("out") or os.environ.get(OUT_ENV) or "."
        run(args.command, raw, out_dir, args.threads)
    except CliError as e:
        _report_error(e.kind, str(e), **e.detail)
        return 2 if e.kind == "usage" else 1
    except IngestError as e:
        _report_error("ingest", e.reason, row=e.row)
        return 1
    except (ConfigError, EncodingError, SingleClassError, ValueError, KeyError, OSError) as e:
        _report_error(type(e).__name__, str(e))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

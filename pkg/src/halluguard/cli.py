"""Command-line entry point: ``halluguard <subcommand> [options]``.

Every option can also come from a JSON ``--config`` file (flags win). Each run
writes its outputs plus ``manifest.json`` into ``<out-dir>/<timestamp>-seed<seed>``
(or ``--run-name``). A manifest is itself a valid ``--config``.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import corpus as cp
from .attribution import AttributionError, attribute, write_attribution_csv
from .decoding import GenSpec, generate, write_hypotheses
from .detectors import DetectorError, export_scores, import_scores, make_detector
from .evaluation import MetricError, evaluate_records, write_report_csv
from .pipeline import PipelineError, PipelineSpec, flag, mitigate_corpus, record_seed
from .report import ReportError, render_report
from .trainer import (
    DualEncoderConfig,
    DualEncoderSpec,
    TrainingDiverged,
    TrainSpec,
    load_dual_encoder,
    save_dual_encoder,
    train_dual_encoder,
    train_translator,
    write_curve,
)
from .transformer import (
    CheckpointError,
    InputError,
    ModelConfig,
    TransformerModel,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import NonFiniteError, Rng

log = logging.getLogger("halluguard")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
DATA_ERRORS = (
    cp.CorpusError, DetectorError, MetricError, PipelineError, ReportError, CheckpointError,
    InputError, AttributionError, TrainingDiverged, NonFiniteError, OSError,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    name: str
    kind: str  # int, float, str, bool, ints, strs, json, path, paths
    default: object = None
    help: str = ""


def _parse_value(kind: str, raw):
    if kind in ("ints", "strs", "paths") and isinstance(raw, str):
        items = [x for x in raw.split(",") if x]
        return [int(x) for x in items] if kind == "ints" else items
    if kind == "json" and isinstance(raw, str):
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid JSON value {raw!r}: {exc.msg}") from None
    return raw


COMMON = [
    Opt("seed", "int", 0, "global seed"),
    Opt("threads", "int", 1, "worker threads"),
    Opt("out_dir", "path", None, "parent directory for run directories"),
    Opt("run_name", "str", None, "run directory name (default: timestamp-seed)"),
]

_GEN = [
    Opt("strategy", "str", "mc_beam", "generation strategy"),
    Opt("n", "int", 10, "hypotheses per source"),
    Opt("beam_size", "int", 10),
    Opt("p", "float", 0.8, "nucleus mass"),
    Opt("groups", "int", None, "diverse beam groups"),
    Opt("diversity", "float", 0.5, "diverse beam penalty strength"),
    Opt("rate", "float", 1.0, "sibling rank penalty for diverse decoding"),
    Opt("dropout_rate", "float", None, "inference dropout (default: model's)"),
]

COMMANDS = {
    "gen-data": [
        Opt("vocab_size", "int", 64), Opt("min_len", "int", 5), Opt("max_len", "int", 12),
        Opt("window", "int", 2), Opt("branching", "int", 3),
        Opt("n_train", "int", 5000), Opt("n_dev", "int", 200), Opt("n_eval", "int", 1000),
        Opt("mix", "json", None, "pathology proportions as JSON"),
        Opt("stratified", "json", None, "label -> count for eval records, as JSON"),
        Opt("n_records", "int", None, "eval records to induce under the mix"),
    ],
    "train": [
        Opt("data", "path", None, "directory holding train.jsonl and dev.jsonl"),
        Opt("steps", "int", 3000), Opt("batch_size", "int", 32), Opt("lr", "float", 2e-3),
        Opt("warmup", "int", 300), Opt("label_smoothing", "float", 0.1),
        Opt("detach_noise", "float", 0.1), Opt("eval_every", "int", 250),
        Opt("checkpoint_every", "int", 0),
        Opt("vocab_size", "int", 64), Opt("d_model", "int", 64), Opt("n_heads", "int", 4),
        Opt("n_enc_layers", "int", 2), Opt("n_dec_layers", "int", 2), Opt("d_ffn", "int", 256),
        Opt("model_dropout", "float", 0.1), Opt("max_len", "int", 32),
    ],
    "train-encoder": [
        Opt("data", "path", None, "directory holding train.jsonl"),
        Opt("steps", "int", 1500), Opt("batch_size", "int", 64), Opt("lr", "float", 2e-3),
        Opt("warmup", "int", 100), Opt("vocab_size", "int", 64), Opt("dim", "int", 64),
        Opt("margin", "float", 0.3), Opt("temperature", "float", 0.05), Opt("shared", "bool", False),
    ],
    "translate": [
        Opt("model", "path", None), Opt("input", "path", None, "records JSONL"),
        *[o if o.name != "strategy" else Opt("strategy", "str", "default") for o in _GEN],
    ],
    "attribute": [
        Opt("model", "path", None), Opt("input", "path", None, "records JSONL"),
        Opt("ids", "strs", None, "record ids to dump (default: all)"), Opt("norm", "int", 1),
    ],
    "score": [
        Opt("input", "path", None, "records JSONL"),
        Opt("detectors", "strs", ["seq_logprob", "alti"]),
        Opt("model", "path", None), Opt("encoder", "path", None),
        Opt("vocab", "path", None, "vocab.json (needed by chrf_pp)"),
        Opt("imported", "paths", [], "score TSV files; their detectors become imported:<name>"),
        Opt("norm", "int", 1),
    ],
    "detect": [
        Opt("input", "path", None, "scored records JSONL"), Opt("detector", "str", "alti"),
        Opt("fraction", "float", None), Opt("threshold", "float", None),
    ],
    "mitigate": [
        Opt("input", "path", None, "scored records JSONL"),
        Opt("model", "path", None), Opt("encoder", "path", None), Opt("vocab", "path", None),
        Opt("detector", "str", "alti"), Opt("fraction", "float", None), Opt("threshold", "float", None),
        Opt("reranker", "str", "alti"), Opt("mode", "str", "flag"),
        Opt("sample_per_label", "int", 0), Opt("allow_oracle", "bool", False),
        Opt("sweep", "ints", [], "hypothesis counts for the risk-vs-n table"),
        *_GEN,
    ],
    "evaluate": [
        Opt("input", "path", None, "scored records JSONL"),
        Opt("detectors", "strs", None, "default: every score present"),
        Opt("recall_fraction", "float", 0.2), Opt("distribution_fraction", "float", 0.1),
        Opt("bins", "int", 40),
    ],
    "report": [Opt("input", "paths", None, "directories holding evaluation CSVs")],
}

REQUIRED = {
    "train": ["data"], "train-encoder": ["data"], "translate": ["model", "input"],
    "attribute": ["model", "input"], "score": ["input"], "detect": ["input"],
    "mitigate": ["input", "model"], "evaluate": ["input"], "report": ["input"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="halluguard", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    for cmd, opts in COMMANDS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", default=None, help="JSON run config or manifest")
        for o in COMMON + opts:
            flag_name = "--" + o.name.replace("_", "-")
            if o.kind == "bool":
                p.add_argument(flag_name, dest=o.name, action=argparse.BooleanOptionalAction,
                               default=argparse.SUPPRESS, help=o.help)
                continue
            conv = {"int": int, "float": float}.get(o.kind, str)
            p.add_argument(flag_name, dest=o.name, type=conv, default=argparse.SUPPRESS,
                           help=f"{o.help} (default: {o.default})".strip())
    return parser


def load_config(path, command: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    if "subcommand" in raw:  # a manifest
        if raw["subcommand"] != command:
            raise UsageError(f"{path}: manifest is for {raw['subcommand']!r}, not {command!r}")
        raw = raw.get("config", {})
    return raw


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags; unknown config keys rejected."""
    opts = {o.name: o for o in COMMON + COMMANDS[command]}
    cfg = {o.name: o.default for o in opts.values()}
    given = vars(ns)
    if given.get("config"):
        file_cfg = load_config(given["config"], command)
        unknown = sorted(set(file_cfg) - set(opts))
        if unknown:
            raise UsageError(f"{given['config']}: unknown config keys {', '.join(unknown)}")
        cfg.update(file_cfg)
    cfg.update({k: v for k, v in given.items() if k in opts})
    for name, o in opts.items():
        cfg[name] = _parse_value(o.kind, cfg[name])
        if o.kind == "path" and cfg[name] is not None and name != "out_dir":
            cfg[name] = str(Path(cfg[name]).resolve())
        if o.kind == "paths" and cfg[name]:
            cfg[name] = [str(Path(p).resolve()) for p in cfg[name]]
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(command, []) if not cfg.get(k)]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {' '.join(missing)}")
    return cfg


def run_dir(cfg: dict) -> Path:
    parent = cfg["out_dir"] or os.environ.get("HALLUGUARD_OUT_DIR") or "runs"
    name = cfg["run_name"] or f"{time.strftime('%Y%m%dT%H%M%S')}-seed{cfg['seed']}"
    path = Path(parent) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# helpers


def _records(path) -> list:
    recs = cp.read_records(path)
    if not recs:
        raise DataError(f"{path}: no records")
    return recs


def _model(path) -> TransformerModel:
    if not path:
        raise DataError("a --model checkpoint is required")
    return load_checkpoint(path)


def _vocab_words(path, records_path=None):
    if path:
        return cp.load_vocab(path)["words"]
    if records_path:
        sidecar = Path(records_path).with_name("vocab.json")
        if sidecar.exists():
            return cp.load_vocab(sidecar)["words"]
    return None


def _pmap(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _gen_spec(cfg) -> GenSpec:
    spec = GenSpec(**{o.name: cfg[o.name] for o in _GEN}, seed=cfg["seed"])
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return spec


def _detector(name, cfg, model=None, encoder=None, vocab=None, imported=None):
    return make_detector(name, model=model, encoder=encoder, vocab=vocab,
                         imported=imported, norm=cfg.get("norm", 1))


# --------------------------------------------------------------------------
# subcommands; each returns the list of written file names


def cmd_gen_data(cfg, out: Path) -> list:
    kw = {k: cfg[k] for k in ("vocab_size", "min_len", "max_len", "window", "branching",
                              "n_train", "n_dev", "n_eval")}
    if cfg["mix"] is not None:
        kw["mix"] = cfg["mix"]
    spec = cp.CorpusSpec(**kw, seed=cfg["seed"])
    spec.validate()
    corpus = cp.generate_corpus(spec)
    files = list(cp.write_corpus(corpus, out).values())
    recs = cp.build_eval_records(corpus, n=cfg["n_records"], stratified=cfg["stratified"])
    cp.write_jsonl(out / "eval_records.jsonl", recs)
    return files + ["eval_records.jsonl"]


def cmd_train(cfg, out: Path) -> list:
    data = Path(cfg["data"])
    train = cp.records_to_pairs(_records(data / "train.jsonl"))
    dev = cp.records_to_pairs(cp.read_records(data / "dev.jsonl")) if (data / "dev.jsonl").exists() else []
    try:
        mcfg = ModelConfig(vocab_size=cfg["vocab_size"], d_model=cfg["d_model"], n_heads=cfg["n_heads"],
                           n_enc_layers=cfg["n_enc_layers"], n_dec_layers=cfg["n_dec_layers"],
                           d_ffn=cfg["d_ffn"], dropout_rate=cfg["model_dropout"], max_len=cfg["max_len"])
        spec = TrainSpec(**{k: cfg[k] for k in ("steps", "batch_size", "lr", "warmup", "label_smoothing",
                                                 "detach_noise", "eval_every", "checkpoint_every")},
                         seed=cfg["seed"])
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = TransformerModel.init(mcfg, Rng(cfg["seed"]).child("init"))
    model, curve = train_translator(model, train, spec, dev, out / "checkpoints")
    save_checkpoint(model, out / "model.ckpt")
    write_curve(curve, out / "curve.csv")
    return ["model.ckpt", "curve.csv"]


def cmd_train_encoder(cfg, out: Path) -> list:
    pairs = cp.records_to_pairs(_records(Path(cfg["data"]) / "train.jsonl"))
    spec = DualEncoderSpec(steps=cfg["steps"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                           warmup=cfg["warmup"], seed=cfg["seed"])
    conf = DualEncoderConfig(vocab_size=cfg["vocab_size"], dim=cfg["dim"], margin=cfg["margin"],
                             temperature=cfg["temperature"], shared=cfg["shared"])
    enc, curve = train_dual_encoder(pairs, spec, conf)
    save_dual_encoder(enc, out / "encoder.ckpt")
    with open(out / "curve.csv", "w") as fh:
        fh.write("step,loss\n")
        fh.writelines(f"{s},{loss!r}\n" for s, loss in curve)
    return ["encoder.ckpt", "curve.csv"]


def cmd_translate(cfg, out: Path) -> list:
    model = _model(cfg["model"])
    recs = _records(cfg["input"])
    spec = _gen_spec(cfg)

    def work(r):
        try:
            return generate(model, r.source_tokens, spec, record_seed(cfg["seed"], r.id))
        except InputError as exc:
            raise DataError(f"{cfg['input']}: record {r.id}: {exc}") from None

    results = _pmap(work, recs, cfg["threads"])
    write_hypotheses(out / "hypotheses.jsonl", [(r.id, h) for r, hyps in zip(recs, results) for h in hyps])
    translated = []
    for r, hyps in zip(recs, results):
        output = hyps[0].output
        translated.append(cp.TranslationRecord(r.id, r.source_tokens, r.reference_tokens, output,
                                               cp.auto_label(output, r.reference_tokens)))
    cp.write_jsonl(out / "translations.jsonl", translated)
    return ["hypotheses.jsonl", "translations.jsonl"]


def cmd_attribute(cfg, out: Path) -> list:
    model = _model(cfg["model"])
    recs = _records(cfg["input"])
    if cfg["ids"]:
        by_id = {r.id: r for r in recs}
        unknown = [i for i in cfg["ids"] if i not in by_id]
        if unknown:
            raise DataError(f"{cfg['input']}: unknown record id(s) {', '.join(unknown)}")
        recs = [by_id[i] for i in cfg["ids"]]
    (out / "attribution").mkdir(exist_ok=True)
    written, rows = [], []
    for r in recs:
        try:
            res = attribute(model, r.source_tokens, r.output_tokens, cfg["norm"])
        except (AttributionError, InputError) as exc:
            raise DataError(f"{cfg['input']}: record {r.id}: {exc}") from None
        name = f"attribution/{r.id}.csv"
        write_attribution_csv(res, out / name, r.source_tokens, r.output_tokens)
        written.append(name)
        rows.append(f"{r.id},{res.aggregate:.6f}\n")
    with open(out / "source_share.csv", "w") as fh:
        fh.write("id,source_share\n")
        fh.writelines(rows)
    return written + ["source_share.csv"]


def _encoder(cfg, names):
    if "dual_cos" not in names:
        return None
    if not cfg.get("encoder"):
        raise DataError("dual_cos needs --encoder")
    return load_dual_encoder(cfg["encoder"])


def cmd_score(cfg, out: Path) -> list:
    recs = _records(cfg["input"])
    ids = {r.id for r in recs}
    imported: dict = {}
    for path in cfg["imported"]:
        for rid, scores in import_scores(path, ids, prefix="imported:").items():
            for name, s in scores.items():
                if name in imported.get(rid, {}):
                    raise DataError(f"{path}: duplicate score for id {rid!r}, detector {name!r}")
                imported.setdefault(rid, {})[name] = s
    names = list(cfg["detectors"])
    model = _model(cfg["model"]) if {"alti", "seq_logprob"} & set(names) else None
    encoder = _encoder(cfg, names)
    vocab = _vocab_words(cfg["vocab"], cfg["input"]) if "chrf_pp" in names else None
    dets = [_detector(n, cfg, model, encoder, vocab, imported) for n in names]

    def work(r):
        try:
            return [d(r) for d in dets]
        except (InputError, AttributionError) as exc:
            raise DataError(f"{cfg['input']}: record {r.id}: {exc}") from None

    results = _pmap(work, recs, cfg["threads"])
    table = {}
    for r, scores in zip(recs, results):
        table[r.id] = scores
        r.scores.update({s.detector: s.risk for s in scores})
    export_scores(out / "scores.tsv", table)
    cp.write_jsonl(out / "scored.jsonl", recs)
    return ["scores.tsv", "scored.jsonl"]


def _fraction_or_threshold(cfg):
    if cfg["fraction"] is None and cfg["threshold"] is None:
        return 0.1, None
    return cfg["fraction"], cfg["threshold"]


def cmd_detect(cfg, out: Path) -> list:
    recs = _records(cfg["input"])
    fraction, threshold = _fraction_or_threshold(cfg)
    flagged = flag(recs, cfg["detector"], fraction, threshold)
    cp.write_jsonl(out / "flagged.jsonl", flagged)
    (out / "flagged_ids.txt").write_text("".join(f"{r.id}\n" for r in flagged))
    return ["flagged.jsonl", "flagged_ids.txt"]


def cmd_mitigate(cfg, out: Path) -> list:
    recs = _records(cfg["input"])
    fraction, threshold = _fraction_or_threshold(cfg)
    gen = _gen_spec(cfg)
    spec = PipelineSpec(detector=cfg["detector"], fraction=fraction, threshold=threshold, gen=gen,
                        reranker=cfg["reranker"], seed=cfg["seed"], mode=cfg["mode"],
                        sample_per_label=cfg["sample_per_label"], allow_oracle=cfg["allow_oracle"])
    spec.validate()
    model = _model(cfg["model"])
    encoder = _encoder(cfg, [spec.reranker])
    vocab = _vocab_words(cfg["vocab"], cfg["input"]) if spec.reranker == "chrf_pp" else None
    reranker = _detector(spec.reranker, cfg, model, encoder, vocab)
    result = mitigate_corpus(recs, spec, model, reranker, cfg["threads"])
    cp.write_jsonl(out / "mitigated.jsonl", result.records)
    with open(out / "rewrites.jsonl", "w") as fh:
        for rid in sorted(result.rewrites):
            rw = result.rewrites[rid]
            fh.write(json.dumps({"id": rid, "chosen": rw.chosen_index, "fallback": rw.fallback,
                                 "candidates": rw.candidates}, sort_keys=True) + "\n")
    (out / "summary.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True) + "\n")
    written = ["mitigated.jsonl", "rewrites.jsonl", "summary.json"]
    if cfg["sweep"]:
        rows = n_sweep(recs, spec, model, reranker, cfg["sweep"], cfg["threads"])
        with open(out / "n_sweep.csv", "w") as fh:
            fh.write("reranker,n,mean_risk\n")
            fh.writelines(f"{spec.reranker},{n},{risk:.6f}\n" for n, risk in rows)
        written.append("n_sweep.csv")
    return written


def n_sweep(records, spec: PipelineSpec, model, reranker, ns, threads=1) -> list:
    """Mean reranker risk of the rewritten outputs for each hypothesis count."""
    rows = []
    for n in ns:
        s = PipelineSpec(**{**asdict(spec), "gen": GenSpec(**{**asdict(spec.gen), "n": n})})
        res = mitigate_corpus(records, s, model, reranker, threads)
        risks = [res.rewrites[i].candidates[res.rewrites[i].chosen_index]["risk"] for i in sorted(res.rewrites)]
        rows.append((n, sum(risks) / len(risks) if risks else math.nan))
    return rows


def cmd_evaluate(cfg, out: Path) -> list:
    recs = _records(cfg["input"])
    names = cfg["detectors"] or sorted(recs[0].scores)
    if not names:
        raise DataError(f"{cfg['input']}: records carry no scores")
    for r in recs:
        missing = [n for n in names if n not in r.scores]
        if missing:
            raise DataError(f"{cfg['input']}: record {r.id} lacks score(s) {', '.join(missing)}")
    try:
        report = evaluate_records(recs, names, cfg["recall_fraction"], cfg["distribution_fraction"], cfg["bins"])
    except MetricError as exc:
        raise DataError(f"{cfg['input']}: {exc}") from None
    return write_report_csv(report, out)


def cmd_report(cfg, out: Path) -> list:
    written = []
    for d in cfg["input"]:
        if not Path(d).is_dir():
            raise DataError(f"{d}: not a directory")
    staged = out / "tables"
    staged.mkdir(exist_ok=True)
    for d in cfg["input"]:
        for f in sorted(Path(d).glob("*.csv")):
            (staged / f.name).write_bytes(f.read_bytes())
    written = render_report(staged, out)
    return written


HANDLERS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "train-encoder": cmd_train_encoder,
    "translate": cmd_translate, "attribute": cmd_attribute, "score": cmd_score,
    "detect": cmd_detect, "mitigate": cmd_mitigate, "evaluate": cmd_evaluate, "report": cmd_report,
}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        ns = build_parser().parse_args(argv)
        if not ns.command:
            raise UsageError("a subcommand is required: " + " | ".join(COMMANDS))
        cfg = resolve(ns.command, ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = run_dir(cfg)
    try:
        files = HANDLERS[ns.command](cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, *DATA_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    manifest = {"subcommand": ns.command, "config": cfg, "outputs": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

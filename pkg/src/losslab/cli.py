"""Command-line harness: eval, stats, train, grad-check, tokens, parse.

Every run is deterministic for fixed inputs: reports embed (or sit next to) a
manifest holding the argv, the resolved configuration, SHA-256 digests of the
input files, the tool version, and the seed. Timestamps are deliberately left
null so reruns stay byte-identical. Exit codes: 0 success, 1 usage error,
2 data error, 3 internal error (also used when a requested gradient check
fails).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .gradcheck import LOSS_NAMES, check_named_loss
from .losses import (
    AuxiliaryKind,
    LogitBatch,
    LossConfig,
    LossInputError,
    Role,
)
from .metrics import (
    CSV_COLUMNS,
    SampleMetrics,
    StepSet,
    aggregate_report,
    error_typology,
    exact_match,
    step_overlap_metrics,
)
from .parsing import (
    MissingFinalAnswer,
    ParseError,
    PoisonedValue,
    Rationale,
    RationaleFormat,
    evaluate_program,
    parse_rationale,
)
from .stats import (
    LengthMismatch,
    McNemarResult,
    PairedOutcomes,
    ScoreTable,
    ZeroVariance,
    mcnemar_test,
    mean_rank,
    paired_t_test,
    pearson_r,
    token_density,
)
from .training import (
    CorpusTemplate,
    SnapshotFormatError,
    TrainConfig,
    UnknownTokenId,
    make_synthetic_corpus,
    save_model,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

EVAL_FORMATS = ("gsm8k", "mathqa", "qa_letter")

HIGHER_IS_BETTER = {
    "em": True,
    "iou": True,
    "ciou": True,
    "precision": True,
    "recall": True,
    "dice": True,
    "es": False,
    "ms": False,
    "wo": False,
    "io": False,
}


class DataError(ValueError):
    """Input data problems: malformed files, schema violations, mismatches."""


class MalformedLine(DataError):
    pass


class MissingField(DataError):
    pass


class DuplicateId(DataError):
    pass


class IdMismatch(DataError):
    pass


class IncompatibleReports(DataError):
    pass


class ConfigError(DataError):
    pass


class EmptyQuestion(DataError):
    """render_prompt needs a nonempty question."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def render_prompt(question: str, context: str | None = None, answer: str | None = None) -> str:
    """Question/Context/Answer prompt template used for every record."""
    if question is None or not question.strip():
        raise EmptyQuestion("question must be nonempty")
    prompt = f"Question: {question.strip()}"
    if context is not None and context.strip():
        prompt += f" Context: {context.strip()}"
    prompt += " Answer:"
    if answer is not None:
        prompt += f" {answer.strip()}"
    return prompt


def ingest_jsonl(path: str | Path, required: tuple[str, ...]) -> list[dict]:
    """Load JSON-lines records, validating required fields and unique ids.

    Accepts LF or CRLF line endings; blank lines are skipped. Unknown fields
    are preserved.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    records: list[dict] = []
    seen_ids: set = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedLine(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(record, dict):
            raise MalformedLine(f"{path}:{lineno}: record must be a JSON object")
        for field in required:
            if field not in record:
                raise MissingField(f"{path}:{lineno}: missing field {field!r}")
        if "id" in required:
            rid = record["id"]
            if rid in seen_ids:
                raise DuplicateId(f"{path}:{lineno}: duplicate id {rid!r}")
            seen_ids.add(rid)
        records.append(record)
    return records


def _sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def build_manifest(command: list[str], config: dict, inputs: list[str | Path], seed=None) -> dict:
    return {
        "command": list(command),
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "tool_version": __version__,
        "seed": seed,
        "timestamp": None,
    }


def _parse_completion(text: str, fmt: str) -> tuple[Rationale, list[str]]:
    """Returns (rationale, extra diagnostics); degrades missing markers."""
    if fmt == "qa_letter":
        final = text.strip()
        return Rationale((), final if final else None, None, ()), []
    try:
        return parse_rationale(text, RationaleFormat(fmt)), []
    except MissingFinalAnswer as exc:
        return exc.rationale, [str(exc)]


def score_record(record_id, gold_text: str, pred_text: str, fmt: str, commutative: bool) -> dict:
    """All per-record metrics plus diagnostics for one prediction/gold pair."""
    gold, gold_diag = _parse_completion(gold_text, fmt)
    pred, pred_diag = _parse_completion(pred_text, fmt)
    diagnostics = (
        [f"gold: {d}" for d in (*gold.diagnostics, *gold_diag)]
        + [f"prediction: {d}" for d in (*pred.diagnostics, *pred_diag)]
    )

    em = exact_match(pred.final_answer, gold.final_answer)

    plain_pred = StepSet.from_steps(pred.steps, commutative=False)
    plain_gold = StepSet.from_steps(gold.steps, commutative=False)
    comm_pred = StepSet.from_steps(pred.steps, commutative=True)
    comm_gold = StepSet.from_steps(gold.steps, commutative=True)

    iou = step_overlap_metrics(plain_pred, plain_gold, commutative=False).iou
    ciou = step_overlap_metrics(comm_pred, comm_gold, commutative=True).iou
    if commutative:
        overlap = step_overlap_metrics(comm_pred, comm_gold, commutative=True)
        typology = error_typology(comm_pred, comm_gold)
    else:
        overlap = step_overlap_metrics(plain_pred, plain_gold, commutative=False)
        typology = error_typology(plain_pred, plain_gold)

    sample = SampleMetrics(
        em=em,
        iou=iou,
        ciou=ciou,
        precision=overlap.precision,
        recall=overlap.recall,
        dice=overlap.dice,
        es=typology.extra_rate,
        ms=typology.missing_rate,
        wo=typology.wrong_operator,
        io=typology.inverted_operands,
    )
    return {
        "id": record_id,
        "metrics": sample,
        "diagnostics": diagnostics,
        "gold": gold,
        "prediction": pred,
    }


def run_eval(
    pred_path: str | Path,
    gold_path: str | Path,
    fmt: str,
    commutative: bool = True,
) -> tuple[dict, list[dict]]:
    """Score a prediction file against a gold file; ids must align 1:1."""
    preds = ingest_jsonl(pred_path, required=("id", "prediction"))
    golds = ingest_jsonl(gold_path, required=("id", "gold"))
    pred_by_id = {r["id"]: r for r in preds}
    gold_by_id = {r["id"]: r for r in golds}
    if set(pred_by_id) != set(gold_by_id):
        only_pred = sorted(set(pred_by_id) - set(gold_by_id))[:5]
        only_gold = sorted(set(gold_by_id) - set(pred_by_id))[:5]
        raise IdMismatch(
            f"prediction and gold ids differ (pred-only {only_pred}, gold-only {only_gold})"
        )

    scored: list[dict] = []
    for rid in sorted(gold_by_id, key=str):
        gold_rec = gold_by_id[rid]
        record_fmt = gold_rec.get("format", fmt)
        if record_fmt not in EVAL_FORMATS:
            raise DataError(f"record {rid!r} has unknown format {record_fmt!r}")
        scored.append(
            score_record(
                rid,
                str(gold_rec["gold"]),
                str(pred_by_id[rid]["prediction"]),
                record_fmt,
                commutative,
            )
        )

    aggregate = aggregate_report([s["metrics"] for s in scored])
    per_sample = []
    for s in scored:
        row = {"id": s["id"]}
        row.update(s["metrics"].as_dict())
        row["diagnostics"] = s["diagnostics"]
        per_sample.append(row)
    report = {
        "aggregate": aggregate.as_dict(),
        "per_sample": per_sample,
        "conventions": {
            "commutative_matching": commutative,
            "iou": "multiset IoU over exact canonical step keys",
            "ciou": "multiset IoU over commutative-normalized step keys",
            "empty_step_sets": "both empty scores 1, one empty scores 0",
            "em_numeric_tolerance": 1e-6,
        },
    }
    return report, scored


def _aggregate_row_csv(aggregate: dict) -> str:
    header = ",".join(CSV_COLUMNS)
    row = ",".join(repr(float(aggregate[c])) for c in CSV_COLUMNS)
    return f"{header}\n{row}\n"


def _aggregate_row_markdown(aggregate: dict) -> str:
    header = "| " + " | ".join(CSV_COLUMNS) + " |"
    rule = "|" + "|".join(" --- " for _ in CSV_COLUMNS) + "|"
    row = "| " + " | ".join(f"{float(aggregate[c]):.2f}" for c in CSV_COLUMNS) + " |"
    return f"{header}\n{rule}\n{row}\n"


def emit_report(report: dict, out_format: str, out_path: str | None) -> None:
    """Write a report as lossless JSON, a CSV aggregate row, or a markdown
    table. CSV and markdown files get a manifest sidecar next to them."""
    if out_format == "json":
        text = json.dumps(report, indent=2) + "\n"
    elif out_format == "csv":
        text = _aggregate_row_csv(report["aggregate"])
    elif out_format == "markdown":
        text = _aggregate_row_markdown(report["aggregate"])
    else:
        raise ConfigError(f"unknown output format {out_format!r}")
    if out_path is None:
        sys.stdout.write(text)
        return
    Path(out_path).write_text(text, encoding="utf-8")
    if out_format != "json" and "manifest" in report:
        sidecar = Path(str(out_path) + ".manifest.json")
        sidecar.write_text(json.dumps(report["manifest"], indent=2) + "\n", encoding="utf-8")


def _cmd_eval(args, argv: list[str]) -> int:
    report, scored = run_eval(args.pred, args.gold, args.format, not args.no_commutative)
    manifest = build_manifest(
        argv,
        {
            "format": args.format,
            "commutative": not args.no_commutative,
            "out_format": args.out_format,
        },
        [args.pred, args.gold],
    )
    report = {"manifest": manifest, **report}
    if args.dump_parse:
        dump = [
            {
                "id": s["id"],
                "gold": s["gold"].to_dict(),
                "prediction": s["prediction"].to_dict(),
            }
            for s in scored
        ]
        Path(args.dump_parse).write_text(json.dumps(dump, indent=2) + "\n", encoding="utf-8")
    emit_report(report, args.out_format, args.out)
    return EXIT_OK


def _load_report(path: str) -> dict:
    try:
        report = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON ({exc.msg})") from exc
    if "per_sample" not in report or "aggregate" not in report:
        raise IncompatibleReports(f"{path}: not an evaluation report")
    return report


def _aligned_columns(reports: list[dict], paths: list[str], column: str) -> list[list]:
    id_sets = [tuple(sorted((str(r["id"]) for r in rep["per_sample"]))) for rep in reports]
    if len(set(id_sets)) != 1:
        raise IncompatibleReports("reports cover different sample ids")
    columns = []
    for rep in reports:
        by_id = {str(r["id"]): r for r in rep["per_sample"]}
        try:
            columns.append([by_id[i][column] for i in id_sets[0]])
        except KeyError as exc:
            raise IncompatibleReports(f"per-sample records lack column {column!r}") from exc
    return columns


def run_stats(test: str, paths: list[str], metric: str = "iou") -> dict:
    reports = [_load_report(p) for p in paths]
    if test == "mcnemar":
        if len(reports) != 2:
            raise IncompatibleReports("mcnemar compares exactly two reports")
        a, b = _aligned_columns(reports, paths, "em")
        result = mcnemar_test(PairedOutcomes(np.array(a, bool), np.array(b, bool)))
        return {
            "test": "mcnemar",
            "b": result.b,
            "c": result.c,
            "statistic": result.statistic,
            "p_value": result.p_value,
            "method": result.method,
            "significant": result.p_value < 0.05,
        }
    if test == "ttest":
        if len(reports) != 2:
            raise IncompatibleReports("ttest compares exactly two reports")
        x, y = _aligned_columns(reports, paths, metric)
        result = paired_t_test(x, y)
        return {
            "test": "ttest",
            "metric": metric,
            "statistic": result.statistic,
            "p_value": result.p_value,
            "df": result.df,
            "degenerate": result.degenerate,
            "significant": result.p_value < 0.05,
        }
    if test == "pearson":
        if len(reports) != 2:
            raise IncompatibleReports("pearson compares exactly two reports")
        x, y = _aligned_columns(reports, paths, metric)
        return {"test": "pearson", "metric": metric, "r": pearson_r(x, y), "n": len(x)}
    if test == "meanrank":
        if len(reports) < 2:
            raise IncompatibleReports("meanrank needs at least two reports")
        names = tuple(Path(p).stem for p in paths)
        if len(set(names)) != len(names):
            names = tuple(str(p) for p in paths)
        scores = np.array(
            [[float(rep["aggregate"][c]) for c in CSV_COLUMNS] for rep in reports]
        )
        table = ScoreTable(
            names,
            CSV_COLUMNS,
            scores,
            tuple(HIGHER_IS_BETTER[c] for c in CSV_COLUMNS),
        )
        return {"test": "meanrank", "mean_rank": mean_rank(table)}
    raise ConfigError(f"unknown test {test!r}")


def _cmd_stats(args, argv: list[str]) -> int:
    result = run_stats(args.test, args.reports, args.metric)
    manifest = build_manifest(
        argv, {"test": args.test, "metric": args.metric}, args.reports
    )
    report = {"manifest": manifest, **result}
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if "p_value" in result:
        star = " *" if result.get("significant") else ""
        print(
            f"{args.test}: statistic={result.get('statistic')} "
            f"p={result['p_value']:.6g}{star}",
            file=sys.stderr,
        )
    return EXIT_OK


TRAIN_CONFIG_KEYS = {
    "seed": 0,
    "steps": 200,
    "batch_size": 2,
    "max_lr": 1e-4,
    "warmup_steps": 50,
    "embed_dim": 32,
    "window": 4,
    "adapter_rank": 0,
    "adapter_scale": 1.0,
    "weight_decay": 0.01,
    "accum_steps": 1,
    "eval_interval": 100,
    "mix": 0.6,
    "gamma": 2.0,
    "auxiliary": "none",
    "vocab_size": 32,
    "zipf_exponent": 1.0,
    "samples": 256,
    "template": "instruction_answer",
    "instruction_len": 4,
    "seq_len": 16,
    "val_samples": 64,
}


def load_train_config(path: str, loss_by_task: str | None = None) -> dict:
    """Flat JSON config; unknown keys are rejected with their names."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(TRAIN_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    config = dict(TRAIN_CONFIG_KEYS)
    config.update(raw)
    if loss_by_task is not None:
        config["auxiliary"] = {"mwp": "ll", "qa": "fl"}[loss_by_task]
    return config


def run_train(config: dict, out_dir: str | Path, argv: list[str], config_path: str) -> int:
    try:
        loss_cfg = LossConfig(
            mix=float(config["mix"]),
            gamma=float(config["gamma"]),
            auxiliary_kind=AuxiliaryKind(config["auxiliary"]),
        )
        train_cfg = TrainConfig(
            seed=int(config["seed"]),
            steps=int(config["steps"]),
            batch_size=int(config["batch_size"]),
            max_lr=float(config["max_lr"]),
            warmup_steps=int(config["warmup_steps"]),
            embed_dim=int(config["embed_dim"]),
            window=int(config["window"]),
            adapter_rank=int(config["adapter_rank"]),
            adapter_scale=float(config["adapter_scale"]),
            weight_decay=float(config["weight_decay"]),
            accum_steps=int(config["accum_steps"]),
            eval_interval=int(config["eval_interval"]),
            loss=loss_cfg,
        )
        template = CorpusTemplate(config["template"])
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc

    corpus = make_synthetic_corpus(
        seed=int(config["seed"]),
        vocab_size=int(config["vocab_size"]),
        zipf_exponent=float(config["zipf_exponent"]),
        n_samples=int(config["samples"]),
        template=template,
        instruction_len=int(config["instruction_len"]),
        seq_len=int(config["seq_len"]),
    )
    val_corpus = make_synthetic_corpus(
        seed=int(config["seed"]) + 1,
        vocab_size=int(config["vocab_size"]),
        zipf_exponent=float(config["zipf_exponent"]),
        n_samples=int(config["val_samples"]),
        template=template,
        instruction_len=int(config["instruction_len"]),
        seq_len=int(config["seq_len"]),
    )
    trace = train(train_cfg, corpus, val_corpus)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trace.to_jsonl(out / "trace.jsonl")
    save_model(trace.final_model, out / "model.sltm")
    if trace.best_model is not None:
        save_model(trace.best_model, out / "model_best.sltm")
    manifest = build_manifest(argv, config, [config_path], seed=config["seed"])
    manifest["best_step"] = trace.best_step
    manifest["best_val_loss"] = trace.best_val_loss
    manifest["trainable_fraction"] = trace.trainable_fraction
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def _cmd_train(args, argv: list[str]) -> int:
    config = load_train_config(args.config, args.loss_by_task)
    return run_train(config, args.out_dir, argv, args.config)


def _gradcheck_batch(seed: int, positions: int, vocab: int) -> LogitBatch:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((positions, vocab))
    targets = rng.integers(0, vocab, size=positions)
    half = positions // 2
    roles = np.array(
        [int(Role.INSTRUCTION)] * half + [int(Role.ANSWER)] * (positions - half)
    )
    return LogitBatch(logits, targets, roles)


def _cmd_grad_check(args, argv: list[str]) -> int:
    names = list(LOSS_NAMES) if args.loss == "all" else [args.loss]
    batch = _gradcheck_batch(args.seed, args.positions, args.vocab)
    results = {}
    all_passed = True
    for name in names:
        report = check_named_loss(name, batch, step=args.step, tolerance=args.tolerance)
        results[name] = {
            "max_rel_error": float(report.max_rel_error),
            "worst_coordinate": [int(c) for c in report.worst_coordinate]
            if report.worst_coordinate
            else None,
            "n_checked": int(report.n_checked),
            "n_skipped": len(report.skipped),
            "passed": bool(report.passed),
        }
        all_passed &= report.passed
        print(f"{name}: {report.summary()}")
    if args.out:
        manifest = build_manifest(
            argv,
            {
                "seed": args.seed,
                "positions": args.positions,
                "vocab": args.vocab,
                "step": args.step,
                "tolerance": args.tolerance,
            },
            [],
            seed=args.seed,
        )
        payload = {"manifest": manifest, "results": results}
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if all_passed else EXIT_INTERNAL


def _cmd_tokens(args, argv: list[str]) -> int:
    records = ingest_jsonl(args.input, required=("tokens",))
    exclude = set()
    if args.exclude_ids:
        try:
            exclude = {int(x) for x in args.exclude_ids.split(",") if x.strip()}
        except ValueError as exc:
            raise ConfigError(f"--exclude-ids must be integers: {exc}") from exc
    stream: list[int] = []
    for lineno, record in enumerate(records, start=1):
        tokens = record["tokens"]
        if not isinstance(tokens, list):
            raise MalformedLine(f"{args.input}: record {lineno}: 'tokens' must be a list")
        stream.extend(int(t) for t in tokens if int(t) not in exclude)
    if not stream:
        raise DataError("token stream is empty after exclusions")
    bandwidth = args.bandwidth
    if bandwidth != "scott":
        try:
            bandwidth = float(bandwidth)
        except ValueError as exc:
            raise ConfigError("--bandwidth must be 'scott' or a number") from exc
    density = token_density(stream, bandwidth)
    lines = ["id,density"]
    for i, d in zip(density.ids, density.density):
        lines.append(f"{int(i)},{float(d)!r}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = build_manifest(
        argv,
        {"exclude_ids": sorted(exclude), "bandwidth": args.bandwidth},
        [args.input],
    )
    sidecar = Path(str(args.out) + ".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    if args.json_out:
        payload = {
            "manifest": manifest,
            "bandwidth": density.bandwidth,
            "n": density.n,
            "ids": [int(i) for i in density.ids],
            "density": [float(d) for d in density.density],
            "log_density": [float(d) for d in density.log_density],
            "histogram": [int(c) for c in density.histogram],
        }
        Path(args.json_out).write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )
    return EXIT_OK


def _cmd_parse(args, argv: list[str]) -> int:
    fmt = RationaleFormat(args.format)
    missing_final = None
    try:
        rationale = parse_rationale(args.text, fmt)
    except MissingFinalAnswer as exc:
        rationale = exc.rationale
        missing_final = str(exc)
    payload = rationale.to_dict()
    if missing_final:
        payload["diagnostics"].append(missing_final)
    if args.numbers is not None:
        numbers = [float(x) for x in args.numbers.split(",") if x.strip()]
        values = evaluate_program(rationale.steps, numbers)
        payload["values"] = [
            {"poisoned_by_step": v.origin} if isinstance(v, PoisonedValue) else v
            for v in values
        ]
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="losslab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_eval = sub.add_parser("eval", help="score predictions against gold rationales")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gold", required=True)
    p_eval.add_argument("--format", choices=EVAL_FORMATS, default="gsm8k")
    p_eval.add_argument("--no-commutative", action="store_true")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--out-format", choices=("json", "csv", "markdown"), default="json")
    p_eval.add_argument("--dump-parse", default=None)
    p_eval.set_defaults(func=_cmd_eval)

    p_stats = sub.add_parser("stats", help="statistical comparison of eval reports")
    p_stats.add_argument("--test", choices=("mcnemar", "ttest", "pearson", "meanrank"), required=True)
    p_stats.add_argument("--metric", default="iou")
    p_stats.add_argument("--out", default=None)
    p_stats.add_argument("reports", nargs="+")
    p_stats.set_defaults(func=_cmd_stats)

    p_train = sub.add_parser("train", help="train the toy model on a synthetic corpus")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--loss-by-task", choices=("mwp", "qa"), default=None)
    p_train.set_defaults(func=_cmd_train)

    p_grad = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p_grad.add_argument("--loss", choices=("all",) + LOSS_NAMES, default="all")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--positions", type=int, default=8)
    p_grad.add_argument("--vocab", type=int, default=17)
    p_grad.add_argument("--step", type=float, default=1e-5)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--out", default=None)
    p_grad.set_defaults(func=_cmd_grad_check)

    p_tokens = sub.add_parser("tokens", help="token id density and histogram")
    p_tokens.add_argument("--input", required=True)
    p_tokens.add_argument("--out", required=True)
    p_tokens.add_argument("--json-out", default=None)
    p_tokens.add_argument("--exclude-ids", default=None)
    p_tokens.add_argument("--bandwidth", default="scott")
    p_tokens.set_defaults(func=_cmd_tokens)

    p_parse = sub.add_parser("parse", help="inspect one completion's parse")
    p_parse.add_argument("--text", required=True)
    p_parse.add_argument("--format", choices=("gsm8k", "mathqa"), default="gsm8k")
    p_parse.add_argument("--numbers", default=None)
    p_parse.set_defaults(func=_cmd_parse)
    return parser


DATA_ERRORS = (
    DataError,
    ParseError,
    LengthMismatch,
    ZeroVariance,
    LossInputError,
    UnknownTokenId,
    SnapshotFormatError,
    OSError,
)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())

"""
nidslabel command-line interface.

    nidslabel ingest        --rules community.rules --labels labels.csv
    nidslabel split         --in out/dataset.jsonl --min-count 5 --train-frac 0.8 --seed 7
    nidslabel train         --train out/train.jsonl [--tune --rounds 3]
    nidslabel predict       --model out/model.joblib --in out/test.jsonl
    nidslabel evaluate      --gold out/test.jsonl --pred out/predictions.jsonl --level both
    nidslabel baseline      --train out/train.jsonl --test out/test.jsonl --k 1 2
    nidslabel llm-label     --in out/test.jsonl --mock transcript.jsonl --config guide-icl2.toml
    nidslabel prompt-search --dev out/dev.jsonl --mock transcript.jsonl --examples examples.jsonl
    nidslabel catalog check [--catalog snapshot.json]

Exit codes: 0 success, 1 validation or usage error, 2 runtime or transport error.
Artifacts go to the output directory; logs go to stderr.
"""

import argparse
import json
import re
import sys
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from nidslabel import __version__
from nidslabel.attack.catalog import AttackCatalog, load_catalog
from nidslabel.config import AppConfig, load_config
from nidslabel.core.errors import (
    EXIT_OK,
    EXIT_VALIDATION,
    DatasetError,
    NidsLabelError,
    describe_exception,
    render_envelope,
)
from nidslabel.core.logging import configure_logging, get_logger
from nidslabel.core.run_context import set_run_id
from nidslabel.data.dataset import (
    LabeledDataset,
    build_split,
    ingest_with_report,
    label_frequencies,
    load_dataset,
    save_dataset,
    tactic_frequencies,
)
from nidslabel.llm.prompting import (
    IclExample,
    PredictionSet,
    RetryPolicy,
    label_many,
    load_examples,
    standard_prompt_grid,
    template_version,
)
from nidslabel.manifest import append_manifest
from nidslabel.ml.classifiers import (
    default_grid,
    load_model,
    predict_many,
    save_model,
    train_multilabel,
    tune,
)
from nidslabel.rules.parser import SnortRule, parse_ruleset_file
from nidslabel.scoring.baselines import fit_top_k, rt_k
from nidslabel.scoring.evaluation import (
    EvalReport,
    Level,
    comparison_table,
    evaluate_predictor,
    file_predictor,
    load_predictions,
    predictions_to_jsonl,
    select_best_prompt,
)
from nidslabel.services.chat import ChatClient, build_client

logger = get_logger(__name__)


class UsageError(Exception):
    """Raised instead of exiting when argument parsing fails."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise UsageError(message)


@dataclass
class RunOutcome:
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)
    template_version: str | None = None
    summary: dict[str, Any] = field(default_factory=dict)
    text: str | None = None


# ── Artifact helpers ─────────────────────────────────────────────────────────


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _write_json(path: Path, data: Any) -> Path:
    return _write_text(path, json.dumps(data, indent=2, sort_keys=True, default=str) + "\n")


def _read_rules(path: Path) -> list[SnortRule]:
    """Rules from a .rules file or from a dataset JSONL file."""
    if path.suffix == ".rules":
        rules, _ = parse_ruleset_file(path)
        without_sid = sum(1 for r in rules if r.sid is None)
        if without_sid:
            logger.warning("Skipping %d rule(s) without sid", without_sid)
        return [r for r in rules if r.sid is not None]
    return [item.rule for item in load_dataset(path)]


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _chat_client(args: argparse.Namespace, config: AppConfig) -> tuple[ChatClient, RetryPolicy]:
    client = build_client(
        config.provider,
        config.llm_api_key,
        mock=args.mock,
        record=args.record,
        strict=config.strict,
    )
    retry = RetryPolicy.from_settings(config.provider)
    if args.mock is not None:
        retry = RetryPolicy(retry.max_retries, 0.0, 0.0, sleep=lambda _: None)
    return client, retry


def _examples(args: argparse.Namespace, catalog: AttackCatalog) -> list[IclExample]:
    return load_examples(args.examples, catalog) if args.examples else []


# ── Commands ─────────────────────────────────────────────────────────────────


def cmd_ingest(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    ds, report = ingest_with_report(args.rules, args.labels, catalog, strict=config.strict)
    out = config.output_dir
    dataset_path = save_dataset(out / "dataset.jsonl", ds)
    report_data = asdict(report) | {"label_frequencies": label_frequencies(ds)}
    report_path = _write_json(out / "ingest_report.json", report_data)
    return RunOutcome(
        inputs=[Path(args.rules), Path(args.labels)],
        outputs=[dataset_path, report_path],
        summary={"labeled_rules": len(ds), "labels": len(ds.label_universe)},
    )


def cmd_split(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    ds = load_dataset(args.input)
    settings = config.split
    split = build_split(ds, settings.min_count, settings.train_frac, settings.seed)
    out = config.output_dir
    outputs = [
        save_dataset(out / "train.jsonl", split.train, "train"),
        save_dataset(out / "test.jsonl", split.test, "test"),
        save_dataset(out / "rare.jsonl", split.rare, "rare"),
    ]

    def stats(part: LabeledDataset) -> dict[str, Any]:
        return {
            "rules": len(part),
            "technique_frequencies": label_frequencies(part),
            "tactic_frequencies": tactic_frequencies(part, catalog),
        }

    stats_data = {
        "min_count": settings.min_count,
        "train_frac": settings.train_frac,
        "seed": settings.seed,
        "train": stats(split.train),
        "test": stats(split.test),
        "rare": stats(split.rare),
    }
    outputs.append(_write_json(out / "split_stats.json", stats_data))
    return RunOutcome(
        inputs=[Path(args.input)],
        outputs=outputs,
        seeds={"split": settings.seed},
        summary={"train": len(split.train), "test": len(split.test), "rare": len(split.rare)},
    )


def cmd_train(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    train = load_dataset(args.train)
    hp = config.classifier
    out = config.output_dir
    outputs: list[Path] = []
    summary: dict[str, Any] = {}

    if args.tune:
        grid = [hp] if args.model_type else default_grid(hp.seed)
        model, report = tune(
            train,
            grid,
            config.tuning_rounds,
            seed=hp.seed,
            tokenizer=config.features,
            policy=config.threshold_policy,
            jobs=config.jobs,
        )
        outputs.append(_write_json(out / "tuning_report.json", report.model_dump(mode="json")))
        summary["best"] = report.best.describe()
        summary["validation_f1"] = report.best_f1
    else:
        model = train_multilabel(
            train, hp, config.features, config.threshold_policy, jobs=config.jobs
        )
        summary["model"] = hp.describe()

    model_path = Path(args.model_out) if args.model_out else out / "model.joblib"
    outputs.append(save_model(model_path, model))
    summary["labels"] = len(model.label_universe)
    return RunOutcome(
        inputs=[Path(args.train)], outputs=outputs, seeds={"classifier": hp.seed}, summary=summary
    )


def cmd_predict(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    model = load_model(args.model)
    rules = _read_rules(Path(args.input))
    predictions = predict_many(model, rules)
    by_sid = {
        rule.sid: pred.technique_ids
        for rule, pred in zip(rules, predictions, strict=True)
        if rule.sid is not None
    }
    pred_path = Path(args.pred_out) if args.pred_out else config.output_dir / "predictions.jsonl"
    _write_text(pred_path, predictions_to_jsonl(by_sid))
    return RunOutcome(
        inputs=[Path(args.model), Path(args.input)],
        outputs=[pred_path],
        summary={"rules": len(rules), "empty_predictions": sum(not p for p in by_sid.values())},
    )


def _parse_pred_arg(value: str) -> tuple[str, Path]:
    name, sep, path = value.partition("=")
    if sep and name:
        return name, Path(path)
    return Path(value).stem, Path(value)


def cmd_evaluate(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    gold = load_dataset(args.gold)
    levels = [Level.TECHNIQUE, Level.TACTIC] if args.level == "both" else [Level(args.level)]
    out = config.output_dir
    outputs: list[Path] = []
    inputs = [Path(args.gold)]
    rows: list[tuple[str, EvalReport | None, EvalReport | None]] = []
    tables: list[str] = []
    summary: dict[str, Any] = {}

    # Only an explicit --strict aborts here
    strict = args.strict is True
    for name, path in (_parse_pred_arg(p) for p in args.pred):
        inputs.append(path)
        predict = file_predictor(load_predictions(path))
        reports: dict[Level, EvalReport] = {}
        for level in levels:
            report = evaluate_predictor(
                gold, predict, level, catalog, rollup=args.rollup, strict=strict, name=name
            )
            reports[level] = report
            report_path = out / f"eval_{_safe_name(name)}_{level.value}.json"
            report_json = report.to_json(per_label=args.per_label)
            outputs.append(_write_text(report_path, report_json + "\n"))
            tables.append(report.to_table(per_label=args.per_label))
            summary[f"{name}:{level.value}"] = {
                "precision": report.precision,
                "recall": report.recall,
                "f1": report.f1,
                "failures": report.failures,
            }
        rows.append((name, reports.get(Level.TECHNIQUE), reports.get(Level.TACTIC)))

    text = "\n\n".join(tables)
    if len(rows) > 1 or len(levels) > 1:
        text += "\n\n" + comparison_table(rows).to_string(index=False)
    outputs.append(_write_text(out / "evaluation.txt", text + "\n"))
    return RunOutcome(inputs=inputs, outputs=outputs, summary=summary, text=text)


def cmd_baseline(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    train = load_dataset(args.train)
    test = load_dataset(args.test)
    seed = config.split.seed
    out = config.output_dir
    outputs: list[Path] = []
    rows: list[tuple[str, EvalReport | None, EvalReport | None]] = []
    reports: dict[str, Any] = {}

    for k in args.k:
        predictors = ((fit_top_k(train, k), True), (rt_k(catalog, k, seed), False))
        for predictor, tactic_level in predictors:
            name = predictor.name
            preds = {item.sid: predictor.predict(item) for item in test}
            outputs.append(
                _write_text(out / f"baseline_{_safe_name(name)}.jsonl", predictions_to_jsonl(preds))
            )
            technique = evaluate_predictor(test, predictor.predict, Level.TECHNIQUE, name=name)
            tactic = (
                evaluate_predictor(test, predictor.predict, Level.TACTIC, catalog, name=name)
                if tactic_level
                else None
            )
            rows.append((name, technique, tactic))
            reports[name] = {
                "technique": technique.model_dump(mode="json", exclude={"per_label"}),
                "tactic": tactic.model_dump(mode="json", exclude={"per_label"}) if tactic else None,
            }

    text = comparison_table(rows).to_string(index=False)
    outputs.append(_write_json(out / "baseline_report.json", reports))
    outputs.append(_write_text(out / "baseline_comparison.txt", text + "\n"))
    return RunOutcome(
        inputs=[Path(args.train), Path(args.test)],
        outputs=outputs,
        seeds={"random_within_tactic": seed},
        summary={name: r["technique"]["f1"] for name, r in reports.items()},
        text=text,
    )


def cmd_llm_label(
    args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog
) -> RunOutcome:
    rules = _read_rules(Path(args.input))
    examples = _examples(args, catalog)
    client, retry = _chat_client(args, config)
    try:
        outcomes = label_many(client, config.prompt, rules, catalog, examples, config.jobs, retry)
    finally:
        client.close()

    records: list[str] = []
    failures: list[NidsLabelError] = []
    for outcome in outcomes:
        if isinstance(outcome, PredictionSet):
            records.append(json.dumps(outcome.to_record(), sort_keys=True, ensure_ascii=False))
        else:
            failures.append(outcome)

    default_path = config.output_dir / "llm_predictions.jsonl"
    pred_path = Path(args.pred_out) if args.pred_out else default_path
    _write_text(pred_path, "".join(r + "\n" for r in records))
    if failures and config.strict:
        raise failures[0]

    inputs = [Path(args.input)] + [Path(p) for p in (args.examples, args.mock) if p]
    outputs = [pred_path] + ([Path(args.record)] if args.record else [])
    return RunOutcome(
        inputs=inputs,
        outputs=outputs,
        template_version=template_version(),
        summary={"prompt": config.prompt.name, "labeled": len(records), "failed": len(failures)},
    )


def cmd_prompt_search(
    args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog
) -> RunOutcome:
    dev = load_dataset(args.dev)
    if len(dev) == 0:
        raise DatasetError(f"{args.dev}: dev set is empty")
    examples = _examples(args, catalog)
    client, _ = _chat_client(args, config)
    configs = standard_prompt_grid(include_competition=args.include_competition)
    try:
        result = select_best_prompt(configs, dev, client, catalog, examples, config.jobs)
    finally:
        client.close()

    ranked = [
        {
            "name": c.config.name,
            "config": c.config.model_dump(mode="json"),
            "f1": c.f1,
            "precision": c.report.precision if c.report else 0.0,
            "recall": c.report.recall if c.report else 0.0,
            "prompt_tokens": c.prompt_tokens,
            "error": c.error,
        }
        for c in result.ranked
    ]
    data = {
        "best": result.best.name,
        "best_config": result.best.model_dump(mode="json"),
        "ranked": ranked,
    }
    search_path = _write_json(config.output_dir / "prompt_search.json", data)
    inputs = [Path(args.dev)] + [Path(p) for p in (args.examples, args.mock) if p]
    return RunOutcome(
        inputs=inputs,
        outputs=[search_path],
        template_version=template_version(),
        summary={"best": result.best.name, "f1": result.ranked[0].f1},
    )


def cmd_catalog(args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog) -> RunOutcome:
    entries = catalog.sorted_entries()
    return RunOutcome(
        inputs=[config.catalog_path],
        summary={
            "version": catalog.version,
            "entries": len(entries),
            "deprecated": sum(1 for e in entries if e.deprecated),
            "sub_techniques": sum(1 for e in entries if e.is_sub),
            "tactics": sorted(catalog.tactic_universe),
        },
    )


Handler = Callable[[argparse.Namespace, AppConfig, AttackCatalog], RunOutcome]

COMMANDS: dict[str, Handler] = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "baseline": cmd_baseline,
    "llm-label": cmd_llm_label,
    "prompt-search": cmd_prompt_search,
    "catalog": cmd_catalog,
}


# ── Parser ───────────────────────────────────────────────────────────────────


def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--out", help="Output directory (default: out)")
    common.add_argument("--seed", type=int, help="Seed for splitting, training and sampling")
    common.add_argument("--jobs", type=int, help="Parallel workers")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument(
        "--strict",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Fail on invalid input instead of skipping it",
    )
    return common


def _llm_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--mock", help="Replay this transcript instead of calling a provider")
    parser.add_argument("--record", help="Write a replayable transcript of live requests")
    parser.add_argument("--provider", choices=["openai", "anthropic", "gemini", "custom"])
    parser.add_argument("--endpoint", help="Chat-completion endpoint URL")
    parser.add_argument("--model-name", help="Provider model name")
    parser.add_argument("--examples", help="ICL examples JSONL {rule, techniques}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nidslabel", description="Label Snort rules with ATT&CK techniques")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _common_options()
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Join a rules file with a label map")
    p.add_argument("--rules", required=True)
    p.add_argument("--labels", required=True, help="CSV with header sid,technique_id")

    p = sub.add_parser("split", parents=[common], help="Rare filtering and stratified split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--min-count", type=int)
    p.add_argument("--train-frac", type=float)

    p = sub.add_parser("train", parents=[common], help="Train a one-vs-rest classifier")
    p.add_argument("--train", required=True)
    p.add_argument("--model-type", choices=["svm", "random_forest", "gbm"])
    p.add_argument("--policy", choices=["positive_margin", "top1_fallback"])
    p.add_argument("--tune", action="store_true", help="Search hyperparameters first")
    p.add_argument("--rounds", type=int, help="Tuning rounds")
    p.add_argument("--model-out")

    p = sub.add_parser("predict", parents=[common], help="Apply a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="Dataset JSONL or .rules file")
    p.add_argument("--pred-out")

    p = sub.add_parser(
        "evaluate",
        parents=[common],
        help="Score prediction files",
        description="A sid missing from a predictions file is scored as an empty prediction "
        "and counted as a failure; --strict aborts instead.",
    )
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True, nargs="+", help="[name=]predictions.jsonl")
    p.add_argument("--level", choices=["technique", "tactic", "both"], default="technique")
    p.add_argument("--per-label", action="store_true")
    p.add_argument("--rollup", action="store_true", help="Score sub-techniques as their parent")

    p = sub.add_parser("baseline", parents=[common], help="Top-k and random-within-tactic")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--k", type=int, nargs="+", default=[1, 2])

    p = sub.add_parser("llm-label", parents=[common], help="Label rules with an LLM")
    p.add_argument("--in", dest="input", required=True, help="Dataset JSONL or .rules file")
    _llm_options(p)
    p.add_argument("--guide", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--icl", type=int, choices=[0, 1, 2])
    p.add_argument("--competition", action="store_true", help="Use competition questioning")
    p.add_argument("--batch-count", type=int)
    p.add_argument("--rounds", type=int, help="Competition refinement rounds")
    p.add_argument("--pred-out")

    p = sub.add_parser("prompt-search", parents=[common], help="Rank prompt configurations")
    p.add_argument("--dev", required=True)
    _llm_options(p)
    p.add_argument("--include-competition", action="store_true")

    p = sub.add_parser("catalog", parents=[common], help="Catalog utilities")
    p.add_argument("action", choices=["check"])
    p.add_argument("--catalog", help="Catalog snapshot JSON")

    return parser


def _prune(data: dict[str, Any]) -> dict[str, Any]:
    pruned: dict[str, Any] = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = _prune(value)
            if value:
                pruned[key] = value
        elif value is not None:
            pruned[key] = value
    return pruned


def config_overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Nested config values from command-line flags; unset flags are left out."""
    def get(name: str) -> Any:
        return getattr(args, name, None)

    competition: dict[str, Any] | None = None
    if get("competition") or get("batch_count") is not None:
        competition = {"batch_count": get("batch_count"), "rounds": get("rounds")}

    overrides = {
        "output_dir": get("out"),
        "jobs": get("jobs"),
        "strict": get("strict"),
        "log_level": get("log_level"),
        "catalog_path": get("catalog"),
        "threshold_policy": get("policy"),
        "split": {
            "seed": get("seed"),
            "min_count": get("min_count"),
            "train_frac": get("train_frac"),
        },
        "classifier": {"seed": get("seed"), "model_type": get("model_type")},
        "prompt": {
            "use_technique_guide": get("guide"),
            "icl_count": get("icl"),
            "competition": competition,
        },
        "provider": {
            "provider": get("provider"),
            "endpoint": get("endpoint"),
            "model": get("model_name"),
        },
    }
    if args.command == "train":
        overrides["tuning_rounds"] = get("rounds")
    pruned = _prune(overrides)
    if competition is not None:
        pruned.setdefault("prompt", {})["competition"] = _prune(competition)
    return pruned


def _manifest_arguments(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "command"}


def _config_files(args: argparse.Namespace) -> list[Path]:
    return [Path(args.config)] if args.config else []


def _record_run(
    args: argparse.Namespace, config: AppConfig, catalog: AttackCatalog, outcome: RunOutcome
) -> None:
    append_manifest(
        config.output_dir,
        args.command,
        _manifest_arguments(args),
        inputs=[*outcome.inputs, *_config_files(args)],
        outputs=outcome.outputs,
        seeds=outcome.seeds,
        catalog_version=catalog.version,
        template_version=outcome.template_version,
    )


def _record_failure(
    args: argparse.Namespace,
    config: AppConfig,
    catalog: AttackCatalog | None,
    error: Mapping[str, Any],
) -> None:
    try:
        append_manifest(
            config.output_dir,
            args.command,
            _manifest_arguments(args),
            inputs=_config_files(args),
            outputs=[],
            seeds={},
            catalog_version=catalog.version if catalog else None,
            error=error,
        )
    except OSError as exc:
        logger.warning("Could not record the failed run in the manifest: %s", exc)


def run(argv: Sequence[str] | None = None) -> int:
    """
    Parse arguments, run one command, and map failures to exit codes.

    Returns:
        0 on success, 1 on validation or usage errors, 2 on runtime errors
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    run_id = set_run_id()
    configure_logging(args.log_level)
    logger.info(
        "nidslabel %s run %s: %s",
        __version__,
        run_id,
        args.command,
        extra={"command": args.command},
    )

    config: AppConfig | None = None
    catalog: AttackCatalog | None = None
    try:
        config = load_config(args.config, config_overrides(args))
        configure_logging(config.log_level)
        catalog = load_catalog(config.catalog_path)
        outcome = COMMANDS[args.command](args, config, catalog)
        _record_run(args, config, catalog, outcome)
    except Exception as exc:
        code, body = describe_exception(exc)
        sys.stderr.write(render_envelope(body) + "\n")
        if config is not None:
            _record_failure(args, config, catalog, body["error"])
        return code

    if outcome.text is not None:
        sys.stdout.write(outcome.text + "\n")
    sys.stdout.write(json.dumps(outcome.summary, sort_keys=True, default=str) + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

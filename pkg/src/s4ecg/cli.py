"""Command line interface: s4ecg <command> [options]

Every command writes its artifacts, an experiment.txt describing the invocation, the serialized
configurations and content hashes of its inputs and outputs into --out. Domain and I/O errors
exit with code 1 and a single `error: <ErrorClass>: <message>` line on stderr, usage errors with
code 2.
"""

import argparse
import dataclasses
import logging
import os
import sys
from typing import Any, Dict, Optional, Sequence, Tuple

from s4ecg.config import CpcConfig, ModelConfig, TrainConfig, from_dict, load_config, with_overrides
from s4ecg.cpc import finetune, pretrain
from s4ecg.data import Dataset, LabelVocabulary, assign_folds, export, filter_rare_labels, ingest
from s4ecg.dataframe import write_table
from s4ecg.errors import ConfigError, S4EcgError
from s4ecg.experiments import (
    TrainedModel,
    compare_rates,
    cross_rate_matrix,
    input_size_sweep,
    mean_macro_auc,
    train_runs,
)
from s4ecg.model import S4Classifier, load_model, parameter_breakdown
from s4ecg.plots import plot_comparison, plot_curve
from s4ecg.runner import ExperimentRunner, ExperimentSpec, arguments_of
from s4ecg.stats import PredictionSet, bootstrap_compare, multi_run_verdict
from s4ecg.synth import TASKS, SynthSpec, synth_generate
from s4ecg.tensor import set_default_dtype
from s4ecg.train import evaluate, meta_stats_from_dict
from s4ecg.util import derive_seeds, parse_overrides

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _configs(args: argparse.Namespace, *classes: type) -> Tuple[Any, ...]:
    """Loads the configuration files of the given classes and applies the --set overrides.

    Raises:
        ConfigError: for an override key that no configuration has
    """
    paths = {ModelConfig: "model_config", TrainConfig: "train_config", CpcConfig: "cpc_config"}
    overrides = parse_overrides(args.set or ())
    known = {f.name for cls in classes for f in dataclasses.fields(cls)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise ConfigError(f"Unknown configuration keys {unknown}")
    if args.precision is not None:
        overrides["dtype"] = args.precision
    configs = []
    for cls in classes:
        path = getattr(args, paths[cls], None)
        config = load_config(path, cls) if path else cls()
        configs.append(with_overrides(config, overrides))
    return tuple(configs)


def _config_paths(args: argparse.Namespace) -> Tuple[str, ...]:
    names = ("model_config", "train_config", "cpc_config")
    return tuple(getattr(args, n) for n in names if getattr(args, n, None))


def _runner(args: argparse.Namespace, seed: int = 0) -> ExperimentRunner:
    spec = ExperimentSpec(
        command=args.command,
        config_paths=_config_paths(args),
        seed=seed,
        output_dir=args.out,
        arguments=arguments_of(vars(args), exclude=("command", "out", "log_level", "jobs")),
    )
    return ExperimentRunner(spec)


def _load_dataset(
    path: str, vocabulary: Optional[LabelVocabulary] = None, min_count: int = 0, seed: int = 0
) -> Dataset:
    """Ingests a manifest, drops rare statements and makes sure every record has a fold"""
    dataset = ingest(path, vocabulary, drop_unknown=vocabulary is not None)
    if min_count > 0 and vocabulary is None:
        dataset = filter_rare_labels(dataset, min_count)
    return dataset.with_folds(assign_folds(dataset, seed=seed))


def _fit_model_config(config: ModelConfig, dataset: Dataset) -> ModelConfig:
    return dataclasses.replace(config, n_classes=len(dataset.vocabulary), c_in=dataset[0].signal.shape[0])


def _sampling_rate(dataset: Dataset) -> float:
    rates = {record.fs for record in dataset}
    if len(rates) != 1:
        raise ConfigError(f"Expected a single sampling rate, found {sorted(rates)}")
    return rates.pop()


def _load_classifier(path: str) -> Tuple[S4Classifier, Dict[str, Any], TrainConfig]:
    model, metadata = load_model(path)
    train_config = from_dict(TrainConfig, metadata["train_config"]) if "train_config" in metadata else TrainConfig()
    return model, metadata, train_config


def _vocabulary(metadata: Dict[str, Any], path: str) -> LabelVocabulary:
    if "codes" not in metadata:
        raise ConfigError(f"Checkpoint {path} does not list its statement codes")
    return LabelVocabulary(tuple(metadata["codes"]))


def cmd_synth(args: argparse.Namespace) -> None:
    runner = _runner(args, seed=args.seed)
    specs = [
        SynthSpec(args.task, args.n_records, fs, args.duration, args.n_channels, args.strength, args.n_folds)
        for fs in args.fs
    ]
    runner.prepare({f"synth-{spec.fs:g}Hz": spec for spec in specs})
    outputs = []
    for spec in specs:
        directory = runner.path("data" if len(specs) == 1 else f"data-{spec.fs:g}Hz")
        export(synth_generate(spec, args.seed), directory)
        outputs.append(directory)
    sys.stdout.write(runner.finish(outputs) + "\n")


def cmd_train(args: argparse.Namespace) -> None:
    model_config, train_config = _configs(args, ModelConfig, TrainConfig)
    set_default_dtype(train_config.dtype)
    dataset = _load_dataset(args.data, min_count=args.min_count, seed=train_config.seed)
    model_config = _fit_model_config(model_config, dataset)
    seeds = [train_config.seed] if args.runs == 1 else derive_seeds(train_config.seed, args.runs)
    runner = _runner(args, seed=train_config.seed)
    runner.prepare({"model": model_config, "train": train_config}, inputs=[os.path.dirname(os.path.abspath(args.data))])
    logger.info("Parameters: %s", parameter_breakdown(S4Classifier(model_config)))
    runs = train_runs(
        dataset, model_config, train_config, seeds, model_id=args.model_id, output_dir=args.out, jobs=args.jobs
    )
    logger.info("Mean test macro AUC over %d runs: %.4f", len(runs), mean_macro_auc(runs))
    runner.finish([runner.path(f"run-{i:02d}") for i in range(len(runs))])


def cmd_pretrain(args: argparse.Namespace) -> None:
    cpc_config, train_config = _configs(args, CpcConfig, TrainConfig)
    set_default_dtype(train_config.dtype)
    dataset = ingest(args.data)
    runner = _runner(args, seed=train_config.seed)
    runner.prepare({"cpc": cpc_config, "train": train_config}, inputs=[os.path.dirname(os.path.abspath(args.data))])
    pretrain(dataset, cpc_config, train_config, output_dir=args.out)
    runner.finish([runner.path("backbone.ckpt"), runner.path("heads.ckpt")])


def cmd_finetune(args: argparse.Namespace) -> None:
    (train_config,) = _configs(args, TrainConfig)
    set_default_dtype(train_config.dtype)
    dataset = _load_dataset(args.data, min_count=args.min_count, seed=train_config.seed)
    runner = _runner(args, seed=train_config.seed)
    runner.prepare({"train": train_config}, inputs=[args.checkpoint, os.path.dirname(os.path.abspath(args.data))])
    full_epochs = train_config.epochs if args.full_epochs is None else args.full_epochs
    result = finetune(args.checkpoint, dataset, train_config, args.head_only_epochs, full_epochs, output_dir=args.out)
    predictions = evaluate(
        result.model,
        dataset,
        train_config.test_folds,
        train_config.crop_seconds,
        n_tta=train_config.n_tta,
        model_id=args.model_id,
        seed=train_config.seed,
    )
    predictions.save(runner.path("predictions.tsv"))
    runner.finish([runner.path("predictions.tsv")])


def cmd_eval(args: argparse.Namespace) -> None:
    model, metadata, train_config = _load_classifier(args.checkpoint)
    set_default_dtype(args.precision or train_config.dtype)
    dataset = _load_dataset(args.data, _vocabulary(metadata, args.checkpoint), seed=train_config.seed)
    runner = _runner(args, seed=train_config.seed)
    runner.prepare({"train": train_config}, inputs=[args.checkpoint, os.path.dirname(os.path.abspath(args.data))])
    test_rate = _sampling_rate(dataset)
    model.rescale_steps(args.train_fs or train_config.fs, test_rate)
    predictions = evaluate(
        model,
        dataset,
        args.folds or train_config.test_folds,
        args.window or train_config.crop_seconds,
        meta_stats_from_dict(metadata.get("meta_stats")),
        args.n_tta or train_config.n_tta,
        model_id=args.model_id or os.path.basename(args.checkpoint),
        seed=train_config.seed,
    )
    predictions.save(runner.path("predictions.tsv"))
    runner.finish([runner.path("predictions.tsv")])


def cmd_compare(args: argparse.Namespace) -> None:
    runs_a = [PredictionSet.load(path) for path in args.a]
    runs_b = [PredictionSet.load(path) for path in args.b]
    runner = _runner(args, seed=args.seed)
    runner.prepare(inputs=list(args.a) + list(args.b))
    if len(runs_a) == 1 and len(runs_b) == 1:
        report = bootstrap_compare(runs_a[0], runs_b[0], n_iter=args.n_iter, seed=args.seed)
        report.save(runner.path("report.tsv"))
        logger.info("Macro AUC difference significant: %s", report.significant)
        outputs = [runner.path("report.tsv")]
    else:
        verdict = multi_run_verdict(
            runs_a, runs_b, threshold=args.threshold, n_iter=args.n_iter, seed=args.seed, jobs=args.jobs
        )
        verdict.save(runner.path("verdict.tsv"))
        reports = verdict.save_reports(runner.path("reports"), len(runs_b))
        plot_comparison(verdict, runner.path("comparison.svg"))
        outputs = [runner.path("verdict.tsv")] + reports
    runner.finish(outputs)


def cmd_sweep(args: argparse.Namespace) -> None:
    model_config, train_config = _configs(args, ModelConfig, TrainConfig)
    set_default_dtype(train_config.dtype)
    dataset = _load_dataset(args.data, min_count=args.min_count, seed=train_config.seed)
    model_config = _fit_model_config(model_config, dataset)
    runner = _runner(args, seed=train_config.seed)
    runner.prepare({"model": model_config, "train": train_config}, inputs=[os.path.dirname(os.path.abspath(args.data))])
    seeds = [train_config.seed] if args.runs == 1 else derive_seeds(train_config.seed, args.runs)
    curve = input_size_sweep(dataset, args.windows, model_config, train_config, seeds, output_dir=args.out)
    plot_curve(curve, runner.path("curve.svg"))
    runner.finish([runner.path("curve.tsv")])


def cmd_cross_rate(args: argparse.Namespace) -> None:
    loaded = [_load_classifier(path) for path in args.checkpoints]
    _, metadata, train_config = loaded[0]
    set_default_dtype(args.precision or train_config.dtype)
    vocabulary = _vocabulary(metadata, args.checkpoints[0])
    datasets = {}
    for path in args.data:
        dataset = _load_dataset(path, vocabulary, seed=train_config.seed)
        datasets[_sampling_rate(dataset)] = dataset
    runner = _runner(args, seed=args.seed)
    runner.prepare(inputs=list(args.checkpoints) + [os.path.dirname(os.path.abspath(p)) for p in args.data])
    models = [
        TrainedModel(
            f"{i:02d}-{os.path.basename(path)}",
            model,
            args.train_fs or config.fs,
            meta_stats_from_dict(meta.get("meta_stats")),
        )
        for i, (path, (model, meta, config)) in enumerate(zip(args.checkpoints, loaded))
    ]
    matrix, predictions = cross_rate_matrix(
        models,
        datasets,
        args.folds or train_config.test_folds,
        args.window or train_config.crop_seconds,
        args.n_tta or train_config.n_tta,
    )
    write_table(matrix, runner.path("matrix.tsv"), comments=["macro AUC, rows: models, columns: test rates"])
    outputs = [runner.path("matrix.tsv")]
    if args.compare:
        rate_a, rate_b = args.compare
        missing = {rate_a, rate_b} - set(datasets)
        if missing:
            raise ConfigError(f"No test data at {sorted(missing)} Hz")
        runs_a = [by_rate[rate_a] for by_rate in predictions.values()]
        runs_b = [by_rate[rate_b] for by_rate in predictions.values()]
        verdict = compare_rates(
            runs_a, runs_b, threshold=args.threshold, n_iter=args.n_iter, seed=args.seed, jobs=args.jobs
        )
        verdict.save(runner.path("rate_verdict.tsv"))
        plot_comparison(verdict, runner.path("rate_comparison.svg"), title=f"{rate_a:g} Hz vs {rate_b:g} Hz")
        outputs.append(runner.path("rate_verdict.tsv"))
    runner.finish(outputs)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "cross-rate": cmd_cross_rate,
}


def _add_config_arguments(parser: argparse.ArgumentParser, *names: str) -> None:
    for name in names:
        parser.add_argument(f"--{name}-config", help=f"{name} configuration file (Python literal dict)")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a configuration value, e.g. --set epochs=2; may be repeated",
    )


def _add_eval_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--folds", type=int, nargs="+", help="folds to evaluate (default: the test folds)")
    parser.add_argument("--window", type=float, help="crop length in seconds (default: the training crop)")
    parser.add_argument("--n-tta", type=int, help="crops per record (default: as trained)")
    parser.add_argument("--train-fs", type=float, help="sampling rate the model was trained at (default: as trained)")
    parser.add_argument("--model-id", default="", help="model identifier recorded with the predictions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s4ecg", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for multi-run training and bootstrap")
    precision = parser.add_mutually_exclusive_group()
    precision.add_argument(
        "--f64", dest="precision", action="store_const", const="float64", help="64-bit arithmetic"
    )
    precision.add_argument(
        "--f32", dest="precision", action="store_const", const="float32", help="32-bit arithmetic"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--task", choices=sorted(TASKS), default="freq")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n-records", type=int, default=500)
    synth.add_argument("--fs", type=float, nargs="+", default=[100.0], help="one dataset per sampling rate")
    synth.add_argument("--duration", type=float, default=10.0, help="record length in seconds")
    synth.add_argument("--n-channels", type=int, default=12)
    synth.add_argument("--strength", type=float, default=0.8, help="sex/label correlation of the meta task")
    synth.add_argument("--n-folds", type=int, default=10)

    train = commands.add_parser("train", help="train supervised classifiers")
    train.add_argument("--data", required=True, help="manifest file")
    _add_config_arguments(train, "model", "train")
    train.add_argument("--runs", type=int, default=1, help="number of independently seeded runs")
    train.add_argument("--min-count", type=int, default=10, help="drop statements rarer than this")
    train.add_argument("--model-id", default="model")

    pretrain_parser = commands.add_parser("pretrain", help="contrastive pretraining on unlabeled signals")
    pretrain_parser.add_argument("--data", required=True, help="manifest file, labels are ignored")
    _add_config_arguments(pretrain_parser, "cpc", "train")

    finetune_parser = commands.add_parser("finetune", help="finetune a pretrained backbone")
    finetune_parser.add_argument("--checkpoint", required=True, help="backbone.ckpt written by pretrain")
    finetune_parser.add_argument("--data", required=True, help="labeled manifest file")
    _add_config_arguments(finetune_parser, "train")
    finetune_parser.add_argument("--head-only-epochs", type=int, default=5)
    finetune_parser.add_argument("--full-epochs", type=int, help="default: epochs of the train configuration")
    finetune_parser.add_argument("--min-count", type=int, default=10)
    finetune_parser.add_argument("--model-id", default="finetuned")

    eval_parser = commands.add_parser("eval", help="TTA predictions of a trained classifier")
    eval_parser.add_argument("--checkpoint", required=True)
    eval_parser.add_argument("--data", required=True, help="manifest file")
    _add_eval_arguments(eval_parser)

    compare = commands.add_parser("compare", help="bootstrap significance between two models")
    compare.add_argument("--a", nargs="+", required=True, help="prediction files of model a, one per run")
    compare.add_argument("--b", nargs="+", required=True, help="prediction files of model b, one per run")
    compare.add_argument("--n-iter", type=int, default=1000)
    compare.add_argument("--threshold", type=float, default=0.6)
    compare.add_argument("--seed", type=int, default=0)

    sweep = commands.add_parser("sweep", help="macro AUC versus input size")
    sweep.add_argument("--data", required=True, help="manifest file")
    sweep.add_argument("--windows", type=float, nargs="+", required=True, help="input sizes in seconds")
    _add_config_arguments(sweep, "model", "train")
    sweep.add_argument("--runs", type=int, default=1)
    sweep.add_argument("--min-count", type=int, default=10)

    cross_rate = commands.add_parser("cross-rate", help="evaluate at sampling rates other than the training rate")
    cross_rate.add_argument("--checkpoints", nargs="+", required=True)
    cross_rate.add_argument("--data", nargs="+", required=True, help="one manifest per test sampling rate")
    _add_eval_arguments(cross_rate)
    cross_rate.add_argument(
        "--compare", type=float, nargs=2, metavar=("RATE_A", "RATE_B"), help="significance between two test rates"
    )
    cross_rate.add_argument("--n-iter", type=int, default=1000)
    cross_rate.add_argument("--threshold", type=float, default=0.6)
    cross_rate.add_argument("--seed", type=int, default=0)

    for subparser in commands.choices.values():
        subparser.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    if args.precision is not None:
        set_default_dtype(args.precision)
    logger.info("s4ecg %s", args.command)
    try:
        COMMANDS[args.command](args)
    except (S4EcgError, OSError) as e:
        message = " ".join(str(e).split())
        sys.stderr.write(f"error: {type(e).__name__}: {message}\n")
        return 1
    logger.info("s4ecg %s finished", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())

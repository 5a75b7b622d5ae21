""":mod:`daodet.cli`
===================

Command line entry point (installed as the ``daodet`` script)::

    daodet generate-data --config experiment.yaml [--force]
    daodet burnin        --config experiment.yaml [--preset aldi_pp]
    daodet train         --config experiment.yaml [--preset aldi_pp] [--resume]
    daodet eval          --config experiment.yaml --params run/final.params
    daodet compare       --config experiment.yaml
    daodet ablate        --config experiment.yaml [--axis batch_ratio --values 0 0.5 1]

Every command accepts ``--seed`` and repeated ``--set key=value`` overrides.
Keys starting with ``train.`` override the training config of the runs,
other keys the experiment file itself (``dataset.seed=3``).

Output goes to ``output_dir`` from the experiment file, else to
``$DAODET_OUTPUT_ROOT``, else to ``./daodet-output``::

    <out>/data/                     generated benchmark and manifest.json
    <out>/data/translated/          stylized images for img2img alignment
    <out>/runs/<preset>-seed<s>-<hash8>/
    <out>/reports/                  compare and ablate tables
    <out>/cache/                    run cache

"""
import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
import sys
from typing import Any, Dict, Optional, Tuple

import numpy as np

import daodet
from daodet import align, trainer
from daodet.config import (
    ConfigError,
    config_hash,
    dump_yaml,
    from_dict,
    load_yaml,
    parse_override,
    apply_overrides,
)
from daodet.datamodel import (
    Domain,
    DomainPair,
    SyntheticConfig,
    load_coco,
    make_synthetic_shift,
    save_coco,
)
from daodet.detector import load_params, save_params
from daodet.evalmetrics import (
    EvaluationError,
    convergence_time,
    extract_features,
    frechet_dissimilarity,
    pca_embed,
    write_embedding_csv,
)
from daodet.runcache import cache_key

__all__ = [
    "CliError",
    "DatasetSection",
    "AblationSection",
    "ExperimentConfig",
    "ComparisonRow",
    "cmd_generate_data",
    "cmd_burnin",
    "cmd_train",
    "cmd_eval",
    "cmd_compare",
    "cmd_ablate",
    "main",
]

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DAODET_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "daodet-output"
MANIFEST = "manifest.json"

# (split, domain, labeled)
SPLITS = (
    ("source_train", Domain.SOURCE, True),
    ("target_train", Domain.TARGET, False),
    ("target_test", Domain.TARGET, True),
    ("target_train_labeled", Domain.TARGET, True),
)


class CliError(RuntimeError):
    """ A command cannot proceed (refused overwrite, missing input...). """


@dataclasses.dataclass(frozen=True)
class DatasetSection:
    """ Where the benchmark comes from.

    :attr root: directory holding ``<split>.json`` COCO files and
        ``images/<split>/``; defaults to ``<out>/data``.
    """

    synthetic: SyntheticConfig = SyntheticConfig()
    seed: int = 0
    root: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class AblationSection:
    axis: str = "distill_mode"
    values: Tuple[Any, ...] = ("hard", "soft")
    base_preset: str = "mean_teacher_base"


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """ Content of an experiment YAML file.

    :attr overrides: dotted keys into :class:`~daodet.trainer.TrainConfig`
        shared by every run of the experiment.
    :attr max_feature_images: images per domain used for the Fréchet
        dissimilarity columns of reports.
    """

    dataset: DatasetSection = DatasetSection()
    preset: str = "aldi_pp"
    presets: Tuple[str, ...] = ("source_only", "oracle", "aldi_pp")
    seeds: Tuple[int, ...] = (0,)
    overrides: Dict[str, Any] = dataclasses.field(default_factory=dict)
    output_dir: Optional[str] = None
    eval_every: Optional[int] = None
    max_feature_images: int = 50
    ablation: AblationSection = AblationSection()

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("should list at least one seed", "seeds")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("should be non-negative", "seeds")
        if self.eval_every is not None and self.eval_every <= 0:
            raise ConfigError("should be positive", "eval_every")


@dataclasses.dataclass(frozen=True)
class ComparisonRow:
    method: str
    seed: int
    ap50: float
    convergence_step: int
    dissimilarity_image: float
    dissimilarity_instance: float
    reference: bool
    run_dir: str


# experiment loading


def load_experiment(path, overrides=()):
    """ Read an experiment file and apply ``--set`` overrides.

    :returns: ``(ExperimentConfig, train_overrides)``.
    """
    data = load_yaml(path) if path else {}
    experiment = from_dict(ExperimentConfig, data)
    exp_overrides, train_overrides = {}, dict(experiment.overrides)
    for text in overrides:
        key, value = parse_override(text)
        if key.startswith("train."):
            train_overrides[key[len("train."):]] = value
        else:
            exp_overrides[key] = value
    experiment = apply_overrides(experiment, exp_overrides)
    if experiment.eval_every is not None:
        train_overrides.setdefault("eval_every", experiment.eval_every)
    return experiment, train_overrides


def output_root(experiment):
    return experiment.output_dir or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT


def data_dir(experiment):
    return experiment.dataset.root or os.path.join(output_root(experiment), "data")


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory, seed, data_config_hash):
    """ Hash every file below ``directory`` into ``manifest.json``.

    ``hash`` covers the seed, the data config hash and all file digests, so two
    generations with the same config and seed have the same manifest hash.
    """
    files = {}
    for dirpath, _, filenames in os.walk(directory):
        for name in filenames:
            path = os.path.join(dirpath, name)
            rel = os.path.relpath(path, directory).replace(os.sep, "/")
            if rel != MANIFEST:
                files[rel] = _sha256(path)
    body = {"seed": seed, "data_config_hash": data_config_hash, "files": dict(sorted(files.items()))}
    body["hash"] = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
    with open(os.path.join(directory, MANIFEST), "w") as f:
        json.dump(body, f, indent=1, sort_keys=True)
    return body


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST)
    if not os.path.isfile(path):
        raise CliError("no dataset at %s (run generate-data first)" % directory)
    with open(path) as f:
        return json.load(f)


def load_pair(directory):
    """ Load the four splits written by :func:`cmd_generate_data` (the
    labeled target split is optional).
    """
    splits = {}
    for name, domain, labeled in SPLITS:
        annotation_file = os.path.join(directory, "%s.json" % name)
        if not os.path.isfile(annotation_file):
            if name == "target_train_labeled":
                continue
            raise CliError("missing split %s in %s" % (name, directory))
        splits[name] = load_coco(annotation_file, os.path.join(directory, "images", name), domain, labeled)
    return DomainPair(**splits)


def _train_config(preset, train_overrides, seed, directory):
    overrides = dict(train_overrides)
    overrides["seed"] = seed
    config = trainer.resolve_preset(preset, overrides)
    if config.align.img2img and not config.align.translated_root:
        config = apply_overrides(config, {"align.translated_root": os.path.join(directory, "translated")})
    return config


def preset_label(preset):
    """ Name of a preset given by name or as a :class:`MethodPreset`. """
    return preset.name if isinstance(preset, trainer.MethodPreset) else str(preset)


def run_dir_for(experiment, preset, seed, config):
    name = "%s-seed%d-%s" % (preset_label(preset).replace(":", "_"), seed, config_hash(config)[:8])
    return os.path.join(output_root(experiment), "runs", name)


# commands


def cmd_generate_data(experiment, force=False, seed=None):
    """ Generate the synthetic benchmark in COCO layout.

    :returns: the dataset directory.
    """
    directory = data_dir(experiment)
    if os.path.isdir(directory) and os.listdir(directory):
        if not force:
            raise CliError("%s is not empty (use --force to overwrite)" % directory)
        shutil.rmtree(directory)
    seed = experiment.dataset.seed if seed is None else seed
    synthetic = experiment.dataset.synthetic
    pair = make_synthetic_shift(synthetic, seed)
    for name, split in pair.splits().items():
        save_coco(split, os.path.join(directory, "%s.json" % name), os.path.join(directory, "images", name))
    align.stylize_pair(pair, os.path.join(directory, "translated"), synthetic, seed)
    manifest = write_manifest(directory, seed, config_hash(synthetic))
    logger.info("dataset written to %s (manifest %s)", directory, manifest["hash"][:12])
    return directory


def cmd_burnin(experiment, train_overrides, preset=None, seed=None, progress=False):
    """ Run the burn-in of a preset alone; writes ``burnin.params`` and the
    validation curve. Returns the output directory.
    """
    preset = preset or experiment.preset
    seed = experiment.seeds[0] if seed is None else seed
    directory = data_dir(experiment)
    pair = load_pair(directory)
    config = _train_config(preset, train_overrides, seed, directory)
    result = trainer.burn_in(pair, config, progress=progress)
    out = os.path.join(output_root(experiment), "burnin", "%s-seed%d" % (preset.replace(":", "_"), seed))
    os.makedirs(out, exist_ok=True)
    save_params(result.initialization, os.path.join(out, "burnin.params"))
    trainer.write_curve_csv([(it, "val_ap50", v) for it, v in result.val_curve], os.path.join(out, "val.csv"))
    dump_yaml(config, os.path.join(out, "config.yaml"))
    logger.info("burn-in (%s) stopped at iteration %d", result.mode, result.stop_iteration)
    return out


def _dissimilarities(params, pair, config, max_images):
    values = {}
    for pooling in ("image_level", "instance_level"):
        source = extract_features(params, pair.source_train, config.detector, pooling, max_images)
        target = extract_features(params, pair.target_test, config.detector, pooling, max_images)
        try:
            values[pooling] = frechet_dissimilarity(source, target)
        except EvaluationError as e:
            logger.warning("no %s dissimilarity: %s", pooling, e)
            values[pooling] = float("nan")
    return values


def _train_run(experiment, preset, train_overrides, seed, resume=False, progress=False, cache=None):
    """ Train one preset/seed (or reuse the cached run). Returns the summary. """
    directory = data_dir(experiment)
    manifest = read_manifest(directory)
    config = _train_config(preset, train_overrides, seed, directory)
    key = cache_key(config_hash(config), manifest["hash"], daodet.__version__)
    if cache is not None and not resume:
        summary = cache.get(key)
        if summary is not None and os.path.isfile(os.path.join(summary["run_dir"], "final.params")):
            logger.info("reusing cached run %s", summary["run_dir"])
            return summary

    pair = load_pair(directory)
    run_dir = run_dir_for(experiment, preset, seed, config)
    os.makedirs(run_dir, exist_ok=True)
    dump_yaml(config, os.path.join(run_dir, "config.yaml"))
    run = trainer.run_training(None, pair, run_dir=run_dir, resume=resume, progress=progress, config=config)
    d_f = _dissimilarities(run.final_teacher, pair, config, experiment.max_feature_images)
    summary = {
        "preset": preset_label(preset),
        "seed": seed,
        "run_dir": run_dir,
        "ap50": run.metric_curve[-1][1],
        "metric_curve": [list(p) for p in run.metric_curve],
        "convergence_step": convergence_time(run.metric_curve),
        "dissimilarity_image": d_f["image_level"],
        "dissimilarity_instance": d_f["instance_level"],
        "manifest": manifest["hash"],
    }
    with open(os.path.join(run_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=1)
    if cache is not None:
        cache.put(key, summary)
    return summary


def cmd_train(experiment, train_overrides, preset=None, seed=None, resume=False, progress=False):
    """ Train one run; returns its directory. """
    preset = preset or experiment.preset
    seed = experiment.seeds[0] if seed is None else seed
    summary = _train_run(experiment, preset, train_overrides, seed, resume=resume, progress=progress)
    logger.info("%s seed %d: final AP50 %.4f", preset, seed, summary["ap50"])
    return summary["run_dir"]


def cmd_eval(experiment, train_overrides, params_file, preset=None, seed=None):
    """ Evaluate a parameter file on ``target_test``: writes ``eval.json``,
    ``eval.csv``, feature files and the PCA embedding CSVs next to it.
    """
    preset = preset or experiment.preset
    seed = experiment.seeds[0] if seed is None else seed
    directory = data_dir(experiment)
    pair = load_pair(directory)
    config = _train_config(preset, train_overrides, seed, directory)
    params = load_params(params_file)
    result = trainer.evaluate(params, pair.target_test, config.detector)
    out = os.path.join(os.path.dirname(os.path.abspath(params_file)), "eval")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "eval.json"), "w") as f:
        f.write(result.to_json())
    result.write_csv(os.path.join(out, "eval.csv"), pair.class_names)
    for pooling in ("image_level", "instance_level"):
        samples = [
            extract_features(params, split, config.detector, pooling, experiment.max_feature_images)
            for split in (pair.source_train, pair.target_test)
        ]
        try:
            embedding = pca_embed(samples, dims=2)
        except EvaluationError as e:
            logger.warning("no %s embedding: %s", pooling, e)
            continue
        write_embedding_csv(embedding, ("source", "target"), os.path.join(out, "pca_%s.csv" % pooling))
        logger.info("%s PCA explained variance %.3f", pooling, embedding.explained_variance_ratio)
    logger.info("AP50 %.4f", result.ap50)
    return out


def _open_cache(experiment):
    path = os.path.join(output_root(experiment), "cache")
    return daodet.RunCache(path)


def _fmt(value):
    return "nan" if value is None or (isinstance(value, float) and math.isnan(value)) else "%.4f" % value


def _mean_std(values):
    values = [v for v in values if not math.isnan(v)]
    if not values:
        return float("nan"), float("nan")
    std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return float(np.mean(values)), std


def write_report(rows, name, experiment, label="method"):
    """ ``<out>/reports/<name>.csv`` (one row per run) and ``<name>.md``
    (mean and sample standard deviation per method).
    """
    out = os.path.join(output_root(experiment), "reports")
    os.makedirs(out, exist_ok=True)
    fields = [f.name for f in dataclasses.fields(ComparisonRow)]
    with open(os.path.join(out, "%s.csv" % name), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([label if n == "method" else n for n in fields])
        for row in rows:
            writer.writerow([getattr(row, n) for n in fields])
    groups = {}
    for row in rows:
        groups.setdefault(row.method, []).append(row)
    lines = [
        "| %s | runs | AP50 | convergence | d_F image | d_F instance | reference |" % label,
        "|---|---|---|---|---|---|---|",
    ]
    for method, group in groups.items():
        cells = [method, str(len(group))]
        for attr in ("ap50", "convergence_step", "dissimilarity_image", "dissimilarity_instance"):
            mean, std = _mean_std([float(getattr(r, attr)) for r in group])
            cells.append("%s ± %s" % (_fmt(mean), _fmt(std)))
        cells.append("yes" if group[0].reference else "")
        lines.append("| %s |" % " | ".join(cells))
    with open(os.path.join(out, "%s.md" % name), "w") as f:
        f.write("\n".join(lines) + "\n")
    return out


def _row(method, summary, reference):
    return ComparisonRow(
        method,
        summary["seed"],
        summary["ap50"],
        summary["convergence_step"],
        summary["dissimilarity_image"],
        summary["dissimilarity_instance"],
        reference,
        summary["run_dir"],
    )


def cmd_compare(experiment, train_overrides, seeds=None, progress=False):
    """ Train (or reuse) every preset x seed on the same data and shared
    overrides; returns the report rows.
    """
    seeds = seeds or experiment.seeds
    directory = data_dir(experiment)
    if "oracle" in experiment.presets and not os.path.isfile(
        os.path.join(directory, "target_train_labeled.json")
    ):
        raise CliError("the oracle preset needs the target_train_labeled split")
    references = {name: trainer.lookup_preset(name).reference for name in experiment.presets}
    cache = _open_cache(experiment)
    rows = []
    try:
        for preset in experiment.presets:
            for seed in seeds:
                summary = _train_run(experiment, preset, train_overrides, seed, progress=progress, cache=cache)
                rows.append(_row(preset, summary, references[preset]))
    finally:
        cache.close()
    write_report(rows, "compare", experiment)
    return rows


def cmd_ablate(experiment, train_overrides, axis=None, values=None, seeds=None, progress=False):
    """ One run per axis value and seed, everything else at the base preset. """
    section = experiment.ablation
    axis = axis or section.axis
    values = list(values if values else section.values)
    seeds = seeds or experiment.seeds
    base = trainer.PRESETS.get(section.base_preset)
    if base is None:
        raise trainer.PresetError("unknown base preset %r" % section.base_preset)
    cache = _open_cache(experiment)
    rows = []
    try:
        for value in values:
            changes = trainer.ablation_overrides(axis, value)
            preset = trainer.MethodPreset(
                "%s.%s=%s" % (base.name, axis, value),
                base.description,
                trainer.merge_overrides(copy.deepcopy(base.overrides), changes),
            )
            for seed in seeds:
                summary = _train_run(experiment, preset, train_overrides, seed, progress=progress, cache=cache)
                rows.append(_row("%s=%s" % (axis, value), summary, False))
    finally:
        cache.close()
    write_report(rows, "ablate-%s" % axis, experiment, label=axis)
    return rows


# argument parsing


def _coerce_value(text):
    try:
        return float(text) if any(c in text for c in ".e") else int(text)
    except ValueError:
        return text


def build_parser():
    parser = argparse.ArgumentParser(prog="daodet", description=__doc__.split("\n\n")[1].strip())
    parser.add_argument("--version", action="version", version="%(prog)s " + daodet.__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, help="override the seed")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="dotted-key override, repeatable (train.* keys go to the training config)",
    )
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    common.add_argument("--progress", action="store_true", help="show progress bars")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate-data", parents=[common], help="generate the synthetic benchmark")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty dataset directory")
    p = sub.add_parser("burnin", parents=[common], help="run the burn-in stage alone")
    p.add_argument("--preset")
    p = sub.add_parser("train", parents=[common], help="train one preset")
    p.add_argument("--preset")
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p = sub.add_parser("eval", parents=[common], help="evaluate a parameter file")
    p.add_argument("--preset")
    p.add_argument("--params", required=True, help="parameter file to evaluate")
    sub.add_parser("compare", parents=[common], help="compare presets over seeds")
    p = sub.add_parser("ablate", parents=[common], help="sweep one ablation axis")
    p.add_argument("--axis", choices=sorted(trainer.ABLATIONS))
    p.add_argument("--values", nargs="+", type=_coerce_value)
    return parser


def configure_logging(verbosity):
    level = logging.WARNING if verbosity <= 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")


def run(args):
    experiment, train_overrides = load_experiment(args.config, args.overrides)
    seeds = (args.seed,) if args.seed is not None else None
    if args.command == "generate-data":
        return cmd_generate_data(experiment, force=args.force, seed=args.seed)
    if args.command == "burnin":
        return cmd_burnin(experiment, train_overrides, args.preset, args.seed, args.progress)
    if args.command == "train":
        return cmd_train(experiment, train_overrides, args.preset, args.seed, args.resume, args.progress)
    if args.command == "eval":
        return cmd_eval(experiment, train_overrides, args.params, args.preset, args.seed)
    if args.command == "compare":
        cmd_compare(experiment, train_overrides, seeds, args.progress)
        return os.path.join(output_root(experiment), "reports")
    if args.command == "ablate":
        cmd_ablate(experiment, train_overrides, args.axis, args.values, seeds, args.progress)
        return os.path.join(output_root(experiment), "reports")
    raise CliError("unknown command %r" % args.command)


def main(argv=None):
    """ Run the command line; returns the exit code (0 or 2). """
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        result = run(args)
    except (CliError, ValueError, ArithmeticError, LookupError, OSError) as e:
        print("daodet: error: %s" % e, file=sys.stderr)
        return 2
    print(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())

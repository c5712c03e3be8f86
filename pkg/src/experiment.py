"""Config-driven experiment runner.

Usage:
    python src/experiment.py run <config.json> [--seed-override 0,1,2] [--out-dir DIR]
    python src/experiment.py validate <config.json>

Exit codes: 0 success, 2 invalid config, 3 training diverged.
"""
import argparse
import csv
import json
import logging
import os
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from augment import AugConfig
from cluster import (TaskDistribution, build_task_distribution, embed, kmeans, supervised_distribution,
                     train_autoencoder)
from constants import (BALANCED_MODES, CL_METHODS, DEFAULTS, EXPERIMENT_KINDS, UPDATE_MODES, VERSION)
from continual import cl_architecture, run_method, summary, write_record
from data import (MNIST_FILES, data_path, load_idx, load_mnist, make_class_stream, make_synthetic_fewshot,
                  split_classes, split_samples)
from errors import ConfigError, DivergenceError, FusionError
from meml import MetaHyper, meta_test, meta_train, write_loss_trace
from model import Architecture, save_checkpoint

logger = logging.getLogger(__name__)

DATASET_KINDS = ('synthetic', 'idx', 'mnist')
FUSION_KINDS = ('fusion_meml', 'fusion_memlx', 'ablation_single_vs_multi', 'ablation_balanced_vs_unbalanced')
# Keys that decide the task distribution; the cache file name hashes them.
TASK_KEYS = ('dataset.', 'synthetic.', 'split.', 'embed.', 'cluster.', 'tasks.')
# Holdout fraction when the Class-IL benchmark runs on a single-file dataset.
CL_TEST_FRACTION = 0.25


# ---------------------------------------------------------------- config

def _type_ok(value, types):
    if isinstance(value, bool):
        return bool in types
    return isinstance(value, types)


def _check_int_list(config, key, errors, minimum=1, allow_empty=False):
    value = config[key]
    if not isinstance(value, list) or (not value and not allow_empty):
        errors.append((key, "must be a non-empty list of integers"))
    elif not all(isinstance(v, int) and not isinstance(v, bool) and v >= minimum for v in value):
        errors.append((key, f"every entry must be an integer >= {minimum}"))


def resolve_config(raw, check_files=True):
    """Merge `raw` over DEFAULTS and check every field; raises ConfigError listing all problems."""
    if not isinstance(raw, dict):
        raise ConfigError([('<root>', "config must be a JSON object")])
    errors = [(key, "unknown key") for key in sorted(raw) if key not in DEFAULTS]
    config = {key: default for key, (default, _) in DEFAULTS.items()}
    for key, value in raw.items():
        if key not in DEFAULTS:
            continue
        default, types = DEFAULTS[key]
        if value is None and default is None:
            config[key] = None
        elif not _type_ok(value, types):
            names = '/'.join(t.__name__ for t in types)
            errors.append((key, f"expected {names}, got {type(value).__name__}"))
        else:
            config[key] = value
    if errors:
        raise ConfigError(errors)

    kind = config['kind']
    if kind not in EXPERIMENT_KINDS:
        errors.append(('kind', f"must be one of {', '.join(EXPERIMENT_KINDS)}"))
    _check_int_list(config, 'seeds', errors, minimum=0)
    for key in ('model.conv_strides', 'test.task_counts'):
        _check_int_list(config, key, errors)
    for key in ('model.mlp_hidden', 'model.cln_hidden'):
        _check_int_list(config, key, errors, allow_empty=True)

    for key, low in (('run.workers', 1), ('run.log_every', 0), ('embed.latent_dim', 2), ('embed.epochs', 0),
                     ('embed.hidden', 1), ('embed.batch', 1), ('cluster.k', 1), ('cluster.max_iters', 1),
                     ('tasks.min_cluster_size', 3), ('tasks.query_random_count', 0), ('meta.steps', 1),
                     ('meta.m', 1), ('test.shots', 1), ('test.epochs', 1), ('cl.classes_per_task', 1),
                     ('cl.buffer', 0), ('cl.batch', 1), ('cl.epochs', 1), ('split.train', 0),
                     ('split.val', 0), ('split.test', 0), ('synthetic.num_classes', 1),
                     ('synthetic.image_size', 7), ('model.conv_channels', 1)):
        if config[key] < low:
            errors.append((key, f"must be >= {low}"))
    for key in ('meta.alpha', 'meta.beta', 'embed.lr', 'cl.alpha', 'cl.beta'):
        if not config[key] > 0:
            errors.append((key, "must be > 0"))
    for key in ('cl.lr', 'synthetic.noise'):
        if config[key] < 0:
            errors.append((key, "must be >= 0"))
    if config['test.lr'] is not None and config['test.lr'] < 0:
        errors.append(('test.lr', "must be >= 0"))
    if config['synthetic.min_per_class'] < 2 or config['synthetic.max_per_class'] < config['synthetic.min_per_class']:
        errors.append(('synthetic.min_per_class', "need 2 <= min_per_class <= max_per_class"))

    for key, choices in (('dataset.kind', DATASET_KINDS), ('tasks.balanced_mode', BALANCED_MODES),
                         ('meta.update_mode', UPDATE_MODES), ('meta.outer_optimizer', ('adam', 'sgd'))):
        if config[key] not in choices:
            errors.append((key, f"must be one of {', '.join(choices)}"))
    methods = config['cl.methods']
    if not methods or not all(m in CL_METHODS for m in methods):
        errors.append(('cl.methods', f"must be a non-empty list drawn from {', '.join(CL_METHODS)}"))

    balance = config['tasks.balance_size']
    if balance is not None and balance < config['tasks.min_cluster_size']:
        errors.append(('tasks.balance_size', "must be >= tasks.min_cluster_size"))

    if not errors:
        errors.extend(_dataset_errors(config, check_files))
    if errors:
        raise ConfigError(errors)
    return config


def _dataset_errors(config, check_files):
    errors = []
    kind, source = config['kind'], config['dataset.kind']
    if source == 'idx':
        required = ['dataset.images', 'dataset.labels']
        if kind == 'cl_bench' and (config['dataset.test_images'] or config['dataset.test_labels']):
            required += ['dataset.test_images', 'dataset.test_labels']
        for key in required:
            if not config[key]:
                errors.append((key, "required when dataset.kind is idx"))
            elif check_files and not os.path.exists(data_path(config[key])):
                errors.append((key, f"file not found: {data_path(config[key])}"))
    elif source == 'mnist' and check_files:
        for files in MNIST_FILES.values():
            for name in files:
                if not os.path.exists(data_path(name)):
                    errors.append(('dataset.kind', f"MNIST file not found: {data_path(name)}"))
    elif source == 'synthetic':
        classes = config['synthetic.num_classes']
        if kind in FUSION_KINDS:
            wanted = config['split.train'] + config['split.val'] + config['split.test']
            if wanted > classes:
                errors.append(('split.train', f"splits ask for {wanted} classes; synthetic.num_classes is {classes}"))
            if max(config['test.task_counts'], default=0) > config['split.test']:
                errors.append(('test.task_counts', f"task counts exceed split.test={config['split.test']}"))
        elif kind == 'cl_bench' and classes % config['cl.classes_per_task']:
            errors.append(('cl.classes_per_task', f"must divide synthetic.num_classes={classes}"))
    if kind in FUSION_KINDS and config['split.train'] < 1:
        errors.append(('split.train', "FUSION experiments need training classes"))
    if kind in FUSION_KINDS and config['split.test'] < 1:
        errors.append(('split.test', "FUSION experiments need test classes"))
    return errors


def load_config(path, check_files=True):
    try:
        with open(path) as f:
            raw = json.load(f)
    except OSError as err:
        raise ConfigError([('<file>', f"cannot read {path}: {err.strerror}")])
    except json.JSONDecodeError as err:
        raise ConfigError([('<file>', f"{path} is not valid JSON: {err.msg} at line {err.lineno}")])
    return resolve_config(raw, check_files)


def config_digest(config, prefixes=TASK_KEYS):
    relevant = {k: v for k, v in config.items() if k.startswith(prefixes)}
    return zlib.crc32(json.dumps(relevant, sort_keys=True).encode('utf-8'))


# -------------------------------------------------------------- datasets

def load_dataset(config):
    """The full dataset named by the config, plus a separate test file when one is given."""
    source = config['dataset.kind']
    if source == 'synthetic':
        dataset = make_synthetic_fewshot(
            config['synthetic.num_classes'],
            (config['synthetic.min_per_class'], config['synthetic.max_per_class']),
            config['synthetic.image_size'], config['synthetic.noise'], config['synthetic.seed'])
        return dataset, None
    if source == 'mnist':
        return load_mnist('train'), load_mnist('test')
    dataset = load_idx(data_path(config['dataset.images']), data_path(config['dataset.labels']))
    test = None
    if config['dataset.test_images']:
        test = load_idx(data_path(config['dataset.test_images']), data_path(config['dataset.test_labels']))
    return dataset, test


def architecture(config, input_shape, num_classes):
    return Architecture(
        input_shape=input_shape,
        num_classes=num_classes,
        conv_channels=config['model.conv_channels'],
        conv_strides=tuple(config['model.conv_strides']),
        mlp_hidden=tuple(config['model.mlp_hidden']),
        cln_hidden=tuple(config['model.cln_hidden']),
        attention_hidden=config['model.attention_hidden'],
    )


def aug_config(config):
    return AugConfig(
        brightness=config['aug.brightness'],
        contrast_low=config['aug.contrast_low'],
        contrast_high=config['aug.contrast_high'],
        saturation=config['aug.saturation'],
        hue=config['aug.hue'],
        max_shift=config['aug.max_shift'],
    )


def meta_hyper(config, **overrides):
    fields = dict(
        alpha=config['meta.alpha'],
        beta=config['meta.beta'],
        steps=config['meta.steps'],
        memlx_enabled=config['kind'] == 'fusion_memlx',
        m=config['meta.m'],
        update_mode=config['meta.update_mode'],
        outer_optimizer=config['meta.outer_optimizer'],
        reset_head_row=config['meta.reset_head_row'],
    )
    fields.update(overrides)
    return MetaHyper(**fields)


# ------------------------------------------------------------- pipelines

def pseudo_labels(config, train, seed):
    """Autoencoder embedding -> k-means labels, or the true labels in supervised mode."""
    if config['tasks.supervised']:
        return train.labels
    encoder = train_autoencoder(train, config['embed.latent_dim'], config['embed.epochs'], config['embed.lr'],
                                seed, hidden=config['embed.hidden'], batch_size=config['embed.batch'],
                                progress=config['run.progress'])
    k = min(config['cluster.k'], len(train))
    return kmeans(embed(encoder, train), k, config['cluster.max_iters'], seed).labels


def task_distribution(config, train, seed, seed_dir, mode=None, labels=None):
    """Build (or load from the per-seed cache) the task distribution for one balanced mode."""
    mode = mode or config['tasks.balanced_mode']
    path = os.path.join(seed_dir, f"tasks-{mode}-{config_digest(config):08x}.fdist")
    if os.path.exists(path):
        logger.info("seed %d: task distribution from cache %s", seed, path)
        return TaskDistribution.load(path)

    if config['tasks.supervised'] and mode == 'off':
        distribution = supervised_distribution(train.labels, config['tasks.min_cluster_size'],
                                               config['tasks.query_random_count'])
    else:
        labels = labels if labels is not None else pseudo_labels(config, train, seed)
        distribution = build_task_distribution(labels, config['tasks.min_cluster_size'],
                                               config['tasks.query_random_count'], mode,
                                               config['tasks.balance_size'], seed)
    distribution.save(path)
    return distribution


def _fusion_splits(config, seed):
    dataset, _ = load_dataset(config)
    train, _, test = split_classes(dataset, config['split.train'], config['split.val'], config['split.test'], seed)
    return train, test


def _train_and_test(config, distribution, train, test, seed, seed_dir, tag, **overrides):
    hyper = meta_hyper(config, **overrides)
    arch = architecture(config, train.image_shape, distribution.num_classes)
    result = meta_train(distribution, train.images, arch, hyper, seed, aug_config(config),
                        progress=config['run.progress'], log_every=config['run.log_every'])
    counts = [n for n in config['test.task_counts'] if n <= test.class_count] or [test.class_count]
    aggregation = 'mean' if hyper.update_mode == 'mean' else 'attention'
    lr = config['test.lr'] if config['test.lr'] is not None else config['meta.alpha']
    curve = meta_test(result.params, test, config['test.shots'], seed, counts, config['test.epochs'], lr,
                      train_dataset=train, aggregation=aggregation)

    write_loss_trace(result.losses, os.path.join(seed_dir, f"loss-{tag}.csv"))
    _write_rows(os.path.join(seed_dir, f"meta_test-{tag}.csv"), ['tasks', 'accuracy'],
                curve.as_dict().items())
    save_checkpoint(result.params, os.path.join(seed_dir, f"model-{tag}.fsck"))
    tail = result.losses[-min(100, len(result.losses)):]
    return {
        'meta_test': {str(n): acc for n, acc in curve.as_dict().items()},
        'final_loss': float(tail.mean()),
        'inner_steps': result.inner_steps,
    }


def run_fusion(config, seed, seed_dir):
    train, test = _fusion_splits(config, seed)
    distribution = task_distribution(config, train, seed, seed_dir)
    tag = 'memlx' if config['kind'] == 'fusion_memlx' else 'meml'
    return _train_and_test(config, distribution, train, test, seed, seed_dir, tag)


def ablation_single_vs_multi(config, seed, seed_dir):
    """The four inner-loop update modes on one task distribution."""
    train, test = _fusion_splits(config, seed)
    distribution = task_distribution(config, train, seed, seed_dir)
    return {mode: _train_and_test(config, distribution, train, test, seed, seed_dir, mode, update_mode=mode)
            for mode in ('meml', 'single', 'mean', 'multi')}


def ablation_balanced_vs_unbalanced(config, seed, seed_dir):
    """Every balanced mode on the same pseudo-labels."""
    train, test = _fusion_splits(config, seed)
    labels = pseudo_labels(config, train, seed)
    results = {}
    for mode in BALANCED_MODES:
        distribution = task_distribution(config, train, seed, seed_dir, mode, labels)
        sizes = distribution.sizes()
        results[mode] = _train_and_test(config, distribution, train, test, seed, seed_dir, mode)
        results[mode].update(tasks=len(distribution), min_size=int(sizes.min()), max_size=int(sizes.max()))
    return results


def run_cl_bench(config, seed, seed_dir):
    dataset, test = load_dataset(config)
    if test is None:
        dataset, test = split_samples(dataset, CL_TEST_FRACTION, seed)
    stream = make_class_stream(dataset, config['cl.classes_per_task'])
    test_stream = make_class_stream(test, config['cl.classes_per_task'])
    arch = cl_architecture(dataset.image_shape, dataset.class_count, config['model.mlp_hidden'])

    results = {}
    for method in config['cl.methods']:
        record = run_method(method, stream, test_stream, arch, seed, config['cl.buffer'], config['cl.batch'],
                            config['cl.epochs'], config['cl.lr'], config['cl.alpha'], config['cl.beta'],
                            aug_config(config), config['run.progress'])
        write_record(record, os.path.join(seed_dir, f"class_il-{method}.csv"))
        results[method] = summary(record)
        logger.info("seed %d %s: final accuracy %.2f%%", seed, method, record.final_acc)
    return results


PIPELINES = {
    'fusion_meml': run_fusion,
    'fusion_memlx': run_fusion,
    'cl_bench': run_cl_bench,
    'ablation_single_vs_multi': ablation_single_vs_multi,
    'ablation_balanced_vs_unbalanced': ablation_balanced_vs_unbalanced,
}


def run_seed(config, seed, seed_dir):
    os.makedirs(seed_dir, exist_ok=True)
    logger.info("seed %d: %s", seed, config['kind'])
    results = PIPELINES[config['kind']](config, seed, seed_dir)
    _write_json(os.path.join(seed_dir, 'results.json'), results)
    return results


# ------------------------------------------------------------ reporting

def _write_json(path, obj):
    with open(path, 'w') as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write('\n')


def _write_rows(path, header, rows):
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def aggregate(per_seed):
    """Mean and population std over seeds of every numeric leaf; seeds share one result shape."""
    first = per_seed[0]
    if isinstance(first, dict):
        out = {}
        for key in first:
            out[key] = aggregate([r[key] for r in per_seed])
        return out
    values = np.array(per_seed, dtype=np.float64)
    return {'mean': float(values.mean()), 'std': float(values.std())}


class ExperimentRunner:
    """Runs one experiment config over its seed list and writes the run directory."""

    def __init__(self, config, out_dir=None):
        self.config = config
        self.out_dir = out_dir or config['out_dir']
        self.seeds = list(config['seeds'])
        self.results = {}

    def seed_dir(self, seed):
        return os.path.join(self.out_dir, f"seed_{seed}")

    def start(self):
        """Create the run directory and snapshot the resolved config."""
        os.makedirs(self.out_dir, exist_ok=True)
        _write_json(os.path.join(self.out_dir, 'config.resolved.json'), self.config)
        logger.info("%s: %d seed(s) into %s", self.config['kind'], len(self.seeds), self.out_dir)

    def run(self):
        """Execute every seed, in a process pool when run.workers > 1, and reduce in seed order."""
        workers = min(self.config['run.workers'], len(self.seeds))
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_seed, self.config, s, self.seed_dir(s)) for s in self.seeds]
                outputs = [f.result() for f in futures]
        else:
            outputs = [run_seed(self.config, s, self.seed_dir(s)) for s in self.seeds]
        self.results = dict(zip(self.seeds, outputs))
        return self.stop()

    def stop(self):
        """Write aggregate.json and manifest.json; returns the aggregate."""
        report = {
            'kind': self.config['kind'],
            'seeds': self.seeds,
            'results': aggregate([self.results[s] for s in self.seeds]),
        }
        _write_json(os.path.join(self.out_dir, 'aggregate.json'), report)
        files = sorted(os.path.relpath(os.path.join(root, name), self.out_dir)
                       for root, _, names in os.walk(self.out_dir) for name in names if name != 'manifest.json')
        _write_json(os.path.join(self.out_dir, 'manifest.json'),
                    {'version': VERSION, 'kind': self.config['kind'], 'seeds': self.seeds,
                     'files': files + ['manifest.json']})
        return report


# ------------------------------------------------------------------ CLI

def _parse_seeds(text):
    try:
        seeds = [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError([('--seed-override', f"expected comma-separated integers, got {text!r}")])
    if not seeds or min(seeds) < 0:
        raise ConfigError([('--seed-override', "need at least one non-negative seed")])
    return seeds


def run(config_path, seed_override=None, out_dir=None):
    config = load_config(config_path)
    if seed_override:
        config['seeds'] = _parse_seeds(seed_override)
    if out_dir:
        config['out_dir'] = out_dir
    runner = ExperimentRunner(config)
    runner.start()
    return runner.run()


def validate(config_path):
    """Schema and file checks only; returns the resolved config."""
    return load_config(config_path)


def main(argv=None):
    parser = argparse.ArgumentParser(description='Meta-example meta-learning experiments')
    commands = parser.add_subparsers(dest='command', required=True)
    run_cmd = commands.add_parser('run', help='execute an experiment config')
    run_cmd.add_argument('config')
    run_cmd.add_argument('--seed-override', help='comma-separated seeds replacing the config list')
    run_cmd.add_argument('--out-dir', help='run directory replacing out_dir')
    check_cmd = commands.add_parser('validate', help='check a config without training')
    check_cmd.add_argument('config')
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == 'validate':
            config = validate(args.config)
            print(f"config OK: kind={config['kind']} seeds={config['seeds']} dataset={config['dataset.kind']}")
            return 0
        report = run(args.config, args.seed_override, args.out_dir)
    except ConfigError as err:
        print(f"Error: {err}")
        return 2
    except DivergenceError as err:
        print(f"Error: training diverged: {err}")
        return 3
    except FusionError as err:
        print(f"Error: {err}")
        return 1
    print(json.dumps(report, sort_keys=True, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())

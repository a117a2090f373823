"""
Command-line entry point.

    python cli.py gen-data --dialogues 100 --seed 7 --out c.jsonl
    python cli.py train --corpus c.jsonl --out model.ckpt
    python cli.py infer-dpm --model model.ckpt --corpus test.jsonl
    python cli.py experiment ablation --seeds 1,2,3

Every run writes ``run_manifest.json`` next to its outputs. Exit codes: 0 ok,
2 usage or config error, 3 data error, 4 window violation, 5 numerical abort.
"""
import sys
import json
import hashlib
import logging
import argparse
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from typing_extensions import TypedDict

from __init__ import setup_logger
from baselines import load_classifier, one_shot_distribution, save_classifier, train_classifier
from config import LOG_LEVELS, ModelConfig, ProjectConfig, apply_overrides, default_data_dir, dump_config, load_config
from corpus import GENERATOR_PRESETS, generate_corpus, preset_config, read_corpus, split_corpus, write_corpus
from dpm import dpm_infer, write_trace
from errors import ConfigError, DPMError, DataError
from evaluation_utils import confusion_matrix, format_percent, metrics
from experiments import (context_configs, merge_reports, ordering_holds, prepare_seed, run_ablation,
                         run_context_experiment, run_cost_benchmark, run_stepping_experiment, seeded_config,
                         train_frozen_model, write_report)
from lora import attach_training_lora, freeze_model, parameter_report
from model import build_model, load_model, save_model
from training import train

logger = logging.getLogger('SpeechDPM')

MANIFEST_NAME = 'run_manifest.json'


class RunManifest(TypedDict):
    subcommand: str
    config: Dict
    seeds: List[int]
    inputs: Dict[str, str]
    outputs: Dict[str, str]
    hashes: Dict[str, str]
    timestamp: str


def file_hash(path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def _seed_list(text: str) -> List[int]:
    try:
        return [int(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    return _seed_list(text)


def _name_list(text: str) -> List[str]:
    return [s.strip() for s in text.split(',') if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='YAML config file; flags override its values')
    common.add_argument('--print-config', action='store_true', help='Print the resolved config and exit')
    common.add_argument('--threads', type=int, help='Worker threads (run.threads)')
    common.add_argument('--log-level', default=None, choices=list(LOG_LEVELS),
                        help='Logger level (run.log_level)')
    common.add_argument('--seed', type=int, help='Seed applied to every config section')
    common.add_argument('--run-dir', help='Output directory (default: $DPM_DATA_DIR/<timestamp>-s<seed>)')

    parser = argparse.ArgumentParser(prog='cli.py', description='Dynamic Parameter Memory for speech emotion recognition')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('gen-data', parents=[common], help='Generate a synthetic dialogue corpus')
    p.add_argument('--dialogues', type=int, help='corpus.num_dialogues')
    p.add_argument('--preset', choices=sorted(GENERATOR_PRESETS), help='Generator preset')
    p.add_argument('--emotions', type=int, help='corpus.num_emotions')
    p.add_argument('--p-stay', type=float, help='corpus.p_stay')
    p.add_argument('--trigger-strength', type=float, help='corpus.trigger_strength')
    p.add_argument('--test-fraction', type=float,
                   help='experiment.test_fraction; above 0 also writes <out>.train/.test splits')
    p.add_argument('--out', help='Corpus file (JSONL)')

    p = sub.add_parser('train', parents=[common], help='Train the model with a LoRA adapter')
    p.add_argument('--corpus', required=True)
    p.add_argument('--epochs', type=int, help='train.epochs')
    p.add_argument('--lr', type=float, help='train.learning_rate')
    p.add_argument('--n-limit', type=int, help='model.n_limit')
    p.add_argument('--dtype', choices=['float32', 'float64'], help='model.dtype')
    p.add_argument('--out', help='Checkpoint path')

    p = sub.add_parser('train-classifier', parents=[common], help='Train the encoder classifier baseline')
    p.add_argument('--corpus', required=True)
    p.add_argument('--epochs', type=int, help='classifier.epochs')
    p.add_argument('--lr', type=float, help='classifier.learning_rate')
    p.add_argument('--out', help='Checkpoint path')

    for name, helptext in (('infer', 'One-shot inference'), ('infer-dpm', 'DPM inference')):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument('--model', required=True, help='Model checkpoint')
        p.add_argument('--corpus', required=True)
        p.add_argument('--dialogue', help='Only this dialogue_id')
        p.add_argument('--out', help='Predictions file (JSONL)')
        if name == 'infer':
            p.add_argument('--truncate-to', type=int, help='experiment.truncate_to (default: no truncation)')
            p.add_argument('--keep', choices=['tail', 'head'], help='experiment.keep')
        else:
            p.add_argument('--n-r', type=int, help='dpm.n_r')
            p.add_argument('--stepping', choices=['sentence', 'fixed_stride'], help='dpm.stepping')
            p.add_argument('--stride', type=int, help='dpm.stride')
            p.add_argument('--lr', type=float, help='dpm.learning_rate')
            p.add_argument('--trace', action='store_true', help='dpm.emit_trace')

    p = sub.add_parser('eval', parents=[common], help='Ablation over trained artifacts')
    p.add_argument('--model', required=True)
    p.add_argument('--classifier', required=True)
    p.add_argument('--corpus', required=True, help='Test corpus')
    p.add_argument('--train-corpus', help='Training corpus, checked for leakage')
    p.add_argument('--settings', type=_name_list, help='experiment.settings, e.g. complete_dialogues,all_lengths')

    p = sub.add_parser('experiment', parents=[common], help='Seeded end-to-end experiments')
    p.add_argument('name', choices=['ablation', 'stepping', 'context'])
    p.add_argument('--seeds', type=_seed_list, help='run.seeds, e.g. 1,2,3')
    p.add_argument('--strides', type=_int_list, help='experiment.strides for the stepping sweep')
    p.add_argument('--small-window', type=int, help='experiment.small_window')
    p.add_argument('--large-window', type=int, help='experiment.large_window')
    p.add_argument('--test-fraction', type=float, help='experiment.test_fraction')
    p.add_argument('--dialogues', type=int, help='corpus.num_dialogues')
    p.add_argument('--epochs', type=int, help='train.epochs and classifier.epochs')

    p = sub.add_parser('bench', parents=[common], help='Attention-pair cost of DPM against one-shot')
    p.add_argument('--model', help='Model checkpoint (default: freshly built from config)')
    p.add_argument('--sentences', type=int, help='experiment.bench_sentences')
    p.add_argument('--sentence-length', type=int, help='experiment.bench_sentence_length')
    return parser


def resolve_config(args: argparse.Namespace) -> ProjectConfig:
    """Defaults, then the config file, then flags."""
    config = load_config(args.config)

    def get(name):
        return getattr(args, name, None)

    overrides = {'run.threads': get('threads'), 'run.log_level': get('log_level'),
                 'corpus.num_dialogues': get('dialogues'), 'corpus.num_emotions': get('emotions'),
                 'corpus.p_stay': get('p_stay'), 'corpus.trigger_strength': get('trigger_strength'),
                 'model.n_limit': get('n_limit'), 'dpm.n_r': get('n_r'), 'dpm.stepping': get('stepping'),
                 'dpm.stride': get('stride'), 'run.seeds': get('seeds'), 'model.dtype': get('dtype'),
                 'experiment.test_fraction': get('test_fraction'), 'experiment.truncate_to': get('truncate_to'),
                 'experiment.keep': get('keep'), 'experiment.settings': get('settings'),
                 'experiment.strides': get('strides'), 'experiment.small_window': get('small_window'),
                 'experiment.large_window': get('large_window'), 'experiment.bench_sentences': get('sentences'),
                 'experiment.bench_sentence_length': get('sentence_length')}
    if get('preset'):
        preset = preset_config(args.preset, seed=config.corpus.seed, num_dialogues=config.corpus.num_dialogues,
                               codebook_size=config.corpus.codebook_size)
        config = apply_overrides(config, {f'corpus.{k}': v for k, v in vars(preset).items()})
    if args.command == 'train':
        overrides.update({'train.epochs': get('epochs'), 'train.learning_rate': get('lr')})
    elif args.command == 'train-classifier':
        overrides.update({'classifier.epochs': get('epochs'), 'classifier.learning_rate': get('lr')})
    elif args.command == 'infer-dpm':
        overrides.update({'dpm.learning_rate': get('lr'), 'dpm.emit_trace': True if get('trace') else None})
    elif args.command == 'experiment':
        overrides.update({'train.epochs': get('epochs'), 'classifier.epochs': get('epochs')})
    config = apply_overrides(config, overrides)
    if args.seed is not None:
        config = seeded_config(config, args.seed)
    if args.command == 'gen-data':
        config = apply_overrides(config, {'model.num_emotions': config.corpus.num_emotions,
                                          'model.codebook_size': config.corpus.codebook_size})
    return config.validate()


def run_directory(args: argparse.Namespace, config: ProjectConfig, out: Optional[str] = None) -> Path:
    """Directory holding this run's outputs: ``--run-dir``, the parent of ``--out``, or a fresh one."""
    if args.run_dir:
        path = Path(args.run_dir)
    elif out:
        path = Path(out).resolve().parent
    else:
        stamp = datetime.now(timezone.utc).strftime('%Y%m%dT%H%M%S')
        seed = args.seed if args.seed is not None else config.model.seed
        path = Path(config.run.data_dir or default_data_dir()) / f'{stamp}-s{seed}'
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(run_dir: Path, args: argparse.Namespace, config: ProjectConfig, inputs: Dict[str, str],
                   outputs: Dict[str, Path], seeds: Sequence[int]) -> Path:
    manifest = RunManifest(
        subcommand=args.command if args.command != 'experiment' else f'experiment {args.name}',
        config=config.to_dict(), seeds=list(seeds),
        inputs={k: str(v) for k, v in inputs.items()},
        outputs={k: str(v) for k, v in outputs.items()},
        hashes={k: file_hash(v) for k, v in {**inputs, **outputs}.items() if v and Path(v).is_file()},
        timestamp=datetime.now(timezone.utc).isoformat(),
    )
    path = run_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    return path


def _load_corpus(path: str, model_config: ModelConfig):
    """Read a corpus whose generator matches the emotion count and codebook of ``model_config``."""
    corpus, generator = read_corpus(path)
    if generator is not None and (generator.num_emotions != model_config.num_emotions
                                  or generator.codebook_size != model_config.codebook_size):
        raise ConfigError(f"{path} was generated for E={generator.num_emotions}, codebook={generator.codebook_size}; "
                          f"model has E={model_config.num_emotions}, codebook={model_config.codebook_size}")
    return corpus


def _select(corpus, dialogue_id: Optional[str]):
    if dialogue_id is None:
        return corpus
    chosen = [d for d in corpus if d.dialogue_id == dialogue_id]
    if not chosen:
        raise DataError(f"dialogue {dialogue_id!r} not in corpus")
    return chosen


def cmd_gen_data(args, config):
    corpus = generate_corpus(config.corpus, threads=config.run.threads)
    run_dir = run_directory(args, config, args.out)
    out = Path(args.out) if args.out else run_dir / 'corpus.jsonl'
    content_hash = write_corpus(out, corpus, config.corpus)
    outputs = {'corpus': out}
    if config.experiment.test_fraction:
        train_corpus, test_corpus = split_corpus(corpus, config.experiment.test_fraction, config.corpus.seed)
        outputs['train'] = out.with_suffix('.train.jsonl')
        outputs['test'] = out.with_suffix('.test.jsonl')
        write_corpus(outputs['train'], train_corpus, config.corpus)
        write_corpus(outputs['test'], test_corpus, config.corpus)
    seconds = sum(d.nominal_seconds for d in corpus)
    logger.info(f"{len(corpus)} dialogues, {sum(d.num_sentences for d in corpus)} sentences, "
                f"{seconds:.1f} nominal seconds, content hash {content_hash}")
    print(content_hash)
    return run_dir, {}, outputs


def cmd_train(args, config):
    corpus = _load_corpus(args.corpus, config.model)
    run_dir = run_directory(args, config, args.out)
    out = Path(args.out) if args.out else run_dir / 'model.ckpt'
    metrics_path = run_dir / 'metrics.tsv'
    model = build_model(config.model)
    attach_training_lora(model, rank=config.lora.rank, alpha=config.lora.alpha, init_std=config.lora.init_std)
    report = parameter_report(model)
    logger.info(f"Trainable parameters: {report['trainable_parameters']} of {report['total_parameters']} "
                f"({report['trainable_ratio']:.2f}%)")
    train(model, corpus, config.train, metrics_path=metrics_path)
    freeze_model(model)
    save_model(model, out)
    return run_dir, {'corpus': args.corpus}, {'model': out, 'metrics': metrics_path}


def cmd_train_classifier(args, config):
    corpus = _load_corpus(args.corpus, config.model)
    run_dir = run_directory(args, config, args.out)
    out = Path(args.out) if args.out else run_dir / 'classifier.ckpt'
    classifier, history = train_classifier(corpus, config.classifier, config.model.vocabulary)
    save_classifier(classifier, out)
    metrics_path = run_dir / 'classifier_metrics.tsv'
    metrics_path.write_text('epoch\tloss\n' + ''.join(f"{h['epoch']}\t{h['loss']:.6f}\n" for h in history),
                            encoding='utf-8')
    return run_dir, {'corpus': args.corpus}, {'classifier': out, 'metrics': metrics_path}


def _write_predictions(path: Path, rows: List[Dict], num_emotions: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + '\n')
    cm = confusion_matrix([r['label'] for r in rows], [r['prediction'] for r in rows], num_emotions)
    wa, ua, wf1 = metrics(cm)
    logger.info(f"{len(rows)} predictions: WA={format_percent(wa)} UA={format_percent(ua)} WF1={format_percent(wf1)}")


def cmd_infer(args, config):
    model = load_model(args.model)
    corpus = _select(_load_corpus(args.corpus, model.config), args.dialogue)
    run_dir = run_directory(args, config, args.out)
    out = Path(args.out) if args.out else run_dir / 'predictions.jsonl'
    rows = []
    for sample in corpus:
        distribution, length = one_shot_distribution(model, sample, truncate_to=config.experiment.truncate_to,
                                                     keep=config.experiment.keep)
        rows.append({'dialogue_id': sample.dialogue_id, 'prediction': int(np.argmax(distribution)),
                     'label': sample.final_emotion, 'distribution': distribution.tolist(), 'forward_len': length})
    _write_predictions(out, rows, model.vocabulary.num_emotions)
    return run_dir, {'model': args.model, 'corpus': args.corpus}, {'predictions': out}


def cmd_infer_dpm(args, config):
    model = load_model(args.model)
    freeze_model(model)
    corpus = _select(_load_corpus(args.corpus, model.config), args.dialogue)
    run_dir = run_directory(args, config, args.out)
    out = Path(args.out) if args.out else run_dir / 'predictions.jsonl'
    outputs = {'predictions': out}
    rows = []
    for sample in corpus:
        prediction, trace = dpm_infer(model, sample, config.dpm, config.lora)
        rows.append({'dialogue_id': sample.dialogue_id, 'prediction': prediction, 'label': sample.final_emotion,
                     'distribution': trace.final_distribution.tolist(), 'updates': trace.update_count})
        if config.dpm.emit_trace:
            trace_path = run_dir / 'traces' / f'{sample.dialogue_id}.tsv'
            write_trace(trace_path, trace)
            outputs[f'trace:{sample.dialogue_id}'] = trace_path
    _write_predictions(out, rows, model.vocabulary.num_emotions)
    return run_dir, {'model': args.model, 'corpus': args.corpus}, outputs


def cmd_eval(args, config):
    model = load_model(args.model)
    freeze_model(model)
    classifier = load_classifier(args.classifier)
    test_corpus = _load_corpus(args.corpus, model.config)
    train_corpus = _load_corpus(args.train_corpus, model.config) if args.train_corpus else []
    report = run_ablation(model, classifier, train_corpus, test_corpus, config.experiment.settings, config.dpm,
                          config.lora, threads=config.run.threads, truncate=config.experiment.keep)
    run_dir = run_directory(args, config)
    written = write_report(report, run_dir)
    print(written[0].read_text(encoding='utf-8'))
    inputs = {'model': args.model, 'classifier': args.classifier, 'corpus': args.corpus}
    if args.train_corpus:
        inputs['train_corpus'] = args.train_corpus
    return run_dir, inputs, {p.name: p for p in written}


def cmd_experiment(args, config):
    seeds = config.run.seeds
    exp = config.experiment
    reports = []
    for seed in seeds:
        logger.info(f"Experiment {args.name}, seed {seed}")
        if args.name == 'ablation':
            artifacts = prepare_seed(config, seed, exp.test_fraction)
            seeded = seeded_config(config, seed)
            reports.append(run_ablation(artifacts.model, artifacts.classifier, artifacts.train_corpus,
                                        artifacts.test_corpus, exp.settings, seeded.dpm, seeded.lora,
                                        threads=config.run.threads, seed=seed, truncate=exp.keep))
        elif args.name == 'stepping':
            artifacts = prepare_seed(config, seed, exp.test_fraction, with_classifier=False)
            reports.append(run_stepping_experiment(artifacts.model, artifacts.test_corpus, exp.strides or None,
                                                   seeded_config(config, seed).dpm, config.lora,
                                                   threads=config.run.threads, seed=seed))
        else:
            small, large = context_configs(config, exp.small_window, exp.large_window)
            artifacts = prepare_seed(small, seed, exp.test_fraction, with_classifier=False)
            large_model = train_frozen_model(seeded_config(large, seed).validate(), artifacts.train_corpus)
            reports.append(run_context_experiment(artifacts.model, large_model, artifacts.test_corpus,
                                                  threads=config.run.threads, seed=seed))
    report = merge_reports(reports)
    if args.name == 'ablation' and 'complete_dialogues' in exp.settings:
        holds = ordering_holds(report, ('Classifier', 'SLLM', 'SLLM-DPM'), setting='complete_dialogues')
        report.notes.append(f"WA ordering Classifier < SLLM < SLLM-DPM holds in {sum(holds.values())} of {len(holds)} seeds")
    elif args.name == 'context':
        holds = ordering_holds(report, (f'window-{exp.small_window}', f'window-{exp.large_window}'))
        report.notes.append(f"large window beats small window in {sum(holds.values())} of {len(holds)} seeds")
    run_dir = run_directory(args, config)
    written = write_report(report, run_dir)
    print(written[0].read_text(encoding='utf-8'))
    return run_dir, {}, {p.name: p for p in written}


def cmd_bench(args, config):
    if args.model:
        model = load_model(args.model)
        freeze_model(model)
    else:
        model = build_model(config.model)
    report = run_cost_benchmark(model, config.dpm, config.lora,
                                sentence_length=config.experiment.bench_sentence_length,
                                num_sentences=config.experiment.bench_sentences)
    for name, seconds in report.timings.items():
        logger.info(f"wall clock {name}: {seconds:.3f}s")
    run_dir = run_directory(args, config)
    written = write_report(report, run_dir)
    print(written[0].read_text(encoding='utf-8'))
    return run_dir, {'model': args.model} if args.model else {}, {p.name: p for p in written}


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'train-classifier': cmd_train_classifier,
    'infer': cmd_infer,
    'infer-dpm': cmd_infer_dpm,
    'eval': cmd_eval,
    'experiment': cmd_experiment,
    'bench': cmd_bench,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse ``argv`` and run the subcommand.

    Returns:
        Process exit status.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logger(args.log_level or 'INFO')
    try:
        config = resolve_config(args)
        setup_logger(config.run.log_level)
        if args.print_config:
            print(dump_config(config), end='')
            return 0
        run_dir, inputs, outputs = COMMANDS[args.command](args, config)
        seeds = config.run.seeds if args.command == 'experiment' else [config.model.seed]
        manifest = write_manifest(run_dir, args, config, inputs, outputs, seeds)
        logger.info(f"Run manifest: {manifest}")
        return 0
    except ConfigError as e:
        logger.error(f"config error: {e}")
        parser.print_usage(sys.stderr)
        return e.exit_code
    except DPMError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


def main():
    sys.exit(cli_dispatch())


if __name__ == '__main__':
    main()

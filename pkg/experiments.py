"""
Experiment harnesses: the ablation over DPM, one-shot and classifier
inference, the stepping-strategy sweep, the context-window comparison and the
attention-cost benchmark. Every harness returns an ``EvalReport`` that can be
written as a text table, a JSON record file and plot-data series.
"""
import copy
import json
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm
from typing_extensions import TypedDict

from baselines import Classifier, classifier_input, classify, one_shot_distribution, train_classifier
from config import EVALUATION_SETTINGS, TOKENS_PER_SECOND, DpmConfig, LoraConfig, ProjectConfig
from corpus import DialogueSample, generate_corpus, make_prefix_views, preprocess_sample, split_corpus
from dpm import dpm_infer, window_check
from errors import ConfigError, DataError
from evaluation_utils import confusion_matrix, cost_counter, format_percent, measure_latency, metrics
from lora import attach_training_lora, freeze_model
from model import Model, build_model, predict_emotion_distribution
from training import train

logger = logging.getLogger('SpeechDPM')

METHODS = ('Classifier', 'SLLM', 'SLLM-DPM')
SETTINGS = EVALUATION_SETTINGS
LENGTH_BUCKETS = ((1, 1), (2, 4), (5, 9), (10, 19), (20, None))
STRIDE_FACTORS = (0.5, 1, 2, 4, 8)


class ReportRow(TypedDict, total=False):
    seed: int
    setting: str
    method: str
    wa: Optional[float]
    ua: Optional[float]
    wf1: Optional[float]
    cost: int
    samples: int
    feasible: bool
    speedup: Optional[float]
    wf1_drop: Optional[float]


@dataclass
class EvalReport:
    """Rows of one experiment plus everything needed to reproduce them."""
    experiment: str
    rows: List[ReportRow] = field(default_factory=list)
    seeds: List[int] = field(default_factory=list)
    fingerprint: str = ''
    plot_data: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    timings: Dict[str, float] = field(default_factory=dict)

    def row(self, method: str, setting: Optional[str] = None, seed: Optional[int] = None) -> ReportRow:
        for r in self.rows:
            if r.get('method') == method and (setting is None or r.get('setting') == setting) \
                    and (seed is None or r.get('seed') == seed):
                return r
        raise KeyError(f"no row for method={method!r} setting={setting!r} seed={seed!r}")

    def to_record(self) -> Dict:
        """Machine-readable form; wall-clock timings are left out so reruns compare bitwise."""
        return {'experiment': self.experiment, 'seeds': self.seeds, 'fingerprint': self.fingerprint,
                'rows': self.rows, 'notes': self.notes}


def config_fingerprint(*parts) -> str:
    """SHA-256 over a canonical JSON rendering of configs, seeds and corpus hashes."""
    def plain(value):
        if hasattr(value, '__dataclass_fields__'):
            return asdict(value)
        return value
    payload = json.dumps([plain(p) for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()


def _replica(model: Model) -> Model:
    """Shares the frozen weights but owns its adapter table, so a temporary adapter stays per-thread."""
    clone = copy.copy(model)
    clone.adapters = dict(model.adapters)
    return clone


def evaluate_samples(predict: Callable[[DialogueSample], Tuple[int, int]], samples: Sequence[DialogueSample],
                     threads: int = 1, desc: str = 'eval') -> Tuple[List[int], List[int]]:
    """
    Run ``predict`` (returning ``(prediction, cost)``) over samples ordered by dialogue_id.

    Returns:
        Predictions and per-sample attention-pair costs, in dialogue_id order.
    """
    ordered = sorted(samples, key=lambda s: s.dialogue_id)
    quiet = logger.getEffectiveLevel() > logging.INFO
    with ThreadPoolExecutor(max_workers=threads) as executor:
        results = list(tqdm(executor.map(predict, ordered), total=len(ordered), desc=desc, disable=quiet))
    return [r[0] for r in results], [r[1] for r in results]


def _score(samples: Sequence[DialogueSample], predictions: Sequence[int], num_emotions: int):
    truth = [s.final_emotion for s in sorted(samples, key=lambda s: s.dialogue_id)]
    return metrics(confusion_matrix(truth, predictions, num_emotions))


def dpm_predictor(model: Model, config: DpmConfig, lora: LoraConfig) -> Callable[[DialogueSample], Tuple[int, int]]:
    def predict(sample):
        pred, trace = dpm_infer(_replica(model), sample, config, lora)
        return pred, cost_counter(trace.forward_lengths)
    return predict


def one_shot_predictor(model: Model, keep: str = 'tail', strip_emotions: bool = False,
                       truncate_to: Optional[int] = None) -> Callable[[DialogueSample], Tuple[int, int]]:
    budget = truncate_to or model.n_limit

    def predict(sample):
        distribution, length = one_shot_distribution(model, sample, truncate_to=budget, keep=keep,
                                                     strip_emotions=strip_emotions)
        return int(np.argmax(distribution)), cost_counter([length])
    return predict


def classifier_predictor(classifier: Classifier) -> Callable[[DialogueSample], Tuple[int, int]]:
    def predict(sample):
        return classify(classifier, sample), cost_counter([len(classifier_input(classifier, sample))])
    return predict


def _metric_row(setting: str, method: str, samples, predictions, costs, num_emotions: int, seed=None) -> ReportRow:
    wa, ua, wf1 = _score(samples, predictions, num_emotions)
    row = ReportRow(setting=setting, method=method, wa=wa, ua=ua, wf1=wf1, cost=int(sum(costs)), samples=len(samples))
    if seed is not None:
        row['seed'] = seed
    return row


def corpus_note(corpus: Sequence[DialogueSample]) -> str:
    seconds = sum(d.nominal_seconds for d in corpus)
    return f"{len(corpus)} dialogues, {seconds:.1f} nominal seconds at {TOKENS_PER_SECOND} tokens/s"


def length_bucket(num_sentences: int) -> str:
    for low, high in LENGTH_BUCKETS:
        if num_sentences >= low and (high is None or num_sentences <= high):
            return f'{low}+' if high is None else (str(low) if low == high else f'{low}-{high}')
    raise ValueError(num_sentences)


def check_leakage(train_corpus: Sequence[DialogueSample], test_corpus: Sequence[DialogueSample]) -> None:
    overlap = {d.dialogue_id for d in train_corpus} & {d.dialogue_id for d in test_corpus}
    if overlap:
        raise DataError(f"train/test leakage: {len(overlap)} shared dialogues, e.g. {sorted(overlap)[:3]}")


def run_ablation(model: Model, classifier: Classifier, train_corpus: Sequence[DialogueSample],
                 test_corpus: Sequence[DialogueSample], settings: Sequence[str] = SETTINGS,
                 dpm_config: Optional[DpmConfig] = None, lora_config: Optional[LoraConfig] = None,
                 threads: int = 1, seed: Optional[int] = None, truncate: str = 'tail') -> EvalReport:
    """
    Compare classifier, one-shot and DPM inference on the test split.

    Args:
        model: Trained, frozen model.
        classifier: Trained classifier.
        train_corpus: Dialogues the methods were trained on (checked for leakage only).
        test_corpus: Held-out dialogues.
        settings: ``complete_dialogues`` and/or ``all_lengths`` (every prefix view).
        dpm_config: DPM settings.
        lora_config: Temporary adapter rank/alpha.
        threads: Evaluation workers.
        seed: Recorded on every row.
        truncate: One-shot truncation side when a stream exceeds the model window.

    Returns:
        Report with one row per (setting, method) and per length bucket.
    """
    dpm_config = dpm_config or DpmConfig()
    lora_config = lora_config or LoraConfig()
    unknown = set(settings) - set(SETTINGS)
    if unknown:
        raise ConfigError(f"unknown evaluation settings {sorted(unknown)}")
    check_leakage(train_corpus, test_corpus)
    logger.info("\n\n***ABLATION***\n")

    num_emotions = model.vocabulary.num_emotions
    predictors = {
        'Classifier': classifier_predictor(classifier),
        'SLLM': one_shot_predictor(model, keep=truncate, strip_emotions=dpm_config.strip_emotions),
        'SLLM-DPM': dpm_predictor(model, dpm_config, lora_config),
    }
    report = EvalReport('ablation', seeds=[seed] if seed is not None else [],
                        fingerprint=config_fingerprint(dpm_config, lora_config, model.config, classifier.config, seed,
                                                       sorted(d.dialogue_id for d in test_corpus), list(settings)))
    report.notes.append(f"test corpus: {corpus_note(test_corpus)}")
    for setting in settings:
        samples = list(test_corpus) if setting == 'complete_dialogues' else \
            [view for d in test_corpus for view in make_prefix_views(d)]
        ordered = sorted(samples, key=lambda s: s.dialogue_id)
        for method in METHODS:
            timed = measure_latency(evaluate_samples)
            (predictions, costs), seconds = timed(predictors[method], samples, threads, desc=f'{method} {setting}')
            report.timings[f'{setting}/{method}'] = seconds
            report.rows.append(_metric_row(setting, method, samples, predictions, costs, num_emotions, seed))
            logger.info(f"{setting} {method}: WA={format_percent(report.rows[-1]['wa'])} "
                        f"WF1={format_percent(report.rows[-1]['wf1'])} ({seconds:.1f}s)")
            if setting == 'all_lengths':
                buckets: Dict[str, List[int]] = {}
                for index, sample in enumerate(ordered):
                    buckets.setdefault(length_bucket(sample.num_sentences), []).append(index)
                for bucket, indices in buckets.items():
                    report.rows.append(_metric_row(f'all_lengths[{bucket}]', method, [ordered[i] for i in indices],
                                                   [predictions[i] for i in indices], [costs[i] for i in indices],
                                                   num_emotions, seed))
    logger.info("\n***END_ABLATION***\n\n")
    return report


def mean_sentence_length(corpus: Sequence[DialogueSample]) -> float:
    """Mean tokens per sentence, counting the audio_end marker."""
    lengths = [len(s) + 1 for d in corpus for s in d.sentences]
    return float(np.mean(lengths)) if lengths else 0.0


def default_strides(corpus: Sequence[DialogueSample]) -> List[int]:
    mean = mean_sentence_length(corpus)
    return sorted({max(1, int(round(f * mean))) for f in STRIDE_FACTORS})


def run_stepping_experiment(model: Model, corpus: Sequence[DialogueSample], strides: Optional[Sequence[int]] = None,
                            dpm_config: Optional[DpmConfig] = None, lora_config: Optional[LoraConfig] = None,
                            threads: int = 1, seed: Optional[int] = None) -> EvalReport:
    """
    Sentence stepping against fixed strides.

    A stride above ``n_limit - n_r`` gives an infeasible row with no metrics. Feasible
    stride rows carry the speedup over sentence stepping and the WF1 drop in points.
    """
    dpm_config = dpm_config or DpmConfig()
    lora_config = lora_config or LoraConfig()
    strides = list(strides) if strides else default_strides(corpus)
    logger.info("\n\n***STEPPING***\n")
    num_emotions = model.vocabulary.num_emotions
    report = EvalReport('stepping', seeds=[seed] if seed is not None else [],
                        fingerprint=config_fingerprint(dpm_config, lora_config, model.config, seed, strides,
                                                       sorted(d.dialogue_id for d in corpus)))
    report.notes.append(f"corpus: {corpus_note(corpus)}")

    sentence_config = replace(dpm_config, stepping='sentence', stride=None)
    predictions, costs = evaluate_samples(dpm_predictor(model, sentence_config, lora_config), corpus, threads, 'sentence')
    base = _metric_row('stepping', 'sentence', corpus, predictions, costs, num_emotions, seed)
    base.update(feasible=True, speedup=1.0, wf1_drop=0.0)
    report.rows.append(base)

    for stride in strides:
        check = window_check(model.n_limit, stride, dpm_config.n_r)
        if not check.ok:
            logger.warning(f"stride {stride} infeasible: {check}")
            report.rows.append(ReportRow(setting='stepping', method=f'stride-{stride}', wa=None, ua=None, wf1=None,
                                         cost=0, samples=0, feasible=False, speedup=None, wf1_drop=None,
                                         **({'seed': seed} if seed is not None else {})))
            continue
        stride_config = replace(dpm_config, stepping='fixed_stride', stride=stride)
        predictions, costs = evaluate_samples(dpm_predictor(model, stride_config, lora_config), corpus, threads,
                                              f'stride {stride}')
        row = _metric_row('stepping', f'stride-{stride}', corpus, predictions, costs, num_emotions, seed)
        row.update(feasible=True, speedup=base['cost'] / max(row['cost'], 1),
                   wf1_drop=100.0 * (base['wf1'] - row['wf1']))
        report.rows.append(row)
        report.plot_data.setdefault('stride_vs_cost', []).append((float(stride), float(row['cost'])))
        report.plot_data.setdefault('stride_vs_wf1', []).append((float(stride), row['wf1']))
    logger.info("\n***END_STEPPING***\n\n")
    return report


def run_context_experiment(small_model: Model, large_model: Model, corpus: Sequence[DialogueSample],
                           threads: int = 1, seed: Optional[int] = None, truncate: str = 'tail') -> EvalReport:
    """One-shot inference with each model, truncating every stream to that model's window."""
    logger.info("\n\n***CONTEXT***\n")
    num_emotions = large_model.vocabulary.num_emotions
    report = EvalReport('context', seeds=[seed] if seed is not None else [],
                        fingerprint=config_fingerprint(small_model.config, large_model.config, seed, truncate,
                                                       sorted(d.dialogue_id for d in corpus)))
    for model in (small_model, large_model):
        predictions, costs = evaluate_samples(one_shot_predictor(model, keep=truncate), corpus, threads,
                                              f'window {model.n_limit}')
        report.rows.append(_metric_row('context', f'window-{model.n_limit}', corpus, predictions, costs,
                                       num_emotions, seed))
        truncated = sum(len(preprocess_sample(d, model.vocabulary).inference_tokens) > model.n_limit for d in corpus)
        report.notes.append(f"window {model.n_limit}: {truncated}/{len(corpus)} dialogues truncated")
    logger.info("\n***END_CONTEXT***\n\n")
    return report


def context_configs(config: ProjectConfig, small_window: int, large_window: int) -> Tuple[ProjectConfig, ProjectConfig]:
    """Two configs differing only in ``n_limit``; training spans are clipped to fit the small window."""
    n_o = min(config.train.n_o, small_window // 2)
    n_p = min(config.train.n_p, small_window - n_o)
    n_q = min(config.train.n_q, small_window)
    train_config = replace(config.train, n_o=n_o, n_p=n_p, n_q=n_q)
    return tuple(replace(config, model=replace(config.model, n_limit=window), train=train_config)
                 for window in (small_window, large_window))


def synthetic_dialogue(num_sentences: int, sentence_length: int, codebook_size: int, num_emotions: int = 1) -> DialogueSample:
    """Fixed-content dialogue of ``num_sentences`` equal sentences, for cost measurements."""
    sentences = [[(i * sentence_length + j) % codebook_size for j in range(sentence_length)] for i in range(num_sentences)]
    return DialogueSample(dialogue_id=f'bench-{num_sentences}x{sentence_length}', sentences=sentences,
                          sentence_emotions=[0] * num_sentences)


def run_cost_benchmark(model: Model, dpm_config: Optional[DpmConfig] = None, lora_config: Optional[LoraConfig] = None,
                       sentence_length: int = 24, num_sentences: int = 20) -> EvalReport:
    """
    Measured attention-pair costs for DPM over S and 2S sentences and one-shot over N and 2N tokens.

    The ``speedup`` field of the ``ratio`` rows holds cost(2x) / cost(1x).
    """
    dpm_config = replace(dpm_config or DpmConfig(), stepping='sentence', stride=None)
    lora_config = lora_config or LoraConfig()
    vocab = model.vocabulary
    logger.info("\n\n***BENCH***\n")
    report = EvalReport('bench', fingerprint=config_fingerprint(model.config, dpm_config, lora_config,
                                                                sentence_length, num_sentences))
    dpm_costs = []
    for count in (num_sentences, 2 * num_sentences):
        sample = synthetic_dialogue(count, sentence_length, vocab.codebook_size)
        (_, trace), seconds = measure_latency(dpm_infer)(_replica(model), sample, dpm_config, lora_config)
        dpm_costs.append(cost_counter(trace.forward_lengths))
        report.timings[f'dpm/{count}'] = seconds
        report.rows.append(ReportRow(setting=f'{count} sentences', method='SLLM-DPM', cost=dpm_costs[-1], samples=1))
        report.plot_data.setdefault('dpm_sentences_vs_cost', []).append((float(count), float(dpm_costs[-1])))

    one_shot_costs = []
    half = max(1, model.n_limit // 2)
    for length in (half, 2 * half):
        tokens = np.full(length, vocab.audio_id(0), dtype=np.int64)
        tokens[-1] = vocab.audio_end_id
        _, seconds = measure_latency(predict_emotion_distribution)(model, tokens)
        one_shot_costs.append(cost_counter([len(tokens)]))
        report.timings[f'one_shot/{length}'] = seconds
        report.rows.append(ReportRow(setting=f'{length} tokens', method='SLLM', cost=one_shot_costs[-1], samples=1))
        report.plot_data.setdefault('one_shot_tokens_vs_cost', []).append((float(length), float(one_shot_costs[-1])))

    report.rows.append(ReportRow(setting='ratio', method='SLLM-DPM', cost=dpm_costs[1], samples=2,
                                 speedup=dpm_costs[1] / dpm_costs[0]))
    report.rows.append(ReportRow(setting='ratio', method='SLLM', cost=one_shot_costs[1], samples=2,
                                 speedup=one_shot_costs[1] / one_shot_costs[0]))
    logger.info(f"Cost ratio for doubled input: DPM {dpm_costs[1] / dpm_costs[0]:.3f}, "
                f"one-shot {one_shot_costs[1] / one_shot_costs[0]:.3f}")
    logger.info("\n***END_BENCH***\n\n")
    return report


# -----------------------------------------------------------------------------
# Seeded pipelines
# -----------------------------------------------------------------------------

def seeded_config(config: ProjectConfig, seed: int) -> ProjectConfig:
    """Same config with every seed field set to ``seed``."""
    return replace(config, model=replace(config.model, seed=seed), corpus=replace(config.corpus, seed=seed),
                   train=replace(config.train, seed=seed), dpm=replace(config.dpm, seed=seed),
                   classifier=replace(config.classifier, seed=seed))


@dataclass
class SeedArtifacts:
    train_corpus: List[DialogueSample]
    test_corpus: List[DialogueSample]
    model: Model
    classifier: Optional[Classifier] = None


def train_frozen_model(config: ProjectConfig, corpus: Sequence[DialogueSample]) -> Model:
    """Build, attach the training adapter, train and freeze."""
    model = build_model(config.model)
    attach_training_lora(model, rank=config.lora.rank, alpha=config.lora.alpha, init_std=config.lora.init_std)
    train(model, corpus, config.train)
    freeze_model(model)
    return model


def prepare_seed(config: ProjectConfig, seed: int, test_fraction: float = 0.2, with_classifier: bool = True) -> SeedArtifacts:
    """Generate, split and train everything one seed of an experiment needs."""
    config = seeded_config(config, seed).validate()
    corpus = generate_corpus(config.corpus, threads=config.run.threads)
    train_corpus, test_corpus = split_corpus(corpus, test_fraction, seed)
    model = train_frozen_model(config, train_corpus)
    classifier = None
    if with_classifier:
        classifier, _ = train_classifier(train_corpus, config.classifier, model.vocabulary)
    return SeedArtifacts(train_corpus, test_corpus, model, classifier)


def merge_reports(reports: Sequence[EvalReport]) -> EvalReport:
    if not reports:
        raise DataError("merge_reports: nothing to merge")
    merged = EvalReport(reports[0].experiment)
    for report in reports:
        merged.rows.extend(report.rows)
        merged.seeds.extend(report.seeds)
        merged.notes.extend(report.notes)
        merged.timings.update({f'seed{report.seeds}/{k}': v for k, v in report.timings.items()})
        for name, series in report.plot_data.items():
            merged.plot_data.setdefault(name, []).extend(series)
    merged.fingerprint = config_fingerprint([r.fingerprint for r in reports])
    return merged


def ordering_holds(report: EvalReport, methods: Sequence[str], metric: str = 'wa',
                   setting: Optional[str] = None) -> Dict[int, bool]:
    """Per seed: whether ``metric`` strictly increases along ``methods``."""
    outcome = {}
    for seed in report.seeds:
        values = [report.row(m, setting, seed)[metric] for m in methods]
        outcome[seed] = all(a < b for a, b in zip(values, values[1:]))
    return outcome


# -----------------------------------------------------------------------------
# Report files
# -----------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return '-'
    return format_percent(value)


def format_table(report: EvalReport) -> str:
    """Text table; percentages carry two decimals."""
    header = ['seed', 'setting', 'method', 'WA (%)', 'UA (%)', 'WF1 (%)', 'cost', 'samples']
    extra = any('speedup' in r for r in report.rows)
    if extra:
        header += ['speedup', 'WF1 drop']
    lines = ['\t'.join(header)]
    for r in report.rows:
        cells = [str(r.get('seed', '-')), r.get('setting', ''), r.get('method', ''),
                 _cell(r.get('wa')), _cell(r.get('ua')), _cell(r.get('wf1')), str(r.get('cost', 0)), str(r.get('samples', 0))]
        if extra:
            speedup, drop = r.get('speedup'), r.get('wf1_drop')
            cells += ['-' if speedup is None else f'{speedup:.2f}', '-' if drop is None else f'{drop:.2f}']
        lines.append('\t'.join(cells))
    lines += [f'# {note}' for note in report.notes]
    lines.append(f'# fingerprint {report.fingerprint}')
    return '\n'.join(lines) + '\n'


def write_report(report: EvalReport, out_dir: Union[str, Path]) -> List[Path]:
    """Write ``<experiment>.txt``, ``<experiment>.json`` and one ``.tsv`` per plot series."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / f'{report.experiment}.txt'
    table.write_text(format_table(report), encoding='utf-8')
    record = out_dir / f'{report.experiment}.json'
    record.write_text(json.dumps(report.to_record(), indent=2, sort_keys=True), encoding='utf-8')
    written = [table, record]
    for name, series in sorted(report.plot_data.items()):
        path = out_dir / f'{report.experiment}.{name}.tsv'
        path.write_text('x\ty\n' + ''.join(f'{x:.6g}\t{y:.6g}\n' for x, y in series), encoding='utf-8')
        written.append(path)
    logger.info(f"Wrote {report.experiment} report to {out_dir}")
    return written
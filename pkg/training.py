"""
Dual-objective training of the emotion model: audio autoregression over a
window ending at each audio_end, plus the constrained emotion loss at the
position after it, combined as their arithmetic mean.
"""
import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm
from typing_extensions import TypedDict

import numerics as nx
from numerics import Tensor
from config import TrainConfig
from corpus import DialogueSample, PreprocessedSample, preprocess_sample
from errors import LabelError, LifecycleError, NumericalAbort, ShapeError
from model import Model, emotion_logits, forward, save_model

logger = logging.getLogger('SpeechDPM')

Span = Tuple[range, range]


class EpochRecord(TypedDict):
    epoch: int
    loss: float
    loss_a: float
    loss_e: float


@dataclass
class Ending:
    """One sentence ending: the stream it lives in, its audio_end index and label."""
    stream: np.ndarray
    position: int
    label: int


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    steps: int = 0


def select_ar_span(T: int, n: int, n_o: int, n_p: int) -> Span:
    """
    Target and prefix ranges for the autoregressive window ending at ``T``.

    Args:
        T: Index of the audio_end token.
        n: Tokens available up to and including ``T``.
        n_o: Target span length.
        n_p: Prefix span length.

    Returns:
        ``(prefix, target)`` as abutting ranges; short histories shrink the
        prefix first and then the target.
    """
    if n < 1:
        raise ShapeError(f"select_ar_span: no history available at T={T}")
    if n < n_o:
        n_o, n_p = n, 0
    elif n < n_o + n_p:
        n_p = n - n_o
    target = range(T - n_o + 1, T + 1)
    prefix = range(target.start - n_p, target.start)
    return prefix, target


def ar_window(sequence: np.ndarray, span: Span) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """
    Teacher-forced input for a span.

    Returns:
        ``(input_ids, logit_positions, target_ids)``; a target is scored only when
        its predecessor lies inside the window. ``None`` when nothing is scoreable.
    """
    prefix, target = span
    start = prefix.start if len(prefix) else target.start
    scored = [t for t in target if t - 1 >= start]
    if not scored:
        return None
    input_ids = np.asarray(sequence[start:target.stop - 1], dtype=np.int64)
    positions = np.asarray([t - 1 - start for t in scored], dtype=np.int64)
    return input_ids, positions, np.asarray(sequence, dtype=np.int64)[scored]


def autoregressive_loss(model: Model, sequence: np.ndarray, span: Span) -> Tensor:
    """Mean next-token cross-entropy over the scored target positions of ``span``."""
    prefix, target = span
    if len(prefix) + len(target) > model.n_limit:
        raise ShapeError(f"autoregressive_loss: span of {len(prefix) + len(target)} tokens exceeds n_limit={model.n_limit}")
    window = ar_window(sequence, span)
    if window is None:
        raise ShapeError(f"autoregressive_loss: span {span} has no scoreable target")
    input_ids, positions, targets = window
    logits = forward(model, input_ids)
    return nx.cross_entropy(nx.take(logits, positions, axis=0), targets)


def emotion_window(sequence: np.ndarray, T: int, n_q: int) -> np.ndarray:
    """``min(n_q, T + 1)`` tokens ending at ``T`` inclusive."""
    q = min(n_q, T + 1)
    return np.asarray(sequence[T - q + 1:T + 1], dtype=np.int64)


def emotion_loss(model: Model, sequence: np.ndarray, T: int, n_q: int, true_label: int) -> Tensor:
    """Cross-entropy of the constrained emotion distribution after the audio_end at ``T``."""
    num_emotions = model.vocabulary.num_emotions
    if not 0 <= true_label < num_emotions:
        raise LabelError(f"emotion_loss: label {true_label} outside [0, {num_emotions})")
    window = emotion_window(sequence, T, n_q)
    logits = forward(model, window)
    last = nx.take(logits, len(window) - 1, axis=0)
    return nx.cross_entropy(emotion_logits(last, model.vocabulary), true_label)


def total_loss(loss_a, loss_e):
    """Arithmetic mean of the two objectives."""
    return (loss_a + loss_e) * 0.5


def _pad(rows: Sequence[np.ndarray]) -> np.ndarray:
    width = max(len(r) for r in rows)
    out = np.zeros((len(rows), width), dtype=np.int64)
    for i, row in enumerate(rows):
        out[i, :len(row)] = row
    return out


def batched_autoregressive_loss(model: Model, windows) -> Tensor:
    """Mean over windows of each window's mean target loss; right padding is masked."""
    ids = _pad([w[0] for w in windows])
    targets = np.zeros(ids.shape, dtype=np.int64)
    weights = np.zeros(ids.shape, dtype=model.config.dtype)
    for i, (_, positions, target_ids) in enumerate(windows):
        targets[i, positions] = target_ids
        weights[i, positions] = 1.0 / len(positions)
    return nx.cross_entropy(forward(model, ids), targets, mask=weights)


def batched_emotion_loss(model: Model, windows: Sequence[np.ndarray], labels: Sequence[int]) -> Tensor:
    ids = _pad(windows)
    batch, width = ids.shape
    logits = nx.reshape(forward(model, ids), (batch * width, model.vocabulary.total))
    last = nx.take(logits, [i * width + len(w) - 1 for i, w in enumerate(windows)], axis=0)
    return nx.cross_entropy(emotion_logits(last, model.vocabulary), np.asarray(labels, dtype=np.int64))


def collect_endings(samples: Sequence[PreprocessedSample]) -> List[Ending]:
    return [Ending(s.tokens, t, label) for s in samples for t, label in zip(s.audio_end_positions, s.labels)]


def batch_losses(model: Model, endings: Sequence[Ending], config: TrainConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """``(L, L_a, L_e)`` for a batch of sentence endings."""
    ar_windows = []
    for ending in endings:
        span = select_ar_span(ending.position, ending.position + 1, config.n_o, config.n_p)
        window = ar_window(ending.stream, span)
        if window is not None:
            ar_windows.append(window)
    loss_e = batched_emotion_loss(model, [emotion_window(e.stream, e.position, config.n_q) for e in endings],
                                  [e.label for e in endings])
    loss_a = batched_autoregressive_loss(model, ar_windows) if ar_windows else nx.scale(loss_e, 0.0)
    return total_loss(loss_a, loss_e), loss_a, loss_e


def _batches(endings: Sequence[Ending], batch_size: int, order: np.ndarray):
    for start in range(0, len(order), batch_size):
        yield [endings[i] for i in order[start:start + batch_size]]


def evaluate_losses(model: Model, endings: Sequence[Ending], config: TrainConfig) -> EpochRecord:
    """Ending-weighted mean losses without recording a tape."""
    sums = np.zeros(3)
    with nx.no_grad():
        for batch in _batches(endings, config.batch_size, np.arange(len(endings))):
            values = batch_losses(model, batch, config)
            sums += len(batch) * np.array([v.item() for v in values])
    loss, loss_a, loss_e = sums / max(len(endings), 1)
    return EpochRecord(epoch=0, loss=float(loss), loss_a=float(loss_a), loss_e=float(loss_e))


def write_metrics(path: Union[str, Path], history: Sequence[EpochRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ['epoch\tloss\tloss_a\tloss_e']
    lines += [f"{r['epoch']}\t{r['loss']:.6f}\t{r['loss_a']:.6f}\t{r['loss_e']:.6f}" for r in history]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')


def train(model: Model, corpus: Sequence[DialogueSample], config: TrainConfig,
          metrics_path: Optional[Union[str, Path]] = None,
          checkpoint_path: Optional[Union[str, Path]] = None) -> TrainResult:
    """
    Train the attached adapter (and any base groups marked trainable).

    Args:
        model: Model with a trainable adapter attached.
        corpus: Training dialogues.
        config: Training configuration.
        metrics_path: Optional per-epoch metrics file.
        checkpoint_path: Optional final checkpoint.

    Returns:
        Loss history; entry 0 is the evaluation before any update.
    """
    config.validate(model.n_limit)
    params = model.trainable_parameters()
    if not any(a.trainable for a in model.adapters.values()):
        raise LifecycleError("train: attach a trainable adapter first")
    logger.info("\n\n***TRAIN***\n")

    streams = [preprocess_sample(d, model.vocabulary) for d in corpus]
    endings = collect_endings(streams)
    state = nx.create_optimizer(params, kind=config.optimizer, learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    result = TrainResult(history=[evaluate_losses(model, endings, config)])
    logger.info(f"Epoch 0: L={result.history[0]['loss']:.4f} over {len(endings)} sentence endings")
    quiet = logger.getEffectiveLevel() > logging.INFO
    for epoch in range(1, config.epochs + 1):
        sums, seen = np.zeros(3), 0
        order = rng.permutation(len(endings))
        for batch in tqdm(list(_batches(endings, config.batch_size, order)), desc=f'epoch {epoch}', disable=quiet):
            loss, loss_a, loss_e = batch_losses(model, batch, config)
            if not math.isfinite(loss.item()):
                raise NumericalAbort(f"training loss is {loss.item()}", epoch=epoch, step=result.steps)
            nx.zero_grad(params)
            nx.backward(loss)
            nx.optimizer_step(params, state)
            result.steps += 1
            sums += len(batch) * np.array([loss.item(), loss_a.item(), loss_e.item()])
            seen += len(batch)
        mean = sums / max(seen, 1)
        result.history.append(EpochRecord(epoch=epoch, loss=float(mean[0]), loss_a=float(mean[1]), loss_e=float(mean[2])))
        logger.info(f"Epoch {epoch}: L={mean[0]:.4f} L_a={mean[1]:.4f} L_e={mean[2]:.4f}")

    if metrics_path:
        write_metrics(metrics_path, result.history)
    if checkpoint_path:
        save_model(model, checkpoint_path)
    logger.info("\n***END_TRAIN***\n\n")
    return result

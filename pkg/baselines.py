"""
Comparators for DPM: one-shot inference with the same model (optionally
truncated to a token budget) and a bidirectional encoder classifier trained
from scratch on the audio codes.
"""
import math
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

import numerics as nx
from numerics import Tensor
from checkpoint_io import load_checkpoint, save_checkpoint
from config import ClassifierConfig, Vocabulary
from corpus import DialogueSample, PreprocessedSample, preprocess_sample
from errors import DataError, NumericalAbort, ShapeError
from model import INIT_STD, Model, init_block_params, predict_emotion_distribution, run_blocks

logger = logging.getLogger('SpeechDPM')


def truncate_tokens(tokens: np.ndarray, budget: Optional[int], keep: str = 'tail') -> np.ndarray:
    """
    Cut ``tokens`` to ``budget``; the final token (the last audio_end) always survives.

    ``keep='tail'`` keeps the most recent tokens, ``keep='head'`` keeps the
    opening tokens plus the final marker.
    """
    if budget is None or budget >= len(tokens):
        return tokens
    if budget < 1:
        raise ShapeError(f"truncation budget must be >= 1, got {budget}")
    if keep == 'tail':
        return tokens[len(tokens) - budget:]
    if keep == 'head':
        return np.concatenate([tokens[:budget - 1], tokens[-1:]])
    raise ShapeError(f"unknown truncation side {keep!r}")


def _as_stream(model_vocab: Vocabulary, sample, strip_emotions: bool) -> PreprocessedSample:
    if isinstance(sample, DialogueSample):
        return preprocess_sample(sample, model_vocab, strip_emotions=strip_emotions)
    return sample


def one_shot_distribution(model: Model, sample: Union[DialogueSample, PreprocessedSample],
                          truncate_to: Optional[int] = None, keep: str = 'tail',
                          strip_emotions: bool = False) -> Tuple[np.ndarray, int]:
    """Constrained emotion distribution from one forward pass, and that pass's length."""
    stream = _as_stream(model.vocabulary, sample, strip_emotions)
    tokens = truncate_tokens(stream.inference_tokens, truncate_to, keep)
    return predict_emotion_distribution(model, tokens), len(tokens)


def one_shot_infer(model: Model, sample: Union[DialogueSample, PreprocessedSample],
                   truncate_to: Optional[int] = None, keep: str = 'tail', strip_emotions: bool = False) -> int:
    """
    Predict the final emotion from a single forward over the (possibly truncated) stream.

    Raises:
        ShapeError: the stream is longer than the model window after truncation.
    """
    distribution, _ = one_shot_distribution(model, sample, truncate_to, keep, strip_emotions)
    return int(np.argmax(distribution))


# -----------------------------------------------------------------------------
# Encoder classifier
# -----------------------------------------------------------------------------

@dataclass
class Classifier:
    """Bidirectional transformer encoder, mean pooling and an E-way linear head."""
    config: ClassifierConfig
    vocabulary: Vocabulary
    params: Dict[str, Tensor] = field(default_factory=dict)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())


def build_classifier(config: ClassifierConfig, vocab: Vocabulary) -> Classifier:
    config.validate()
    rng = np.random.default_rng(config.seed)
    d = config.embed_dim
    arrays = {
        'tok_emb': rng.normal(0.0, INIT_STD, (vocab.total, d)),
        'pos_emb': rng.normal(0.0, INIT_STD, (config.window, d)),
    }
    for i in range(config.num_layers):
        arrays.update(init_block_params(rng, f'blocks.{i}', d, 4, np.float64))
    arrays['ln_f.gamma'] = np.ones(d)
    arrays['ln_f.beta'] = np.zeros(d)
    arrays['cls.weight'] = rng.normal(0.0, INIT_STD, (vocab.num_emotions, d))
    arrays['cls.bias'] = np.zeros(vocab.num_emotions)
    params = {name: Tensor(array.astype(np.float32), requires_grad=True, name=name) for name, array in arrays.items()}
    return Classifier(config, vocab, params)


def classifier_input(classifier: Classifier, sample: Union[DialogueSample, PreprocessedSample]) -> np.ndarray:
    """Audio codes and audio_end markers (no emotion identifiers), truncated to the window."""
    if isinstance(sample, DialogueSample):
        sample = preprocess_sample(sample, classifier.vocabulary, strip_emotions=True)
    tokens = sample.inference_tokens
    if not sample.strip_emotions:
        tokens = tokens[[not classifier.vocabulary.is_emotion(int(t)) for t in tokens]]
    return truncate_tokens(tokens, classifier.config.window, classifier.config.truncate)


def classifier_logits(classifier: Classifier, ids: np.ndarray, lengths: Sequence[int]) -> Tensor:
    """``(B, E)`` logits for right-padded ``ids``; padded keys and positions are masked out."""
    p = classifier.params
    batch, width = ids.shape
    if width > classifier.config.window:
        raise ShapeError(f"classifier input of {width} tokens exceeds window {classifier.config.window}")
    valid = np.arange(width)[None, :] < np.asarray(lengths)[:, None]
    key_mask = np.where(valid, 0.0, -np.inf).astype(np.float32)[:, None, None, :]
    x = nx.embedding(p['tok_emb'], ids) + nx.take(p['pos_emb'], np.arange(width), axis=0)
    x = run_blocks(p, x, classifier.config.num_layers, classifier.config.num_heads, key_mask, ())
    x = nx.layer_norm(x, p['ln_f.gamma'], p['ln_f.beta'])
    pool = (valid / np.asarray(lengths)[:, None]).astype(np.float32)[:, None, :]
    pooled = nx.reshape(nx.matmul(Tensor(pool), x), (batch, classifier.config.embed_dim))
    return nx.linear(pooled, p['cls.weight'], p['cls.bias'])


def _pad(rows: Sequence[np.ndarray]) -> Tuple[np.ndarray, List[int]]:
    lengths = [len(r) for r in rows]
    ids = np.zeros((len(rows), max(lengths)), dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, :len(row)] = row
    return ids, lengths


def classifier_probs(classifier: Classifier, sample: Union[DialogueSample, PreprocessedSample]) -> np.ndarray:
    ids, lengths = _pad([classifier_input(classifier, sample)])
    with nx.no_grad():
        return nx.softmax(classifier_logits(classifier, ids, lengths)).numpy()[0]


def classify(classifier: Classifier, sample: Union[DialogueSample, PreprocessedSample]) -> int:
    return int(np.argmax(classifier_probs(classifier, sample)))


def train_classifier(corpus: Sequence[DialogueSample], config: ClassifierConfig, vocab: Vocabulary) -> Tuple[Classifier, List[Dict]]:
    """
    Train the encoder classifier on final-sentence labels.

    Returns:
        The classifier and a per-epoch history; entry 0 is the loss before training.
    """
    logger.info("\n\n***TRAIN_CLASSIFIER***\n")
    classifier = build_classifier(config, vocab)
    inputs = [classifier_input(classifier, d) for d in corpus]
    labels = np.asarray([d.final_emotion for d in corpus], dtype=np.int64)
    params = classifier.parameters()
    state = nx.create_optimizer(params, kind='adam', learning_rate=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    def batches(order):
        for start in range(0, len(order), config.batch_size):
            index = order[start:start + config.batch_size]
            ids, lengths = _pad([inputs[i] for i in index])
            yield ids, lengths, labels[index]

    with nx.no_grad():
        initial = np.mean([nx.cross_entropy(classifier_logits(classifier, ids, lengths), y).item()
                           for ids, lengths, y in batches(np.arange(len(inputs)))])
    history = [{'epoch': 0, 'loss': float(initial)}]
    quiet = logger.getEffectiveLevel() > logging.INFO
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for ids, lengths, y in tqdm(list(batches(rng.permutation(len(inputs)))), desc=f'classifier epoch {epoch}', disable=quiet):
            loss = nx.cross_entropy(classifier_logits(classifier, ids, lengths), y)
            if not math.isfinite(loss.item()):
                raise NumericalAbort(f"classifier loss is {loss.item()}", epoch=epoch, step=step)
            nx.zero_grad(params)
            nx.backward(loss)
            nx.optimizer_step(params, state)
            losses.append(loss.item())
            step += 1
        history.append({'epoch': epoch, 'loss': float(np.mean(losses))})
        logger.info(f"Classifier epoch {epoch}: loss={history[-1]['loss']:.4f}")
    logger.info("\n***END_TRAIN_CLASSIFIER***\n\n")
    return classifier, history


def save_classifier(classifier: Classifier, path: Union[str, Path]) -> Path:
    config = {'kind': 'classifier', 'classifier': asdict(classifier.config), 'vocabulary': asdict(classifier.vocabulary)}
    return save_checkpoint(path, config, {name: t.data for name, t in classifier.params.items()})


def load_classifier(path: Union[str, Path]) -> Classifier:
    header, arrays = load_checkpoint(path)
    if header.get('kind') != 'classifier':
        raise DataError(f"{path}: not a classifier checkpoint (kind={header.get('kind')!r})")
    try:
        config, vocab = ClassifierConfig(**header['classifier']), Vocabulary(**header['vocabulary'])
    except (KeyError, TypeError) as e:
        raise DataError(f"{path}: classifier config in header is invalid: {e!r}") from None
    classifier = build_classifier(config, vocab)
    for name, tensor in classifier.params.items():
        if name not in arrays or arrays[name].shape != tensor.shape:
            raise DataError(f"{path}: {name} missing or misshapen in manifest")
        tensor.data = arrays[name].astype(np.float32)
    return classifier

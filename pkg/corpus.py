"""
Synthetic conversational-emotion corpora standing in for tokenized speech.

Each dialogue follows a sticky Markov chain over E emotions. Sentences emit
codebook tokens from the band of their emotion (``in_band_mass``) or from a
shared topic band. A triggered dialogue opens with a reserved 4-token motif
that fixes the final sentence's label, while the final sentence's tokens still
follow the chain, so the label is only recoverable from the opening.
"""
import json
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import TOKENS_PER_SECOND, GeneratorConfig, Vocabulary
from errors import ConfigError, DataError, LabelError

logger = logging.getLogger('SpeechDPM')

SCHEMA_VERSION = 'dpm-corpus/1'
MOTIF_LENGTH = 4

GENERATOR_PRESETS: Dict[str, Dict] = {
    'iemocap_like': dict(num_emotions=4, min_sentences=20, max_sentences=60, min_tokens=10, max_tokens=40),
    'meld_like': dict(num_emotions=7, min_sentences=3, max_sentences=15, min_tokens=8, max_tokens=32),
}


@dataclass
class DialogueSample:
    """Audio-code sentences (codebook indices) with one emotion index per sentence."""
    dialogue_id: str
    sentences: List[List[int]]
    sentence_emotions: List[int]
    seed: int = 0

    @property
    def num_sentences(self) -> int:
        return len(self.sentences)

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    @property
    def final_emotion(self) -> int:
        return self.sentence_emotions[-1]

    @property
    def nominal_seconds(self) -> float:
        return nominal_seconds(self.num_tokens)

    def to_record(self) -> Dict:
        return {'id': self.dialogue_id, 'seed': self.seed, 'sentences': self.sentences, 'emotions': self.sentence_emotions}


@dataclass
class PreprocessedSample:
    """
    Flat token stream ``[s_1, audio_end, emo_1, ..., s_S, audio_end, emo_S]``.

    ``record_starts[i]`` is the first token of sentence i, ``audio_end_positions[i]``
    the index of its audio_end. With ``strip_emotions`` the emotion identifiers
    are left out of the stream.
    """
    dialogue_id: str
    tokens: np.ndarray
    record_starts: List[int]
    audio_end_positions: List[int]
    labels: List[int]
    strip_emotions: bool = False

    @property
    def num_sentences(self) -> int:
        return len(self.labels)

    @property
    def label(self) -> int:
        return self.labels[-1]

    @property
    def inference_tokens(self) -> np.ndarray:
        """The stream up to and including the final audio_end (the label token is the target)."""
        return self.tokens[:self.audio_end_positions[-1] + 1]

    def target_lengths(self) -> List[int]:
        """Tokens per sentence including its audio_end marker."""
        return [end - start + 1 for start, end in zip(self.record_starts, self.audio_end_positions)]


def nominal_seconds(num_tokens: int) -> float:
    return num_tokens / TOKENS_PER_SECOND


def preset_config(name: str, **overrides) -> GeneratorConfig:
    if name not in GENERATOR_PRESETS:
        raise ConfigError(f"unknown corpus preset {name!r}; choose from {sorted(GENERATOR_PRESETS)}")
    return replace(GeneratorConfig(**GENERATOR_PRESETS[name]), **overrides)


class CodebookLayout:
    """Disjoint emotion bands, a topic band and reserved motif 4-grams inside the codebook."""

    def __init__(self, config: GeneratorConfig):
        e, bw, tw = config.num_emotions, config.band_width, config.topic_width
        needed = e * bw + tw + MOTIF_LENGTH * e
        if bw < 1 or tw < 1 or needed > config.codebook_size:
            raise ConfigError(f"codebook of {config.codebook_size} too small for {e} bands of {bw}, "
                              f"a topic band of {tw} and {e} motifs (needs {needed})")
        self.band_width = bw
        self.topic_start = e * bw
        self.topic_width = tw
        self.motif_start = self.topic_start + tw

    def band(self, emotion: int) -> Tuple[int, int]:
        return emotion * self.band_width, (emotion + 1) * self.band_width

    def motif(self, emotion: int) -> List[int]:
        start = self.motif_start + MOTIF_LENGTH * emotion
        return list(range(start, start + MOTIF_LENGTH))


def _emit_sentence(rng: np.random.Generator, layout: CodebookLayout, emotion: int, length: int, in_band_mass: float) -> List[int]:
    in_band = rng.random(length) < in_band_mass
    band_tokens = layout.band(emotion)[0] + rng.integers(0, layout.band_width, size=length)
    topic_tokens = layout.topic_start + rng.integers(0, layout.topic_width, size=length)
    return np.where(in_band, band_tokens, topic_tokens).astype(int).tolist()


def generate_dialogue(config: GeneratorConfig, index: int, layout: Optional[CodebookLayout] = None) -> DialogueSample:
    """Generate dialogue ``index``; its stream is seeded by ``(config.seed, index)`` only."""
    layout = layout or CodebookLayout(config)
    rng = np.random.default_rng([config.seed, index])
    e = config.num_emotions
    num_sentences = int(rng.integers(config.min_sentences, config.max_sentences + 1))

    latent = [int(rng.integers(e))]
    for _ in range(num_sentences - 1):
        if rng.random() < config.p_stay:
            latent.append(latent[-1])
        else:
            others = [k for k in range(e) if k != latent[-1]]
            latent.append(int(others[rng.integers(len(others))]))

    sentences = []
    for emotion in latent:
        length = int(rng.integers(config.min_tokens, config.max_tokens + 1))
        sentences.append(_emit_sentence(rng, layout, emotion, length, config.in_band_mass))

    labels = list(latent)
    if rng.random() < config.trigger_strength:
        trigger = int(rng.integers(e))
        sentences[0] = layout.motif(trigger) + sentences[0]
        labels[-1] = trigger
    return DialogueSample(dialogue_id=f'd{config.seed}-{index:06d}', sentences=sentences,
                          sentence_emotions=labels, seed=config.seed)


def generate_corpus(config: GeneratorConfig, threads: int = 1) -> List[DialogueSample]:
    """
    Generate ``config.num_dialogues`` dialogues.

    Args:
        config: Generator configuration; validated here.
        threads: Worker threads; output is identical for any value.

    Returns:
        Dialogues ordered by index.
    """
    config.validate()
    layout = CodebookLayout(config)
    logger.info(f"Generating {config.num_dialogues} dialogues (seed={config.seed}, threads={threads})")
    with ThreadPoolExecutor(max_workers=threads) as executor:
        corpus = list(executor.map(lambda i: generate_dialogue(config, i, layout), range(config.num_dialogues)))
    total_tokens = sum(d.num_tokens for d in corpus)
    logger.info(f"Generated {total_tokens} tokens ({nominal_seconds(total_tokens):.1f} nominal seconds)")
    return corpus


def validate_sample(sample: DialogueSample, codebook_size: int, num_emotions: int) -> None:
    if not sample.sentences or len(sample.sentences) != len(sample.sentence_emotions):
        raise DataError(f"{sample.dialogue_id}: {len(sample.sentences)} sentences vs "
                        f"{len(sample.sentence_emotions)} labels")
    for i, sentence in enumerate(sample.sentences):
        if not sentence:
            raise DataError(f"{sample.dialogue_id}: sentence {i} is empty")
        if min(sentence) < 0 or max(sentence) >= codebook_size:
            raise DataError(f"{sample.dialogue_id}: sentence {i} has codes outside [0, {codebook_size})")
    for i, label in enumerate(sample.sentence_emotions):
        if not 0 <= label < num_emotions:
            raise LabelError(f"{sample.dialogue_id}: label {label} of sentence {i} outside [0, {num_emotions})")


def preprocess_sample(sample: DialogueSample, vocab: Vocabulary, strip_emotions: bool = False) -> PreprocessedSample:
    """
    Interleave audio_end and emotion identifiers after every sentence.

    Args:
        sample: Dialogue with codebook-index sentences.
        vocab: Target vocabulary.
        strip_emotions: Leave emotion identifiers out of the stream.

    Returns:
        The token stream with the recorded audio_end positions.
    """
    validate_sample(sample, vocab.codebook_size, vocab.num_emotions)
    tokens, starts, ends = [], [], []
    for sentence, label in zip(sample.sentences, sample.sentence_emotions):
        starts.append(len(tokens))
        tokens.extend(vocab.audio_offset + code for code in sentence)
        ends.append(len(tokens))
        tokens.append(vocab.audio_end_id)
        if not strip_emotions:
            tokens.append(vocab.emotion_ids[label])
    return PreprocessedSample(dialogue_id=sample.dialogue_id, tokens=np.asarray(tokens, dtype=np.int64),
                              record_starts=starts, audio_end_positions=ends,
                              labels=list(sample.sentence_emotions), strip_emotions=strip_emotions)


def strip_markers(tokens: Sequence[int], vocab: Vocabulary) -> List[List[int]]:
    """Recover codebook-index sentences from a preprocessed stream."""
    sentences, current = [], []
    for token in tokens:
        token = int(token)
        if token == vocab.audio_end_id:
            sentences.append(current)
            current = []
        elif not vocab.is_emotion(token):
            current.append(token - vocab.audio_offset)
    if current:
        sentences.append(current)
    return sentences


def make_prefix_views(sample: DialogueSample) -> List[DialogueSample]:
    """Prefixes of 1..S sentences; each view's target is its last sentence's emotion."""
    return [DialogueSample(dialogue_id=f'{sample.dialogue_id}#{k}', sentences=sample.sentences[:k],
                           sentence_emotions=sample.sentence_emotions[:k], seed=sample.seed)
            for k in range(1, sample.num_sentences + 1)]


def split_corpus(corpus: Sequence[DialogueSample], test_fraction: float = 0.2, seed: int = 0) -> Tuple[List[DialogueSample], List[DialogueSample]]:
    """Split by dialogue into ``(train, test)``, both kept in corpus order."""
    order = np.random.default_rng(seed).permutation(len(corpus))
    num_test = max(1, int(round(test_fraction * len(corpus))))
    test_index = set(order[:num_test].tolist())
    train = [d for i, d in enumerate(corpus) if i not in test_index]
    test = [d for i, d in enumerate(corpus) if i in test_index]
    return train, test


def _record_line(sample: DialogueSample) -> str:
    return json.dumps(sample.to_record(), sort_keys=True, separators=(',', ':'))


def corpus_hash(corpus: Sequence[DialogueSample]) -> str:
    digest = hashlib.sha256()
    for sample in corpus:
        digest.update(_record_line(sample).encode('utf-8'))
        digest.update(b'\n')
    return digest.hexdigest()


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.manifest.json')


def write_corpus(path: Union[str, Path], corpus: Sequence[DialogueSample], config: Optional[GeneratorConfig] = None) -> str:
    """
    Write a header line and one JSON record per dialogue, plus a hash sidecar.

    Returns:
        The content hash.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {'schema': SCHEMA_VERSION, 'count': len(corpus), 'generator': asdict(config) if config else None}
    with open(path, 'w', encoding='utf-8') as f:
        f.write(json.dumps(header, sort_keys=True) + '\n')
        for sample in corpus:
            f.write(_record_line(sample) + '\n')
    content_hash = corpus_hash(corpus)
    manifest = {'schema': SCHEMA_VERSION, 'count': len(corpus), 'content_hash': content_hash, 'corpus': path.name}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding='utf-8')
    logger.info(f"Wrote {len(corpus)} dialogues to {path} (sha256 {content_hash[:12]})")
    return content_hash


def read_corpus(path: Union[str, Path]) -> Tuple[List[DialogueSample], Optional[GeneratorConfig]]:
    """
    Read a corpus written by ``write_corpus``.

    Raises:
        DataError: unknown schema, malformed or missing records (the record index is named).
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        lines = f.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty corpus file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed header: {e}") from None
    if not isinstance(header, dict):
        raise DataError(f"{path}: header must be a JSON object")
    if header.get('schema') != SCHEMA_VERSION:
        raise DataError(f"{path}: schema {header.get('schema')!r}, expected {SCHEMA_VERSION!r}")
    try:
        generator = GeneratorConfig(**header['generator']) if header.get('generator') else None
    except TypeError as e:
        raise DataError(f"{path}: header generator settings are invalid: {e}") from None

    corpus = []
    for index, line in enumerate(lines[1:]):
        try:
            record = json.loads(line)
            sample = DialogueSample(dialogue_id=str(record['id']), sentences=[[int(t) for t in s] for s in record['sentences']],
                                    sentence_emotions=[int(e) for e in record['emotions']], seed=int(record['seed']))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: record {index} is corrupt: {e}", record_index=index) from None
        if not sample.sentences or len(sample.sentences) != len(sample.sentence_emotions):
            raise DataError(f"{path}: record {index} has mismatched sentences and labels", record_index=index)
        corpus.append(sample)
    if len(corpus) != header.get('count', len(corpus)):
        raise DataError(f"{path}: header announces {header.get('count')} records, found {len(corpus)} (truncated)",
                        record_index=len(corpus))
    return corpus, generator

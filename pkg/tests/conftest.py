import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import ClassifierConfig, DpmConfig, GeneratorConfig, ModelConfig, TrainConfig  # noqa: E402
from corpus import DialogueSample, generate_corpus  # noqa: E402
from lora import attach_training_lora, freeze_model  # noqa: E402
from model import build_model  # noqa: E402


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(embed_dim=16, num_layers=2, num_heads=2, n_limit=64, codebook_size=64, num_emotions=4,
                  dtype='float64', seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_generator_config(**overrides) -> GeneratorConfig:
    values = dict(num_dialogues=12, min_sentences=2, max_sentences=5, min_tokens=3, max_tokens=6,
                  num_emotions=4, codebook_size=64, band_width=4, topic_width=4, seed=3)
    values.update(overrides)
    return GeneratorConfig(**values)


def randomize_adapter(adapter, seed: int, scale: float = 0.05) -> None:
    """Give ``B`` nonzero values so the adapter actually changes outputs."""
    rng = np.random.default_rng(seed)
    for _, b in adapter.layers.values():
        b.data = rng.normal(0.0, scale, b.shape).astype(b.dtype)


def handmade_dialogue(lengths, emotion: int = 0, dialogue_id: str = 'hand', codebook_size: int = 64) -> DialogueSample:
    sentences = [[(7 * i + j) % codebook_size for j in range(n)] for i, n in enumerate(lengths)]
    return DialogueSample(dialogue_id=dialogue_id, sentences=sentences, sentence_emotions=[emotion] * len(lengths))


@pytest.fixture
def model_config():
    return tiny_model_config()


@pytest.fixture
def tiny_model(model_config):
    return build_model(model_config)


@pytest.fixture
def frozen_model(model_config):
    """Tiny model with a nonzero training adapter, fully frozen."""
    model = build_model(model_config)
    adapter = attach_training_lora(model, rank=2, alpha=2.0, seed=1)
    randomize_adapter(adapter, seed=2)
    freeze_model(model)
    return model


@pytest.fixture
def generator_config():
    return tiny_generator_config()


@pytest.fixture
def small_corpus(generator_config):
    return generate_corpus(generator_config)


@pytest.fixture
def train_config():
    return TrainConfig(n_o=8, n_p=16, n_q=16, learning_rate=1e-2, epochs=1, batch_size=4, seed=0)


@pytest.fixture
def dpm_config():
    return DpmConfig(n_r=16, learning_rate=1e-2, seed=0)


@pytest.fixture
def classifier_config():
    return ClassifierConfig(embed_dim=16, num_layers=1, num_heads=2, window=64, learning_rate=1e-3,
                            epochs=2, batch_size=4, seed=0)

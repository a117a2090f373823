import json

import numpy as np
import pytest

from config import GeneratorConfig, Vocabulary
from corpus import (MOTIF_LENGTH, CodebookLayout, DialogueSample, corpus_hash, generate_corpus, make_prefix_views,
                    manifest_path, preprocess_sample, preset_config, read_corpus, split_corpus, strip_markers,
                    write_corpus)
from errors import ConfigError, DataError, LabelError

from conftest import handmade_dialogue, tiny_generator_config

VOCAB = Vocabulary(text_stub_size=0, codebook_size=64, num_emotions=4)


def test_generation_is_deterministic_across_threads(generator_config):
    single = generate_corpus(generator_config, threads=1)
    threaded = generate_corpus(generator_config, threads=4)
    assert corpus_hash(single) == corpus_hash(threaded)


def test_sentences_respect_configured_ranges(generator_config):
    for d in generate_corpus(tiny_generator_config(trigger_strength=0.0)):
        assert generator_config.min_sentences <= d.num_sentences <= generator_config.max_sentences
        assert all(generator_config.min_tokens <= len(s) <= generator_config.max_tokens for s in d.sentences)
        assert all(0 <= t < generator_config.codebook_size for s in d.sentences for t in s)


def test_p_stay_one_without_trigger_keeps_one_emotion():
    corpus = generate_corpus(tiny_generator_config(p_stay=1.0, trigger_strength=0.0, num_dialogues=30))
    for d in corpus:
        assert len(set(d.sentence_emotions)) == 1


def test_full_trigger_fixes_final_label():
    config = tiny_generator_config(trigger_strength=1.0, num_dialogues=40)
    layout = CodebookLayout(config)
    for d in generate_corpus(config):
        assert d.sentences[0][:MOTIF_LENGTH] == layout.motif(d.final_emotion)


def test_stay_rate_matches_p_stay():
    config = tiny_generator_config(num_dialogues=500, min_sentences=21, max_sentences=21, min_tokens=1,
                                   max_tokens=1, p_stay=0.8, trigger_strength=0.0)
    stays = [a == b for d in generate_corpus(config) for a, b in zip(d.sentence_emotions, d.sentence_emotions[1:])]
    assert len(stays) == 10_000
    assert np.mean(stays) == pytest.approx(0.8, abs=0.02)


def test_codebook_too_small_is_rejected():
    with pytest.raises(ConfigError, match='too small'):
        CodebookLayout(GeneratorConfig(codebook_size=16, num_emotions=4, band_width=4, topic_width=4))


def test_generator_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(p_stay=0.0).validate()
    with pytest.raises(ConfigError):
        GeneratorConfig(min_sentences=5, max_sentences=2).validate()


def test_presets():
    assert preset_config('meld_like').num_emotions == 7
    assert preset_config('iemocap_like', seed=4).seed == 4
    with pytest.raises(ConfigError):
        preset_config('switchboard')


def test_preprocess_single_sentence_positions():
    sample = DialogueSample('one', [[1, 2, 3, 4, 5]], [2])
    stream = preprocess_sample(sample, VOCAB)
    assert stream.tokens.tolist() == [1, 2, 3, 4, 5, VOCAB.audio_end_id, VOCAB.emotion_ids[2]]
    assert stream.record_starts == [0]
    assert stream.audio_end_positions == [5]
    assert stream.inference_tokens.tolist() == [1, 2, 3, 4, 5, VOCAB.audio_end_id]
    assert stream.target_lengths() == [6]


def test_preprocess_offsets_codes_past_text_stub():
    vocab = Vocabulary(text_stub_size=10, codebook_size=64, num_emotions=4)
    stream = preprocess_sample(DialogueSample('x', [[0, 63]], [0]), vocab)
    assert stream.tokens.tolist() == [10, 73, 74, 75]


def test_fifty_sentences_carry_fifty_markers():
    sample = handmade_dialogue([3] * 50)
    stream = preprocess_sample(sample, VOCAB)
    assert int(np.sum(stream.tokens == VOCAB.audio_end_id)) == 50
    assert sum(VOCAB.is_emotion(int(t)) for t in stream.tokens) == 50
    stripped = preprocess_sample(sample, VOCAB, strip_emotions=True)
    assert int(np.sum(stripped.tokens == VOCAB.audio_end_id)) == 50
    assert not any(VOCAB.is_emotion(int(t)) for t in stripped.tokens)
    assert stripped.record_starts[1] == 4


def test_strip_markers_recovers_sentences(small_corpus):
    for d in small_corpus:
        assert strip_markers(preprocess_sample(d, VOCAB).tokens, VOCAB) == d.sentences


def test_preprocess_rejects_bad_labels_and_codes():
    with pytest.raises(LabelError):
        preprocess_sample(DialogueSample('bad', [[1, 2]], [4]), VOCAB)
    with pytest.raises(DataError):
        preprocess_sample(DialogueSample('bad', [[1, 64]], [0]), VOCAB)
    with pytest.raises(DataError):
        preprocess_sample(DialogueSample('bad', [[1], []], [0, 0]), VOCAB)


def test_prefix_views(small_corpus):
    d = small_corpus[0]
    views = make_prefix_views(d)
    assert len(views) == d.num_sentences
    assert views[-1].sentences == d.sentences
    assert [v.num_sentences for v in views] == list(range(1, d.num_sentences + 1))
    assert views[0].dialogue_id == f'{d.dialogue_id}#1'


def test_split_is_disjoint_and_complete(small_corpus):
    train, test = split_corpus(small_corpus, test_fraction=0.25, seed=1)
    train_ids, test_ids = {d.dialogue_id for d in train}, {d.dialogue_id for d in test}
    assert not train_ids & test_ids
    assert len(train_ids | test_ids) == len(small_corpus)
    assert len(test) == 3


def test_round_trip_and_manifest(small_corpus, generator_config, tmp_path):
    path = tmp_path / 'c.jsonl'
    content_hash = write_corpus(path, small_corpus, generator_config)
    corpus, generator = read_corpus(path)
    assert corpus == small_corpus
    assert generator == generator_config
    assert json.loads(manifest_path(path).read_text())['content_hash'] == content_hash == corpus_hash(corpus)


def test_corrupt_record_names_its_index(small_corpus, tmp_path):
    path = tmp_path / 'c.jsonl'
    write_corpus(path, small_corpus)
    lines = path.read_text().splitlines()
    lines[4] = '{"id": "broken", "sentences": [[1, 2'
    path.write_text('\n'.join(lines) + '\n')
    with pytest.raises(DataError) as excinfo:
        read_corpus(path)
    assert excinfo.value.record_index == 3


def test_truncated_corpus_is_rejected(small_corpus, tmp_path):
    path = tmp_path / 'c.jsonl'
    write_corpus(path, small_corpus)
    lines = path.read_text().splitlines()
    path.write_text('\n'.join(lines[:-2]) + '\n')
    with pytest.raises(DataError, match='truncated'):
        read_corpus(path)


def test_unknown_schema_is_rejected(tmp_path):
    path = tmp_path / 'c.jsonl'
    path.write_text(json.dumps({'schema': 'dpm-corpus/0', 'count': 0}) + '\n')
    with pytest.raises(DataError, match='schema'):
        read_corpus(path)


@pytest.mark.parametrize('header', [
    {'schema': 'dpm-corpus/1', 'count': 0, 'generator': {'num_dialogues': 2, 'temperature': 0.7}},
    {'schema': 'dpm-corpus/1', 'count': 0, 'generator': [2, 3]},
    ['dpm-corpus/1'],
])
def test_malformed_header_is_a_data_error(header, tmp_path):
    path = tmp_path / 'c.jsonl'
    path.write_text(json.dumps(header) + '\n')
    with pytest.raises(DataError, match='header'):
        read_corpus(path)


def test_same_seed_same_hash_different_seed_differs():
    a = generate_corpus(tiny_generator_config(seed=7))
    b = generate_corpus(tiny_generator_config(seed=7))
    c = generate_corpus(tiny_generator_config(seed=8))
    assert corpus_hash(a) == corpus_hash(b) != corpus_hash(c)

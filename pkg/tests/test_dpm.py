import numpy as np
import pytest

import dpm
import numerics as nx
from baselines import one_shot_distribution, one_shot_infer
from config import DpmConfig, LoraConfig
from corpus import generate_corpus, preprocess_sample
from dpm import check_sample_window, dpm_infer, dpm_step, step_loss, step_schedule, window_check, write_trace
from errors import ConfigError, ShapeError, WindowViolationError
from evaluation_utils import cost_counter
from experiments import synthetic_dialogue
from lora import attach_training_lora, create_temp_lora, discard_temp_lora, freeze_model
from model import build_model

from conftest import handmade_dialogue, randomize_adapter, tiny_generator_config, tiny_model_config

SMALL_LORA = LoraConfig(rank=2, alpha=2.0)


@pytest.fixture
def wide_model():
    """Frozen tiny model with a 256-token window."""
    model = build_model(tiny_model_config(n_limit=256))
    adapter = attach_training_lora(model, rank=2, alpha=2.0, seed=1)
    randomize_adapter(adapter, seed=2)
    freeze_model(model)
    return model


def stream(lengths, model, strip_emotions=False):
    return preprocess_sample(handmade_dialogue(lengths), model.vocabulary, strip_emotions=strip_emotions)


def test_window_check_examples():
    assert window_check(256, 96, 128).ok
    violation = window_check(256, 200, 128, sentence=3)
    assert not violation.ok
    assert 'sentence 3' in str(violation) and '328' in str(violation)


def test_first_sentence_is_not_a_target(frozen_model, dpm_config):
    sample = stream([60, 5, 5], frozen_model)
    check = check_sample_window(frozen_model.n_limit, sample, dpm_config)
    assert check.ok and check.n_max == 6
    _, trace = dpm_infer(frozen_model, sample, dpm_config, SMALL_LORA)
    assert trace.update_count == 2
    assert max(trace.forward_lengths) <= frozen_model.n_limit


def test_fixed_stride_window_uses_stride():
    config = DpmConfig(n_r=16, stepping='fixed_stride', stride=50)
    assert check_sample_window(64, None, config).n_max == 50
    assert not check_sample_window(64, None, config).ok


@pytest.mark.parametrize('num_sentences', [1, 2, 10, 50])
def test_sentence_schedule_has_one_update_per_later_sentence(frozen_model, dpm_config, num_sentences):
    sample = stream([3] * num_sentences, frozen_model)
    schedule = step_schedule(sample, 'sentence', n_r=16)
    assert len(schedule) == num_sentences - 1
    for step, start, end in zip(schedule, sample.record_starts[1:], sample.audio_end_positions[1:]):
        assert step.target == range(start, end + 1)
        assert step.prefix == range(max(0, start - 16), start)
    _, trace = dpm_infer(frozen_model, sample, dpm_config, SMALL_LORA)
    assert trace.update_count == num_sentences - 1
    assert len(trace.steps) == num_sentences - 1


def test_fixed_stride_schedule_tiles_the_stream(frozen_model):
    sample = stream([999], frozen_model)
    assert len(sample.inference_tokens) == 1000
    schedule = step_schedule(sample, 'fixed_stride', n_r=128, stride=128)
    assert len(schedule) == 7
    covered = [t for step in schedule for t in step.target]
    assert covered == list(range(128, 1000))
    assert all(len(step.prefix) == 128 for step in schedule)
    assert len(schedule[-1].target) == 104


def test_schedule_rejects_bad_input(frozen_model):
    sample = stream([3, 3], frozen_model)
    with pytest.raises(ShapeError):
        step_schedule(sample, 'fixed_stride', n_r=4, stride=0)
    with pytest.raises(ShapeError):
        step_schedule(sample, 'paragraph', n_r=4)


def test_step_loss_forward_length_is_prefix_plus_target_minus_one(frozen_model):
    sample = stream([5, 5, 5], frozen_model)
    step = step_schedule(sample, 'sentence', n_r=4)[1]
    loss, length = step_loss(frozen_model, sample.inference_tokens, step)
    assert length == len(step.prefix) + len(step.target) - 1
    assert loss.item() > 0


def test_zero_learning_rate_leaves_adapter_unchanged(frozen_model):
    sample = stream([4] * 6, frozen_model)
    temp = create_temp_lora(frozen_model, rank=2, alpha=2.0, seed=0, learning_rate=0.0)
    before = {k: v.copy() for k, v in temp.adapter.state_dict().items()}
    for step in step_schedule(sample, 'sentence', n_r=16):
        dpm_step(frozen_model, temp, sample.inference_tokens, step)
    for key, value in temp.adapter.state_dict().items():
        np.testing.assert_array_equal(value, before[key])
    discard_temp_lora(frozen_model, temp)


def test_single_sentence_equals_one_shot(frozen_model, dpm_config):
    sample = stream([10], frozen_model)
    prediction, trace = dpm_infer(frozen_model, sample, dpm_config, SMALL_LORA)
    distribution, length = one_shot_distribution(frozen_model, sample)
    assert trace.update_count == 0
    assert trace.final_forward_len == length == 11
    np.testing.assert_array_equal(trace.final_distribution, distribution)
    assert prediction == int(np.argmax(distribution))


def test_long_dialogue_stays_inside_window(wide_model):
    sample = stream([95, 31] * 32, wide_model, strip_emotions=True)
    assert len(sample.inference_tokens) == 4096
    config = DpmConfig(n_r=128, learning_rate=1e-3, strip_emotions=True, seed=0)
    assert check_sample_window(wide_model.n_limit, sample, config).n_max == 96
    _, trace = dpm_infer(wide_model, sample, config, SMALL_LORA)
    assert trace.update_count == 63
    assert max(trace.forward_lengths) <= wide_model.n_limit
    assert trace.final_forward_len == 128
    with pytest.raises(ShapeError):
        one_shot_infer(wide_model, sample)


def test_violation_leaves_no_temporary_adapter(frozen_model, dpm_config):
    sample = stream([5, 60], frozen_model)
    with pytest.raises(WindowViolationError) as excinfo:
        dpm_infer(frozen_model, sample, dpm_config, SMALL_LORA)
    assert excinfo.value.violation.sentence == 1
    assert excinfo.value.violation.n_max == 61
    assert 'temp' not in frozen_model.adapters


def test_failed_step_still_discards_adapter(frozen_model, dpm_config, monkeypatch):
    def failing_step(*args):
        raise ShapeError('step failed')

    monkeypatch.setattr(dpm, 'dpm_step', failing_step)
    with pytest.raises(ShapeError, match='step failed'):
        dpm_infer(frozen_model, stream([4, 4], frozen_model), dpm_config, SMALL_LORA)
    assert 'temp' not in frozen_model.adapters


def test_invalid_config_is_rejected(frozen_model):
    with pytest.raises(ConfigError):
        dpm_infer(frozen_model, stream([3, 3], frozen_model), DpmConfig(n_r=0))


def test_dpm_is_deterministic(frozen_model, small_corpus, dpm_config):
    first = dpm_infer(frozen_model, small_corpus[2], dpm_config, SMALL_LORA)
    second = dpm_infer(frozen_model, small_corpus[2], dpm_config, SMALL_LORA)
    assert first[0] == second[0]
    assert first[1].losses == second[1].losses
    np.testing.assert_array_equal(first[1].final_distribution, second[1].final_distribution)


def test_dpm_cost_grows_linearly(wide_model):
    config = DpmConfig(n_r=128, learning_rate=1e-3, seed=0)
    costs = []
    for count in (20, 40):
        _, trace = dpm_infer(wide_model, synthetic_dialogue(count, 24, 64), config, SMALL_LORA)
        assert trace.update_count == count - 1
        costs.append(cost_counter(trace.forward_lengths))
    assert 1.9 <= costs[1] / costs[0] <= 2.3
    assert cost_counter([1000]) / cost_counter([500]) >= 3.5


def test_write_trace(frozen_model, dpm_config, tmp_path):
    _, trace = dpm_infer(frozen_model, stream([4, 4, 4], frozen_model), dpm_config, SMALL_LORA)
    write_trace(tmp_path / 'trace.tsv', trace)
    lines = (tmp_path / 'trace.tsv').read_text().splitlines()
    assert lines[0] == 'step\tprefix_len\ttarget_len\tL_t\tforward_len'
    assert len(lines) == 3
    assert lines[1].split('\t')[:3] == ['0', '6', '5']


def test_step_loss_gradient_matches_finite_differences(frozen_model):
    sample = stream([5, 6, 4], frozen_model)
    step = step_schedule(sample, 'sentence', n_r=8)[1]
    temp = create_temp_lora(frozen_model, rank=2, alpha=2.0, seed=3)
    randomize_adapter(temp.adapter, seed=4)
    try:
        def loss_fn():
            return step_loss(frozen_model, sample.inference_tokens, step)[0]

        nx.zero_grad(temp.adapter.parameters())
        nx.backward(loss_fn())
        h = 1e-5
        for tensor in (temp.adapter.layers['blocks.0.attn.q'][0], temp.adapter.layers['blocks.1.mlp.fc2'][1]):
            numeric = np.zeros_like(tensor.data)
            with nx.no_grad():
                for index in np.ndindex(tensor.shape):
                    original = tensor.data[index]
                    tensor.data[index] = original + h
                    plus = loss_fn().item()
                    tensor.data[index] = original - h
                    minus = loss_fn().item()
                    tensor.data[index] = original
                    numeric[index] = (plus - minus) / (2 * h)
            scale = max(np.abs(numeric).max(), np.abs(tensor.grad).max(), 1e-8)
            assert np.abs(numeric - tensor.grad).max() / scale < 1e-4
    finally:
        discard_temp_lora(frozen_model, temp)


def test_repeating_a_step_lowers_its_loss(frozen_model, small_corpus):
    lowered = 0
    for trial in range(20):
        sample = preprocess_sample(small_corpus[trial % len(small_corpus)], frozen_model.vocabulary)
        step = step_schedule(sample, 'sentence', n_r=16)[0]
        temp = create_temp_lora(frozen_model, rank=2, alpha=2.0, seed=trial, learning_rate=1e-3)
        try:
            first, _ = dpm_step(frozen_model, temp, sample.inference_tokens, step)
            second, _ = dpm_step(frozen_model, temp, sample.inference_tokens, step)
        finally:
            discard_temp_lora(frozen_model, temp)
        lowered += second < first
    assert lowered >= 19


@pytest.mark.parametrize('corpus_seed', [3, 4])
@pytest.mark.parametrize('n_r', [10, 12])
def test_window_check_agrees_with_inference_on_generated_corpus(corpus_seed, n_r):
    model = build_model(tiny_model_config(n_limit=20))
    attach_training_lora(model, rank=2, alpha=2.0, seed=1)
    freeze_model(model)
    config = DpmConfig(n_r=n_r, learning_rate=1e-3, seed=0)
    corpus = generate_corpus(tiny_generator_config(num_dialogues=30, max_tokens=12, seed=corpus_seed))
    accepted = rejected = 0
    for dialogue in corpus:
        sample = preprocess_sample(dialogue, model.vocabulary)
        if check_sample_window(model.n_limit, sample, config).ok:
            _, trace = dpm_infer(model, sample, config, SMALL_LORA)
            assert max(trace.forward_lengths) <= model.n_limit
            accepted += 1
        else:
            with pytest.raises(WindowViolationError):
                dpm_infer(model, sample, config, SMALL_LORA)
            rejected += 1
        assert 'temp' not in model.adapters
    assert accepted and rejected


def test_preprocessed_stream_must_match_strip_setting(frozen_model, dpm_config):
    sample = stream([4, 4], frozen_model, strip_emotions=True)
    with pytest.raises(ShapeError, match='strip_emotions'):
        dpm_infer(frozen_model, sample, dpm_config, SMALL_LORA)
    _, trace = dpm_infer(frozen_model, sample, DpmConfig(n_r=16, strip_emotions=True), SMALL_LORA)
    assert trace.update_count == 1

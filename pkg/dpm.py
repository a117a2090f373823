"""
Dynamic Parameter Memory inference.

For each sample a temporary adapter is stacked on the frozen model. At the end
of every sentence the preceding ``n_r`` tokens are used as a prefix to predict
the next sentence (teacher-forced), and one optimizer step writes that sentence
into the adapter. After the last update the emotion is read off the
constrained logits over the final ``n_r`` tokens, and the adapter is dropped.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from typing_extensions import TypedDict

import numerics as nx
from config import DpmConfig, LoraConfig
from corpus import DialogueSample, PreprocessedSample, preprocess_sample
from errors import ShapeError, WindowViolationError
from lora import TempLora, create_temp_lora, discard_temp_lora
from model import Model, forward, predict_emotion_distribution

logger = logging.getLogger('SpeechDPM')


class StepRecord(TypedDict):
    step: int
    prefix_start: int
    prefix_len: int
    target_start: int
    target_len: int
    loss: float
    forward_len: int


@dataclass
class Step:
    prefix: range
    target: range


@dataclass
class WindowCheck:
    """Outcome of ``n_limit >= n_max + n_r``; ``sentence`` names the longest target span."""
    ok: bool
    n_limit: int
    n_max: int
    n_r: int
    sentence: Optional[int] = None

    def __str__(self):
        verdict = 'ok' if self.ok else 'violation'
        where = f" at sentence {self.sentence}" if self.sentence is not None else ''
        return (f"window {verdict}: n_max={self.n_max}{where} + n_r={self.n_r} = {self.n_max + self.n_r} "
                f"{'<=' if self.ok else '>'} n_limit={self.n_limit}")


@dataclass
class DpmTrace:
    steps: List[StepRecord] = field(default_factory=list)
    final_distribution: Optional[np.ndarray] = None
    final_forward_len: int = 0
    update_count: int = 0

    @property
    def forward_lengths(self) -> List[int]:
        return [s['forward_len'] for s in self.steps] + [self.final_forward_len]

    @property
    def losses(self) -> List[float]:
        return [s['loss'] for s in self.steps]


def window_check(n_limit: int, n_max: int, n_r: int, sentence: Optional[int] = None) -> WindowCheck:
    return WindowCheck(ok=n_limit >= n_max + n_r, n_limit=n_limit, n_max=n_max, n_r=n_r, sentence=sentence)


def check_sample_window(n_limit: int, sample: PreprocessedSample, config: DpmConfig) -> WindowCheck:
    """``window_check`` with ``n_max`` taken from the sample under the configured stepping."""
    if config.stepping == 'fixed_stride':
        return window_check(n_limit, config.stride, config.n_r)
    lengths = sample.target_lengths()
    # the first sentence is never a target
    candidates = lengths[1:] or [0]
    worst = int(np.argmax(candidates))
    return window_check(n_limit, candidates[worst], config.n_r, sentence=worst + 1 if len(lengths) > 1 else None)


def step_schedule(sample: PreprocessedSample, stepping: str = 'sentence', n_r: int = 128,
                  stride: Optional[int] = None) -> List[Step]:
    """
    Prefix/target spans for every update of one sample.

    Sentence stepping targets sentences 2..S (tokens through the audio_end);
    fixed-stride stepping targets the k-token blocks after the first. Prefixes are
    the ``min(n_r, available)`` tokens right before each target.
    """
    stream_len = len(sample.inference_tokens)
    if sample.num_sentences == 0 or stream_len == 0:
        raise ShapeError(f"step_schedule: sample {sample.dialogue_id} is empty")
    if stepping == 'sentence':
        targets = [range(start, end + 1) for start, end in
                   zip(sample.record_starts[1:], sample.audio_end_positions[1:])]
    elif stepping == 'fixed_stride':
        if not stride or stride < 1:
            raise ShapeError(f"step_schedule: stride must be >= 1, got {stride}")
        targets = [range(start, min(start + stride, stream_len)) for start in range(stride, stream_len, stride)]
    else:
        raise ShapeError(f"step_schedule: unknown stepping {stepping!r}")
    return [Step(prefix=range(max(0, t.start - n_r), t.start), target=t) for t in targets]


def step_loss(model: Model, tokens: np.ndarray, step: Step) -> Tuple[nx.Tensor, int]:
    """Teacher-forced mean next-token loss over the target of ``step``, and the forward length."""
    start, stop = step.prefix.start, step.target.stop
    if len(step.prefix) == 0:
        raise ShapeError(f"step_loss: target {step.target} has no prefix")
    input_ids = np.asarray(tokens[start:stop - 1], dtype=np.int64)
    if len(input_ids) > model.n_limit:
        raise ShapeError(f"step_loss: {len(input_ids)} tokens exceed n_limit={model.n_limit}")
    positions = np.arange(step.target.start - 1 - start, stop - 1 - start)
    logits = forward(model, input_ids)
    loss = nx.cross_entropy(nx.take(logits, positions, axis=0), np.asarray(tokens[step.target.start:stop], dtype=np.int64))
    return loss, len(input_ids)


def dpm_step(model: Model, temp: TempLora, tokens: np.ndarray, step: Step) -> Tuple[float, int]:
    """
    One teacher-forced forward over ``[prefix || target]`` and one adapter update.

    Returns:
        ``(L_t, forward_length)`` where L_t is the mean next-token loss over the
        target tokens.
    """
    loss, length = step_loss(model, tokens, step)
    params = temp.adapter.parameters()
    nx.zero_grad(params)
    nx.backward(loss)
    nx.optimizer_step(params, temp.optimizer)
    return loss.item(), length


def dpm_infer(model: Model, sample: Union[DialogueSample, PreprocessedSample], config: DpmConfig,
              lora: Optional[LoraConfig] = None) -> Tuple[int, DpmTrace]:
    """
    Run DPM over one sample.

    Args:
        model: Trained model; base and adapters must be frozen.
        sample: Dialogue (preprocessed here) or an already preprocessed stream.
        config: DPM settings.
        lora: Rank/alpha of the temporary adapter.

    Returns:
        ``(predicted emotion, trace)``.

    Raises:
        WindowViolationError: the sample fails ``n_limit >= n_max + n_r``.
    """
    config.validate()
    lora = lora or LoraConfig()
    if isinstance(sample, DialogueSample):
        sample = preprocess_sample(sample, model.vocabulary, strip_emotions=config.strip_emotions)
    elif sample.strip_emotions != config.strip_emotions:
        raise ShapeError(f"dpm_infer: {sample.dialogue_id} was preprocessed with strip_emotions="
                         f"{sample.strip_emotions}, config asks for {config.strip_emotions}")
    check = check_sample_window(model.n_limit, sample, config)
    if not check.ok:
        raise WindowViolationError(check)

    tokens = sample.inference_tokens
    schedule = step_schedule(sample, config.stepping, config.n_r, config.stride)
    trace = DpmTrace()
    temp = create_temp_lora(model, lora.rank, lora.alpha, seed=config.seed,
                            optimizer=config.optimizer, learning_rate=config.learning_rate)
    try:
        for index, step in enumerate(schedule):
            loss, length = dpm_step(model, temp, tokens, step)
            trace.steps.append(StepRecord(step=index, prefix_start=step.prefix.start, prefix_len=len(step.prefix),
                                          target_start=step.target.start, target_len=len(step.target),
                                          loss=loss, forward_len=length))
            logger.debug(f"{sample.dialogue_id} step {index}: L_t={loss:.4f} forward={length}")
        trace.update_count = temp.optimizer.step_count
        final = tokens[max(0, len(tokens) - config.n_r):]
        trace.final_distribution = predict_emotion_distribution(model, final)
        trace.final_forward_len = len(final)
    finally:
        discard_temp_lora(model, temp)
    return int(np.argmax(trace.final_distribution)), trace


def write_trace(path: Union[str, Path], trace: DpmTrace) -> None:
    """Trace rows (step, prefix_len, target_len, L_t, forward_len) as tab-separated text."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = ['step\tprefix_len\ttarget_len\tL_t\tforward_len']
    rows += [f"{s['step']}\t{s['prefix_len']}\t{s['target_len']}\t{s['loss']:.6f}\t{s['forward_len']}" for s in trace.steps]
    path.write_text('\n'.join(rows) + '\n', encoding='utf-8')

"""
Decoder-only causal transformer over the extended speech vocabulary.

Every linear layer goes through ``apply_linear`` so that any number of
low-rank adapters can be stacked on it: ``W x + sum_a (alpha_a / r_a) B_a A_a x``.
"""
import logging
from dataclasses import asdict
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import numerics as nx
from numerics import Tensor
from checkpoint_io import load_checkpoint, save_checkpoint
from config import ModelConfig, Vocabulary
from errors import DataError, ShapeError

logger = logging.getLogger('SpeechDPM')

INIT_STD = 0.02
PARAMETER_GROUPS = ('embedding', 'blocks', 'head')


@lru_cache(maxsize=8)
def causal_mask(length: int, dtype: str) -> np.ndarray:
    """``(T, T)`` additive mask, ``-inf`` strictly above the diagonal; shared, so read-only."""
    mask = np.zeros((length, length), dtype=dtype)
    mask[np.triu_indices(length, k=1)] = -np.inf
    mask.setflags(write=False)
    return mask


def init_block_params(rng: np.random.Generator, prefix: str, embed_dim: int, mlp_ratio: int, dtype) -> Dict[str, np.ndarray]:
    """Arrays for one pre-norm transformer block, in a fixed order."""
    d, hidden = embed_dim, embed_dim * mlp_ratio
    arrays = {
        f'{prefix}.ln1.gamma': np.ones(d, dtype=dtype),
        f'{prefix}.ln1.beta': np.zeros(d, dtype=dtype),
    }
    for proj in ('q', 'k', 'v', 'o'):
        arrays[f'{prefix}.attn.{proj}.weight'] = rng.normal(0.0, INIT_STD, (d, d)).astype(dtype)
        arrays[f'{prefix}.attn.{proj}.bias'] = np.zeros(d, dtype=dtype)
    arrays[f'{prefix}.ln2.gamma'] = np.ones(d, dtype=dtype)
    arrays[f'{prefix}.ln2.beta'] = np.zeros(d, dtype=dtype)
    arrays[f'{prefix}.mlp.fc1.weight'] = rng.normal(0.0, INIT_STD, (hidden, d)).astype(dtype)
    arrays[f'{prefix}.mlp.fc1.bias'] = np.zeros(hidden, dtype=dtype)
    arrays[f'{prefix}.mlp.fc2.weight'] = rng.normal(0.0, INIT_STD, (d, hidden)).astype(dtype)
    arrays[f'{prefix}.mlp.fc2.bias'] = np.zeros(d, dtype=dtype)
    return arrays


def block_linear_names(prefix: str) -> List[str]:
    return [f'{prefix}.attn.{p}' for p in ('q', 'k', 'v', 'o')] + [f'{prefix}.mlp.fc1', f'{prefix}.mlp.fc2']


def apply_linear(params: Dict[str, Tensor], name: str, x: Tensor, adapters: Sequence) -> Tensor:
    """Base projection plus every adapter delta registered for ``name``."""
    out = nx.linear(x, params[f'{name}.weight'], params.get(f'{name}.bias'))
    for adapter in adapters:
        pair = adapter.layers.get(name)
        if pair is None:
            continue
        a, b = pair
        out = out + nx.scale(nx.linear(nx.linear(x, a), b), adapter.scaling)
    return out


def attention(params, prefix: str, x: Tensor, num_heads: int, mask: np.ndarray, adapters) -> Tensor:
    batch, length, d = x.shape
    head_dim = d // num_heads

    def split(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (batch, length, num_heads, head_dim)), (0, 2, 1, 3))

    q = split(apply_linear(params, f'{prefix}.attn.q', x, adapters))
    k = split(apply_linear(params, f'{prefix}.attn.k', x, adapters))
    v = split(apply_linear(params, f'{prefix}.attn.v', x, adapters))
    scores = nx.scale(nx.matmul(q, nx.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    weights = nx.softmax(nx.add(scores, Tensor(mask)))
    mixed = nx.reshape(nx.transpose(nx.matmul(weights, v), (0, 2, 1, 3)), (batch, length, d))
    return apply_linear(params, f'{prefix}.attn.o', mixed, adapters)


def run_blocks(params: Dict[str, Tensor], x: Tensor, num_layers: int, num_heads: int, mask: np.ndarray,
               adapters: Sequence, nonlinearity: str = 'gelu') -> Tensor:
    act = nx.NONLINEARITIES[nonlinearity]
    for i in range(num_layers):
        prefix = f'blocks.{i}'
        h = nx.layer_norm(x, params[f'{prefix}.ln1.gamma'], params[f'{prefix}.ln1.beta'])
        x = x + attention(params, prefix, h, num_heads, mask, adapters)
        h = nx.layer_norm(x, params[f'{prefix}.ln2.gamma'], params[f'{prefix}.ln2.beta'])
        h = act(apply_linear(params, f'{prefix}.mlp.fc1', h, adapters))
        x = x + apply_linear(params, f'{prefix}.mlp.fc2', h, adapters)
    return x


def parameter_group(name: str) -> str:
    if name in ('tok_emb', 'pos_emb'):
        return 'embedding'
    if name.startswith('blocks.'):
        return 'blocks'
    return 'head'


class Model:
    """Frozen-or-trainable base weights plus an ordered set of attached adapters."""

    def __init__(self, config: ModelConfig, params: Dict[str, Tensor]):
        self.config = config
        self.params = params
        self.adapters = {}
        self.set_trainable_groups(config.trainable_groups)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.config.vocabulary

    @property
    def n_limit(self) -> int:
        return self.config.n_limit

    def linear_layers(self) -> List[Tuple[str, int, int]]:
        """``(name, in_dim, out_dim)`` for every linear layer, adapters target all of them."""
        names = []
        for i in range(self.config.num_layers):
            names.extend(block_linear_names(f'blocks.{i}'))
        names.append('head')
        return [(n, self.params[f'{n}.weight'].shape[1], self.params[f'{n}.weight'].shape[0]) for n in names]

    def set_trainable_groups(self, groups: Iterable[str]) -> None:
        groups = set(groups)
        for name, tensor in self.params.items():
            tensor.requires_grad = parameter_group(name) in groups

    def freeze(self) -> None:
        self.set_trainable_groups(())

    def base_parameters(self, trainable_only: bool = False) -> List[Tensor]:
        return [t for t in self.params.values() if t.requires_grad or not trainable_only]

    def trainable_parameters(self) -> List[Tensor]:
        params = self.base_parameters(trainable_only=True)
        for adapter in self.adapters.values():
            if adapter.trainable:
                params.extend(adapter.parameters())
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data for name, t in self.params.items()}


def build_model(config: ModelConfig) -> Model:
    """
    Build a seeded, deterministic model.

    Args:
        config: Model configuration; validated here.

    Returns:
        A model whose base groups are trainable only if listed in
        ``config.trainable_groups``.
    """
    config.validate()
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng(config.seed)
    vocab = config.vocabulary
    d = config.embed_dim
    arrays = {
        'tok_emb': rng.normal(0.0, INIT_STD, (vocab.total, d)).astype(dtype),
        'pos_emb': rng.normal(0.0, INIT_STD, (config.n_limit, d)).astype(dtype),
    }
    for i in range(config.num_layers):
        arrays.update(init_block_params(rng, f'blocks.{i}', d, config.mlp_ratio, dtype))
    arrays['ln_f.gamma'] = np.ones(d, dtype=dtype)
    arrays['ln_f.beta'] = np.zeros(d, dtype=dtype)
    arrays['head.weight'] = rng.normal(0.0, INIT_STD, (vocab.total, d)).astype(dtype)
    params = {name: Tensor(array, name=name) for name, array in arrays.items()}
    logger.info(f"Built model: vocab={vocab.total}, d={d}, layers={config.num_layers}, n_limit={config.n_limit}")
    return Model(config, params)


def forward(model: Model, tokens, adapters: Optional[Sequence] = None) -> Tensor:
    """
    Causal forward pass.

    Args:
        model: The model.
        tokens: ``(T,)`` or right-padded ``(B, T)`` token IDs.
        adapters: Adapters to apply; ``None`` applies every attached adapter.

    Returns:
        Logits of shape ``(T, total)`` or ``(B, T, total)``.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    length = ids.shape[1]
    if length == 0:
        raise ShapeError("forward: empty input")
    if length > model.n_limit:
        raise ShapeError(f"forward: input of {length} tokens exceeds n_limit={model.n_limit}")
    total = model.vocabulary.total
    if ids.min() < 0 or ids.max() >= total:
        raise ShapeError(f"forward: token IDs span [{ids.min()}, {ids.max()}], vocabulary has {total}")
    active = list(model.adapters.values()) if adapters is None else list(adapters)
    p = model.params

    x = nx.embedding(p['tok_emb'], ids) + nx.take(p['pos_emb'], np.arange(length), axis=0)
    x = run_blocks(p, x, model.config.num_layers, model.config.num_heads,
                   causal_mask(length, model.config.dtype), active, model.config.nonlinearity)
    x = nx.layer_norm(x, p['ln_f.gamma'], p['ln_f.beta'])
    logits = apply_linear(p, 'head', x, active)
    return nx.reshape(logits, (length, total)) if squeeze else logits


def emotion_logits(logits: Tensor, vocab: Vocabulary) -> Tensor:
    """Gather the E emotion-identifier entries from full-vocabulary logits."""
    return nx.take(logits, vocab.emotion_ids, axis=-1)


def constrained_emotion_logits(logits_at_position: Tensor, vocab: Vocabulary) -> Tensor:
    """Softmax over the emotion-identifier entries only."""
    return nx.softmax(emotion_logits(logits_at_position, vocab))


def predict_emotion_distribution(model: Model, tokens, adapters: Optional[Sequence] = None) -> np.ndarray:
    """Constrained E-way distribution at the last position of ``tokens``."""
    with nx.no_grad():
        logits = forward(model, tokens, adapters)
        return constrained_emotion_logits(nx.take(logits, len(tokens) - 1, axis=0), model.vocabulary).numpy()


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

def save_model(model: Model, path: Union[str, Path]) -> Path:
    """Save base weights and every attached adapter (names prefixed ``<adapter>/``)."""
    arrays = dict(model.state_dict())
    adapters = {}
    for name, adapter in model.adapters.items():
        adapters[name] = {'rank': adapter.rank, 'alpha': adapter.alpha}
        for key, array in adapter.state_dict().items():
            arrays[f'{name}/{key}'] = array
    config = {'kind': 'model', 'model': asdict(model.config), 'adapters': adapters}
    config['model']['trainable_groups'] = list(model.config.trainable_groups)
    return save_checkpoint(path, config, arrays)


def load_model(path: Union[str, Path]) -> Model:
    """Rebuild a model from a checkpoint, validating the manifest against its config."""
    from lora import LoraAdapter

    header, arrays = load_checkpoint(path)
    if header.get('kind') != 'model':
        raise DataError(f"{path}: not a model checkpoint (kind={header.get('kind')!r})")
    try:
        cfg = dict(header['model'])
        cfg['trainable_groups'] = tuple(cfg.get('trainable_groups', ()))
        config = ModelConfig(**cfg)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: model config in header is invalid: {e!r}") from None
    model = build_model(config)
    for name, tensor in model.params.items():
        if name not in arrays:
            raise DataError(f"{path}: manifest is missing {name}")
        if arrays[name].shape != tensor.shape:
            raise DataError(f"{path}: {name} has shape {arrays[name].shape}, config implies {tensor.shape}")
        tensor.data = arrays[name].astype(tensor.dtype)
    for adapter_name, meta in header.get('adapters', {}).items():
        prefix = f'{adapter_name}/'
        state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        adapter = LoraAdapter.from_state(adapter_name, meta['rank'], meta['alpha'], state, model)
        model.adapters[adapter_name] = adapter
    extra = [k for k in arrays if '/' not in k and k not in model.params]
    if extra:
        raise DataError(f"{path}: manifest has unexpected arrays {extra[:5]}")
    logger.info(f"Loaded model from {path} with adapters {list(model.adapters)}")
    return model

"""
Low-rank adapters: the persistent training adapter and the per-sample
temporary adapter that holds DPM's memory.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

import numerics as nx
from numerics import OptimizerState, Tensor
from checkpoint_io import load_checkpoint, save_checkpoint
from errors import DataError, LifecycleError
from model import Model

logger = logging.getLogger('SpeechDPM')

TRAINING_ADAPTER = 'train'
TEMP_ADAPTER = 'temp'
A_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    """Per-layer ``(A: r x in, B: out x r)`` pairs; the delta is ``(alpha / r) B A``."""
    name: str
    rank: int
    alpha: float
    layers: Dict[str, Tuple[Tensor, Tensor]] = field(default_factory=dict)
    trainable: bool = True

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def parameters(self) -> List[Tensor]:
        return [t for pair in self.layers.values() for t in pair]

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def set_trainable(self, trainable: bool) -> None:
        self.trainable = trainable
        for t in self.parameters():
            t.requires_grad = trainable

    def delta(self, layer: str) -> np.ndarray:
        a, b = self.layers[layer]
        return self.scaling * (b.data @ a.data)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {}
        for layer, (a, b) in self.layers.items():
            state[f'{layer}.lora_a'] = a.data
            state[f'{layer}.lora_b'] = b.data
        return state

    @classmethod
    def create(cls, name: str, model: Model, rank: int, alpha: float, seed: int,
               init_std: float = A_INIT_STD) -> 'LoraAdapter':
        """Gaussian ``A``, zero ``B`` on every linear layer of ``model``."""
        rng = np.random.default_rng(seed)
        dtype = np.dtype(model.config.dtype).type
        adapter = cls(name=name, rank=rank, alpha=alpha)
        for layer, in_dim, out_dim in model.linear_layers():
            a = Tensor(rng.normal(0.0, init_std, (rank, in_dim)).astype(dtype), requires_grad=True, name=f'{name}/{layer}.lora_a')
            b = Tensor(np.zeros((out_dim, rank), dtype=dtype), requires_grad=True, name=f'{name}/{layer}.lora_b')
            adapter.layers[layer] = (a, b)
        return adapter

    @classmethod
    def from_state(cls, name: str, rank: int, alpha: float, state: Dict[str, np.ndarray], model: Model) -> 'LoraAdapter':
        """Rebuild a frozen adapter from saved arrays, checking shapes against ``model``."""
        adapter = cls(name=name, rank=rank, alpha=alpha, trainable=False)
        dtype = np.dtype(model.config.dtype)
        for layer, in_dim, out_dim in model.linear_layers():
            try:
                a, b = state[f'{layer}.lora_a'], state[f'{layer}.lora_b']
            except KeyError:
                raise DataError(f"adapter {name!r}: missing arrays for layer {layer}") from None
            if a.shape != (rank, in_dim) or b.shape != (out_dim, rank):
                raise DataError(f"adapter {name!r}: layer {layer} has shapes {a.shape}/{b.shape}, "
                                f"expected {(rank, in_dim)}/{(out_dim, rank)}")
            adapter.layers[layer] = (Tensor(a.astype(dtype), name=f'{name}/{layer}.lora_a'),
                                     Tensor(b.astype(dtype), name=f'{name}/{layer}.lora_b'))
        return adapter


@dataclass
class TempLora:
    """A temporary adapter and the optimizer state that belongs to it alone."""
    adapter: LoraAdapter
    optimizer: OptimizerState


def expected_parameter_count(model: Model, rank: int) -> int:
    return sum(rank * (in_dim + out_dim) for _, in_dim, out_dim in model.linear_layers())


def attach_training_lora(model: Model, rank: int = 8, alpha: float = 8.0, name: str = TRAINING_ADAPTER,
                         seed: Optional[int] = None, init_std: float = A_INIT_STD) -> LoraAdapter:
    """
    Register a trainable adapter on all linear layers and freeze the base.

    Args:
        model: Built model.
        rank: LoRA rank r.
        alpha: LoRA alpha.
        name: Adapter name, unique per model.
        seed: Seed for ``A`` (defaults to the model seed + 1).

    Returns:
        The attached adapter.
    """
    if name in model.adapters:
        raise LifecycleError(f"adapter {name!r} is already attached")
    model.set_trainable_groups(model.config.trainable_groups)
    adapter = LoraAdapter.create(name, model, rank, alpha, model.config.seed + 1 if seed is None else seed, init_std)
    model.adapters[name] = adapter
    logger.info(f"Attached adapter {name!r}: rank={rank}, alpha={alpha}, params={adapter.num_parameters()}")
    return adapter


def freeze_model(model: Model) -> None:
    """Freeze base weights and every attached adapter."""
    model.freeze()
    for adapter in model.adapters.values():
        adapter.set_trainable(False)


def create_temp_lora(model: Model, rank: int = 8, alpha: float = 8.0, seed: int = 0,
                     optimizer: str = 'adam', learning_rate: float = 5e-5) -> TempLora:
    """
    Stack a fresh zero-delta adapter on a frozen model, with fresh optimizer state.

    The ``A`` init depends only on ``seed``, never on earlier samples.
    """
    if TEMP_ADAPTER in model.adapters:
        raise LifecycleError("a temporary adapter is still attached; discard it first")
    if model.base_parameters(trainable_only=True) or any(a.trainable for a in model.adapters.values()):
        raise LifecycleError("temporary adapters need a frozen base and frozen adapters")
    adapter = LoraAdapter.create(TEMP_ADAPTER, model, rank, alpha, seed)
    model.adapters[TEMP_ADAPTER] = adapter
    state = nx.create_optimizer(adapter.parameters(), kind=optimizer, learning_rate=learning_rate)
    logger.debug(f"Created temporary adapter ({adapter.num_parameters()} params)")
    return TempLora(adapter, state)


def discard_temp_lora(model: Model, temp: TempLora) -> None:
    """Detach the temporary adapter and drop its optimizer state."""
    attached = model.adapters.get(temp.adapter.name)
    if attached is not temp.adapter:
        raise LifecycleError(f"adapter {temp.adapter.name!r} is not attached to this model")
    del model.adapters[temp.adapter.name]
    temp.optimizer.moments.clear()
    logger.debug("Discarded temporary adapter")


def frozen_hash(model: Model) -> str:
    """SHA-256 over every frozen base tensor and every frozen adapter, name-ordered."""
    digest = hashlib.sha256()
    for name in sorted(model.params):
        tensor = model.params[name]
        if not tensor.requires_grad:
            digest.update(name.encode())
            digest.update(tensor.data.tobytes())
    for adapter_name in sorted(model.adapters):
        adapter = model.adapters[adapter_name]
        if adapter.trainable:
            continue
        for key, array in sorted(adapter.state_dict().items()):
            digest.update(f'{adapter_name}/{key}'.encode())
            digest.update(array.tobytes())
    return digest.hexdigest()


def parameter_report(model: Model) -> Dict[str, float]:
    """Total, trainable and ratio counts over base weights and attached adapters."""
    base = sum(t.data.size for t in model.params.values())
    adapters = sum(a.num_parameters() for a in model.adapters.values())
    trainable = sum(t.data.size for t in model.trainable_parameters())
    total = base + adapters
    return {'total_parameters': total, 'base_parameters': base, 'adapter_parameters': adapters,
            'trainable_parameters': trainable, 'trainable_ratio': 100.0 * trainable / total}


def save_adapter(adapter: LoraAdapter, path: Union[str, Path]) -> Path:
    arrays = {f'{adapter.name}/{k}': v for k, v in adapter.state_dict().items()}
    config = {'kind': 'adapter', 'name': adapter.name, 'rank': adapter.rank, 'alpha': adapter.alpha}
    return save_checkpoint(path, config, arrays)


def load_adapter(path: Union[str, Path], model: Model, attach: bool = True) -> LoraAdapter:
    header, arrays = load_checkpoint(path)
    if header.get('kind') != 'adapter':
        raise DataError(f"{path}: not an adapter checkpoint (kind={header.get('kind')!r})")
    name = header['name']
    prefix = f'{name}/'
    state = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    adapter = LoraAdapter.from_state(name, header['rank'], header['alpha'], state, model)
    if attach:
        if name in model.adapters:
            raise LifecycleError(f"adapter {name!r} is already attached")
        model.adapters[name] = adapter
    return adapter

"""Named trainable parameters with gradients, freeze flags and EMA shadows."""

from __future__ import annotations

import zlib
from typing import Dict, Iterable, List, Optional

import numpy as np

from .tensor import Tensor

COMPONENT_TAGS = (
    "encoder",
    "decoder",
    "gen_pooler",
    "con_pooler",
    "adaptor_extra",
    "loss",
    "task_head",
)


class Param:
    __slots__ = ("tensor", "frozen", "ema", "tag")

    def __init__(self, tensor: Tensor, tag: str, frozen: bool = False):
        self.tensor = tensor
        self.tag = tag
        self.frozen = frozen
        self.ema: Optional[np.ndarray] = None


class ParameterStore:
    """Insertion-ordered name -> parameter mapping shared by model and optimizer."""

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, name: str, data, tag: str) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if tag not in COMPONENT_TAGS:
            raise ValueError(f"unknown component tag: {tag}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._params[name] = Param(tensor, tag)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].tensor

    def param(self, name: str) -> Param:
        return self._params[name]

    def names(self) -> List[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tags(self) -> Dict[str, str]:
        return {name: p.tag for name, p in self._params.items()}

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.tensor.grad = None

    def gradient_map(self) -> Dict[str, np.ndarray]:
        """Gradients after a backward pass; untouched leaves map to zeros."""
        out = {}
        for name, p in self._params.items():
            g = p.tensor.grad
            out[name] = np.zeros_like(p.tensor.data) if g is None else g
        return out

    def set_frozen(self, trainable_tags: Iterable[str]) -> None:
        trainable = set(trainable_tags)
        for p in self._params.values():
            p.frozen = p.tag not in trainable

    def trainable_names(self) -> List[str]:
        return [name for name, p in self._params.items() if not p.frozen]

    def n_parameters(self) -> int:
        return sum(p.tensor.size for p in self._params.values())

    def checksums(self) -> Dict[str, int]:
        return {
            name: zlib.crc32(np.ascontiguousarray(p.tensor.data).tobytes())
            for name, p in self._params.items()
        }

    def component_checksums(self) -> Dict[str, int]:
        sums: Dict[str, int] = {tag: 0 for tag in COMPONENT_TAGS}
        for name, p in self._params.items():
            sums[p.tag] = zlib.crc32(
                np.ascontiguousarray(p.tensor.data).tobytes(), sums[p.tag]
            )
        return sums

    def init_ema(self) -> None:
        for p in self._params.values():
            p.ema = p.tensor.data.copy()

    def ema_update(self, decay: float) -> None:
        """shadow = decay * shadow + (1 - decay) * param; shadows get no gradients."""
        if not 0.0 < decay < 1.0:
            raise ValueError(f"EMA decay must be in (0, 1), got {decay}")
        for p in self._params.values():
            if p.ema is None:
                p.ema = np.zeros_like(p.tensor.data)
            p.ema *= decay
            p.ema += (1.0 - decay) * p.tensor.data

    def swap_in_ema(self) -> Dict[str, np.ndarray]:
        """Replace parameter values by their EMA shadows; returns the originals."""
        saved = {}
        for name, p in self._params.items():
            if p.ema is not None:
                saved[name] = p.tensor.data
                p.tensor.data = p.ema.astype(p.tensor.data.dtype)
        return saved

    def restore(self, saved: Dict[str, np.ndarray]) -> None:
        for name, data in saved.items():
            self._params[name].tensor.data = data

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.tensor.data for name, p in self._params.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in arrays:
                raise KeyError(f"missing parameter in state: {name}")
            if arrays[name].shape != p.tensor.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: "
                    f"{arrays[name].shape} vs {p.tensor.data.shape}"
                )
            p.tensor.data = np.ascontiguousarray(
                arrays[name].astype(p.tensor.data.dtype)
            )

"""
Named parameter storage for the interpreter model.

Every trainable tensor lives under a dotted name such as
``scripts.0.locs.0.attn.query.0.weight``. Layers keep direct references to
their tensors; the store is the flat view used by the optimizer, the freezing
regimes and the checkpoint writer.
"""

import logging
from collections.abc import Iterator, Mapping

import numpy as np

from neuralinterp.autodiff import Tensor

logger = logging.getLogger(__name__)


class ModelError(Exception):
    """Raised when the model is built or driven with inconsistent structure."""
    pass


class ParamStore(Mapping[str, Tensor]):
    """
    Ordered mapping from parameter name to trainable tensor, in registration order.
    """

    def __init__(self) -> None:
        self._tensors: dict[str, Tensor] = {}

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"Unknown parameter: {name}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def register(self, name: str, data: np.ndarray) -> Tensor:
        """
        Create and register a trainable tensor.

        Raises:
            ModelError: If the name is already taken
        """
        if name in self._tensors:
            raise ModelError(f"Parameter already registered: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def replace(self, name: str, data: np.ndarray) -> Tensor:
        """Swap in a fresh tensor under an existing name (shape may change)."""
        if name not in self._tensors:
            raise ModelError(f"Cannot replace unknown parameter: {name}")
        tensor = Tensor(data, requires_grad=True, name=name)
        self._tensors[name] = tensor
        return tensor

    def view(self, prefix: str) -> dict[str, Tensor]:
        """All parameters whose name starts with `prefix`."""
        return {name: t for name, t in self._tensors.items() if name.startswith(prefix)}

    def count(self, prefix: str = "") -> int:
        """Total number of scalar entries under `prefix`."""
        return sum(t.size for t in self.view(prefix).values())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter array, in registration order."""
        return {name: t.data.copy() for name, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        """
        Overwrite parameter values in place.

        Raises:
            ModelError: On missing/unexpected names or shape disagreement
        """
        missing = [name for name in self._tensors if name not in state]
        unexpected = [name for name in state if name not in self._tensors]
        if missing or unexpected:
            raise ModelError(
                f"Parameter set mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}"
            )
        for name, tensor in self._tensors.items():
            array = np.asarray(state[name], dtype=np.float64)
            if array.shape != tensor.shape:
                raise ModelError(
                    f"Shape mismatch for {name}: expected {list(tensor.shape)}, "
                    f"got {list(array.shape)}"
                )
            tensor.data = array.copy()


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-(1/fan_in)^(1/2)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def unit_vectors(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Points drawn uniformly on the unit hypersphere."""
    raw = rng.standard_normal((count, dim))
    return raw / np.linalg.norm(raw, axis=-1, keepdims=True)

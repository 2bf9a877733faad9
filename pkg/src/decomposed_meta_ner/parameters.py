"""Named parameter and gradient buffers.

Every trainable model in the toolkit (encoder, span detector, entity typer)
is a ParameterSet: an ordered collection of named float64 numpy buffers, some
of which may be frozen. Gradients travel in a GradientSet keyed by the same
names. Optimizers and the meta-learning engine only ever see these two types.
"""

import copy
import logging
from typing import Dict, Iterable, Iterator, Mapping, Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class GradientSet:
    """One gradient buffer per parameter buffer, same names and shapes."""

    def __init__(self, buffers: Mapping[str, np.ndarray]):
        self.buffers: Dict[str, np.ndarray] = {
            name: np.asarray(value, dtype=DTYPE) for name, value in buffers.items()
        }

    @classmethod
    def zeros_like(cls, params: "ParameterSet") -> "GradientSet":
        buffers = params.named_buffers()
        return cls({name: np.zeros_like(value) for name, value in buffers.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.buffers)

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        return self.buffers.items()

    def copy(self) -> "GradientSet":
        return GradientSet({name: value.copy() for name, value in self.buffers.items()})

    def prefixed(self, prefix: str) -> "GradientSet":
        """Same buffers with every name prefixed (for nesting into a parent set)."""
        return GradientSet(
            {f"{prefix}{name}": value for name, value in self.buffers.items()}
        )

    def add_(self, other: "GradientSet") -> "GradientSet":
        """Accumulate another gradient set in place."""
        self._check_congruent(other)
        for name, value in other.buffers.items():
            self.buffers[name] += value
        return self

    def __add__(self, other: "GradientSet") -> "GradientSet":
        return self.copy().add_(other)

    def scale_(self, factor: float) -> "GradientSet":
        for value in self.buffers.values():
            value *= factor
        return self

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(v * v)) for v in self.buffers.values())))

    def clip_by_global_norm_(self, max_norm: float) -> float:
        """Rescale so the global norm is at most max_norm; returns the old norm."""
        norm = self.global_norm()
        if max_norm > 0 and norm > max_norm:
            self.scale_(max_norm / (norm + 1e-12))
        return norm

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(v))) for v in self.buffers.values())

    def _check_congruent(self, other: "GradientSet") -> None:
        if set(other.buffers) != set(self.buffers):
            raise ValueError(
                f"gradient buffers differ: {sorted(self.buffers)} "
                f"vs {sorted(other.buffers)}"
            )
        for name, value in other.buffers.items():
            if value.shape != self.buffers[name].shape:
                raise ValueError(
                    f"gradient '{name}' has shape {value.shape}, "
                    f"expected {self.buffers[name].shape}"
                )


class ParameterSet:
    """Base class for named, cloneable float64 parameter collections.

    Subclasses implement named_buffers(), returning the live arrays (not
    copies) so that in-place updates reach the model.
    """

    def named_buffers(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def frozen_names(self) -> frozenset:
        """Names of buffers no optimizer may change."""
        return frozenset()

    def clone(self) -> "ParameterSet":
        """Independent deep copy."""
        return copy.deepcopy(self)

    def zero_gradients(self) -> GradientSet:
        return GradientSet.zeros_like(self)

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.named_buffers().values()))

    def axpy_update(self, grads: GradientSet, step_size: float) -> None:
        """params <- params - step_size * grads, skipping frozen buffers."""
        buffers = self.named_buffers()
        check_congruent(buffers, grads)
        frozen = self.frozen_names()
        for name, value in buffers.items():
            if name in frozen:
                continue
            value -= step_size * grads[name]

    def to_vector(self) -> np.ndarray:
        """All buffers flattened into one vector (name order)."""
        buffers = self.named_buffers()
        if not buffers:
            return np.zeros(0, dtype=DTYPE)
        return np.concatenate([value.ravel() for value in buffers.values()])

    def bitwise_equal(self, other: "ParameterSet") -> bool:
        """True when both sets hold identical bytes in identically named buffers."""
        mine, theirs = self.named_buffers(), other.named_buffers()
        if list(mine) != list(theirs):
            return False
        return all(
            mine[name].shape == theirs[name].shape
            and mine[name].tobytes() == theirs[name].tobytes()
            for name in mine
        )

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(v))) for v in self.named_buffers().values())


class FlatParameters(ParameterSet):
    """A free-standing ParameterSet over an explicit dict of buffers."""

    def __init__(
        self, buffers: Mapping[str, np.ndarray], frozen: Optional[Iterable[str]] = None
    ):
        self.buffers = {
            name: np.array(value, dtype=DTYPE) for name, value in buffers.items()
        }
        self.frozen = frozenset(frozen or ())

    def named_buffers(self) -> Dict[str, np.ndarray]:
        return self.buffers

    def frozen_names(self) -> frozenset:
        return self.frozen


def check_congruent(buffers: Mapping[str, np.ndarray], grads: GradientSet) -> None:
    """Raise ValueError unless grads matches buffers by name and shape."""
    if set(buffers) != set(grads.buffers):
        raise ValueError(
            f"gradient names {sorted(grads.buffers)} do not match "
            f"parameter names {sorted(buffers)}"
        )
    for name, value in buffers.items():
        if grads[name].shape != value.shape:
            raise ValueError(
                f"gradient '{name}' has shape {grads[name].shape}, "
                f"parameter has {value.shape}"
            )

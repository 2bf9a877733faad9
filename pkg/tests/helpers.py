"""Test helpers: sentence builder and finite-difference gradients."""

from typing import Callable, List, Sequence

import numpy as np

from decomposed_meta_ner.episodes import LabeledSequence, TypedSpan
from decomposed_meta_ner.parameters import ParameterSet


def sentence(tokens: str, *spans) -> LabeledSequence:
    """Build a sentence from a space-separated string and (start, end, type) spans."""
    return LabeledSequence(
        tuple(tokens.split()), tuple(TypedSpan(s, e, t) for s, e, t in spans)
    )


def numeric_gradient(
    loss: Callable[[], float],
    params: ParameterSet,
    name: str,
    eps: float = 1e-6,
    rows: Sequence[int] = (),
) -> np.ndarray:
    """Central finite differences of loss() over one buffer (optionally some rows)."""
    buffer = params.named_buffers()[name]
    grad = np.zeros_like(buffer)
    if rows:
        indices: List = [
            (row,) + rest for row in rows for rest in np.ndindex(buffer.shape[1:])
        ]
    else:
        indices = list(np.ndindex(buffer.shape))
    for index in indices:
        original = buffer[index]
        buffer[index] = original + eps
        plus = loss()
        buffer[index] = original - eps
        minus = loss()
        buffer[index] = original
        grad[index] = (plus - minus) / (2 * eps)
    return grad


def assert_gradients_close(
    analytic: np.ndarray, numeric: np.ndarray, tol: float = 1e-4
) -> None:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    error = np.abs(analytic - numeric).max() / scale
    assert error < tol, f"max relative error {error:.2e}"

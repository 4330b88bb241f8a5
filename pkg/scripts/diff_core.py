"""Differentiable array primitives, parameter store and gradient verification.

Arrays are ``torch.float64`` tensors; gradients come from torch autograd.
This module adds what the losses need on top of it: finiteness checks that
name the failing primitive, a named parameter store, a hinge with a fixed
subgradient convention, guarded L2 normalization, a pairwise distance that
is exactly zero (with zero gradient) on coincident points, and a central
finite-difference checker.
"""

import logging
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np
import torch

from errors import ConfigError, NormalizationError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
NORM_EPS = 1e-12
# Encoder rectifier kinks sit within 1e-3 of typical pre-activations, so checks
# through the encoder step at 1e-5; loss-only checks keep the 1e-3 default.
MODEL_GRADCHECK_STEP = 1e-5


def configure_determinism(threads: int = 1) -> None:
    """Pin torch to deterministic kernels and a fixed thread count."""
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(threads)


def as_array(data, name: str = "array") -> torch.Tensor:
    """Convert to a float64 tensor, rejecting NaN/Inf."""
    array = torch.as_tensor(data, dtype=DTYPE)
    return ensure_finite(name, array)


def ensure_finite(primitive: str, value: torch.Tensor) -> torch.Tensor:
    if not bool(torch.isfinite(value).all()):
        bad = int((~torch.isfinite(value)).sum())
        raise NumericalError(primitive, f"{bad} of {value.numel()} entries")
    return value


def check_shape(what: str, expected: Sequence[int], actual: Sequence[int]) -> None:
    if tuple(expected) != tuple(actual):
        raise ShapeError(what, expected, actual)


class ParamStore:
    """Ordered name -> parameter map; gradients live in each tensor's ``.grad``."""

    def __init__(self, named: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for name, tensor in named:
            self.add(name, tensor)

    @classmethod
    def from_module(cls, module: torch.nn.Module) -> "ParamStore":
        return cls(module.named_parameters())

    def add(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name '{name}'")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def numel(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def grad(self, name: str) -> torch.Tensor:
        """Gradient of ``name``; zeros when nothing has been accumulated."""
        param = self._params[name]
        if param.grad is None:
            return torch.zeros_like(param)
        return param.grad

    def zero_grad(self) -> None:
        for param in self._params.values():
            if param.grad is None:
                param.grad = torch.zeros_like(param)
            else:
                param.grad.zero_()

    def flat_grad(self) -> torch.Tensor:
        return torch.cat([self.grad(name).reshape(-1) for name in self._params])

    def locate(self, flat_index: int) -> tuple[str, int]:
        """Map a global coordinate to (parameter name, offset inside it)."""
        offset = flat_index
        for name, param in self._params.items():
            if offset < param.numel():
                return name, offset
            offset -= param.numel()
        raise IndexError(f"coordinate {flat_index} outside {self.numel()} parameters")


def forward_backward(loss_fn: Callable[[], torch.Tensor], params: ParamStore) -> float:
    """Evaluate ``loss_fn`` and accumulate d(loss)/d(param) into ``params``.

    Gradients add to whatever is already stored; reset with ``zero_grad``.
    """
    loss = loss_fn()
    if loss.dim() != 0:
        raise ShapeError("loss must be a scalar", (), loss.shape)
    ensure_finite("loss", loss)
    loss.backward()
    for name, param in params.items():
        if param.grad is not None:
            ensure_finite(f"grad[{name}]", param.grad)
    return float(loss.detach())


def finite_diff_check(
    loss_fn: Callable[[], torch.Tensor],
    params: ParamStore,
    step: float = 1e-3,
    sample_count: int = 100,
    rng_seed: int = 0,
) -> float:
    """Worst relative error between autograd and central differences.

    Coordinates are drawn without replacement from all parameters. Where the
    analytic derivative is below 1e-8 in magnitude the absolute error is used.
    """
    if step <= 0:
        raise ConfigError(f"finite-difference step must be positive, got {step}")
    total = params.numel()
    if not 0 < sample_count <= total:
        raise ConfigError(f"sample_count {sample_count} outside 1..{total}")

    params.zero_grad()
    forward_backward(loss_fn, params)
    analytic = params.flat_grad().clone()

    rng = np.random.default_rng(rng_seed)
    coords = np.sort(rng.choice(total, size=sample_count, replace=False))

    worst = 0.0
    with torch.no_grad():
        for coord in coords:
            name, offset = params.locate(int(coord))
            flat = params[name].view(-1)
            original = flat[offset].item()
            flat[offset] = original + step
            upper = float(loss_fn())
            flat[offset] = original - step
            lower = float(loss_fn())
            flat[offset] = original
            numeric = (upper - lower) / (2.0 * step)
            exact = analytic[int(coord)].item()
            error = abs(exact - numeric)
            if abs(exact) >= 1e-8:
                error /= abs(exact)
            if error > worst:
                logger.debug("gradcheck %s[%d]: analytic=%.6e numeric=%.6e", name, offset, exact, numeric)
            worst = max(worst, error)
    params.zero_grad()
    return worst


def kink_distance(x: torch.Tensor, kink: float = 0.0) -> float:
    """Smallest |x - kink| over the finite entries of ``x``; inf when there are none."""
    gaps = (x.detach() - kink).abs()
    gaps = gaps[torch.isfinite(gaps)]
    return float(gaps.min()) if gaps.numel() else float("inf")


def hinge(x: torch.Tensor) -> torch.Tensor:
    """[x]_+ ; the subgradient at exactly 0 is 0."""
    return torch.relu(x)


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return ensure_finite("softmax", torch.softmax(x, dim=dim))


def l2_normalize(x: torch.Tensor, eps: float = NORM_EPS) -> torch.Tensor:
    """Row-wise unit vectors; rows with norm below ``eps`` are an error."""
    norms = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    small = (norms.detach().reshape(-1) < eps).nonzero()
    if small.numel():
        index = int(small[0])
        raise NormalizationError(index, float(norms.reshape(-1)[index]), eps)
    return x / norms


def pairwise_euclidean(a: torch.Tensor, b: Optional[torch.Tensor] = None) -> torch.Tensor:
    """||a_i - b_j||_2 for every row pair.

    Coincident rows give exactly 0 with gradient 0, and the result for
    ``b is None`` is exactly symmetric.
    """
    if b is None:
        b = a
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("pairwise distance feature dims differ", a.shape, b.shape)
    diff = a.unsqueeze(1) - b.unsqueeze(0)
    squared = ensure_finite("pairwise_euclidean", (diff * diff).sum(dim=-1))
    positive = squared > 0
    safe = torch.where(positive, squared, torch.ones_like(squared))
    dist = torch.where(positive, torch.sqrt(safe), torch.zeros_like(squared))
    return dist

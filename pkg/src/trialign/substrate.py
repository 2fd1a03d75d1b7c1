"""Numerical substrate: deterministic RNG streams and gradient verification.

All differentiable computation in this project runs on torch tensors so
that analytic gradients come from autograd.  This module pins down the two
contracts everything else relies on:

* ``Rng``: reproducible, stream-separated random number generation, so that
  every stochastic decision (masking, shuffling, init) is a pure function
  of ``(seed, stream)``.
* ``grad_check``: central-difference verification of analytic gradients in
  float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch


def required_op_set() -> tuple[str, ...]:
    """Differentiable primitives the backend must provide.

    The backend is torch; each name maps to a torch op with an analytic
    gradient.  Kept as an explicit list so the test suite can exercise each
    one against finite differences.
    """
    return (
        "matmul",
        "add",
        "mul",
        "exp",
        "log",
        "softmax",
        "layer_norm",
        "embedding_lookup",
        "gather",
        "mean",
        "l2_normalize",
        "relu",
    )


class Rng:
    """Deterministic random stream keyed by (seed, stream).

    ``stream`` may be a single non-negative int or a tuple of them (e.g.
    ``(epoch, step, sample)``).  Identical keys give identical sequences on
    every platform (numpy PCG64 under a SeedSequence).
    """

    def __init__(self, seed: int, stream: int | Sequence[int] = 0):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        if isinstance(stream, int):
            stream = (stream,)
        stream = tuple(int(s) for s in stream)
        if any(s < 0 for s in stream):
            raise ValueError("stream ids must be non-negative")
        self.seed = int(seed)
        self.stream = stream
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self._gen.integers(0, 2**63 - 1)))
        return g


def set_single_thread_determinism() -> None:
    """Single-threaded CPU execution, for bit-exact reproducibility runs."""
    torch.set_num_threads(1)


def l2_normalize(x: torch.Tensor, dim: int = -1, eps: float = 0.0) -> torch.Tensor:
    norm = x.norm(dim=dim, keepdim=True)
    if eps:
        norm = norm.clamp_min(eps)
    return x / norm


def check_unit_rows(x: torch.Tensor, tol: float = 1e-4, name: str = "embeddings") -> None:
    norms = x.detach().norm(dim=-1)
    if not torch.all((norms - 1.0).abs() <= tol):
        worst = float((norms - 1.0).abs().max())
        raise ValueError(f"{name}: rows not unit-norm (max deviation {worst:.3g})")


def check_finite(x: torch.Tensor, name: str = "tensor") -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"{name} contains non-finite values")


def grad_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps a float64 tensor to a scalar.  Per coordinate k the relative
    error is ``|g_k - d_k| / max(1, |g_k|)`` where ``g`` is the analytic
    gradient and ``d`` the central difference.  Raises if ``fn`` returns a
    non-finite value at any probe point, naming the offending coordinate.
    """
    x = point.detach().to(torch.float64).requires_grad_(True)
    value = fn(x)
    if value.numel() != 1:
        raise ValueError("fn must return a scalar")
    if not torch.isfinite(value):
        raise FloatingPointError("fn returned a non-finite value at the base point")
    (analytic,) = torch.autograd.grad(value, x)
    analytic = analytic.detach().reshape(-1)

    flat = x.detach().reshape(-1).clone()
    max_rel = 0.0
    for k in range(flat.numel()):
        orig = flat[k].item()
        for sign, probe in ((+1, "plus"), (-1, "minus")):
            flat[k] = orig + sign * h
            val = fn(flat.reshape(point.shape))
            if not torch.isfinite(val):
                raise FloatingPointError(
                    f"fn non-finite at coordinate {k} ({probe} step)"
                )
            if sign > 0:
                f_plus = val.item()
            else:
                f_minus = val.item()
        flat[k] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        g = analytic[k].item()
        rel = abs(g - numeric) / max(1.0, abs(g))
        max_rel = max(max_rel, rel)
    return max_rel

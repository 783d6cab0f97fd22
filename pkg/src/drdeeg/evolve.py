"""Particle evolution of training segments toward harder samples.

Each segment ``x0`` is copied to a particle ``x'`` that follows a discretized
Langevin (``"ld"``) or underdamped/Hamiltonian (``"hmc"``) flow under the
potential

    U(x') = -L(theta, x', y) - beta * g0 . grad_theta L(theta, x', y) + gamma * D(x', x0)

where ``g0 = grad_theta L(theta, x0, y)`` is fixed for the whole evolution.
Its input gradient is

    grad U = -grad_x L(theta, x', y) - beta * mixed_hvp + distance_grad

Two distance modes are supported.  ``"wb"`` is the quadratic transport
penalty ``gamma * |x' - x0|^2`` with Brownian noise sqrt(2 alpha).  ``"kl"``
treats the reference density as an isotropic Gaussian N(x0, sigma2) and lets
the injected noise, of scale sqrt(2 alpha gamma), carry the entropy part of
the KL term.

Everything here works on batches: ``x0`` has a leading batch axis and the
objective is any callable ``objective(theta, x, y, wrt)`` returning
``(losses, grad_theta, grad_x)`` for the summed loss (see
:class:`drdeeg.decoder.DecoderObjective`).  Noise for row ``i`` of a batch is
drawn from its own generator so results do not depend on how examples are
grouped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .decoder import NonFiniteError
from .seeding import stream

DYNAMICS = ("ld", "hmc")
DISTANCES = ("kl", "wb")


class EvolutionError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        self.step = step
        super().__init__(f"evolution step {step}: {detail}")


@dataclass(frozen=True)
class EvolutionConfig:
    alpha: float = 0.05
    beta: float = 0.003
    gamma: float = 0.3
    tau: float = 0.1
    steps: int = 5
    dynamics: str = "ld"
    distance: str = "kl"
    kl_sigma2: float = 1.0
    fd_delta: float = 1e-4
    noise: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps must be an integer >= 1, got {self.steps}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.dynamics not in DYNAMICS:
            raise ValueError(f"dynamics must be one of {DYNAMICS}, got {self.dynamics!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.dynamics == "hmc" and not 0 <= self.tau <= 1:
            raise ValueError(f"tau must lie in [0, 1] for hmc, got {self.tau}")
        if not self.kl_sigma2 > 0:
            raise ValueError(f"kl_sigma2 must be > 0, got {self.kl_sigma2}")
        if not self.fd_delta > 0:
            raise ValueError(f"fd_delta must be > 0, got {self.fd_delta}")

    @property
    def noise_scale(self) -> float:
        """Standard deviation of the Langevin noise added per step."""
        if not self.noise:
            return 0.0
        if self.distance == "wb":
            return float(np.sqrt(2.0 * self.alpha))
        return float(np.sqrt(2.0 * self.alpha * self.gamma))


@dataclass(eq=False)
class EvolvedSample:
    x_prime: np.ndarray
    v: np.ndarray | None
    trace: np.ndarray  # loss after each step; (steps,) or (steps, B)


def _normal(rng, shape) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ValueError(f"need one generator per batch row: {len(rngs)} vs {shape[0]}")
    return np.stack([r.standard_normal(shape[1:]) for r in rngs])


def distance_grad(cfg: EvolutionConfig, x_prime, x0) -> np.ndarray:
    d = np.asarray(x_prime, dtype=np.float64) - x0
    if cfg.gamma == 0:
        return np.zeros_like(d)
    if cfg.distance == "wb":
        return 2.0 * cfg.gamma * d
    return (cfg.gamma / cfg.kl_sigma2) * d


def mixed_hvp(objective, theta, x_prime, y, g_x, fd_delta: float) -> np.ndarray:
    """Input gradient of ``g_x . grad_theta L(theta, x', y)``, row by row.

    Central difference of input gradients along each row's unit direction
    ``g_x[i] / |g_x[i]|`` with step ``fd_delta * (1 + |theta|)``.  Rows with a
    zero ``g_x`` get zeros.
    """
    x_prime = np.asarray(x_prime, dtype=np.float64)
    g_x = np.asarray(g_x, dtype=np.float64)
    y = np.asarray(y)
    out = np.zeros_like(x_prime)
    norms = np.linalg.norm(g_x, axis=1)
    live = norms > 0
    if not live.any():
        return out
    eps = fd_delta * (1.0 + np.linalg.norm(theta))
    direction = g_x[live] / norms[live, None]
    thetas = np.concatenate([theta + eps * direction, theta - eps * direction])
    xs = np.concatenate([x_prime[live], x_prime[live]])
    ys = np.concatenate([y[live], y[live]])
    _, _, gx = objective(thetas, xs, ys, wrt="x")
    n = int(live.sum())
    diff = (gx[:n] - gx[n:]) / (2.0 * eps)
    out[live] = norms[live].reshape((-1,) + (1,) * (x_prime.ndim - 1)) * diff
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("mixed_hvp produced non-finite values")
    return out


def _potential(objective, theta, x0, x, y, g_x, cfg: EvolutionConfig):
    losses, _, g_loss = objective(theta, x, y, wrt="x")
    grad = distance_grad(cfg, x, x0) - g_loss
    if cfg.beta > 0 and g_x is not None:
        grad -= cfg.beta * mixed_hvp(objective, theta, x, y, g_x, cfg.fd_delta)
    return losses, grad


def potential_grad(objective, theta, x0, x_prime, y, g_x, cfg: EvolutionConfig) -> np.ndarray:
    """Input gradient of the evolution potential at ``x_prime`` (batched)."""
    _, grad = _potential(objective, theta, x0, x_prime, y, g_x, cfg)
    if not np.all(np.isfinite(grad)):
        raise EvolutionError(0, "non-finite potential gradient")
    return grad


def langevin_step(x, grad_u, cfg: EvolutionConfig, rng=None) -> np.ndarray:
    x_next = x - cfg.alpha * grad_u
    scale = cfg.noise_scale
    if scale > 0:
        x_next = x_next + scale * _normal(rng, np.shape(x))
    return x_next


def hmc_step(x, v, grad_u, cfg: EvolutionConfig, rng=None):
    """One step of the discretized underdamped flow; both updates use index-t values."""
    x_next = x + v
    v_next = v - cfg.alpha * grad_u - cfg.tau * v
    if cfg.noise and cfg.tau > 0 and cfg.alpha > 0:
        v_next = v_next + np.sqrt(2.0 * cfg.tau * cfg.alpha) * _normal(rng, np.shape(v))
    return x_next, v_next


def evolve_batch(objective, theta, x0, y, cfg: EvolutionConfig,
                 rngs: Sequence[np.random.Generator] | None = None) -> EvolvedSample:
    """Evolve every row of ``x0`` for ``cfg.steps`` steps.

    ``rngs`` supplies one generator per row; by default row ``i`` uses the
    stream ``(cfg.seed, "evolve", i)``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.asarray(y)
    theta = np.asarray(theta, dtype=np.float64)
    if rngs is None:
        rngs = [stream(cfg.seed, "evolve", i) for i in range(len(x0))]

    g_x = None
    if cfg.beta > 0:
        per_example = np.broadcast_to(theta, (len(x0),) + theta.shape).copy()
        _, g_x, _ = objective(per_example, x0, y, wrt="theta")

    x = x0.copy()
    v = np.zeros_like(x0) if cfg.dynamics == "hmc" else None
    trace = []
    for t in range(cfg.steps):
        try:
            losses, grad_u = _potential(objective, theta, x0, x, y, g_x, cfg)
        except (NonFiniteError, FloatingPointError) as err:
            raise EvolutionError(t, str(err)) from err
        if not np.all(np.isfinite(grad_u)):
            raise EvolutionError(t, "non-finite potential gradient")
        if t > 0:
            trace.append(losses)
        if cfg.dynamics == "ld":
            x = langevin_step(x, grad_u, cfg, rngs)
        else:
            x, v = hmc_step(x, v, grad_u, cfg, rngs)
        if not np.all(np.isfinite(x)):
            raise EvolutionError(t, "particle left the finite range")
    try:
        final, _, _ = objective(theta, x, y, wrt="none")
    except NonFiniteError as err:
        raise EvolutionError(cfg.steps - 1, str(err)) from err
    trace.append(final)
    return EvolvedSample(x, v, np.stack(trace))


def evolve(objective, theta, x, y, cfg: EvolutionConfig, rng=None) -> EvolvedSample:
    """Evolve a single segment; the result has no batch axis."""
    rng = stream(cfg.seed, "evolve", 0) if rng is None else rng
    out = evolve_batch(objective, theta, np.asarray(x)[None], np.asarray(y).reshape(1), cfg, [rng])
    return EvolvedSample(out.x_prime[0], None if out.v is None else out.v[0], out.trace[:, 0])

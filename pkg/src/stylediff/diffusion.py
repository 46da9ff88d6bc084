"""Mean-reverting score-based diffusion around a data-driven prior mean.

Forward SDE:  dY = -1/2 beta(t) (Y - mu) dt + sqrt(beta(t)) dW,  t in [0, T].

Operations accept numpy arrays or torch tensors for the state; times are
python floats except in :func:`diffusion_loss`, which draws one ``t`` per
example.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

T_MIN = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0

    def __post_init__(self):
        if not (0 < self.beta0 < self.beta1) or self.T <= 0:
            raise ValueError("need 0 < beta0 < beta1 and T > 0")

    def beta(self, t):
        return self.beta0 + (self.beta1 - self.beta0) * t / self.T

    def integral(self, t):
        """``B(t) = int_0^t beta`` without range checks; works on arrays/tensors."""
        return self.beta0 * t + (self.beta1 - self.beta0) * t * t / (2 * self.T)

    def integral_between(self, s, t):
        return self.integral(t) - self.integral(s)


def beta_integral(schedule: NoiseSchedule, t: float) -> float:
    if not (0.0 <= t <= schedule.T):
        raise ValueError(f"t={t} outside [0, {schedule.T}]")
    return schedule.integral(t)


@dataclass
class KernelParams:
    gamma: object
    sigma2: float


def transition_kernel(schedule: NoiseSchedule, mu, y0, t: float) -> KernelParams:
    """Gaussian ``p_0t(Y_t | Y_0) = N(gamma_t, sigma2_t I)``."""
    if np.shape(mu) != np.shape(y0):
        raise ValueError(f"shape mismatch {np.shape(mu)} vs {np.shape(y0)}")
    B = beta_integral(schedule, t)
    decay = math.exp(-0.5 * B)
    return KernelParams((1.0 - decay) * mu + decay * y0, 1.0 - math.exp(-B))


def sample_forward(kernel: KernelParams, eps):
    """``Y_t = gamma + sqrt(sigma2) * eps``; the exact conditional score there is ``-eps / sqrt(sigma2)``."""
    if kernel.sigma2 == 0:
        return kernel.gamma
    return kernel.gamma + math.sqrt(kernel.sigma2) * eps


def analytic_gaussian_score(y, t, mu, a, v, schedule: NoiseSchedule):
    """Score of ``p_t`` when ``p_0 = N(a, v)`` (elementwise, independent coordinates)."""
    B = schedule.integral(t)
    mean_t = (1.0 - math.exp(-0.5 * B)) * mu + math.exp(-0.5 * B) * a
    var_t = math.exp(-B) * v + 1.0 - math.exp(-B)
    return -(y - mean_t) / var_t


# ---------------------------------------------------------------------------
# reverse-time solvers
# ---------------------------------------------------------------------------


def reverse_step_em(y, t, h, mu, score, schedule: NoiseSchedule, z=None):
    """Euler-Maruyama step of the reverse-time SDE from ``t`` to ``t - h``.

    ``z=None`` gives the drift-only update.
    """
    if not (0 < h <= t + 1e-12):
        raise ValueError(f"need 0 < h <= t (h={h}, t={t})")
    beta_t = schedule.beta(t)
    out = y + h * (0.5 * beta_t * (y - mu) + beta_t * score)
    if z is not None:
        out = out + math.sqrt(beta_t * h) * z
    return out


def _decay(schedule, s, t, p=1.0):
    # exp(-p/2 * int_s^t beta)
    return math.exp(-0.5 * p * schedule.integral_between(s, t))


def ml_coefficients(schedule: NoiseSchedule, t, h):
    """``(kappa, omega, sigma, nu)`` of the maximum-likelihood reverse step from ``t`` to ``s = t - h``.

    The step is ``Y_s = Y_t + (Y_t - mu)(beta h / 2 + omega) + score (1 + kappa) beta h + sigma* z``
    with ``sigma*^2 = sigma^2 + nu^2 * E Var(Y_0 | Y_t)``. With ``kappa = omega = 0`` and
    ``sigma* = sqrt(beta h)`` it reduces to Euler-Maruyama.
    """
    s = t - h
    beta_t = schedule.beta(t)
    g0s, g0t = _decay(schedule, 0, s), _decay(schedule, 0, t)
    g0s2, g0t2, gst2 = _decay(schedule, 0, s, 2.0), _decay(schedule, 0, t, 2.0), _decay(schedule, s, t, 2.0)
    kappa = g0s * (1.0 - gst2) / (g0t * beta_t * h) - 1.0
    mu_st = _decay(schedule, s, t) * (1.0 - g0s2) / (1.0 - g0t2)
    nu_st = g0s * (1.0 - gst2) / (1.0 - g0t2)
    omega = nu_st / g0t + mu_st - (0.5 * beta_t * h + 1.0)
    sigma = math.sqrt((1.0 - g0s2) * (1.0 - gst2) / (1.0 - g0t2))
    return kappa, omega, sigma, nu_st


def posterior_variance(schedule: NoiseSchedule, t, mean_divergence):
    """Average ``Var(Y_0 | Y_t)`` per element from the mean diagonal of the score Jacobian.

    Second-order Tweedie: ``Cov = (1 - a^2)/a^2 (I + (1 - a^2) J)`` with
    ``a^2 = exp(-B(t))``. Clamped at zero.
    """
    a2 = math.exp(-schedule.integral(t))
    var = (1.0 - a2) / a2 * (1.0 + (1.0 - a2) * mean_divergence)
    if isinstance(var, torch.Tensor):
        return var.clamp(min=0.0)
    return np.maximum(var, 0.0)


def reverse_step_ml(y, t, h, mu, score, schedule: NoiseSchedule, z=None, post_var=0.0):
    """Maximum-likelihood reverse step; ``post_var`` is ``E Var(Y_0 | Y_t)`` per element
    (zero drops the correction, as is common in practice)."""
    if not (0 < h <= t + 1e-12):
        raise ValueError(f"need 0 < h <= t (h={h}, t={t})")
    beta_t = schedule.beta(t)
    kappa, omega, sigma, nu = ml_coefficients(schedule, t, h)
    out = y + (y - mu) * (0.5 * beta_t * h + omega) + score * (1.0 + kappa) * beta_t * h
    if z is not None:
        out = out + (sigma**2 + nu**2 * post_var) ** 0.5 * z
    return out


def _mean_divergence(score_fn, y, t, mu, s, mask, score, gen, delta=1e-3):
    """Hutchinson estimate (one Rademacher probe) of the mean Jacobian diagonal, per example."""
    m = torch.ones(y.shape[:2], dtype=y.dtype) if mask is None else mask.to(y.dtype)
    m = m.unsqueeze(-1)
    probe = (torch.randint(0, 2, y.shape, generator=gen) * 2 - 1).to(y.dtype) * m
    bumped = score_fn(y + delta * probe, t, mu, s, mask)
    dims = tuple(range(1, y.dim()))
    div = ((bumped - score) * probe).sum(dims) / delta / m.expand_as(y).sum(dims).clamp(min=1.0)
    return div.view(-1, *([1] * (y.dim() - 1)))


SOLVERS = {"em": reverse_step_em, "ml": reverse_step_ml}


def time_grid(schedule: NoiseSchedule, n_steps: int, t_min: float = T_MIN):
    """Uniform grid ``T = t_0 > ... > t_n = t_min``; returns ``(times, h)``."""
    h = (schedule.T - t_min) / n_steps
    return [schedule.T - i * h for i in range(n_steps)], h


def reverse_sample(mu, s, score_fn, schedule: NoiseSchedule = NoiseSchedule(), n_steps=100, solver="ml",
                   temperature=1.0, seed=0, mask=None, stochastic=True, trace_every=0, t_min=T_MIN,
                   ml_variance=True):
    """Integrate the reverse SDE from ``Y_T ~ N(mu, I / temperature)`` down to ``t_min``.

    ``score_fn(y, t, mu, s, mask)`` returns the score estimate (a
    :class:`~stylediff.unet.ScoreNet` instance works). ``mu`` is ``(B, m, n_mels)``.
    With ``solver="ml"`` and ``ml_variance`` the posterior-variance term of the
    step noise is estimated with one extra score evaluation per step.
    Returns ``y`` (and the list of snapshots when ``trace_every > 0``).
    """
    if solver not in SOLVERS:
        raise ValueError(f"unknown solver {solver!r}; choose from {sorted(SOLVERS)}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    step = SOLVERS[solver]
    gen = torch.Generator().manual_seed(int(seed))
    mu = torch.as_tensor(mu)
    m = torch.ones(mu.shape[:2], dtype=mu.dtype) if mask is None else mask.to(mu.dtype)
    m = m.unsqueeze(-1)
    y = (mu + torch.randn(mu.shape, generator=gen, dtype=mu.dtype) / math.sqrt(temperature)) * m
    times, h = time_grid(schedule, n_steps, t_min)
    trace = []
    with torch.no_grad():
        for i, t in enumerate(times):
            score = score_fn(y, t, mu, s, mask)
            z = torch.randn(mu.shape, generator=gen, dtype=mu.dtype) if stochastic else None
            if solver == "ml" and ml_variance and stochastic:
                div = _mean_divergence(score_fn, y, t, mu, s, mask, score, gen)
                y = step(y, t, h, mu, score, schedule, z, posterior_variance(schedule, t, div)) * m
            else:
                y = step(y, t, h, mu, score, schedule, z) * m
            if trace_every and (i + 1) % trace_every == 0:
                trace.append(y.clone())
    if trace_every:
        return y, trace
    return y


# ---------------------------------------------------------------------------
# training loss
# ---------------------------------------------------------------------------


def kernel_coefficients(schedule: NoiseSchedule, t):
    """Per-example ``(decay, sigma2)`` for a tensor of times ``t``: ``gamma = (1-decay) mu + decay y0``."""
    B = schedule.integral(t)
    return torch.exp(-0.5 * B), 1.0 - torch.exp(-B)


def diffusion_loss(score_fn, y0, mu, s, t, eps, mask=None, schedule: NoiseSchedule = NoiseSchedule(),
                   weighting="sigma2", t_min=T_MIN):
    """Per-example denoising score-matching loss.

    ``weighting="sigma2"`` gives ``mean(sigma2 (score + eps / sigma)^2)``, i.e. ``mean((score * sigma + eps)^2)``;
    ``"none"`` gives the unweighted ``mean((score + eps / sigma)^2)``.
    Returns ``(B,)``.
    """
    t = torch.as_tensor(t, dtype=y0.dtype)
    if t.dim() == 0:
        t = t.expand(y0.shape[0])
    if torch.any(t < t_min) or torch.any(t > schedule.T):
        raise ValueError(f"t must lie in [{t_min}, {schedule.T}]")
    if mask is None:
        mask = torch.ones(y0.shape[:2], dtype=torch.bool)
    m = mask.unsqueeze(-1).to(y0.dtype)
    decay, sigma2 = kernel_coefficients(schedule, t)
    decay, sigma2 = decay[:, None, None], sigma2[:, None, None]
    sigma = torch.sqrt(sigma2)
    y_t = ((1.0 - decay) * mu + decay * y0 + sigma * eps) * m
    score = score_fn(y_t, t, mu, s, mask)
    if weighting not in ("sigma2", "none"):
        raise ValueError(f"unknown weighting {weighting!r}")
    # written around the residual to the exact target so that it vanishes exactly there
    err = (score + eps / sigma) ** 2
    if weighting == "sigma2":
        err = err * sigma2
    return (err * m).sum((1, 2)) / (m.sum((1, 2)) * y0.shape[-1])

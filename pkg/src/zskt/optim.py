"""Parameter update rules and learning-rate schedules.

Two optimizers (Adam with bias correction, SGD with momentum and weight
decay) operating in place on lists of parameter Tensors, plus the two
schedules used by the transfer runs and the baselines: cosine annealing to
zero and a step schedule divided by 5 at 30/60/80% of the run.
"""

import numpy as np

from .errors import ConfigError, NaNLossError, ShapeMismatch


class OptState:
    """Moment/velocity buffers and the step counter for one optimizer.

    Buffers are allocated to match the parameter shapes at construction and
    stay aligned with the parameter list positionally.
    """

    def __init__(self, kind, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 momentum=0.9, weight_decay=0.0):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"optimizer kind must be adam or sgd, got '{kind}'")
        self.kind = kind
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params] if kind == "adam" else None


def adam_state(params, beta1=0.9, beta2=0.999, eps=1e-8):
    return OptState("adam", params, beta1=beta1, beta2=beta2, eps=eps)


def sgd_momentum_state(params, momentum=0.9, weight_decay=5e-4):
    return OptState("sgd", params, momentum=momentum, weight_decay=weight_decay)


def _check_pair(op, params, grads, state):
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch(f"{op}: got {len(params)} params, {len(grads)} grads, "
                            f"state for {len(state.m)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{op}: grad {i} shape {g.shape} != param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NaNLossError(f"{op}: non-finite gradient at parameter index {i}")


def adam_step(params, grads, state, eta_t):
    """One Adam update at learning rate eta_t; mutates params and state."""
    if state.kind != "adam":
        raise ConfigError(f"adam_step: state is for '{state.kind}'")
    _check_pair("adam_step", params, grads, state)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - eta_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def sgd_momentum_step(params, grads, state, eta_t):
    """One SGD step: v <- mu*v + g + wd*p, then p <- p - eta_t*v."""
    if state.kind != "sgd":
        raise ConfigError(f"sgd_momentum_step: state is for '{state.kind}'")
    _check_pair("sgd_momentum_step", params, grads, state)
    state.t += 1
    for p, g, v in zip(params, grads, state.m):
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.data
        p.data = p.data - eta_t * v
    return params, state


def cosine_lr(t, n_total, eta0):
    """eta0 * (1 + cos(pi * t / n_total)) / 2, decaying to 0 at t = n_total."""
    if not 0 <= t <= n_total:
        raise ConfigError(f"cosine_lr: t must lie in [0, {n_total}], got {t}")
    return eta0 * 0.5 * (1.0 + np.cos(np.pi * t / n_total))


def step_lr(t, n_total, eta0):
    """Piecewise-constant schedule divided by 5 at 30%, 60% and 80% of the run."""
    if not 0 <= t <= n_total:
        raise ConfigError(f"step_lr: t must lie in [0, {n_total}], got {t}")
    frac = t / n_total
    if frac < 0.3:
        return eta0
    if frac < 0.6:
        return eta0 / 5.0
    if frac < 0.8:
        return eta0 / 25.0
    return eta0 / 125.0

"""Augmented-Lagrangian critic training (Sobolev and Fisher GANs) and a WGAN-GP baseline.

The critic ascends

    L(p, lam) = E_hat + lam (1 - Omega_hat) - rho / 2 (Omega_hat - 1)^2

with Adam while the multiplier takes the plain step ``lam <- lam - rho (1 - Omega_hat)``.
WGAN-GP ascends ``E_hat - lambda_gp mean (1 - ||grad f(x_tilde)||)^2`` instead.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.functional import gradient_norm_sq, input_gradient
from .autodiff.nets import MlpCritic, MlpGenerator, Module
from .autodiff.tensor import Tensor, grad, no_grad
from .densities import Density, mu_gp_sample, mu_smoothed

__all__ = [
    "CONSTRAINT_KINDS",
    "MU_RULES",
    "Adam",
    "adam_update",
    "ALMState",
    "DivergenceError",
    "GanConfig",
    "constraint_points",
    "estimate_objective",
    "estimate_constraint",
    "wgan_gp_penalty",
    "critic_loss",
    "alm_critic_step",
    "generator_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CONSTRAINT_KINDS = ("sobolev", "fisher", "wgan_gp")
MU_RULES = ("average", "gp", "smoothed")
DIVERGENCE_LIMIT = 1e6
LAMBDA_GP = 10.0
_GP_EPS = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, message: str, state: dict | None = None, history: dict | None = None):
        super().__init__(message)
        self.state = state or {}
        self.history = history


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_update(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], moments: dict,
                lr: float, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> list[np.ndarray]:
    """One bias-corrected Adam descent step; `moments` holds ``m``, ``v`` and ``t`` and is updated."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if "m" not in moments:
        moments["m"] = [np.zeros_like(p) for p in params]
        moments["v"] = [np.zeros_like(p) for p in params]
        moments["t"] = 0
    moments["t"] += 1
    t = moments["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValueError(f"gradient shape {g.shape} does not match parameter {np.shape(p)}")
        m = moments["m"][i] = beta1 * moments["m"][i] + (1 - beta1) * g
        v = moments["v"][i] = beta2 * moments["v"][i] + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


@dataclass
class Adam:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def descend(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        new = adam_update([p.data for p in params], grads, self.moments, self.lr,
                          self.beta1, self.beta2, self.eps)
        for p, v in zip(params, new):
            p.data = v

    def ascend(self, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> None:
        self.descend(params, [-np.asarray(g) for g in grads])


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def estimate_objective(critic, real, fake) -> Tensor:
    """``mean f(real) - mean f(fake)``."""
    real, fake = _as_input(real), _as_input(fake)
    if real.shape[0] != fake.shape[0]:
        raise ValueError("real and fake batches must have equal size")
    return critic(real).mean() - critic(fake).mean()


def _as_input(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constraint_points(rule: str, real, fake, rng: np.random.Generator | None = None,
                      sigma: float = 0.0, u=None) -> np.ndarray:
    """Points where the constraint is estimated under the dominant-measure rule.

    ``average`` stacks both batches, ``gp`` draws interpolates, ``smoothed``
    stacks a noise-smoothed real batch with the fake batch.
    """
    real, fake = _arr(real), _arr(fake)
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have equal shape")
    if rule == "average":
        return np.concatenate([real, fake], axis=0)
    if rule == "gp":
        return mu_gp_sample(real, fake, rng, u=u)
    if rule == "smoothed":
        if rng is None:
            raise ValueError("smoothed rule needs an rng")
        return np.concatenate([mu_smoothed(real, sigma, rng), fake], axis=0)
    raise ValueError(f"unknown mu rule {rule!r}")


def estimate_constraint(kind: str, critic, points) -> Tensor:
    """Empirical constraint at fixed points: ``mean ||grad f||^2`` or ``mean f^2``."""
    points = _arr(points)
    if len(points) == 0:
        raise ValueError("constraint batch must be non-empty")
    if kind == "sobolev":
        return gradient_norm_sq(critic, points, create_graph=True).mean()
    if kind == "fisher":
        return T.square(critic(Tensor(points))).mean()
    raise ValueError(f"no constraint estimator for kind {kind!r}")


def wgan_gp_penalty(critic, points, create_graph: bool = True) -> Tensor:
    """``mean (1 - ||grad f(x)||)^2`` (two-sided)."""
    gx = input_gradient(critic, _arr(points), create_graph=create_graph)
    axes = tuple(range(1, gx.ndim))
    norms = T.sqrt(T.square(gx).sum(axis=axes) + _GP_EPS)
    return T.square(1.0 - norms).mean()


def critic_loss(kind: str, critic, real, fake, points, lam: float, rho: float,
                lambda_gp: float = LAMBDA_GP) -> tuple[Tensor, dict]:
    """Objective the critic ascends, plus the scalars it was built from."""
    e_hat = estimate_objective(critic, real, fake)
    if kind == "wgan_gp":
        pen = wgan_gp_penalty(critic, points)
        loss = e_hat - lambda_gp * pen
        return loss, {"E": float(e_hat.data), "Omega": float(pen.data)}
    omega = estimate_constraint(kind, critic, points)
    loss = e_hat + lam * (1.0 - omega) - 0.5 * rho * T.square(omega - 1.0)
    return loss, {"E": float(e_hat.data), "Omega": float(omega.data)}


# ---------------------------------------------------------------------------
# training state and steps
# ---------------------------------------------------------------------------


@dataclass
class ALMState:
    critic: Module
    generator: Module | None
    kind: str = "sobolev"
    rule: str = "average"
    lam: float = 0.0
    rho: float = 1e-5
    lr: float = 1e-4
    n_critic: int = 5
    batch: int = 256
    lambda_gp: float = LAMBDA_GP
    critic_opt: Adam | None = None
    gen_opt: Adam | None = None
    sigma: float = 0.0
    step: int = 0

    def __post_init__(self):
        if self.kind not in CONSTRAINT_KINDS:
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.rule not in MU_RULES:
            raise ValueError(f"unknown mu rule {self.rule!r}")
        if not self.rho > 0 or not self.lr > 0:
            raise ValueError("rho and lr must be positive")
        if self.n_critic < 1 or self.batch < 2:
            raise ValueError("need n_critic >= 1 and batch >= 2")
        if self.kind in ("sobolev", "wgan_gp") and not self.critic.is_smooth:
            raise ValueError("gradient constraints need a C^2 critic activation (tanh or softplus)")
        if self.critic_opt is None:
            self.critic_opt = Adam(self.lr)
        if self.gen_opt is None:
            self.gen_opt = Adam(self.lr)

    def dump(self) -> dict:
        return {
            "step": self.step,
            "lam": self.lam,
            "rho": self.rho,
            "kind": self.kind,
            "rule": self.rule,
            "critic_param_norms": [float(np.linalg.norm(p.data)) for p in self.critic.parameters()],
        }


def _check_grads(grads, state: ALMState, what: str) -> None:
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite {what} gradient at step {state.step}: {state.dump()}")


def alm_critic_step(state: ALMState, real, fake, rng: np.random.Generator | None = None,
                    points=None) -> dict:
    """One Adam ascent step on the critic and one multiplier step; mutates `state`.

    `points` overrides the constraint batch drawn by the dominant-measure rule.
    """
    real, fake = _arr(real), _arr(fake)
    if points is None:
        rule = "gp" if state.kind == "wgan_gp" else state.rule
        points = constraint_points(rule, real, fake, rng, state.sigma)
    params = state.critic.parameters()
    loss, info = critic_loss(state.kind, state.critic, real, fake, points, state.lam, state.rho,
                             state.lambda_gp)
    grads = [g.data for g in grad(loss, params)]
    _check_grads(grads, state, "critic")
    state.critic_opt.ascend(params, grads)
    if state.kind != "wgan_gp":
        state.lam = state.lam - state.rho * (1.0 - info["Omega"])
    state.step += 1
    info["lam"] = state.lam
    info["loss"] = float(loss.data)
    return info


def generator_step(state: ALMState, noise) -> dict:
    """One Adam descent step on ``-mean f(g(z))``; mutates `state`."""
    params = state.generator.parameters()
    fake = state.generator(_as_input(noise))
    loss = -state.critic(fake).mean()
    grads = [g.data for g in grad(loss, params)]
    _check_grads(grads, state, "generator")
    state.gen_opt.descend(params, grads)
    return {"gen_loss": float(loss.data)}


def _generate(generator, noise) -> np.ndarray:
    with no_grad():
        return generator(Tensor(noise)).data


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class GanConfig:
    target: Density
    seed: int
    kind: str = "sobolev"
    rule: str = "average"
    iters: int = 20000
    lr: float = 1e-4
    rho: float = 1e-5
    n_critic: int = 5
    batch: int = 256
    noise_dim: int = 8
    gen_widths: tuple[int, ...] = (32, 32)
    critic_widths: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    lambda_gp: float = LAMBDA_GP
    sigma0: float = 0.0
    log_every: int = 10


def train(cfg: GanConfig, callback: Callable[[int, dict], None] | None = None) -> tuple[ALMState, dict]:
    """Alternate `n_critic` critic steps with one generator step for `iters` iterations.

    Returns the final state and a history of per-iteration diagnostics.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.target.dim
    critic = MlpCritic(d, cfg.critic_widths, activation=cfg.activation, rng=rng)
    generator = MlpGenerator(cfg.noise_dim, cfg.gen_widths, d, activation="tanh", rng=rng)
    state = ALMState(critic, generator, kind=cfg.kind, rule=cfg.rule, rho=cfg.rho, lr=cfg.lr,
                     n_critic=cfg.n_critic, batch=cfg.batch, lambda_gp=cfg.lambda_gp)
    history: dict[str, list] = {k: [] for k in ("iter", "E", "Omega", "lam", "gen_loss")}
    history.update({f"fake_mean_{k}": [] for k in range(d)})
    for it in range(cfg.iters):
        if cfg.rule == "smoothed":
            state.sigma = cfg.sigma0 * (1.0 - it / cfg.iters)
        for _ in range(cfg.n_critic):
            real = cfg.target.sample(cfg.batch, rng)
            fake = _generate(generator, rng.standard_normal((cfg.batch, cfg.noise_dim)))
            info = alm_critic_step(state, real, fake, rng)
            if not np.isfinite(info["E"]) or abs(info["E"]) > DIVERGENCE_LIMIT:
                raise DivergenceError(f"objective diverged at iteration {it}: E = {info['E']}",
                                      state.dump(), history)
        ginfo = generator_step(state, rng.standard_normal((cfg.batch, cfg.noise_dim)))
        if it % cfg.log_every == 0 or it == cfg.iters - 1:
            history["iter"].append(it)
            history["E"].append(info["E"])
            history["Omega"].append(info["Omega"])
            history["lam"].append(state.lam)
            history["gen_loss"].append(ginfo["gen_loss"])
            fm = fake.mean(axis=0)
            for k in range(d):
                history[f"fake_mean_{k}"].append(float(fm[k]))
        if callback is not None:
            callback(it, info)
    return state, history


def sample_generator(generator, n: int, rng: np.random.Generator) -> np.ndarray:
    return _generate(generator, rng.standard_normal((n, generator.noise_dim)))


# ---------------------------------------------------------------------------
# checkpoints: magic, version, array count, then per array ndim, shape, f64 payload
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SIPMCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: Sequence[np.ndarray]) -> None:
    """Write arrays in a flat little-endian layout.

    ``magic(8) | version u32 | count u32 | per array: ndim u32, shape u64 * ndim, data f64 * size``
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype="<f8")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    out = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).copy())
        off += 8 * size
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out

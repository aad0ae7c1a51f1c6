"""Semi-supervised learning with the K+1 critic at toy scale.

The critic shares a feature map ``Phi`` between K class directions ``S`` and
a fake direction ``v``:

    f(x) = sum_y p(y|x) <S_y, Phi(x)> - <v, Phi(x)>,   p(y|x) = softmax(S Phi(x))_y

so ``f = f_plus - f_minus`` and ``p(y|x)`` doubles as the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import tensor as T
from .autodiff.functional import gradient_norm_sq
from .autodiff.nets import ACTIVATIONS, SMOOTH_ACTIVATIONS, MlpGenerator, Module
from .autodiff.tensor import Tensor, grad, no_grad
from .gan import Adam

__all__ = [
    "KPlusOneCritic",
    "critic_eval",
    "SSLConfig",
    "SSL_PRESETS",
    "SSLState",
    "ssl_losses",
    "blob_dataset",
    "BlobData",
    "train_ssl",
    "train_ce_only",
    "error_rate",
]

FORMULATIONS = ("fisher_only", "fisher_plus_sobolev")


class KPlusOneCritic(Module):
    def __init__(self, input_dim: int, n_classes: int, widths: Sequence[int] = (32,), feature_dim: int = 16,
                 activation: str = "tanh", rng=None, seed=None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if n_classes < 2:
            raise ValueError("need at least two classes")
        rng = rng if rng is not None else np.random.default_rng(seed)
        self.activation = activation
        self.input_dim, self.n_classes, self.feature_dim = input_dim, n_classes, feature_dim
        sizes = (input_dim, *widths, feature_dim)
        self.weights = [Tensor(rng.normal(0, 1 / np.sqrt(a), (a, b)), requires_grad=True)
                        for a, b in zip(sizes[:-1], sizes[1:])]
        self.biases = [Tensor(np.zeros(b), requires_grad=True) for b in sizes[1:]]
        self.S = Tensor(rng.normal(0, 1 / np.sqrt(feature_dim), (n_classes, feature_dim)), requires_grad=True)
        self.v = Tensor(rng.normal(0, 1 / np.sqrt(feature_dim), feature_dim), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.S, self.v]

    def features(self, x) -> Tensor:
        act = ACTIVATIONS[self.activation]
        h = x if isinstance(x, Tensor) else Tensor(x)
        for w, b in zip(self.weights, self.biases):
            h = act(h @ w + b)
        return h

    def logits(self, x) -> Tensor:
        return self.features(x) @ self.S.T

    def parts(self, x):
        phi = self.features(x)
        logits = phi @ self.S.T
        p = T.softmax(logits, axis=-1)
        f_plus = (p * logits).sum(axis=-1)
        f_minus = phi @ self.v
        return f_plus - f_minus, f_plus, f_minus, p, logits

    def __call__(self, x) -> Tensor:
        return self.parts(x)[0]

    def minus(self) -> "_Minus":
        return _Minus(self)


class _Minus:
    """``f_minus`` as a standalone critic, for gradient-norm estimators."""

    def __init__(self, critic: KPlusOneCritic):
        self.critic = critic
        self.activation = critic.activation

    @property
    def is_smooth(self) -> bool:
        return self.activation in SMOOTH_ACTIVATIONS

    def __call__(self, x) -> Tensor:
        return self.critic.features(x) @ self.critic.v


def critic_eval(c: KPlusOneCritic, x):
    """``(f, f_plus, f_minus, p(y|x))`` as arrays."""
    with no_grad():
        f, fp, fm, p, _ = c.parts(Tensor(np.asarray(x, dtype=np.float64)))
    return f.data, fp.data, fm.data, p.data


@dataclass
class SSLConfig:
    seed: int
    formulation: str = "fisher_plus_sobolev"
    lambda_ce: float = 1.5
    rho_f: float = 1e-3
    rho_s: float = 1e-3
    lr: float = 1e-3
    n_critic: int = 1
    steps: int = 2000
    batch: int = 64
    labeled_batch: int = 20
    noise_dim: int = 4
    widths: tuple[int, ...] = (32,)
    feature_dim: int = 16
    gen_widths: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    n_classes: int = 4
    n_labeled: int = 20
    n_unlabeled: int = 2000
    n_test: int = 2000
    blob_std: float = 1.0
    blob_radius: float = 3.0

    def __post_init__(self):
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {self.formulation!r}")
        if not self.lambda_ce > 0:
            raise ValueError("lambda_ce must be positive")
        if not (self.rho_f > 0 and self.rho_s > 0):
            raise ValueError("penalty weights must be positive")


# lambda_CE and the fisher-only penalty at full scale; not tuned for the toy
SSL_PRESETS = {"appendix_d": {"lambda_ce": 1.5, "rho_f": 1e-7, "lr": 2e-4}}


@dataclass
class SSLState:
    lam_f: float = 0.0
    lam_s: float = 0.0


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=-1)
    mask = np.eye(logits.shape[-1])[labels]
    return -(logp * mask).sum(axis=-1).mean()


def ssl_losses(c: KPlusOneCritic, real, fake, labeled_x, labeled_y, cfg: SSLConfig, state: SSLState,
               formulation: str | None = None) -> tuple[Tensor, dict]:
    """Critic objective (to ascend) and its pieces.

    ``E + lam_F (1 - Om_F(f)) - rho_F/2 (Om_F - 1)^2
    [+ lam_S (1 - Om_S(f_minus)) - rho_S/2 (Om_S - 1)^2] - lambda_CE CE``
    with both constraints estimated on the stacked real and fake batches.
    """
    formulation = formulation or cfg.formulation
    labeled_y = np.asarray(labeled_y)
    if len(np.unique(labeled_y)) < 2:
        raise ValueError("labeled data must contain at least two classes")
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    f_real = c(Tensor(real))
    f_fake = c(Tensor(fake))
    e_hat = f_real.mean() - f_fake.mean()
    pts = np.concatenate([real, fake], axis=0)
    om_f = T.square(c(Tensor(pts))).mean()
    loss = e_hat + state.lam_f * (1.0 - om_f) - 0.5 * cfg.rho_f * T.square(om_f - 1.0)
    info = {"E": float(e_hat.data), "Omega_F": float(om_f.data)}
    if formulation == "fisher_plus_sobolev":
        minus = c.minus()
        if not minus.is_smooth:
            raise ValueError("the Sobolev constraint needs a C^2 feature activation")
        om_s = gradient_norm_sq(minus, pts, create_graph=True).mean()
        loss = loss + state.lam_s * (1.0 - om_s) - 0.5 * cfg.rho_s * T.square(om_s - 1.0)
        info["Omega_S"] = float(om_s.data)
    ce = _cross_entropy(c.logits(Tensor(np.asarray(labeled_x, dtype=np.float64))), labeled_y)
    loss = loss - cfg.lambda_ce * ce
    info["CE"] = float(ce.data)
    return loss, info


@dataclass
class BlobData:
    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    centers: np.ndarray


def blob_dataset(cfg: SSLConfig, rng: np.random.Generator) -> BlobData:
    """K Gaussian blobs on a circle; labeled points are balanced across classes."""
    k = cfg.n_classes
    ang = 2 * np.pi * np.arange(k) / k
    centers = cfg.blob_radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def draw(n, balanced=False):
        y = np.arange(n) % k if balanced else rng.integers(0, k, size=n)
        return centers[y] + cfg.blob_std * rng.standard_normal((n, 2)), y

    lx, ly = draw(cfg.n_labeled, balanced=True)
    ux, _ = draw(cfg.n_unlabeled)
    tx, ty = draw(cfg.n_test)
    return BlobData(lx, ly, ux, tx, ty, centers)


def error_rate(c: KPlusOneCritic, x, y) -> float:
    _, _, _, p = critic_eval(c, x)
    return float(np.mean(p.argmax(axis=-1) != np.asarray(y)))


def train_ssl(cfg: SSLConfig, data: BlobData | None = None) -> dict:
    """Alternate critic (ALM + CE) and generator steps; report classifier test error."""
    rng = np.random.default_rng(cfg.seed)
    data = data or blob_dataset(cfg, rng)
    critic = KPlusOneCritic(2, cfg.n_classes, cfg.widths, cfg.feature_dim, cfg.activation, rng=rng)
    gen = MlpGenerator(cfg.noise_dim, cfg.gen_widths, 2, rng=rng)
    copt, gopt = Adam(cfg.lr), Adam(cfg.lr)
    state = SSLState()
    hist = {"step": [], "test_error": [], "CE": [], "Omega_F": [], "Omega_S": []}
    eval_every = max(cfg.steps // 20, 1)
    for step in range(cfg.steps):
        for _ in range(cfg.n_critic):
            real = data.unlabeled_x[rng.integers(0, len(data.unlabeled_x), cfg.batch)]
            with no_grad():
                fake = gen(Tensor(rng.standard_normal((cfg.batch, cfg.noise_dim)))).data
            li = rng.integers(0, len(data.labeled_x), cfg.labeled_batch)
            loss, info = ssl_losses(critic, real, fake, data.labeled_x[li], data.labeled_y[li], cfg, state)
            params = critic.parameters()
            grads = [g.data for g in grad(loss, params)]
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise FloatingPointError(f"non-finite critic gradient at step {step}")
            copt.ascend(params, grads)
            state.lam_f -= cfg.rho_f * (1.0 - info["Omega_F"])
            if "Omega_S" in info:
                state.lam_s -= cfg.rho_s * (1.0 - info["Omega_S"])
        gparams = gen.parameters()
        gloss = -critic(gen(Tensor(rng.standard_normal((cfg.batch, cfg.noise_dim))))).mean()
        gopt.descend(gparams, [g.data for g in grad(gloss, gparams)])
        if step % eval_every == 0 or step == cfg.steps - 1:
            hist["step"].append(step)
            hist["test_error"].append(error_rate(critic, data.test_x, data.test_y))
            hist["CE"].append(info["CE"])
            hist["Omega_F"].append(info["Omega_F"])
            hist["Omega_S"].append(info.get("Omega_S", float("nan")))
    hist["final_test_error"] = hist["test_error"][-1]
    hist["critic"] = critic
    hist["state"] = state
    return hist


def train_ce_only(cfg: SSLConfig, data: BlobData | None = None, labeled_x=None, labeled_y=None) -> dict:
    """Same classifier trained by cross-entropy on the labeled points only."""
    rng = np.random.default_rng(cfg.seed)
    data = data or blob_dataset(cfg, rng)
    critic = KPlusOneCritic(2, cfg.n_classes, cfg.widths, cfg.feature_dim, cfg.activation, rng=rng)
    lx = data.labeled_x if labeled_x is None else np.asarray(labeled_x)
    ly = data.labeled_y if labeled_y is None else np.asarray(labeled_y)
    opt = Adam(cfg.lr)
    params = critic.parameters()
    for _ in range(cfg.steps):
        li = rng.integers(0, len(lx), cfg.labeled_batch)
        ce = _cross_entropy(critic.logits(Tensor(lx[li])), ly[li])
        opt.descend(params, [g.data for g in grad(ce, params)])
    return {"final_test_error": error_rate(critic, data.test_x, data.test_y), "critic": critic}

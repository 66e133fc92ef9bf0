"""Embedding-space perturbations: FGSM, FGM, PGD, FreeLB and SMART.

Norms are taken per sample over the flattened ``[L, d]`` embedding block
(one norm per sequence); padding positions are never perturbed.

Multi-step attacks evaluate the model at S perturbations. With zero
initialisation the clean pass already supplies the gradient at ``r = 0``,
so the evaluated points are ``r1..rS``. With uniform-in-ball
initialisation (SMART's default, since a divergence objective has zero
gradient at ``r = 0``) the evaluated points are ``r0..r(S-1)``. Either way
an attack costs S forward and S backward passes on top of the clean pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .models import Batch, Forward, ModelParams, forward
from .tensor import Tensor

METHODS = ("fgsm", "fgm", "pgd", "freelb", "smart")
NORMS = ("l2", "linf")
INITS = ("zero", "uniform")


class AttackError(RuntimeError):
    def __init__(self, method: str, step: int, detail: str):
        self.method = method
        self.step = step
        super().__init__(f"{method} attack aborted at step {step}: {detail}")


@dataclass(frozen=True)
class PerturbConfig:
    method: str
    epsilon: float = 1.0
    steps: int = 1
    step_size: float | None = None  # None -> epsilon / steps
    norm: str = "l2"
    alpha_reg: float = 1.0
    delta: float = T.DEFAULT_DELTA
    grad_floor: float = 1e-12
    init: str | None = None  # None -> "uniform" for smart, "zero" otherwise

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.init is not None and self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}, got {self.init!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.method in ("fgsm", "fgm") and self.steps != 1:
            raise ValueError(f"{self.method} is single-step; got steps={self.steps}")
        if self.step_size is not None and not 0 < self.step_size <= self.epsilon:
            raise ValueError(f"step_size must lie in (0, epsilon], got {self.step_size}")
        if self.alpha_reg <= 0 or self.delta <= 0 or self.grad_floor <= 0:
            raise ValueError("alpha_reg, delta and grad_floor must be positive")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.steps if self.step_size is None else self.step_size

    @property
    def init_mode(self) -> str:
        if self.init is not None:
            return self.init
        return "uniform" if self.method == "smart" else "zero"

    @property
    def multi_step(self) -> bool:
        return self.method in ("pgd", "freelb", "smart")

    def with_(self, **kw) -> "PerturbConfig":
        return replace(self, **kw)


@dataclass
class AttackResult:
    r_final: np.ndarray
    adv_loss: Tensor
    steps_taken: int
    per_step_losses: list[float]
    trajectory: list[np.ndarray] = field(default_factory=list)  # every perturbation produced


# ---------------------------------------------------------------------------
# perturbation primitives
# ---------------------------------------------------------------------------


def _axes(x: np.ndarray) -> tuple[int, ...] | None:
    return tuple(range(1, x.ndim)) if x.ndim >= 2 else None


def sample_norms(x, norm: str = "l2") -> np.ndarray:
    """Per-sample norm (leading axis indexes samples when ndim >= 2), kept broadcastable."""
    x = np.asarray(x, dtype=np.float64)
    ax = _axes(x)
    if norm == "l2":
        return np.sqrt(np.sum(x * x, axis=ax, keepdims=True))
    return np.max(np.abs(x), axis=ax, keepdims=True)


def gen_fgsm(grad, epsilon: float) -> np.ndarray:
    return epsilon * np.sign(np.asarray(grad, dtype=np.float64))


def gen_fgm(grad, epsilon: float, grad_floor: float = 1e-12) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64)
    return epsilon * g / np.maximum(sample_norms(g), grad_floor)


def project_l2(r, epsilon: float) -> np.ndarray:
    """Rescale samples whose l2 norm exceeds ``epsilon`` back onto the ball."""
    r = np.asarray(r, dtype=np.float64)
    n = sample_norms(r)
    factor = np.where(n > epsilon, epsilon / np.where(n > 0, n, 1.0), 1.0)
    return r * factor


def project_linf(r, epsilon: float) -> np.ndarray:
    return np.clip(np.asarray(r, dtype=np.float64), -epsilon, epsilon)


def project(r, epsilon: float, norm: str) -> np.ndarray:
    return project_l2(r, epsilon) if norm == "l2" else project_linf(r, epsilon)


def ascent_direction(grad, norm: str, grad_floor: float = 1e-12) -> np.ndarray:
    """Unit-norm ascent step: normalised gradient (l2) or its sign (linf)."""
    g = np.asarray(grad, dtype=np.float64)
    if norm == "l2":
        return g / np.maximum(sample_norms(g), grad_floor)
    return np.sign(g)


def _emb_mask(batch: Batch, shape) -> np.ndarray:
    return np.broadcast_to(batch.mask[:, :, None], shape).astype(np.float64)


def random_init(batch: Batch, shape, cfg: PerturbConfig, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample from the norm ball, restricted to unmasked positions."""
    if rng is None:
        raise ValueError("uniform initialisation needs an RNG")
    m = _emb_mask(batch, shape)
    eps = cfg.epsilon
    if cfg.norm == "linf":
        return rng.uniform(-eps, eps, size=shape) * m
    u = rng.standard_normal(shape) * m
    u = u / np.maximum(sample_norms(u), cfg.grad_floor)
    dims = m.reshape(shape[0], -1).sum(axis=1)
    radius = eps * rng.random(shape[0]) ** (1.0 / np.maximum(dims, 1.0))
    return u * radius.reshape((-1,) + (1,) * (len(shape) - 1))


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


class CleanPass(NamedTuple):
    out: Forward
    input_grad: np.ndarray  # d clean loss / d embeddings


def clean_pass(batch: Batch, params: ModelParams, ledger=None, live: bool = True) -> CleanPass:
    """Clean forward + backward.

    ``live`` accumulates parameter gradients; otherwise parameters are
    frozen and only the input gradient is produced.
    """
    if live:
        out = forward(batch, params, ledger=ledger)
        T.backward(out.loss, ledger)
        g = out.embeddings.grad
        return CleanPass(out, np.zeros(out.embeddings.shape) if g is None else g.copy())
    shape = batch.token_ids.shape + (params.config.dim,)
    r0 = Tensor(np.zeros(shape), requires_grad=True)
    out = forward(batch, params.frozen(), r0, ledger)
    T.backward(out.loss, ledger)
    return CleanPass(out, r0.grad.copy())


def _ascend(batch, shape, cfg: PerturbConfig, objective, rng, ledger, first_grad=None) -> tuple:
    """Projected ascent; returns (r_final, trajectory, reported losses, reported tensors).

    With ``first_grad`` (zero init, gradient at r = 0 already known from the
    clean pass) the S evaluated points are r1..rS; otherwise they are
    r0..r(S-1) with r0 zero or a uniform ball sample.
    ``objective(r_tensor, last)`` returns ``(loss_to_backprop, reported)``.
    """
    S, eps, alpha = cfg.steps, cfg.epsilon, cfg.alpha
    m = _emb_mask(batch, shape)

    def advance(r, g):
        return project(r + alpha * ascent_direction(g, cfg.norm, cfg.grad_floor), eps, cfg.norm) * m

    if first_grad is not None:
        r = advance(np.zeros(shape), first_grad)
    elif cfg.init_mode == "uniform":
        r = random_init(batch, shape, cfg, rng)
    else:
        r = np.zeros(shape)
    trajectory = [r]
    losses: list[float] = []
    reported: list[Tensor] = []
    for t in range(1, S + 1):
        rt = Tensor(r, requires_grad=True)
        last = t == S
        loss, report = objective(rt, last)
        value = report.item()
        if not np.isfinite(value):
            raise AttackError(cfg.method, t, f"non-finite loss {value}")
        T.backward(loss, ledger)
        losses.append(value)
        reported.append(report)
        if not last:
            g = np.zeros(shape) if rt.grad is None else rt.grad
            r = advance(r, g)
            trajectory.append(r)
    return r, trajectory, losses, reported


def _shape(batch: Batch, params: ModelParams) -> tuple[int, int, int]:
    return batch.token_ids.shape + (params.config.dim,)


def _start(batch, params, cfg, clean, ledger):
    if clean is None:
        clean = clean_pass(batch, params, ledger, live=False)
    first = clean.input_grad if cfg.init_mode == "zero" else None
    return clean, first


def single_step_attack(batch, params, cfg: PerturbConfig, clean: CleanPass | None = None, ledger=None, live: bool = True) -> AttackResult:
    """FGSM / FGM: perturb along the clean input gradient, then one adversarial pass."""
    if clean is None:
        clean = clean_pass(batch, params, ledger, live=False)
    g = clean.input_grad
    r = gen_fgsm(g, cfg.epsilon) if cfg.method == "fgsm" else gen_fgm(g, cfg.epsilon, cfg.grad_floor)
    r = r * _emb_mask(batch, r.shape)
    out = forward(batch, params if live else params.frozen(), Tensor(r), ledger)
    if not np.isfinite(out.loss.item()):
        raise AttackError(cfg.method, 1, f"non-finite loss {out.loss.item()}")
    T.backward(out.loss, ledger)
    return AttackResult(r, out.loss, 1, [out.loss.item()], [r])


def pgd_attack(batch, params, cfg: PerturbConfig, clean: CleanPass | None = None, ledger=None, rng=None, live: bool = True) -> AttackResult:
    """S projected ascent steps on the task loss; only the loss at the final
    perturbation reaches the parameters."""
    clean, first = _start(batch, params, cfg, clean, ledger)
    frozen = params.frozen()

    def fn(rt, last):
        out = forward(batch, params if (live and last) else frozen, rt, ledger)
        return out.loss, out.loss

    r, traj, losses, rep = _ascend(batch, _shape(batch, params), cfg, fn, rng, ledger, first)
    return AttackResult(r, rep[-1], cfg.steps, losses, traj)


def freelb_attack(batch, params, cfg: PerturbConfig, clean: CleanPass | None = None, ledger=None, rng=None, live: bool = True) -> AttackResult:
    """PGD's ascent, but every step's loss (scaled by 1/S) reaches the parameters;
    ``adv_loss`` is the mean of the step losses."""
    clean, first = _start(batch, params, cfg, clean, ledger)
    S = cfg.steps
    p = params if live else params.frozen()

    def fn(rt, last):
        out = forward(batch, p, rt, ledger)
        return T.scale(out.loss, 1.0 / S), out.loss

    r, traj, losses, rep = _ascend(batch, _shape(batch, params), cfg, fn, rng, ledger, first)
    total = rep[0]
    for x in rep[1:]:
        total = T.add(total, x)
    return AttackResult(r, T.scale(total, 1.0 / S), S, losses, traj)


def smart_attack(batch, params, cfg: PerturbConfig, clean_probs, clean: CleanPass | None = None, ledger=None, rng=None, live: bool = True) -> AttackResult:
    """Ascend KL(p(x + r) || p(x)) for S-1 steps, then score the symmetric KL.

    Labels are never read. ``clean_probs`` is the detached clean output
    distribution. When ``clean`` is given and ``live`` is set, the final
    symmetric KL also differentiates through the clean branch.
    ``adv_loss`` is ``alpha_reg * sym_kl``; S = 1 scores the symmetric KL
    at the initial perturbation directly.
    """
    if clean_probs is None:
        raise ValueError("smart_attack requires clean_probs from a perturbation-free forward pass")
    q_fixed = Tensor(np.asarray(clean_probs, dtype=np.float64))
    q_live = clean.out.probs if (clean is not None and live) else q_fixed
    rows = _row_mask(batch)
    frozen = params.frozen()

    def fn(rt, last):
        if not last:
            out = forward(batch, frozen, rt, ledger)
            kl = T.kl_div(out.probs, q_fixed, cfg.delta, rows)
            return kl, kl
        out = forward(batch, params if live else frozen, rt, ledger)
        reg = T.scale(T.sym_kl_div(out.probs, q_live, cfg.delta, rows), cfg.alpha_reg)
        return reg, reg

    r, traj, losses, rep = _ascend(batch, _shape(batch, params), cfg, fn, rng, ledger)
    return AttackResult(r, rep[-1], cfg.steps, losses, traj)


def _row_mask(batch: Batch) -> np.ndarray:
    if batch.task == "ner":
        return batch.mask.reshape(-1)
    return np.ones(batch.token_ids.shape[0], dtype=bool)


def attack(batch, params, cfg: PerturbConfig, clean: CleanPass | None = None, ledger=None, rng=None, live: bool = True) -> AttackResult:
    """Dispatch on ``cfg.method``. Without ``clean``, a frozen clean pass is run (and charged)."""
    if cfg.method in ("fgsm", "fgm"):
        return single_step_attack(batch, params, cfg, clean, ledger, live)
    if cfg.method == "pgd":
        return pgd_attack(batch, params, cfg, clean, ledger, rng, live)
    if cfg.method == "freelb":
        return freelb_attack(batch, params, cfg, clean, ledger, rng, live)
    if clean is None:
        clean = clean_pass(batch, params, ledger, live=False)
    return smart_attack(batch, params, cfg, clean.out.probs.values, clean, ledger, rng, live)


def objective_standard_plus_adv(clean_loss: Tensor, result: AttackResult, method: str) -> Tensor:
    """Clean loss plus the adversarial term (for SMART the regulariser, weight
    already applied). Gradients are accumulated pass by pass during the
    attack; this tensor carries the combined objective value."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return T.add(clean_loss, result.adv_loss)

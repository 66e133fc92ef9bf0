"""Random adversarial training: a Bernoulli gate decides, batch by batch,
whether the adversarial phase runs.

Three independently seeded RNG streams keep runs comparable: the gate,
data shuffling, and model init / attack noise. Changing ``p_attack``
therefore never changes data order or initial weights, and ``p_attack=1``
(resp. 0) reproduces the always-attack (resp. standard) trainer exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .adversarial import AttackError, PerturbConfig, attack, clean_pass, objective_standard_plus_adv
from .cost import CostLedger
from .data import TaskData
from .models import Batch, ModelParams, batches, evaluate, forward

log = logging.getLogger(__name__)

REGIMES = ("standard", "at", "rat")
_STREAMS = {"init": 0, "data": 1, "gate": 2, "attack": 3}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    """Generator for one named stream; streams never share state."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[stream]]))


class TrainingError(RuntimeError):
    """Training stopped early; ``log`` and ``history`` hold what was recorded."""

    def __init__(self, msg: str, log: "EventLog", history: list):
        super().__init__(msg)
        self.log = log
        self.history = history


@dataclass(frozen=True)
class RatConfig:
    p_attack: float = 0.5
    gate_seed: int = 0
    perturb: PerturbConfig | None = None

    def __post_init__(self):
        if not 0 <= self.p_attack <= 1:
            raise ValueError(f"p_attack must lie in [0, 1], got {self.p_attack}")


def sample_event(rng: np.random.Generator, p_attack: float) -> int:
    """One Bernoulli(p) draw; consumes exactly one uniform from ``rng``."""
    if not 0 <= p_attack <= 1:
        raise ValueError(f"p_attack must lie in [0, 1], got {p_attack}")
    return int(rng.random() < p_attack)


class Gate:
    def __init__(self, p_attack: float, seed: int):
        self.p_attack = p_attack
        self.rng = stream_rng(seed, "gate")

    def draw(self) -> int:
        return sample_event(self.rng, self.p_attack)


@dataclass
class EventRecord:
    epoch: int
    batch: int
    event: int
    fp: int
    bp: int
    loss: float


@dataclass
class EventLog:
    records: list[EventRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def events(self) -> list[int]:
        return [r.event for r in self.records]

    @property
    def attacks(self) -> int:
        return int(sum(self.events))

    def append(self, rec: EventRecord) -> None:
        self.records.append(rec)

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "EventLog":
        with open(path, encoding="utf-8") as fh:
            return cls([EventRecord(**json.loads(line)) for line in fh if line.strip()])

    def summary(self) -> dict:
        n = len(self.records)
        return {
            "batches": n,
            "attacks": self.attacks,
            "attack_rate": self.attacks / n if n else 0.0,
            "fp": int(sum(r.fp for r in self.records)),
            "bp": int(sum(r.bp for r in self.records)),
        }


class SGD:
    """Plain SGD with optional heavy-ball momentum and global-norm clipping."""

    def __init__(self, lr: float, momentum: float = 0.0, clip_norm: float | None = None):
        if lr <= 0 or not 0 <= momentum < 1:
            raise ValueError("need lr > 0 and 0 <= momentum < 1")
        if clip_norm is not None and clip_norm <= 0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.sum(t.grad**2)) for _, t in params if t.grad is not None))
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, t in params:
            g = np.zeros(t.shape) if t.grad is None else scale * t.grad
            if self.momentum:
                v = self.velocity.get(name)
                g = g if v is None else self.momentum * v + g
                self.velocity[name] = g
            new = t.values - self.lr * g
            new.setflags(write=False)
            t.values = new


@dataclass
class StepReport:
    event: int
    loss: float  # objective value (clean + adversarial term when attacked)
    clean_loss: float
    adv_loss: float | None
    fp: int
    bp: int


def standard_step(batch: Batch, params: ModelParams, opt: SGD, ledger: CostLedger | None = None) -> StepReport:
    before = (ledger.fp, ledger.bp) if ledger is not None else (0, 0)
    T.new_graph()
    params.zero_grad()
    out = forward(batch, params, ledger=ledger)
    T.backward(out.loss, ledger)
    loss = out.loss.item()
    opt.step(params)
    T.new_graph()
    fp, bp = (ledger.fp - before[0], ledger.bp - before[1]) if ledger is not None else (1, 1)
    return StepReport(0, loss, loss, None, fp, bp)


def adversarial_step(
    batch: Batch,
    params: ModelParams,
    opt: SGD,
    perturb: PerturbConfig,
    attack_rng: np.random.Generator,
    ledger: CostLedger | None = None,
) -> StepReport:
    """Clean pass, attack, one parameter update on the summed gradients."""
    local = ledger if ledger is not None else CostLedger()
    before = local.snapshot()
    T.new_graph()
    params.zero_grad()
    clean = clean_pass(batch, params, local, live=True)
    res = attack(batch, params, perturb, clean, local, attack_rng, live=True)
    obj = objective_standard_plus_adv(clean.out.loss, res, perturb.method)
    opt.step(params)
    T.new_graph()
    d = local - before
    return StepReport(1, obj.item(), clean.out.loss.item(), res.adv_loss.item(), d.fp, d.bp)


def train_step(
    batch: Batch,
    params: ModelParams,
    rat_cfg: RatConfig,
    ledger: CostLedger | None,
    *,
    gate: Gate,
    opt: SGD,
    attack_rng: np.random.Generator,
) -> StepReport:
    """Draw the gate first, then run either the standard or the adversarial step."""
    event = gate.draw()
    if event and rat_cfg.perturb is not None:
        return adversarial_step(batch, params, opt, rat_cfg.perturb, attack_rng, ledger)
    return standard_step(batch, params, opt, ledger)


@dataclass
class TrainResult:
    params: ModelParams
    log: EventLog
    history: list[dict]


def train(
    dataset: TaskData,
    params: ModelParams,
    rat_cfg: RatConfig,
    epochs: int,
    ledger: CostLedger | None = None,
    *,
    regime: str = "rat",
    batch_size: int = 32,
    lr: float = 0.2,
    momentum: float = 0.9,
    clip_norm: float | None = 1.0,
    data_seed: int = 0,
    attack_seed: int = 0,
    evaluate_dev: bool = True,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``params`` in place.

    ``regime`` selects the schedule: ``standard`` never attacks, ``at``
    always attacks, ``rat`` asks the Bernoulli gate before every batch
    (fresh draws every epoch).
    """
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    if regime != "standard" and rat_cfg.perturb is None:
        raise ValueError(f"regime {regime!r} needs an attack configuration")
    ledger = ledger if ledger is not None else CostLedger()
    data_rng = stream_rng(data_seed, "data")
    attack_rng = stream_rng(attack_seed, "attack")
    gate = Gate(rat_cfg.p_attack, rat_cfg.gate_seed)
    opt = SGD(lr, momentum, clip_norm)
    events = EventLog()
    history: list[dict] = []
    task = params.config.task
    for epoch in range(epochs):
        order = data_rng.permutation(len(dataset.train))
        losses = []
        for b, batch in enumerate(batches(dataset.train, batch_size, task, order)):
            try:
                if regime == "rat":
                    rep = train_step(batch, params, rat_cfg, ledger, gate=gate, opt=opt, attack_rng=attack_rng)
                elif regime == "at":
                    rep = adversarial_step(batch, params, opt, rat_cfg.perturb, attack_rng, ledger)
                else:
                    rep = standard_step(batch, params, opt, ledger)
            except AttackError as e:
                T.new_graph()
                raise TrainingError(f"epoch {epoch} batch {b}: {e}", events, history) from e
            events.append(EventRecord(epoch, b, rep.event, rep.fp, rep.bp, rep.loss))
            if not np.isfinite(rep.loss):
                raise TrainingError(f"epoch {epoch} batch {b}: loss diverged ({rep.loss})", events, history)
            losses.append(rep.loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan")}
        if evaluate_dev and dataset.dev:
            row.update({f"dev_{k}": v for k, v in evaluate(params, dataset.dev, dataset.labels).items()})
        history.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(params, events, history)

"""Experiment driver: run configs, run directories, reports and comparison tables.

A run directory holds ``config.json``, ``report.json``, ``events.jsonl``,
``checkpoint.npz`` and, when plotting is on, figures. Every artifact carries
the config hash, a digest of the canonical config minus its output path.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from statistics import mean

from . import tensor as T
from .adversarial import METHODS, NORMS, PerturbConfig, attack, clean_pass
from .cost import DISPLAY_NAMES, CostLedger, cost_table, per_batch_xfp
from .data import SyntheticSpec, TaskData, file_task, gen_ner_corpus, gen_re_corpus, synthetic_task, write_conll_bio, write_relations
from .models import ModelConfig, ModelParams, batches, decode_predictions, evaluate, load_checkpoint, predict, save_checkpoint, score
from .rat import EventLog, RatConfig, TrainingError, stream_rng, train

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TASKS = ("ner", "re")
TRAIN_METHODS = ("standard",) + METHODS
REGIMES = ("standard", "at", "rat")


class ConfigError(ValueError):
    pass


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass(frozen=True)
class RunConfig:
    """One training run. ``method="standard"`` ignores the attack fields.

    ``data`` is ``{"synthetic": {...SyntheticSpec overrides}}`` or
    ``{"files": {"train": path, "dev": path, "test": path}}``.
    """

    task: str = "ner"
    method: str = "standard"
    regime: str = "rat"
    p_attack: float = 0.5
    epsilon: float = 0.3
    steps: int | None = None  # None: 1 for fgsm/fgm, 3 otherwise
    step_size: float | None = None
    norm: str = "l2"
    alpha_reg: float = 1.0
    init: str | None = None
    dim: int = 32
    hidden: int = 64
    window: int = 3
    attention: bool = False
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.2
    momentum: float = 0.9
    clip_norm: float | None = 1.0  # global gradient norm cap; None disables
    seed_init: int = 0
    seed_data: int = 0
    seed_gate: int = 0
    data: dict = field(default_factory=lambda: {"synthetic": {}})
    out: str | None = None
    schema: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema {self.schema}; expected {SCHEMA_VERSION}")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.method not in TRAIN_METHODS:
            raise ConfigError(f"method must be one of {TRAIN_METHODS}, got {self.method!r}")
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.norm not in NORMS:
            raise ConfigError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if not 0 <= self.p_attack <= 1:
            raise ConfigError(f"p_attack must lie in [0, 1], got {self.p_attack}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need epochs >= 0, batch_size >= 1, lr > 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")
        if not isinstance(self.data, dict) or len(self.data) != 1 or next(iter(self.data)) not in ("synthetic", "files"):
            raise ConfigError('data must be {"synthetic": {...}} or {"files": {...}}')
        if "files" in self.data:
            extra = set(self.data["files"]) - {"train", "dev", "test"}
            if extra or "train" not in self.data["files"]:
                raise ConfigError(f"data.files needs 'train' (optional 'dev', 'test'); unknown: {sorted(extra)}")
        else:
            try:
                self.synthetic_spec()
            except TypeError as e:
                raise ConfigError(f"data.synthetic: {e}") from None
            except ValueError as e:
                raise ConfigError(f"data.synthetic: {e}") from None
        if self.method != "standard":
            try:
                self.perturb_config()
            except ValueError as e:
                raise ConfigError(str(e)) from None

    # -- serialisation -------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        d.pop("config_hash", None)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_(self, **kw) -> "RunConfig":
        return RunConfig.from_dict({**self.to_dict(), **kw})

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(_canonical(d).encode()).hexdigest()[:12]

    # -- derived configs -----------------------------------------------
    @property
    def effective_regime(self) -> str:
        return "standard" if self.method == "standard" else self.regime

    @property
    def effective_steps(self) -> int:
        if self.steps is not None:
            return self.steps
        return 1 if self.method in ("fgsm", "fgm", "standard") else 3

    def perturb_config(self) -> PerturbConfig | None:
        if self.method == "standard":
            return None
        return PerturbConfig(
            self.method, self.epsilon, self.effective_steps, self.step_size, self.norm, self.alpha_reg, init=self.init
        )

    def rat_config(self) -> RatConfig:
        return RatConfig(self.p_attack, self.seed_gate, self.perturb_config())

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**self.data["synthetic"])

    def model_config(self, data: TaskData) -> ModelConfig:
        return ModelConfig(self.task, len(data.vocab), len(data.labels), self.dim, self.hidden, self.window, self.attention)


@functools.lru_cache(maxsize=8)
def _cached_task(task: str, data_json: str) -> TaskData:
    data = json.loads(data_json)
    if "synthetic" in data:
        return synthetic_task(task, SyntheticSpec(**data["synthetic"]))
    f = data["files"]
    return file_task(task, f["train"], f.get("dev"), f.get("test"))


def load_task_data(cfg: RunConfig) -> TaskData:
    return _cached_task(cfg.task, _canonical(cfg.data))


def init_params(cfg: RunConfig, data: TaskData) -> ModelParams:
    return ModelParams.init(cfg.model_config(data), stream_rng(cfg.seed_init, "init"))


def ledger_formula(cfg: RunConfig, events: EventLog) -> int:
    """xFP implied by the event log and the per-batch cost formula."""
    if cfg.method == "standard":
        return 3 * len(events)
    return sum(per_batch_xfp(cfg.method, cfg.effective_steps, bool(e)) for e in events.events)


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    report: dict
    params: ModelParams
    events: EventLog


def run_train(cfg: RunConfig, plots: bool = True) -> RunResult:
    """Train per ``cfg``; when ``cfg.out`` is set, persist the run directory.

    A diverged or failed run still writes its partial event log and an
    ``error.json`` before the exception propagates.
    """
    out = Path(cfg.out) if cfg.out else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        _dump({**cfg.to_dict(), "config_hash": cfg.config_hash}, out / "config.json")
    data = load_task_data(cfg)
    params = init_params(cfg, data)
    ledger = CostLedger()
    t0 = time.perf_counter()
    try:
        res = train(
            data,
            params,
            cfg.rat_config(),
            cfg.epochs,
            ledger,
            regime=cfg.effective_regime,
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            clip_norm=cfg.clip_norm,
            data_seed=cfg.seed_data,
            attack_seed=cfg.seed_init,
        )
    except TrainingError as e:
        if out is not None:
            e.log.write_jsonl(out / "events.jsonl")
            _dump(error_record(e, "train", cfg.config_hash), out / "error.json")
        raise
    wall = time.perf_counter() - t0
    eval_set = data.test or data.dev
    report = {
        "schema": SCHEMA_VERSION,
        "config_hash": cfg.config_hash,
        "task": cfg.task,
        "method": cfg.method,
        "regime": cfg.effective_regime,
        "p_attack": cfg.p_attack,
        "num_parameters": params.num_parameters(),
        "history": res.history,
        "test": evaluate(params, eval_set, data.labels) if eval_set else {},
        "events": res.log.summary(),
        "ledger": {"fp": ledger.fp, "bp": ledger.bp, "xfp": ledger.xfp, "xfp_formula": ledger_formula(cfg, res.log)},
        "wall_time": wall,
    }
    if out is not None:
        res.log.write_jsonl(out / "events.jsonl")
        save_checkpoint(out / "checkpoint.npz", params, cfg.config_hash)
        _dump(report, out / "report.json")
        if plots and res.history:
            from .plotting import learning_curve

            learning_curve(res.history, out / "learning_curve.png", title=f"{cfg.task} {cfg.effective_regime} {cfg.method}")
    return RunResult(report, params, res.log)


def load_run(checkpoint) -> tuple[RunConfig, ModelParams, TaskData]:
    """Checkpoint plus the ``config.json`` beside it, cross-checked."""
    path = Path(checkpoint)
    if path.is_dir():
        path = path / "checkpoint.npz"
    cfg_path = path.parent / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"no config.json next to {path}")
    cfg = RunConfig.load(cfg_path)
    params, meta = load_checkpoint(path)
    if meta.get("config_hash") != cfg.config_hash:
        raise ConfigError(f"checkpoint hash {meta.get('config_hash')} does not match config hash {cfg.config_hash}")
    data = load_task_data(cfg)
    expected = cfg.model_config(data)
    if params.config != expected:
        raise ConfigError(f"checkpoint model {params.config} does not match config/data model {expected}")
    return cfg, params, data


def _split(data: TaskData, name: str):
    if name not in ("train", "dev", "test"):
        raise ConfigError(f"split must be train, dev or test, got {name!r}")
    ex = getattr(data, name)
    if not ex:
        raise ConfigError(f"split {name!r} is empty")
    return ex


def cmd_eval(checkpoint, split: str = "test") -> dict:
    cfg, params, data = load_run(checkpoint)
    return {"config_hash": cfg.config_hash, "split": split, "metrics": evaluate(params, _split(data, split), data.labels)}


def attack_eval(params: ModelParams, examples, labels, pcfg: PerturbConfig, seed: int = 0, batch_size: int = 64) -> tuple[dict, dict]:
    """Metrics on clean inputs and on inputs attacked with the model's own gradients."""
    task = params.config.task
    rng = stream_rng(seed, "attack")
    P, Pa, G = [], [], []
    for b in batches(examples, batch_size, task):
        T.new_graph()
        c = clean_pass(b, params, None, live=False)
        r = attack(b, params, pcfg, c, None, rng, live=False).r_final
        p, g = decode_predictions(b, predict(b, params), labels)
        pa, _ = decode_predictions(b, predict(b, params, T.Tensor(r)), labels)
        P += p
        Pa += pa
        G += g
    T.new_graph()
    return score(P, G, task), score(Pa, G, task)


def cmd_attack_eval(checkpoint, pcfg: PerturbConfig, split: str = "test", epsilons=None, seed: int = 0, out=None, plots: bool = True) -> dict:
    """Clean vs attacked metrics, at ``pcfg.epsilon`` or over an epsilon sweep."""
    cfg, params, data = load_run(checkpoint)
    ex = _split(data, split)
    eps_list = [pcfg.epsilon] if not epsilons else list(epsilons)
    rows = []
    clean = None
    for eps in eps_list:
        step = pcfg.step_size if pcfg.step_size is not None and pcfg.step_size <= eps else None
        c, a = attack_eval(params, ex, data.labels, pcfg.with_(epsilon=eps, step_size=step), seed)
        clean = c
        rows.append({"epsilon": eps, "attacked": a})
    result = {
        "config_hash": cfg.config_hash,
        "split": split,
        "attack": dataclasses.asdict(pcfg),
        "clean": clean,
        "sweep": rows,
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(result, out / "attack_eval.json")
        with open(out / "attack_eval.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["epsilon", "clean_f1", "attacked_f1", "clean_accuracy", "attacked_accuracy"])
            for r in rows:
                a = r["attacked"]
                w.writerow([r["epsilon"], _fmt(clean["f1"]), _fmt(a["f1"]), _fmt(clean["accuracy"]), _fmt(a["accuracy"])])
        if plots and len(rows) > 1:
            from .plotting import robustness_curve

            robustness_curve([r["epsilon"] for r in rows], clean, [r["attacked"] for r in rows], out / "robustness.png")
    return result


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def cmd_gen_data(spec: SyntheticSpec | dict, task: str, out) -> dict:
    """Write train/dev/test in the external formats plus ``manifest.json``."""
    if isinstance(spec, dict):
        spec = SyntheticSpec(**spec)
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if task == "ner":
        splits, writer, ext = gen_ner_corpus(spec), write_conll_bio, "conll"
    else:
        splits, writer, ext = gen_re_corpus(spec), write_relations, "tsv"
    files, counts, lines = {}, {}, {}
    for name, items in zip(("train", "dev", "test"), splits):
        path = out / f"{name}.{ext}"
        counts[name] = writer(items, path)
        with open(path, encoding="utf-8") as fh:
            lines[name] = sum(1 for _ in fh)
        files[name] = path.name
    manifest = {"task": task, "seed": spec.seed, "spec": spec.to_dict(), "files": files, "counts": counts, "lines": lines}
    _dump(manifest, out / "manifest.json")
    return manifest


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def error_record(exc: BaseException, command: str, config_hash: str | None = None) -> dict:
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
    if config_hash:
        rec["config_hash"] = config_hash
    return rec


def compare_matrix(base: RunConfig, methods, regimes, tasks, seeds) -> list[RunConfig]:
    """Expand the comparison grid. ``standard`` appears once per task and seed."""
    cfgs = []
    for task in tasks:
        for regime in regimes:
            ms = ["standard"] if regime == "standard" else [m for m in methods if m != "standard"]
            for m in ms:
                for s in seeds:
                    cfgs.append(base.with_(task=task, method=m, regime=regime, seed_init=s, seed_data=s, seed_gate=s))
    return cfgs


def _row_label(regime: str, method: str) -> tuple[str, str]:
    return ("Standard", "baseline") if regime == "standard" else (regime.upper(), DISPLAY_NAMES[method])


def performance_table(records: list[dict], tasks) -> list[list[str]]:
    """Rows regime x method, columns tasks, cells mean test F1 over seeds.

    ``n/a`` marks a cell with no successful run; ``*`` a cell where some
    seeds failed. Each non-standard regime gets an Avg row over its methods.
    """
    cells: dict[tuple, dict[str, list]] = {}
    order: list[tuple] = []
    for r in records:
        key = (r["regime"], r["method"])
        if key not in cells:
            cells[key] = {}
            order.append(key)
        cells[key].setdefault(r["task"], []).append(r)
    header = ["regime", "method"] + list(tasks)
    rows = [header]
    means: dict[tuple, dict[str, float]] = {}
    for key in order:
        row = list(_row_label(*key))
        means[key] = {}
        for t in tasks:
            runs = cells[key].get(t, [])
            ok = [r["f1"] for r in runs if r["status"] == "ok"]
            if not ok:
                row.append("n/a")
                continue
            means[key][t] = mean(ok)
            row.append(_fmt(means[key][t]) + ("*" if len(ok) < len(runs) else ""))
        rows.append(row)
        regime = key[0]
        last_of_regime = key is order[-1] or order[order.index(key) + 1][0] != regime
        if regime != "standard" and last_of_regime:
            avg = [regime.upper(), "Avg"]
            for t in tasks:
                vals = [means[k][t] for k in order if k[0] == regime and t in means[k]]
                avg.append(_fmt(mean(vals)) if vals else "n/a")
            rows.append(avg)
    return rows


def measured_cost_rows(records: list[dict]) -> list[list[str]]:
    """Measured mean xFP per batch for each regime x method, pooled over tasks and seeds."""
    acc: dict[tuple, list[float]] = {}
    for r in records:
        if r["status"] == "ok" and r["batches"]:
            acc.setdefault((r["regime"], r["method"]), []).append(r["xfp"] / r["batches"])
    rows = [["regime", "method", "xfp_per_batch"]]
    for key, vals in acc.items():
        rows.append(list(_row_label(*key)) + [_fmt(mean(vals))])
    return rows


def _write_tsv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter="\t", lineterminator="\n").writerows(rows)


def format_table(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def cmd_compare(base: RunConfig, methods, regimes=REGIMES, tasks=("ner",), seeds=range(5), out=None, plots: bool = True, steps: int | None = None) -> dict:
    """Run the grid and emit performance and cost tables.

    Failed runs are recorded and leave a marked gap; the tables are still
    written. ``steps`` pins S in the cost table (default: symbolic S).
    """
    out_dir = Path(out) if out else None
    records = []
    for cfg in compare_matrix(base, methods, regimes, tasks, list(seeds)):
        run_dir = out_dir / "runs" / cfg.config_hash if out_dir else None
        cfg = cfg.with_(out=str(run_dir) if run_dir else None)
        rec = {"task": cfg.task, "regime": cfg.effective_regime, "method": cfg.method, "seed": cfg.seed_init, "config_hash": cfg.config_hash, "run_dir": cfg.out}
        try:
            rep = run_train(cfg, plots=False).report
            rec.update(status="ok", f1=rep["test"].get("f1", float("nan")), xfp=rep["ledger"]["xfp"], batches=rep["events"]["batches"])
        except Exception as e:  # noqa: BLE001 - any run failure becomes a table gap
            log.warning("run %s failed: %s", cfg.config_hash, e)
            rec.update(error_record(e, "train"), status="error")
        records.append(rec)
    perf = performance_table(records, tasks)
    attack_methods = [m for m in methods if m != "standard"]
    cost = [["regime", "method", "FP", "BP", "xFP", "CRR"]] + [list(r) for r in cost_table(attack_methods, base.p_attack, steps)]
    measured = measured_cost_rows(records)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_tsv(perf, out_dir / "performance.tsv")
        _write_tsv(cost, out_dir / "cost.tsv")
        _write_tsv(measured, out_dir / "cost_measured.tsv")
        with open(out_dir / "runs.jsonl", "w", encoding="utf-8", newline="\n") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        if plots:
            from .plotting import cost_bars, performance_bars

            performance_bars(perf, out_dir / "performance.png")
            cost_bars(measured, out_dir / "cost.png")
    return {"records": records, "performance": perf, "cost": cost, "cost_measured": measured}

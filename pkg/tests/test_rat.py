import json

import numpy as np
import pytest

from conftest import tiny_model
from ratlab.adversarial import PerturbConfig
from ratlab.cost import CostLedger, expected_xfp, per_batch_xfp
from ratlab.data import SyntheticSpec, synthetic_task
from ratlab.models import ModelParams, batches, collate
from ratlab.rat import (
    SGD,
    EventLog,
    Gate,
    RatConfig,
    TrainingError,
    sample_event,
    standard_step,
    stream_rng,
    train,
    train_step,
)
from ratlab.tensor import Tensor

ALL = ["fgsm", "fgm", "pgd", "freelb", "smart"]


def cfg_for(method, eps=0.3):
    return PerturbConfig(method, eps, 1 if method in ("fgsm", "fgm") else 2)


@pytest.fixture(scope="module")
def small():
    return synthetic_task("ner", SyntheticSpec(n_train=96, n_dev=16, n_test=16, seed=1))


def test_sample_event_extremes():
    rng = np.random.default_rng(0)
    assert all(sample_event(rng, 0.0) == 0 for _ in range(1000))
    assert all(sample_event(rng, 1.0) == 1 for _ in range(1000))


def test_sample_event_binomial_bound():
    rng = np.random.default_rng(123)
    n = sum(sample_event(rng, 0.5) for _ in range(10_000))
    assert 4800 <= n <= 5200


def test_sample_event_consumes_one_draw():
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    sample_event(a, 0.3)
    b.random()
    assert a.random() == b.random()


def test_invalid_probability():
    with pytest.raises(ValueError):
        sample_event(np.random.default_rng(0), 1.5)
    with pytest.raises(ValueError):
        RatConfig(-0.1)


def test_streams_are_independent():
    assert stream_rng(0, "gate").random() != stream_rng(0, "data").random()
    assert stream_rng(3, "gate").random() == stream_rng(3, "gate").random()


def test_sgd_momentum_matches_manual(small):
    p = tiny_model(small)
    w0 = p["head.b"].values.copy()
    opt = SGD(0.1, 0.9)
    g1, g2 = np.full(w0.shape, 1.0), np.full(w0.shape, -0.5)
    for g in (g1, g2):
        for _, t in p:
            t.grad = np.zeros(t.shape)
        p["head.b"].grad = g
        opt.step(p)
    v2 = 0.9 * g1 + g2
    assert np.allclose(p["head.b"].values, w0 - 0.1 * g1 - 0.1 * v2, rtol=0, atol=1e-15)



def test_sgd_clips_global_norm(small):
    p = tiny_model(small)
    before = {n: t.values.copy() for n, t in p}
    rng = np.random.default_rng(1)
    grads = {n: rng.normal(size=t.shape) for n, t in p}
    for n, t in p:
        t.grad = grads[n]
    norm = np.sqrt(sum(np.sum(g**2) for g in grads.values()))
    SGD(0.5, clip_norm=1.0).step(p)
    moved = np.sqrt(sum(np.sum((before[n] - t.values) ** 2) for n, t in p))
    assert norm > 1 and moved == pytest.approx(0.5, rel=1e-12)


def test_sgd_clip_inactive_below_threshold(small):
    p1, p2 = tiny_model(small), tiny_model(small)
    for p in (p1, p2):
        for _, t in p:
            t.grad = np.full(t.shape, 1e-4)
    SGD(0.1).step(p1)
    SGD(0.1, clip_norm=10.0).step(p2)
    assert p1.equal(p2)

def test_event_zero_step_equals_standard_step(small):
    b = collate(small.train[:8], "ner")
    p1, p2 = tiny_model(small), tiny_model(small)
    standard_step(b, p1, SGD(0.1))
    rep = train_step(b, p2, RatConfig(0.0, 0, cfg_for("pgd")), None, gate=Gate(0.0, 0), opt=SGD(0.1), attack_rng=np.random.default_rng(0))
    assert rep.event == 0 and p1.equal(p2)


@pytest.mark.parametrize("method,steps,delta", [("fgm", 1, 2), ("fgsm", 1, 2), ("pgd", 3, 4), ("freelb", 3, 4), ("smart", 3, 4)])
def test_attacked_step_ledger_delta(method, steps, delta, small):
    b = collate(small.train[:8], "ner")
    L = CostLedger(10, 10)
    rep = train_step(b, tiny_model(small), RatConfig(1.0, 0, PerturbConfig(method, 0.3, steps)), L, gate=Gate(1.0, 0), opt=SGD(0.1), attack_rng=np.random.default_rng(0))
    assert rep.event == 1 and (rep.fp, rep.bp) == (delta, delta)
    assert L == CostLedger(10 + delta, 10 + delta)


def _run(data, method, p, regime, epochs=2, seed=0, **kw):
    params = ModelParams.init(tiny_model(data).config, stream_rng(seed, "init"))
    L = CostLedger()
    res = train(data, params, RatConfig(p, seed, cfg_for(method) if method else None), epochs, L, regime=regime, batch_size=16, lr=0.1, data_seed=seed, attack_seed=seed, evaluate_dev=False, **kw)
    return res, L


@pytest.mark.parametrize("method", ALL)
def test_reduction_identities(method, small):
    at, _ = _run(small, method, 0.5, "at")
    r1, _ = _run(small, method, 1.0, "rat")
    assert r1.params.equal(at.params)
    std, _ = _run(small, None, 0.5, "standard")
    r0, _ = _run(small, method, 0.0, "rat")
    assert r0.params.equal(std.params)


def test_ledger_equals_event_formula(small):
    for method in ALL:
        res, L = _run(small, method, 0.5, "rat")
        steps = cfg_for(method).steps
        assert L.xfp == sum(per_batch_xfp(method, steps, bool(e)) for e in res.log.events)
        assert len(res.log) == 2 * 6


def test_fgm_cost_binomial_bound():
    data = synthetic_task("ner", SyntheticSpec(n_train=800, n_dev=0, n_test=0, seed=2))
    res, L = _run(data, "fgm", 0.5, "rat", epochs=4, seed=4)
    n = len(res.log)
    assert n == 200
    assert 3 * 200 + 3 * 80 <= L.xfp <= 3 * 200 + 3 * 120


def test_expected_cost_simulation():
    rng = stream_rng(0, "gate")
    for method, steps in [("fgm", 1), ("pgd", 3), ("smart", 5)]:
        draws = [sample_event(rng, 0.5) for _ in range(10_000)]
        mean = np.mean([per_batch_xfp(method, steps, bool(e)) for e in draws])
        assert abs(mean - expected_xfp(method, steps, 0.5)) <= 0.02 * expected_xfp(method, steps, 0.5)


def test_event_log_replay_and_jsonl(tmp_path, small):
    a, _ = _run(small, "fgm", 0.5, "rat", seed=3)
    b, _ = _run(small, "fgm", 0.5, "rat", seed=3)
    assert a.log.events == b.log.events and a.params.equal(b.params)
    a.log.write_jsonl(tmp_path / "e.jsonl")
    lines = (tmp_path / "e.jsonl").read_text().splitlines()
    assert len(lines) == len(a.log)
    assert set(json.loads(lines[0])) == {"epoch", "batch", "event", "fp", "bp", "loss"}
    assert EventLog.read_jsonl(tmp_path / "e.jsonl").events == a.log.events


def test_gate_independence(small):
    """Changing p alters only which batches are attacked: states agree up to the first differing event."""
    task = "ner"

    def stepwise(p):
        params = ModelParams.init(tiny_model(small).config, stream_rng(0, "init"))
        gate, opt, arng = Gate(p, 7), SGD(0.1), stream_rng(0, "attack")
        order = stream_rng(0, "data").permutation(len(small.train))
        out = []
        for b in batches(small.train, 16, task, order):
            rep = train_step(b, params, RatConfig(p, 7, cfg_for("fgm")), None, gate=gate, opt=opt, attack_rng=arng)
            out.append((rep.event, params.flat().copy()))
        return out

    lo, hi = stepwise(0.3), stepwise(0.8)
    ev_lo, ev_hi = [e for e, _ in lo], [e for e, _ in hi]
    assert all(a <= b for a, b in zip(ev_lo, ev_hi))  # same uniforms, different threshold
    k = next((i for i, (a, b) in enumerate(zip(ev_lo, ev_hi)) if a != b), len(lo))
    for i in range(k):
        assert np.array_equal(lo[i][1], hi[i][1])


def test_events_redrawn_each_epoch(small):
    res, _ = _run(small, "fgm", 0.5, "rat", epochs=6)
    per_epoch = [tuple(r.event for r in res.log.records if r.epoch == e) for e in range(6)]
    assert len(set(per_epoch)) > 1


def test_history_has_dev_metrics(small):
    params = tiny_model(small)
    res = train(small, params, RatConfig(0.5, 0, cfg_for("fgm")), 2, batch_size=16, lr=0.1)
    assert [h["epoch"] for h in res.history] == [0, 1]
    assert "dev_f1" in res.history[0]


def _poisoned(data):
    p = tiny_model(data)
    tensors = dict(p.tensors)
    tensors["head.b"] = Tensor(np.full(p["head.b"].shape, np.nan), requires_grad=True)
    return ModelParams(p.config, tensors)


def test_divergence_keeps_partial_log(small):
    with pytest.raises(TrainingError) as e:
        train(small, _poisoned(small), RatConfig(0.0), 2, regime="standard", batch_size=16, evaluate_dev=False)
    assert len(e.value.log) == 1 and "diverged" in str(e.value)


def test_attack_failure_reports_batch(small):
    with pytest.raises(TrainingError, match="batch 0"):
        train(small, _poisoned(small), RatConfig(1.0, 0, cfg_for("pgd")), 1, regime="at", batch_size=16, evaluate_dev=False)


def test_regime_needs_attack(small):
    with pytest.raises(ValueError):
        train(small, tiny_model(small), RatConfig(0.5), 1, regime="rat")

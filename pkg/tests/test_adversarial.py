import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import tiny_model
from ratlab import tensor as T
from ratlab.adversarial import (
    AttackError,
    PerturbConfig,
    attack,
    clean_pass,
    freelb_attack,
    gen_fgm,
    gen_fgsm,
    objective_standard_plus_adv,
    pgd_attack,
    project,
    project_l2,
    sample_norms,
    smart_attack,
)
from ratlab.cost import CostLedger
from ratlab.models import Batch, ModelParams, collate, forward
from ratlab.tensor import Tensor

vecs = arrays(np.float64, st.integers(1, 8), elements=st.floats(-10, 10))


def test_fgsm_example():
    assert np.allclose(gen_fgsm(np.array([-0.2, 0.7, 0.0]), 0.01), [-0.01, 0.01, 0.0], atol=0, rtol=0)
    assert np.array_equal(gen_fgsm(np.zeros(3), 0.5), np.zeros(3))


def test_fgm_example():
    assert np.allclose(gen_fgm(np.array([3.0, 4.0]), 0.1), [0.06, 0.08], rtol=0, atol=1e-15)
    assert np.array_equal(gen_fgm(np.zeros(2), 0.1), np.zeros(2))


def test_project_examples():
    assert np.allclose(project_l2(np.array([0.3, 0.4]), 0.25), [0.15, 0.2])
    r = np.array([0.1, 0.1])
    assert np.array_equal(project_l2(r, 0.25), r)


@given(vecs, st.floats(0.01, 5))
def test_fgsm_linf_norm(g, eps):
    r = gen_fgsm(g, eps)
    assert set(np.unique(r)) <= {-eps, 0.0, eps}
    if np.any(g != 0):
        assert np.max(np.abs(r)) == eps


@given(vecs, st.floats(0.01, 5))
def test_fgm_l2_norm(g, eps):
    r = gen_fgm(g, eps)
    if np.linalg.norm(g) > 1e-6:
        assert abs(np.linalg.norm(r) - eps) <= 1e-12 * max(1.0, eps)


@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3)), elements=st.floats(-10, 10)), st.floats(0.01, 3), st.sampled_from(["l2", "linf"]))
def test_projection_idempotent_and_bounded(r, eps, norm):
    a = project(r, eps, norm)
    assert np.array_equal(project(a, eps, norm), a) or np.allclose(project(a, eps, norm), a, rtol=1e-15, atol=0)
    assert np.all(sample_norms(a, norm) <= eps * (1 + 1e-9))


def test_norms_are_per_sample():
    r = np.zeros((2, 3, 2))
    r[0, 0, 0] = 3.0
    r[1, 2, 1] = 0.5
    out = project_l2(r, 1.0)
    assert out[0, 0, 0] == 1.0 and out[1, 2, 1] == 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig("fgm", steps=2)
    with pytest.raises(ValueError):
        PerturbConfig("pgd", epsilon=0.1, step_size=0.2)
    with pytest.raises(ValueError):
        PerturbConfig("nope")
    assert PerturbConfig("pgd", 1.0, 4).alpha == 0.25
    assert PerturbConfig("smart").init_mode == "uniform" and PerturbConfig("pgd").init_mode == "zero"


def _setup(data, task, seed=0, n=4):
    p = tiny_model(data, seed=seed)
    return p, collate(data.train[seed * n : seed * n + n], task)


def test_fgm_equals_pgd_single_step(ner_data):
    for seed in range(5):
        p, b = _setup(ner_data, "ner", seed)
        c = clean_pass(b, p, live=False)
        r1 = attack(b, p, PerturbConfig("fgm", 0.4), c, live=False).r_final
        r2 = attack(b, p, PerturbConfig("pgd", 0.4, 1, step_size=0.4), c, live=False).r_final
        assert np.max(np.abs(r1 - r2)) <= 1e-12


def test_padding_never_perturbed(ner_data):
    p, b = _setup(ner_data, "ner")
    assert not b.mask.all()
    for m in ("fgsm", "fgm", "pgd", "freelb", "smart"):
        res = attack(b, p, PerturbConfig(m, 0.5, 1 if m in ("fgsm", "fgm") else 3), rng=np.random.default_rng(0), live=False)
        assert np.all(res.r_final[~b.mask] == 0), m


@pytest.mark.parametrize("method,norm", [("pgd", "l2"), ("pgd", "linf"), ("freelb", "l2"), ("smart", "l2"), ("smart", "linf")])
def test_every_step_in_ball(method, norm, ner_data):
    p, b = _setup(ner_data, "ner", 1)
    cfg = PerturbConfig(method, 0.3, 4, norm=norm)
    res = attack(b, p, cfg, rng=np.random.default_rng(2), live=False)
    assert len(res.trajectory) == 4
    for r in res.trajectory:
        assert np.all(sample_norms(r, norm) <= 0.3 * (1 + 1e-9))


@pytest.mark.parametrize("method,steps,fp", [("fgm", 1, 2), ("fgsm", 1, 2), ("pgd", 3, 4), ("freelb", 3, 4), ("smart", 3, 4), ("smart", 1, 2)])
def test_attack_pass_counts(method, steps, fp, ner_data):
    p, b = _setup(ner_data, "ner")
    L = CostLedger()
    attack(b, p, PerturbConfig(method, 0.3, steps), rng=np.random.default_rng(0), live=False)
    attack(b, p, PerturbConfig(method, 0.3, steps), ledger=L, rng=np.random.default_rng(0), live=False)
    assert L == CostLedger(fp, fp)


def test_pgd_ascent_mostly_increases(ner_data):
    ok = 0
    for seed in range(100):
        p = tiny_model(ner_data, seed=seed)
        b = collate(ner_data.train[(seed % 16) * 4 : (seed % 16) * 4 + 4], "ner")
        res = pgd_attack(b, p, PerturbConfig("pgd", 0.5, 4), live=False)
        ok += all(np.diff(res.per_step_losses) >= 0)
        T.new_graph()
    assert ok >= 80


def test_freelb_single_step_equals_pgd(ner_data):
    p, b = _setup(ner_data, "ner")
    a = pgd_attack(b, p, PerturbConfig("pgd", 0.3, 1), live=False)
    f = freelb_attack(b, p, PerturbConfig("freelb", 0.3, 1), live=False)
    assert a.adv_loss.item() == f.adv_loss.item()


def test_freelb_mean_of_step_losses(ner_data):
    p, b = _setup(ner_data, "ner")
    f = freelb_attack(b, p, PerturbConfig("freelb", 0.3, 3), live=False)
    assert abs(f.adv_loss.item() - np.mean(f.per_step_losses)) <= 1e-12


def test_freelb_constant_surface(ner_data):
    p, b = _setup(ner_data, "ner")
    tensors = dict(p.tensors)
    tensors["head.w"] = Tensor(np.zeros(p["head.w"].shape), requires_grad=True)
    flat = ModelParams(p.config, tensors)
    f = freelb_attack(b, flat, PerturbConfig("freelb", 0.3, 3), live=False)
    g = pgd_attack(b, flat, PerturbConfig("pgd", 0.3, 3), live=False)
    assert f.adv_loss.item() == pytest.approx(g.adv_loss.item(), abs=1e-15)


def test_freelb_gradient_is_mean_of_step_gradients(ner_data):
    p, b = _setup(ner_data, "ner")
    cfg = PerturbConfig("freelb", 0.3, 3)
    T.new_graph()
    c = clean_pass(b, p, live=False)
    res = freelb_attack(b, p, cfg, c, live=True)
    got = p.grads()
    expect = {k: np.zeros(v.shape) for k, v in p}
    for r in res.trajectory:
        q = p.copy()
        T.new_graph()
        T.backward(forward(b, q, Tensor(r)).loss)
        for k, v in q.grads().items():
            expect[k] += v / 3
    for k in expect:
        assert np.allclose(got[k], expect[k], rtol=1e-10, atol=1e-14), k


def test_pgd_gradient_from_final_step_only(ner_data):
    p, b = _setup(ner_data, "ner")
    T.new_graph()
    c = clean_pass(b, p, live=False)
    res = pgd_attack(b, p, PerturbConfig("pgd", 0.3, 3), c, live=True)
    q = p.copy()
    T.new_graph()
    T.backward(forward(b, q, Tensor(res.r_final)).loss)
    for k, v in q.grads().items():
        assert np.allclose(p.grads()[k], v, rtol=1e-12, atol=1e-15), k


def test_smart_zero_init_single_step_is_zero(ner_data):
    p, b = _setup(ner_data, "ner")
    c = clean_pass(b, p, live=False)
    res = smart_attack(b, p, PerturbConfig("smart", 0.3, 1, init="zero"), c.out.probs.values, c, live=False)
    assert abs(res.adv_loss.item()) <= 1e-12


def test_smart_requires_clean_probs(ner_data):
    p, b = _setup(ner_data, "ner")
    with pytest.raises(ValueError):
        smart_attack(b, p, PerturbConfig("smart", 0.3, 2), None)


def test_smart_linear_in_alpha(ner_data):
    p, b = _setup(ner_data, "ner")
    vals = []
    for a in (1.0, 2.0, 0.5):
        T.new_graph()
        res = attack(b, p, PerturbConfig("smart", 0.3, 2, alpha_reg=a), rng=np.random.default_rng(5), live=False)
        vals.append(res.adv_loss.item())
    assert abs(vals[1] - 2 * vals[0]) <= 1e-12 * max(1.0, vals[1])
    assert abs(vals[2] - 0.5 * vals[0]) <= 1e-12 * max(1.0, vals[0])


def test_smart_positive_on_random_models(ner_data):
    pos = 0
    for seed in range(100):
        p = tiny_model(ner_data, seed=seed)
        b = collate(ner_data.train[(seed % 16) * 4 : (seed % 16) * 4 + 4], "ner")
        res = attack(b, p, PerturbConfig("smart", 0.3, 2), rng=np.random.default_rng(seed), live=False)
        pos += res.adv_loss.item() > 0
        T.new_graph()
    assert pos >= 95


@pytest.mark.parametrize("task", ["ner", "re"])
def test_smart_ignores_labels(task, ner_data, re_data):
    data = ner_data if task == "ner" else re_data
    p, b = _setup(data, task, 2)
    rng = np.random.default_rng(0)
    shuffled = Batch(b.token_ids, b.mask, rng.permutation(b.labels.reshape(-1)).reshape(b.labels.shape), b.task)
    runs = []
    for batch in (b, shuffled):
        T.new_graph()
        runs.append(attack(batch, p, PerturbConfig("smart", 0.3, 3), rng=np.random.default_rng(9), live=False))
    assert all(np.array_equal(x, y) for x, y in zip(runs[0].trajectory, runs[1].trajectory))
    assert runs[0].adv_loss.item() == runs[1].adv_loss.item()


def test_attacks_are_repeatable(ner_data):
    p, b = _setup(ner_data, "ner")
    for m in ("fgm", "pgd", "freelb", "smart"):
        cfg = PerturbConfig(m, 0.3, 1 if m == "fgm" else 3)
        a = attack(b, p, cfg, rng=np.random.default_rng(1), live=False)
        c = attack(b, p, cfg, rng=np.random.default_rng(1), live=False)
        assert np.array_equal(a.r_final, c.r_final) and a.adv_loss.item() == c.adv_loss.item()


def test_fgm_direction_increases_loss(ner_data):
    up = 0
    for seed in range(200):
        p = tiny_model(ner_data, seed=seed)
        b = collate(ner_data.train[(seed % 16) * 4 : (seed % 16) * 4 + 4], "ner")
        T.new_graph()
        c = clean_pass(b, p, live=False)
        res = attack(b, p, PerturbConfig("fgm", 1e-3), c, live=False)
        up += res.adv_loss.item() >= c.out.loss.item()
    assert up >= 190


def test_objective_sums_terms(ner_data):
    p, b = _setup(ner_data, "ner")
    c = clean_pass(b, p, live=False)
    res = attack(b, p, PerturbConfig("fgm", 0.0), c, live=False)
    obj = objective_standard_plus_adv(c.out.loss, res, "fgm")
    assert obj.item() == 2 * c.out.loss.item()
    fl = attack(b, p, PerturbConfig("freelb", 0.3, 3), c, live=False)
    assert objective_standard_plus_adv(c.out.loss, fl, "freelb").item() == pytest.approx(c.out.loss.item() + np.mean(fl.per_step_losses), abs=1e-12)


def test_non_finite_loss_aborts_with_step(ner_data):
    p, b = _setup(ner_data, "ner")
    tensors = dict(p.tensors)
    tensors["head.b"] = Tensor(np.full(p["head.b"].shape, np.nan), requires_grad=True)
    bad = ModelParams(p.config, tensors)
    with pytest.raises(AttackError) as e:
        pgd_attack(b, bad, PerturbConfig("pgd", 0.3, 3), clean=clean_pass(b, p, live=False), live=False)
    assert e.value.step == 1

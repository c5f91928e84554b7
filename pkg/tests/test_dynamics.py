import math

import numpy as np
import pytest

from polres import dynamics, numkit
from polres.dynamics import (
    DynamicsModel,
    EnsembleModel,
    Normalizer,
    adapt,
    loss_continuous,
    loss_discrete,
    loss_grad,
    loss_hvp,
    predict_next,
    predict_next_stochastic,
    split_support_query,
    successor_probs,
)
from polres.envs import CartpoleState, GridState, Transition
from polres.numkit import NetArch


def cont_arch(state_dim=4, n_actions=2, hidden=(8,)):
    return NetArch(state_dim + n_actions, hidden, state_dim)


def disc_arch(hidden=(16,)):
    return NetArch(29, hidden, 25)


def make_cont_model(seed=0, hidden=(8,), normalizer=None):
    arch = cont_arch(hidden=hidden)
    return DynamicsModel("continuous", arch, numkit.net_init(arch, seed), normalizer)


def make_disc_model(seed=0, hidden=(16,)):
    arch = disc_arch(hidden)
    return DynamicsModel("discrete", arch, numkit.net_init(arch, seed))


def cont_transition(rng):
    s = CartpoleState(*rng.standard_normal(4))
    s2 = CartpoleState(*rng.standard_normal(4))
    return Transition(s=s, a=int(rng.integers(2)), s_next=s2, reward=1.0, done=False)


def disc_transition(rng):
    s = GridState(int(rng.integers(5)), int(rng.integers(5)))
    s2 = GridState(int(rng.integers(5)), int(rng.integers(5)))
    return Transition(s=s, a=int(rng.integers(4)), s_next=s2, reward=-0.01, done=False)


# --- losses ---


def test_loss_continuous_zero_for_exact_model():
    # zero params predict zero delta; make every transition a self-loop
    model = make_cont_model()
    model = DynamicsModel(model.kind, model.arch, np.zeros_like(model.params))
    s = CartpoleState(0.1, 0.2, 0.3, 0.4)
    batch = [Transition(s, 0, s, 1.0, False)]
    assert loss_continuous(model, batch) == 0.0


def test_loss_continuous_single_arithmetic():
    # 1-D state, 1 action: prediction 0.5 vs target delta 0.0 -> 0.25
    arch = NetArch(2, (), 1)
    model = DynamicsModel("continuous", arch, np.array([0.0, 0.0, 0.5]))
    s = np.array([1.0])
    batch = [Transition(s, 0, s, 0.0, False)]
    assert loss_continuous(model, batch) == pytest.approx(0.25, abs=1e-15)


def manual_mlp(arch, params, x):
    off = 0
    dims = (arch.input_dim, *arch.hidden, arch.output_dim)
    a = np.array(x, dtype=float)
    layers = list(zip(dims[:-1], dims[1:]))
    for li, (fi, fo) in enumerate(layers):
        w = np.array(params[off : off + fi * fo]).reshape(fo, fi)
        off += fi * fo
        b = np.array(params[off : off + fo])
        off += fo
        a = w @ a + b
        if li < len(layers) - 1:
            a = np.tanh(a) if arch.activation == "tanh" else np.maximum(a, 0)
    return a


def test_loss_continuous_matches_independent_recomputation():
    rng = np.random.default_rng(1)
    model = make_cont_model(seed=3)
    batch = [cont_transition(rng) for _ in range(9)]
    total = 0.0
    for t in batch:
        x = np.concatenate([t.s.as_array(), [1.0, 0.0] if t.a == 0 else [0.0, 1.0]])
        pred = manual_mlp(model.arch, model.params, x)
        target = t.s_next.as_array() - t.s.as_array()
        total += float(np.sum((pred - target) ** 2))
    assert loss_continuous(model, batch) == pytest.approx(total, abs=1e-12)


def test_loss_discrete_uniform_logits():
    arch = disc_arch(hidden=())
    model = DynamicsModel("discrete", arch, np.zeros(arch.param_count()))
    rng = np.random.default_rng(0)
    batch = [disc_transition(rng) for _ in range(5)]
    assert loss_discrete(model, batch) == pytest.approx(math.log(25), abs=1e-12)
    assert math.log(25) == pytest.approx(3.218876, abs=1e-6)


def test_loss_discrete_confident_model_near_zero():
    arch = disc_arch(hidden=())
    params = np.zeros(arch.param_count())
    t = disc_transition(np.random.default_rng(4))
    # raise the bias of the true successor's logit far above the rest
    params[arch.param_count() - 25 + t.s_next.cell] = 60.0
    model = DynamicsModel("discrete", arch, params)
    assert loss_discrete(model, [t]) < 1e-9


def test_loss_discrete_matches_independent_recomputation():
    rng = np.random.default_rng(2)
    model = make_disc_model(seed=5)
    batch = [disc_transition(rng) for _ in range(7)]
    total = 0.0
    for t in batch:
        x = np.zeros(29)
        x[t.s.cell] = 1.0
        x[25 + t.a] = 1.0
        logits = manual_mlp(model.arch, model.params, x)
        p = np.exp(logits) / np.exp(logits).sum()
        total += -math.log(p[t.s_next.cell])
    assert loss_discrete(model, batch) == pytest.approx(total / 7, abs=1e-12)


def test_loss_kind_mismatch():
    model = make_cont_model()
    batch = [disc_transition(np.random.default_rng(0))]
    with pytest.raises(ValueError):
        loss_continuous(model, batch)
    with pytest.raises(ValueError):
        loss_discrete(model, batch)


def fd_loss_grad(model, batch, step=1e-6):
    fd = np.zeros_like(model.params)
    for i in range(len(model.params)):
        up = model.params.copy()
        dn = model.params.copy()
        up[i] += step
        dn[i] -= step
        fd[i] = (
            dynamics.model_loss(DynamicsModel(model.kind, model.arch, up, model.normalizer), batch)
            - dynamics.model_loss(DynamicsModel(model.kind, model.arch, dn, model.normalizer), batch)
        ) / (2 * step)
    return fd


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    cont = make_cont_model(seed=1, hidden=(5,))
    cont_batch = [cont_transition(rng) for _ in range(6)]
    _, g = loss_grad(cont, cont_batch)
    fd = fd_loss_grad(cont, cont_batch)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4

    disc = make_disc_model(seed=2, hidden=(6,))
    disc_batch = [disc_transition(rng) for _ in range(6)]
    _, g = loss_grad(disc, disc_batch)
    fd = fd_loss_grad(disc, disc_batch)
    assert np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-6)) < 1e-4


def test_loss_hvp_matches_grad_finite_differences():
    rng = np.random.default_rng(8)
    for model, batch in [
        (make_cont_model(seed=4, hidden=(6,)), [cont_transition(rng) for _ in range(5)]),
        (make_disc_model(seed=6, hidden=(7,)), [disc_transition(rng) for _ in range(5)]),
    ]:
        v = rng.standard_normal(len(model.params))
        hvp = loss_hvp(model, batch, v)
        eps = 1e-6
        up = DynamicsModel(model.kind, model.arch, model.params + eps * v, model.normalizer)
        dn = DynamicsModel(model.kind, model.arch, model.params - eps * v, model.normalizer)
        _, gu = loss_grad(up, batch)
        _, gd = loss_grad(dn, batch)
        fd = (gu - gd) / (2 * eps)
        assert np.max(np.abs(hvp - fd)) < 1e-4 * max(1.0, np.max(np.abs(fd)))


def test_normalizer_affects_inputs_and_targets():
    rng = np.random.default_rng(5)
    # 6 input dims + 4 delta-target dims
    norm = Normalizer(
        mean=np.array([1.0, 0, 0, 0, 0, 0, 0.5, 0, 0, 0]),
        scale=np.array([2.0, 1, 1, 1, 1, 1, 3.0, 1, 1, 1]),
    )
    plain = make_cont_model(seed=7)
    scaled = DynamicsModel(plain.kind, plain.arch, plain.params, norm)
    batch = [cont_transition(rng)]
    assert loss_continuous(plain, batch) != loss_continuous(scaled, batch)
    # prediction denormalizes: zero net output maps to the delta mean
    zero = DynamicsModel(plain.kind, plain.arch, np.zeros_like(plain.params), norm)
    s = CartpoleState(0.0, 0.0, 0.0, 0.0)
    nxt = predict_next(zero, s, 0)
    assert np.allclose(nxt.as_array(), [0.5, 0, 0, 0], atol=1e-15)


# --- adapt ---


def test_adapt_alpha_zero_keeps_params():
    rng = np.random.default_rng(0)
    model = make_disc_model()
    out = adapt(model, [disc_transition(rng) for _ in range(4)], alpha=0.0, steps=3)
    assert np.array_equal(out.params, model.params)


def test_adapt_single_step_equals_sgd():
    rng = np.random.default_rng(1)
    model = make_cont_model(seed=9)
    batch = [cont_transition(rng) for _ in range(5)]
    _, g = loss_grad(model, batch)
    want = numkit.sgd_step(model.params, g, 1e-3)
    got = adapt(model, batch, alpha=1e-3, steps=1)
    assert np.array_equal(got.params, want)


def test_adapt_does_not_mutate_input():
    rng = np.random.default_rng(2)
    model = make_cont_model(seed=10)
    before = model.params.copy()
    adapt(model, [cont_transition(rng) for _ in range(5)], alpha=1e-2, steps=5)
    assert np.array_equal(model.params, before)


def test_adapt_reduces_loss_95_of_100():
    rng = np.random.default_rng(3)
    wins = 0
    for trial in range(100):
        model = make_cont_model(seed=trial, hidden=(6,))
        batch = [cont_transition(rng) for _ in range(8)]
        adapted = adapt(model, batch, alpha=1e-3, steps=1)
        if loss_continuous(adapted, batch) < loss_continuous(model, batch):
            wins += 1
    assert wins >= 95


# --- prediction ---


def test_predict_next_zero_params_identity():
    model = make_cont_model()
    model = DynamicsModel(model.kind, model.arch, np.zeros_like(model.params))
    s = CartpoleState(0.1, -0.2, 0.02, 0.3)
    nxt = predict_next(model, s, 1)
    assert nxt == s


def test_predict_next_deterministic_without_rng():
    model = make_disc_model(seed=11)
    s = GridState(1, 2)
    assert predict_next(model, s, 0) == predict_next(model, s, 0)


def test_predict_next_categorical_uniform_frequencies():
    arch = disc_arch(hidden=())
    model = DynamicsModel("discrete", arch, np.zeros(arch.param_count()))
    rng = np.random.default_rng(12)
    n = 10**5
    counts = np.zeros(25)
    s = GridState(2, 2)
    for _ in range(n):
        nxt = predict_next(model, s, 0, rng)
        counts[nxt.cell] += 1
    p = 1.0 / 25
    sigma = math.sqrt(p * (1 - p) / n)
    assert np.max(np.abs(counts / n - p)) < 4 * sigma


def test_softmax_sums_to_one():
    rng = np.random.default_rng(13)
    model = make_disc_model(seed=13)
    for _ in range(200):
        s = GridState(int(rng.integers(5)), int(rng.integers(5)))
        probs = successor_probs(model, s, int(rng.integers(4)))
        assert abs(probs.sum() - 1.0) < 1e-9


def test_ensemble_identical_members_deterministic():
    m = make_cont_model(seed=14)
    ens = EnsembleModel(members=(m, m, m))
    s = CartpoleState(0.0, 0.0, 0.0, 0.0)
    rng = np.random.default_rng(0)
    a = predict_next_stochastic(ens, s, 1, rng)
    b = predict_next(m, s, 1)
    assert np.allclose(a.as_array(), b.as_array(), atol=1e-15)


def test_ensemble_mean_std_monte_carlo():
    # two 1-D members with deltas 0 and 1: mean 0.5, population std 0.5
    arch = NetArch(2, (), 1)
    zero = DynamicsModel("continuous", arch, np.zeros(3))
    one = DynamicsModel("continuous", arch, np.array([0.0, 0.0, 1.0]))
    ens = EnsembleModel(members=(zero, one))
    rng = np.random.default_rng(15)
    draws = np.array(
        [predict_next_stochastic(ens, np.array([0.0]), 0, rng)[0] for _ in range(10**5)]
    )
    n = len(draws)
    assert abs(draws.mean() - 0.5) < 3 * 0.5 / math.sqrt(n)
    assert abs(draws.std() - 0.5) < 0.01


def test_ensemble_seeded_reproducible():
    m1 = make_cont_model(seed=1)
    m2 = make_cont_model(seed=2)
    ens = EnsembleModel(members=(m1, m2))
    s = CartpoleState(0.1, 0.0, 0.0, 0.0)
    a = predict_next_stochastic(ens, s, 0, np.random.default_rng(5))
    b = predict_next_stochastic(ens, s, 0, np.random.default_rng(5))
    assert a == b


def test_ensemble_rejects_discrete():
    m = make_disc_model()
    ens = EnsembleModel(members=(m, m))
    with pytest.raises(ValueError):
        predict_next_stochastic(ens, GridState(0, 0), 0, np.random.default_rng(0))


# --- split ---


def test_split_partition_when_exact():
    rng = np.random.default_rng(16)
    batch = [disc_transition(rng) for _ in range(10)]
    split = split_support_query(batch, 6, 4, np.random.default_rng(0))
    assert len(split.support) == 6 and len(split.query) == 4
    all_ids = sorted(id(t) for t in split.support + split.query)
    assert all_ids == sorted(id(t) for t in batch)


def test_split_disjoint_100_cases():
    rng = np.random.default_rng(17)
    batch = [disc_transition(rng) for _ in range(20)]
    for seed in range(100):
        split = split_support_query(batch, 5, 5, np.random.default_rng(seed))
        support_ids = {id(t) for t in split.support}
        assert not support_ids & {id(t) for t in split.query}


def test_split_seeded_identical():
    rng = np.random.default_rng(18)
    batch = [cont_transition(rng) for _ in range(12)]
    a = split_support_query(batch, 4, 4, np.random.default_rng(7))
    b = split_support_query(batch, 4, 4, np.random.default_rng(7))
    assert a == b


def test_split_insufficient_data():
    rng = np.random.default_rng(19)
    batch = [disc_transition(rng) for _ in range(3)]
    with pytest.raises(ValueError):
        split_support_query(batch, 2, 2, np.random.default_rng(0))


# --- checkpoint ---


def test_checkpoint_round_trip_bit_exact(tmp_path):
    norm = Normalizer(
        mean=np.array([0.1, -0.2, 1e-17, 0.0, 0.0, 3.7, 0.01, -0.5, 1e-9, 2.2]),
        scale=np.array([1.0, 2.0, 0.003, 1.0, 1.0, 9.99, 0.02, 1.1, 0.004, 5.0]),
    )
    model = make_cont_model(seed=20, normalizer=norm)
    path = tmp_path / "model.json"
    dynamics.save_checkpoint(model, path)
    loaded = dynamics.load_checkpoint(path)
    assert loaded.kind == model.kind
    assert loaded.arch == model.arch
    assert np.array_equal(loaded.params, model.params)
    assert np.array_equal(loaded.normalizer.mean, model.normalizer.mean)
    assert np.array_equal(loaded.normalizer.scale, model.normalizer.scale)
    # a second save is byte-identical
    path2 = tmp_path / "model2.json"
    dynamics.save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_discrete_null_normalizer(tmp_path):
    model = make_disc_model(seed=21)
    path = tmp_path / "d.json"
    dynamics.save_checkpoint(model, path)
    assert dynamics.load_checkpoint(path).normalizer is None


# --- learned model fidelity on a known linear system ---


def test_trained_model_reproduces_linear_system():
    # s' = A s + c_a, two actions; the fitted model must predict one-step
    # truth within 1e-2 RMSE on held-out states.
    A = np.array([[0.9, 0.1], [-0.05, 0.95]])
    shifts = {0: np.array([0.1, 0.0]), 1: np.array([-0.1, 0.05])}
    rng = np.random.default_rng(22)

    def make_batch(n):
        out = []
        for _ in range(n):
            s = rng.standard_normal(2)
            a = int(rng.integers(2))
            out.append(Transition(s, a, A @ s + shifts[a], 0.0, False))
        return out

    train = make_batch(2000)
    arch = NetArch(4, (32, 32), 2)
    model = DynamicsModel("continuous", arch, numkit.net_init(arch, 0))
    state = numkit.adam_init(arch.param_count())
    params = model.params
    for _ in range(400):
        model = DynamicsModel("continuous", arch, params)
        _, g = loss_grad(model, train)
        state, params = numkit.adam_step(state, params, g / len(train), lr=0.01)
    model = DynamicsModel("continuous", arch, params)

    test = make_batch(300)
    errs = []
    for t in test:
        pred = predict_next(model, t.s, t.a)
        errs.append(np.sum((pred - t.s_next) ** 2))
    rmse = math.sqrt(np.mean(errs))
    assert rmse <= 1e-2, f"one-step RMSE {rmse}"

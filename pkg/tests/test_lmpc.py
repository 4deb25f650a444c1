import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualtray.lmpc import (
    ACT_DIM,
    OBS_DIM,
    LmpcConfig,
    NanGradient,
    ObsScales,
    PolicyNet,
    PpoHyper,
    PsiConfig,
    RewardParams,
    RolloutBuffers,
    Transition,
    ValueNet,
    apply_delta,
    gae,
    load_policy,
    logit,
    object_grid,
    observe,
    ppo_loss,
    ppo_update,
    project,
    reward,
    save_policy,
    sigmoid,
    train,
)

CFG = PsiConfig()


# reparameterisation


def test_logit_sigmoid_round_trip():
    r = np.concatenate([np.linspace(1e-6, 1 - 1e-6, 10001), [1e-6, 1 - 1e-6]])
    assert np.max(np.abs(sigmoid(logit(r)) - r)) < 1e-10
    eta = np.linspace(-13.0, 13.0, 1001)
    assert np.max(np.abs(logit(sigmoid(eta)) - eta)) < 1e-6  # conditioning grows like 1/r(1-r)


def test_apply_delta_examples():
    psi = CFG.initial()
    assert np.allclose(apply_delta(psi, np.zeros(ACT_DIM)), psi, rtol=0, atol=1e-10)
    out = apply_delta(psi, np.full(ACT_DIM, math.log(3.0)), PsiConfig(delta_eta_max=2.0))
    assert np.allclose(out / CFG.upper, 0.75, atol=1e-12)


def test_apply_delta_clamps_step():
    psi = CFG.initial()
    a = apply_delta(psi, np.full(ACT_DIM, 100.0))
    b = apply_delta(psi, np.full(ACT_DIM, CFG.delta_eta_max))
    assert np.array_equal(a, b)


def test_asymptote_never_reached():
    psi = CFG.initial()
    for _ in range(200):
        psi = apply_delta(psi, np.full(ACT_DIM, 10.0))
    assert np.all(psi < CFG.upper) and np.all(psi > 0)
    for _ in range(400):
        psi = apply_delta(psi, np.full(ACT_DIM, -10.0))
    assert np.all(psi > 0)


@settings(max_examples=200)
@given(st.lists(st.floats(0.01, 0.99), min_size=5, max_size=5), st.lists(st.floats(-5, 5), min_size=5, max_size=5))
def test_apply_delta_interior_and_projected(r, d):
    psi = project(np.asarray(r) * CFG.upper)
    out = apply_delta(psi, d)
    assert np.all(out > 0) and np.all(out < CFG.upper)
    assert out[2] >= out[1]


def test_apply_delta_rejects_boundary():
    with pytest.raises(ValueError):
        apply_delta(CFG.upper, np.zeros(ACT_DIM))
    with pytest.raises(ValueError):
        PsiConfig(psi_max=(1.0, 1.0, 0.5, 0.1, 5.0))


# reward and observation


def test_reward_examples():
    p = RewardParams()
    z = np.zeros(2)
    assert reward(z, z, z, z, z, p) == pytest.approx(p.w_p + p.w_v, abs=1e-15)
    assert reward([1e3, 0], z, z, z, [0.01, -0.02], p) == pytest.approx(-0.03, abs=1e-15)
    r = reward([p.sigma_p, 0.0], z, z, z, z, p)
    assert r == pytest.approx(math.exp(-0.5) * (p.w_p + p.w_v), abs=1e-15)


def test_reward_argmax_by_grid():
    z = np.zeros(2)
    axis = np.linspace(-0.1, 0.1, 21)
    best, arg = -np.inf, None
    for a in axis:
        for b in axis:
            for c in (-0.01, 0.0, 0.01):
                r = reward([a, 0.0], [0.0, 0.0], [b, 0.0], z, [c, 0.0])
                if r > best:
                    best, arg = r, (a, b, c)
    assert arg == (0.0, 0.0, 0.0)


def test_observe_examples():
    r = np.full(ACT_DIM, 0.5)
    o = observe(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), r, 0.0)
    assert o.shape == (OBS_DIM,)
    assert np.array_equal(o[:8], np.zeros(8)) and np.array_equal(o[8:13], r)
    args = (np.array([0.02, -0.01]), np.array([0.1, 0.05]), np.array([0.1, 0.2]), np.array([0.01, 0.0]), r, 1.0)
    a = observe(*args)
    b = observe(*args, scales=ObsScales(position=0.2, velocity=0.2, tilt=1.2, du=0.02))
    assert np.allclose(b[:8], 0.5 * a[:8], rtol=1e-15) and np.array_equal(b[8:], a[8:])


# networks and serialisation


def test_policy_outputs_bounded_and_finite():
    torch.manual_seed(0)
    pol = PolicyNet(delta_eta_max=0.5)
    with torch.no_grad():
        pol.net[-1].weight.mul_(1e4)  # force saturation
        out = pol(torch.randn(100, OBS_DIM, dtype=torch.float64) * 100)
    assert torch.isfinite(out).all() and out.abs().max() <= 0.5


def test_policy_file_round_trip(tmp_path):
    torch.manual_seed(1)
    pol = PolicyNet(log_std=-0.7)
    path = tmp_path / "p.bin"
    save_policy(pol, path)
    raw = path.read_bytes()
    assert raw[:4] == b"LMPC"
    back = load_policy(path)
    x = torch.randn(20, OBS_DIM, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(pol(x), back(x))
    assert torch.equal(pol.log_std, back.log_std)
    assert back.layer_dims() == [OBS_DIM, 64, 64, ACT_DIM]
    # first weight matrix is stored row-major right after the header
    w0 = np.frombuffer(raw, "<f8", 64 * OBS_DIM, 12 + 16).reshape(64, OBS_DIM)
    assert np.array_equal(w0, pol.net[0].weight.detach().numpy())


def test_policy_file_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"XXXX" + bytes(16))
    with pytest.raises(ValueError):
        load_policy(path)


# buffers and advantages


def tr(i, done=False):
    return Transition(np.full(OBS_DIM, float(i)), np.zeros(ACT_DIM), 0.0, float(i), 0.0, done)


def test_buffers_sparse_subsequence_and_weights():
    buf = RolloutBuffers(capacity=120, S=50)
    for i in range(120):
        buf.add(tr(i))
    assert [t.reward for t in buf.sparse] == [0.0, 50.0, 100.0]
    ids = [id(t) for t in buf.dense]
    assert all(id(t) in ids for t in buf.sparse)
    with pytest.raises(OverflowError):
        buf.add(tr(0))
    buf.roll()
    for i in range(10):
        buf.add(tr(i))
    items, w = buf.batch()
    assert len(items) == 13 and np.array_equal(w[-3:], [50.0] * 3) and np.all(w[:10] == 1.0)


def test_gae_matches_direct_sum():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=30), rng.normal(size=30)
    last, g, lam = 0.4, 0.99, 0.95
    adv, ret = gae(r, v, last, [False] * 30, g, lam)
    vn = np.append(v, last)
    delta = r + g * vn[1:] - v
    direct = np.array([sum((g * lam) ** (j - t) * delta[j] for j in range(t, 30)) for t in range(30)])
    assert np.allclose(adv, direct, atol=1e-12)
    assert np.allclose(ret, adv + v)
    # a terminal step cuts bootstrapping
    adv2, _ = gae([1.0], [0.25], 100.0, [True])
    assert adv2[0] == pytest.approx(0.75)


# PPO


def batch(n, adv=0.0, ret=0.0, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Transition(rng.normal(size=OBS_DIM), rng.normal(size=ACT_DIM) * 0.1, 0.0, 0.0, 0.0, False, adv, ret)
        for _ in range(n)
    ]


def with_logp(policy, items, shift=0.0):
    obs = torch.tensor(np.stack([t.obs for t in items]))
    act = torch.tensor(np.stack([t.action for t in items]))
    with torch.no_grad():
        logp = policy.distribution(obs).log_prob(act).sum(-1).numpy()
    for t, lp in zip(items, logp):
        t.logp = float(lp) + shift


def test_zero_advantage_only_entropy_drifts():
    torch.manual_seed(0)
    pol, val = PolicyNet(), ValueNet()
    items = batch(64)
    with_logp(pol, items)
    hyper = PpoHyper(epochs=3, minibatch=64)
    lr = 3e-4
    opt = torch.optim.SGD(list(pol.parameters()) + list(val.parameters()), lr=lr)
    before = {k: v.clone() for k, v in pol.state_dict().items()}
    ppo_update(pol, val, opt, items, np.ones(64), hyper, torch.Generator().manual_seed(0))
    for k, v in pol.state_dict().items():
        if k == "log_std":
            # d(entropy)/d(log_std) = 1 per dimension
            assert torch.allclose(v - before[k], torch.full_like(v, hyper.beta * lr * hyper.epochs), atol=1e-15)
        else:
            assert torch.equal(v, before[k])


def test_clipped_branch_gradient():
    torch.manual_seed(0)
    pol, val = PolicyNet(), ValueNet()
    items = batch(16, adv=1.0)
    hyper = PpoHyper(beta=0.0, c_v=0.0)

    def grads(shift):
        with_logp(pol, items, shift)
        obs = torch.tensor(np.stack([t.obs for t in items]))
        act = torch.tensor(np.stack([t.action for t in items]))
        lp = torch.tensor([t.logp for t in items], dtype=torch.float64)
        one = torch.ones(len(items), dtype=torch.float64)
        pol.zero_grad()
        loss, _ = ppo_loss(pol, val, obs, act, lp, one, one * 0, one, hyper)
        loss.backward()
        return torch.cat([p.grad.reshape(-1) for p in pol.parameters()]), float(loss.detach())

    g, loss = grads(-math.log(1.5))  # ratio 1.5 > 1 + clip
    assert torch.all(g == 0) and loss == pytest.approx(-1.2, abs=1e-12)
    g, loss = grads(-math.log(1.1))  # inside the trust region
    assert torch.any(g != 0) and loss == pytest.approx(-1.1, abs=1e-12)


def test_value_regression_on_constant_returns():
    torch.manual_seed(0)
    pol, val = PolicyNet(), ValueNet()
    items = batch(32, ret=0.7)
    with_logp(pol, items)
    opt = torch.optim.Adam(val.parameters(), lr=1e-2)
    ppo_update(pol, val, opt, items, np.ones(32), PpoHyper(epochs=200, minibatch=32), torch.Generator())
    with torch.no_grad():
        out = val(torch.tensor(np.stack([t.obs for t in items])))
    assert torch.max(torch.abs(out - 0.7)) < 1e-2


def test_nan_gradient_restores_networks():
    torch.manual_seed(0)
    pol, val = PolicyNet(), ValueNet()
    items = batch(8, adv=1.0, ret=float("nan"))
    with_logp(pol, items)
    before = {k: v.clone() for k, v in pol.state_dict().items()}
    opt = torch.optim.Adam(list(pol.parameters()) + list(val.parameters()))
    with pytest.raises(NanGradient):
        ppo_update(pol, val, opt, items, np.ones(8), PpoHyper(), torch.Generator())
    for k, v in pol.state_dict().items():
        assert torch.equal(v, before[k])
    with pytest.raises(ValueError):
        ppo_update(pol, val, opt, [], np.ones(0), PpoHyper(), torch.Generator())


# training


def test_object_grid():
    grid = object_grid()
    assert len(grid) == 18 and len(set(grid)) == 18


def test_training_is_deterministic_and_interior():
    lcfg = LmpcConfig(episodes=2, envs=2, steps=60, act_every=10, hyper=replace(PpoHyper(), epochs=2))
    a, b = train(lcfg), train(lcfg)
    assert a.curve == b.curve
    assert len(a.curve) == 2
    assert 0.0 < a.psi_min_margin <= 0.5

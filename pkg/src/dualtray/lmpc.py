"""Learned dynamics-parameter adaptation (LMPC).

A PPO policy nudges the physical parameters ``psi`` of the nominal model in
logit space; the MPC plans with ``psi_max * sigmoid(eta)`` so the realised
parameters can never leave ``(0, psi_max)``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .loop import ClosedLoop
from .nmpc import MpcSpec
from .nominal import NominalParams
from .plant import ObjectConfig, Shape, Tier

PSI_NAMES = ("mass_hat", "mu_c_hat", "mu_s_hat", "v_s_hat", "viscous_hat")
OBS_DIM = 14
ACT_DIM = 5
MAGIC = b"LMPC"
FORMAT_VERSION = 1


class NanGradient(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# parameter reparameterisation


@dataclass(frozen=True)
class PsiConfig:
    psi_max: tuple[float, ...] = (5.0, 1.0, 1.0, 0.1, 5.0)
    delta_eta_max: float = 0.5
    psi_init: tuple[float, ...] | None = None  # None = centred, r = 0.5

    def __post_init__(self) -> None:
        if len(self.psi_max) != ACT_DIM or min(self.psi_max) <= 0:
            raise ValueError("psi_max must hold five positive bounds")
        if self.psi_max[2] < self.psi_max[1]:
            raise ValueError("the static friction bound must not be below the Coulomb bound")
        if self.delta_eta_max <= 0:
            raise ValueError("delta_eta_max must be positive")

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.psi_max, dtype=float)

    def initial(self) -> np.ndarray:
        if self.psi_init is None:
            return project(0.5 * self.upper)
        psi = np.asarray(self.psi_init, dtype=float)
        if np.any(psi <= 0) or np.any(psi >= self.upper):
            raise ValueError("initial psi must lie strictly inside (0, psi_max)")
        return project(psi)


def sigmoid(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logit(r):
    r = np.asarray(r, dtype=float)
    return np.log(r) - np.log1p(-r)


def project(psi: np.ndarray) -> np.ndarray:
    """Static friction is never below Coulomb friction."""
    psi = np.array(psi, dtype=float)
    psi[2] = max(psi[2], psi[1])
    return psi


def apply_delta(psi, delta_eta, cfg: PsiConfig = PsiConfig()) -> np.ndarray:
    """One bounded step in logit space; the result stays strictly inside."""
    r = np.asarray(psi, dtype=float) / cfg.upper
    if np.any(r <= 0) or np.any(r >= 1):
        raise ValueError("psi must lie strictly inside (0, psi_max)")
    d = np.clip(np.asarray(delta_eta, dtype=float), -cfg.delta_eta_max, cfg.delta_eta_max)
    out = cfg.upper * sigmoid(logit(r) + d)
    # sigmoid saturates to exactly 1.0 in floating point far out; keep it open
    out = np.minimum(out, np.nextafter(cfg.upper, 0.0))
    out = np.maximum(out, np.finfo(float).tiny)
    return project(out)


def params_from_psi(psi, cfg: ObjectConfig, servo_omega: float = 25.0) -> NominalParams:
    """Nominal model for a psi vector; the shape (rolling geometry) is known."""
    m, mu_c, mu_s, v_s, visc = map(float, psi)
    return NominalParams(
        mass_hat=m,
        mu_hat=mu_c,
        mu_s_hat=max(mu_s, mu_c),
        v_s_hat=v_s,
        viscous_hat=visc,
        servo_omega=servo_omega,
        inertia_factor=cfg.inertia_factor,
        rolling_axes=cfg.rolling_axes,
    )


# ---------------------------------------------------------------------------
# reward and observation


@dataclass(frozen=True)
class RewardParams:
    w_p: float = 1.0
    w_v: float = 0.5
    sigma_p: float = 0.05  # [m]
    sigma_v: float = 0.05  # [m/s]

    def __post_init__(self) -> None:
        if min(self.w_p, self.w_v, self.sigma_p, self.sigma_v) <= 0:
            raise ValueError("reward parameters must be positive")


def reward(p, p_ref, v, v_ref, du, params: RewardParams = RewardParams()) -> float:
    ep = np.asarray(p, dtype=float) - np.asarray(p_ref, dtype=float)
    ev = np.asarray(v, dtype=float) - np.asarray(v_ref, dtype=float)
    kp = math.exp(-float(ep @ ep) / (2.0 * params.sigma_p**2))
    kv = math.exp(-float(ev @ ev) / (2.0 * params.sigma_v**2))
    return kp * (params.w_p + params.w_v * kv) - float(np.sum(np.abs(du)))


@dataclass(frozen=True)
class ObsScales:
    position: float = 0.1  # [m]
    velocity: float = 0.1  # [m/s]
    tilt: float = 0.6  # [rad]
    du: float = 0.01  # [rad / step]


def observe(p_err, v, tilt, du, r, contact: float, scales: ObsScales = ObsScales()) -> np.ndarray:
    """Normalised 14-vector of tray-frame quantities."""
    return np.concatenate(
        [
            np.asarray(p_err, dtype=float) / scales.position,
            np.asarray(v, dtype=float) / scales.velocity,
            np.asarray(tilt, dtype=float) / scales.tilt,
            np.asarray(du, dtype=float) / scales.du,
            np.asarray(r, dtype=float),
            [float(contact)],
        ]
    )


# ---------------------------------------------------------------------------
# networks


def _mlp(sizes) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2:
            layers.append(nn.Tanh())
    return nn.Sequential(*layers)


class PolicyNet(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM, width: int = 64,
                 delta_eta_max: float = 0.5, log_std: float = -1.0) -> None:
        super().__init__()
        self.net = _mlp([obs_dim, width, width, act_dim])
        self.log_std = nn.Parameter(torch.full((act_dim,), float(log_std), dtype=torch.float64))
        self.delta_eta_max = float(delta_eta_max)
        self.double()
        # small last layer: start close to "leave psi alone"
        with torch.no_grad():
            self.net[-1].weight.mul_(0.01)
            self.net[-1].bias.zero_()

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return torch.clamp(self.net(obs), -self.delta_eta_max, self.delta_eta_max)

    def distribution(self, obs: torch.Tensor) -> torch.distributions.Normal:
        return torch.distributions.Normal(self(obs), self.log_std.exp())

    def layer_dims(self) -> list[int]:
        lin = [m for m in self.net if isinstance(m, nn.Linear)]
        return [lin[0].in_features] + [m.out_features for m in lin]


class ValueNet(nn.Module):
    def __init__(self, obs_dim: int = OBS_DIM, width: int = 64) -> None:
        super().__init__()
        self.net = _mlp([obs_dim, width, width, 1])
        self.double()

    def forward(self, obs: torch.Tensor) -> torch.Tensor:
        return self.net(obs).squeeze(-1)


def save_policy(policy: PolicyNet, path: str | Path) -> None:
    """Binary layout: magic, version, layer count, dims, then per layer the
    row-major weights and biases, then log-std and the step bound; all
    numbers little-endian (uint32 header, float64 payload)."""
    dims = policy.layer_dims()
    lin = [m for m in policy.net if isinstance(m, nn.Linear)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for m in lin:
            fh.write(m.weight.detach().numpy().astype("<f8").tobytes(order="C"))
            fh.write(m.bias.detach().numpy().astype("<f8").tobytes())
        fh.write(policy.log_std.detach().numpy().astype("<f8").tobytes())
        fh.write(struct.pack("<d", policy.delta_eta_max))


def load_policy(path: str | Path) -> PolicyNet:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError("not an LMPC policy file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported policy format version {version}")
    off = 12
    dims = list(struct.unpack_from(f"<{n}I", data, off))
    off += 4 * n
    if len(dims) != 4:
        raise ValueError("expected a two-hidden-layer policy")
    arrays = []
    for a, b in zip(dims[:-1], dims[1:]):
        W = np.frombuffer(data, "<f8", a * b, off).reshape(b, a)
        off += 8 * a * b
        bias = np.frombuffer(data, "<f8", b, off)
        off += 8 * b
        arrays.append((W, bias))
    log_std = np.frombuffer(data, "<f8", dims[-1], off)
    off += 8 * dims[-1]
    (dmax,) = struct.unpack_from("<d", data, off)
    policy = PolicyNet(dims[0], dims[-1], dims[1], dmax)
    lin = [m for m in policy.net if isinstance(m, nn.Linear)]
    with torch.no_grad():
        for m, (W, bias) in zip(lin, arrays):
            m.weight.copy_(torch.from_numpy(W.copy()))
            m.bias.copy_(torch.from_numpy(bias.copy()))
        policy.log_std.copy_(torch.from_numpy(log_std.copy()))
    return policy


# ---------------------------------------------------------------------------
# buffers and PPO


@dataclass
class Transition:
    obs: np.ndarray
    action: np.ndarray
    logp: float
    reward: float
    value: float
    done: bool = False
    advantage: float = 0.0
    ret: float = 0.0


@dataclass
class RolloutBuffers:
    """Dense (every decision) and sparse (1 in ``S``) experience."""

    capacity: int
    S: int = 50
    dense: list[Transition] = field(default_factory=list)
    sparse: list[Transition] = field(default_factory=list)
    carried: list[Transition] = field(default_factory=list)  # sparse from the previous update
    _count: int = 0

    def add(self, tr: Transition) -> None:
        if len(self.dense) >= self.capacity:
            raise OverflowError("dense buffer full")
        self.dense.append(tr)
        if self._count % self.S == 0:
            self.sparse.append(tr)
        self._count += 1

    def batch(self) -> tuple[list[Transition], np.ndarray]:
        """Dense samples plus last update's sparse ones, weighted by ``S``."""
        items = self.dense + self.carried
        w = np.concatenate([np.ones(len(self.dense)), float(self.S) * np.ones(len(self.carried))])
        return items, w

    def roll(self) -> None:
        """After an update: keep this round's sparse samples for one more."""
        self.carried = self.sparse
        self.sparse = []
        self.dense = []
        self._count = 0


def gae(rewards, values, last_value: float, dones, gamma: float = 0.99, lam: float = 0.95):
    """Generalised advantage estimates and returns for one trajectory."""
    n = len(rewards)
    adv = np.zeros(n)
    last = 0.0
    for t in reversed(range(n)):
        nonterminal = 0.0 if dones[t] else 1.0
        nxt = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + np.asarray(values)


@dataclass(frozen=True)
class PpoHyper:
    lr: float = 3e-4
    c_v: float = 0.5
    beta: float = 0.01  # entropy coefficient
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 10
    minibatch: int = 64
    max_grad_norm: float = 0.5


def ppo_loss(policy, value, obs, act, logp_old, adv, ret, weight, hyper: PpoHyper):
    dist = policy.distribution(obs)
    logp = dist.log_prob(act).sum(-1)
    ratio = torch.exp(logp - logp_old)
    surr = torch.min(ratio * adv, torch.clamp(ratio, 1 - hyper.clip, 1 + hyper.clip) * adv)
    wsum = weight.sum()
    pol = -(weight * surr).sum() / wsum
    vloss = (weight * (value(obs) - ret) ** 2).sum() / wsum
    ent = (weight * dist.entropy().sum(-1)).sum() / wsum
    loss = pol + hyper.c_v * vloss - hyper.beta * ent
    kl = (weight * (logp_old - logp)).sum() / wsum
    return loss, {k: float(v.detach()) for k, v in (("policy", pol), ("value", vloss), ("entropy", ent), ("kl", kl))}


def ppo_update(policy, value, optimizer, items, weights, hyper: PpoHyper, gen: torch.Generator):
    """Clipped-surrogate epochs over the batch; restores the networks and
    raises :class:`NanGradient` on a non-finite gradient."""
    if not items:
        raise ValueError("empty buffer")
    obs = torch.tensor(np.stack([t.obs for t in items]))
    act = torch.tensor(np.stack([t.action for t in items]))
    logp_old = torch.tensor([t.logp for t in items], dtype=torch.float64)
    adv_np = np.array([t.advantage for t in items])
    if len(adv_np) > 1 and adv_np.std() > 0:
        adv_np = (adv_np - adv_np.mean()) / (adv_np.std() + 1e-8)
    adv = torch.tensor(adv_np)
    ret = torch.tensor([t.ret for t in items], dtype=torch.float64)
    w = torch.tensor(np.asarray(weights, dtype=float))
    snapshot = (
        {k: v.clone() for k, v in policy.state_dict().items()},
        {k: v.clone() for k, v in value.state_dict().items()},
    )
    n = len(items)
    stats = []
    for _ in range(hyper.epochs):
        perm = torch.randperm(n, generator=gen)
        for s in range(0, n, hyper.minibatch):
            idx = perm[s : s + hyper.minibatch]
            loss, st = ppo_loss(policy, value, obs[idx], act[idx], logp_old[idx], adv[idx], ret[idx], w[idx], hyper)
            optimizer.zero_grad()
            loss.backward()
            params = [p for g in optimizer.param_groups for p in g["params"]]
            if not all(torch.isfinite(p.grad).all() for p in params if p.grad is not None):
                policy.load_state_dict(snapshot[0])
                value.load_state_dict(snapshot[1])
                raise NanGradient("non-finite gradient in PPO update")
            nn.utils.clip_grad_norm_(params, hyper.max_grad_norm)
            optimizer.step()
            stats.append(st)
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}


# ---------------------------------------------------------------------------
# environment


@dataclass(frozen=True)
class LmpcConfig:
    psi: PsiConfig = PsiConfig()
    reward: RewardParams = RewardParams()
    scales: ObsScales = ObsScales()
    hyper: PpoHyper = PpoHyper()
    act_every: int = 10  # control steps per policy decision
    sparse_every: int = 50
    envs: int = 3
    episodes: int = 60  # total over all environments
    steps: int = 2000  # control steps per episode
    eval_every: int = 1  # updates between evaluation rollouts
    seed: int = 0
    init_log_std: float = -0.5
    fixed_config: tuple | None = None  # (shape, mass, mu) to train on one object
    eval_config: tuple = ("cube", 1.0, 0.10)
    eval_goal: tuple = (0.10, 0.0)


GRID_SHAPES = ("cube", "cylinder", "sphere")
GRID_MASSES = (1.0, 2.0)
GRID_FRICTIONS = (0.05, 0.10, 0.20)


def object_grid() -> list[tuple[str, float, float]]:
    return [(s, m, mu) for s in GRID_SHAPES for m in GRID_MASSES for mu in GRID_FRICTIONS]


class LmpcEnv:
    """Closed loop whose model parameters are set by the policy."""

    def __init__(self, cfg: ObjectConfig, goal, lcfg: LmpcConfig, spec: MpcSpec = MpcSpec(),
                 tier: Tier | str = Tier.IDEAL_SERVO, **loop_kw) -> None:
        self.lcfg = lcfg
        self.psi = lcfg.psi.initial()
        self.loop = ClosedLoop(cfg, goal, params_from_psi(self.psi, cfg), spec, tier, **loop_kw)
        self.cfg = cfg
        self.du = np.zeros(2)
        self.u_last = np.zeros(2)

    def observation(self) -> np.ndarray:
        x = self.loop.x
        return observe(
            x[:2] - self.loop.goal, x[2:4], x[4:6], self.du, self.psi / self.lcfg.psi.upper,
            self.cfg.contact_code, self.lcfg.scales,
        )

    def apply(self, delta_eta) -> None:
        self.psi = apply_delta(self.psi, delta_eta, self.lcfg.psi)
        self.loop.set_params(params_from_psi(self.psi, self.cfg, self.loop.params.servo_omega))

    def advance(self, n: int, records: list | None = None) -> tuple[float, bool]:
        """Run ``n`` control steps; mean reward per step and termination."""
        total = 0.0
        k = 0
        for k in range(1, n + 1):
            rec = self.loop.step()
            self.du = rec.u - self.u_last
            self.u_last = rec.u
            r = reward(rec.x[:2], self.loop.goal, rec.x[2:4], np.zeros(2), self.du, self.lcfg.reward)
            total += r
            if records is not None:
                records.append((rec, self.psi.copy()))
            if self.loop.done:
                break
        return total / max(k, 1), self.loop.done


def _obs_tensor(obs) -> torch.Tensor:
    return torch.from_numpy(np.asarray(obs, dtype=float))


def run_policy_episode(policy: PolicyNet, cfg: ObjectConfig, goal, lcfg: LmpcConfig, steps: int,
                       spec: MpcSpec = MpcSpec(), records: list | None = None, **loop_kw) -> float:
    """Deterministic rollout with the mean action; mean reward per step."""
    env = LmpcEnv(cfg, goal, lcfg, spec, **loop_kw)
    total, n = 0.0, 0
    while n < steps:
        with torch.no_grad():
            a = policy(_obs_tensor(env.observation())).numpy()
        env.apply(a)
        chunk = min(lcfg.act_every, steps - n)
        r, done = env.advance(chunk, records)
        total += r * chunk
        n += chunk
        if done:
            break
    return total / steps


def _episode_draw(rng: np.random.Generator, lcfg: LmpcConfig):
    if lcfg.fixed_config is not None:
        shape, mass, mu = lcfg.fixed_config
    else:
        shape, mass, mu = object_grid()[int(rng.integers(18))]
    ang = rng.uniform(0.0, 2.0 * math.pi)
    rad = rng.uniform(0.08, 0.12)
    return ObjectConfig.from_mu(Shape(shape), mass, mu), rad * np.array([math.cos(ang), math.sin(ang)])


@dataclass
class TrainResult:
    policy: PolicyNet
    value: ValueNet
    curve: list[dict]
    psi_min_margin: float  # smallest distance of r from {0, 1} seen in training


def train(lcfg: LmpcConfig = LmpcConfig(), spec: MpcSpec = MpcSpec(), log=None) -> TrainResult:
    """PPO over ``lcfg.episodes`` episodes spread over ``lcfg.envs``
    environments stepped in lockstep; one update per round of episodes."""
    torch.set_num_threads(1)
    torch.manual_seed(lcfg.seed)
    gen = torch.Generator().manual_seed(lcfg.seed)
    policy = PolicyNet(delta_eta_max=lcfg.psi.delta_eta_max, log_std=lcfg.init_log_std)
    value = ValueNet()
    opt = torch.optim.Adam(list(policy.parameters()) + list(value.parameters()), lr=lcfg.hyper.lr)
    rngs = [np.random.default_rng([lcfg.seed, i]) for i in range(lcfg.envs)]
    decisions = -(-lcfg.steps // lcfg.act_every)
    buffers = RolloutBuffers(capacity=decisions * lcfg.envs, S=lcfg.sparse_every)
    eval_cfg = ObjectConfig.from_mu(Shape(lcfg.eval_config[0]), lcfg.eval_config[1], lcfg.eval_config[2])
    curve: list[dict] = []
    margin = 0.5

    def evaluate(update: int, episodes_done: int) -> None:
        r = run_policy_episode(policy, eval_cfg, lcfg.eval_goal, lcfg, lcfg.steps, spec)
        curve.append({"update": update, "episode": episodes_done, "eval_reward": r})
        if log:
            log(f"update {update:3d}  episodes {episodes_done:3d}  eval reward {r:.4f}")

    evaluate(0, 0)
    done_eps, update = 0, 0
    while done_eps < lcfg.episodes:
        n_env = min(lcfg.envs, lcfg.episodes - done_eps)
        envs, trajs = [], []
        for i in range(n_env):
            cfg, goal = _episode_draw(rngs[i], lcfg)
            envs.append(LmpcEnv(cfg, goal, lcfg, spec))
            trajs.append([])
        active = list(range(n_env))
        steps = [0] * n_env
        while active:
            for i in list(active):
                env = envs[i]
                obs = env.observation()
                with torch.no_grad():
                    ot = _obs_tensor(obs)
                    dist = policy.distribution(ot)
                    a = dist.mean + dist.stddev * torch.from_numpy(rngs[i].standard_normal(ACT_DIM))
                    logp = float(dist.log_prob(a).sum())
                    v = float(value(ot))
                env.apply(a.numpy())
                margin = min(margin, float(np.min(np.minimum(env.psi / lcfg.psi.upper, 1 - env.psi / lcfg.psi.upper))))
                chunk = min(lcfg.act_every, lcfg.steps - steps[i])
                r, fell = env.advance(chunk)
                steps[i] += chunk
                end = fell or steps[i] >= lcfg.steps
                trajs[i].append(Transition(obs, a.numpy().copy(), logp, r, v, fell))
                if end:
                    active.remove(i)
        for i in range(n_env):
            tr = trajs[i]
            last_v = 0.0
            if not tr[-1].done:
                with torch.no_grad():
                    last_v = float(value(_obs_tensor(envs[i].observation())))
            adv, ret = gae([t.reward for t in tr], [t.value for t in tr], last_v, [t.done for t in tr],
                           lcfg.hyper.gamma, lcfg.hyper.lam)
            for t, a_, r_ in zip(tr, adv, ret):
                t.advantage, t.ret = float(a_), float(r_)
                buffers.add(t)
        done_eps += n_env
        items, w = buffers.batch()
        stats = ppo_update(policy, value, opt, items, w, lcfg.hyper, gen)
        buffers.roll()
        update += 1
        if log:
            log(f"update {update:3d}  kl {stats['kl']:.2e}  value loss {stats['value']:.3e}")
        if update % lcfg.eval_every == 0 or done_eps >= lcfg.episodes:
            evaluate(update, done_eps)
    return TrainResult(policy, value, curve, margin)


def write_curve(curve: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["update", "episode", "eval_reward"])
        w.writeheader()
        for row in curve:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def with_lmpc(lcfg: LmpcConfig, **kw) -> LmpcConfig:
    return replace(lcfg, **kw)

"""Experiment configuration: dataclass sections read from an INI file.

Sections ``[plant] [mpc] [rls] [lmpc] [dualarm] [grid]``; every key is
optional and unknown keys are rejected.  Tuples are comma separated.
"""

from __future__ import annotations

import configparser
from io import StringIO
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dualarm import ArmModel, ImpedanceGains
from .lmpc import LmpcConfig, PpoHyper, PsiConfig
from .loop import DualArmSettings
from .nmpc import MpcSpec
from .plant import ServoParams
from .rls import RlsConfig


@dataclass
class PlantSection:
    tier: str = "ideal_servo"
    servo_omega: float = 25.0  # [rad/s]
    duration: float = 20.0  # [s]
    sample_rate: float = 500.0  # [Hz], also the MPC rate
    friction_scale: float = 1.0  # plant friction relative to the controllers' model


@dataclass
class MpcSection:
    N: int = 20
    q_p: float = 250.0
    q_v: float = 2.0
    q_r: float = 0.2
    u_max: float = 0.6
    du_max: float = 0.01
    nu_min: float = -0.3
    nu_max: float = 0.3
    w_nu: float = 1e3
    terminal: str = "lqr"
    lqr_q_v: float = -1.0  # negative: use q_v
    max_iter: int = 50
    kkt_tol: float = 1e-6


@dataclass
class RlsSection:
    lam: float = 0.995
    p0: float = 10.0
    eps_t: float = 0.01
    eps_r: float = 0.05
    v_gate: float = 1e-3
    residual_rollout: str = "feature"


@dataclass
class LmpcSection:
    policy: str = ""  # trained policy file; empty = untrained policy from the seed
    act_every: int = 10
    sparse_every: int = 50
    psi_max: tuple = (5.0, 1.0, 1.0, 0.1, 5.0)
    delta_eta_max: float = 0.5
    envs: int = 3
    episodes: int = 60
    steps: int = 2000
    seed: int = 0
    lr: float = 3e-4
    c_v: float = 0.5
    entropy: float = 0.01
    gamma: float = 0.99
    lam_gae: float = 0.95
    clip: float = 0.2
    epochs: int = 10


@dataclass
class DualArmSection:
    torque_limits: str = "exact"
    k_cart: tuple = (5000.0, 5000.0, 50.0)
    k_null: float = 7.0
    w_imp: float = 1.0
    w_pos: float = 0.02
    task_weights: tuple = (100.0, 100.0, 1.0)
    tau_max: tuple = (60.0, 40.0, 20.0)
    qdd_max: tuple = (400.0, 400.0, 400.0)


@dataclass
class GridSection:
    shapes: tuple = ("cube", "cylinder", "sphere")
    masses: tuple = (1.0, 2.0)
    frictions: tuple = (0.05, 0.10, 0.20)
    controllers: tuple = ("PMPC", "RMPC", "LMPC")
    goals: int = 20
    r_min: float = 0.08
    r_max: float = 0.12
    seed: int = 0
    save_trajectories: bool = False


@dataclass
class BenchConfig:
    plant: PlantSection = field(default_factory=PlantSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    rls: RlsSection = field(default_factory=RlsSection)
    lmpc: LmpcSection = field(default_factory=LmpcSection)
    dualarm: DualArmSection = field(default_factory=DualArmSection)
    grid: GridSection = field(default_factory=GridSection)

    # builders for the library objects

    def mpc_spec(self) -> MpcSpec:
        m = self.mpc
        return MpcSpec(
            N=m.N,
            T_s=1.0 / self.plant.sample_rate,
            Q_p=m.q_p * np.eye(2),
            Q_v=m.q_v * np.eye(2),
            Q_R=m.q_r * np.eye(4),
            terminal=m.terminal,
            lqr_q_v=None if m.lqr_q_v < 0 else m.lqr_q_v,
            u_max=m.u_max,
            du_max=m.du_max,
            nu_min=m.nu_min,
            nu_max=m.nu_max,
            w_nu=m.w_nu,
            max_iter=m.max_iter,
            kkt_tol=m.kkt_tol,
        )

    def rls_config(self) -> RlsConfig:
        r = self.rls
        return RlsConfig(r.lam, r.p0, r.eps_t, r.eps_r, r.v_gate, r.residual_rollout)

    def servo(self) -> ServoParams:
        return ServoParams(self.plant.servo_omega)

    def lmpc_config(self) -> LmpcConfig:
        s = self.lmpc
        return LmpcConfig(
            psi=PsiConfig(tuple(s.psi_max), s.delta_eta_max),
            hyper=PpoHyper(lr=s.lr, c_v=s.c_v, beta=s.entropy, gamma=s.gamma, lam=s.lam_gae,
                           clip=s.clip, epochs=s.epochs),
            act_every=s.act_every,
            sparse_every=s.sparse_every,
            envs=s.envs,
            episodes=s.episodes,
            steps=s.steps,
            seed=s.seed,
        )

    def dualarm_settings(self) -> DualArmSettings:
        d = self.dualarm
        model = ArmModel(tau_max=tuple(d.tau_max), qdd_max=tuple(d.qdd_max))
        gains = ImpedanceGains(
            K=np.diag(np.asarray(d.k_cart, dtype=float)),
            K_null=d.k_null * np.eye(3),
            w_imp=d.w_imp,
            w_pos=d.w_pos,
            task_weights=tuple(d.task_weights),
        )
        return DualArmSettings(model, gains, d.torque_limits)


def _coerce(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if default and isinstance(default[0], (int, float)):
            return tuple(float(p) for p in parts)
        return tuple(parts)
    return text


SECTIONS = ("plant", "mpc", "rls", "lmpc", "dualarm", "grid")


def load_config(path: str | Path | None = None, text: str | None = None) -> BenchConfig:
    """Read an INI file (or string); missing keys keep their defaults."""
    cfg = BenchConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep the case of keys such as N
    if text is not None:
        parser.read_string(text)
    else:
        with open(path) as fh:
            parser.read_file(fh)
    for name in parser.sections():
        if name not in SECTIONS:
            raise ValueError(f"unknown config section [{name}]")
        section = getattr(cfg, name)
        known = {f.name: f for f in fields(section)}
        updates = {}
        for key, raw in parser.items(name):
            if key not in known:
                raise ValueError(f"unknown key {key!r} in [{name}]")
            updates[key] = _coerce(raw, getattr(section, key))
        setattr(cfg, name, replace(section, **updates))
    return cfg


def dump_config(cfg: BenchConfig) -> str:
    """INI text that :func:`load_config` reads back to an equal config."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        items = {}
        for f in fields(section):
            v = getattr(section, f.name)
            items[f.name] = ", ".join(map(str, v)) if isinstance(v, tuple) else str(v)
        parser[name] = items
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()

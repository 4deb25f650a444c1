"""Benchmark harness: single episodes, trajectory CSV, grid sweep, report."""

from __future__ import annotations

import csv
import math
import multiprocessing as mp
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import metrics
from .config import BenchConfig
from .lmpc import LmpcEnv, PolicyNet, _obs_tensor, load_policy
from .loop import ClosedLoop, Controller
from .nominal import NominalParams
from .plant import EventKind, ObjectConfig, Shape, Tier

BASE_COLUMNS = ("t", "px", "py", "vx", "vy", "alpha", "beta", "u_alpha", "u_beta", "event", "cost", "kkt")


@dataclass(frozen=True)
class EpisodeSpec:
    shape: str = "cube"
    mass: float = 1.0
    friction: float = 0.10
    controller: Controller = Controller.PMPC
    tier: Tier = Tier.IDEAL_SERVO
    goal: tuple[float, float] = (0.10, 0.0)
    duration: float = 20.0  # [s]
    sample_rate: float = 500.0  # [Hz]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "controller", Controller(self.controller))
        object.__setattr__(self, "tier", Tier(self.tier))
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample rate must be positive")
        if abs(self.goal[0]) > 0.2 or abs(self.goal[1]) > 0.15:
            raise ValueError("goal must lie on the tray")

    @property
    def steps(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def model_object(self) -> ObjectConfig:
        return ObjectConfig.from_mu(Shape(self.shape), self.mass, self.friction)


@dataclass
class EpisodeLog:
    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        j = self.columns.index(name)
        return np.array([r[j] for r in self.rows])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _policy_for(cfg: BenchConfig, seed: int) -> PolicyNet:
    import torch

    torch.set_num_threads(1)
    if cfg.lmpc.policy:
        return load_policy(cfg.lmpc.policy)
    torch.manual_seed(seed)
    return PolicyNet(delta_eta_max=cfg.lmpc.delta_eta_max)


def run_episode(spec: EpisodeSpec, cfg: BenchConfig = BenchConfig(), policy: PolicyNet | None = None):
    """Closed-loop episode; returns the log and its metrics."""
    import torch

    mpc_spec = replace(cfg.mpc_spec(), T_s=1.0 / spec.sample_rate)
    model_obj = spec.model_object
    plant_obj = ObjectConfig.from_mu(Shape(spec.shape), spec.mass, spec.friction * cfg.plant.friction_scale)
    loop_kw = dict(servo=cfg.servo(), dualarm=cfg.dualarm_settings())
    env = None
    if spec.controller is Controller.LMPC:
        if policy is None:
            policy = _policy_for(cfg, spec.seed)
        env = LmpcEnv(plant_obj, spec.goal, cfg.lmpc_config(), mpc_spec, spec.tier, **loop_kw)
        # the policy knows the shape (rolling geometry) of the real object
        loop = env.loop
    else:
        rls = cfg.rls_config() if spec.controller is Controller.RMPC else None
        params = NominalParams.matched(model_obj, servo_omega=cfg.plant.servo_omega)
        loop = ClosedLoop(plant_obj, spec.goal, params, mpc_spec, spec.tier, rls=rls, **loop_kw)

    columns = list(BASE_COLUMNS) + ["gx", "gy", "duration"]
    n_tau = 6 if spec.tier is Tier.DUAL_ARM else 2
    columns += [f"tau_{i}" for i in range(n_tau)]
    if spec.tier is Tier.DUAL_ARM:
        columns += [f"q_{i}" for i in range(6)] + [f"qd_{i}" for i in range(6)]
    if spec.controller is Controller.RMPC:
        columns += [f"z_{j}_{i}" for j in range(6) for i in range(3)]
        columns += [f"P_{j}_{i}" for j in range(6) for i in range(3)]
    if spec.controller is Controller.LMPC:
        columns += [f"psi_{i}" for i in range(5)]
    log = EpisodeLog(columns)

    act_every = cfg.lmpc.act_every
    for k in range(spec.steps):
        if env is not None:
            if k % act_every == 0:
                with torch.no_grad():
                    env.apply(policy(_obs_tensor(env.observation())).numpy())
            recs: list = []
            env.advance(1, recs)
            rec = recs[0][0]
        else:
            rec = loop.step()
        x = rec.x
        row = [rec.t, x[0], x[1], x[2], x[3], x[4], x[5], rec.u[0], rec.u[1], rec.event.value, rec.cost, rec.kkt,
               spec.goal[0], spec.goal[1], spec.duration, *rec.tau]
        if spec.tier is Tier.DUAL_ARM:
            row += [*rec.q, *rec.qd]
        if loop.bank is not None:
            row += [*loop.bank.z.reshape(-1), *loop.bank.P_diagonals.reshape(-1)]
        if env is not None:
            row += [*env.psi]
        log.rows.append([float(v) if not isinstance(v, str) else v for v in row])
        if loop.done:
            break
    return log, metrics_from_log(log)


def metrics_from_log(log: EpisodeLog, w_E: float = metrics.W_E, w_R: float = metrics.W_R) -> metrics.MetricsRecord:
    t = log.column("t")
    dt = float(t[0]) if len(t) == 1 else float(t[1] - t[0])
    pos = np.stack([log.column("px"), log.column("py")], axis=1)
    goal = (float(log.column("gx")[0]), float(log.column("gy")[0]))
    tau = np.stack([log.column(c) for c in log.columns if c.startswith("tau_")], axis=1)
    fell = log.rows[-1][log.columns.index("event")] == EventKind.FELL_OFF_TRAY.value
    return metrics.compute(pos, goal, tau, dt, float(log.column("duration")[0]), fell,
                           log.column("kkt"), log.column("cost"), w_E, w_R)


def read_log(path: str | Path) -> EpisodeLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        columns = next(reader)
        if tuple(columns[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise ValueError(f"{path}: not a trajectory CSV")
        ev = columns.index("event")
        rows = [[v if j == ev else float(v) for j, v in enumerate(r)] for r in reader]
    return EpisodeLog(columns, rows)


# ---------------------------------------------------------------------------
# grid


def goal_set(n: int, seed: int, r_min: float = 0.08, r_max: float = 0.12) -> list[tuple[float, float]]:
    """Evenly spaced directions with radii drawn from the seed."""
    rng = np.random.default_rng(seed)
    radii = rng.uniform(r_min, r_max, size=n)
    return [
        (float(r * math.cos(2 * math.pi * j / n)), float(r * math.sin(2 * math.pi * j / n)))
        for j, r in enumerate(radii)
    ]


@dataclass(frozen=True)
class GridKey:
    shape: str
    mass: float
    friction: float
    controller: str

    def label(self) -> str:
        return f"{self.shape}-{self.mass:g}kg-mu{self.friction:g}-{self.controller}"


@dataclass
class GridRow:
    key: GridKey
    episodes: int
    failed: int
    fell_off: int
    settling_time: float
    steady_state_error: float
    control_effort: float


@dataclass
class GridReport:
    rows: list[GridRow]
    failures: list[tuple[str, int, str]]  # (config label, goal index, message)
    tier: str

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["shape", "mass", "friction", "controller", "episodes", "failed", "fell_off",
                        "settling_time", "steady_state_error", "control_effort"])
            for r in self.rows:
                k = r.key
                w.writerow([k.shape, repr(k.mass), repr(k.friction), k.controller, r.episodes, r.failed,
                            r.fell_off, repr(r.settling_time), repr(r.steady_state_error), repr(r.control_effort)])

    def text(self) -> str:
        head = f"{'Shape':<9}{'Mass[kg]':>9}{'mu':>6}  {'Ctrl':<5}{'Settling Time[s]':>18}" \
               f"{'Steady State Error[m]':>23}{'Control Effort':>16}{'fell':>6}{'failed':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            k = r.key
            lines.append(
                f"{k.shape:<9}{k.mass:>9g}{k.friction:>6g}  {k.controller:<5}{r.settling_time:>18.3f}"
                f"{r.steady_state_error:>23.4f}{r.control_effort:>16.4g}{r.fell_off:>6d}{r.failed:>8d}"
            )
        if self.tier == Tier.IDEAL_SERVO.value:
            lines.append("control effort from servo pseudo-torques; not comparable with dual-arm values")
        for label, g, msg in self.failures:
            lines.append(f"FAILED {label} goal {g}: {msg}")
        return "\n".join(lines) + "\n"


def grid_episodes(cfg: BenchConfig) -> list[tuple[GridKey, int, EpisodeSpec]]:
    g = cfg.grid
    goals = goal_set(g.goals, g.seed, g.r_min, g.r_max)
    out = []
    for shape in g.shapes:
        for mass in g.masses:
            for mu in g.frictions:
                for ctrl in g.controllers:
                    key = GridKey(str(shape), float(mass), float(mu), Controller(ctrl).value)
                    for j, goal in enumerate(goals):
                        spec = EpisodeSpec(shape, float(mass), float(mu), Controller(ctrl), Tier(cfg.plant.tier),
                                           goal, cfg.plant.duration, cfg.plant.sample_rate, g.seed)
                        out.append((key, j, spec))
    return out


def _grid_job(args):
    key, j, spec, cfg, out_dir = args
    try:
        log, rec = run_episode(spec, cfg)
        if out_dir is not None and cfg.grid.save_trajectories:
            log.write_csv(Path(out_dir) / f"{key.label()}-g{j:02d}.csv")
        return key, j, rec, None
    except Exception as exc:  # recorded, not fatal
        return key, j, None, f"{type(exc).__name__}: {exc}"


def run_grid(cfg: BenchConfig, jobs: int = 1, out_dir: str | Path | None = None, progress=None) -> GridReport:
    """Sweep the configured grid; the fold is ordered by key, so the report
    does not depend on ``jobs`` or completion order."""
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    tasks = [(key, j, spec, cfg, None if out_dir is None else str(out_dir)) for key, j, spec in grid_episodes(cfg)]
    results = {}
    if jobs > 1:
        ctx = mp.get_context("spawn")
        with ctx.Pool(jobs) as pool:
            for res in pool.imap_unordered(_grid_job, tasks):
                results[(res[0], res[1])] = res
                if progress:
                    progress(len(results), len(tasks))
    else:
        for t in tasks:
            res = _grid_job(t)
            results[(res[0], res[1])] = res
            if progress:
                progress(len(results), len(tasks))

    keys = []
    for key, _, _ in grid_episodes(cfg):
        if key not in keys:
            keys.append(key)
    rows, failures = [], []
    for key in keys:
        entries = sorted(((j, r, err) for (k, j), (_, _, r, err) in results.items() if k == key), key=lambda e: e[0])
        ok = [r for _, r, err in entries if err is None]
        failures += [(key.label(), j, err) for j, _, err in entries if err is not None]

        def mean(attr):
            vals = [getattr(r, attr) for r in ok]
            return math.fsum(vals) / len(vals) if vals else float("nan")

        rows.append(GridRow(key, len(ok), len(entries) - len(ok), sum(r.fell_off for r in ok),
                            mean("settling_time"), mean("steady_state_error"), mean("control_effort")))
    report = GridReport(rows, failures, cfg.plant.tier)
    if out_dir is not None:
        report.write_csv(Path(out_dir) / "report.csv")
        (Path(out_dir) / "report.txt").write_text(report.text())
        with open(Path(out_dir) / "episodes.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            fields = list(metrics.MetricsRecord.__dataclass_fields__)
            w.writerow(["config", "goal"] + fields + ["error"])
            for (k, j) in sorted(results, key=lambda kj: (keys.index(kj[0]), kj[1])):
                _, _, r, err = results[(k, j)]
                vals = [repr(v) if isinstance(v, float) else v for v in r.as_dict().values()] if r else [""] * len(fields)
                w.writerow([k.label(), j] + vals + [err or ""])
    return report

"""PPO with GAE, teacher-guided exploration and a distance curriculum.

The teacher only ever replaces the executed action (with probability
``p_follow``); it never appears in observations, masks or the loss. The
log-probability stored for an executed action is always the student's.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .env import N_ACTIONS, OBS_DIM, ChargeEnv, Curriculum, EnvConfig
from .errors import InvalidArgument, NoGoalAtDistance, NonFiniteLoss
from .nn import MLP, Adam, masked_log_softmax
from .teacher import TeacherConfig, greedy_hint, shortlist, teacher_action
from .teacher import plan as teacher_plan

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr_start: float = 3e-4
    lr_end: float = 1e-4
    batch_start: int = 2048
    batch_end: int = 8192
    epochs: int = 4
    minibatch: int = 256
    max_grad_norm: float = 0.5
    reward_scale: float = 0.01
    p_follow_start: float = 0.8
    p_follow_end: float = 0.05
    p_follow_decay_episodes: int = 300
    gate_success: float = 0.8
    gate_window: int = 50
    max_episodes_per_stage: int = 3000
    hidden: tuple[int, ...] = (128, 128)
    n_envs: int = 8
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise InvalidArgument("gamma and gae_lambda must lie in (0, 1]")
        if not self.clip_eps > 0:
            raise InvalidArgument("clip_eps must be > 0")
        if self.lr_end > self.lr_start or self.batch_end < self.batch_start:
            raise InvalidArgument("lr must not increase and batch must not shrink across stages")
        if self.p_follow_end > self.p_follow_start or not 0 <= self.p_follow_end:
            raise InvalidArgument("p_follow must decay")
        if self.n_envs < 1 or self.minibatch < 1 or self.epochs < 1:
            raise InvalidArgument("n_envs, minibatch and epochs must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def from_dict(cls, data: dict) -> "PpoConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidArgument(f"unknown PPO option(s): {sorted(unknown)}")
        return cls(**data)


def stage_schedule(cfg: PpoConfig, index: int, n_stages: int) -> tuple[float, int]:
    """Learning rate and batch size for the ``index``-th (0-based) of ``n_stages`` stages.

    Both move geometrically between their start and end values; the batch
    is rounded to a multiple of the minibatch size.
    """
    frac = index / (n_stages - 1) if n_stages > 1 else 0.0
    lr = cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** frac
    batch = cfg.batch_start * (cfg.batch_end / cfg.batch_start) ** frac
    batch = max(cfg.minibatch, int(round(batch / cfg.minibatch)) * cfg.minibatch)
    return lr, batch


def p_follow_at(cfg: PpoConfig, episodes_in_stage: int) -> float:
    """Exponential decay from ``p_follow_start`` to ``p_follow_end`` over the decay horizon."""
    if cfg.p_follow_start == 0:
        return 0.0
    frac = min(1.0, episodes_in_stage / max(1, cfg.p_follow_decay_episodes))
    if cfg.p_follow_end == 0:
        return 0.0 if frac >= 1 else cfg.p_follow_start * (1 - frac)
    return cfg.p_follow_start * (cfg.p_follow_end / cfg.p_follow_start) ** frac


# -- policy -------------------------------------------------------------------

class PolicyNet:
    """Policy MLP (26 -> hidden -> 9 logits) with a separate value MLP."""

    def __init__(self, hidden=(128, 128), seed: int = 0, obs_dim: int = OBS_DIM, n_actions: int = N_ACTIONS):
        rng = np.random.default_rng(seed)
        self.hidden = tuple(hidden)
        self.pi = MLP((obs_dim, *hidden, n_actions), rng, out_scale=0.01)
        self.vf = MLP((obs_dim, *hidden, 1), rng, out_scale=1.0)

    @property
    def params(self):
        return self.pi.params + self.vf.params

    def log_probs(self, obs, masks):
        return masked_log_softmax(self.pi(obs), masks)

    def value(self, obs):
        return self.vf(obs)[..., 0]

    def act(self, obs, mask, rng=None, deterministic=False) -> int:
        lp = self.log_probs(obs[None], mask[None])[0]
        if deterministic:
            return int(np.argmax(lp))
        return _sample(np.exp(lp), rng.random())

    def copy_params(self):
        return [p.copy() for p in self.params]

    def set_params(self, values):
        for p, v in zip(self.params, values):
            p[...] = v

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "pi": [p.tolist() for p in self.pi.params],
            "vf": [p.tolist() for p in self.vf.params],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyNet":
        net = cls(tuple(data["hidden"]))
        net.pi.set_params([np.asarray(p, dtype=float) for p in data["pi"]])
        net.vf.set_params([np.asarray(p, dtype=float) for p in data["vf"]])
        return net


def _sample(probs, u) -> int:
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    k = min(k, len(probs) - 1)
    while probs[k] == 0:  # land on a valid action even at the cdf edge
        k -= 1
    return k


def save_checkpoint(path, net: PolicyNet, config: dict) -> str:
    cfg_text = json.dumps(config, sort_keys=True)
    digest = hashlib.sha256(cfg_text.encode()).hexdigest()
    payload = {"config": config, "config_hash": digest, "policy": net.to_dict()}
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return digest


def load_checkpoint(path) -> tuple[PolicyNet, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    digest = hashlib.sha256(json.dumps(payload["config"], sort_keys=True).encode()).hexdigest()
    if digest != payload.get("config_hash"):
        raise InvalidArgument("checkpoint config hash mismatch")
    return PolicyNet.from_dict(payload["policy"]), payload["config"]


# -- advantage estimation -----------------------------------------------------

def compute_gae(rewards, values, dones, gamma, lam, last_value=0.0):
    """Generalised advantage estimates and returns.

    Arrays are time-major, shape ``(T,)`` or ``(T, n_envs)``. ``dones[t]``
    marks that the episode ended after step ``t`` (no bootstrap past it);
    ``last_value`` is the value of the state following step ``T-1``.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise InvalidArgument("rewards, values and dones must have equal shapes")
    adv = np.zeros_like(rewards)
    nxt_val = np.broadcast_to(np.asarray(last_value, dtype=float), rewards.shape[1:]).copy()
    nxt_adv = np.zeros(rewards.shape[1:])
    for t in reversed(range(len(rewards))):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * nxt_val * live - values[t]
        nxt_adv = delta + gamma * lam * live * nxt_adv
        adv[t] = nxt_adv
        nxt_val = values[t]
    return adv, adv + values


# -- loss and update ------------------------------------------------------------

@dataclass
class Minibatch:
    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    logp_old: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray


def ppo_loss(net: PolicyNet, mb: Minibatch, cfg: PpoConfig, want_grad: bool = True):
    """Clipped surrogate + value MSE - entropy bonus, with analytic gradients."""
    n = len(mb.actions)
    idx = np.arange(n)
    logits, pi_acts = net.pi.forward(mb.obs)
    logp_all = masked_log_softmax(logits, mb.masks)
    logp = logp_all[idx, mb.actions]
    ratio = np.exp(logp - mb.logp_old)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    s1, s2 = ratio * mb.advantages, clipped * mb.advantages
    per_sample = -np.minimum(s1, s2)
    policy_loss = per_sample.mean()

    p = np.exp(logp_all)
    lp = np.where(mb.masks, logp_all, 0.0)
    ent = -(p * lp).sum(axis=1)
    entropy = ent.mean()

    v, vf_acts = net.vf.forward(mb.obs)
    v = v[:, 0]
    value_loss = np.mean((v - mb.returns) ** 2)
    total = policy_loss + cfg.value_coef * value_loss - cfg.entropy_coef * entropy
    stats = {
        "loss": float(total),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": float(entropy),
        "approx_kl": float(np.mean(mb.logp_old - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip_eps)),
        "per_sample_policy_loss": per_sample,
    }
    if not want_grad:
        return total, stats, None

    dlogp = np.where(s1 <= s2, -mb.advantages * ratio, 0.0) / n
    dlogits = -p * dlogp[:, None]
    dlogits[idx, mb.actions] += dlogp
    dlogits += cfg.entropy_coef * p * (lp + ent[:, None]) / n
    g_pi = net.pi.backward(pi_acts, dlogits)
    dv = cfg.value_coef * 2.0 * (v - mb.returns) / n
    g_vf = net.vf.backward(vf_acts, dv[:, None])
    return total, stats, g_pi + g_vf


@dataclass
class RolloutBatch:
    obs: np.ndarray
    masks: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    compliance: np.ndarray
    overridden: np.ndarray

    def __len__(self):
        return len(self.actions)


def ppo_update(net: PolicyNet, batch: RolloutBatch, cfg: PpoConfig, opt: Adam, rng: np.random.Generator, lr=None):
    """Several epochs of minibatch Adam on the clipped objective.

    Advantages are normalised over the whole batch first. A non-finite loss
    restores the weights and optimiser state held before the call.
    """
    if lr is not None:
        opt.lr = lr
    adv = batch.advantages
    adv = (adv - adv.mean()) / max(adv.std(), 1e-8)
    snapshot = net.copy_params()
    opt_snapshot = (opt.t, [m.copy() for m in opt.m], [v.copy() for v in opt.v])
    n = len(batch)
    agg = {"loss": 0.0, "policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0, "approx_kl": 0.0, "clip_frac": 0.0}
    count = 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            sel = perm[lo:lo + cfg.minibatch]
            mb = Minibatch(batch.obs[sel], batch.masks[sel], batch.actions[sel], batch.logp[sel], adv[sel],
                           batch.returns[sel])
            loss, stats, grads = ppo_loss(net, mb, cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                net.set_params(snapshot)
                opt.t, opt.m, opt.v = opt_snapshot
                raise NonFiniteLoss("non-finite PPO loss; update rolled back")
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grads = [g * (cfg.max_grad_norm / norm) for g in grads]
            opt.step(net.params, grads)
            for k in agg:
                agg[k] += stats[k]
            count += 1
    return {k: v / max(count, 1) for k, v in agg.items()}


# -- teacher and rollouts ---------------------------------------------------------

class Teacher:
    """Budgeted-A* advisor; plans are cached because search is a pure function."""

    def __init__(self, cfg: TeacherConfig | None = None):
        self.cfg = cfg or TeacherConfig()
        self._cache: dict = {}
        self._held: dict = {}

    def plan_for(self, env: ChargeEnv):
        s = env.state
        held = self._held.get(id(env))
        # replan every `replan_period` steps or when the student has left the cached path
        if held is None or s.step % self.cfg.replan_period == 0 or held[1] != s.goal:
            k = int(math.floor(s.soc / self.cfg.soc_bucket_pct + 1e-9))
            key = (id(env.g), s.current, s.goal, k)
            p = self._cache.get(key)
            if p is None:
                p = teacher_plan(env.g, self.cfg, env.params, s.current, s.goal, s.soc, env.curve)
                self._cache[key] = p
            held = (p, s.goal)
            self._held[id(env)] = held
        return held[0]

    def hint(self, env: ChargeEnv) -> int:
        s = env.state
        return greedy_hint(env.g, s.current, s.goal)

    def advise(self, env: ChargeEnv):
        """Shortlist, greedy hint and the single action the teacher would execute."""
        s = env.state
        p = self.plan_for(env)
        sl = shortlist(p, s.current, env.g)
        if sl:
            return sl, self.hint(env), teacher_action(p, s.current, env.g, s.goal)
        h = self.hint(env)
        return sl, h, h


@dataclass
class EpisodeStats:
    stage: int
    ret: float
    length: int
    reason: str
    compliance: float
    overrides: int
    invalid_charges: int
    stops: int
    dwell_min: float
    min_soc: float

    @property
    def success(self) -> bool:
        return self.reason == "success"


class Workers:
    """A fixed set of environments stepped in lockstep with per-env RNG streams."""

    def __init__(self, envs: list[ChargeEnv], seed: int):
        self.envs = envs
        self.seed = seed
        self._rng_reset = [np.random.default_rng([seed, i, 0]) for i in range(len(envs))]
        self._rng_act = [np.random.default_rng([seed, i, 1]) for i in range(len(envs))]
        self._rng_follow = [np.random.default_rng([seed, i, 2]) for i in range(len(envs))]
        self.obs = [None] * len(envs)
        self._acc = [None] * len(envs)

    def reset_env(self, i):
        env = self.envs[i]
        for _ in range(env.cfg.max_reset_tries):
            _, obs = env.reset(int(self._rng_reset[i].integers(2**63)))
            if not env.state.done:
                break
        else:
            raise NoGoalAtDistance(f"every sampled goal lies inside the success radius at stage {env.cfg.stage}")
        self.obs[i] = obs
        self._acc[i] = {"ret": 0.0, "g": [], "over": 0}

    def reset_all(self):
        for i in range(len(self.envs)):
            self.reset_env(i)


def collect_rollouts(workers: Workers, net: PolicyNet, teacher: Teacher | None, cfg: PpoConfig, n_steps: int,
                     p_follow: float):
    """Step every env ``n_steps`` times; return the batch and episodes finished meanwhile."""
    n_env = len(workers.envs)
    T = n_steps
    obs = np.zeros((T, n_env, OBS_DIM))
    masks = np.zeros((T, n_env, N_ACTIONS), dtype=bool)
    actions = np.zeros((T, n_env), dtype=int)
    logps = np.zeros((T, n_env))
    rewards = np.zeros((T, n_env))
    values = np.zeros((T, n_env))
    dones = np.zeros((T, n_env))
    comp = np.zeros((T, n_env))
    over = np.zeros((T, n_env))
    finished: list[EpisodeStats] = []

    for t in range(T):
        x = np.stack(workers.obs)
        m = np.stack([env.action_mask() for env in workers.envs])
        lp_all = net.log_probs(x, m)
        v = net.value(x)
        for i, env in enumerate(workers.envs):
            a = _sample(np.exp(lp_all[i]), workers._rng_act[i].random())
            coin = workers._rng_follow[i].random()
            g_t, o_t = 0.0, 0.0
            if teacher is not None:
                if coin < p_follow:
                    sl, hint, a = teacher.advise(env)
                    o_t = 1.0
                    g_t = float(a in sl) if sl else float(a == hint)
                else:
                    g_t = float(a == teacher.hint(env))
            obs[t, i], masks[t, i], actions[t, i] = x[i], m[i], a
            logps[t, i], values[t, i], comp[t, i], over[t, i] = lp_all[i, a], v[i], g_t, o_t
            state, nobs, rb, done = env.step(a)
            r = rb.total
            rewards[t, i] = r * cfg.reward_scale
            acc = workers._acc[i]
            acc["ret"] += r
            acc["g"].append(g_t)
            acc["over"] += int(o_t)
            if done:
                dones[t, i] = 1.0
                finished.append(EpisodeStats(
                    state.stage, acc["ret"], state.step, state.done_reason, float(np.mean(acc["g"])), acc["over"],
                    state.invalid_charges, state.stops, state.charge_time_min, state.min_soc,
                ))
                workers.reset_env(i)
            else:
                workers.obs[i] = nobs
    last_v = net.value(np.stack(workers.obs))
    adv, ret = compute_gae(rewards, values, dones, cfg.gamma, cfg.gae_lambda, last_v)
    flat = lambda a: a.reshape(T * n_env, *a.shape[2:])  # noqa: E731
    batch = RolloutBatch(flat(obs), flat(masks), flat(actions), flat(logps), flat(rewards), flat(values),
                         flat(dones), flat(adv), flat(ret), flat(comp), flat(over))
    return batch, finished


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalStats:
    n_episodes: int
    success_rate: float
    depletion_rate: float
    timeout_rate: float
    mean_return: float
    mean_stops: float
    mean_dwell_min: float
    mean_min_soc: float
    min_soc: float
    invalid_charge_actions: int
    actions: int

    @property
    def invalid_charge_rate(self) -> float:
        return self.invalid_charge_actions / max(1, self.actions)


def run_episode(net: PolicyNet, env: ChargeEnv, seed, deterministic=True, rng=None, **reset_kw):
    env.reset(seed, **reset_kw)
    obs = env.observe(env.state)
    total = 0.0
    while not env.state.done:
        a = net.act(obs, env.action_mask(), rng, deterministic)
        _, obs, rb, _ = env.step(a)
        total += rb.total
    return env.state, total


def evaluate(net: PolicyNet, env: ChargeEnv, n_episodes: int, deterministic: bool = True, seed: int = 0) -> EvalStats:
    seeds = np.random.default_rng([seed, 7]).integers(2**63, size=n_episodes)
    act_rng = np.random.default_rng([seed, 8])
    reasons, rets, stops, dwell, mins = [], [], [], [], []
    invalid = actions = 0
    for s in seeds:
        state, ret = run_episode(net, env, int(s), deterministic, act_rng)
        reasons.append(state.done_reason)
        rets.append(ret)
        stops.append(state.stops)
        dwell.append(state.charge_time_min)
        mins.append(state.min_soc)
        invalid += state.invalid_charges
        actions += state.step
    n = max(1, n_episodes)
    return EvalStats(
        n_episodes, reasons.count("success") / n, reasons.count("depleted") / n, reasons.count("timeout") / n,
        float(np.mean(rets)) if rets else 0.0, float(np.mean(stops)) if stops else 0.0,
        float(np.mean(dwell)) if dwell else 0.0, float(np.mean(mins)) if mins else 0.0,
        float(np.min(mins)) if mins else 0.0, invalid, actions,
    )


# -- training loop --------------------------------------------------------------

LOG_FIELDS = ("stage", "episode", "return", "success", "compliance", "lr", "batch")


@dataclass
class TrainResult:
    policy: PolicyNet
    log_rows: list[dict]
    stage_metrics: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.log_rows:
            w.writerow([r["stage"], r["episode"], f"{r['return']:.6f}", int(r["success"]), f"{r['compliance']:.6f}",
                        f"{r['lr']:.6e}", r["batch"]])
        return buf.getvalue()


def train(
    g,
    params,
    curriculum: Curriculum,
    cfg: PpoConfig = PpoConfig(),
    env_cfg: EnvConfig = EnvConfig(),
    teacher_cfg: TeacherConfig | None = None,
    *,
    stages=None,
    use_teacher: bool = True,
    curve=None,
) -> TrainResult:
    """Stage-by-stage PPO over the curriculum.

    A stage ends once the last ``gate_window`` episodes reach
    ``gate_success`` (only after the ``p_follow`` decay horizon) or after
    ``max_episodes_per_stage`` episodes. Stages without any goal at their
    distance are skipped with a warning.
    """
    teacher_cfg = teacher_cfg or TeacherConfig(charge_cap_pct=env_cfg.charge_cap_pct)
    stages = list(stages) if stages is not None else list(range(1, len(curriculum) + 1))
    net = PolicyNet(cfg.hidden, cfg.seed)
    opt = Adam(net.params, cfg.lr_start)
    upd_rng = np.random.default_rng([cfg.seed, 99])
    teacher = Teacher(teacher_cfg) if use_teacher else None
    envs = [ChargeEnv(g, params, replace(env_cfg, strict=False), curriculum, curve=curve, teacher_cfg=teacher_cfg)
            for _ in range(cfg.n_envs)]
    workers = Workers(envs, cfg.seed)
    rows: list[dict] = []
    metrics: list[dict] = []
    episode = 0
    trained_any = False
    for idx, stage in enumerate(stages):
        lr, batch_size = stage_schedule(cfg, idx, len(stages))
        for env in envs:
            env.set_stage(stage)
        try:
            workers.reset_all()
        except NoGoalAtDistance as exc:
            log.warning("skipping stage %d: %s", stage, exc)
            metrics.append({"stage": stage, "skipped": True})
            continue
        trained_any = True
        window: deque = deque(maxlen=cfg.gate_window)
        in_stage: list[EpisodeStats] = []
        n_steps = max(1, batch_size // cfg.n_envs)
        while True:
            pf = p_follow_at(cfg, len(in_stage))
            batch, done_eps = collect_rollouts(workers, net, teacher, cfg, n_steps, pf)
            ppo_update(net, batch, cfg, opt, upd_rng, lr)
            for ep in done_eps:
                episode += 1
                in_stage.append(ep)
                window.append(ep.success)
                rows.append({"stage": stage, "episode": episode, "return": ep.ret, "success": ep.success,
                             "compliance": ep.compliance, "lr": lr, "batch": batch_size})
            gate_open = len(in_stage) >= cfg.p_follow_decay_episodes and len(window) == cfg.gate_window
            if gate_open and np.mean(window) >= cfg.gate_success:
                break
            if len(in_stage) >= cfg.max_episodes_per_stage:
                break
        recent = in_stage[-cfg.gate_window:]
        metrics.append({
            "stage": stage, "skipped": False, "episodes": len(in_stage), "lr": lr, "batch": batch_size,
            "success_rate": float(np.mean([e.success for e in recent])),
            "mean_reward": float(np.mean([e.ret for e in recent])),
            "compliance_rate": float(np.mean([e.compliance for e in recent])),
            "depletion_rate": float(np.mean([e.reason == "depleted" for e in recent])),
        })
        log.info("stage %d done: %s", stage, metrics[-1])
    if not trained_any:
        raise NoGoalAtDistance("no curriculum stage has goals at its distance on this graph")
    return TrainResult(net, rows, metrics)

"""Minibatch FairDICE and behaviour-cloning training for continuous observations.

Each iteration samples one batch and updates, in order, the critic and
preference parameters (one Adam over nu's weights and xi, constant lr) and
then the policy (its own Adam, cosine decay to zero) using the w* computed
from the critic as it stood before the update.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from fairdice import autodiff as ad
from fairdice.data import TransitionDataset
from fairdice.losses import (
    HyperParams,
    PreferenceVector,
    RegularizerSign,
    TdBatch,
    UtilityKind,
    bc_loss_and_grad,
    critic_mu_loss_and_grads,
    gradient_penalty_and_grad,
    interpolate_states,
    policy_loss_buggy_outer_and_grad,
    policy_loss_weighted_and_grad,
)
from fairdice.metrics import NormStats, jain_index, mean_ci, meanstd_normalize_states, minmax_normalize_rewards, nsw

ARTIFACT_MAGIC = b"FDTA1\n"


class LossMode(str, Enum):
    FAIRDICE = "fairdice"
    FAIRDICE_BUGGY = "fairdice-buggy"
    PLAIN_BC = "plain-bc"


class TrainingError(RuntimeError):
    def __init__(self, message: str, iteration: int, component: str):
        super().__init__(f"{message}: {component} at iteration {iteration}")
        self.iteration = iteration
        self.component = component


@dataclass(frozen=True)
class TrainConfig:
    hp: HyperParams = field(default_factory=HyperParams)
    iterations: int = 10_000
    batch_size: int = 256
    eval_every: int = 0
    seeds: tuple[int, ...] = (0,)
    loss_mode: LossMode = LossMode.FAIRDICE
    lr: float = 3e-4
    hidden: tuple[int, ...] = (256, 256)
    activation: ad.Activation = ad.Activation.RELU

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        object.__setattr__(self, "loss_mode", LossMode(self.loss_mode))
        object.__setattr__(self, "activation", ad.Activation(self.activation))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hp"] = self.hp.to_dict()
        d["loss_mode"] = self.loss_mode.value
        d["activation"] = self.activation.value
        d["seeds"] = list(self.seeds)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hp = dict(d.pop("hp"))
        hp["utility_kind"] = UtilityKind(hp["utility_kind"])
        hp["regularizer_sign"] = RegularizerSign(hp["regularizer_sign"])
        return cls(hp=HyperParams(**hp), **{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TrainArtifact:
    config: TrainConfig
    seed: int
    env_id: str
    policy_spec: ad.MlpSpec
    policy_params: list
    critic_spec: ad.MlpSpec
    critic_params: list
    xi: np.ndarray
    mu_trace: np.ndarray
    traces: dict
    norm_stats: dict
    metrics: dict = field(default_factory=dict)

    # -- inference ------------------------------------------------------

    def action_probs(self, obs: np.ndarray, normalized: bool = False) -> np.ndarray:
        x = obs if normalized else NormStats.from_dict(self.norm_stats).normalize_states(obs)
        tape = ad.forward(self.policy_spec, [ad.Tensor(a) for a in self.policy_params], np.atleast_2d(x))
        return np.exp(ad.log_softmax(tape.out))

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        p = self.action_probs(obs)
        u = rng.random(len(p))[:, None]
        return np.minimum((u >= np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)

    # -- serialisation --------------------------------------------------

    def _arrays(self) -> dict:
        out = {f"policy.{i}": a for i, a in enumerate(self.policy_params)}
        out.update({f"critic.{i}": a for i, a in enumerate(self.critic_params)})
        out["xi"] = self.xi
        out["mu_trace"] = self.mu_trace
        out.update({f"trace.{k}": v for k, v in self.traces.items()})
        return out

    def to_bytes(self) -> bytes:
        """Magic line, 8-byte header length, JSON header, raw little-endian arrays."""
        arrays = self._arrays()
        layout, offset = [], 0
        for name, a in arrays.items():
            a = np.ascontiguousarray(a, dtype="<f8")
            layout.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
        header = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "env": self.env_id,
            "policy_spec": _spec_dict(self.policy_spec),
            "critic_spec": _spec_dict(self.critic_spec),
            "norm_stats": self.norm_stats,
            "metrics": self.metrics,
            "arrays": layout,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(ARTIFACT_MAGIC)
        buf.write(struct.pack("<Q", len(hb)))
        buf.write(hb)
        for a in arrays.values():
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TrainArtifact":
        if not blob.startswith(ARTIFACT_MAGIC):
            raise ValueError("not a FairDICE training artifact")
        pos = len(ARTIFACT_MAGIC)
        (n,) = struct.unpack("<Q", blob[pos:pos + 8])
        header = json.loads(blob[pos + 8:pos + 8 + n])
        body = memoryview(blob)[pos + 8 + n:]
        arrays = {}
        for item in header["arrays"]:
            count = int(np.prod(item["shape"])) if item["shape"] else 1
            a = np.frombuffer(body, dtype="<f8", count=count, offset=item["offset"])
            arrays[item["name"]] = a.reshape(item["shape"]).copy()
        n_pol = sum(1 for k in arrays if k.startswith("policy."))
        n_crit = sum(1 for k in arrays if k.startswith("critic."))
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            seed=header["seed"],
            env_id=header["env"],
            policy_spec=ad.MlpSpec(**header["policy_spec"]),
            policy_params=[arrays[f"policy.{i}"] for i in range(n_pol)],
            critic_spec=ad.MlpSpec(**header["critic_spec"]),
            critic_params=[arrays[f"critic.{i}"] for i in range(n_crit)],
            xi=arrays["xi"],
            mu_trace=arrays["mu_trace"],
            traces={k[len("trace."):]: v for k, v in arrays.items() if k.startswith("trace.")},
            norm_stats=header["norm_stats"],
            metrics=header["metrics"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "TrainArtifact":
        return cls.from_bytes(Path(path).read_bytes())


def _spec_dict(spec: ad.MlpSpec) -> dict:
    return {
        "widths": list(spec.widths),
        "activation": spec.activation.value,
        "head": spec.head.value,
        "gain": spec.gain,
        "out_gain": spec.out_gain,
    }


def prepare_dataset(data: TransitionDataset) -> tuple[TransitionDataset, NormStats]:
    """Min-max rewards and, for continuous observations, mean-std states."""
    stats = NormStats.from_dataset(data)
    out = minmax_normalize_rewards(data, stats)
    if stats.state_mean is not None:
        out = meanstd_normalize_states(out, stats)
    return out, stats


def train(data: TransitionDataset, n_actions: int, cfg: TrainConfig, seed: int | None = None,
          env_id: str | None = None, normalize: bool = True) -> TrainArtifact:
    """Train critic, preferences and policy on ``data``.

    Batch indices and the penalty's interpolation coefficient come from two
    independent streams spawned from ``seed``, so every loss mode sees the
    same batches.
    """
    seed = cfg.seeds[0] if seed is None else int(seed)
    if data.discrete:
        raise ValueError("the minibatch trainer needs float observations; use the tabular solver")
    if cfg.batch_size > len(data):
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {len(data)}")
    if normalize:
        data, stats = prepare_dataset(data)
    else:
        stats = NormStats(np.zeros(data.n_objectives), np.ones(data.n_objectives))
    hp = cfg.hp
    mode = cfg.loss_mode
    init_rng, batch_rng, eps_rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]

    obs_dim = data.states.shape[1]
    K = data.n_objectives
    pol_spec = ad.MlpSpec((obs_dim, *cfg.hidden, n_actions), cfg.activation, ad.Head.CATEGORICAL)
    crit_spec = ad.MlpSpec((obs_dim, *cfg.hidden, 1), cfg.activation, ad.Head.SCALAR)
    policy = ad.init_mlp(pol_spec, init_rng)
    critic = ad.init_mlp(crit_spec, init_rng)
    xi = ad.Tensor(np.zeros(K))
    crit_params = critic + [xi]
    pol_opt = ad.AdamState.for_params(policy, cfg.lr, schedule=ad.Schedule.COSINE_TO_ZERO,
                                      total_steps=cfg.iterations)
    crit_opt = ad.AdamState.for_params(crit_params, cfg.lr)

    states = np.asarray(data.states, dtype=float)
    nexts = np.asarray(data.next_states, dtype=float)
    inits = np.asarray(data.initial_states, dtype=float)
    T = cfg.iterations
    names = ["critic", "penalty", "policy", "w_mean", "w_std"]
    if mode is LossMode.FAIRDICE_BUGGY:
        names.append("bc_cosine")
    traces = {name: np.zeros(T) for name in names}
    mu_trace = np.zeros((T, K))
    use_critic = mode is not LossMode.PLAIN_BC
    use_penalty = use_critic and hp.lambda_gp > 0

    for it in range(T):
        idx = batch_rng.integers(0, len(data), cfg.batch_size)
        s, s2, s0 = states[idx], nexts[idx], inits[idx]
        done = data.dones[idx]
        B = len(idx)

        w = np.ones(B)
        if use_critic:
            tape = ad.forward(crit_spec, critic, np.concatenate([s, s2, s0]))
            nu = tape.out[:, 0]
            batch = TdBatch(nu[:B], nu[B:2 * B], data.rewards[idx], nu[2 * B:], done)
            try:
                closs = critic_mu_loss_and_grads(batch, PreferenceVector(xi.values), hp)
            except FloatingPointError as exc:
                raise TrainingError(str(exc), it, "critic") from None
            d_out = np.concatenate([closs.d_nu_s, closs.d_nu_next, closs.d_nu_init])[:, None]
            ad.backward(crit_spec, critic, tape, d_out)
            xi.grad = closs.d_xi.copy()
            pen = 0.0
            if use_penalty:
                eps = float(eps_rng.random())
                ptape = ad.forward(crit_spec, critic, interpolate_states(s0, s2, eps))
                gx, deltas = ad.input_gradient(crit_spec, critic, ptape)
                norms = np.linalg.norm(gx, axis=1)
                pen, d_norm = gradient_penalty_and_grad(norms, hp)
                if np.any(d_norm):
                    d_gx = (d_norm / np.where(norms > 0, norms, 1.0))[:, None] * gx
                    ad.penalty_backward(crit_spec, critic, ptape, deltas, d_gx)
            traces["critic"][it] = closs.value
            traces["penalty"][it] = pen
            if not math.isfinite(closs.value + pen):
                raise TrainingError("non-finite loss", it, "critic")
            try:
                ad.adam_step(crit_opt, crit_params)
            except ad.NonFiniteError:
                raise TrainingError("non-finite gradient", it, "critic") from None
            w = closs.w

        ptape = ad.forward(pol_spec, policy, s)
        logp, back = ad.categorical_log_prob(ptape.out, data.actions[idx])
        live = (~done).astype(float)
        if mode is LossMode.FAIRDICE:
            ploss, d_logp, _ = policy_loss_weighted_and_grad(logp, w, live)
        elif mode is LossMode.FAIRDICE_BUGGY:
            # record how closely this batch's parameter gradient follows plain BC's
            ad.backward(pol_spec, policy, ptape, back(bc_loss_and_grad(logp)[1]))
            g_bc = ad.flat_grad(policy)
            ploss, d_logp, _ = policy_loss_buggy_outer_and_grad(logp, w, live)
        else:
            ploss, d_logp = bc_loss_and_grad(logp)
        if not math.isfinite(ploss):
            raise TrainingError("non-finite loss", it, "policy")
        ad.backward(pol_spec, policy, ptape, back(d_logp))
        if mode is LossMode.FAIRDICE_BUGGY:
            g = ad.flat_grad(policy)
            traces["bc_cosine"][it] = g @ g_bc / max(np.linalg.norm(g) * np.linalg.norm(g_bc), 1e-300)
        ad.adam_step(pol_opt, policy)
        traces["policy"][it] = ploss
        traces["w_mean"][it] = w.mean()
        traces["w_std"][it] = w.std()
        mu_trace[it] = np.exp(xi.values) if hp.learns_mu else 1.0

    return TrainArtifact(
        config=cfg,
        seed=seed,
        env_id=env_id or data.meta.get("env", "unknown"),
        policy_spec=pol_spec,
        policy_params=[p.values.copy() for p in policy],
        critic_spec=crit_spec,
        critic_params=[p.values.copy() for p in critic],
        xi=xi.values.copy(),
        mu_trace=mu_trace,
        traces=traces,
        norm_stats=stats.to_dict(),
    )


def policy_kl(a: TrainArtifact, b: TrainArtifact, obs: np.ndarray) -> float:
    """Mean over ``obs`` of KL(pi_a || pi_b)."""
    p = np.clip(a.action_probs(obs), 1e-300, None)
    q = np.clip(b.action_probs(obs), 1e-300, None)
    return float(np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1)))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Per-rollout undiscounted returns and their welfare summaries."""

    returns: np.ndarray
    nsw: float
    nsw_ci: float
    utilitarian: float
    utilitarian_ci: float
    jain: float
    jain_ci: float
    degenerate: bool = False

    @classmethod
    def from_returns(cls, returns: np.ndarray) -> "EvalReport":
        returns = np.atleast_2d(np.asarray(returns, dtype=float))
        per_nsw = [nsw(r, True) for r in returns]
        nsw_vals = np.array([v.value for v in per_nsw])
        degenerate = any(v.degenerate for v in per_nsw)
        jains = np.array([jain_index(r) if np.any(r) else math.nan for r in returns])
        m_nsw, c_nsw = (-math.inf, math.nan) if degenerate else mean_ci(nsw_vals)
        m_u, c_u = mean_ci(returns.sum(axis=1))
        m_j, c_j = mean_ci(jains)
        return cls(returns, m_nsw, c_nsw, m_u, c_u, m_j, c_j, degenerate)

    def summary(self) -> dict:
        out = {k: float(v) for k, v in asdict(self).items() if k not in ("returns", "degenerate")}
        out["degenerate"] = bool(self.degenerate)
        out["mean_returns"] = self.returns.mean(axis=0).tolist()
        return out


def evaluate_policy_mc(env, policy, n_rollouts: int, horizon: int, rng: np.random.Generator) -> EvalReport:
    """Monte-Carlo undiscounted returns.

    ``env`` is a ``TabularMOMDP`` (``policy`` an action-probability table) or
    the string ``"group-fair"`` (``policy`` a ``TrainArtifact`` or a
    ``policy(obs, rng)`` callable).
    """
    if n_rollouts < 1:
        raise ValueError("need at least one rollout")
    if env == "group-fair":
        from fairdice.envs.groupfair import rollout_groupfair

        actor = policy.act if isinstance(policy, TrainArtifact) else policy
        returns, _ = rollout_groupfair(actor, n_rollouts, rng, horizon)
        return EvalReport.from_returns(returns)
    from fairdice.data import rollout_tabular

    data = rollout_tabular(env, np.asarray(policy), n_rollouts, horizon, rng)
    returns = np.zeros((n_rollouts, env.n_objectives))
    np.add.at(returns, data.traj_ids, data.rewards)
    return EvalReport.from_returns(returns)


def with_mode(cfg: TrainConfig, mode: LossMode | str, **kw) -> TrainConfig:
    return replace(cfg, loss_mode=LossMode(mode), **kw)

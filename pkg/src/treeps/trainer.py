"""Clipped-surrogate policy optimization for the tabular policy.

The objective per batch is

    J = (1/T) * sum_t min(rho_t A_t, clip(rho_t, 1-eps, 1+eps) A_t) - beta * KL

with ``rho_t = pi(a_t|s_t) / pi_old(a_t|s_t)``, ``T`` the number of unmasked
action records, and KL the exact categorical divergence to the reference
policy averaged over the same records. For the tabular policy one action
template is one "token", so the ratio is taken per step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import ANSWER, Question, Step
from .credit import credit_tree, exact_match_reward
from .env import Corpus, SimRetriever, instantiate, retrieve
from .errors import ConfigError, StaleSnapshot, UnknownTemplate
from .experience import ExperienceBatch, enumerate_paths, sample_experience
from .policy import TabularPolicy, log_softmax, parameter_digest, softmax
from .tree import RolloutConfig, build_tree

ADVANTAGE_MODES = ("process", "outcome_grpo")
PRUNING_MODES = ("similarity", "random")
OPTIMIZERS = ("adam", "sgd")
CSV_FIELDS = ("iteration", "mean_reward", "success", "objective", "kl", "clip_fraction",
              "advantage_mode", "pruning_mode", "seed")


@dataclass(frozen=True)
class TrainConfig:
    clip_eps: float = 0.2
    kl_coef: float = 0.001
    learning_rate: float = 0.1
    iterations: int = 200
    advantage_mode: str = "process"
    pruning_mode: str = "similarity"
    seed: int = 0
    questions_per_iteration: int = 4
    optimizer: str = "adam"  # or "sgd"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    # reference values for LLM-scale training; unused by the tabular optimizer
    llm_learning_rate: float = 1e-6
    llm_optimizer: str = "AdamW"

    def __post_init__(self):
        if self.clip_eps <= 0:
            raise ConfigError("clip_eps must be positive")
        if self.kl_coef < 0:
            raise ConfigError("kl_coef must be non-negative")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if self.iterations < 0 or self.questions_per_iteration < 1:
            raise ConfigError("iterations must be >= 0 and questions_per_iteration >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("adam_betas must lie in [0, 1)")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ConfigError(f"advantage_mode must be one of {ADVANTAGE_MODES}")
        if self.pruning_mode not in PRUNING_MODES:
            raise ConfigError(f"pruning_mode must be one of {PRUNING_MODES}")


@dataclass(frozen=True)
class PolicySnapshot:
    theta: np.ndarray
    theta_old: np.ndarray
    theta_ref: np.ndarray

    @classmethod
    def initial(cls, theta: np.ndarray) -> "PolicySnapshot":
        t = np.array(theta, dtype=float)
        return cls(t, t.copy(), t.copy())


@dataclass(frozen=True)
class ActionRecords:
    """Flat per-step view of one or more experience batches."""

    features: np.ndarray  # int, (T,)
    actions: np.ndarray  # int, (T,)
    advantages: np.ndarray  # float, (T,)
    logp_old: np.ndarray  # float, (T,)
    mask: np.ndarray  # 0/1, (T,)
    old_digest: str


def grpo_outcome_advantages(group_rewards: Sequence[float]) -> np.ndarray:
    """Group-normalized outcome advantages, ``(r - mean) / std`` (population std)."""
    r = np.asarray(group_rewards, dtype=float)
    if r.size == 0:
        raise ValueError("group must be nonempty")
    std = r.std()
    if std < 1e-8:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def with_outcome_advantages(batch: ExperienceBatch) -> ExperienceBatch:
    """Replace per-step advantages with each trajectory's group-normalized reward."""
    adv = grpo_outcome_advantages([it.reward for it in batch.items])
    items = tuple(it.with_advantages([a] * len(it.trajectory.steps)) for it, a in zip(batch.items, adv))
    return ExperienceBatch(batch.question_id, items)


def collect_records(batches: Sequence[ExperienceBatch], policy_old: TabularPolicy) -> ActionRecords:
    """Features, template indices and rollout-time log-probs for every step."""
    logp = log_softmax(policy_old.theta)
    feats, acts, advs = [], [], []
    for b in batches:
        for it in b.items:
            steps = it.trajectory.steps
            for i, (step, a) in enumerate(zip(steps, it.advantages)):
                if step.action.template is None:
                    raise UnknownTemplate(f"step {i} of {it.trajectory_id} has no template")
                feats.append(policy_old.feature_of(b.question_id, steps[:i]))
                acts.append(policy_old.template_index(step.action.template))
                advs.append(a)
    f = np.asarray(feats, dtype=int)
    a = np.asarray(acts, dtype=int)
    return ActionRecords(f, a, np.asarray(advs, dtype=float), logp[f, a], np.ones(len(f), dtype=int),
                         policy_old.digest())


def exact_kl(theta: np.ndarray, theta_ref: np.ndarray) -> np.ndarray:
    """Row-wise KL(softmax(theta) || softmax(theta_ref))."""
    lp, lq = log_softmax(theta), log_softmax(theta_ref)
    return (np.exp(lp) * (lp - lq)).sum(axis=-1)


def surrogate_objective(records: ActionRecords, snapshot: PolicySnapshot, cfg: TrainConfig,
                        *, check_snapshot: bool = True) -> tuple[float, np.ndarray, dict]:
    """Objective value, its analytic gradient w.r.t. theta, and diagnostics."""
    if check_snapshot and parameter_digest(snapshot.theta_old) != records.old_digest:
        raise StaleSnapshot("experience was collected under different rollout parameters")
    theta = snapshot.theta
    grad = np.zeros_like(theta)
    live = records.mask.astype(bool)
    T = int(live.sum())
    if T == 0:
        return 0.0, grad, {"kl": 0.0, "clip_fraction": 0.0, "tokens": 0}
    f, a, A = records.features[live], records.actions[live], records.advantages[live]
    lp = log_softmax(theta)
    p = np.exp(lp)
    ratio = np.exp(lp[f, a] - records.logp_old[live])
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    s1, s2 = ratio * A, clipped * A
    surrogate = np.minimum(s1, s2)
    active = s1 <= s2  # where the unclipped branch is the minimum, the gradient flows
    coef = np.where(active, A * ratio, 0.0) / T
    np.add.at(grad, (f, a), coef)
    np.add.at(grad, f, -coef[:, None] * p[f])

    lq = log_softmax(snapshot.theta_ref)
    kl_rows = (p * (lp - lq)).sum(axis=-1)
    kl = float(kl_rows[f].mean())
    if cfg.kl_coef:
        kl_grad = p * (lp - lq - kl_rows[:, None])
        np.add.at(grad, f, -cfg.kl_coef * kl_grad[f] / T)
    obj = float(surrogate.sum() / T - cfg.kl_coef * kl)
    info = {
        "kl": kl,
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > cfg.clip_eps)),
        "tokens": T,
    }
    return obj, grad, info


@dataclass
class AdamState:
    """First and second moment estimates carried across iterations."""

    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def step(self, grad: np.ndarray, lr: float, betas: tuple[float, float], eps: float = 1e-8) -> np.ndarray:
        b1, b2 = betas
        if self.m is None:
            self.m, self.v = np.zeros_like(grad), np.zeros_like(grad)
        self.t += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        m_hat = self.m / (1 - b1 ** self.t)
        v_hat = self.v / (1 - b2 ** self.t)
        return lr * m_hat / (np.sqrt(v_hat) + eps)


def train_iteration(records: ActionRecords, snapshot: PolicySnapshot, cfg: TrainConfig,
                    state: Optional[AdamState] = None) -> tuple[np.ndarray, dict]:
    """One ascent step. Returns new theta and metrics.

    With ``optimizer="adam"`` the moment estimates live in ``state``, which is
    updated in place; a fresh state is used when none is given.
    """
    obj, grad, info = surrogate_objective(records, snapshot, cfg)
    if cfg.optimizer == "sgd":
        delta = cfg.learning_rate * grad
    else:
        delta = (state if state is not None else AdamState()).step(grad, cfg.learning_rate, cfg.adam_betas)
    return snapshot.theta + delta, {"objective": obj, **info}


# -- evaluation -------------------------------------------------------------

class SuccessEvaluator:
    """Exact expected success of a tabular policy on a fixed question set.

    The simulated world is deterministic given the chosen templates, so the
    full decision tree per question is enumerated once and reused for any
    parameter vector.
    """

    def __init__(self, corpus: Corpus, questions: Sequence[Question], policy: TabularPolicy,
                 max_depth: int, K: int = 3, token_cap: int = 512):
        self.policy = policy
        self.max_depth = max_depth
        self._trees = [self._expand(corpus, q, (), K, token_cap) for q in questions]

    def _expand(self, corpus, q, history, K, cap):
        f = self.policy.feature_of(q.id, history)
        kids = []
        for t in self.policy.templates:
            reasoning, action = instantiate(t, corpus, q, history)
            if action.kind == ANSWER:
                kids.append(float(exact_match_reward(action.payload, q.gold_answer)))
            elif len(history) + 1 >= self.max_depth:
                kids.append(0.0)
            else:
                obs = retrieve(action.payload, corpus, K, cap)
                kids.append(self._expand(corpus, q, history + (Step(reasoning, action, obs),), K, cap))
        return (f, kids)

    def _value(self, node, probs) -> float:
        f, kids = node
        vals = np.array([k if isinstance(k, float) else self._value(k, probs) for k in kids])
        return float(probs[f] @ vals)

    def __call__(self, theta: np.ndarray, temperature: float = 1.0) -> float:
        probs = softmax(np.asarray(theta) / temperature)
        return float(np.mean([self._value(t, probs) for t in self._trees]))


# -- loop -------------------------------------------------------------------

@dataclass
class TrainingResult:
    rows: list[dict] = field(default_factory=list)
    policy: Optional[TabularPolicy] = None

    @property
    def final_success(self) -> float:
        return self.rows[-1]["success"] if self.rows else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def _derived_seed(*key: int) -> int:
    s = np.random.SeedSequence(list(key)).generate_state(2, dtype=np.uint32)
    return int(s[0]) << 32 | int(s[1])


def run_training(env: tuple[Corpus, Sequence[Question]], policy: TabularPolicy,
                 rollout_cfg: RolloutConfig, train_cfg: TrainConfig) -> TrainingResult:
    """Alternate tree rollouts under theta_old with one surrogate ascent step.

    ``success`` in each row is the exact expected success of the updated
    policy on the training questions at the rollout temperature.
    """
    corpus, questions = env
    questions = list(questions)
    rollout_cfg = replace(rollout_cfg, pruning_mode=train_cfg.pruning_mode)
    retriever = SimRetriever(corpus, rollout_cfg.K, 512)
    evaluate = SuccessEvaluator(corpus, questions, policy, rollout_cfg.D, rollout_cfg.K)
    theta_ref = policy.theta.copy()
    theta = policy.theta.copy()
    result = TrainingResult()
    opt_state = AdamState()
    per_iter = min(train_cfg.questions_per_iteration, len(questions))
    for it in range(train_cfg.iterations):
        rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, it]))
        chosen = sorted(rng.choice(len(questions), size=per_iter, replace=False).tolist())
        old = policy.with_theta(theta)
        batches = []
        for qi in chosen:
            cfg = replace(rollout_cfg, seed=_derived_seed(train_cfg.seed, it, qi))
            tree = build_tree(questions[qi], old, retriever, cfg)
            rewards, credits = credit_tree(tree)
            batch = sample_experience(enumerate_paths(tree), rollout_cfg.N, rng, credits=credits, rewards=rewards)
            if train_cfg.advantage_mode == "outcome_grpo":
                batch = with_outcome_advantages(batch)
            batches.append(batch)
        records = collect_records(batches, old)
        snapshot = PolicySnapshot(theta, old.theta, theta_ref)
        theta, metrics = train_iteration(records, snapshot, train_cfg, opt_state)
        rewards_all = [item.reward for b in batches for item in b.items]
        result.rows.append({
            "iteration": it,
            "mean_reward": float(np.mean(rewards_all)),
            "success": evaluate(theta, rollout_cfg.temperature),
            "objective": metrics["objective"],
            "kl": metrics["kl"],
            "clip_fraction": metrics["clip_fraction"],
            "advantage_mode": train_cfg.advantage_mode,
            "pruning_mode": train_cfg.pruning_mode,
            "seed": train_cfg.seed,
        })
    result.policy = policy.with_theta(theta)
    return result

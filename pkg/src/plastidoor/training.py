"""Training drivers for the two threat models.

TM-Scratch poisons from the first rollout. TM-Post first trains a clean
agent until it converges, checkpoints it, then fine-tunes that checkpoint
with poisoning switched on. Interventions are part of the provider's
training recipe, so they are active in both phases.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import attacks
from .envs import VecEnv, make_env
from .interventions import compose
from .neuralcore import load_checkpoint, save_checkpoint
from .pathology import PathologySeries, PathologySnapshot, penultimate_rank_ratio, sharpness, weight_magnitude
from .ppo import (
    Agent, JointParams, TrainingDiverged, actor_closure, collect_rollout, gae_for_buffer, joint_closure, ppo_update,
)
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "run_id", "seed", "step", "phase", "asr", "btp", "weight_magnitude", "effective_rank_ratio",
    "sharpness", "poisoned_count", "intervention", "attack", "task_id", "threat_model",
)


@dataclass
class RunLog:
    run_id: str
    scenario_id: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    series: PathologySeries = field(default_factory=PathologySeries)
    final_asr: float | None = None
    final_btp: float | None = None
    status: str = "ok"
    pretrain_steps: int = 0
    checkpoint: dict | None = field(default=None, repr=False)
    final_actor: object = field(default=None, repr=False)

    def phase_series(self, phase: str) -> PathologySeries:
        s = PathologySeries()
        for row, snap in zip(self.rows, self.series.snapshots):
            if row["phase"] == phase:
                s.append(snap)
        return s


def run_id_for(scenario: ScenarioConfig, seed: int) -> str:
    return f"{scenario.scenario_id}-s{seed}"


class _Run:
    def __init__(self, scenario: ScenarioConfig, seed: int, out_dir: Path | None):
        self.sc = scenario
        self.seed = seed
        self.out_dir = out_dir
        ss = scenario.seed_sequence(seed)
        init_ss, env_ss, train_ss, poison_ss, eval_ss, sharp_ss, hook_ss = ss.spawn(7)
        gen = lambda s: np.random.Generator(np.random.Philox(s))  # noqa: E731
        self.rng_init, self.rng_env, self.rng_train = gen(init_ss), gen(env_ss), gen(train_ss)
        self.rng_poison, self.rng_eval, self.rng_sharp, self.rng_hook = (
            gen(poison_ss), gen(eval_ss), gen(sharp_ss), gen(hook_ss))
        self.env_proto = make_env(scenario.env)
        self.task = attacks.get_task(scenario.task) if scenario.task else None
        self.strategy = (attacks.AttackStrategy(scenario.attack, **scenario.attack_params)
                         if scenario.attack else None)
        self.log = RunLog(run_id_for(scenario, seed), scenario.scenario_id, seed)
        self.steps = 0
        self.poisoned = 0

    def new_agent(self) -> Agent:
        stack = compose(self.sc.intervention, self.sc.intervention_params)
        return Agent.create(self.env_proto.obs_dim, self.env_proto.action_spec, self.sc.ppo, stack, self.rng_init)

    def evaluate(self, agent: Agent) -> tuple[float | None, float]:
        asr = None
        if self.task is not None:
            asr = attacks.evaluate_asr(agent.actor, self.sc.env, self.task, self.sc.eval, self.rng_eval)
        btp = attacks.evaluate_btp(agent.actor, self.sc.env, self.sc.eval, self.rng_eval)
        return asr, btp

    def record(self, agent: Agent, phase: str, asr, btp) -> None:
        sharp = 0.0
        if agent.last_batch is not None:
            b = agent.last_batch
            if self.sc.sharpness_loss == "combined":
                joint = JointParams(agent.actor, agent.critic)
                sharp = sharpness(joint, joint_closure(b, b["clip"], self.sc.ppo.ent_coef, self.sc.ppo.vf_coef),
                                  self.sc.sharpness_iterations, self.rng_sharp)
                joint.push()
            else:
                sharp = sharpness(agent.actor, actor_closure(b, b["clip"], self.sc.ppo.ent_coef),
                                  self.sc.sharpness_iterations, self.rng_sharp)
        snap = PathologySnapshot(self.steps, weight_magnitude(agent.actor), penultimate_rank_ratio(agent.actor), sharp)
        self.log.series.append(snap)
        self.log.rows.append({
            "run_id": self.log.run_id, "seed": self.seed, "step": self.steps, "phase": phase,
            "asr": asr, "btp": btp, "weight_magnitude": snap.weight_magnitude,
            "effective_rank_ratio": snap.effective_rank_ratio, "sharpness": snap.sharpness,
            "poisoned_count": self.poisoned, "intervention": self.sc.intervention,
            "attack": self.sc.attack or "none", "task_id": self.sc.task or "none",
            "threat_model": self.sc.threat_model,
        })

    def run_phase(self, agent: Agent, phase: str, budget: int, poison: bool, stop_at_btp: float | None = None) -> bool:
        """Train for ``budget`` env steps. Returns True if ``stop_at_btp`` was reached."""
        cfg = self.sc.ppo
        venv = VecEnv(self.sc.env, cfg.n_envs, self.rng_env)
        poisoner = None
        if poison and self.strategy is not None:
            poisoner = attacks.Poisoner(self.task, self.strategy, self.sc.budget, self.rng_poison)
        per_update = cfg.n_steps * cfg.n_envs
        n_updates = budget // per_update
        for u in range(n_updates):
            buf = collect_rollout(agent, venv, cfg.n_steps, self.rng_train, poisoner)
            self.steps += len(buf)
            self.poisoned += buf.poisoned_count
            gae_for_buffer(buf, cfg.gamma, cfg.gae_lambda)
            ppo_update(agent, buf, self.rng_hook, progress=u / max(n_updates, 1))
            last = u == n_updates - 1
            do_eval = (u + 1) % self.sc.eval_interval == 0 or last
            do_log = (u + 1) % self.sc.log_interval == 0 or last or do_eval
            asr = btp = None
            if do_eval:
                asr, btp = self.evaluate(agent)
                if asr is not None and self.strategy is not None and self.strategy.controller is not None and poison:
                    attacks.unidoor_adapt(self.strategy.controller, asr)
            if do_log:
                self.record(agent, phase, asr, btp)
            if stop_at_btp is not None and btp is not None and btp >= stop_at_btp:
                return True
        return False


def train(scenario: ScenarioConfig, seed: int | None = None, out_dir=None) -> RunLog:
    """Execute one (scenario, seed) run and return its log.

    Divergence and TM-Post pre-training that never converges are recorded
    in ``status`` rather than raised.
    """
    seed = scenario.seeds[0] if seed is None else seed
    out_dir = Path(out_dir) if out_dir is not None else None
    run = _Run(scenario, seed, out_dir)
    agent = run.new_agent()
    try:
        if scenario.threat_model == "scratch":
            run.run_phase(agent, "train", scenario.ppo.total_steps, poison=True)
        else:
            converged = run.run_phase(agent, "pretrain", scenario.ppo.total_steps, poison=False,
                                      stop_at_btp=scenario.convergence_btp)
            run.log.pretrain_steps = run.steps
            if not converged:
                run.log.status = "failed: pre-training did not reach the convergence threshold"
                run.log.final_asr, run.log.final_btp = run.evaluate(agent)
                return run.log
            run.log.checkpoint = _checkpoint_payload(agent)
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(out_dir / f"{run.log.run_id}-pretrain.json",
                                {"actor": (agent.actor, agent.actor_opt.state),
                                 "critic": (agent.critic, agent.critic_opt.state)},
                                meta={"run_id": run.log.run_id, "steps": run.steps})
            run.run_phase(agent, "finetune", scenario.ppo.finetune_steps, poison=True)
        run.log.final_asr, run.log.final_btp = run.evaluate(agent)
    except TrainingDiverged as exc:
        log.warning("run %s diverged: %s", run.log.run_id, exc)
        run.log.status = f"diverged: {exc}"
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / f"{run.log.run_id}-final.json",
                        {"actor": (agent.actor, agent.actor_opt.state),
                         "critic": (agent.critic, agent.critic_opt.state)},
                        meta={"run_id": run.log.run_id, "steps": run.steps, "env": scenario.env})
    run.log.final_actor = agent.actor
    return run.log


def _checkpoint_payload(agent: Agent) -> dict:
    return {"actor": agent.actor.theta.copy(), "critic": agent.critic.theta.copy()}


def load_actor(path):
    nets, meta = load_checkpoint(path)
    return nets["actor"][0], meta

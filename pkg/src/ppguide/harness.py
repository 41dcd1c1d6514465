"""Experiment orchestration: staged rollout collection, evaluation arms,
strength and threshold sweeps, and the end-to-end pipeline."""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import env as E
from .config import PipelineConfig
from .guidance import GuidanceConfig, GuidanceHook, GuidanceWarning
from .guide import GuideModel, MissingClassError, train_guide
from .labels import CLASS_NAMES, InstanceDataset, attention_csv_rows, dataset_from_attention
from .mil import MilModel, SingleClassError, bag_accuracy, bag_attention, train_mil
from .policy import PolicyCheckpoint, execute_episodes, train_policy
from .trajectory import Trajectory

log = logging.getLogger(__name__)

CORPUS_SCHEMA = "ppguide.corpus/1"
DEMO_SCHEMA = "ppguide.demos/1"


class PreconditionError(RuntimeError):
    """A pipeline stage cannot run on the data it was given."""


# ---------------------------------------------------------------- demos on disk

def save_demos(demos: Sequence[E.Demo], path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema": DEMO_SCHEMA, "count": len(demos)}) + "\n")
        for d in demos:
            rec = {
                "seed": d.seed, "mode": d.mode, "outcome": d.outcome,
                "steps": [[o.tolist(), a.tolist()] for o, a in zip(d.observations, d.actions)],
            }
            fh.write(json.dumps(rec) + "\n")


def load_demos(path) -> list[E.Demo]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != DEMO_SCHEMA:
            raise ValueError(f"unexpected demo schema {header.get('schema')!r}")
        out = []
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            obs = np.array([s[0] for s in r["steps"]], dtype=np.float64)
            act = np.array([s[1] for s in r["steps"]], dtype=np.float64)
            out.append(E.Demo(r["seed"], r["mode"], obs, act, r["outcome"]))
    if len(out) != header["count"]:
        raise ValueError(f"demo file header says {header['count']} records, found {len(out)}")
    return out


# ---------------------------------------------------------------- corpus

@dataclass
class RolloutCorpus:
    trajectories: list[Trajectory]

    def __len__(self):
        return len(self.trajectories)

    @property
    def counts(self) -> dict[int, dict[str, int]]:
        out: dict[int, dict[str, int]] = {}
        for tr in self.trajectories:
            c = out.setdefault(int(tr.epoch), {E.SUCCESS: 0, E.FAILURE: 0})
            c[tr.outcome] += 1
        return dict(sorted(out.items()))

    @property
    def outcome_totals(self) -> dict[str, int]:
        n_s = sum(tr.success for tr in self.trajectories)
        return {E.SUCCESS: n_s, E.FAILURE: len(self) - n_s}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            header = {"schema": CORPUS_SCHEMA, "total": len(self),
                      "counts": {str(k): v for k, v in self.counts.items()}}
            fh.write(json.dumps(header) + "\n")
            for tr in self.trajectories:
                rec = {
                    "seed": int(tr.seed), "epoch": int(tr.epoch), "outcome": tr.outcome,
                    "steps": tr.steps.tolist(), "obs": tr.obs.tolist(), "actions": tr.actions.tolist(),
                    "positions": None if tr.positions is None else tr.positions.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "RolloutCorpus":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("schema") != CORPUS_SCHEMA:
                raise ValueError(f"unexpected corpus schema {header.get('schema')!r}")
            trajs = []
            for line in fh:
                if not line.strip():
                    continue
                r = json.loads(line)
                pos = None if r["positions"] is None else np.array(r["positions"])
                trajs.append(Trajectory(np.array(r["obs"]), np.array(r["actions"]), np.array(r["steps"]),
                                        r["outcome"], r["seed"], r["epoch"], pos))
        corpus = cls(trajs)
        if {str(k): v for k, v in corpus.counts.items()} != header["counts"]:
            raise ValueError("corpus counts block disagrees with its records")
        return corpus


def rollout_seeds(base_seed: int, index: int, episodes: int) -> range:
    start = base_seed + index * episodes
    return range(start, start + episodes)


def collect_rollouts(
    checkpoints: Sequence[PolicyCheckpoint],
    episodes_per_ckpt: int,
    base_seed: int,
) -> RolloutCorpus:
    """Roll out every checkpoint on its own block of consecutive seeds."""
    if len(checkpoints) < 2:
        raise PreconditionError("rollout collection needs at least two checkpoints")
    if episodes_per_ckpt < 1:
        raise ValueError("episodes_per_ckpt must be positive")
    trajs: list[Trajectory] = []
    for i, ck in enumerate(checkpoints):
        trajs.extend(execute_episodes(ck, rollout_seeds(base_seed, i, episodes_per_ckpt)))
    corpus = RolloutCorpus(trajs)
    totals = corpus.outcome_totals
    if min(totals.values()) == 0:
        raise PreconditionError(
            f"corpus holds a single outcome class {totals}; MIL relevance discovery needs "
            "both success and failure rollouts (try earlier or later checkpoints)"
        )
    return corpus


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    label: str
    checkpoint: str
    seeds: list[int]
    outcomes: list[str]
    guidance: Optional[GuidanceConfig]
    wall_time: float
    classifier_calls: int = 0
    guided_steps: int = 0
    skipped: int = 0
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    @property
    def n_episodes(self) -> int:
        return len(self.outcomes)

    @property
    def successes(self) -> int:
        return sum(o == E.SUCCESS for o in self.outcomes)

    @property
    def success_rate(self) -> float:
        return self.successes / self.n_episodes

    @property
    def seed_range(self) -> tuple[int, int]:
        return min(self.seeds), max(self.seeds)

    def row(self) -> dict:
        g = self.guidance
        return {
            "label": self.label, "checkpoint": self.checkpoint,
            "schedule": g.schedule if g else "none",
            "w_fr": g.w_fr if g else 0.0, "w_sr": g.w_sr if g else 0.0,
            "episodes": self.n_episodes, "successes": self.successes,
            "success_rate": self.success_rate,
            "seed_lo": self.seed_range[0], "seed_hi": self.seed_range[1],
            "classifier_calls": self.classifier_calls, "skipped": self.skipped,
            "wall_time": round(self.wall_time, 3),
        }


def checkpoint_id(ckpt: PolicyCheckpoint) -> str:
    return f"{ckpt.name or 'policy'}@{ckpt.epoch}"


def evaluate(
    ckpt: PolicyCheckpoint,
    cfg: Optional[GuidanceConfig],
    n_episodes: int,
    seed: int = 0,
    guide: Optional[GuideModel] = None,
    label: str = "",
) -> EvalReport:
    """Run ``n_episodes`` on seeds ``seed .. seed + n - 1``.

    Any two calls with the same ``(n_episodes, seed)`` are paired: each
    episode sees the same start state and the same sampler noise.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    seeds = list(range(seed, seed + n_episodes))
    hook = None
    if cfg is not None and cfg.schedule != "none":
        hook = GuidanceHook(guide, cfg, n_episodes, ckpt.schedule.alpha_bars, ckpt.normalizer)
    t0 = time.perf_counter()
    trajs = execute_episodes(ckpt, seeds, hook)
    wall = time.perf_counter() - t0
    rep = EvalReport(label or (cfg.schedule if cfg else "none"), checkpoint_id(ckpt), seeds,
                     [t.outcome for t in trajs], cfg, wall, trajectories=trajs)
    if hook is not None:
        rep.classifier_calls = int(hook.calls.sum())
        rep.guided_steps = int(hook.guided_steps.sum())
        rep.skipped = int(hook.skipped.sum())
    return rep


def guidance_from(cfg: PipelineConfig, w_fr: Optional[float] = None, schedule: Optional[str] = None) -> GuidanceConfig:
    w = cfg.w_fr if w_fr is None else w_fr
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GuidanceWarning)
        return GuidanceConfig(
            w_sr=cfg.sr_ratio * w, w_fr=w, schedule=schedule or cfg.schedule, parity=cfg.parity,
            tau=cfg.tau, convention=cfg.convention, scale_by_sigma=cfg.scale_by_sigma,
        )


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- sweeps

def sweep_strength(
    ckpt: PolicyCheckpoint,
    guide: GuideModel,
    values: Sequence[float],
    ratio: float = 0.1,
    n: int = 200,
    seed: int = 0,
    schedules: Sequence[str] = ("constant", "alternating"),
    base: Optional[PipelineConfig] = None,
) -> list[dict]:
    """Success rate per (w_fr, schedule) with w_sr = ratio * w_fr, paired seeds.

    A ``w_fr = 0`` entry runs the unguided sampler.
    """
    if len(values) < 2:
        raise ValueError("a strength sweep needs at least two values")
    base = (base or PipelineConfig()).replace(sr_ratio=ratio)
    rows = []
    unguided = None
    for w in values:
        for sch in schedules:
            if w == 0:
                unguided = unguided or evaluate(ckpt, None, n, seed)
                rep = unguided
            else:
                rep = evaluate(ckpt, guidance_from(base, w, sch), n, seed, guide)
            rows.append({"w_fr": float(w), "w_sr": ratio * float(w), "schedule": sch,
                         "success_rate": rep.success_rate, "episodes": rep.n_episodes,
                         "classifier_calls": rep.classifier_calls})
    return rows


def sweep_zscore(
    corpus: RolloutCorpus,
    mil: MilModel,
    taus: Sequence[float],
    ckpt: PolicyCheckpoint,
    cfg: PipelineConfig,
    n: int = 200,
    seed: int = 0,
    strengths: Optional[Sequence[float]] = None,
) -> list[dict]:
    """Relabel, retrain the guide with a fixed seed, and evaluate, per threshold.

    Thresholds that leave SR or FR empty give a row marked degenerate.
    """
    alphas = [bag_attention(mil, tr) for tr in corpus.trajectories]
    strengths = list(strengths if strengths is not None else cfg.zscore_strengths)
    rows = []
    for tau in taus:
        ds = dataset_from_attention(corpus.trajectories, alphas, tau, cfg.threshold_space)
        c = ds.counts
        base_row = {"tau": float(tau), "n_sr": c["SR"], "n_fr": c["FR"], "n_ir": c["IR"],
                    "imbalance": ds.imbalance()}
        try:
            guide = train_guide(ds, cfg.guide_epochs, cfg.seed, ckpt.normalizer, cfg.guide_lr,
                                cfg.guide_batch, noise_sigma=cfg.guide_noise_sigma)
        except MissingClassError:
            for w in strengths:
                rows.append({**base_row, "w_fr": w, "success_rate": float("nan"), "degenerate": True})
            continue
        for w in strengths:
            rep = evaluate(ckpt, guidance_from(cfg, w), n, seed, guide)
            rows.append({**base_row, "w_fr": w, "success_rate": rep.success_rate, "degenerate": False})
    return rows


# ---------------------------------------------------------------- pipeline

def _demo_seed(cfg: PipelineConfig) -> int:
    return cfg.demo_seed + 1000 * cfg.seed


def _rollout_seed(cfg: PipelineConfig) -> int:
    return cfg.rollout_seed + 10_000 * cfg.seed


def stage_demos(cfg: PipelineConfig) -> list[E.Demo]:
    return E.collect_demos(cfg.n_demos, _demo_seed(cfg))


def stage_policy(cfg: PipelineConfig, demos) -> list[PolicyCheckpoint]:
    wanted = sorted(set(cfg.collect_epochs() + cfg.eval_epochs()))
    return train_policy(demos, cfg.policy_epochs, cfg.seed, wanted, cfg.policy_lr, cfg.policy_batch,
                        name="policy")


def stage_hetero_policy(cfg: PipelineConfig, demos) -> PolicyCheckpoint:
    return train_policy(demos, cfg.hetero_epochs, cfg.seed + cfg.hetero_seed_offset, (), cfg.policy_lr,
                        cfg.policy_batch, name="deploy")[-1]


def pick(checkpoints: Sequence[PolicyCheckpoint], epochs: Sequence[int]) -> list[PolicyCheckpoint]:
    by_epoch = {c.epoch: c for c in checkpoints}
    missing = [e for e in epochs if e not in by_epoch]
    if missing:
        raise PreconditionError(f"no checkpoints for epochs {missing}")
    return [by_epoch[e] for e in epochs]


def stage_collect(cfg: PipelineConfig, checkpoints) -> RolloutCorpus:
    return collect_rollouts(pick(checkpoints, cfg.collect_epochs()), cfg.rollout_episodes, _rollout_seed(cfg))


def stage_mil(cfg: PipelineConfig, corpus: RolloutCorpus, normalizer) -> MilModel:
    try:
        return train_mil(corpus.trajectories, cfg.mil_epochs, cfg.seed, normalizer, cfg.mil_lr)
    except SingleClassError as exc:
        raise PreconditionError(str(exc)) from exc


def stage_label(cfg: PipelineConfig, corpus: RolloutCorpus, mil: MilModel, tau=None):
    alphas = [bag_attention(mil, tr) for tr in corpus.trajectories]
    ds = dataset_from_attention(corpus.trajectories, alphas, cfg.tau if tau is None else tau, cfg.threshold_space)
    return ds, alphas


def stage_guide(cfg: PipelineConfig, ds: InstanceDataset, normalizer) -> GuideModel:
    try:
        return train_guide(ds, cfg.guide_epochs, cfg.seed, normalizer, cfg.guide_lr, cfg.guide_batch,
                           noise_sigma=cfg.guide_noise_sigma)
    except MissingClassError as exc:
        raise PreconditionError(str(exc)) from exc


@dataclass
class PipelineResult:
    cfg: PipelineConfig
    demos: list
    checkpoints: list
    corpus: RolloutCorpus
    mil: MilModel
    dataset: InstanceDataset
    guide: GuideModel
    eval_rows: list
    strength_rows: list
    zscore_rows: list = field(default_factory=list)
    hetero_rows: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def final(self) -> PolicyCheckpoint:
        return pick(self.checkpoints, [self.cfg.policy_epochs])[0]


def eval_arms(cfg: PipelineConfig, ckpt, guide, w_fr=None) -> list[dict]:
    rows = [evaluate(ckpt, None, cfg.eval_episodes, cfg.eval_seed, label="unguided").row()]
    for sch in ("constant", "alternating"):
        rep = evaluate(ckpt, guidance_from(cfg, w_fr, sch), cfg.eval_episodes, cfg.eval_seed, guide, label=sch)
        rows.append(rep.row())
    return rows


def run_pipeline(
    cfg: PipelineConfig,
    out_dir=None,
    zscore_sweep: bool = True,
    hetero: bool = True,
) -> PipelineResult:
    """All stages in order; writes every artifact when ``out_dir`` is given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    timings = {}

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        r = fn(*args)
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1fs", name, timings[name])
        return r

    demos = timed("demos", stage_demos, cfg)
    checkpoints = timed("policy", stage_policy, cfg, demos)
    final = pick(checkpoints, [cfg.policy_epochs])[0]
    norm = final.normalizer
    corpus = timed("collect", stage_collect, cfg, checkpoints)
    mil = timed("mil", stage_mil, cfg, corpus, norm)
    ds, alphas = timed("label", stage_label, cfg, corpus, mil)
    guide = timed("guide", stage_guide, cfg, ds, norm)

    eval_rows = []
    for ck in pick(checkpoints, cfg.eval_epochs()):
        eval_rows.extend(eval_arms(cfg, ck, guide))
    strength_rows = timed("sweep_strength", sweep_strength, final, guide, [0.0, *cfg.strength_values],
                          cfg.sr_ratio, cfg.eval_episodes, cfg.eval_seed, ("constant", "alternating"), cfg)
    zscore_rows = []
    if zscore_sweep:
        zscore_rows = timed("sweep_zscore", sweep_zscore, corpus, mil, cfg.zscore_values, final, cfg,
                            cfg.eval_episodes, cfg.eval_seed)
    hetero_rows = []
    if hetero:
        deploy = timed("hetero_policy", stage_hetero_policy, cfg, demos)
        best = best_strength(strength_rows)
        hetero_rows = eval_arms(cfg, deploy, guide, best)

    res = PipelineResult(cfg, demos, checkpoints, corpus, mil, ds, guide, eval_rows, strength_rows,
                         zscore_rows, hetero_rows, timings)
    if out is not None:
        write_artifacts(res, alphas, out)
    return res


def best_strength(rows: Sequence[dict], schedule: str = "alternating") -> float:
    """Strength with the highest success under ``schedule``; ties go to the weaker one."""
    cand = [r for r in rows if r["schedule"] == schedule and r["w_fr"] > 0]
    best = max(cand, key=lambda r: (r["success_rate"], -r["w_fr"]))
    return best["w_fr"]


def write_artifacts(res: PipelineResult, alphas, out: Path) -> None:
    from .config import dump_config

    (out / "config.txt").write_text(dump_config(res.cfg))
    save_demos(res.demos, out / "demos.ndjson")
    for ck in res.checkpoints:
        ck.save(out / f"policy_e{ck.epoch}.ppgn")
    res.corpus.save(out / "corpus.ndjson")
    res.mil.save(out / "mil.ppgn")
    write_attention_csv(res.corpus.trajectories, alphas, out / "attention.csv")
    res.dataset.save(out / f"instances_tau{res.dataset.tau:g}.ndjson")
    res.guide.save(out / "guide.ppgn")
    write_csv(res.eval_rows, out / "eval.csv")
    write_csv(res.strength_rows, out / "sweep_strength.csv")
    if res.zscore_rows:
        write_csv(res.zscore_rows, out / "sweep_zscore.csv")
    if res.hetero_rows:
        write_csv(res.hetero_rows, out / "hetero.csv")
    (out / "summary.txt").write_text(summary_text(res))


def write_attention_csv(trajectories, alphas, path) -> None:
    rows = [{"trajectory": t, "step": s, "alpha": a, "zscore": z}
            for t, s, a, z in attention_csv_rows(trajectories, alphas)]
    write_csv(rows, path)


def summary_text(res: PipelineResult) -> str:
    lines = ["rollout corpus (epoch: success/failure)"]
    for ep, c in res.corpus.counts.items():
        lines.append(f"  {ep}: {c[E.SUCCESS]}/{c[E.FAILURE]}")
    lines.append(f"MIL bag accuracy {bag_accuracy(res.mil, res.corpus.trajectories):.3f}")
    c = res.dataset.counts
    lines.append(f"instances at tau={res.dataset.tau:g}: " + ", ".join(f"{k} {c[k]}" for k in CLASS_NAMES)
                 + f" (IR / relevant = {res.dataset.imbalance():.1f})")
    lines.append("guide validation accuracy " + ", ".join(f"{k} {v:.2f}" for k, v in res.guide.val_accuracy.items()))
    lines.append("")
    lines.append("evaluation")
    for r in res.eval_rows:
        lines.append(f"  {r['checkpoint']:<14} {r['label']:<12} w_fr={r['w_fr']:<5g} "
                     f"{r['success_rate']:.3f} ({r['classifier_calls']} classifier calls)")
    lines.append("strength sweep")
    for r in res.strength_rows:
        lines.append(f"  w_fr={r['w_fr']:<5g} {r['schedule']:<12} {r['success_rate']:.3f}")
    if res.zscore_rows:
        lines.append("threshold sweep")
        for r in res.zscore_rows:
            flag = " degenerate" if r["degenerate"] else ""
            lines.append(f"  tau={r['tau']:<5g} SR {r['n_sr']} FR {r['n_fr']} IR {r['n_ir']} "
                         f"-> {r['success_rate']:.3f}{flag}")
    if res.hetero_rows:
        lines.append("heterogeneous deployment")
        for r in res.hetero_rows:
            lines.append(f"  {r['checkpoint']:<14} {r['label']:<12} w_fr={r['w_fr']:<5g} {r['success_rate']:.3f}")
    return "\n".join(lines) + "\n"

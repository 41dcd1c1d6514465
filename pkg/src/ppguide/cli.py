"""Command-line entry point. Each stage reads its inputs from, and writes its
outputs to, ``--out-dir``; ``pipeline`` runs them all.

Exit codes: 0 success, 1 usage or configuration error, 2 a stage's
precondition failed (for instance a single-outcome rollout corpus).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness as H
from .config import ConfigError, PipelineConfig, dump_config, load_config
from .guide import GuideModel
from .labels import InstanceDataset
from .mil import MilModel
from .policy import PolicyCheckpoint

EXIT_OK, EXIT_USAGE, EXIT_PRECONDITION = 0, 1, 2


class UsageError(Exception):
    pass


def _ckpt_path(out: Path, epoch: int) -> Path:
    return out / f"policy_e{epoch}.ppgn"


def _load_ckpts(out: Path, epochs) -> list[PolicyCheckpoint]:
    paths = [_ckpt_path(out, e) for e in epochs]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise H.PreconditionError(f"missing policy checkpoints: {', '.join(missing)} (run train-policy)")
    return [PolicyCheckpoint.load(p) for p in paths]


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise H.PreconditionError(f"{path} not found (run {stage} first)")
    return path


def _final(cfg, out) -> PolicyCheckpoint:
    return _load_ckpts(out, [cfg.policy_epochs])[0]


def _instances_path(cfg, out) -> Path:
    return out / f"instances_tau{cfg.tau:g}.ndjson"


def cmd_train_policy(cfg, out):
    demos = H.stage_demos(cfg)
    H.save_demos(demos, out / "demos.ndjson")
    for ck in H.stage_policy(cfg, demos):
        ck.save(_ckpt_path(out, ck.epoch))
        print(f"saved {_ckpt_path(out, ck.epoch)}")


def cmd_collect(cfg, out):
    corpus = H.collect_rollouts(_load_ckpts(out, cfg.collect_epochs()), cfg.rollout_episodes,
                                H._rollout_seed(cfg))
    corpus.save(out / "corpus.ndjson")
    for ep, c in corpus.counts.items():
        print(f"epoch {ep}: {c['success']} success, {c['failure']} failure")


def cmd_train_mil(cfg, out):
    corpus = H.RolloutCorpus.load(_need(out / "corpus.ndjson", "collect"))
    mil = H.stage_mil(cfg, corpus, _final(cfg, out).normalizer)
    mil.save(out / "mil.ppgn")
    alphas = [H.bag_attention(mil, tr) for tr in corpus.trajectories]
    H.write_attention_csv(corpus.trajectories, alphas, out / "attention.csv")
    print(f"bag accuracy {H.bag_accuracy(mil, corpus.trajectories):.3f}")


def cmd_label(cfg, out):
    corpus = H.RolloutCorpus.load(_need(out / "corpus.ndjson", "collect"))
    mil = MilModel.load(_need(out / "mil.ppgn", "train-mil"))
    ds, _ = H.stage_label(cfg, corpus, mil)
    ds.save(_instances_path(cfg, out))
    print(f"counts {ds.counts}, IR / relevant = {ds.imbalance():.1f}")


def cmd_train_guide(cfg, out):
    ds = InstanceDataset.load(_need(_instances_path(cfg, out), "label"))
    guide = H.stage_guide(cfg, ds, _final(cfg, out).normalizer)
    guide.save(out / "guide.ppgn")
    print("validation accuracy " + ", ".join(f"{k} {v:.2f}" for k, v in guide.val_accuracy.items()))


def cmd_eval(cfg, out):
    guide = GuideModel.load(_need(out / "guide.ppgn", "train-guide"))
    rows = []
    for ck in _load_ckpts(out, cfg.eval_epochs()):
        rows.extend(H.eval_arms(cfg, ck, guide))
    H.write_csv(rows, out / "eval.csv")
    for r in rows:
        print(f"{r['checkpoint']} {r['label']}: {r['success_rate']:.3f}")


def cmd_sweep_strength(cfg, out):
    guide = GuideModel.load(_need(out / "guide.ppgn", "train-guide"))
    rows = H.sweep_strength(_final(cfg, out), guide, [0.0, *cfg.strength_values], cfg.sr_ratio,
                            cfg.eval_episodes, cfg.eval_seed, base=cfg)
    H.write_csv(rows, out / "sweep_strength.csv")
    for r in rows:
        print(f"w_fr={r['w_fr']:g} {r['schedule']}: {r['success_rate']:.3f}")


def cmd_sweep_zscore(cfg, out):
    corpus = H.RolloutCorpus.load(_need(out / "corpus.ndjson", "collect"))
    mil = MilModel.load(_need(out / "mil.ppgn", "train-mil"))
    rows = H.sweep_zscore(corpus, mil, cfg.zscore_values, _final(cfg, out), cfg, cfg.eval_episodes, cfg.eval_seed)
    H.write_csv(rows, out / "sweep_zscore.csv")
    for r in rows:
        print(f"tau={r['tau']:g}: {r['success_rate']:.3f}{' (degenerate)' if r['degenerate'] else ''}")


def cmd_pipeline(cfg, out):
    res = H.run_pipeline(cfg, out)
    print(H.summary_text(res), end="")


COMMANDS = {
    "train-policy": cmd_train_policy,
    "collect": cmd_collect,
    "train-mil": cmd_train_mil,
    "label": cmd_label,
    "train-guide": cmd_train_guide,
    "eval": cmd_eval,
    "sweep-strength": cmd_sweep_strength,
    "sweep-zscore": cmd_sweep_zscore,
    "pipeline": cmd_pipeline,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out-dir", type=Path, default=Path("runs/default"))
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="ppguide", description="Relevance-guided diffusion policy pipeline on a 2D toy task.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config) if args.config else PipelineConfig()
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "show-config":
        print(dump_config(cfg), end="")
        return EXIT_OK
    args.out_dir.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](cfg, args.out_dir)
    except H.PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

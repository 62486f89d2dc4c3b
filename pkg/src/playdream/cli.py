"""Command-line front end for the play-table pipeline.

One subcommand per phase: collect play data, train the world model, train the
agent (or an ablated variant), then evaluate instruction chains / open-loop
rollouts and build comparison reports. All commands share --config/--preset
with --seed/--out overriding whatever the file says.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import checkpoint as ck
from . import config as C
from . import data as D
from . import evaluate as E
from . import trainer as TR


def _load_cfg(args) -> C.RunConfig:
    overrides = {"seed": getattr(args, "seed", None),
                 "out_dir": getattr(args, "out", None)}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if getattr(args, "config", None):
        return C.from_file(args.config, **overrides)
    return C.make_config(getattr(args, "preset", "desk"), **overrides)


def _add_common(p):
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory override")


def cmd_collect(args) -> int:
    cfg = _load_cfg(args)
    streams, annotations = TR.collect_data(cfg)
    steps = sum(s.length for s in streams)
    print(f"collected {len(streams)} streams ({steps} steps), "
          f"{len(annotations)} annotations -> {cfg.out_dir}/data")
    return 0


def cmd_train_wm(args) -> int:
    cfg = _load_cfg(args)
    path = TR.train_world_model(cfg, resume_from=args.resume)
    print(f"world model -> {path}")
    return 0


def cmd_train_agent(args) -> int:
    cfg = _load_cfg(args)
    path = TR.train_agent(cfg, variant="full", wm_ckpt=args.wm,
                          resume_from=args.resume)
    print(f"agent (full) -> {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    path = TR.ablation_run(args.variant, cfg, wm_ckpt=args.wm,
                           resume_from=args.resume)
    print(f"agent ({args.variant}) -> {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    agent_ckpt = Path(args.agent) if args.agent else \
        Path(cfg.out_dir) / "agent_full" / "agent.ckpt"
    wm_ckpt = Path(args.wm) if args.wm else Path(cfg.out_dir) / "wm" / "wm.ckpt"
    n = args.chains if args.chains is not None else cfg.eval_chains
    out_csv = Path(args.out_csv) if args.out_csv else agent_ckpt.parent / "chains.csv"
    rep = E.eval_chains(agent_ckpt, wm_ckpt, n_chains=n, seed=cfg.seed,
                        out_csv=out_csv)
    rates = " ".join(f"{r:.2f}" for r in rep.rates)
    print(f"chains={rep.n_chains} success@pos=[{rates}] avg_len={rep.avg_len:.2f} "
          f"wrong_color={rep.wrong_color_rate:.2f} -> {out_csv}")
    return 0


def cmd_openloop(args) -> int:
    cfg = _load_cfg(args)
    wm_ckpt = Path(args.wm) if args.wm else Path(cfg.out_dir) / "wm" / "wm.ckpt"
    _, wm, _ = TR.load_world_model(wm_ckpt)
    wm.set_requires_grad(False)
    hold_root = Path(args.holdout) if args.holdout else Path(cfg.out_dir) / "holdout"
    streams = D.StreamStore(hold_root).load_all()
    if not streams:
        raise FileNotFoundError(f"no holdout stream under {hold_root}")
    horizon = args.horizon if args.horizon is not None else cfg.eval_openloop_horizon
    out_dir = Path(args.report_dir) if args.report_dir else wm_ckpt.parent / "openloop"
    rep = E.eval_openloop(wm, streams[0], horizon,
                          context=cfg.eval_openloop_context,
                          n_clips=cfg.eval_openloop_clips, seed=cfg.seed,
                          out_dir=out_dir)
    if horizon > 0:
        print(f"horizon={horizon} mse={rep['pred_mse']:.5f} "
              f"baseline={rep['baseline_mse']:.5f} ratio={rep['ratio']:.3f} "
              f"-> {out_dir}")
    else:
        print(f"context reconstruction only -> {out_dir}")
    return 0


def cmd_report(args) -> int:
    path = E.report(args.run_dirs, args.dest)
    print(f"report -> {path}")
    return 0


def _parse_args(argv=None) -> argparse.Namespace:
    p = argparse.ArgumentParser(
        prog="playdream",
        description="language-conditioned imitation inside a learned world model")
    sub = p.add_subparsers(dest="cmd", required=True)

    pc = sub.add_parser("collect", help="record play streams + annotations")
    _add_common(pc)
    pc.set_defaults(fn=cmd_collect)

    pw = sub.add_parser("train-wm", help="train the world model on play data")
    _add_common(pw)
    pw.add_argument("--resume", default=None, help="checkpoint to resume from")
    pw.set_defaults(fn=cmd_train_wm)

    pa = sub.add_parser("train-agent", help="train the full agent in imagination")
    _add_common(pa)
    pa.add_argument("--wm", default=None, help="world-model checkpoint (default: <out>/wm/wm.ckpt)")
    pa.add_argument("--resume", default=None)
    pa.set_defaults(fn=cmd_train_agent)

    pb = sub.add_parser("ablate", help="train an ablated agent variant")
    _add_common(pb)
    pb.add_argument("--variant", required=True,
                    choices=["no_intrinsic", "no_plan", "no_alignment"])
    pb.add_argument("--wm", default=None)
    pb.add_argument("--resume", default=None)
    pb.set_defaults(fn=cmd_ablate)

    pe = sub.add_parser("eval", help="chained-instruction evaluation")
    _add_common(pe)
    pe.add_argument("--agent", default=None, help="agent checkpoint")
    pe.add_argument("--wm", default=None, help="world-model checkpoint")
    pe.add_argument("--chains", type=int, default=None)
    pe.add_argument("--out-csv", default=None)
    pe.set_defaults(fn=cmd_eval)

    po = sub.add_parser("openloop", help="open-loop rollout fidelity vs freeze-frame")
    _add_common(po)
    po.add_argument("--wm", default=None)
    po.add_argument("--holdout", default=None, help="holdout stream directory")
    po.add_argument("--horizon", type=int, default=None)
    po.add_argument("--report-dir", default=None)
    po.set_defaults(fn=cmd_openloop)

    pr = sub.add_parser("report", help="comparison table + curves over run dirs")
    pr.add_argument("run_dirs", nargs="+")
    pr.add_argument("--dest", default="report")
    pr.set_defaults(fn=cmd_report)

    return p.parse_args(argv)


def main(argv=None) -> int:
    args = _parse_args(argv)
    try:
        return args.fn(args)
    except (ck.CheckpointError, D.StreamFormatError, FileNotFoundError,
            ValueError) as e:
        # ConfigError subclasses ValueError; anything else is a real bug and
        # should traceback.
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

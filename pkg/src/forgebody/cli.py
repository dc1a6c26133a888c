"""Command-line entry points: train, eval, serve, replay, export-limits."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


def _setup_logging():
    level = os.environ.get("FORGEBODY_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def main(argv=None):
    _setup_logging()
    parser = argparse.ArgumentParser(prog="forgebody",
                                     description="planar legged-manipulator workbench")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_train = sub.add_parser("train", help="run PPO training")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--resume", action="store_true")

    p_eval = sub.add_parser("eval", help="run an evaluation suite on a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--model", default="models/b1z1_planar.json")
    p_eval.add_argument("--suite", required=True,
                        choices=["force", "workspace", "position", "pulldown",
                                 "compliance", "impedance", "all"])
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--n", type=int, default=None, help="trial count override")
    p_eval.add_argument("--seed", type=int, default=0)

    p_serve = sub.add_parser("serve", help="run the real-time teleoperation server")
    p_serve.add_argument("--checkpoint", required=True)
    p_serve.add_argument("--model", default="models/b1z1_planar.json")
    p_serve.add_argument("--port", type=int, default=8750)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--fast", action="store_true", help="no wall-clock pacing")
    p_serve.add_argument("--record", default=None, help="record frames to this file")
    p_serve.add_argument("--seed", type=int, default=0)

    p_replay = sub.add_parser("replay", help="replay a recorded session")
    p_replay.add_argument("recording")
    p_replay.add_argument("--port", type=int, default=8750)
    p_replay.add_argument("--host", default="127.0.0.1")
    p_replay.add_argument("--speed", type=float, default=1.0)

    sub.add_parser("export-limits", help="print the command limit box as JSON")

    args = parser.parse_args(argv)

    if args.cmd == "train":
        from .learn import TrainConfig, train
        cfg = TrainConfig.from_json(args.config)
        final = train(cfg, args.out, resume=args.resume,
                      log_fn=lambda row: print(
                          f"update {row['update']:5d}  reward {row['mean_reward']:7.3f}  "
                          f"force_err {row['force_err']:6.2f}  pos_err {row['pos_err']:5.3f}  "
                          f"term {row['term_rate']:.3f}", flush=True))
        print(f"final checkpoint: {final}")

    elif args.cmd == "eval":
        from .evaluation import (compliance_probe, force_sweep, impedance_probe,
                                 impedance_probe_oracle, position_error_eval,
                                 pulldown_test, workspace_eval)
        from .model import load_model, default_model_path
        from .policy import load_checkpoint
        model = load_model(args.model)
        bundle = load_checkpoint(args.checkpoint, model)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        suites = [args.suite] if args.suite != "all" else \
            ["force", "workspace", "position", "pulldown", "compliance", "impedance"]
        for suite in suites:
            if suite == "force":
                rep = force_sweep(bundle, model, n_setpoints=args.n or 1000,
                                  out_dir=out, seed=args.seed)
                print(f"force: interior tracking {rep.interior_tracking_mean:.2f} N, "
                      f"estimation {rep.interior_estimation_mean:.2f} N, "
                      f"failures {rep.n_failures}/{rep.n_trials}")
            elif suite == "workspace":
                rep = workspace_eval(bundle, model, out_dir=out, seed=args.seed)
                print(f"workspace: whole-body {rep.whole_body_area:.3f} m^2, "
                      f"arm {rep.arm_area:.3f} m^2, ratio {rep.ratio:.2f}")
            elif suite == "position":
                rep = position_error_eval(bundle, model, n=args.n or 1000,
                                          out_dir=out, seed=args.seed)
                print(f"position: mean |err| x {rep.mean_abs_x * 100:.1f} cm, "
                      f"z {rep.mean_abs_z * 100:.1f} cm")
            elif suite == "pulldown":
                rep = pulldown_test(bundle, model, out_dir=out, seed=args.seed)
                print(f"pulldown: mean |err| {rep.mean_abs_err:.2f} N "
                      f"(std {rep.std_err:.2f}), terminated {rep.n_terminated}")
            elif suite == "compliance":
                rep = compliance_probe(bundle, model, out_dir=out, seed=args.seed)
                print(f"compliance: displacement {rep.displacement * 100:.1f} cm, "
                      f"mean force {rep.mean_force:.2f} N, "
                      f"terminated {rep.terminated}")
            elif suite == "impedance":
                rep = impedance_probe(bundle, model, seed=args.seed)
                rep.to_json(out / "impedance.json")
                print(f"impedance: displacement {rep.displacement * 100:.2f} cm "
                      f"(expected {rep.expected * 100:.2f}), "
                      f"rel err {rep.relative_error * 100:.1f} %")

    elif args.cmd == "serve":
        from .service import serve
        serve(args.checkpoint, args.model, port=args.port, host=args.host,
              fast=args.fast, record=args.record, seed=args.seed)

    elif args.cmd == "replay":
        from .service import serve_replay
        serve_replay(args.recording, port=args.port, host=args.host, speed=args.speed)

    elif args.cmd == "export-limits":
        from .service import command_limits
        print(json.dumps(command_limits(), indent=2))

    return 0


if __name__ == "__main__":
    sys.exit(main())

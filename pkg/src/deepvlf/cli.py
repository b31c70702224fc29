"""``deepvlf`` command line: train, eval, sweep, gradcheck, replay.

Exit codes: 0 success, 1 check failed, 2 configuration error, 3 training
divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from . import config as cfgmod
from .codec import CheckpointError, init_params, load_checkpoint, save_checkpoint
from .evaluation import SweepSpec, emit_csv, estimate, sweep
from .protocol import OracleCodec, read_transcripts, replay_verify, run_sessions, write_transcripts
from .training import TrainingDiverged, calibrate_power, grad_check, train, write_metrics_line

log = logging.getLogger("deepvlf")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4


def _resolve_seed(args, cfg: cfgmod.RunConfig) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DEEPVLF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise cfgmod.ConfigError(f"DEEPVLF_SEED={env!r} is not an integer") from exc
    return cfg.seed


def _load_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load(args.config, args.set)
    seed = _resolve_seed(args, cfg)
    if seed != cfg.seed:
        cfg = cfgmod.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


def _load_codec(path, cfg: cfgmod.RunConfig):
    return load_checkpoint(path, cfg.codec_config())


def _val_fn(cfg: cfgmod.RunConfig):
    def run(codec, gamma):
        r = estimate(codec, cfg.protocol_config(gamma), cfg.training.val_sessions,
                     seed=cfg.seed + 1_000_003, chunk_size=cfg.eval.chunk_size)
        return r.as_metrics()
    return run


def cmd_train(args, cfg: cfgmod.RunConfig) -> int:
    tc = cfg.train_config()
    phases = ("pretrain", "finetune") if args.phase == "both" else (args.phase,)
    if args.init:
        codec = _load_codec(args.init, cfg)
    else:
        codec = init_params(cfg.codec_config(), cfg.seed)
    ckpt = args.out or cfg.paths.checkpoint
    metrics = args.metrics or cfg.paths.metrics
    with open(metrics, "a") as fh:
        try:
            train(tc, codec, cfg.channel, phases=phases,
                  log_sink=lambda rec: write_metrics_line(fh, rec),
                  val_fn=_val_fn(cfg) if tc.val_every else None,
                  checkpoint_path=ckpt + ".best" if tc.val_every else None)
        except TrainingDiverged as exc:
            save_checkpoint(exc.codec, ckpt, extra={"diverged_at": exc.step})
            print(f"error: {exc}; last good parameters written to {ckpt}", file=sys.stderr)
            return EXIT_DIVERGED
    calibrate_power(codec, cfg.channel, tc.target_gamma, seed=cfg.seed)
    save_checkpoint(codec, ckpt, extra={"phases": list(phases)})
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def cmd_eval(args, cfg: cfgmod.RunConfig) -> int:
    n = args.n_sessions if args.n_sessions is not None else cfg.eval.n_sessions
    if n < 1:
        raise cfgmod.ConfigError("--n-sessions must be at least 1")
    codec = OracleCodec(cfg.codec_config()) if args.oracle_stub else _load_codec(
        args.checkpoint or cfg.paths.checkpoint, cfg)
    proto = cfg.protocol_config(args.gamma)
    result = estimate(codec, proto, n, cfg.seed, cfg.eval.chunk_size)
    out = args.csv or cfg.paths.csv
    emit_csv([result], out)
    if args.transcripts:
        trs = run_sessions(codec, proto, cfg.seed, 0, min(n, args.n_transcripts),
                           chunk_size=cfg.eval.chunk_size)
        write_transcripts(trs, args.transcripts)
    print(f"bler={result.bler:.6g} rate={result.avg_code_rate:.6g} "
          f"power={result.avg_power:.6g} n={result.n_sessions}")
    return EXIT_OK


def cmd_sweep(args, cfg: cfgmod.RunConfig) -> int:
    gammas = tuple(args.gammas) if args.gammas else tuple(cfg.eval.gammas)
    snrs = tuple(args.snrs) if args.snrs else tuple(cfg.eval.snrs)
    spec = SweepSpec(gammas, snrs, args.n_sessions or cfg.eval.n_sessions, cfg.seed,
                     cfg.eval.seed_policy, cfg.channel.feedback_mode, cfg.channel.feedback_snr_db)
    if args.checkpoint_map:
        codecs = {}
        for item in args.checkpoint_map:
            g, path = item.split("=", 1)
            try:
                codecs[float(g)] = _load_codec(path, cfg)
            except FileNotFoundError:
                log.warning("checkpoint %s missing", path)
        codecs = {g: codecs.get(g) for g in gammas}
    else:
        codecs = _load_codec(args.checkpoint or cfg.paths.checkpoint, cfg)
    results, skipped = sweep(spec, codecs, chunk_size=cfg.eval.chunk_size)
    for s in skipped:
        print(json.dumps({"warning": "skipped", **s}), file=sys.stderr)
    if not results:
        print("error: no sweep point could be evaluated", file=sys.stderr)
        return EXIT_IO
    emit_csv(results, args.csv or cfg.paths.csv)
    return EXIT_OK


def cmd_gradcheck(args, cfg: cfgmod.RunConfig) -> int:
    report = grad_check(cfg.seed, rel_tol=args.rel_tol, max_tol=args.max_tol)
    summary = report.as_dict()
    # wall time goes to stderr so that stdout is reproducible for a given seed
    print(f"gradcheck took {summary.pop('seconds'):.1f}s", file=sys.stderr)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_replay(args, cfg: cfgmod.RunConfig) -> int:
    codec = OracleCodec(cfg.codec_config()) if args.oracle_stub else _load_codec(
        args.checkpoint or cfg.paths.checkpoint, cfg)
    bad = 0
    for tr in read_transcripts(args.transcripts):
        res = replay_verify(tr, cfg.protocol_config(tr.gamma), codec)
        if not res:
            bad += 1
            print(f"session {tr.session}: diverged at round {res.round} ({res.field})")
    print("replay ok" if not bad else f"replay failed for {bad} session(s)")
    return EXIT_OK if not bad else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable, last wins)")
    common.add_argument("--seed", type=int, help="master seed (falls back to $DEEPVLF_SEED)")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="intra-op threads; use 1 for bitwise reproducibility")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="deepvlf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="pretrain and/or fine-tune a codec")
    t.add_argument("--phase", choices=("both", "pretrain", "finetune"), default="both")
    t.add_argument("--init", help="start from this checkpoint instead of fresh parameters")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--metrics", help="metrics log path (JSON lines, appended)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="Monte-Carlo BLER / rate / power")
    e.add_argument("--checkpoint")
    e.add_argument("--n-sessions", type=int)
    e.add_argument("--gamma", type=float)
    e.add_argument("--csv")
    e.add_argument("--oracle-stub", action="store_true", help="harness self-test codec")
    e.add_argument("--transcripts", help="also write per-session transcripts (JSON lines)")
    e.add_argument("--n-transcripts", type=int, default=100)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", parents=[common], help="evaluate a grid of thresholds and SNRs")
    s.add_argument("--checkpoint", help="one checkpoint shared by all thresholds")
    s.add_argument("--checkpoint-map", action="append", metavar="GAMMA=PATH",
                   help="fine-tuned checkpoint per threshold (repeatable)")
    s.add_argument("--gammas", type=float, nargs="+")
    s.add_argument("--snrs", type=float, nargs="+")
    s.add_argument("--n-sessions", type=int)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_sweep)

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    g.add_argument("--rel-tol", type=float, default=1e-4)
    g.add_argument("--max-tol", type=float, default=1e-3)
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("replay", parents=[common], help="verify transcripts by re-execution")
    r.add_argument("transcripts")
    r.add_argument("--checkpoint")
    r.add_argument("--oracle-stub", action="store_true")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.workers))
    try:
        cfg = _load_config(args)
        return args.func(args, cfg)
    except (cfgmod.ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

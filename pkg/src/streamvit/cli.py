"""``streamvit`` command line: train, eval, stream and bench.

Exit status is 0 on success, 2 for usage problems (bad flags, missing input
files) and 1 for failures while running. Every failure prints exactly one
``streamvit: error: ...`` line to stderr.

``STREAMVIT_SEED`` sets the seed of every subcommand unless ``--seed`` is
given explicitly; for ``train`` it also overrides the config file's seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StreamVitError, UsageError

SEED_ENV = "STREAMVIT_SEED"
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("streamvit")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _seed(args: argparse.Namespace, default: int = 0) -> int:
    if args.seed is not None:
        return args.seed
    env = _env_seed()
    return default if env is None else env


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {path!r} does not exist")
    return p


def _t_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("frame counts must be positive")
    return values


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    from .trainer import Trainer, load_train_config

    if args.resume:
        trainer = Trainer.resume(_existing(args.resume, "checkpoint"))
        if args.config:
            fresh = load_train_config(_existing(args.config, "config file"))
            trainer.config.steps = fresh.steps
            trainer.config.checkpoint = fresh.checkpoint
            trainer.config.metrics = fresh.metrics
    elif args.config:
        config = load_train_config(_existing(args.config, "config file"))
        if args.seed is not None or _env_seed() is not None:
            config.seed = _seed(args)
        trainer = Trainer(config)
    else:
        raise UsageError("train needs --config (or --resume)")
    if args.steps is not None:
        trainer.config.steps = args.steps
    if args.checkpoint:
        trainer.config.checkpoint = args.checkpoint
    start = trainer.state.step
    state = trainer.run()
    last = {t.value: round(h[-1], 6) for t, h in state.history.items() if h}
    print(f"trained steps {start}..{state.step - 1}; final losses {last}")
    if trainer.config.checkpoint:
        print(f"checkpoint written to {trainer.config.checkpoint}")
    return EXIT_OK


def _load_model(path: str | None, seed: int):
    from .model import StreamModel
    from .trainer import load_checkpoint

    if path is None:
        return StreamModel(seed=seed)
    return load_checkpoint(_existing(path, "checkpoint")).model


def cmd_eval(args: argparse.Namespace) -> int:
    from .evaluate import evaluate
    from .trainer import heldout_seed

    seed = _seed(args)
    model = _load_model(args.checkpoint, seed)
    data_seed = args.data_seed if args.data_seed is not None else heldout_seed(seed)
    result = evaluate(model, args.task, n=args.n, seed=data_seed)
    print(result.summary())
    return EXIT_OK


def _read_frames(directory: Path) -> np.ndarray:
    from .checkpoint import read_container

    if not directory.is_dir():
        raise UsageError(f"frames path {str(directory)!r} is not a directory")
    files = sorted(p for p in directory.iterdir() if p.suffix in (".npy", ".svc"))
    if not files:
        raise UsageError(f"no .npy or .svc files in {str(directory)!r}")
    chunks = []
    for p in files:
        if p.suffix == ".npy":
            arr = np.load(p, allow_pickle=False)
        else:
            _, tensors = read_container(p)
            if "frames" not in tensors:
                raise StreamVitError(f"{p.name} holds no 'frames' tensor")
            arr = tensors["frames"]
        chunks.append(arr[None] if arr.ndim == 3 else arr)
    try:
        return np.concatenate(chunks)
    except ValueError as e:
        raise StreamVitError(f"frame files disagree in shape: {e}") from None


def cmd_stream(args: argparse.Namespace) -> int:
    from .backbone import VideoClip
    from .checkpoint import write_container

    model = _load_model(args.checkpoint, _seed(args))
    frames = VideoClip(_read_frames(Path(args.frames))).frames.astype(model.config.np_dtype)
    bb = model.backbone.with_mode("causal")
    session = bb.stream_open()
    vs, Fs = [], []
    try:
        for frame in frames:
            out = session.step(frame)
            vs.append(out.v.data.copy())
            Fs.append(out.F.data[0].copy())
    finally:
        session.close()
    v = np.stack(vs)
    if args.out:
        write_container(
            args.out,
            {"kind": "stream-features", "frames": str(len(vs))},
            {"v": v, "F": np.stack(Fs)},
        )
        print(f"wrote features of {len(vs)} frames to {args.out}")
    else:
        out = sys.stdout
        out.write("t," + ",".join(f"v{i}" for i in range(v.shape[1])) + "\n")
        for t, row in enumerate(v):
            out.write(f"{t}," + ",".join(f"{x:.6g}" for x in row) + "\n")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    from .bench import MODES, format_csv, run_bench
    from .config import preset

    modes = tuple(args.modes.split(",")) if args.modes else MODES
    if args.checkpoint:
        model = _load_model(args.checkpoint, 0)
        config, backbone = model.config, model.backbone
        if config.max_frames < max(args.t_list):
            raise UsageError(f"checkpoint max_frames {config.max_frames} is below t={max(args.t_list)}")
    else:
        config, backbone = preset(args.preset), None
    records, summary = run_bench(
        config,
        args.t_list,
        reps=args.reps,
        warmup=args.warmup,
        seed=_seed(args),
        modes=modes,
        max_batch_t=args.max_batch_t,
        backbone=backbone,
    )
    text = format_csv(records)
    if args.out == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    for key, value in summary.items():
        print(f"{key}={value:.4g}", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="streamvit", description="Streaming video backbone toolkit.")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="multi-task training from a key = value config file")
    p.add_argument("--config", help="training config file")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--steps", type=int, help="override the number of steps")
    p.add_argument("--checkpoint", help="override where the final checkpoint is written")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="zero-shot metrics on fresh synthetic data")
    p.add_argument("--checkpoint", help="model checkpoint (omit for an untrained model)")
    p.add_argument("--task", required=True, choices=("ar", "tal", "vos"))
    p.add_argument("--n", type=int, default=128, help="number of held-out clips")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-seed", type=int, help="synthetic data stream (default: held-out stream of --seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stream", help="feed frames one at a time and dump per-frame features")
    p.add_argument("--checkpoint", help="model checkpoint (omit for an untrained model)")
    p.add_argument("--frames", required=True, help="directory of .npy frames or .svc sample files")
    p.add_argument("--out", help="write a feature container here instead of CSV to stdout")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="streaming latency benchmark, CSV output")
    p.add_argument("--t-list", type=_t_list, required=True, help="comma-separated frame counts")
    p.add_argument("--out", required=True, help="CSV path, or - for standard output")
    p.add_argument("--preset", default="desk")
    p.add_argument("--checkpoint", help="benchmark this model instead of a random one")
    p.add_argument("--modes", help="comma-separated subset of modes")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--max-batch-t", type=int, default=1024)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"streamvit: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (StreamVitError, OSError, ValueError) as e:
        print(f"streamvit: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except SystemExit as e:  # --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())

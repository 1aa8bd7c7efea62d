"""``dmm`` command line: gen-data, train, eval, predict.

Set ``DMM_THREADS`` to bound the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_config, load_config
from .evaluate import evaluate, summarize, write_results
from .infer import DEFAULT_EPSILON, predict
from .synthdata import GENERATORS, load_dataset, read_pgm, save_dataset, write_pgm
from .train import TrainState, read_telemetry, train, write_telemetry

log = logging.getLogger("dmm")

CHECKPOINT_NAME = "checkpoint.dmmc"
TELEMETRY_NAME = "telemetry.csv"


def cmd_gen_data(args) -> int:
    ds = GENERATORS[args.task](args.n, size=args.size, seed=args.seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} {args.task} entries ({args.size}x{args.size}) to {args.out}")
    return 0


def cmd_train(args) -> int:
    rc = load_config(args.config, preset=args.preset)
    if args.log_recon:
        rc.train.log_recon = True
    if rc.dataset is None:
        raise ValueError(f"{args.config}: no 'dataset' key")
    dataset = load_dataset(rc.dataset)
    out = Path(args.out_dir or rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(rc))
    ckpt_path = out / CHECKPOINT_NAME
    tele_path = out / TELEMETRY_NAME

    state: Optional[TrainState] = None
    if args.resume:
        state = load_checkpoint(args.resume)
        if state.config.to_dict() != rc.train.to_dict():
            # the checkpoint is authoritative; only the epoch budget may be extended
            epochs = rc.train.epochs
            rc.train = state.config
            rc.train.epochs = max(epochs, state.epoch)
            state.config = rc.train
        rows = read_telemetry(tele_path) if tele_path.exists() else []
        write_telemetry(tele_path, [r for r in rows if r.epoch < state.epoch])
        log.info("resuming from epoch %d", state.epoch)

    def checkpoint(s: TrainState) -> None:
        save_checkpoint(ckpt_path, s)
        if s.epoch < s.config.epochs:
            save_checkpoint(out / f"checkpoint_e{s.epoch:05d}.dmmc", s)

    state = train(rc.train, dataset, state=state, checkpoint_fn=checkpoint,
                  telemetry_path=tele_path)
    last = state.telemetry[-1] if state.telemetry else None
    msg = f"trained to epoch {state.epoch}; checkpoint {ckpt_path}"
    if last is not None:
        msg += f"; final total={last.total:.4f} active codes={last.active_code_count}"
    print(msg)
    return 0


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.dataset)
    results = evaluate(state.model, dataset, epsilon=args.epsilon)
    write_results(args.out, results)
    print(summarize(results).line())
    return 0


def cmd_predict(args) -> int:
    state = load_checkpoint(args.checkpoint)
    image = read_pgm(args.image)
    pred = predict(image, state.model, epsilon=args.epsilon, renormalize=args.renormalize)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["rank code probability"]
    for rank, ((mask, p), code) in enumerate(zip(pred.items, pred.code_indices)):
        write_pgm(out / f"pred_{rank}_p{p:.4f}.pgm", mask)
        lines.append(f"{rank} {code} {p:.6f}")
    (out / "predictions.txt").write_text("\n".join(lines) + "\n")
    print(f"{pred.n_x} predictions written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic multi-label dataset")
    g.add_argument("--task", required=True, choices=sorted(GENERATORS))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config")
    t.add_argument("--preset", choices=["desk", "paper"], default=None)
    t.add_argument("--resume", metavar="CHECKPOINT")
    t.add_argument("--out-dir", help="overrides out_dir from the config")
    t.add_argument("--log-recon", action="store_true",
                   help="use log(reconstruction loss) in the objective")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-entry GED and mode probabilities")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="write every surviving output for one image")
    r.add_argument("checkpoint")
    r.add_argument("image", help="P5 graymap")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    r.add_argument("--renormalize", action="store_true",
                   help="rescale surviving probabilities to sum to 1")
    r.set_defaults(func=cmd_predict)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("DMM_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"dmm: error: DMM_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as e:
        print(f"dmm: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

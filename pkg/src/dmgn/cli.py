"""Command-line entry point: ``dmgn <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 IO error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from .autodiff import NumericFault
from .config import ConfigError, RunConfig
from .gradcheck import full_pass_gradcheck
from .metrics import MetricReport, evaluate_corpus, identity_restorer
from .synth import CorpusError, corpus_checksum, corpus_read, corpus_write, generate_corpus, read_png, write_png
from .trainer import Trainer, dump_masks, infer, load_checkpoint, restorer, save_checkpoint, write_log

log = logging.getLogger("dmgn")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3
RESOLVED = "resolved.cfg"
GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _resolve(args) -> RunConfig:
    run = cfgmod.load(args.config) if args.config else RunConfig()
    cfgmod.apply_overrides(run, args.set or [])
    for dotted, value in _flag_overrides(args):
        cfgmod.apply_overrides(run, [f"{dotted}={value}"])
    run.train.corpus = run.paths.corpus
    run.validate()
    return run


def _flag_overrides(args):
    # flags win over the config file and --set
    table = {
        "kind": "synth.kind",
        "count": "synth.count",
        "size": "synth.size",
        "workers": "synth.workers",
        "variant": "train.variant",
        "steps": "train.steps",
        "lr": "train.lr",
        "batch": "train.batch",
        "checkpoint_every": "train.checkpoint_every",
        "corpus": "paths.corpus",
        "out": "paths.out",
        "checkpoint": "paths.checkpoint",
    }
    for attr, dotted in table.items():
        value = getattr(args, attr, None)
        if value is not None:
            yield dotted, value
    seed = getattr(args, "seed", None)
    if seed is not None:
        yield ("synth.seed" if args.command == "synth" else "train.seed"), seed
    beta = getattr(args, "beta", None)
    if beta is not None:
        yield "synth.beta", f"{beta},{beta}"


def _require(value: str, what: str) -> Path:
    if not value:
        raise ConfigError(f"{what} is required")
    return Path(value)


def _emit_config(run: RunConfig, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / RESOLVED).write_text(cfgmod.dump(run))


# --------------------------------------------------------------------------
# commands


def cmd_synth(run: RunConfig, args) -> int:
    out = _require(run.paths.out, "output directory (--out)")
    triples = generate_corpus(run.synth, run.synth_run.count, run.synth_run.workers)
    corpus_write(triples, out)
    _emit_config(run, out)
    print(f"wrote {len(triples)} {run.synth.kind} triples ({run.synth.size}x{run.synth.size}) to {out}")
    print(f"checksum {corpus_checksum(out)}")
    return 0


def cmd_train(run: RunConfig, args) -> int:
    corpus = _require(run.paths.corpus, "corpus (--corpus)")
    out = _require(run.paths.out, "output directory (--out)")
    triples = corpus_read(corpus)
    _emit_config(run, out)
    if args.resume:
        trainer = Trainer.resume(load_checkpoint(args.resume), triples, out / "faults")
    else:
        trainer = Trainer(run.train, triples, out / "faults")
    try:
        ckpt = trainer.run(out / "checkpoints", log_every=args.log_every)
    finally:
        write_log(trainer.log, out / "train_log.csv")
    save_checkpoint(ckpt, out / "final.ckpt")
    last = trainer.log[-1]["total"] if trainer.log else float("nan")
    print(f"trained {run.train.variant} for {ckpt.step} steps; final total loss {last:.5f}")
    print(f"checkpoint {out / 'final.ckpt'}")
    return 0


def _eval_chunk(job):
    ckpt_path, triples = job
    restore = identity_restorer if ckpt_path is None else restorer(load_checkpoint(ckpt_path).model())
    return evaluate_corpus(restore, triples)


def cmd_eval(run: RunConfig, args) -> int:
    triples = corpus_read(_require(run.paths.corpus, "corpus (--corpus)"))
    if not triples:
        raise ConfigError(f"corpus {run.paths.corpus} is empty")
    ckpt = None if args.identity else str(_require(run.paths.checkpoint, "--checkpoint or --identity"))
    workers = max(1, min(run.synth_run.workers, len(triples)))
    chunks = [triples[k::workers] for k in range(workers)]
    if workers == 1:
        parts = [_eval_chunk((ckpt, triples))]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_eval_chunk, [(ckpt, c) for c in chunks]))
    by_id = {}
    for rep in parts:
        by_id.update({i: (p, s) for i, p, s in zip(rep.ids, rep.psnr, rep.ssim)})
    report = MetricReport()
    for t in triples:
        report.ids.append(t.id)
        report.psnr.append(by_id[t.id][0])
        report.ssim.append(by_id[t.id][1])
    print(report.table())
    print(f"mean PSNR {report.mean_psnr:.4f} dB  mean SSIM {report.mean_ssim:.4f}")
    if run.paths.out:
        out = Path(run.paths.out)
        _emit_config(run, out)
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(report.table() + "\n")
    return 0


def _load_inputs(run: RunConfig, args) -> tuple[list[str], list[np.ndarray]]:
    if args.images:
        paths = sorted(Path(args.images).glob("*.png"))
        if not paths:
            raise CorpusError(f"no PNG images in {args.images}")
        return [p.stem for p in paths], [read_png(p) for p in paths]
    triples = corpus_read(_require(run.paths.corpus, "--corpus or --images"))
    return [t.id for t in triples], [t.input for t in triples]


def cmd_infer(run: RunConfig, args) -> int:
    model = load_checkpoint(_require(run.paths.checkpoint, "--checkpoint")).model()
    out = _require(run.paths.out, "output directory (--out)")
    ids, images = _load_inputs(run, args)
    finals, noises = infer(model, images)
    out.mkdir(parents=True, exist_ok=True)
    for i, b, r in zip(ids, finals, noises):
        write_png(out / f"{i}_Bhat.png", b)
        if r is not None:
            write_png(out / f"{i}_Rhat.png", r)
    _emit_config(run, out)
    print(f"wrote {len(ids)} restored images to {out}")
    return 0


def cmd_dump_masks(run: RunConfig, args) -> int:
    model = load_checkpoint(_require(run.paths.checkpoint, "--checkpoint")).model()
    out = _require(run.paths.out, "output directory (--out)")
    if args.image:
        image = read_png(Path(args.image))
    else:
        triples = corpus_read(_require(run.paths.corpus, "--image or --corpus"))
        if not 0 <= args.index < len(triples):
            raise ConfigError(f"--index {args.index} out of range for {len(triples)} triples")
        image = triples[args.index].input
    dump = dump_masks(model, image)
    out.mkdir(parents=True, exist_ok=True)
    for name, img in zip(dump.names, dump.images):
        Image.fromarray(img).save(out / f"{name}.png")
    (out / "masks.txt").write_text(dump.table() + "\n")
    _emit_config(run, out)
    print(dump.table())
    return 0


def cmd_gradcheck(run: RunConfig, args) -> int:
    errors = full_pass_gradcheck(args.gc_size, args.gc_channels, args.gc_seed, args.samples)
    width = max(len(g) for g in errors)
    for g, e in errors.items():
        print(f"{g:<{width}}  {e:.3e}  {'ok' if e < GRADCHECK_TOL else 'FAIL'}")
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} over {len(errors)} groups (tolerance {GRADCHECK_TOL:g})")
    if worst >= GRADCHECK_TOL:
        raise NumericFault(f"gradient check failed: max relative error {worst:.3e}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dmgn", description="Synthetic-corruption restoration lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="key=value config file with [section] headers")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config entry")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--kind", choices=("reflection", "rain", "haze"))
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--beta", type=float, help="fixed haze scattering coefficient")
    p.add_argument("--workers", type=int, help="parallel synthesis processes")
    p.add_argument("--out", help="corpus directory to write")

    p = sub.add_parser("train", help="train one variant on a corpus")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--out", help="run directory (checkpoints, log, resolved config)")
    p.add_argument("--variant", choices=("base", "rdmc", "r-rdmc", "coarse", "full"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint (or the identity) on a corpus")
    common(p)
    p.add_argument("--corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="score the unprocessed inputs")
    p.add_argument("--workers", type=int, help="parallel evaluation processes")
    p.add_argument("--out", help="optional directory for report.csv / report.txt")

    p = sub.add_parser("infer", help="restore images with a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--images", help="directory of RGB PNGs instead of a corpus")
    p.add_argument("--out")

    p = sub.add_parser("dump-masks", help="write per-cell mask images and mean table")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--image", help="RGB PNG to trace")
    p.add_argument("--corpus")
    p.add_argument("--index", type=int, default=0, help="triple index when tracing a corpus input")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="64-bit finite-difference check of the full pass")
    common(p)
    p.add_argument("--size", dest="gc_size", type=int, default=8, metavar="N", help="image side")
    p.add_argument("--channels", dest="gc_channels", type=int, default=4, metavar="C", help="feature width")
    p.add_argument("--samples", type=int, default=3, help="coordinates probed per tensor")
    p.add_argument("--seed", dest="gc_seed", type=int, default=0, metavar="SEED")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "dump-masks": cmd_dump_masks,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        run = _resolve(args)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

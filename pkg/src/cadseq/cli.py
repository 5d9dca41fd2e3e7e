"""Command-line entry point: ``cadseq <command> [options]``.

Exit codes: 0 success, 1 validation or parse failure, 2 I/O failure, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from cadseq import bench, dataset, geometry, io, metrics
from cadseq.core import MAX_TOKENS, CadError, CadSequence, deserialize_sequence, serialize_tree, validate_sequence
from cadseq.numerics import checkpoint
from cadseq.numerics import tensor as T

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class InvalidInput(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _write(text: str, out) -> None:
    if out in (None, "-"):
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _read_sequence(path) -> CadSequence:
    data = Path(path).read_bytes()
    if data[:4] == io.TOKEN_MAGIC:
        return io.sequence_from_bytes(data)
    return io.loads_sequence(data.decode())


def _read_tree_or_sequence(path):
    data = Path(path).read_bytes()
    if data[:4] == io.TOKEN_MAGIC:
        return deserialize_sequence(io.sequence_from_bytes(data))
    d = json.loads(data)
    if "nodes" in d:
        return io.tree_from_dict(d)
    return deserialize_sequence(io.sequence_from_dict(d))


def _load_dir(path) -> list[CadSequence]:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"not a directory: {p}")
    return dataset.read_corpus(p)


# ---------------------------------------------------------------------------
# codec commands


def cmd_tokenize(args) -> int:
    tree = io.load_tree(args.input)
    seq = serialize_tree(tree, args.n_ts)
    if args.binary:
        if args.out in (None, "-"):
            sys.stdout.buffer.write(io.sequence_to_bytes(seq))
        else:
            Path(args.out).write_bytes(io.sequence_to_bytes(seq))
    else:
        _write(io.dumps_sequence(seq), args.out)
    return EXIT_OK


def cmd_detokenize(args) -> int:
    tree = deserialize_sequence(_read_sequence(args.input))
    _write(io.dumps_tree(tree), args.out)
    return EXIT_OK


def cmd_validate(args) -> int:
    report = validate_sequence(_read_sequence(args.input), args.resolution)
    _write(json.dumps(asdict(report) | {"ok": report.ok}, sort_keys=True), args.out)
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_execute(args) -> int:
    tree = _read_tree_or_sequence(args.input)
    grid = geometry.execute(tree, args.resolution)
    out = Path(args.out) if args.out not in (None, "-") else None
    if out is None:
        _write(json.dumps({"resolution": grid.resolution, "volume": grid.volume(),
                           "occupied_fraction": grid.occupied_fraction()}), None)
        return EXIT_OK
    out.parent.mkdir(parents=True, exist_ok=True)
    fmt = args.format or {".obj": "obj", ".f32": "f32", ".bin": "f32"}.get(out.suffix, "voxel")
    if fmt == "voxel":
        out.write_bytes(geometry.voxel_to_bytes(grid))
    else:
        cloud = geometry.sample_points(grid, args.points, args.seed)
        (geometry.write_obj if fmt == "obj" else geometry.write_points_f32)(cloud, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# data commands


def cmd_gen_data(args) -> int:
    if args.out in (None, "-"):
        raise InvalidInput("gen-data needs --out DIR")
    trees = dataset.generate(args.n, (args.min_len, args.max_len), args.seed)
    manifest = dataset.write_corpus(args.out, trees, seed=args.seed, n_ts=args.n_ts,
                                    extra={"length_range": [args.min_len, args.max_len]})
    print(json.dumps({"count": manifest["count"], "out": str(args.out)}))
    return EXIT_OK


def cmd_stats(args) -> int:
    corpus = _load_dir(args.input)
    s = dataset.stats(corpus, args.count)
    _write(dataset.stats_csv({Path(args.input).name or "corpus": s}, include_reference=True), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# model commands


def _train_overrides(args) -> dict:
    over = {}
    for name in ("steps", "lr", "batch", "T", "eta", "clip", "checkpoint_every", "epochs"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    return over


def _train_config(args):
    from cadseq.diffusion import TrainConfig

    cfg = TrainConfig.full() if args.profile == "full" else TrainConfig()
    return replace(cfg, seed=args.seed, **_train_overrides(args))


def _model_config(args, n_ts: int):
    from cadseq.gmamba import ModelConfig

    base = ModelConfig.full() if args.profile == "full" else ModelConfig.desk()
    over = {"n_ts": n_ts, "variant": args.variant}
    if args.d_e is not None:
        over["d_e"] = args.d_e
    if args.n_blocks is not None:
        over["n_blocks"] = args.n_blocks
    if args.no_film:
        over["film_enabled"] = False
    return replace(base, **over)


def cmd_train(args) -> int:
    from cadseq.diffusion import Trainer, corpus_conditioning
    from cadseq.gmamba import GMambaModel

    corpus = _load_dir(args.data)
    if not corpus:
        raise InvalidInput("empty training corpus")
    cond = corpus_conditioning(corpus)
    if args.out in (None, "-"):
        raise InvalidInput("train needs --out CHECKPOINT")
    if args.resume:
        # options given now (e.g. a larger --steps total) override the stored ones
        trainer = Trainer.resume(args.resume, cond)
        over = _train_overrides(args)
        if over.get("T", trainer.cfg.T) != trainer.cfg.T:
            raise InvalidInput("the diffusion step count cannot change on resume")
        cfg = replace(trainer.cfg, **over)
        trainer.cfg = cfg
        trainer.opt.lr = cfg.lr
    else:
        cfg = _train_config(args)
        model = GMambaModel(_model_config(args, corpus[0].n_ts), seed=args.seed)
        trainer = Trainer(model, cond, cfg)
    total = cfg.total_steps(len(corpus))
    log_path = Path(str(args.out) + ".log.csv")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    mode = "a" if args.resume and log_path.exists() else "w"
    with log_path.open(mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["step", "loss", "diffusion", "command", "args", "grad_norm"])

        def log(rec):
            w.writerow([rec["step"], *(f"{rec[k]:.8g}" for k in ("loss", "diffusion", "command", "args", "grad_norm"))])

        trainer.run(max(0, total - trainer.step), args.out, log)
    last = trainer.history[-1] if trainer.history else {}
    print(json.dumps({"step": trainer.step, "loss": last.get("loss"), "checkpoint": str(args.out)}))
    return EXIT_OK


def load_checkpoint(path):
    """Model and schedule from either a trainer checkpoint or a bare model file."""
    from cadseq.diffusion import DiffusionSchedule, TrainConfig
    from cadseq.gmamba import GMambaModel, ModelConfig

    tensors, meta = checkpoint.load(path)
    model = GMambaModel(ModelConfig(**meta["config"]))
    if any(k.startswith("model.") for k in tensors):
        tensors = {k[6:]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(tensors)
    tc = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
    return model, DiffusionSchedule.linear(tc.T, tc.beta_min, tc.beta_max)


def cmd_sample(args) -> int:
    from cadseq.diffusion import corpus_conditioning, parses, reconstruct, sample

    if args.out in (None, "-"):
        raise InvalidInput("sample needs --out DIR")
    if (args.paired or args.teacher_structure) and not args.cond:
        raise InvalidInput("--paired and --teacher-structure need --cond DIR")
    model, sched = load_checkpoint(args.checkpoint)
    cond = None
    n = args.n
    if args.cond:
        ref = [s.with_n_ts(model.cfg.n_ts) for s in _load_dir(args.cond)]
        cond = corpus_conditioning(ref)
        n = len(ref)
    if args.paired:
        seqs = reconstruct(model, sched, cond, args.seed)
    else:
        seqs = [s.sequence for s in sample(model, sched, n, args.seed, cond, teacher_structure=args.teacher_structure)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, seq in enumerate(seqs):
        io.save_sequence(seq, out / f"{i:06d}.json")
    summary = {"count": len(seqs), "parsed": sum(parses(s) for s in seqs),
               "valid_ratio": metrics.valid_ratio(seqs) if seqs else 0.0, "seed": args.seed,
               "mode": "paired" if args.paired else "sample"}
    (out / "manifest.json").write_text(io.canonical_json(summary))
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    gen = _load_dir(args.gen)
    ref = _load_dir(args.ref)
    train = _load_dir(args.train) if args.train else []
    if args.paired and len(gen) != len(ref):
        raise InvalidInput(f"paired evaluation needs equal set sizes, got {len(gen)} and {len(ref)}")
    rep = metrics.evaluate(gen, ref, train, args.points, args.resolution, args.seed, args.paired)
    if args.out in (None, "-"):
        sys.stdout.write(rep.to_csv())
    else:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rep.to_csv())
        (out / "metrics.json").write_text(rep.to_json())
        print(json.dumps({"out": str(out)}))
    return EXIT_OK


def cmd_bench_scan(args) -> int:
    rows = bench.bench_denoise(tuple(args.lengths), args.d_e, args.n_blocks, args.repeats, args.seed)
    _write(bench.to_csv(rows), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file whose keys override option defaults")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32", help="floating point width")
    common.add_argument("--out", help="output file or directory ('-' or omitted: stdout where applicable)")

    p = argparse.ArgumentParser(prog="cadseq", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, parents=[common])
        sp.set_defaults(func=func)
        subs[name] = sp
        return sp

    sp = add("tokenize", cmd_tokenize, "serialize a tree JSON file into a token sequence")
    sp.add_argument("input", help="tree JSON file")
    sp.add_argument("--n-ts", type=int, default=MAX_TOKENS, help="padded sequence length")
    sp.add_argument("--binary", action="store_true", help="write the binary token stream instead of JSON")

    sp = add("detokenize", cmd_detokenize, "parse a token sequence (JSON or binary) back into a tree JSON")
    sp.add_argument("input", help="sequence JSON or binary stream")

    sp = add("validate", cmd_validate, "check a sequence against the three data filters")
    sp.add_argument("input", help="sequence JSON or binary stream")
    sp.add_argument("--resolution", type=int, default=32, help="voxel resolution for the solid check")

    sp = add("execute", cmd_execute, "execute a tree or sequence into voxels or surface points")
    sp.add_argument("input", help="tree JSON, sequence JSON or binary stream")
    sp.add_argument("--resolution", type=int, default=64, help="voxels per axis")
    sp.add_argument("--format", choices=("voxel", "obj", "f32"), help="output format (default from suffix)")
    sp.add_argument("--points", type=int, default=2048, help="surface samples for obj/f32 output")

    sp = add("gen-data", cmd_gen_data, "generate a synthetic corpus directory")
    sp.add_argument("--n", type=int, default=1000, help="number of models")
    sp.add_argument("--min-len", type=int, default=20, help="minimum token length")
    sp.add_argument("--max-len", type=int, default=60, help="maximum token length")
    sp.add_argument("--n-ts", type=int, default=MAX_TOKENS, help="padded sequence length")

    sp = add("stats", cmd_stats, "length statistics of a corpus directory as CSV")
    sp.add_argument("input", help="corpus directory")
    sp.add_argument("--count", choices=("tokens", "commands"), default="tokens", help="length unit")

    sp = add("train", cmd_train, "train the denoiser on a corpus directory")
    sp.add_argument("--data", required=True, help="corpus directory")
    sp.add_argument("--profile", choices=("desk", "full"), default="desk", help="size and optimizer preset")
    sp.add_argument("--variant", choices=("gmamba", "vanilla"), default="gmamba", help="scan kernel variant")
    sp.add_argument("--no-film", action="store_true", help="disable timestep modulation of the kernels")
    sp.add_argument("--d-e", type=int, help="override model width")
    sp.add_argument("--n-blocks", type=int, help="override block count")
    sp.add_argument("--steps", type=int, help="optimizer steps (ignored when epochs > 0)")
    sp.add_argument("--epochs", type=int, help="epochs over the corpus")
    sp.add_argument("--lr", type=float, help="learning rate")
    sp.add_argument("--batch", type=int, help="batch size")
    sp.add_argument("--T", dest="T", type=int, help="diffusion steps")
    sp.add_argument("--eta", type=float, help="argument loss weight")
    sp.add_argument("--clip", type=float, help="gradient norm clip (0 disables)")
    sp.add_argument("--checkpoint-every", type=int, help="save the checkpoint every N steps")
    sp.add_argument("--resume", help="continue from this checkpoint")

    sp = add("sample", cmd_sample, "sample sequences from a trained checkpoint")
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    sp.add_argument("--n", type=int, default=64, help="number of samples")
    sp.add_argument("--cond", help="corpus directory whose structure conditions the samples")
    sp.add_argument("--paired", action="store_true",
                    help="reconstruct each --cond sequence (corrupt, then denoise) instead of sampling from noise")
    sp.add_argument("--teacher-structure", action="store_true",
                    help="keep the token types and lengths of --cond and generate only the values")

    sp = add("eval", cmd_eval, "metrics report for generated vs reference directories")
    sp.add_argument("--gen", required=True, help="generated sequences directory")
    sp.add_argument("--ref", required=True, help="reference sequences directory")
    sp.add_argument("--train", help="training corpus directory for novelty")
    sp.add_argument("--paired", action="store_true", help="also report paired accuracies (same order)")
    sp.add_argument("--points", type=int, default=2048, help="points per cloud")
    sp.add_argument("--resolution", type=int, default=64, help="execution resolution")

    sp = add("bench-scan", cmd_bench_scan, "denoiser time and memory across sequence lengths")
    sp.add_argument("--lengths", type=int, nargs="+", default=list(bench.DEFAULT_LENGTHS), help="sequence lengths")
    sp.add_argument("--d-e", type=int, default=64, help="model width")
    sp.add_argument("--n-blocks", type=int, default=4, help="block count")
    sp.add_argument("--repeats", type=int, default=9, help="timing rounds (best kept)")
    return p, subs


def parse_args(argv=None) -> argparse.Namespace:
    parser, subs = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config:
        cfg = json.loads(Path(pre.config).read_text())
        subs[pre.command].set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        with T.precision(args.precision):
            return args.func(args)
    except (FloatingPointError, T.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CadError, geometry.GeometryError, metrics.MetricsError, InvalidInput, ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

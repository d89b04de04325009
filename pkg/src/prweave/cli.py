"""``prweave`` command-line harness.

Exit codes: 0 success, 1 validation failure, 2 numeric failure (non-finite
values or a gradient check over threshold), 3 I/O failure. Log verbosity
comes from ``PRWEAVE_LOG_LEVEL`` (default ``WARNING``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from . import autodiff as ad

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

logger = logging.getLogger("prweave")


class Failure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_config(args, default="toy"):
    from . import config

    path = args.config or config.packaged(default)
    cfg = config.load(path)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, output_dir=str(args.out))
    return cfg


def _ensure_writable(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise Failure(EXIT_IO, f"output directory {path} is not writable: {exc}") from exc


# ----------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    from . import checkpoint, config, trainer

    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    _ensure_writable(out)
    config.save(cfg, out / "config.yaml")
    if args.baseline == "cotrain":
        state = trainer.run_cotrain(cfg.stages, cfg.model, cfg.seed, out)
        print(f"co-training finished: {state.step} steps, checkpoint {out / 'checkpoints' / 'cotrain'}")
        return EXIT_OK
    resume = None
    if args.stage:
        if not 0 < args.stage < len(cfg.stages):
            raise Failure(EXIT_VALIDATION, f"--stage must be in [1, {len(cfg.stages) - 1}]")
        resume = checkpoint.load(out / "checkpoints" / f"stage_{args.stage - 1}")
        if len(resume.completed) != args.stage:
            raise Failure(EXIT_VALIDATION, "checkpoint stage history does not match --stage")
    state = trainer.run_curriculum(cfg.stages, cfg.model, cfg.seed, out, resume=resume,
                                   checkpoint_every=cfg.checkpoint_every)
    print(f"curriculum finished: {len(state.completed)} stages, {state.model.n_experts} experts, "
          f"{state.step} steps; metrics {out / 'metrics.jsonl'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import diagnostics
    from .routing import SupervisionConfig

    cfg = _load_config(args, default="gradcheck")
    sup = SupervisionConfig(cfg.stages[-1].rho, cfg.stages[-1].alpha)
    model = diagnostics.gradcheck_model(cfg.model, n_experts=min(3, len(cfg.stages)),
                                        rank=min(2, cfg.model.d_model), seed=cfg.seed)
    report = diagnostics.gradcheck(model, n_samples=args.samples or 2, supervision=sup, seed=cfg.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"gradcheck FAILED for: {', '.join(report.failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print("gradcheck passed")
    return EXIT_OK


def _route_batches(args, model):
    """(task, batch) pairs from a dataset dump or freshly generated samples."""
    from . import dataset, synth

    if args.data:
        by_task = {}
        with Path(args.data).open() as fh:
            for line in fh:
                rec = json.loads(line)
                arrs = dataset.decode_arrays(rec)
                by_task.setdefault(rec["task"], []).append(arrs)
        import numpy as np

        for task, items in by_task.items():
            yield task, synth.EncodedBatch(np.stack([a["x_target"] for a in items]),
                                           np.stack([a["y"] for a in items]),
                                           np.stack([a["h"] for a in items]), [task] * len(items))
        return
    n = args.samples or 64
    for task in synth.TASKS[:model.n_experts]:
        yield task, synth.encode_batch(dataset.samples(task, args.seed or 0, 0, n, stream="eval"))


def cmd_route_stats(args) -> int:
    from . import checkpoint, diagnostics

    manifest = checkpoint.read_manifest(args.checkpoint)
    state = checkpoint.load(args.checkpoint)
    expected = len(manifest["completed_stages"]) if state.mode == "staged" else 1
    if state.optimizer is not None and state.mode == "staged":
        expected += 1
    if state.model.n_experts != expected:
        raise Failure(EXIT_VALIDATION, f"pool size {state.model.n_experts} does not match the "
                                       f"checkpoint's stage history ({expected} experts expected)")
    if args.config:
        cfg = _load_config(args)
        if len(cfg.stages) < state.model.n_experts:
            raise Failure(EXIT_VALIDATION, f"config has {len(cfg.stages)} stages but checkpoint has "
                                           f"{state.model.n_experts} experts")
    report = []
    for task, batch in _route_batches(args, state.model):
        s = diagnostics.route_stats(state.model, batch, task)
        report.append(s.__dict__)
        print(f"{task}: U_hard={s.u_hard:.4f} U_soft={s.u_soft:.4f} overall={[round(v, 4) for v in s.overall]}")
        for b, hist in enumerate(s.per_block):
            print(f"  block {b}: {[round(v, 4) for v in hist]}")
        for k in s.underused:
            print(f"  WARNING expert {k} used by < 1% of decisions")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_synth(args) -> int:
    from . import dataset, synth

    if args.task not in synth.TASKS:
        raise Failure(EXIT_VALIDATION, f"unknown task {args.task!r}; choose from {', '.join(synth.TASKS)}")
    out = Path(args.out or f"{args.task}.jsonl")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        audit = dataset.MaskAudit()
        digest = dataset.dump_jsonl(out, args.task, args.samples or 1000, args.seed or 0, audit)
    except OSError as exc:
        raise Failure(EXIT_IO, f"cannot write {out}: {exc}") from exc
    print(f"wrote {args.samples or 1000} records to {out} (sha256 {digest})")
    print(audit.summary())
    return EXIT_OK if audit.passed() else EXIT_VALIDATION


def cmd_verify(args) -> int:
    from . import checkpoint, dataset

    path = Path(args.path)
    if path.is_dir():
        try:
            checkpoint.load_arrays(path)
        except checkpoint.CheckpointError as exc:
            print(f"checkpoint verification failed: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        print(f"checkpoint {path}: all array hashes match")
        return EXIT_OK
    try:
        res = dataset.verify_jsonl(path)
    except OSError as exc:
        raise Failure(EXIT_IO, f"cannot read {path}: {exc}") from exc
    if not res.ok:
        print(f"record {res.first_bad} (line {res.first_bad + 1}) is bad: {res.reason}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"{res.n_records} records verified")
    return EXIT_OK


def cmd_eval(args) -> int:
    from . import checkpoint, studies, trainer

    study = args.study or "duality"
    if study == "duality" and args.checkpoints:
        if len(args.checkpoints) != 2:
            raise Failure(EXIT_VALIDATION, "duality comparison needs a staged and a co-trained checkpoint")
        seed = args.seed or 0
        n = args.samples or 64
        losses = [trainer.evaluate(checkpoint.load(p).model, seed, n) for p in args.checkpoints]
        diff = studies.compare(*losses)
        print(f"{'task':<18s} {'staged':>10s} {'cotrain':>10s} {'diff':>10s}")
        for task in losses[0]:
            print(f"{task:<18s} {losses[0][task]:>10.5f} {losses[1][task]:>10.5f} {diff[task]:>+10.5f}")
        if args.out:
            Path(args.out).write_text(json.dumps({"staged": losses[0], "cotrain": losses[1], "diff": diff},
                                                 indent=1, sort_keys=True) + "\n")
        return EXIT_OK
    cfg = _load_config(args)
    if study == "duality":
        res = studies.duality_study(cfg, n_seeds=args.samples or 5, out_dir=args.out)
        print(res.table())
        return EXIT_OK
    if study == "sweep":
        res = studies.sweep(cfg, out_dir=args.out)
        print(res.table())
        return EXIT_OK
    raise Failure(EXIT_VALIDATION, f"unknown study {study!r}; choose duality or sweep")


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prweave", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output directory"):
        sp.add_argument("--config", type=Path, help="run configuration (YAML); default: a packaged config")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--out", type=Path, help=out_help)

    sp = sub.add_parser("train", help="run the staged curriculum or the co-training baseline")
    common(sp)
    sp.add_argument("--baseline", choices=("staged", "cotrain"), default="staged")
    sp.add_argument("--stage", type=int, default=0, help="resume at stage N from the stage N-1 checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    common(sp)
    sp.add_argument("--samples", type=int, help="batch size of the random inputs")
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("route-stats", help="routing usage of a checkpoint")
    sp.add_argument("checkpoint", type=Path)
    common(sp, "write the report as JSON here")
    sp.add_argument("--data", type=Path, help="dataset dump; default: fresh held-out samples")
    sp.add_argument("--samples", type=int, help="samples per task when generating")
    sp.set_defaults(func=cmd_route_stats)

    sp = sub.add_parser("synth", help="write a dataset dump and print the audit")
    sp.add_argument("--task", required=True)
    sp.add_argument("--samples", type=int, help="number of records (default 1000)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", type=Path, help="output JSONL path")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("verify", help="verify a dataset dump or a checkpoint directory")
    sp.add_argument("path", type=Path)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("eval", help="held-out comparison and studies")
    sp.add_argument("checkpoints", nargs="*", type=Path, help="staged and co-trained checkpoints")
    common(sp, "study output directory")
    sp.add_argument("--study", choices=("duality", "sweep"))
    sp.add_argument("--samples", type=int, help="held-out samples per task, or seeds for the duality study")
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("PRWEAVE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    from . import checkpoint, config

    if getattr(args, "seed", None) is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return args.func(args)
    except Failure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except config.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ad.NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (checkpoint.CheckpointError, OSError) as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

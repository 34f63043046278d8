"""Command line for the compressed block-convolutional sparse recovery toolkit.

    python main.py build    --config config.json --out runs/desk
    python main.py compress --model runs/desk/model.cbcl --method omp --basis 16 --out runs/desk
    python main.py simulate --model runs/desk/model.cbcl --snr 20 --out runs/desk
    python main.py solve    --model runs/desk/model.cbcl --data runs/desk/data.cbcl --preset ista-500 --out runs/desk
    python main.py train    --model runs/desk/model.cbcl --arch cbc --init omp --basis 16 --out runs/cbc16
    python main.py ablate   --model runs/desk/model.cbcl --plan ablation.json --out runs/ablation
    python main.py eval     --model runs/desk/model.cbcl --networks runs/cbc16/network.cbcl --ista 200 500 --out runs/eval
    python main.py report   --records runs/*/train_record.json --plot --out runs/report
    python main.py rerun    --manifest runs/desk/build.manifest.json

Every command writes <out>/<command>.manifest.json and <out>/<command>.config.json.
Exit codes: 0 ok, 1 usage/config, 2 I/O, 3 numerical failure.
"""
import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from artifact_io import (load_data, load_model, load_network, load_operator_model, save_compressed, save_data,
                         save_model, save_network, save_reconstruction)
from compress import METHODS, RANDOM_SCHEMES, compress_model
from config_manager import AppConfig, ConfigManager, ISTA_PRESETS, parse_snr
from errors import (EXIT_IO, EXIT_OK, ConfigError, NumericalError, ShapeError, ToolkitError, TrainingDivergedError,
                    exit_code_for)
from evaluation import (BenchmarkEntry, pae, run_benchmark, se, write_benchmark_csv, write_benchmark_json,
                        write_benchmark_wide)
from ista import default_lambda, ista_solve
from report import load_records, merge_records, plot_curves, write_curves, write_summary
from rng_streams import derive_rng, derive_seed
from slice_model import DENSE_CAP_ENV, build_slice_kernels, estimate_lipschitz, resolve_dense_cap
from training import (TrainRecord, load_ablation, prepare_network, run_ablation, synthesize_pair,
                      train_network)
from unrolled_net import ARCHS, INITS

logger = logging.getLogger("cbc")

TOOL_VERSION = "1.0.0"
NET_INITS = ("omp", "svd") + INITS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


@dataclass
class RunContext:
    command: str
    args: argparse.Namespace
    cfg: AppConfig
    out: str
    inputs: List[str] = field(default_factory=list)
    outputs: List[str] = field(default_factory=list)

    def path(self, name: str) -> str:
        p = os.path.join(self.out, name)
        self.outputs.append(p)
        return p

    @property
    def cap(self) -> int:
        return resolve_dense_cap(None) if os.environ.get(DENSE_CAP_ENV) else self.cfg.runtime.dense_cap_bytes


# ---------- Commands ----------
def cmd_build(ctx: RunContext):
    model = build_slice_kernels(ctx.cfg.setup)
    save_model(ctx.path("model.cbcl"), model)
    s = ctx.cfg.setup
    logger.info("model: N_c=%d grid %dx%d N_t=%d, %d weights", s.num_elements, s.grid_nz, s.grid_nx,
                s.num_samples, model.num_params())


def cmd_compress(ctx: RunContext):
    a, c = ctx.args, ctx.cfg.compress
    c.method = a.method or c.method
    c.basis = a.basis if a.basis is not None else c.basis
    c.residual_rtol = a.tol if a.tol is not None else c.residual_rtol
    c.random_scheme = a.scheme or c.random_scheme
    ctx.inputs.append(a.model)
    model = load_model(a.model)
    cm = compress_model(model, c.method, c.basis, c.residual_rtol, ctx.cfg.runtime.seed, c.random_scheme)
    save_compressed(ctx.path(a.name or "compressed.cbcl"), cm)
    with open(ctx.path("compress_report.json"), "w", encoding="utf-8") as f:
        json.dump(cm.summary(), f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_simulate(ctx: RunContext):
    a, cfg = ctx.args, ctx.cfg
    if a.snr is not None:
        cfg.train.snr_db = parse_snr(a.snr)
    ctx.inputs.append(a.model)
    model = load_model(a.model)
    seed = cfg.runtime.seed
    x, y = synthesize_pair(derive_rng(seed, "data", 1 + a.index), model, cfg.train,
                           noise_rng=derive_rng(seed, "noise", 1 + a.index))
    save_data(ctx.path(a.name or "data.cbcl"), model.setup, y, x,
              {"seed": seed, "index": a.index, "snr_db": cfg.train.snr_db})
    logger.info("simulated pair: %d scatterers", int(np.count_nonzero(x)))


def cmd_solve(ctx: RunContext):
    a, sc = ctx.args, ctx.cfg.solver
    if a.preset:
        sc.iters = ISTA_PRESETS[a.preset]
    if a.iters is not None:
        sc.iters = a.iters
    if a.lam is not None:
        sc.lam = a.lam
    ctx.inputs += [a.model, a.data]
    model = load_operator_model(a.model)
    setup, y, x_true, _ = load_data(a.data)
    if setup != model.setup:
        raise ShapeError("data and model were produced for different setups")
    op = model.operator()
    lam = sc.lam if sc.lam is not None else default_lambda(y, op, sc.lam_factor)
    est = estimate_lipschitz(op, sc.lipschitz_iters, sc.lipschitz_tol, seed=ctx.cfg.runtime.seed)
    x_hat, trace = ista_solve(y, op, lam, est.value, sc.iters, sc.stop_tol)
    if not np.all(np.isfinite(x_hat)):
        raise NumericalError("ISTA produced non-finite values")
    meta = {"algo": a.algo, "iters": len(trace) - 1, "lam": float(lam), "lipschitz": est.value,
            "objective": trace[-1]}
    if x_true is not None:
        meta.update(pae_percent=pae(x_hat, x_true), se=se(x_hat, x_true))
        logger.info("PAE %.4f%%  SE %d", meta["pae_percent"], meta["se"])
    save_reconstruction(ctx.path(a.name or "reconstruction.cbcl"), setup, x_hat, meta)
    with open(ctx.path("objective.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "objective"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(v)])
    logger.info("ISTA: %d iterations, objective %.6g", len(trace) - 1, trace[-1])


def _write_record(ctx: RunContext, rec: TrainRecord, stem: str):
    rec.to_csv(ctx.path(f"{stem}.csv"))
    rec.to_json(ctx.path(f"{stem}.json"))


def cmd_train(ctx: RunContext):
    a, n, t = ctx.args, ctx.cfg.network, ctx.cfg.train
    for attr, dest in (("arch", "arch"), ("blocks", "blocks"), ("init", "init"), ("basis", "basis")):
        v = getattr(a, attr)
        if v is not None:
            setattr(n, dest, v)
    if a.freeze_forward:
        n.train_forward = False
    if a.snr is not None:
        t.snr_db = parse_snr(a.snr)
    if a.max_epochs is not None:
        if a.max_epochs < 0:
            raise ConfigError("--max-epochs must be >= 0")
        t.max_epochs = a.max_epochs
    ctx.inputs.append(a.model)
    model = load_model(a.model)
    init_seed = derive_seed(t.seed, "init")
    net = prepare_network(model, n, ctx.cfg.compress, t, init_seed, cap_bytes=ctx.cap)
    init_label = ctx.cfg.compress.method if n.arch == "cbc" and n.init == "analytic" else n.init
    model_id = a.name or (f"{n.arch}-{init_label}-b{n.blocks}" + (f"-bf{n.basis}" if n.arch == "cbc" else ""))
    try:
        net, rec = train_network(net, model, t, model_id=model_id)
    except TrainingDivergedError as e:
        if e.record is not None:
            _write_record(ctx, e.record, "train_record")
        raise
    save_network(ctx.path("network.cbcl"), net)
    _write_record(ctx, rec, "train_record")
    logger.info("%s: %d epochs (%s), best val %.6g", model_id, rec.epochs, rec.stop_reason,
                rec.best_val_loss if rec.best_val_loss is not None else float("nan"))


def cmd_ablate(ctx: RunContext):
    a = ctx.args
    ctx.inputs += [a.model, a.plan]
    model = load_model(a.model)
    plan = load_ablation(a.plan)
    res = run_ablation(plan, model, ctx.cfg.network, ctx.cfg.compress, ctx.cfg.train, cap_bytes=ctx.cap)
    res.to_csv(ctx.path("ablation_summary.csv"))
    with open(ctx.path("ablation_records.json"), "w", encoding="utf-8") as f:
        json.dump({"plan": plan.name, "records": [r.summary() for r in res.records]}, f, indent=2,
                  sort_keys=True)
        f.write("\n")
    ctx.outputs += write_curves(res.records, os.path.join(ctx.out, "curves"))
    diverged = [r["cell"] for r in res.rows if r["stop_reason"] == "diverged"]
    if diverged:
        logger.warning("diverged cells: %s", ", ".join(diverged))


def cmd_eval(ctx: RunContext):
    a, e = ctx.args, ctx.cfg.eval
    if a.set_size is not None:
        e.set_size = a.set_size
    if a.conditions:
        e.conditions = [parse_snr(c) for c in a.conditions]
    if a.ista is not None:
        e.ista_iters = list(a.ista)
    ctx.inputs.append(a.model)
    model = load_model(a.model)
    entries, names = [], set()
    for p in a.networks or []:
        ctx.inputs.append(p)
        name = os.path.basename(os.path.dirname(os.path.abspath(p)))
        if name in names or not name:
            name = os.path.splitext(os.path.basename(p))[0] + f"-{len(entries)}"
        names.add(name)
        entries.append(BenchmarkEntry(name, net=load_network(p)))
    ista_model = model
    if a.ista_model:
        ctx.inputs.append(a.ista_model)
        ista_model = load_operator_model(a.ista_model)
    for iters in e.ista_iters:
        entries.append(BenchmarkEntry(f"ista-{iters}", operator_model=ista_model, ista_iters=iters,
                                      lam_factor=ctx.cfg.solver.lam_factor))
    if not entries:
        raise ConfigError("nothing to evaluate: pass --networks and/or --ista")
    records = run_benchmark(entries, model, e, ctx.cfg.train)
    write_benchmark_csv(records, ctx.path("benchmark.csv"))
    write_benchmark_wide(records, ctx.path("benchmark_wide.csv"))
    write_benchmark_json(records, ctx.path("benchmark.json"))


def cmd_report(ctx: RunContext):
    a = ctx.args
    ctx.inputs += list(a.records or [])
    merged, dropped = merge_records(load_records(a.records or []))
    write_summary(merged, ctx.path("summary.csv"))
    ctx.outputs += write_curves(merged, os.path.join(ctx.out, "curves"))
    if a.plot:
        plot_curves(merged, ctx.path("loss_curves.png"), a.title)
    logger.info("report: %d records (%d duplicates dropped)", len(merged), len(dropped))


COMMANDS = {
    "build": cmd_build,
    "compress": cmd_compress,
    "simulate": cmd_simulate,
    "solve": cmd_solve,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
    "report": cmd_report,
}


# ---------- Parser ----------
def build_arg_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = _Parser(prog="main.py", description="Compressed block-convolutional sparse recovery toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("build", parents=[common], help="build the analytic slice-kernel model")

    p = sub.add_parser("compress", parents=[common], help="factorize the slice kernels")
    p.add_argument("--model", required=True)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--basis", type=int, help="number of basis filters M (16/32/64 presets)")
    p.add_argument("--tol", type=float, help="OMP residual tolerance relative to ||W||_F")
    p.add_argument("--scheme", choices=RANDOM_SCHEMES, help="init scheme for --method random")
    p.add_argument("--name", help="artifact file name")

    p = sub.add_parser("simulate", parents=[common], help="synthesize one (x, y) pair")
    p.add_argument("--model", required=True)
    p.add_argument("--snr", help="SNR in dB or 'noiseless'")
    p.add_argument("--index", type=int, default=0, help="pair index within the seed's data stream")
    p.add_argument("--name", help="artifact file name")

    p = sub.add_parser("solve", parents=[common], help="run ISTA on a data artifact")
    p.add_argument("--model", required=True, help="model or compressed artifact")
    p.add_argument("--data", required=True)
    p.add_argument("--algo", choices=["ista"], default="ista")
    p.add_argument("--iters", type=int)
    p.add_argument("--preset", choices=sorted(ISTA_PRESETS))
    p.add_argument("--lambda", dest="lam", type=float, help="l1 weight (default 0.1 * ||A^T y||_inf)")
    p.add_argument("--name", help="artifact file name")

    p = sub.add_parser("train", parents=[common], help="train an unrolled network")
    p.add_argument("--model", required=True)
    p.add_argument("--arch", choices=ARCHS)
    p.add_argument("--blocks", type=int)
    p.add_argument("--init", choices=NET_INITS, help="omp/svd factorize the kernels and apply to cbc only")
    p.add_argument("--basis", type=int)
    p.add_argument("--snr", help="training SNR in dB or 'noiseless'")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--freeze-forward", action="store_true", help="keep the forward operator fixed")
    p.add_argument("--name", help="model id used in records")

    p = sub.add_parser("ablate", parents=[common], help="run an ablation plan")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True, help="ablation JSON (see ablation.json)")

    p = sub.add_parser("eval", parents=[common], help="benchmark networks and ISTA baselines")
    p.add_argument("--model", required=True, help="model generating the eval data")
    p.add_argument("--networks", nargs="*", default=[])
    p.add_argument("--ista", type=int, nargs="*", help="ISTA iteration counts to include (e.g. 200 500)")
    p.add_argument("--ista-model", help="operator used by the ISTA baselines (defaults to --model)")
    p.add_argument("--set-size", type=int)
    p.add_argument("--conditions", nargs="*", help="e.g. noiseless 20 5")

    p = sub.add_parser("report", parents=[common], help="merge training records")
    p.add_argument("--records", nargs="*", default=[])
    p.add_argument("--plot", action="store_true", help="also write loss_curves.png")
    p.add_argument("--title")

    p = sub.add_parser("rerun", help="replay a run manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _configure_logging(args):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)-7s %(name)s: %(message)s", force=True)


def _load_config(args) -> AppConfig:
    cfg = ConfigManager.load(args.config) if args.config else AppConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg.runtime.seed = cfg.train.seed = cfg.eval.seed = args.seed
    return cfg


def _replay_argv(argv: List[str], snapshot: str) -> List[str]:
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok == "--config":
            skip = True
            continue
        if tok.startswith("--config="):
            continue
        out.append(tok)
    return out + ["--config", snapshot]


def _write_manifest(ctx: RunContext, argv: List[str], started: float, snapshot: str):
    manifest = {
        "command": ctx.command,
        "argv": list(argv),
        "replay_argv": _replay_argv(argv, snapshot),
        "config": ConfigManager.to_dict(ctx.cfg),
        "config_path": snapshot,
        "seeds": {"runtime": ctx.cfg.runtime.seed, "train": ctx.cfg.train.seed, "eval": ctx.cfg.eval.seed},
        "inputs": ctx.inputs,
        "outputs": ctx.outputs,
        "version": TOOL_VERSION,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    with open(os.path.join(ctx.out, f"{ctx.command}.manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _run(argv: List[str]) -> int:
    args = build_arg_parser().parse_args(argv)
    _configure_logging(args)
    if args.command == "rerun":
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        logger.info("replaying %s", " ".join(manifest["replay_argv"]))
        return _run(list(manifest["replay_argv"]))

    cfg = _load_config(args)
    os.makedirs(args.out, exist_ok=True)
    ctx = RunContext(args.command, args, cfg, args.out)
    started = time.time()
    try:
        COMMANDS[args.command](ctx)
    finally:
        snapshot = os.path.abspath(os.path.join(args.out, f"{args.command}.config.json"))
        ConfigManager.save(snapshot, ctx.cfg)
        _write_manifest(ctx, argv, started, snapshot)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return _run(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except TrainingDivergedError as e:
        logger.error("training diverged at epoch %d, iteration %d: %s", e.epoch, e.iteration, e)
        return exit_code_for(e)
    except ToolkitError as e:
        logger.error("%s", e)
        return exit_code_for(e)
    except json.JSONDecodeError as e:
        logger.error("unreadable JSON input: %s", e)
        return EXIT_IO
    except OSError as e:
        logger.error("I/O error: %s", e)
        return exit_code_for(e)
    except ValueError as e:
        logger.error("%s", e)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())

"""``tm-diffuse`` command line interface.

Subcommands: ``toy`` (write a synthetic dataset), ``ingest``, ``train``,
``synth``, ``tomo``, ``complete`` and ``eval``. Exit codes: 0 success,
1 numerical abort, 2 I/O or validation error.
"""

from __future__ import annotations

import argparse
import logging
import math
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from . import data, metrics, synthetic
from .config import RunConfig, config_fields, dump_config, load_config, resolve
from .denoiser import (
    DenoiserConfig,
    TrainConfig,
    impute_dataset,
    load_checkpoint,
    resume_state,
    save_params,
    train_denoiser,
    train_preprocessor,
)
from .diffusion import make_schedule
from .errors import NumericalError, TMError, ValidationError
from .report import svg_line_plot, write_json, write_series_csv
from .sampling import (
    GuidanceConfig,
    assemble_series,
    sample_completion,
    sample_tomography,
    sample_unconditional,
)

log = logging.getLogger("tm_diffuse")

# seeds of consecutive sampling runs are spaced so their per-window streams never overlap
SEED_SPACING = 100_003


# ---------------------------------------------------------------------------
# helpers


def _out_dir(cfg: RunConfig, default: str) -> Path:
    out = Path(cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data:
        raise ValidationError("no dataset directory given (--data or TM_DIFFUSE_DATA_DIR)")
    path = Path(cfg.data)
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory {path} does not exist")
    return path


def _write_manifest(out: Path, cfg: RunConfig, command: str, **extra) -> None:
    (out / "config.txt").write_text(dump_config(cfg))
    write_json(out / "manifest.json", {"command": command, "config": asdict(cfg), **extra})


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
        warmup_iters=cfg.warmup_iters, adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2, epochs_pre=cfg.epochs_pre,
        epochs_diff=cfg.epochs_diff, seed=cfg.seed, loss=cfg.loss,
    )


def _guidance(cfg: RunConfig, seed: int) -> GuidanceConfig:
    return GuidanceConfig(
        rho_mode=cfg.rho_mode, rho_fixed=cfg.rho, sigma_z=cfg.sigma_z,
        steps_used=cfg.sample_steps or None, ddim_stride=cfg.stride,
        em_iters=cfg.em_iters, seed=seed,
    )


def _stride_from(cfg: RunConfig, T: int) -> RunConfig:
    if cfg.sample_steps:
        return replace(cfg, stride=math.ceil(T / cfg.sample_steps))
    return cfg


def _cover_windows(X: np.ndarray, w: int) -> np.ndarray:
    """Window origins at stride ``w`` plus one end-aligned window if needed."""
    T = X.shape[1]
    if T < w:
        raise ValidationError(f"series of {T} slots is shorter than the window {w}")
    origins = list(range(0, T - w + 1, w))
    if origins[-1] + w < T:
        origins.append(T - w)
    return np.array(origins)


def _cut(X, origins, w):
    return np.stack([X[:, o:o + w] for o in origins])


def _run_chunked(fn, n: int, jobs: int, seed: int):
    """Call ``fn(start, stop, seed + start)`` over ``jobs`` contiguous chunks."""
    bounds = np.linspace(0, n, min(jobs, n) + 1).astype(int)
    spans = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(spans) == 1:
        return fn(0, n, seed)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        parts = list(pool.map(lambda ab: fn(ab[0], ab[1], seed + ab[0]), spans))
    return np.concatenate(parts)


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ValidationError("--checkpoint is required")
    ckpt = load_checkpoint(cfg.checkpoint)
    extra = ckpt["extra"]
    schedule = make_schedule(extra.get("schedule", "cosine"), ckpt["config"].diffusion_steps)
    norm = data.NormalizationParams.from_dict(extra["normalization"])
    return ckpt, schedule, norm


def _read_trace(path) -> np.ndarray:
    X, _ = data.ingest_csv(path)
    return X


# ---------------------------------------------------------------------------
# commands


def cmd_toy(cfg: RunConfig, args) -> int:
    """Write a synthetic 6-node dataset: trace.csv and routing.csv."""
    out = _out_dir(cfg, "toy_data")
    total = cfg.train_len + cfg.test_len
    X = synthetic.diurnal_traffic(n_times=total, seed=cfg.seed)
    with open(out / "trace.csv", "w") as fh:
        fh.write("# nodes: 6\n")
        for row in X.T:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    data.write_matrix_csv(out / "routing.csv", synthetic.toy_routing(), fmt="%g")
    _write_manifest(out, cfg, "toy", flows=X.shape[0], times=X.shape[1])
    print(f"wrote {X.shape[0]} flows x {X.shape[1]} slots to {out}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    if not cfg.trace:
        raise ValidationError("--trace is required")
    out = _out_dir(cfg, cfg.data or "dataset")
    X, avail = data.ingest_csv(cfg.trace, cfg.layout)
    train, test = data.train_test_split(X, cfg.train_len, cfg.test_len)
    avail_tr, avail_te = data.train_test_split(avail, cfg.train_len, cfg.test_len)
    train_n, params = data.clip_and_normalize(train, avail_tr)
    test_n = data.apply_normalization(test, params)

    train_mask = avail_tr
    if cfg.train_mask_rate < 1:
        train_mask = avail_tr * data.build_random_mask(train.shape, cfg.train_mask_rate, cfg.mask_seed)
    test_mask = avail_te * data.build_random_mask(test.shape, cfg.test_mask_rate, cfg.mask_seed + 1)

    data.write_trace_csv(out / "train.csv", train_n * avail_tr)
    data.write_trace_csv(out / "test.csv", test_n * avail_te)
    data.write_matrix_csv(out / "train_mask.csv", train_mask, fmt="%d")
    data.write_matrix_csv(out / "test_mask.csv", test_mask, fmt="%d")
    data.write_matrix_csv(out / "test_avail.csv", avail_te, fmt="%d")
    data.save_normalization(out / "normalization.json", params)
    if cfg.routing:
        A = data.read_matrix_csv(cfg.routing)
        if A.shape[1] != X.shape[0]:
            raise ValidationError(
                f"routing matrix has {A.shape[1]} flow columns, trace has {X.shape[0]} flows"
            )
        if np.any(A < 0) or np.any(A > 1):
            raise ValidationError("routing entries must lie in [0, 1]")
        shutil.copyfile(cfg.routing, out / "routing.csv")
    _write_manifest(out, replace(cfg, out=str(out)), "ingest", flows=X.shape[0],
                    normalization=params.to_dict(),
                    train_observed=int(train_mask.sum()), test_observed=int(test_mask.sum()))
    print(f"ingested {X.shape[0]} flows: train {train.shape[1]} slots, test {test.shape[1]} slots -> {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    src = _data_dir(cfg)
    out = _out_dir(cfg, "run")
    train = data.read_matrix_csv(src / "train.csv").T
    mask = data.read_matrix_csv(src / "train_mask.csv")
    params = data.load_normalization(src / "normalization.json")
    tcfg = _train_config(cfg)
    schedule = make_schedule(cfg.schedule, cfg.steps)
    ckpt_path = out / "checkpoint.pt"
    ww = data.make_windows(train, cfg.window, cfg.train_stride)
    mw = data.make_windows(mask, cfg.window, cfg.train_stride)

    t0 = time.time()
    state = None
    pre_losses = []
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        pre = ckpt["preprocessor"]
        state = resume_state(ckpt, tcfg)
        pre_losses = ckpt["extra"].get("pre_losses", [])
        log.info("resuming at epoch %d", state.epoch)
    else:
        pre, pre_losses = train_preprocessor(ww.windows, mw.windows, tcfg)
    imputed = impute_dataset(pre, train, mask)
    iw = data.make_windows(imputed, cfg.window, cfg.train_stride)

    dcfg = DenoiserConfig(
        flow_count=train.shape[0], window_len=cfg.window, diffusion_steps=cfg.steps,
        model_dim=cfg.model_dim, heads=cfg.heads, encoder_blocks=cfg.encoder_blocks,
        decoder_blocks=cfg.decoder_blocks, ff_dim=cfg.ff_dim or None,
    )
    extra = {"normalization": params.to_dict(), "schedule": schedule.kind,
             "pre_losses": list(pre_losses), "run_config": asdict(cfg)}
    every = max(1, cfg.epochs_diff // 10)

    def on_epoch(st):
        if st.epoch % every == 0 or st.epoch == cfg.epochs_diff:
            save_params(ckpt_path, st, extra=extra, preprocessor=pre)

    state = train_denoiser(iw.windows, mw.windows, tcfg, schedule, dcfg, state=state,
                           on_epoch=on_epoch)
    save_params(ckpt_path, state, extra=extra, preprocessor=pre)
    rows = [("pre", i + 1, v) for i, v in enumerate(pre_losses)]
    rows += [("diffusion", i + 1, v) for i, v in enumerate(state.losses)]
    write_series_csv(out / "loss_curve.csv", ["phase", "epoch", "loss"], rows)
    elapsed = time.time() - t0
    _write_manifest(out, cfg, "train", checkpoint=str(ckpt_path),
                    iterations=state.iteration,
                    final_loss=state.losses[-1] if state.losses else None)
    print(f"trained {state.iteration} iterations in {elapsed:.1f}s; "
          f"final loss {state.losses[-1] if state.losses else float('nan'):.5f}")
    return 0


def cmd_synth(cfg: RunConfig, args) -> int:
    ckpt, schedule, norm = _load_model(cfg)
    cfg = _stride_from(cfg, schedule.steps)
    model = ckpt["model"]
    mc = ckpt["config"]
    out = _out_dir(cfg, "synth")
    gcfg = _guidance(cfg, cfg.seed)

    def run(a, b, seed):
        return sample_unconditional(model, schedule, b - a, (mc.flow_count, mc.window_len),
                                    replace(gcfg, seed=seed))

    synth = _run_chunked(run, cfg.num_samples, cfg.jobs, cfg.seed)
    raw = data.denormalize(synth, norm)
    if np.any(raw < 0) or np.any(raw > norm.scale) or not np.all(np.isfinite(raw)):
        raise NumericalError("synthetic samples left the normalized range")
    with open(out / "synth_windows.csv", "w") as fh:
        for win in raw:
            fh.write(",".join(repr(float(v)) for v in win.ravel()) + "\n")

    result = {"num_samples": cfg.num_samples, "stride": cfg.stride}
    if cfg.data:
        src = _data_dir(cfg)
        test = data.read_matrix_csv(src / "test.csv").T
        real = _cut(test, _cover_windows(test, mc.window_len), mc.window_len)
        metrics.export_flat_samples(data.denormalize(real, norm), raw, out / "flat_samples.csv")
        rng = np.random.default_rng(cfg.seed)
        uniform = rng.uniform(0.0, 1.0, size=(cfg.num_samples, *real.shape[1:]))
        result["mmd2_real_synth"] = metrics.mmd2(real, synth)
        result["mmd2_real_uniform"] = metrics.mmd2(real, uniform)
        print(f"mmd2(real, synth) = {result['mmd2_real_synth']:.5f}; "
              f"mmd2(real, uniform) = {result['mmd2_real_uniform']:.5f}")
    _write_manifest(out, cfg, "synth", **result)
    return 0


def _sampling_setup(cfg: RunConfig):
    ckpt, schedule, norm = _load_model(cfg)
    cfg = _stride_from(cfg, schedule.steps)
    src = _data_dir(cfg)
    test = data.read_matrix_csv(src / "test.csv").T
    mc = ckpt["config"]
    if test.shape[0] != mc.flow_count:
        raise ValidationError(
            f"dataset has {test.shape[0]} flows, checkpoint expects {mc.flow_count}"
        )
    return cfg, ckpt["model"], schedule, norm, src, test


def _routing(cfg: RunConfig, src: Path, n_flows: int) -> np.ndarray:
    path = Path(cfg.routing) if cfg.routing else src / "routing.csv"
    A = data.read_matrix_csv(path)
    if A.shape[1] != n_flows:
        raise ValidationError(
            f"routing matrix has {A.shape[1]} flow columns but traffic has {n_flows} flows"
        )
    return A


def _emit_reports(out: Path, truth, est, eval_mask, norm, seeds_info: dict) -> metrics.MetricReport:
    rep = metrics.evaluate(truth, est, eval_mask, tre_group=None)
    rep.extra.update(seeds_info)
    rep.write(out / "report.txt", out / "metrics.csv")
    write_series_csv(out / "tre.csv", ["slot", "tre"], list(enumerate(rep.tre)))
    svg_line_plot(out / "tre.svg", rep.tre, title="TRE per time slot", xlabel="slot", ylabel="TRE")
    return rep


def cmd_tomo(cfg: RunConfig, args) -> int:
    cfg, model, schedule, norm, src, truth = _sampling_setup(cfg)
    out = _out_dir(cfg, "tomo")
    A = _routing(cfg, src, truth.shape[0])
    w = model.config.window_len
    if not cfg.simulate and not cfg.loads:
        raise ValidationError("give --loads or --simulate")
    if cfg.simulate:
        Y = data.link_loads(A, truth, cfg.sigma_z, seed=cfg.seed).values
    else:
        Y = data.read_matrix_csv(cfg.loads).T / norm.scale
        if Y.shape[0] != A.shape[0]:
            raise ValidationError(
                f"link-load file has {Y.shape[0]} links, routing matrix has {A.shape[0]}"
            )
    origins = _cover_windows(Y, w)
    Yw = _cut(Y, origins, w)

    per_seed, traces, first = [], None, None
    for r in range(cfg.seeds):
        base = cfg.seed + r * SEED_SPACING
        gcfg = _guidance(cfg, base)
        trace = []

        def run(a, b, seed, gcfg=gcfg, trace=trace):
            return sample_tomography(model, schedule, A, Yw[a:b], replace(gcfg, seed=seed),
                                     trace=trace if a == 0 else None)

        est_w = _run_chunked(run, len(Yw), cfg.jobs, base)
        est = assemble_series(est_w, origins, Y.shape[1])
        resid = float(np.linalg.norm(Y - A @ est) / np.linalg.norm(Y))
        nm = metrics.nmae(truth, est) if truth.any() else math.nan
        per_seed.append({"seed": base, "relative_residual": resid, "nmae": nm})
        if r == 0:
            first, traces = est, trace
    data.write_trace_csv(out / "estimate.csv", data.denormalize(first, norm))
    info = {
        "median_relative_residual": float(np.median([p["relative_residual"] for p in per_seed])),
        "median_nmae": float(np.median([p["nmae"] for p in per_seed])),
    }
    _emit_reports(out, truth, first, None, norm, info)
    _write_manifest(out, cfg, "tomo", per_seed=per_seed, residual_trace=traces, **info)
    print(f"tomography: median relative residual {info['median_relative_residual']:.5f}, "
          f"median NMAE {info['median_nmae']:.5f}")
    return 0


def cmd_complete(cfg: RunConfig, args) -> int:
    cfg, model, schedule, norm, src, truth = _sampling_setup(cfg)
    out = _out_dir(cfg, "complete")
    avail = data.read_matrix_csv(src / "test_avail.csv")
    if args.mask:
        M = data.read_matrix_csv(args.mask)
    elif args.test_mask_rate is not None:
        M = avail * data.build_random_mask(truth.shape, cfg.test_mask_rate, cfg.mask_seed + 1)
    else:
        M = data.read_matrix_csv(src / "test_mask.csv")
    if M.shape != truth.shape:
        raise ValidationError(f"mask shape {M.shape} differs from data shape {truth.shape}")
    if not M.any():
        raise ValidationError("observation mask is empty")
    # unavailable ground truth is never scored
    eval_mask = np.maximum(M, 1 - avail)
    w = model.config.window_len
    origins = _cover_windows(truth, w)
    Xw, Mw = _cut(truth * M, origins, w), _cut(M, origins, w)

    A = Yw = None
    if cfg.link_rate > 0:
        A_full = _routing(cfg, src, truth.shape[0])
        k = int(round(cfg.link_rate * A_full.shape[0]))
        rows = np.sort(np.random.default_rng(cfg.mask_seed + 2).permutation(A_full.shape[0])[:k])
        A = A_full[rows]
        Y = data.link_loads(A, truth, cfg.sigma_z, seed=cfg.seed).values
        Yw = _cut(Y, origins, w)

    per_seed, first, trace0 = [], None, None
    for r in range(cfg.seeds):
        base = cfg.seed + r * SEED_SPACING
        gcfg = _guidance(cfg, base)
        trace = []

        def run(a, b, seed, gcfg=gcfg, trace=trace):
            return sample_completion(model, schedule, Xw[a:b], Mw[a:b], replace(gcfg, seed=seed),
                                     A=A, Y=None if Yw is None else Yw[a:b],
                                     trace=trace if a == 0 else None)

        est_w = _run_chunked(run, len(Xw), cfg.jobs, base)
        est = assemble_series(est_w, origins, truth.shape[1])
        try:
            nm = metrics.nmae(truth, est, eval_mask)
        except ValidationError:
            nm = math.nan
        per_seed.append({"seed": base, "nmae": nm})
        if r == 0:
            first, trace0 = est, trace
    data.write_trace_csv(out / "estimate.csv", data.denormalize(first, norm))
    base_est = data.baseline_interpolate(truth * M, M)
    try:
        base_nmae = metrics.nmae(truth, base_est, eval_mask)
    except ValidationError:
        base_nmae = math.nan
    info = {"median_nmae": float(np.median([p["nmae"] for p in per_seed])),
            "baseline_nmae": base_nmae, "link_rate": cfg.link_rate}
    _emit_reports(out, truth, first, eval_mask, norm, info)
    _write_manifest(out, cfg, "complete", per_seed=per_seed, residual_trace=trace0, **info)
    if math.isnan(info["median_nmae"]):
        print("completion: every entry observed, NMAE not applicable")
    else:
        print(f"completion: median NMAE {info['median_nmae']:.5f} "
              f"(baseline interpolation {base_nmae:.5f})")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    truth = _read_trace(args.truth)
    est = _read_trace(args.estimate)
    if truth.shape != est.shape:
        raise ValidationError(f"shape mismatch: truth {truth.shape} vs estimate {est.shape}")
    M = None
    if args.mask and not args.all_entries:
        M = data.read_matrix_csv(args.mask)
    rep = metrics.evaluate(truth, est, M)
    if cfg.out:
        out = _out_dir(cfg, cfg.out)
        rep.write(out / "report.txt", out / "metrics.csv")
        write_series_csv(out / "tre.csv", ["slot", "tre"], list(enumerate(rep.tre)))
        _write_manifest(out, cfg, "eval", truth=args.truth, estimate=args.estimate, mask=args.mask)
    sys.stdout.write(rep.to_text())
    return 0


COMMANDS = {
    "toy": cmd_toy,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "synth": cmd_synth,
    "tomo": cmd_tomo,
    "complete": cmd_complete,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in config_fields():
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            common.add_argument(flag, dest=f.name, action="store_const", const=True, default=None)
        else:
            common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())

    p = argparse.ArgumentParser(prog="tm-diffuse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("toy", parents=[common], help="write a synthetic 6-node dataset")
    sub.add_parser("ingest", parents=[common], help="normalize, split and mask a trace")
    train = sub.add_parser("train", parents=[common], help="train pre-processor and denoiser")
    train.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint")
    sub.add_parser("synth", parents=[common], help="unconditional generation")
    sub.add_parser("tomo", parents=[common], help="estimate flows from link loads")
    comp = sub.add_parser("complete", parents=[common], help="fill missing flow entries")
    comp.add_argument("--mask", help="observation mask CSV overriding the dataset's")
    ev = sub.add_parser("eval", parents=[common], help="score an estimate against truth")
    ev.add_argument("--truth", required=True)
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--mask", help="mask CSV; metrics use entries where it is 0")
    ev.add_argument("--all-entries", action="store_true", help="ignore the mask")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in config_fields()}
    try:
        file_values = load_config(args.config) if args.config else {}
        cfg = resolve(file_values, overrides)
        # explicit CLI value, needed to know whether to rebuild the test mask
        args.test_mask_rate = overrides.get("test_mask_rate")
        torch.set_num_threads(1)
        return COMMANDS[args.command](cfg, args)
    except NumericalError as exc:
        print(f"tm-diffuse: numerical abort: {exc}", file=sys.stderr)
        return 1
    except (TMError, ValueError, OSError) as exc:
        print(f"tm-diffuse: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

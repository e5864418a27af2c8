"""Command-line entry point: ``diffnormal <command> --seed N ...``.

Every option can also come from a ``key = value`` file given with
``--config``; keys are the option names with dashes turned into
underscores, and flags on the command line win over the file.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numeric failure, 5 non-convergence.
Logs go to stderr; reports go to stdout and, with ``--report DIR``, to
files (tab-separated tables plus PNG figures).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from diffnormal.config import format_kv, read_kv
from diffnormal.denoisers import GaussianMixture, gm_oracle_denoiser, load_checkpoint, save_checkpoint
from diffnormal.experiments import (
    ToySetup,
    ensemble_curve,
    full_chain_fn,
    run_repeats,
    to_normals,
    train_refiner,
    train_yoso,
    two_stage_fn,
)
from diffnormal.integrate import NotConverged, integrate_normals
from diffnormal.metrics import angular_error_map, pixelwise_variance, summarize_errors
from diffnormal.normal_io import RasterFormatError, read_normal_map, write_float_raster, write_normal_map
from diffnormal.samplers import (
    SamplerConfig,
    ddim_sample,
    ddpm_sample,
    full_chain_sample,
    heuristic_sample,
    make_substep_grid,
    yoso_only,
)
from diffnormal.schedule import NoiseSchedule, make_linear_schedule, make_scaled_linear_schedule
from diffnormal.toygen import make_scenes, read_split, write_split

log = logging.getLogger("diffnormal")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_NOT_CONVERGED = 0, 2, 3, 4, 5
REQUIRED = object()


class UsageError(Exception):
    pass


class DataError(Exception):
    """Unreadable or malformed input files."""


# ---------------------------------------------------------------- option plumbing


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).replace("x", ",").split(",") if v.strip())


def _floats(text) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _pair(parse):
    def conv(text):
        vals = parse(text)
        if len(vals) == 1:
            vals = vals * 2
        if len(vals) != 2:
            raise ValueError(f"expected one or two values, got {text!r}")
        return vals

    conv.__name__ = "pair"
    return conv


def _optional(parse):
    def conv(text):
        return None if str(text).strip().lower() in ("", "none") else parse(text)

    conv.__name__ = parse.__name__
    return conv


class Options:
    """Collects option specs for one subcommand so config files can be merged."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.specs: dict[str, tuple] = {}

    def add(self, name, parse, default, help_text, choices=None):
        dest = name.lstrip("-").replace("-", "_")
        self.specs[dest] = (parse, default)
        shown = "required" if default is REQUIRED else f"default {default}"
        self.parser.add_argument(name, dest=dest, default=None, metavar=dest.upper(), choices=choices,
                                 type=str, help=f"{help_text} ({shown})")

    def flag(self, name, help_text):
        dest = name.lstrip("-").replace("-", "_")
        self.specs[dest] = (_bool, False)
        self.parser.add_argument(name, dest=dest, action="store_const", const="true", default=None, help=help_text)

    def resolve(self, args) -> argparse.Namespace:
        values = {k: d for k, (_, d) in self.specs.items()}
        raw = {}
        if args.config is not None:
            try:
                raw.update(read_kv(args.config))
            except OSError as e:
                raise DataError(f"cannot read config {args.config}: {e}") from e
            unknown = sorted(set(raw) - set(self.specs))
            if unknown:
                raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        for k in self.specs:
            v = getattr(args, k)
            if v is not None:
                raw[k] = v
        for k, text in raw.items():
            parse = self.specs[k][0]
            try:
                values[k] = parse(text)
            except ValueError as e:
                raise UsageError(f"--{k.replace('_', '-')}: {e}") from e
        missing = [k for k, v in values.items() if v is REQUIRED]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
        return argparse.Namespace(command=args.command, **values)


def _schedule_options(o: Options):
    o.add("--schedule", str, "linear", "beta schedule", choices=["linear", "scaled-linear"])
    o.add("--T", int, 1000, "number of diffusion steps")
    o.add("--beta-start", _optional(float), None, "first beta (schedule default when unset)")
    o.add("--beta-end", _optional(float), None, "last beta (schedule default when unset)")


def _sampler_options(o: Options, yoso_input="zero"):
    o.add("--tau", float, 0.0, "DDIM noise scale for the refinement stage")
    o.add("--num-steps", int, 10, "refinement steps")
    o.add("--t-plus", _optional(int), None, "one-based start step (taken from the checkpoint when unset)")
    o.add("--yoso-input", str, yoso_input, "stage-one input", choices=["zero", "sampled"])
    o.add("--full-steps", int, 50, "steps of the full-chain baseline")
    o.add("--full-tau", float, 0.5, "noise scale of the full-chain baseline")


def build_parser():
    parser = argparse.ArgumentParser(prog="diffnormal", description="Two-stage diffusion normal estimation toolkit.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    options = {}

    def command(name, help_text, seed=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="key = value file with option defaults")
        o = Options(p)
        if seed:
            o.add("--seed", int, REQUIRED, "master seed; all randomness derives from it")
        options[name] = o
        return o

    o = command("gen-data", "Write a split of synthetic heightfield scenes.")
    o.add("--out", Path, REQUIRED, "output directory")
    o.add("--count", int, 96, "number of scenes")
    o.add("--resolution", _pair(_ints), (16, 16), "H,W")
    o.add("--n-bumps", int, 3, "bumps per scene")
    o.add("--width", _pair(_floats), (0.05, 0.18), "bump width range")
    o.flag("--high-frequency", "narrow bumps (width 0.05..0.09)")

    for name, what in (("train-yoso", "one-step estimator"), ("train-refiner", "x0 refinement network")):
        o = command(name, f"Train the {what} on a scene split.")
        o.add("--data", Path, REQUIRED, "training split directory")
        o.add("--out", Path, REQUIRED, "checkpoint path")
        o.add("--steps", int, ToySetup.steps, "optimizer steps")
        o.add("--lr", float, ToySetup.lr, "Adam learning rate")
        o.add("--batch-size", int, ToySetup.batch_size, "scenes per step")
        o.add("--hidden", _ints, ToySetup.hidden, "hidden widths, comma separated")
        o.add("--activation", str, ToySetup.activation, "hidden activation", choices=["tanh", "relu"])
        _schedule_options(o)
        o.add("--report", _optional(Path), None, "directory for the loss table and figure")
        if name == "train-yoso":
            o.add("--lam", float, 0.4, "shrinkage gate probability")
            o.add("--t-plus", int, ToySetup.t_plus, "one-based target step")
            o.flag("--shared-noise", "reuse the input draw as target noise (ablation)")
        else:
            o.flag("--no-semantics", "train without semantic feature injection")
            o.add("--t-max", _optional(int), None, "largest training timestep index")

    o = command("infer", "Predict normal maps for a scene split.")
    o.add("--data", Path, REQUIRED, "scene split directory")
    o.add("--out", Path, REQUIRED, "output directory")
    o.add("--yoso", _optional(Path), None, "one-step checkpoint")
    o.add("--refiner", _optional(Path), None, "refinement checkpoint")
    o.add("--mode", str, "two-stage", "sampler", choices=["two-stage", "yoso-only", "full-chain"])
    _sampler_options(o)
    o.add("--report", _optional(Path), None, "directory for preview figures")

    o = command("evaluate", "Angular error of predicted normals against ground truth.", seed=False)
    o.add("--seed", _optional(int), None, "accepted for uniformity; evaluation is deterministic")
    o.add("--pred", Path, REQUIRED, "predicted normal map (.dnfr) or inference directory")
    o.add("--gt", Path, REQUIRED, "ground-truth normal map (.dnfr) or scene split directory")
    o.add("--report", _optional(Path), None, "directory for the per-scene table and histogram")

    o = command("variance", "Run-to-run variance of the samplers over repeated seeds.")
    o.add("--yoso", Path, REQUIRED, "one-step checkpoint")
    o.add("--refiner", Path, REQUIRED, "refinement checkpoint")
    o.add("--data", _optional(Path), None, "scene split (generated from the seed when unset)")
    o.add("--scenes", int, 2, "number of generated scenes")
    o.add("--resolution", _pair(_ints), (32, 32), "H,W of generated scenes")
    o.flag("--high-frequency", "narrow bumps in generated scenes")
    o.add("--repeats", int, 10, "runs per sampler (seeds seed .. seed+R-1)")
    o.add("--sampler", str, "both", "which samplers to run", choices=["both", "two-stage", "full-chain"])
    _sampler_options(o, yoso_input="sampled")
    o.add("--report", _optional(Path), None, "directory for tables, figures and variance rasters")

    o = command("integrate", "Integrate a normal map into depth.", seed=False)
    o.add("--seed", _optional(int), None, "accepted for uniformity; integration is deterministic")
    o.add("--normals", Path, REQUIRED, "normal map (.dnfr)")
    o.add("--out", Path, REQUIRED, "output stem; writes <out>.dnfr")
    o.add("--z-floor", float, 0.05, "lower clamp on n_z")
    o.add("--tol", float, 1e-10, "relative CG tolerance")
    o.add("--max-iter", _optional(int), None, "CG iteration cap (10*H*W when unset)")
    o.add("--spacing", _pair(_floats), (1.0, 1.0), "grid step dx,dy")
    o.add("--mesh", _optional(Path), None, "also write an ASCII mesh here")

    o = command("oracle-demo", "Sample a 1-D Gaussian mixture with its exact posterior-mean denoiser.")
    o.add("--n", int, 10_000, "number of chains")
    o.add("--sampler", str, "ddim", "sampler", choices=["ddim", "ddpm"])
    o.add("--num-steps", int, 50, "DDIM steps")
    o.add("--tau", float, 0.0, "DDIM noise scale")
    o.add("--weights", _floats, (0.5, 0.5), "mixture weights")
    o.add("--means", _floats, (-2.0, 2.0), "component means")
    o.add("--stds", _floats, (0.1, 0.1), "component standard deviations")
    _schedule_options(o)
    o.add("--report", _optional(Path), None, "directory for the histogram table and figure")
    return parser, options


# ---------------------------------------------------------------- shared helpers


def _make_schedule(cfg) -> NoiseSchedule:
    make = make_linear_schedule if cfg.schedule == "linear" else make_scaled_linear_schedule
    kw = {k: v for k, v in (("beta_start", cfg.beta_start), ("beta_end", cfg.beta_end)) if v is not None}
    return make(cfg.T, **kw)


def _schedule_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.name + ".schedule")


def _load_net(path: Path):
    if not path.exists():
        raise DataError(f"missing checkpoint {path}")
    try:
        net = load_checkpoint(path)
    except (ValueError, EOFError) as e:
        raise DataError(f"{path}: {e}") from e
    sp = _schedule_path(path)
    sched = NoiseSchedule.from_config(sp.read_text()) if sp.exists() else make_linear_schedule(net.T)
    if sched.T != net.T:
        raise DataError(f"{sp}: schedule length {sched.T} does not match checkpoint T={net.T}")
    return net, sched


def _load_scenes(path: Path):
    try:
        scenes = read_split(path)
    except (ValueError, RasterFormatError) as e:
        raise DataError(f"{path}: {e}") from e
    if not scenes:
        raise DataError(f"{path}: empty split")
    return scenes


def _write_table(path: Path, header, rows) -> str:
    text = "\t".join(header) + "\n" + "".join("\t".join(_cell(v) for v in row) + "\n" for row in rows)
    if path is not None:
        path.write_text(text)
    return text


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _report_dir(cfg):
    if cfg.report is None:
        return None
    cfg.report.mkdir(parents=True, exist_ok=True)
    return cfg.report


def _out(text: str):
    sys.stdout.write(text)
    sys.stdout.flush()


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg) -> int:
    width = (0.05, 0.09) if cfg.high_frequency else cfg.width
    scenes = make_scenes(cfg.seed, cfg.count, n_bumps=cfg.n_bumps, resolution=cfg.resolution, width=width)
    write_split(cfg.out, scenes)
    log.info("wrote %d scenes to %s", len(scenes), cfg.out)
    _out(format_kv({"scenes": len(scenes), "resolution": "%dx%d" % cfg.resolution, "out": str(cfg.out)}))
    return EXIT_OK


def _train(cfg, which: str) -> int:
    scenes = _load_scenes(cfg.data)
    sched = _make_schedule(cfg)
    setup = ToySetup(
        hidden=tuple(cfg.hidden), activation=cfg.activation, steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
        T=sched.T, t_plus=getattr(cfg, "t_plus", ToySetup.t_plus), refiner_t_max=getattr(cfg, "t_max", None),
    )
    if cfg.steps < 1:
        raise UsageError("--steps must be >= 1")
    log.info("training %s on %d scenes for %d steps", which, len(scenes), cfg.steps)
    if which == "yoso":
        net, report = train_yoso(setup, scenes, cfg.lam, cfg.seed, cfg.steps, cfg.shared_noise, sched)
    else:
        net, report = train_refiner(setup, scenes, cfg.seed, not cfg.no_semantics, cfg.steps, sched)
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, cfg.out)
    _schedule_path(cfg.out).write_text(sched.to_config())
    rep = _report_dir(cfg)
    if rep is not None:
        from diffnormal.plotting import plot_curves

        epochs = list(range(1, len(report.epoch_losses) + 1))
        _write_table(rep / "loss.tsv", ("epoch", "loss"), zip(epochs, report.epoch_losses))
        plot_curves(rep / "loss.png", {which: (epochs, report.epoch_losses)}, "epoch", "mean loss", logy=True)
    _out(format_kv({
        "checkpoint": str(cfg.out), "steps": report.steps, "epochs": len(report.epoch_losses),
        "initial_loss": report.initial_loss, "final_loss": report.final_loss,
    }))
    return EXIT_OK


def cmd_train_yoso(cfg) -> int:
    return _train(cfg, "yoso")


def cmd_train_refiner(cfg) -> int:
    return _train(cfg, "refiner")


def _sampler_config(cfg, yoso, seed) -> SamplerConfig:
    t_plus = cfg.t_plus
    if t_plus is None:
        t_plus = yoso.t_plus + 1 if yoso is not None and yoso.t_plus is not None else 401
    return SamplerConfig(tau=cfg.tau, num_steps=cfg.num_steps, t_plus=t_plus, seed=seed, yoso_input=cfg.yoso_input)


def cmd_infer(cfg) -> int:
    need = {"two-stage": ("yoso", "refiner"), "yoso-only": ("yoso",), "full-chain": ("refiner",)}[cfg.mode]
    nets, sched = {}, None
    for key in need:
        path = getattr(cfg, key)
        if path is None:
            raise UsageError(f"--mode {cfg.mode} needs --{key}")
        nets[key], s = _load_net(path)
        if sched is not None and s.T != sched.T:
            raise DataError("checkpoints were trained with different schedules")
        sched = s
    scenes = _load_scenes(cfg.data)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rep = _report_dir(cfg)
    ids = []
    for i, sc in enumerate(scenes):
        seed = cfg.seed + i
        refiner = nets.get("refiner")
        cond = sc.condition(with_semantics=refiner is not None and refiner.sem_channels > 0)
        if cfg.mode == "two-stage":
            scfg = _sampler_config(cfg, nets["yoso"], seed)
            latent = heuristic_sample(cond, nets["yoso"].as_denoiser(), refiner.as_denoiser(), scfg, sched).final
        elif cfg.mode == "yoso-only":
            scfg = _sampler_config(cfg, nets["yoso"], seed)
            latent = yoso_only(cond.without_semantics(), nets["yoso"].as_denoiser(), scfg, sched)
        else:
            latent = full_chain_sample(cond, refiner.as_denoiser(), sched, cfg.full_steps, cfg.full_tau, seed).final
        pred = to_normals(latent)
        sid = f"{i:05d}"
        write_normal_map(cfg.out / f"{sid}_pred", pred)
        ids.append(sid)
        if rep is not None:
            from diffnormal.plotting import plot_normal_map

            plot_normal_map(rep / f"{sid}_pred.png", pred.vectors, pred.mask, title=f"{sid} {cfg.mode}")
            plot_normal_map(rep / f"{sid}_gt.png", sc.normals_gt.vectors, sc.normals_gt.mask, title=f"{sid} gt")
    (cfg.out / "index.txt").write_text("".join(f"{sid}\n" for sid in ids))
    log.info("wrote %d predictions to %s", len(ids), cfg.out)
    _out(format_kv({"mode": cfg.mode, "scenes": len(ids), "out": str(cfg.out)}))
    return EXIT_OK


def _read_map(path: Path):
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        return read_normal_map(path)
    except RasterFormatError as e:
        raise DataError(f"{path}: {e}") from e


def _pairs_for_evaluation(pred: Path, gt: Path):
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred.stem, _read_map(pred), _read_map(gt))]
    index = gt / "index.txt"
    if not index.exists():
        raise DataError(f"{gt}: missing index.txt")
    return [
        (sid, _read_map(pred / f"{sid}_pred.dnfr"), _read_map(gt / f"{sid}_normals.dnfr"))
        for sid in index.read_text().split()
    ]


def cmd_evaluate(cfg) -> int:
    pairs = _pairs_for_evaluation(cfg.pred, cfg.gt)
    errs, rows = [], []
    for sid, p, g in pairs:
        if p.shape != g.shape:
            raise UsageError(f"{sid}: prediction {p.shape} and ground truth {g.shape} differ in size")
        err, mask = angular_error_map(p, g)
        errs.append(err[mask])
        r = summarize_errors(err, mask)
        rows.append((sid, r.mean_deg, r.median_deg, r.n_valid))
    pooled = np.concatenate(errs)
    report = summarize_errors(pooled, np.ones(pooled.shape, dtype=bool))
    rep = _report_dir(cfg)
    if rep is not None:
        from diffnormal.plotting import plot_histogram

        _write_table(rep / "per_scene.tsv", ("scene", "mean_deg", "median_deg", "n_valid"), rows)
        plot_histogram(rep / "errors.png", pooled, 60, "angular error (deg)", markers=(11.25, 22.5, 30.0))
    _out(report.to_text())
    return EXIT_OK


def _variance_scenes(cfg):
    if cfg.data is not None:
        return _load_scenes(cfg.data)
    width = (0.05, 0.09) if cfg.high_frequency else (0.08, 0.18)
    return make_scenes(cfg.seed, cfg.scenes, n_bumps=4, resolution=cfg.resolution, width=width)


def cmd_variance(cfg) -> int:
    if cfg.repeats < 2:
        raise UsageError("--repeats must be >= 2")
    yoso, sched = _load_net(cfg.yoso)
    refiner, sched_r = _load_net(cfg.refiner)
    if sched.T != sched_r.T:
        raise DataError("checkpoints were trained with different schedules")
    scenes = _variance_scenes(cfg)
    samplers = ["two-stage", "full-chain"] if cfg.sampler == "both" else [cfg.sampler]
    r = cfg.repeats
    results = {}
    for name in samplers:
        mean_var, curve, elapsed, first_pixels = 0.0, np.zeros(r), np.zeros(r), None
        for sc in scenes:
            cond = sc.condition(with_semantics=refiner.sem_channels > 0)
            if name == "two-stage":
                t_plus = _sampler_config(cfg, yoso, 0).t_plus
                fn = two_stage_fn(cond, yoso, refiner, sched, cfg.tau, cfg.yoso_input, t_plus, cfg.num_steps)
            else:
                fn = full_chain_fn(cond, refiner, sched, cfg.full_tau, cfg.full_steps)
            maps, times = run_repeats(fn, r, cfg.seed)
            vr = pixelwise_variance(maps)
            mean_var += vr.mean_variance / len(scenes)
            curve += np.array([v for _, v in ensemble_curve(maps)]) / len(scenes)
            elapsed += np.array(times)
            if first_pixels is None:
                first_pixels = vr.per_pixel
        log.info("%s: mean variance %.6g over %d scenes", name, mean_var, len(scenes))
        results[name] = (mean_var, curve, elapsed, first_pixels)

    summary = {"repeats": r, "scenes": len(scenes)}
    for name, (v, *_rest) in results.items():
        summary["variance_" + name.replace("-", "_")] = v
    if len(results) == 2:
        a, b = results["two-stage"][0], results["full-chain"][0]
        summary["ratio_two_stage_to_full_chain"] = a / b if b > 0 else float("nan")
    header = ("ensemble_size",) + tuple("variance_" + n.replace("-", "_") for n in results)
    rows = [(k + 1,) + tuple(res[1][k] for res in results.values()) for k in range(r)]
    rep = _report_dir(cfg)
    table = _write_table(rep / "ensemble.tsv" if rep else None, header, rows)
    if rep is not None:
        from diffnormal.plotting import plot_curves

        (rep / "report.txt").write_text(format_kv(summary))
        ks = list(range(1, r + 1))
        plot_curves(rep / "ensemble.png", {n: (ks, res[1]) for n, res in results.items()},
                    "ensemble size", "mean per-pixel variance", logy=True)
        # wall time is not reproducible, so it stays out of stdout and the report
        t_header = ("ensemble_size",) + tuple("seconds_" + n.replace("-", "_") for n in results)
        _write_table(rep / "timing.tsv", t_header, [(k + 1,) + tuple(res[2][k] for res in results.values())
                                                    for k in range(r)])
        plot_curves(rep / "timing.png", {n: (ks, res[2]) for n, res in results.items()},
                    "ensemble size", "wall time (s)")
        for n, res in results.items():
            write_float_raster(rep / f"variance_{n}.dnfr", res[3].astype(np.float32))
    _out(format_kv(summary) + "\n" + table)
    return EXIT_OK


def cmd_integrate(cfg) -> int:
    normals = _read_map(cfg.normals)
    depth = integrate_normals(normals, cfg.z_floor, cfg.spacing, tol=cfg.tol, max_iter=cfg.max_iter)
    cfg.out.parent.mkdir(parents=True, exist_ok=True)
    out_path = cfg.out.with_name(cfg.out.name + ".dnfr")
    write_float_raster(out_path, depth.depth.astype(np.float32))
    write_float_raster(cfg.out.with_name(cfg.out.name + ".mask.dnfr"), depth.mask.astype(np.float32))
    if cfg.mesh is not None:
        from diffnormal.integrate import write_ascii_mesh

        write_ascii_mesh(cfg.mesh, depth, cfg.spacing)
    _out(format_kv({
        "depth": str(out_path), "converged": depth.converged, "components": depth.n_components,
        "iterations": ",".join(map(str, depth.iterations)), "valid_pixels": int(depth.mask.sum()),
    }))
    if not depth.converged:
        log.error("conjugate gradient did not reach tol=%g", cfg.tol)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_oracle_demo(cfg) -> int:
    if cfg.n < 1:
        raise UsageError("--n must be >= 1")
    gm = GaussianMixture(cfg.weights, cfg.means, cfg.stds)
    sched = _make_schedule(cfg)
    den = gm_oracle_denoiser(gm, sched)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    x_T = np.random.default_rng(seeds[0]).standard_normal(cfg.n)
    sampler_seed = int(seeds[1].generate_state(1)[0])
    if cfg.sampler == "ddpm":
        out = ddpm_sample(x_T, den, sched, seed=sampler_seed).final
    else:
        scfg = SamplerConfig(tau=cfg.tau, num_steps=cfg.num_steps, t_plus=sched.T, seed=sampler_seed)
        out = ddim_sample(x_T, make_substep_grid(sched.T - 1, cfg.num_steps), den, scfg, sched).final
    nearest = np.argmin(np.abs(out[:, None] - gm.means[None, :]), axis=1)
    summary = {"sampler": cfg.sampler, "n": cfg.n}
    for k in range(len(gm.weights)):
        sel = out[nearest == k]
        summary[f"mode{k}_location"] = float(sel.mean()) if sel.size else float("nan")
        summary[f"mode{k}_weight"] = sel.size / out.size
    rep = _report_dir(cfg)
    if rep is not None:
        from diffnormal.plotting import plot_histogram

        counts, edges = np.histogram(out, bins=80)
        _write_table(rep / "histogram.tsv", ("bin_left", "bin_right", "count"),
                     zip(edges[:-1], edges[1:], counts))
        plot_histogram(rep / "samples.png", out, 80, "x0", markers=tuple(gm.means))
    _out(format_kv(summary))
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-yoso": cmd_train_yoso,
    "train-refiner": cmd_train_refiner,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "variance": cmd_variance,
    "integrate": cmd_integrate,
    "oracle-demo": cmd_oracle_demo,
}


def _setup_logging(verbose: int) -> None:
    # own handler on the current stderr, so repeated in-process calls behave the same
    for h in list(log.handlers):
        log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.WARNING - 10 * min(verbose, 2))
    log.propagate = False


def main(argv=None) -> int:
    parser, options = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: --help exits 0, bad usage 2
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    _setup_logging(args.verbose)
    try:
        cfg = options[args.command].resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"diffnormal {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NotConverged as e:
        log.error("%s", e)
        return EXIT_NOT_CONVERGED
    except (FloatingPointError, ZeroDivisionError) as e:
        log.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except (DataError, RasterFormatError, OSError) as e:
        log.error("I/O error: %s", e)
        return EXIT_IO
    except ValueError as e:
        print(f"diffnormal {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

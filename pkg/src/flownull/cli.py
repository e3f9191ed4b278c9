"""Command-line driver: simulate, pretrain, train, sample, map, eval, gaincurve.

Every command prints a one-line JSON summary on success. Failures print
``{"error": ..., "message": ...}`` to stderr and exit with status 1 (2 for
usage errors, as argparse does).
"""

import os
import sys


def _apply_thread_cap():
    """Honour FLOWNULL_THREADS before numpy loads its BLAS."""
    raw = os.environ.get("FLOWNULL_THREADS")
    if raw is None:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("FLOWNULL_THREADS must be a positive integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


_THREAD_ERROR = None
try:
    THREADS = _apply_thread_cap()
except ValueError as exc:
    THREADS, _THREAD_ERROR = None, exc

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from flownull import mri  # noqa: E402
from flownull.config import RunConfig, preset  # noqa: E402
from flownull.core import io as fnt  # noqa: E402
from flownull.data import Dataset  # noqa: E402

log = logging.getLogger("flownull")


class CLIError(Exception):
    """A user-facing failure with a stable error code."""

    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# -- shared plumbing -------------------------------------------------------------

def load_config(args):
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CLIError("missing_config", f"config file {path} does not exist")
        cfg = RunConfig.load(path)
        if args.preset and args.preset != cfg.preset:
            raise CLIError("preset_conflict", f"--preset {args.preset} conflicts with config preset {cfg.preset}")
        return cfg
    return preset(args.preset or "desk")


def _out_dir(args, required=True):
    if args.out is None:
        if required:
            raise CLIError("missing_out", "--out DIR is required")
        return None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError("out_exists", f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _finite_or_str(v):
    v = float(v)
    return v if np.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")


def load_dataset(path):
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise CLIError("missing_dataset", f"no dataset at {path} (run `flownull simulate` first)")
    return Dataset.load(path)


def load_checkpoint(path):
    from flownull.flow import ConditionalFlow

    path = Path(path)
    if (path / "model" / "manifest.json").exists():
        path = path / "model"
    if not (path / "manifest.json").exists():
        raise CLIError("missing_checkpoint", f"no checkpoint at {path} (run `flownull train` first)")
    model, manifest = ConditionalFlow.load(path)
    if "mask" in manifest:
        model.mask = mri.SamplingMask.from_json(manifest["mask"])
    model.checkpoint_id = f"{manifest.get('config_hash')}:{path}"
    return model, manifest


def save_checkpoint(model, directory, run, data, stage, nullspace_learning, extra=None):
    doc = {"config_hash": run.hash(), "run_config": run.to_dict(), "mask": data.mask.to_json(),
           "data_config_hash": data.meta.get("config_hash"), "stage": stage,
           "nullspace_learning": nullspace_learning}
    doc.update(extra or {})
    return model.save(directory, extra=doc)


def parse_indices(spec, n):
    if spec is None or spec == "all":
        return list(range(n))
    out = []
    for part in spec.split(","):
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a or 0), int(b or n)))
        else:
            out.append(int(part))
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise CLIError("bad_index", f"indices {bad} outside dataset of {n}")
    return out


def _preview(path, image):
    mri.write_pgm(path, np.abs(image))


# -- commands --------------------------------------------------------------------

def cmd_simulate(args):
    run = load_config(args)
    d = run.dataset
    seed = d.seed if args.seed is None else args.seed
    out = _out_dir(args)
    mask = mri.make_mask(d.mask, d.width, d.R, d.acs, seed=seed)
    data = Dataset.simulate(d.n_samples, d.height, d.width, d.coils, mask, d.noise_sd, seed, d.normalize)
    data.save(out, config_hash=run.hash(), force=True)
    run.save(out / "config.json")
    return {"out": str(out), "n_samples": len(data), "config_hash": run.hash(),
            "acceleration": float(mask.acceleration)}


def _model_for(run, data):
    from flownull.flow import ConditionalFlow

    cfg = run.model_config()
    if (cfg.channels // 2, cfg.height, cfg.width) != tuple(data.shape):
        raise CLIError("shape_mismatch", f"config describes {(cfg.channels // 2, cfg.height, cfg.width)} "
                                         f"images but the dataset holds {tuple(data.shape)}")
    return ConditionalFlow(cfg)


def _train_config(run, args):
    from flownull.train import TrainConfig

    cfg = TrainConfig.from_run(run)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_pretrain(args):
    from flownull.train import pretrain_condnet

    run = load_config(args)
    data = load_dataset(args.data)
    out = _out_dir(args)
    tcfg = _train_config(run, args)
    model = _model_for(run, data)
    hist = pretrain_condnet(model, data, tcfg)
    save_checkpoint(model, out, run, data, "pretrain", tcfg.nullspace_learning,
                    {"pretrain": {k: v for k, v in hist.items() if k != "epochs"}})
    _write_json(out / "pretrain_history.json", hist)
    return {"out": str(out), "initial_val_mse": hist["initial_val_mse"], "final_val_mse": hist["final_val_mse"]}


def cmd_train(args):
    from flownull.train import train, train_joint

    run = load_config(args)
    data = load_dataset(args.data)
    if args.resume:
        if args.out is None:
            raise CLIError("missing_out", "--resume needs the --out DIR of the run to continue")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _out_dir(args)
    tcfg = _train_config(run, args)
    model = _model_for(run, data)
    if args.init:
        init, manifest = load_checkpoint(args.init)
        if manifest.get("nullspace_learning", tcfg.nullspace_learning) != tcfg.nullspace_learning:
            raise CLIError("ablation_mismatch", "initial checkpoint was built for the other target space")
        model.load_state_dict(init.state_dict())
        hist = {"joint": train_joint(model, data, tcfg, out_dir=out, resume=args.resume)}
    elif args.resume:
        hist = {"joint": train_joint(model, data, tcfg, out_dir=out, resume=True)}
    else:
        hist = train(model, data, tcfg, out_dir=out)
    save_checkpoint(model, out / "model", run, data, "joint", tcfg.nullspace_learning,
                    {"best_val_bpd": hist["joint"]["best_val_bpd"], "best_epoch": hist["joint"]["best_epoch"]})
    run.save(out / "config.json")
    return {"out": str(out), "best_val_bpd": hist["joint"]["best_val_bpd"],
            "best_epoch": hist["joint"]["best_epoch"], "config_hash": run.hash()}


def _recon_manifest(out, kind, run, manifest, data_path, data, indices, seed, extra):
    doc = {"kind": kind, "config_hash": run.hash(), "checkpoint_config_hash": manifest.get("config_hash"),
           "data": str(data_path), "data_config_hash": data.meta.get("config_hash"),
           "indices": indices, "seed": seed}
    doc.update(extra)
    _write_json(out / "manifest.json", doc)


def cmd_sample(args):
    from flownull.posterior import posterior_mean, sample_posterior

    run = load_config(args)
    data = load_dataset(args.data)
    model, manifest = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    P = args.P or run.eval.n_posterior
    seed = run.eval.seed if args.seed is None else args.seed
    dc = run.ablation.data_consistency
    nl = manifest.get("nullspace_learning", True)
    indices = parse_indices(args.indices, len(data))
    for i in indices:
        b = sample_posterior(model, data.y[i], data.mask, P, seed=seed + i, maps=data.maps[i],
                             scale=data.scales[i], normalize=data.normalize,
                             nullspace_learning=nl, data_consistency=dc)
        est = posterior_mean(b, run.eval.combine)
        d = out / f"cond_{i:05d}"
        d.mkdir(exist_ok=True)
        fnt.save(d / "samples.fnt", b.samples)
        fnt.save(d / "estimate.fnt", np.asarray(est, np.complex64))
        _preview(d / "mean.pgm", est)
        _preview(d / "sample_0.pgm", b.combined[0] if b.combined is not None else b.rss[0])
        _write_json(d / "sidecar.json", {
            "index": i, "P": P, "seeds": [seed + i], "config_hash": run.hash(),
            "checkpoint": model.checkpoint_id, "data_consistency": dc,
            "raw_generator_output": not dc, "nullspace_learning": nl, "combine": run.eval.combine,
            "bits_per_dim": b.bits_per_dim.tolist(),
            "consistency_residuals": b.residuals(data.y[i]).tolist(),
        })
    _recon_manifest(out, "sample", run, manifest, args.data, data, indices, seed,
                    {"P": P, "data_consistency": dc})
    return {"out": str(out), "conditions": len(indices), "P": P, "data_consistency": dc}


def cmd_map(args):
    from flownull.posterior import map_estimate

    run = load_config(args)
    data = load_dataset(args.data)
    model, manifest = load_checkpoint(args.checkpoint)
    out = _out_dir(args)
    seed = run.eval.seed if args.seed is None else args.seed
    nl = manifest.get("nullspace_learning", True)
    iters = run.eval.map_iters if args.iters is None else args.iters
    lr = run.eval.map_lr if args.lr is None else args.lr
    indices = parse_indices(args.indices, len(data))
    q = 2 * int(np.prod(data.shape))
    for i in indices:
        r = map_estimate(model, data.y[i], data.mask, init=None if args.init == "sample" else "zeros",
                         iters=iters, lr=lr, scale=data.scales[i], normalize=data.normalize,
                         nullspace_learning=nl, n_init=run.eval.n_posterior, seed=seed + i)
        if run.eval.combine == "sense":
            est = mri.coil_combine_sense(r.x, data.maps[i])
        else:
            est = mri.coil_combine_rss(r.x)
        d = out / f"cond_{i:05d}"
        d.mkdir(exist_ok=True)
        fnt.save(d / "map.fnt", r.x)
        fnt.save(d / "estimate.fnt", np.asarray(est, np.complex64))
        _preview(d / "map.pgm", est)
        with open(d / "trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iter", "log_density", "bits_per_dim"])
            for it, v in enumerate(r.trace):
                w.writerow([it, float(v), float(-v / (q * np.log(2)))])
        _write_json(d / "sidecar.json", {
            "index": i, "seed": seed + i, "init": r.init, "iters": iters, "lr": lr,
            "config_hash": run.hash(), "checkpoint": model.checkpoint_id, "aborted": r.aborted,
            "nullspace_learning": nl, "combine": run.eval.combine,
            "bits_per_dim": float(-r.log_density / (q * np.log(2))),
            "consistency_residual": float(np.max(np.abs(mri.apply_A(r.x, data.mask) - data.y[i]))),
        })
    _recon_manifest(out, "map", run, manifest, args.data, data, indices, seed, {"iters": iters, "lr": lr})
    return {"out": str(out), "conditions": len(indices), "iters": iters}


def _estimates(args, data):
    """``{name: (config_hash, {index: complex image})}`` for every input to evaluate."""
    truth = data.i_true
    if args.estimate == "truth":
        return {"truth": (data.meta.get("config_hash"), dict(enumerate(truth)))}
    if args.estimate == "zero-filled":
        zf = mri.coil_combine_sense(data.y, data.maps)
        return {"zero-filled": (data.meta.get("config_hash"), dict(enumerate(zf)))}
    if not args.recon:
        raise CLIError("missing_recon", "eval needs --recon DIR (or --estimate truth|zero-filled)")
    found = {}
    for r in args.recon:
        r = Path(r)
        if not (r / "manifest.json").exists():
            raise CLIError("missing_recon", f"no reconstruction manifest at {r}")
        m = json.loads((r / "manifest.json").read_text())
        imgs = {i: fnt.load(r / f"cond_{i:05d}" / "estimate.fnt") for i in m["indices"]}
        found[str(r)] = (m.get("config_hash"), imgs)
    return found


def cmd_eval(args):
    from flownull.metrics import cpsnr, psnr, ssim

    data = load_dataset(args.data)
    out = _out_dir(args)
    inputs = _estimates(args, data)
    hashes = {h for h, _ in inputs.values()} | {data.meta.get("config_hash")}
    hashes.discard(None)
    if len(hashes) > 1 and not args.allow_mixed:
        raise CLIError("mixed_config_hash",
                       f"inputs come from different configs {sorted(hashes)}; pass --allow-mixed to compare anyway")
    truth = data.i_true
    rows, summary = [], {}
    for name, (h, imgs) in inputs.items():
        vals = {"psnr": [], "cpsnr": [], "ssim": []}
        for i, est in sorted(imgs.items()):
            t = truth[i]
            row = {"input": name, "index": i, "psnr": psnr(np.abs(est), np.abs(t)),
                   "cpsnr": cpsnr(est, t), "ssim": ssim(np.abs(est), np.abs(t))}
            rows.append(row)
            for k in vals:
                vals[k].append(row[k])
        summary[name] = {k: _finite_or_str(np.mean(v)) for k, v in vals.items()}
        summary[name]["n"] = len(imgs)
        summary[name]["config_hash"] = h
    with open(out / "metrics.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["input", "index", "psnr", "cpsnr", "ssim"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
    _write_json(out / "summary.json", {"inputs": summary, "config_hashes": sorted(hashes),
                                       "allow_mixed": bool(args.allow_mixed)})
    return {"out": str(out), "summary": summary}


def cmd_gaincurve(args):
    from flownull.metrics import gain_curve
    from flownull.posterior import sample_posterior

    run = load_config(args)
    out = _out_dir(args)
    seed = run.eval.seed if args.seed is None else args.seed
    P_list = sorted(run.eval.gain_P)
    trials = args.trials or run.eval.gain_trials

    if args.toy:
        from flownull.toy import ToyProblem, unvec

        toy = ToyProblem.build(args.toy_seed)
        if args.checkpoint:
            model, manifest = load_checkpoint(args.checkpoint)

            def draw(rng, n):
                x, m = toy.oracle.simulate(1, rng)
                b = sample_posterior(model, _toy_y(toy, m), toy.mask, n, seed=int(rng.integers(2**31)), normalize=False,
                                     nullspace_learning=manifest.get("nullspace_learning", False),
                                     data_consistency=False)
                return unvec(x[0]), b.samples
            source = "toy-flow"
        else:
            def draw(rng, n):
                x, m = toy.oracle.simulate(1, rng)
                return unvec(x[0]), unvec(toy.oracle.sample(m[0], n, rng))
            source = "toy-oracle"
    else:
        if not (args.checkpoint and args.data):
            raise CLIError("missing_input", "gaincurve needs --checkpoint and --data (or --toy)")
        model, manifest = load_checkpoint(args.checkpoint)
        data = load_dataset(args.data)
        nl = manifest.get("nullspace_learning", True)

        def draw(rng, n):
            i = int(rng.integers(len(data)))
            b = sample_posterior(model, data.y[i], data.mask, n, seed=int(rng.integers(2**31)),
                                 maps=data.maps[i], scale=data.scales[i], normalize=data.normalize,
                                 nullspace_learning=nl, data_consistency=run.ablation.data_consistency)
            return data.i_true[i], b.combined
        source = "dataset"

    gc = gain_curve(draw, P_list, trials, seed=seed)
    with open(out / "gaincurve.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["P", "empirical_db", "theory_db", "magnitude_db"])
        w.writeheader()
        for row in gc.rows():
            w.writerow(row)
    _write_json(out / "gaincurve.json", {"source": source, "trials": trials, "seed": seed,
                                         "config_hash": run.hash(), "rows": gc.rows(),
                                         "max_deviation_db": gc.max_deviation()})
    return {"out": str(out), "source": source, "max_deviation_db": gc.max_deviation()}


def _toy_y(toy, m):
    from flownull.toy import measurements_to_zero_filled

    return measurements_to_zero_filled(m, toy.mask)[0].astype(np.complex64)


# -- parser ---------------------------------------------------------------------

COMMANDS = {
    "simulate": cmd_simulate, "pretrain": cmd_pretrain, "train": cmd_train, "sample": cmd_sample,
    "map": cmd_map, "eval": cmd_eval, "gaincurve": cmd_gaincurve,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config JSON")
    common.add_argument("--preset", choices=["desk", "paper"], help="base preset when no --config is given")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the stage seed")
    common.add_argument("--force", action="store_true", help="write into a non-empty --out")
    common.add_argument("--allow-mixed", action="store_true", help="let eval compare inputs from different configs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="flownull", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate a phantom dataset")
    s = sub.add_parser("pretrain", parents=[common], help="MSE-pretrain the conditioning network")
    s.add_argument("--data", required=True)
    s = sub.add_parser("train", parents=[common], help="pretrain then jointly train by NLL")
    s.add_argument("--data", required=True)
    s.add_argument("--init", help="start from a pretrained checkpoint and skip stage 1")
    s.add_argument("--resume", action="store_true", help="continue from <out>/last")
    for name, helptext in (("sample", "draw posterior samples"), ("map", "MAP estimates")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--data", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--indices", help="e.g. 0,3,5 or 10:20 (default: all)")
        if name == "sample":
            s.add_argument("--P", type=int, help="samples per condition")
        else:
            s.add_argument("--iters", type=int)
            s.add_argument("--lr", type=float)
            s.add_argument("--init", choices=["sample", "zeros"], default="sample")
    s = sub.add_parser("eval", parents=[common], help="PSNR / cPSNR / SSIM against ground truth")
    s.add_argument("--data", required=True)
    s.add_argument("--recon", action="append", help="output dir of sample or map (repeatable)")
    s.add_argument("--estimate", choices=["recon", "truth", "zero-filled"], default="recon")
    s = sub.add_parser("gaincurve", parents=[common], help="P-sample averaging gain vs theory")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--toy", action="store_true", help="use the 8-dim linear-Gaussian toy problem")
    s.add_argument("--toy-seed", type=int, default=0)
    s.add_argument("--trials", type=int)
    return p


def _error(code, message):
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _THREAD_ERROR is not None:
        return _error("bad_environment", str(_THREAD_ERROR))
    try:
        result = COMMANDS[args.command](args)
    except CLIError as exc:
        return _error(exc.code, str(exc))
    except (FileNotFoundError, FileExistsError) as exc:
        return _error(type(exc).__name__, str(exc))
    except Exception as exc:  # surfaced as JSON so pipelines can parse it
        log.debug("command failed", exc_info=True)
        return _error(type(exc).__name__, str(exc))
    print(json.dumps({"command": args.command, **result}, default=_jsonable))
    return 0


if __name__ == "__main__":
    sys.exit(main())

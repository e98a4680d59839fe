"""Command-line workflow: synth, train, infer, eval, ablate, check, params.

Every subcommand is deterministic given identical flags and seed, records
its resolved configuration into the output directory, and maps failures to
stable exit codes: 0 success, 2 usage/input, 3 I/O, 4 partial failure,
1 internal error.
"""

import argparse
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import degrade, metrics, model as model_mod, spectral, ssm, train as train_mod
from .errors import (ConfigError, ContractError, DomainError, FdvmError,
                     FormatError, InputError, ShapeError)
from .imgio import list_images, read_image, write_image
from .seeding import substream
from .tensor import Graph, Tensor, backward

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARTIAL = 4


def _read_config_file(path) -> dict:
    """Plain key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise InputError(f"cannot read config file {path}: {e}") from e
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _resolve_options(args, spec: dict) -> dict:
    """Merge flag values over config-file values over hard defaults.

    `spec` maps option name -> (type, default). Unknown file keys error out.
    """
    file_values = {}
    if getattr(args, "config", None):
        file_values = _read_config_file(args.config)
        unknown = set(file_values) - set(spec)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, (typ, default) in spec.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_values:
            try:
                resolved[key] = typ(file_values[key])
            except ValueError as e:
                raise ConfigError(f"config key {key}: {e}") from e
        else:
            resolved[key] = default
    return resolved


def _record_run(out_dir, resolved: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k}={resolved[k]}" for k in sorted(resolved)]
    (out / "run_config.txt").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = {
        "src": (str, None), "out": (str, None), "n": (int, 12),
        "train_frac": (float, 5.0 / 6.0), "seed": (int, 0),
        "g": (float, 2.0), "a": (float, -0.3293), "b": (float, 1.1258),
    }
    opt = _resolve_options(args, spec)
    if not opt["src"] or not opt["out"]:
        raise InputError("synth requires --src and --out")
    if opt["n"] < 1:
        raise InputError(f"--n must be >= 1, got {opt['n']}")
    crf = degrade.CrfModel(a=opt["a"], b=opt["b"], gain_scale=opt["g"])
    _record_run(opt["out"], opt)
    manifest = degrade.build_dataset(opt["src"], opt["out"], opt["n"],
                                     opt["train_frac"], opt["seed"], crf)
    n_train = len(manifest.split("train"))
    print(f"wrote {len(manifest.records)} pairs ({n_train} train, "
          f"{len(manifest.records) - n_train} test) under {opt['out']}")
    return EXIT_OK


def _train_impl(args, forced_ablation=None) -> int:
    spec = {
        "manifest": (str, None), "out": (str, "train_out"),
        "channels": (int, 32), "blocks": (int, 8), "state_dim": (int, 16),
        "fixed_hw": (int, 64), "patch": (int, 64), "batch": (int, 4),
        "epochs": (int, 100), "lr": (float, 2e-4), "seed": (int, 0),
        "ablation": (str, "full"), "checkpoint_every": (int, 0),
    }
    opt = _resolve_options(args, spec)
    if not opt["manifest"]:
        raise InputError("train requires --manifest")
    if forced_ablation is not None:
        opt["ablation"] = forced_ablation
    manifest = degrade.read_manifest(opt["manifest"])
    cfg = model_mod.ModelConfig(
        channels=opt["channels"], blocks_per_path=opt["blocks"],
        ssm_state_dim=opt["state_dim"], ssm_fixed_hw=opt["fixed_hw"],
        ablation=opt["ablation"]).validate()
    out = Path(opt["out"])
    _record_run(out, opt)
    tcfg = train_mod.TrainConfig(
        lr=opt["lr"], batch_size=opt["batch"], epochs=opt["epochs"],
        patch_size=opt["patch"], seed=opt["seed"],
        checkpoint_path=str(out / "model.ckpt"),
        checkpoint_every=opt["checkpoint_every"])
    weights = model_mod.build_model(cfg, opt["seed"])
    ckpt, lines = train_mod.train_loop(weights, manifest, tcfg)
    (out / "train_log.txt").write_text("\n".join(lines) + "\n" if lines else "")
    for line in lines:
        print(line)
    print(f"checkpoint: {tcfg.checkpoint_path} (epoch {ckpt.epoch})")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_impl(args)


def cmd_ablate(args) -> int:
    if args.ablation is None:
        raise InputError("ablate requires --ablation")
    return _train_impl(args)


def _infer_one(weights, path, out_dir) -> bool:
    img = read_image(path)
    if img.shape[1] < 8 or img.shape[2] < 8:
        raise InputError(f"{path}: images must be at least 8x8")
    out = model_mod.fdvm_forward(Tensor(img[None]), weights)
    write_image(Path(out_dir) / (Path(path).stem + ".png"),
                np.clip(out.data[0], 0.0, 1.0))
    return True


def cmd_infer(args) -> int:
    spec = {"checkpoint": (str, None), "input": (str, None), "out": (str, None)}
    opt = _resolve_options(args, spec)
    if not (opt["checkpoint"] and opt["input"] and opt["out"]):
        raise InputError("infer requires --checkpoint, --input and --out")
    weights = train_mod.weights_from_checkpoint(
        train_mod.load_checkpoint(opt["checkpoint"]))
    inp = Path(opt["input"])
    paths = list_images(inp) if inp.is_dir() else [inp]
    if not paths:
        raise InputError(f"no images under {inp}")
    Path(opt["out"]).mkdir(parents=True, exist_ok=True)
    _record_run(opt["out"], opt)
    failed = []
    for p in paths:
        try:
            _infer_one(weights, p, opt["out"])
        except (InputError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            failed.append(str(p))
    print(f"corrected {len(paths) - len(failed)}/{len(paths)} images -> {opt['out']}")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_eval(args) -> int:
    spec = {"manifest": (str, None), "pred_dir": (str, None),
            "checkpoint": (str, None), "report": (str, "report.txt")}
    opt = _resolve_options(args, spec)
    if not opt["manifest"] or not (opt["pred_dir"] or opt["checkpoint"]):
        raise InputError("eval requires --manifest and --pred-dir or --checkpoint")
    manifest = degrade.read_manifest(opt["manifest"])
    test = manifest.split("test")
    if not test:
        raise InputError("manifest has an empty test split")

    _record_run(Path(opt["report"]).resolve().parent, opt)
    weights = None
    if opt["checkpoint"]:
        weights = train_mod.weights_from_checkpoint(
            train_mod.load_checkpoint(opt["checkpoint"]))

    triples = []
    for rec in test:
        target = read_image(rec.clean_path)
        if weights is not None:
            x = read_image(rec.degraded_path)
            out = model_mod.fdvm_forward(Tensor(x[None]), weights)
            pred = np.clip(out.data[0], 0.0, 1.0)
        else:
            cand = Path(opt["pred_dir"]) / Path(rec.degraded_path).name
            pred = read_image(cand) if cand.exists() else None
        triples.append((rec.degraded_path, pred, target))

    report = metrics.evaluate(triples)
    metrics.write_report(report, opt["report"])
    mean_psnr = report.mean_psnr
    print(f"count={report.count} mean_psnr="
          f"{'nan' if math.isnan(mean_psnr) else f'{mean_psnr:.4f}'} "
          f"mean_ssim={report.mean_ssim:.6f} inf={report.psnr_inf_count} "
          f"missing={len(report.missing)}")
    print(f"report: {opt['report']}")
    return EXIT_PARTIAL if report.missing else EXIT_OK


def cmd_params(args) -> int:
    spec = {"channels": (int, 32), "blocks": (int, 8), "state_dim": (int, 16),
            "fixed_hw": (int, 64), "ablation": (str, "full")}
    opt = _resolve_options(args, spec)
    cfg = model_mod.ModelConfig(
        channels=opt["channels"], blocks_per_path=opt["blocks"],
        ssm_state_dim=opt["state_dim"], ssm_fixed_hw=opt["fixed_hw"],
        ablation=opt["ablation"]).validate()
    weights = model_mod.build_model(cfg, seed=0)
    actual = model_mod.parameter_count(weights)
    expected = model_mod.expected_parameter_count(cfg)
    print(f"channels={cfg.channels} blocks_per_path={cfg.blocks_per_path} "
          f"state_dim={cfg.ssm_state_dim} ablation={cfg.ablation}")
    print(f"parameters: {actual} (closed form: {expected})")
    if actual != expected:
        print("MISMATCH between registry and closed form", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# self-check


def _check_spectral(rng):
    for h, w in ((5, 7), (17, 13)):
        x = rng.uniform(0, 1, (3, h, w))
        pair = spectral.image_to_pair(Tensor(x))
        back = spectral.pair_to_image(pair)
        if np.abs(back.data - x).max() > 1e-9:
            return "round trip exceeded 1e-9"
        re, im = spectral.fft2(Tensor(x))
        lhs = (re.data ** 2 + im.data ** 2).sum()
        rhs = h * w * (x ** 2).sum()
        if abs(lhs - rhs) > 1e-9 * rhs:
            return "Parseval identity violated"
    return None


def _check_ssm(rng):
    fault = os.environ.get("FDVM_FAULT") == "ssm"
    for _ in range(5):
        B, L, C, N = 1, int(rng.integers(4, 16)), int(rng.integers(1, 5)), 4
        params = ssm.init_ssm(C, N, rng)
        u = Tensor(rng.uniform(-1, 1, (B, L, C)))
        got = ssm.selective_scan(u, params).data
        if fault:
            got = got + 1e-3   # deliberate corruption, exercised by tests
        want = ssm.scan_reference(u, params).data
        if not np.array_equal(got, want):
            return "selective_scan disagrees with scan_reference"
    y = ssm.scan_diagnostic(
        abar=np.full((1, 3, 1, 1), 0.5), bu=np.ones((1, 3, 1, 1)),
        c_seq=np.ones((1, 3, 1)), d_skip=np.zeros(1), u=np.ones((1, 3, 1)))
    if not np.allclose(y.ravel(), [1.0, 1.5, 1.75], atol=0, rtol=0):
        return "hand-unrolled recurrence mismatch"
    return None


def _check_gradients(rng):
    from .tensor import conv2d, hadamard, layer_norm, softmax, tsum

    x = Tensor(rng.uniform(-1, 1, (1, 2, 5, 5)), requires_grad=True)
    k = Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (2,)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, (2,)), requires_grad=True)
    beta = Tensor(rng.uniform(-0.5, 0.5, (2,)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (1, 25, 2)))

    def forward():
        from .tensor import flatten_spatial
        seq = flatten_spatial(conv2d(x, k, b))
        seq = layer_norm(seq, gamma, beta)
        return tsum(hadamard(softmax(seq, axis=2), probe))

    leaves = [x, k, b, gamma, beta]
    for t in leaves:
        t.zero_grad()
    with Graph() as g:
        loss = forward()
    backward(loss, g)

    h = 1e-5
    for t in leaves:
        flat = t.data.reshape(-1)
        gflat = t.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            fp = forward().item()
            flat[idx] = orig - h
            fm = forward().item()
            flat[idx] = orig
            fd = (fp - fm) / (2 * h)
            if abs(fd - gflat[idx]) > 1e-4 * max(1.0, abs(fd)):
                return f"gradient mismatch: {fd} vs {gflat[idx]}"
    return None


def _check_identity(rng):
    cfg = model_mod.ModelConfig(channels=4, blocks_per_path=1, ssm_state_dim=2,
                                ssm_fixed_hw=8)
    weights = model_mod.build_model(cfg, seed=1)
    x = Tensor(rng.uniform(0, 1, (1, 3, 11, 9)))
    out = model_mod.fdvm_forward(x, weights)
    if out.dims != x.dims:
        return f"shape not preserved: {out.dims}"
    err = np.abs(out.data - x.data).max()
    if err >= 1e-6:
        return f"identity-at-init error {err:.3e}"
    return None


def _check_metrics(_rng):
    a = np.zeros((3, 8, 8))
    b = np.full((3, 8, 8), 0.5)
    psnr_val = metrics.psnr(a, b)
    if abs(psnr_val - 6.0206) > 1e-3:
        return f"psnr closed form off: {psnr_val}"
    s = metrics.ssim(np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.4))
    if abs(s - 0.80010) > 1e-4:
        return f"ssim closed form off: {s}"
    if not math.isinf(metrics.psnr(a, a)) or metrics.ssim(b, b) != 1.0:
        return "identical images must score (inf, 1.0)"
    return None


def _check_degrade(_rng):
    img = np.full((3, 4, 4), 0.37)
    if np.abs(degrade.lecarm_apply(img, 0.0) - img).max() > 1e-12:
        return "E=0 is not the identity"
    v = degrade.lecarm_apply(np.full((3, 1, 1), 0.5), 1.0)[0, 0, 0]
    if abs(v - 0.7248) > 1e-3:
        return f"f(0.5, k=2) off: {v}"
    return None


def cmd_check(_args) -> int:
    checks = [
        ("spectral", _check_spectral),
        ("ssm", _check_ssm),
        ("tensor", _check_gradients),
        ("model", _check_identity),
        ("metrics", _check_metrics),
        ("degrade", _check_degrade),
    ]
    failures = []
    for name, fn in checks:
        rng = substream(12345, "test")
        t0 = time.perf_counter()
        try:
            problem = fn(rng)
        except Exception as e:   # a crashed check is a failed check
            problem = f"raised {type(e).__name__}: {e}"
        dt = time.perf_counter() - t0
        status = "ok" if problem is None else "FAIL"
        print(f"{status:4s} {name:<10s} ({dt:6.2f} s)"
              + (f"  {problem}" if problem else ""))
        if problem is not None:
            failures.append(name)
    if failures:
        print(f"failed modules: {', '.join(failures)}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def _add_common(p):
    p.add_argument("--config", help="optional key=value config file; flags win")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdvm", description="frequency-domain exposure correction toolkit")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="synthesize degraded/clean pairs")
    _add_common(p)
    p.add_argument("--src")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--train-frac", dest="train_frac", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--g", type=float, help="exposure ratio base")
    p.add_argument("--a", type=float, help="camera response exponent constant")
    p.add_argument("--b", type=float, help="camera response gain constant")
    p.set_defaults(func=cmd_synth)

    for name, fn in (("train", cmd_train), ("ablate", cmd_ablate)):
        p = subs.add_parser(name, help=f"{name} the model on a manifest")
        _add_common(p)
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--channels", type=int)
        p.add_argument("--blocks", type=int)
        p.add_argument("--state-dim", dest="state_dim", type=int)
        p.add_argument("--fixed-hw", dest="fixed_hw", type=int)
        p.add_argument("--patch", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--ablation", choices=model_mod.ABLATIONS)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        p.set_defaults(func=fn)

    p = subs.add_parser("infer", help="correct images with a trained checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--out")
    p.set_defaults(func=cmd_infer)

    p = subs.add_parser("eval", help="PSNR/SSIM report on the test split")
    _add_common(p)
    p.add_argument("--manifest")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--checkpoint")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("params", help="parameter count for a configuration")
    _add_common(p)
    p.add_argument("--channels", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--state-dim", dest="state_dim", type=int)
    p.add_argument("--fixed-hw", dest="fixed_hw", type=int)
    p.add_argument("--ablation", choices=model_mod.ABLATIONS)
    p.set_defaults(func=cmd_params)

    p = subs.add_parser("check", help="fast self-test of the numeric core")
    p.set_defaults(func=cmd_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ConfigError, DomainError, ShapeError, ContractError,
            FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except (FdvmError, Exception) as e:   # noqa: BLE001 - last-resort mapping
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

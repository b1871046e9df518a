"""Command-line entry point: ``expobracket <command> [--key value ...]``.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags. Every command writes its
fully resolved configuration next to its outputs.

Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import evalkit as ek
from . import simpipe as sp
from . import tmrnet as tm
from . import train as tr
from .errors import ConfigurationError, FormatError, NumericalError, ParameterError, UsageError
from .rawimg import read_raw, write_raw

log = logging.getLogger("expobracket")

COMMANDS = ("simulate", "pretrain", "adapt", "infer", "eval", "burst-compare", "grad-check")
EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_str(text):
    return None if text in (None, "", "none") else str(text)


# key -> (parser, default)
DEFAULTS = {
    # data synthesis
    "T": (int, 5),
    "S": (int, 4),
    "bits": (int, 10),
    "task": (str, "ire"),
    "scenes": (int, 8),
    "test_scenes": (int, 4),
    "size": (int, 64),
    "seed": (int, 0),
    "shot_min": (float, sp.SHOT_RANGE[0]),
    "shot_max": (float, sp.SHOT_RANGE[1]),
    "burst_exposure": (int, 0),
    "burst_count": (int, 0),
    "burst_exposures": (str, ""),
    # network
    "channels": (int, 16),
    "enc_blocks": (int, 2),
    "recon_blocks": (int, 2),
    "alpha_c": (int, 2),
    "alpha_s": (int, 3),
    # training
    "lr": (float, 1e-4),
    "adapt_lr": (float, 7.5e-5),
    "lr_min": (float, 1e-6),
    "epochs": (int, 400),
    "adapt_epochs": (int, 10),
    "steps": (int, 0),
    "batch": (int, 8),
    "adapt_batch": (int, 1),
    "patch": (int, 0),
    "beta1": (float, 0.9),
    "beta2": (float, 0.999),
    "weight_decay": (float, 0.0),
    "lambda_self": (float, 1.0),
    "use_ema": (_bool, True),
    "R": (int, 3),
    "ema_decay": (float, 0.999),
    "gamma": (float, 1 / 2.2),
    "mu": (float, 5000.0),
    "augment": (_bool, True),
    "val_every": (int, 0),
    # evaluation / inference
    "r": (int, 0),
    "predictions": (_opt_str, None),
    "scene": (_opt_str, None),
    "grad_seeds": (int, 3),
    "grad_tol": (float, 1e-4),
    # runtime and paths
    "workers": (int, 1),
    "force": (_bool, False),
    "data": (_opt_str, None),
    "split": (_opt_str, None),
    "out": (_opt_str, None),
    "checkpoint": (_opt_str, None),
    "resume": (_opt_str, None),
}


# ---------------------------------------------------------------- config


def read_config_file(path) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_config(file_values: dict | None = None, flags: dict | None = None) -> dict:
    """Merge defaults < file < flags, converting and validating every value."""
    cfg = {key: default for key, (_, default) in DEFAULTS.items()}
    for source in (file_values or {}, flags or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise UsageError(f"unknown config key {key!r}")
            parse = DEFAULTS[key][0]
            try:
                cfg[key] = parse(value)
            except (TypeError, ValueError):
                raise UsageError(f"bad value {value!r} for key {key!r}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if cfg["T"] < 1 or cfg["S"] < 2:
        raise UsageError("need T >= 1 and S >= 2")
    if cfg["T"] > 1 and not 1 <= cfg["R"] < cfg["T"]:
        raise UsageError(f"R must satisfy 1 <= R < T (got R={cfg['R']}, T={cfg['T']})")
    if cfg["task"] not in ("ire", "ire+"):
        raise UsageError(f"task must be 'ire' or 'ire+', got {cfg['task']!r}")
    if cfg["workers"] < 1:
        raise UsageError("workers must be at least 1")
    if not 0 <= cfg["ema_decay"] < 1:
        raise UsageError("ema_decay must lie in [0, 1)")
    if cfg["lambda_self"] < 0:
        raise UsageError("lambda_self must be non-negative")
    if not 0 < cfg["shot_min"] <= cfg["shot_max"]:
        raise UsageError("need 0 < shot_min <= shot_max")
    if cfg["burst_exposure"] and not 1 <= cfg["burst_exposure"] <= cfg["T"]:
        raise UsageError(f"burst_exposure must lie in 1..T={cfg['T']}")
    if cfg["r"] and not 1 <= cfg["r"] <= cfg["T"]:
        raise UsageError(f"r must lie in 1..T={cfg['T']}")


def format_config(cfg: dict) -> str:
    return "".join(f"{key} = {'' if cfg[key] is None else cfg[key]}\n" for key in DEFAULTS)


def sim_config(cfg: dict) -> sp.SimConfig:
    return sp.SimConfig(
        frames=cfg["T"], ratio=cfg["S"], bits=cfg["bits"], task=cfg["task"],
        shot_range=(cfg["shot_min"], cfg["shot_max"]), seed=cfg["seed"],
    )


def net_config(cfg: dict, sr_factor: int = 1, frames: int | None = None) -> tm.TMRNetConfig:
    return tm.TMRNetConfig(
        frames=frames or cfg["T"], channels=cfg["channels"], enc_blocks=cfg["enc_blocks"],
        recon_blocks=cfg["recon_blocks"], common_blocks=cfg["alpha_c"], specific_blocks=cfg["alpha_s"],
        sr_factor=sr_factor,
    )


def train_config(cfg: dict) -> tr.TrainConfig:
    return tr.TrainConfig(
        lr=cfg["lr"], adapt_lr=cfg["adapt_lr"], lr_min=cfg["lr_min"], epochs=cfg["epochs"],
        adapt_epochs=cfg["adapt_epochs"], steps=cfg["steps"] or None, batch=cfg["batch"],
        adapt_batch=cfg["adapt_batch"], patch=cfg["patch"] or None, beta1=cfg["beta1"], beta2=cfg["beta2"],
        weight_decay=cfg["weight_decay"], lambda_self=cfg["lambda_self"], use_ema=cfg["use_ema"],
        max_prefix=cfg["R"], ema_decay=cfg["ema_decay"], gamma=cfg["gamma"], mu=cfg["mu"],
        augment=cfg["augment"], val_every=cfg["val_every"], seed=cfg["seed"],
    )


# ---------------------------------------------------------------- dataset I/O


def _meta_text(ex: sp.BracketExample) -> str:
    lines = {
        "T": len(ex.indices),
        "S": ex.ratio,
        "b": ex.bits,
        "task": ex.task,
        "lambda_shot": repr(float(ex.noise.shot)),
        "lambda_read": repr(float(ex.noise.read)),
        "seed": ex.meta.get("scene_seed", ex.seed),
        "indices": ",".join(str(i) for i in ex.indices),
        "counts": ",".join(str(c) for c in ex.counts),
        "run_seed": ex.seed,
        "index": ex.meta.get("index", 0),
    }
    return "".join(f"{k}={v}\n" for k, v in lines.items())


def _parse_meta(path: Path) -> dict:
    meta = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    for key in ("T", "S", "b", "task", "lambda_shot", "lambda_read", "seed"):
        if key not in meta:
            raise FormatError(f"{path}: missing key {key!r}")
    return meta


def write_example(directory: Path, ex: sp.BracketExample) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(ex.stack, 1):
        write_raw(directory / f"frame_{i}.raw", frame)
    write_raw(directory / "gt.raw", ex.gt)
    (directory / "meta.txt").write_text(_meta_text(ex), encoding="utf-8")


def read_example(directory: Path) -> sp.BracketExample:
    directory = Path(directory)
    meta = _parse_meta(directory / "meta.txt")
    t = int(meta["T"])
    stack = np.stack([read_raw(directory / f"frame_{i}.raw") for i in range(1, t + 1)])
    gt = read_raw(directory / "gt.raw")
    indices = tuple(int(x) for x in meta.get("indices", ",".join(map(str, range(1, t + 1)))).split(","))
    counts = tuple(int(x) for x in meta["counts"].split(",")) if "counts" in meta else ()
    extra = {"name": directory.name, "scene_seed": int(meta["seed"])}
    if len(set(indices)) == 1 and t > 1:
        extra["burst_exposure"] = indices[0]
    return sp.BracketExample(
        stack=stack, gt=gt, indices=indices, ratio=int(meta["S"]), bits=int(meta["b"]),
        noise=sp.NoiseParams(float(meta["lambda_shot"]), float(meta["lambda_read"])),
        counts=counts, task=meta["task"], seed=int(meta.get("run_seed", 0)), meta=extra,
    )


def read_split(root, split: str) -> list:
    base = Path(root) / split
    if not base.is_dir():
        raise UsageError(f"dataset split not found: {base}")
    dirs = sorted(p for p in base.iterdir() if (p / "meta.txt").is_file())
    if not dirs:
        raise UsageError(f"no scenes in {base}")
    return [read_example(d) for d in dirs]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(root: Path, seeds: dict | None = None) -> None:
    """``seed <scene> <value>`` lines, then one ``sha256  relative/path`` line per data file.

    The echoed ``config.txt`` is left out: it records the output path and
    worker count, which do not change the data.
    """
    lines = [f"seed {name} {value}\n" for name, value in sorted((seeds or {}).items())]
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name not in ("manifest.txt", "config.txt"))
    lines += [f"{_sha256(p)}  {p.relative_to(root).as_posix()}\n" for p in files]
    (root / "manifest.txt").write_text("".join(lines), encoding="utf-8")


def _prepare_out(path, force: bool) -> Path:
    if path is None:
        raise UsageError("an output directory is required (--out)")
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _make_one(args):
    index, size, sim, burst = args
    return sp.make_example(index, size, sim, sp.IspParams(), burst)


def generate(indices, size: int, sim: sp.SimConfig, burst, workers: int) -> list:
    """Examples are seeded by index, so worker count never changes the output."""
    jobs = [(k, size, sim, burst) for k in indices]
    if workers <= 1:
        return [_make_one(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_make_one, jobs))


TEST_OFFSET = 100000


# ---------------------------------------------------------------- commands


def cmd_simulate(cfg: dict) -> int:
    out = _prepare_out(cfg["out"], cfg["force"])
    sim = sim_config(cfg)
    burst = None
    if cfg["burst_exposure"]:
        burst = (cfg["burst_exposure"], cfg["burst_count"] or cfg["T"])
    splits = {"train": range(cfg["scenes"]), "test": range(TEST_OFFSET, TEST_OFFSET + cfg["test_scenes"])}
    seeds = {}
    for split, indices in splits.items():
        if not len(indices):
            continue
        for k, ex in zip(indices, generate(indices, cfg["size"], sim, burst, cfg["workers"])):
            name = f"{split}/scene_{k % TEST_OFFSET:04d}"
            write_example(out / name, ex)
            seeds[name] = ex.meta.get("scene_seed", ex.seed)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    write_manifest(out, seeds)
    log.info("wrote %d train and %d test scenes to %s", cfg["scenes"], cfg["test_scenes"], out)
    return EXIT_OK


def _load_model(cfg: dict):
    if not cfg["checkpoint"]:
        raise UsageError("a model checkpoint is required (--checkpoint)")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    state, net = tr.checkpoint_load(path)
    if net is None:
        raise UsageError(f"{path} carries no network description")
    return state.params, net


def cmd_pretrain(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("pretrain needs --data")
    data = read_split(cfg["data"], cfg["split"] or "train")
    val = None
    if cfg["val_every"] and (Path(cfg["data"]) / "test").is_dir():
        val = read_split(cfg["data"], "test")
    tcfg = train_config(cfg)
    net = net_config(cfg, data[0].sr_factor, len(data[0].indices))
    if cfg["resume"]:
        state, saved = tr.checkpoint_load(cfg["resume"])
        if saved is not None and saved != net:
            raise UsageError("resume checkpoint does not match the configured network")
        out = Path(cfg["out"] or ".")
        out.mkdir(parents=True, exist_ok=True)
    else:
        out = _prepare_out(cfg["out"], cfg["force"])
        state = tr.new_state(net, tcfg)
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    with open(out / "train.log", "a", encoding="utf-8") as log_file:
        try:
            state = tr.pretrain(data, tcfg, net, state, val_set=val, log_file=log_file)
        except NumericalError:
            tr.checkpoint_save(out / "last.brkw", state, net)
            raise
    tr.checkpoint_save(out / "last.brkw", state, net)
    if state.best is not None:
        best = tr.TrainState(params=state.best, opt=ad.OptimState(), step=state.step)
        tr.checkpoint_save(out / "best.brkw", best, net)
    log.info("pretraining finished after %d steps; final loss line: %s", state.step, state.log[-1] if state.log else "-")
    return EXIT_OK


def cmd_adapt(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("adapt needs --data")
    params, net = _load_model(cfg)
    data = read_split(cfg["data"], cfg["split"] or "test")
    tcfg = train_config(cfg)
    out = _prepare_out(cfg["out"], cfg["force"])
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    before = tr.mean_self_loss(params, net, data, tcfg)
    with open(out / "adapt.log", "a", encoding="utf-8") as log_file:
        state = tr.adapt(data, params, tcfg, net, log_file=log_file)
    after = tr.mean_self_loss(state.params, net, data, tcfg)
    tr.checkpoint_save(out / "adapted.brkw", state, net)
    (out / "self_loss.txt").write_text(f"before = {before:.6f}\nafter = {after:.6f}\n", encoding="utf-8")
    log.info("mean self loss %.6f -> %.6f", before, after)
    return EXIT_OK


def _predict_fn(params, net, cfg):
    def predict(ex):
        cond = tm.condition_stack(ex.stack[None], ex.indices, ex.ratio, cfg["gamma"])
        pred = tm.predict(cond, params, net, r=cfg["r"] or None)[0]
        if not np.all(np.isfinite(pred)):
            raise NumericalError(f"non-finite prediction for {ex.meta.get('name')}")
        return pred

    return predict


def cmd_infer(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("infer needs --data")
    params, net = _load_model(cfg)
    data = read_split(cfg["data"], cfg["split"] or "test")
    if cfg["scene"]:
        data = [ex for ex in data if ex.meta["name"] == cfg["scene"]]
        if not data:
            raise UsageError(f"scene {cfg['scene']!r} not found")
    out = _prepare_out(cfg["out"], cfg["force"])
    predict = _predict_fn(params, net, cfg)
    isp = sp.IspParams()
    for ex in data:
        pred = predict(ex)
        name = ex.meta["name"]
        write_raw(out / f"{name}.raw", pred)
        ek.write_pnm(out / f"{name}.ppm", ek.postprocess(pred, isp, cfg["mu"]))
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    if not cfg["data"]:
        raise UsageError("eval needs --data")
    data = read_split(cfg["data"], cfg["split"] or "test")
    source = cfg["predictions"]
    if source == "gt":
        predict = lambda ex: ex.gt  # noqa: E731
    elif source:
        pred_dir = Path(source)

        def predict(ex):
            path = pred_dir / f"{ex.meta['name']}.raw"
            if not path.is_file():
                raise UsageError(f"missing prediction {path}")
            return read_raw(path)
    else:
        params, net = _load_model(cfg)
        if net.sr_factor != data[0].sr_factor:
            raise ConfigurationError("checkpoint and dataset disagree on the super-resolution factor")
        predict = _predict_fn(params, net, cfg)
    out = _prepare_out(cfg["out"], cfg["force"])
    echo = {k: cfg[k] for k in ("task", "r", "mu", "checkpoint", "predictions")}
    report = ek.evaluate(predict, data, sp.IspParams(), data[0].task, cfg["mu"], echo)
    report.write(out / "report")
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def burst_compare(cfg: dict) -> list:
    """Train one bracket model and one model per burst exposure on matched scenes.

    All datasets come from the same scene indices, so scene content and noise
    parameters match; only the capture scheme differs. Returns table rows
    ``(label, psnr, ssim)``.
    """
    sim = sim_config(cfg)
    tcfg = train_config(cfg)
    isp = sp.IspParams()
    train_idx = range(cfg["scenes"])
    test_idx = range(TEST_OFFSET, TEST_OFFSET + cfg["test_scenes"])
    count = cfg["burst_count"] or cfg["T"]
    exposures = [int(x) for x in cfg["burst_exposures"].split(",") if x.strip()] or list(range(1, cfg["T"] + 1))
    schemes = [("bracket", None)] + [(f"burst-{i}", (i, count)) for i in exposures]
    rows = []
    for label, burst in schemes:
        train_set = generate(train_idx, cfg["size"], sim, burst, cfg["workers"])
        test_set = generate(test_idx, cfg["size"], sim, burst, cfg["workers"])
        net = net_config(cfg, train_set[0].sr_factor, len(train_set[0].indices))
        state = tr.pretrain(train_set, tcfg, net)
        report = ek.evaluate(_predict_fn(state.params, net, dict(cfg, r=0)), test_set, isp, cfg["task"], cfg["mu"])
        rows.append((label, report.mean_psnr, report.mean_ssim))
        log.info("%s: %.3f dB / %.4f", label, report.mean_psnr, report.mean_ssim)
    return rows


def format_burst_table(rows) -> tuple[str, str]:
    text = [f"{'capture':<10}  {'psnr':>8}  {'ssim':>7}"]
    text += [f"{label:<10}  {p:8.3f}  {s:7.4f}" for label, p, s in rows]
    csv = ["capture,psnr,ssim"] + [f"{label},{p:.6f},{s:.6f}" for label, p, s in rows]
    return "\n".join(text) + "\n", "\n".join(csv) + "\n"


def cmd_burst_compare(cfg: dict) -> int:
    out = _prepare_out(cfg["out"], cfg["force"])
    rows = burst_compare(cfg)
    text, csv = format_burst_table(rows)
    (out / "burst_compare.txt").write_text(text, encoding="utf-8")
    (out / "burst_compare.csv").write_text(csv, encoding="utf-8")
    (out / "config.txt").write_text(format_config(cfg), encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    worst = 0.0
    net = net_config(cfg, 4 if cfg["task"] == "ire+" else 1)
    for seed in range(cfg["seed"], cfg["seed"] + cfg["grad_seeds"]):
        err, checked, skipped = tr.network_grad_check(net, seed, mu=cfg["mu"], gamma=cfg["gamma"], ratio=cfg["S"])
        worst = max(worst, err)
        sys.stdout.write(f"seed {seed}: max relative error {err:.3e} ({checked} coordinates, {skipped} skipped at kinks)\n")
    ok = worst < cfg["grad_tol"]
    sys.stdout.write(f"{'PASS' if ok else 'FAIL'} max relative error {worst:.3e} (tolerance {cfg['grad_tol']:.1e})\n")
    return EXIT_OK if ok else EXIT_NUMERICAL


HANDLERS = {
    "simulate": cmd_simulate,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "burst-compare": cmd_burst_compare,
    "grad-check": cmd_grad_check,
}


# ---------------------------------------------------------------- entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="expobracket", description="Raw HDR reconstruction from bracketed exposures.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value settings file")
    parser.add_argument("-v", "--verbose", action="store_true")
    for key, (parse, default) in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if parse is _bool:
            parser.add_argument(flag, dest=key, nargs="?", const="true", default=None)
        else:
            parser.add_argument(flag, dest=key, default=None)
    return parser


def parse_args(argv) -> tuple[str, dict, bool]:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k in DEFAULTS and v is not None}
    file_values = read_config_file(args.config) if args.config else {}
    return args.command, resolve_config(file_values, flags), args.verbose


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg, verbose = parse_args(argv)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
        log.info("resolved config:\n%s", format_config(cfg))
        return HANDLERS[command](cfg)
    except (UsageError, ConfigurationError, ParameterError, FormatError) as exc:
        sys.stderr.write(f"expobracket: error: {exc}\n")
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        sys.stderr.write(f"expobracket: numerical failure: {exc}\n")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

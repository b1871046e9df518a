"""Supervised pre-training and self-supervised adaptation."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import tmrnet as tm
from .errors import ConfigurationError, NumericalError, ShapeError, UsageError
from .rawimg import DEFAULT_GAMMA, DEFAULT_MU, pack_bayer, tonemap, unpack_bayer
from .simpipe import BracketExample

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adapt_lr: float = 7.5e-5
    lr_min: float = 1e-6
    epochs: int = 400
    adapt_epochs: int = 10
    steps: int | None = None
    batch: int = 8
    adapt_batch: int = 1
    patch: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0
    lambda_self: float = 1.0
    use_ema: bool = True
    max_prefix: int = 3
    ema_decay: float = 0.999
    gamma: float = DEFAULT_GAMMA
    mu: float = DEFAULT_MU
    augment: bool = True
    val_every: int = 0
    seed: int = 0

    def validate(self, frames: int) -> None:
        if not 1 <= self.max_prefix < frames:
            raise ConfigurationError(f"max_prefix must satisfy 1 <= R < T={frames}, got {self.max_prefix}")
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if self.lambda_self < 0:
            raise ConfigurationError("lambda_self must be non-negative")

    def default_patch(self, task: str) -> int:
        """Patch side in packed pixels (128 for plain restoration, 64 with x4 upsampling)."""
        if self.patch:
            return self.patch
        return 64 if task == "ire+" else 128


# ---------------------------------------------------------------- losses


def tonemapped_l1(pred: ad.Tensor, target, mu: float = DEFAULT_MU) -> ad.Tensor:
    """Mean absolute difference after mu-law tone mapping."""
    target = target if isinstance(target, ad.Tensor) else ad.tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    return ad.l1_mean(ad.tonemap(pred, mu), ad.tonemap(target, mu))


def _conditioned(batch: dict, gamma: float) -> np.ndarray:
    return tm.condition_stack(batch["stack"], batch["indices"], batch["ratio"], gamma)


def self_loss(params: dict, net: tm.TMRNetConfig, conditioned, r: int, mu: float = DEFAULT_MU) -> ad.Tensor:
    """Prefix output ``X_r`` pulled towards the detached full-stack output."""
    if not 1 <= r < net.frames:
        raise UsageError(f"self loss needs 1 <= r < T={net.frames}, got r={r}")
    pred_r, pred_t = tm.run(conditioned, params, net, [r, net.frames])
    return tonemapped_l1(pred_r, ad.stop_gradient(pred_t), mu)


def ema_loss(params: dict, ema_params: dict, net: tm.TMRNetConfig, conditioned, mu: float = DEFAULT_MU) -> ad.Tensor:
    """Full-stack output pulled towards the output of the shadow weights."""
    if ema_params is None:
        raise UsageError("ema loss needs shadow parameters")
    with ad.no_grad():
        anchor = tm.forward(conditioned, ema_params, net).data
    return tonemapped_l1(tm.forward(conditioned, params, net), anchor, mu)


def ema_update(ema_params: dict, params: dict, decay: float) -> None:
    """In-place ``ema = decay * ema + (1 - decay) * live``.

    Evaluated as ``ema + (1 - decay) * (live - ema)`` so that equal weights
    stay bit-identical; the two-product form drifts by an ulp in float32,
    which Adam's normalization would amplify into full-size steps.
    """
    for name, shadow in ema_params.items():
        live = params[name].data
        if live.shape != shadow.data.shape:
            raise RuntimeError(f"shadow/live shape mismatch for {name}")
        dt = shadow.data.dtype.type
        if decay == 0:
            shadow.data = live.astype(shadow.data.dtype, copy=True)
        else:
            shadow.data = shadow.data + dt(1 - decay) * (live - shadow.data)


# ---------------------------------------------------------------- data


def _cfa_phase(h: int, w: int) -> np.ndarray:
    phase = np.empty((h, w), dtype=np.int8)
    phase[0::2, 0::2], phase[0::2, 1::2], phase[1::2, 0::2], phase[1::2, 1::2] = 0, 1, 1, 2
    return phase


def _geom(x: np.ndarray, rot: int, hflip: bool, vflip: bool) -> np.ndarray:
    if hflip:
        x = x[..., :, ::-1]
    if vflip:
        x = x[..., ::-1, :]
    return np.rot90(x, rot, axes=(-2, -1))


def _shift(x: np.ndarray, oy: int, ox: int) -> np.ndarray:
    """``out[y, x] = in[y + oy, x + ox]``, reflecting at the far edge."""
    if oy or ox:
        pad = [(0, 0)] * (x.ndim - 2) + [(0, oy), (0, ox)]
        x = np.pad(x, pad, mode="reflect")[..., oy:, ox:]
    return x


def _transform_mosaic(mosaic: np.ndarray, rot, hflip, vflip, scale: int = 1, base=(0, 0)) -> np.ndarray:
    """Apply a flip/rotation to mosaics and restore the RGGB phase.

    The transformed mosaic is shifted by ``scale * base`` pixels plus whatever
    extra 0/1 pixel offset puts a red site at the origin.
    """
    out = _geom(mosaic, rot, hflip, vflip)
    phase = _geom(_cfa_phase(*mosaic.shape[-2:]), rot, hflip, vflip)
    oy, ox = scale * base[0], scale * base[1]
    if phase[oy % 2, ox % 2] != 0:
        ry = [dy for dy in (0, 1) for dx in (0, 1) if phase[(oy + dy) % 2, (ox + dx) % 2] == 0][0]
        rx = [dx for dy in (0, 1) for dx in (0, 1) if phase[(oy + dy) % 2, (ox + dx) % 2] == 0][0]
        oy, ox = oy + ry, ox + rx
    return np.ascontiguousarray(_shift(out, oy, ox))


def _phase_offset(h: int, w: int, rot, hflip, vflip):
    phase = _geom(_cfa_phase(h, w), rot, hflip, vflip)
    for oy in (0, 1):
        for ox in (0, 1):
            if phase[oy, ox] == 0:
                return oy, ox
    raise AssertionError("no red site in a 2x2 cell")


def augment_arrays(stack: np.ndarray, gt: np.ndarray, rot: int, hflip: bool, vflip: bool):
    """Flip/rotate packed ``stack (T,4,h,w)`` and ``gt (4,H,W)`` consistently.

    Transforms act on the unpacked mosaics; a one-pixel shift restores the
    RGGB layout. For super-resolution targets the low-resolution shift is
    scaled by the resolution factor, plus the target's own phase correction.
    """
    mos = unpack_bayer(stack)
    base = _phase_offset(*mos.shape[-2:], rot, hflip, vflip)
    new_stack = pack_bayer(_transform_mosaic(mos, rot, hflip, vflip, 1, base))
    sr = gt.shape[-1] // stack.shape[-1]
    gmos = unpack_bayer(gt)
    new_gt = pack_bayer(_transform_mosaic(gmos, rot, hflip, vflip, sr, base))
    return np.ascontiguousarray(new_stack), np.ascontiguousarray(new_gt)


def draw_augmentation(rng) -> tuple:
    return int(rng.integers(4)), bool(rng.integers(2)), bool(rng.integers(2))


def augment(example: BracketExample, rng) -> BracketExample:
    """Random flip/rotation applied identically to the stack and target."""
    rot, hflip, vflip = draw_augmentation(rng)
    stack, gt = augment_arrays(example.stack, example.gt, rot, hflip, vflip)
    return BracketExample(
        stack=stack, gt=gt, indices=example.indices, ratio=example.ratio, bits=example.bits,
        noise=example.noise, counts=example.counts, task=example.task, seed=example.seed, meta=dict(example.meta),
    )


def _crop(example: BracketExample, patch: int, rng):
    _, _, h, w = example.stack.shape
    sr = example.sr_factor
    p = min(patch, h, w)
    y = int(rng.integers(h - p + 1))
    x = int(rng.integers(w - p + 1))
    stack = example.stack[:, :, y : y + p, x : x + p]
    gt = example.gt[:, y * sr : (y + p) * sr, x * sr : (x + p) * sr]
    return stack, gt


def sample_batch(dataset, size: int, patch: int, rng, augment_data: bool = True) -> dict:
    """Random crops (and flips/rotations) from random examples."""
    picks = rng.integers(len(dataset), size=size)
    stacks, gts = [], []
    for k in picks:
        stack, gt = _crop(dataset[k], patch, rng)
        if augment_data:
            stack, gt = augment_arrays(stack, gt, *draw_augmentation(rng))
        stacks.append(stack)
        gts.append(gt)
    first = dataset[picks[0]]
    return {"stack": np.stack(stacks), "gt": np.stack(gts), "indices": first.indices, "ratio": first.ratio}


def full_batch(examples) -> dict:
    first = examples[0]
    return {
        "stack": np.stack([e.stack for e in examples]),
        "gt": np.stack([e.gt for e in examples]),
        "indices": first.indices,
        "ratio": first.ratio,
    }


def net_config_for(dataset, **overrides) -> tm.TMRNetConfig:
    first = dataset[0]
    return tm.TMRNetConfig(frames=len(first.indices), sr_factor=first.sr_factor, **overrides)


# ---------------------------------------------------------------- state


@dataclass
class TrainState:
    params: dict
    opt: ad.OptimState
    step: int = 0
    ema: dict | None = None
    log: list = field(default_factory=list)
    best: dict | None = None
    best_psnr: float = -math.inf


def new_state(net: tm.TMRNetConfig, cfg: TrainConfig, params: dict | None = None, lr: float | None = None) -> TrainState:
    params = params if params is not None else tm.init_params(net, np.random.default_rng([cfg.seed, 0x5EED]))
    opt = ad.OptimState(lr=cfg.lr if lr is None else lr, beta1=cfg.beta1, beta2=cfg.beta2, weight_decay=cfg.weight_decay)
    return TrainState(params=params, opt=opt)


def _grads_by_name(params: dict, grads: dict) -> dict:
    return {name: grads.get(p) for name, p in params.items()}


def _sync_optimizer(opt: ad.OptimState, cfg: TrainConfig, lr: float) -> None:
    """Hyperparameters always come from the config (checkpoints store them as float32)."""
    opt.lr, opt.beta1, opt.beta2, opt.weight_decay = lr, cfg.beta1, cfg.beta2, cfg.weight_decay


def _step_rng(seed: int, step: int, stream: int = 0):
    return np.random.default_rng([seed, stream, step])


def total_steps(dataset_size: int, cfg: TrainConfig) -> int:
    if cfg.steps:
        return cfg.steps
    return cfg.epochs * max(1, math.ceil(dataset_size / cfg.batch))


def validation_psnr(params: dict, net: tm.TMRNetConfig, dataset, cfg: TrainConfig) -> float:
    """Mean tone-mapped raw-domain PSNR of full-stack predictions."""
    scores = []
    for ex in dataset:
        batch = full_batch([ex])
        pred = tm.predict(_conditioned(batch, cfg.gamma), params, net)[0]
        mse = np.mean((tonemap(pred, cfg.mu) - tonemap(ex.gt, cfg.mu)) ** 2)
        scores.append(99.0 if mse == 0 else min(99.0, -10 * np.log10(mse)))
    return float(np.mean(scores))


def pretrain(
    dataset,
    cfg: TrainConfig,
    net: tm.TMRNetConfig | None = None,
    state: TrainState | None = None,
    stop: int | None = None,
    val_set=None,
    log_file=None,
) -> TrainState:
    """Minimize the tone-mapped L1 between full-stack output and target.

    Runs from ``state.step`` (0 for a fresh state) up to ``stop`` (default:
    the configured horizon). The cosine schedule always spans the full
    horizon, so a run split by checkpoints matches an uninterrupted one.
    """
    net = net or net_config_for(dataset)
    state = state or new_state(net, cfg)
    _sync_optimizer(state.opt, cfg, cfg.lr)
    t_max = total_steps(len(dataset), cfg)
    stop = t_max if stop is None else min(stop, t_max)
    patch = cfg.default_patch(dataset[0].task)
    while state.step < stop:
        step = state.step
        rng = _step_rng(cfg.seed, step)
        batch = sample_batch(dataset, cfg.batch, patch, rng, cfg.augment)
        ad.reset_tape()
        pred = tm.forward(_conditioned(batch, cfg.gamma), state.params, net)
        loss = tonemapped_l1(pred, batch["gt"], cfg.mu)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss at step {step}")
        grads = ad.backward(loss)
        lr = ad.cosine_lr(step, t_max, cfg.lr, cfg.lr_min)
        ad.optim_step(state.params, _grads_by_name(state.params, grads), state.opt, lr)
        state.step += 1
        line = f"{step} {lr:.6e} {value:.6f}"
        if val_set is not None and cfg.val_every and (state.step % cfg.val_every == 0 or state.step == t_max):
            score = validation_psnr(state.params, net, val_set, cfg)
            line += f" {score:.3f}"
            if score > state.best_psnr:
                state.best_psnr = score
                state.best = tm.clone_params(state.params, requires_grad=False)
        state.log.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
    return state


# ---------------------------------------------------------------- adaptation


def start_adaptation(params: dict, net: tm.TMRNetConfig, cfg: TrainConfig) -> TrainState:
    """Live weights copied from ``params``; shadow weights start equal to them."""
    live = tm.clone_params(params, requires_grad=True)
    state = new_state(net, cfg, params=live, lr=cfg.adapt_lr)
    state.ema = tm.clone_params(params, requires_grad=False)
    return state


def adaptation_loss(state: TrainState, net: tm.TMRNetConfig, conditioned, r: int, cfg: TrainConfig):
    """``L_ema + lambda_self * L_self`` with both terms returned for logging."""
    preds = tm.run(conditioned, state.params, net, [r, net.frames])
    pred_r, pred_t = preds
    with ad.no_grad():
        anchor = tm.forward(conditioned, state.ema, net).data
    l_ema = tonemapped_l1(pred_t, anchor, cfg.mu)
    l_self = tonemapped_l1(pred_r, ad.stop_gradient(pred_t), cfg.mu)
    total = l_ema if cfg.lambda_self == 0 else ad.add(l_ema, ad.scale(l_self, cfg.lambda_self))
    return total, l_ema, l_self


def adapt(
    dataset,
    params: dict,
    cfg: TrainConfig,
    net: tm.TMRNetConfig | None = None,
    state: TrainState | None = None,
    stop: int | None = None,
    log_file=None,
) -> TrainState:
    """Self-supervised fine-tuning on unlabeled stacks.

    One epoch is one pass over ``dataset`` in a seeded random order. Each
    iteration draws one prefix length ``r`` from ``1..R`` for the whole batch.
    The live weights ``state.params`` are the adapted model; ``state.ema``
    holds the shadow copy.
    """
    net = net or net_config_for(dataset)
    cfg.validate(net.frames)
    if cfg.lambda_self > 0 and not cfg.use_ema:
        raise UsageError("self loss without the EMA regularizer collapses; refusing to run")
    state = state or start_adaptation(params, net, cfg)
    _sync_optimizer(state.opt, cfg, cfg.adapt_lr)
    per_epoch = max(1, math.ceil(len(dataset) / cfg.adapt_batch))
    t_max = cfg.steps or cfg.adapt_epochs * per_epoch
    stop = t_max if stop is None else min(stop, t_max)
    while state.step < stop:
        step = state.step
        epoch, pos = divmod(step, per_epoch)
        order = np.random.default_rng([cfg.seed, 1, epoch]).permutation(len(dataset))
        picks = order[pos * cfg.adapt_batch : (pos + 1) * cfg.adapt_batch]
        batch = full_batch([dataset[k] for k in picks])
        r = int(_step_rng(cfg.seed, step, 2).integers(1, cfg.max_prefix + 1))
        ad.reset_tape()
        total, l_ema, l_self = adaptation_loss(state, net, _conditioned(batch, cfg.gamma), r, cfg)
        value = total.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite adaptation loss at step {step}")
        grads = ad.backward(total)
        lr = ad.cosine_lr(step, t_max, cfg.adapt_lr, cfg.lr_min)
        ad.optim_step(state.params, _grads_by_name(state.params, grads), state.opt, lr)
        ema_update(state.ema, state.params, cfg.ema_decay)
        state.step += 1
        line = f"{step} {lr:.6e} {value:.6f}"
        state.log.append(line)
        if log_file is not None:
            log_file.write(line + "\n")
    return state


def mean_self_loss(params: dict, net: tm.TMRNetConfig, dataset, cfg: TrainConfig, prefixes=None) -> float:
    """Average self loss over examples and prefix lengths ``1..R``."""
    prefixes = prefixes or range(1, cfg.max_prefix + 1)
    vals = []
    with ad.no_grad():
        for ex in dataset:
            cond = _conditioned(full_batch([ex]), cfg.gamma)
            preds = tm.run(cond, params, net, list(prefixes) + [net.frames])
            full = preds[-1].data
            vals += [tonemapped_l1(p, full, cfg.mu).item() for p in preds[:-1]]
    return float(np.mean(vals))


# ---------------------------------------------------------------- verification


def network_grad_check(net: tm.TMRNetConfig, seed: int, size: int = 8, per_tensor: int = 1, mu: float = DEFAULT_MU, gamma: float = DEFAULT_GAMMA, ratio: int = 4):
    """Finite-difference check of the full training loss in 64-bit mode.

    Builds a random ``size x size`` stack and target, gives the zero-initialized
    output layer random weights so every parameter receives gradient, and
    probes ``per_tensor`` random coordinates of every parameter tensor. Flows
    are frozen from the unperturbed run because shift estimation is piecewise
    constant. Returns ``(max_error, checked, skipped)``.
    """
    rng = np.random.default_rng([seed, 77])
    with ad.precision(np.float64):
        params = tm.init_params(net, rng)
        out_w = params["rec.out.w"]
        out_w.data = rng.normal(0, 0.05, out_w.shape)
        stack = rng.uniform(0, 1, (1, net.frames, 4, size, size))
        cond = tm.condition_stack(stack, tuple(range(1, net.frames + 1)), ratio, gamma)
        target = rng.uniform(0, 1, (1, 4, size * net.sr_factor, size * net.sr_factor))
        with ad.no_grad():
            _, info = tm.run(cond, params, net, [net.frames], return_info=True)
        flows = info["flows"]
        names = sorted(params)

        def loss(*values):
            return tonemapped_l1(tm.forward(cond, dict(zip(names, values)), net, flows=flows), target, mu)

        return ad.grad_check(loss, [params[n] for n in names], coords=per_tensor, rng=rng, details=True)


# ---------------------------------------------------------------- checkpoints


def checkpoint_save(path, state: TrainState, net: tm.TMRNetConfig | None = None) -> None:
    """Parameters under canonical names, plus optimizer moments and shadow weights."""
    tensors = {name: p.data for name, p in state.params.items()}
    for name, m in state.opt.m.items():
        tensors[f"opt.m:{name}"] = m
        tensors[f"opt.v:{name}"] = state.opt.v[name]
    if state.ema is not None:
        for name, p in state.ema.items():
            tensors[f"ema:{name}"] = p.data
    o = state.opt
    tensors["meta:step"] = np.array([state.step, o.step], dtype=np.float32)
    tensors["meta:adam"] = np.array([o.lr, o.beta1, o.beta2, o.weight_decay, o.eps], dtype=np.float64)
    if net is not None:
        tensors["meta:net"] = np.array(
            [net.frames, net.channels, net.enc_blocks, net.recon_blocks, net.common_blocks, net.specific_blocks, net.sr_factor],
            dtype=np.float32,
        )
    ad.save_tensors(path, tensors)


def checkpoint_load(path) -> tuple[TrainState, tm.TMRNetConfig | None]:
    raw = ad.load_tensors(path)
    params, m, v, ema = {}, {}, {}, {}
    for name, arr in raw.items():
        if name.startswith("opt.m:"):
            m[name[6:]] = arr
        elif name.startswith("opt.v:"):
            v[name[6:]] = arr
        elif name.startswith("ema:"):
            ema[name[4:]] = ad.tensor(arr, requires_grad=False, name=name[4:])
        elif not name.startswith("meta:"):
            params[name] = ad.tensor(arr, requires_grad=True, name=name)
    step, opt_step = (int(x) for x in raw.get("meta:step", np.zeros(2)))
    hyper = raw.get("meta:adam")
    opt = ad.OptimState(m=m, v=v, step=opt_step)
    if hyper is not None:
        opt.lr, opt.beta1, opt.beta2, opt.weight_decay, opt.eps = (float(x) for x in hyper)
    net = None
    if "meta:net" in raw:
        f, c, e, rb, cb, sb, sr = (int(x) for x in raw["meta:net"])
        net = tm.TMRNetConfig(frames=f, channels=c, enc_blocks=e, recon_blocks=rb, common_blocks=cb, specific_blocks=sb, sr_factor=sr)
    state = TrainState(params=params, opt=opt, step=step, ema=ema or None)
    return state, net


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)

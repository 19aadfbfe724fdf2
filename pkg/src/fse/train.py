"""Training and evaluation of the full three-stage pipeline.

Randomness is counter-based: the batch order, augmentation and mask
dropout at step ``t`` are pure functions of ``(seed, t)``. Resuming from a
checkpoint therefore needs only the step counter, parameters and optimizer
moments to continue bit-for-bit.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import CheckpointBundle, save_checkpoint
from .errors import ConfigError, NonFiniteLossError, NumericError, StateError
from .imaging import AugmentSpec, SamplePair, augment, initial_mask, resize, zero_mask_like
from .metrics import LossWeights, MetricReport, composite_loss, is_proxy, load_backend, mse, perceptual_distance, psnr, ssim
from .models import STAGES, FaceShadowEraser, FseConfig, normalize_stages

log = logging.getLogger(__name__)

LOG_HEADER = "step,lr,total,mse,ssim_term,perc_term"


@dataclass
class TrainConfig:
    total_steps: int
    batch_size: int = 8
    lr_init: float = 2e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    warm_steps: int = 0
    crop_size: int = 256
    enable_hflip: bool = True
    rotation_choices: tuple[int, ...] = (0, 90, 180, 270)
    seed: int = 0
    tau: float = 0.05
    init_mask_dropout: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    stages: tuple[str, ...] = STAGES
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        self.rotation_choices = tuple(self.rotation_choices)
        self.stages = tuple(s for s in STAGES if s in normalize_stages(self.stages))
        if self.lr_init <= 0:
            raise ConfigError(f"lr_init must be > 0, got {self.lr_init}")
        if self.total_steps < 0:
            raise ConfigError(f"total_steps must be >= 0, got {self.total_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.init_mask_dropout <= 1.0:
            raise ConfigError("init_mask_dropout must be a probability")
        if self.warm_steps < 0:
            raise ConfigError("warm_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rotation_choices"] = list(self.rotation_choices)
        d["stages"] = list(self.stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# schedule and optimizer
# ---------------------------------------------------------------------------


def cosine_lr(step: int, total: int, lr_init: float, lr_min: float = 0.0) -> float:
    if total <= 0 or step >= total:
        return lr_min if total > 0 else lr_init
    step = max(step, 0)
    return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + math.cos(math.pi * step / total))


def scheduled_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up over ``warm_steps`` followed by cosine annealing over the rest."""
    if step < cfg.warm_steps:
        return cfg.lr_init * (step + 1) / cfg.warm_steps
    return cosine_lr(step - cfg.warm_steps, cfg.total_steps - cfg.warm_steps, cfg.lr_init, cfg.lr_min)


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_named(self) -> dict[str, torch.Tensor]:
        out = {f"exp_avg.{k}": v for k, v in self.exp_avg.items()}
        out.update({f"exp_avg_sq.{k}": v for k, v in self.exp_avg_sq.items()})
        return out

    @classmethod
    def from_named(cls, named: dict[str, torch.Tensor], step: int) -> "AdamWState":
        state = cls(step=step)
        for k, v in named.items():
            group, _, name = k.partition(".")
            if group == "exp_avg":
                state.exp_avg[name] = v.clone()
            elif group == "exp_avg_sq":
                state.exp_avg_sq[name] = v.clone()
            else:
                raise StateError(f"unexpected optimizer tensor {k!r}")
        return state


@torch.no_grad()
def adamw_step(params, grads, state: AdamWState, lr, beta1=0.9, beta2=0.999, weight_decay=0.0, eps=1e-8):
    """One AdamW update, in place on ``params``: decoupled decay, then the bias-corrected Adam step."""
    if set(params) != set(grads):
        missing = sorted(set(params) ^ set(grads))
        raise StateError(f"params and grads are not name-aligned: {missing[:5]}")
    if state.exp_avg and set(state.exp_avg) != set(params):
        raise StateError("optimizer state does not match parameter names")
    state.step += 1
    bc1 = 1.0 - beta1**state.step
    bc2 = 1.0 - beta2**state.step
    for name in sorted(params):
        p, g = params[name], grads[name]
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        p.mul_(1.0 - lr * weight_decay)
        m.lerp_(g, 1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params, state


# ---------------------------------------------------------------------------
# data order
# ---------------------------------------------------------------------------


def _subseed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Indices for ``step``: consecutive slices through one seeded permutation per epoch."""
    out, cache = [], {}
    for j in range(batch_size):
        pos = step * batch_size + j
        epoch = pos // n
        if epoch not in cache:
            cache[epoch] = np.random.default_rng(_subseed(seed, 0xE90C, epoch)).permutation(n)
        out.append(int(cache[epoch][pos % n]))
    return out


def make_batch(dataset: Sequence[SamplePair], cfg: TrainConfig, step: int):
    shadows, targets, masks = [], [], []
    for j, idx in enumerate(batch_indices(cfg.seed, step, cfg.batch_size, len(dataset))):
        aug_seed = _subseed(cfg.seed, step, j)
        spec = AugmentSpec(cfg.crop_size, cfg.enable_hflip, cfg.rotation_choices, aug_seed)
        pair = augment(dataset[idx], spec)
        m = initial_mask(pair.shadow, pair.target, cfg.tau)
        if cfg.init_mask_dropout > 0:
            if np.random.default_rng(_subseed(cfg.seed, step, j, 1)).random() < cfg.init_mask_dropout:
                m = torch.zeros_like(m)
        shadows.append(pair.shadow)
        targets.append(pair.target)
        masks.append(m)
    return torch.cat(shadows), torch.cat(targets), torch.cat(masks)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _rng_state(cfg: TrainConfig, step: int) -> bytes:
    return json.dumps({"scheme": "counter", "seed": cfg.seed, "step": step}).encode()


def make_bundle(net: FaceShadowEraser, opt: AdamWState, fse_config: FseConfig, cfg: TrainConfig, step: int):
    return CheckpointBundle(
        params=net.named_tensors(),
        optimizer_state={k: v.clone() for k, v in opt.to_named().items()},
        config={"fse": fse_config.to_dict(), "train": cfg.to_dict()},
        step=step,
        rng_state=_rng_state(cfg, step),
    )


def _check_finite(step: int, total: torch.Tensor, terms: dict) -> None:
    for name, value in [("total", total), *terms.items()]:
        v = float(value.detach())
        if not math.isfinite(v):
            raise NonFiniteLossError(step, name, v)


def train(
    dataset: Sequence[SamplePair],
    fse_config: FseConfig,
    train_config: TrainConfig,
    resume: Optional[CheckpointBundle] = None,
    backend=None,
    out_dir=None,
    log_path=None,
    progress_every: int = 0,
):
    """Run the optimization loop; returns ``(checkpoint_bundle, history)``.

    ``history`` holds one dict per step with the keys of ``LOG_HEADER``. When
    ``log_path`` is given each step is also appended there as a CSV line;
    when ``out_dir`` is given checkpoints are written every
    ``checkpoint_every`` steps and at the end.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    cfg = train_config
    stages = normalize_stages(cfg.stages)
    torch.manual_seed(cfg.seed)

    net = FaceShadowEraser(fse_config)
    net.reset_parameters(cfg.seed)
    opt = AdamWState()
    start = 0
    if resume is not None:
        if resume.config.get("fse") != fse_config.to_dict():
            raise ConfigError("resume checkpoint was trained with a different model config")
        net.load_named(resume.params)
        opt = AdamWState.from_named(resume.optimizer_state, resume.step)
        start = resume.step
    if start > cfg.total_steps:
        raise ConfigError(f"checkpoint step {start} is beyond total_steps {cfg.total_steps}")

    if backend is None and cfg.loss_weights.lambda2 > 0:
        backend = load_backend("fallback")
    trainable = {k: p for k, p in net.named_parameters() if k.split(".", 1)[0] in stages}
    for k, p in net.named_parameters():
        p.requires_grad_(k in trainable)

    log_fh = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not log_path.exists() or log_path.stat().st_size == 0
        log_fh = open(log_path, "a", encoding="utf-8")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")

    history = []
    lw = cfg.loss_weights
    try:
        for step in range(start, cfg.total_steps):
            shadow, target, init_m = make_batch(dataset, cfg, step)
            try:
                out, refined, _ = net(shadow, init_m, stages)
            except NumericError as exc:
                raise NumericError(f"step {step + 1}: {exc}") from exc
            total, terms = composite_loss(out, target, lw, backend)
            if lw.aux_mask_weight > 0 and "mask" in stages:
                aux = torch.nn.functional.binary_cross_entropy(refined, init_m)
                terms["aux_mask"] = aux
                total = total + lw.aux_mask_weight * aux
            _check_finite(step + 1, total, terms)

            net.zero_grad(set_to_none=True)
            total.backward()
            grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in trainable.items()}
            lr = scheduled_lr(step, cfg)
            adamw_step(trainable, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.eps)

            rec = {
                "step": step + 1,
                "lr": lr,
                "total": float(total.detach()),
                "mse": float(terms["mse"].detach()),
                "ssim_term": float(terms["ssim_term"].detach()),
                "perc_term": float(terms["perc_term"].detach()),
            }
            history.append(rec)
            if log_fh is not None:
                log_fh.write(",".join(repr(rec[k]) for k in LOG_HEADER.split(",")) + "\n")
                log_fh.flush()
            if progress_every and (step + 1) % progress_every == 0:
                log.info("step %d lr %.3g loss %.5f", step + 1, lr, rec["total"])
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(make_bundle(net, opt, fse_config, cfg, step + 1), Path(out_dir) / f"step_{step + 1:07d}.fse")
    finally:
        if log_fh is not None:
            log_fh.close()

    bundle = make_bundle(net, opt, fse_config, cfg, max(start, cfg.total_steps))
    if out_dir is not None:
        save_checkpoint(bundle, Path(out_dir) / "last.fse")
    return bundle, history


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def model_from_checkpoint(bundle: CheckpointBundle) -> tuple[FaceShadowEraser, frozenset]:
    fse_config = FseConfig.from_dict(bundle.config.get("fse", {}))
    net = FaceShadowEraser(fse_config)
    net.load_named(bundle.params)
    net.eval()
    stages = normalize_stages(bundle.config.get("train", {}).get("stages", STAGES))
    return net, stages


@torch.no_grad()
def restore(net: FaceShadowEraser, stages, shadow: torch.Tensor, init_mask: torch.Tensor | None = None):
    """Inference: ``(R clamped to [0, 1], M')`` for one image batch; zero initial mask by default."""
    if init_mask is None:
        init_mask = zero_mask_like(shadow)
    out, refined, _ = net(shadow, init_mask, stages)
    return out.clamp(0.0, 1.0), refined


def evaluate(
    checkpoint: CheckpointBundle,
    dataset: Sequence[SamplePair],
    resolution: int | None = None,
    backend=None,
    dataset_name: str = "",
    return_outputs: bool = False,
):
    """Average PSNR / SSIM / MSE / perceptual distance over ``dataset`` in order."""
    if not dataset:
        raise ConfigError("evaluation dataset is empty")
    if backend is None:
        backend = load_backend("fallback")
    net, stages = model_from_checkpoint(checkpoint)
    sums = {"psnr": 0.0, "ssim": 0.0, "mse": 0.0, "lpips": 0.0}
    outputs = []
    with torch.no_grad():
        for pair in dataset:
            shadow, target = pair.shadow, pair.target
            if resolution is not None:
                shadow, target = resize(shadow, resolution), resize(target, resolution)
            pred, _ = restore(net, stages, shadow)
            sums["psnr"] += psnr(pred, target)
            sums["ssim"] += float(ssim(pred.double(), target.double()))
            sums["mse"] += float(mse(pred.double(), target.double()))
            sums["lpips"] += float(perceptual_distance(pred, target, backend))
            if return_outputs:
                outputs.append(pred)
    n = len(dataset)
    report = MetricReport(
        psnr=sums["psnr"] / n,
        ssim=sums["ssim"] / n,
        mse=sums["mse"] / n,
        lpips=sums["lpips"] / n,
        n_samples=n,
        lpips_proxy=is_proxy(backend),
        dataset=dataset_name,
    )
    return (report, outputs) if return_outputs else report

"""Two-stage learning procedure: proxy-guided pretraining, then
reconstruction-guided fine-tuning.

Stage 1 minimizes the multi-scale endpoint error against classical proxy
flow; the learning rate starts at ``base_lr`` and halves every
``schedule_period`` iterations once ``schedule_start`` is reached. Stage 2
continues from a stage-1 checkpoint at a fixed learning rate, adding the
weighted reconstruction terms. Training reads only images and proxy flow;
true ground truth is touched exclusively by :func:`evaluate`.

Config files are flat ``key = value`` text with ``#`` comments; see
``TrainConfig.to_text``. Paper-scale constants (600k iterations, halving
after 300k, fine-tune at 1e-6 for 10k) and the desk-scale profile
(everything divided by 100) are available as named constructors.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .dataset import DatasetManifest, augment, iterate_batches, load_sample
from .flow_io import FlowField, load_flo
from .losses import LossWeights, epe_metric, multiscale_loss
from .model import ModelConfig, ModelParams, forward, init_model, predict_full, save_checkpoint

STAGES = ("guided", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "guided"
    base_lr: float = 1e-4
    max_iters: int = 6000
    schedule_start: int = 3000
    schedule_period: int = 1000
    batch_size: int = 8
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0          # 0 disables periodic evaluation
    checkpoint_every: int = 0    # 0 keeps only the final checkpoint
    joint: bool = False          # ablation: both losses from scratch in stage 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.max_iters <= 0:
            raise ValueError(f"max_iters must be positive, got {self.max_iters}")
        if self.base_lr < 0:
            raise ValueError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule_start < 0 or self.schedule_period <= 0:
            raise ValueError("schedule_start must be >= 0 and schedule_period positive")

    @classmethod
    def paper_guided(cls, **overrides) -> "TrainConfig":
        base = dict(stage="guided", base_lr=1e-4, max_iters=600_000,
                    schedule_start=300_000, schedule_period=100_000, batch_size=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper_finetune(cls, **overrides) -> "TrainConfig":
        base = dict(stage="finetune", base_lr=1e-6, max_iters=10_000, batch_size=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_guided(cls, **overrides) -> "TrainConfig":
        """Paper schedule divided by 100: 6k iterations, halving after 3k."""
        base = dict(stage="guided", base_lr=1e-4, max_iters=6000,
                    schedule_start=3000, schedule_period=1000, batch_size=8)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk_finetune(cls, **overrides) -> "TrainConfig":
        base = dict(stage="finetune", base_lr=1e-6, max_iters=1000, batch_size=8)
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        w = self.loss_weights
        lines = [
            "# gofl training configuration",
            f"stage = {self.stage}",
            f"base_lr = {self.base_lr!r}",
            f"max_iters = {self.max_iters}",
            f"schedule_start = {self.schedule_start}",
            f"schedule_period = {self.schedule_period}",
            f"batch_size = {self.batch_size}",
            f"seed = {self.seed}",
            f"eval_every = {self.eval_every}",
            f"checkpoint_every = {self.checkpoint_every}",
            f"joint = {str(self.joint).lower()}",
            f"scale_weights = {', '.join(repr(x) for x in w.scale_weights)}",
            f"lambda = {w.lam!r}",
            f"alpha = {w.alpha!r}",
            f"epsilon = {w.epsilon!r}",
        ]
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = val

    def take(key, conv, default):
        return conv(values.pop(key)) if key in values else default

    def as_bool(s):
        if s.lower() in ("true", "1", "yes"):
            return True
        if s.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {s!r}")

    weights = LossWeights(
        scale_weights=take("scale_weights",
                           lambda s: tuple(float(x) for x in s.split(",")),
                           LossWeights().scale_weights),
        lam=take("lambda", float, LossWeights().lam),
        alpha=take("alpha", float, LossWeights().alpha),
        epsilon=take("epsilon", float, LossWeights().epsilon),
    )
    cfg = TrainConfig(
        stage=take("stage", str, "guided"),
        base_lr=take("base_lr", float, 1e-4),
        max_iters=take("max_iters", int, 6000),
        schedule_start=take("schedule_start", int, 3000),
        schedule_period=take("schedule_period", int, 1000),
        batch_size=take("batch_size", int, 8),
        seed=take("seed", int, 0),
        eval_every=take("eval_every", int, 0),
        checkpoint_every=take("checkpoint_every", int, 0),
        joint=take("joint", as_bool, False),
        loss_weights=weights,
    )
    if values:
        raise ValueError(f"unknown config keys: {', '.join(sorted(values))}")
    return cfg


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Guided stage: base_lr until schedule_start, then halved once per
    period (the first halving happens at schedule_start itself). The
    fine-tune stage runs at constant base_lr."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    if cfg.stage != "guided" or iteration < cfg.schedule_start:
        return cfg.base_lr
    halvings = (iteration - cfg.schedule_start) // cfg.schedule_period + 1
    return cfg.base_lr * 0.5 ** halvings


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    eval_history: list = field(default_factory=list)   # (iteration, mean test EPE)
    wall_clock_s: float = 0.0
    final_checkpoint: str | None = None

    def write_log(self, path) -> None:
        lines = [f"{i}\t{loss:.8e}" for i, loss in enumerate(self.losses)]
        lines += [f"# eval\t{it}\t{epe:.8e}" for it, epe in self.eval_history]
        lines.append(f"# wall_clock_s\t{self.wall_clock_s:.3f}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_summary(self, path) -> None:
        """Machine-readable metric rows; deliberately excludes wall clock so
        reruns with identical seeds produce identical bytes."""
        rows = [
            ("iterations", f"{len(self.losses)}"),
            ("first_loss", f"{self.losses[0]:.8e}" if self.losses else "nan"),
            ("final_loss", f"{self.losses[-1]:.8e}" if self.losses else "nan"),
        ]
        if self.eval_history:
            rows.append(("final_eval_epe", f"{self.eval_history[-1][1]:.8e}"))
        Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in rows), encoding="utf-8")


def _check_proxies(manifest: DatasetManifest) -> None:
    for e in manifest.subset("train"):
        if e.proxy is None:
            raise ValueError(f"training entry {e.pair_id} has no proxy flow")
        if not manifest.resolve(e.proxy).is_file():
            raise FileNotFoundError(f"training entry {e.pair_id}: missing proxy {e.proxy}")


def _batch_tensors(samples):
    i1 = np.stack([s.i1.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    i2 = np.stack([s.i2.pixels.transpose(2, 0, 1) for s in samples]).astype(np.float32)
    proxy = np.stack([np.stack([s.proxy_flow.u, s.proxy_flow.v]) for s in samples])
    return Tensor(i1), Tensor(i2), Tensor(proxy.astype(np.float32))


def _train_loop(params: ModelParams, manifest: DatasetManifest, cfg: TrainConfig,
                mode: str, out_dir=None) -> tuple[ModelParams, TrainReport]:
    _check_proxies(manifest)
    started = time.perf_counter()
    report = TrainReport()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    trainable = params.parameters()
    states = [AdamState.for_param(p) for p in trainable]
    n_train = len(manifest.subset("train"))
    batches_per_epoch = max(1, -(-n_train // cfg.batch_size))
    cache: dict = {}
    batch_iter = None
    epoch = -1

    for it in range(cfg.max_iters):
        if it // batches_per_epoch != epoch:
            epoch = it // batches_per_epoch
            batch_iter = iterate_batches(manifest, "train", cfg.batch_size,
                                         cfg.seed, epoch=epoch, cache=cache)
        samples = next(batch_iter)
        samples = [augment(s, [cfg.seed, it, j]) for j, s in enumerate(samples)]
        i1, i2, proxy = _batch_tensors(samples)

        preds = forward(params, i1, i2)
        loss = multiscale_loss(preds, proxy, i1, i2, cfg.loss_weights, mode)
        ad.zero_grads(trainable)
        ad.backward(loss)
        ad.adam_step(trainable, states, lr_schedule(it, cfg))
        report.losses.append(loss.item())

        step = it + 1
        if cfg.eval_every and step % cfg.eval_every == 0:
            result = evaluate(params, manifest, "test")
            report.eval_history.append((step, result.mean_epe))
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(params, states, out_dir / f"ckpt_{step:07d}.gofl")

    if out_dir is not None:
        final = out_dir / "ckpt_final.gofl"
        save_checkpoint(params, states, final)
        report.final_checkpoint = str(final)
    report.wall_clock_s = time.perf_counter() - started
    return params, report


def train_guided(model_cfg: ModelConfig, manifest: DatasetManifest, cfg: TrainConfig,
                 out_dir=None, init_params: ModelParams | None = None):
    """Stage 1: minimize the multi-scale EPE against proxy flow only.

    Ground-truth files are never opened (evaluation excepted, and only when
    ``eval_every`` is set). ``init_params`` resumes from existing weights,
    which is also how the lambda = 0 degeneracy of fine-tuning is exercised."""
    if cfg.stage != "guided":
        raise ValueError(f"train_guided needs a guided-stage config, got {cfg.stage!r}")
    params = init_params if init_params is not None else init_model(model_cfg, cfg.seed)
    mode = "finetune" if cfg.joint else "guided"   # 'joint' ablation: both losses from scratch
    return _train_loop(params, manifest, cfg, mode, out_dir)


def finetune(params: ModelParams, manifest: DatasetManifest, cfg: TrainConfig, out_dir=None):
    """Stage 2: continue from stage-1 weights at a fixed learning rate with
    the reconstruction terms added (ten loss terms per batch)."""
    if cfg.stage != "finetune":
        raise ValueError(f"finetune needs a finetune-stage config, got {cfg.stage!r}")
    return _train_loop(params, manifest, cfg, "finetune", out_dir)


@dataclass
class EvalReport:
    per_pair: list                 # (pair_id, epe, zero_flow_epe)
    mean_epe: float
    zero_flow_epe: float

    def write_summary(self, path) -> None:
        rows = [("mean_epe", f"{self.mean_epe:.8e}"),
                ("zero_flow_epe", f"{self.zero_flow_epe:.8e}"),
                ("pairs", f"{len(self.per_pair)}")]
        rows += [(f"epe.{pid}", f"{epe:.8e}") for pid, epe, _ in self.per_pair]
        Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in rows), encoding="utf-8")


def evaluate(params: ModelParams, manifest: DatasetManifest, split: str,
             predict_fn=None) -> EvalReport:
    """Mean endpoint error of full-resolution predictions against true
    ground truth over a split, with the zero-flow baseline for context.
    ``predict_fn(i1, i2) -> FlowField`` overrides the model (test stubs)."""
    entries = manifest.subset(split)
    if not entries:
        raise ValueError(f"manifest has no {split!r} entries")
    if predict_fn is None:
        predict_fn = lambda i1, i2: predict_full(params, i1, i2)

    per_pair = []
    for e in entries:
        if e.gt is None:
            raise ValueError(f"entry {e.pair_id} has no ground-truth flow to evaluate against")
        gt_path = manifest.resolve(e.gt)
        if not gt_path.is_file():
            raise FileNotFoundError(f"entry {e.pair_id}: missing ground truth {e.gt}")
        sample = load_sample(manifest, e, with_gt=False, with_proxy=False)
        gt = load_flo(gt_path)
        pred = predict_fn(sample.i1, sample.i2)
        zero = FlowField(np.zeros_like(gt.u), np.zeros_like(gt.v), gt.valid_mask)
        per_pair.append((e.pair_id, epe_metric(pred, gt), epe_metric(zero, gt)))

    mean_epe = float(np.mean([p[1] for p in per_pair]))
    zero_epe = float(np.mean([p[2] for p in per_pair]))
    return EvalReport(per_pair=per_pair, mean_epe=mean_epe, zero_flow_epe=zero_epe)

"""Training loop, Adam optimizer, checkpointing and evaluation metrics.

Training follows the standard noise-prediction recipe: per batch item,
draw a uniform step and Gaussian noise, corrupt the target with the
closed-form forward process, run the reference branch on the prepared
(optionally blurred) reference, predict the noise, and descend the
transition-weighted squared error.  References are blurred once at data
preparation time, not per step, and the detected transition regions
drive both that blur and the loss weight map.

Evaluation samples each item back from noise and reports the mean
squared error against the ground truth in the normalized log-mel
domain, split into transition-region and non-region entries using the
oracle regions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import denoiser as dn
from .diffusion import ConditionBundle, NoiseSchedule, make_schedule, q_sample, sample, weighted_eps_loss
from .dsp import MelSpectrogram, log_compress
from .synthgen import SynthDataset, SynthSample, denormalize_log_mel, normalize_log_mel
from .transition import (
    TransitionConfig,
    TransitionRegionSet,
    WeightMap,
    analyze,
    blur_kernel,
    blur_regions,
    weight_map,
)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    total_steps: int = 2000
    lambda_in: float = 2.0
    blur: bool = True
    weighting: bool = True
    reference: bool = True
    freeze_reference: bool = False
    seed: int = 0
    schedule_T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.06
    eval_every: int = 0  # 0 disables mid-training evaluation
    eval_steps: int = 100
    hidden: int = 64
    depth: int = 4
    step_dim: int = 32
    kernel: int = 3
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("learning rate, batch size and step count must be positive")
        if self.lambda_in < 1.0:
            raise ValueError("lambda_in must be >= 1")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        known = set(TrainConfig.__dataclass_fields__)
        return TrainConfig(**{k: v for k, v in obj.items() if k in known})


@dataclass
class Checkpoint:
    params: dn.DenoiserParams
    schedule: NoiseSchedule
    norm_lo: float
    norm_hi: float
    config: TrainConfig

    def save(self, path) -> None:
        header = {
            "schedule": self.schedule.to_json(),
            "norm": {"lo": self.norm_lo, "hi": self.norm_hi},
            "config": self.config.to_json(),
        }
        dn.save_checkpoint(path, self.params, header)

    @staticmethod
    def load(path) -> "Checkpoint":
        params, header = dn.load_checkpoint(path)
        return Checkpoint(
            params=params,
            schedule=NoiseSchedule.from_json(header["schedule"]),
            norm_lo=float(header["norm"]["lo"]),
            norm_hi=float(header["norm"]["hi"]),
            config=TrainConfig.from_json(header["config"]),
        )


@dataclass
class Metrics:
    """MSE of sampled output vs ground truth, split by oracle regions."""

    global_mse: float
    region_mse: float
    nonregion_mse: float
    n_region: int
    n_nonregion: int

    def to_json(self) -> dict:
        return {
            "global_mse": self.global_mse,
            "region_mse": self.region_mse,
            "nonregion_mse": self.nonregion_mse,
            "n_region": self.n_region,
            "n_nonregion": self.n_nonregion,
        }


@dataclass
class TrainHistory:
    """Loss curve plus any mid-training evaluations (eval_every > 0)."""

    loss_curve: list[float]
    evals: list[dict]


@dataclass
class PreparedSample:
    """Per-sample tensors fixed before the training loop starts."""

    gt: np.ndarray  # normalized log-mel target (F, T)
    ref_norm: MelSpectrogram  # prepared reference, normalized log domain
    cond: np.ndarray
    weights: WeightMap
    detected_regions: TransitionRegionSet
    true_regions: TransitionRegionSet


def prepare_reference(
    ref_linear: MelSpectrogram,
    blur: bool,
    norm_lo: float,
    norm_hi: float,
    tcfg: TransitionConfig = TransitionConfig(),
    log_floor: float = 1e-5,
) -> tuple[MelSpectrogram, TransitionRegionSet]:
    """Detect regions on the linear reference, optionally blur them, then
    map into the normalized log domain the denoiser works in."""
    _, regions = analyze(ref_linear, tcfg)
    prepped = blur_regions(ref_linear, regions, blur_kernel(tcfg)) if blur else ref_linear
    ref_norm = normalize_log_mel(log_compress(prepped, log_floor), norm_lo, norm_hi)
    return ref_norm, regions


def prepare_sample(
    sample_: SynthSample,
    cfg: TrainConfig,
    norm_lo: float,
    norm_hi: float,
    tcfg: TransitionConfig = TransitionConfig(),
) -> PreparedSample:
    ref_norm, regions = prepare_reference(
        sample_.ref_mel, cfg.blur, norm_lo, norm_hi, tcfg, cfg.log_floor
    )
    lam = cfg.lambda_in if cfg.weighting else 1.0
    weights = weight_map(regions, sample_.gt_mel.n_mels, lam)
    return PreparedSample(
        gt=sample_.gt_mel.data,
        ref_norm=ref_norm,
        cond=sample_.cond,
        weights=weights,
        detected_regions=regions,
        true_regions=sample_.true_regions,
    )


def adam_init(params: dn.DenoiserParams) -> dict:
    return {
        "t": 0,
        "m": {name: np.zeros_like(arr) for name, arr in params.named_arrays()},
        "v": {name: np.zeros_like(arr) for name, arr in params.named_arrays()},
    }


def adam_step(
    params: dn.DenoiserParams,
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
):
    """Standard Adam update with bias correction, in place."""
    state["t"] += 1
    t = state["t"]
    for name, arr in params.named_arrays():
        if name not in grads:
            raise ValueError(f"missing gradient for {name}")
        g = grads[name]
        if g.shape != arr.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        arr -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def train(
    config: TrainConfig,
    dataset: SynthDataset,
    tcfg: TransitionConfig = TransitionConfig(),
) -> tuple[Checkpoint, TrainHistory]:
    """Run the training loop; returns the checkpoint and its history.

    Per step the generator is consumed in a fixed order: batch indices,
    then per item one uniform step and one noise draw, so runs with the
    same seed are bit-identical.  When ``eval_every`` is positive the
    model is evaluated on the training set at that cadence (sampling at
    ``eval_steps``); those metrics land in the returned history.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be non-empty")
    schedule = make_schedule(config.schedule_T, config.beta_min, config.beta_max)
    prepared = [
        prepare_sample(s, config, dataset.norm_lo, dataset.norm_hi, tcfg) for s in dataset
    ]
    n_mels = dataset[0].gt_mel.n_mels
    cond_dim = dataset[0].cond.shape[0]
    params = dn.init_params(
        n_mels=n_mels,
        hidden=config.hidden,
        depth=config.depth,
        cond_dim=cond_dim,
        step_dim=config.step_dim,
        kernel=config.kernel,
        seed=config.seed,
    )
    state = adam_init(params)
    rng = np.random.default_rng(config.seed)
    loss_curve: list[float] = []
    evals: list[dict] = []
    for _ in range(config.total_steps):
        idx = rng.integers(0, len(prepared), size=config.batch_size)
        batch_grads = dn.zero_grads(params)
        batch_loss = 0.0
        for j in idx:
            item = prepared[j]
            t = int(rng.integers(1, schedule.T + 1))
            noise = rng.standard_normal(item.gt.shape)
            x_t = q_sample(item.gt, t, noise, schedule)
            trace = dn.ForwardTrace()
            if config.reference:
                hiddens = dn.reference_forward(params, item.ref_norm, item.cond, trace=trace)
            else:
                hiddens = None
            eps_hat, trace = dn.denoiser_forward(
                params, x_t, t, item.cond, hiddens, trace=trace
            )
            loss, loss_grad = weighted_eps_loss(noise, eps_hat, item.weights)
            grads = dn.backward(params, trace, loss_grad)
            for name in batch_grads:
                batch_grads[name] += grads[name]
            batch_loss += loss
        for name in batch_grads:
            batch_grads[name] /= config.batch_size
        batch_loss /= config.batch_size
        if not np.isfinite(batch_loss):
            raise TrainingDivergedError(f"non-finite loss at step {len(loss_curve)}")
        if config.freeze_reference:
            for name in batch_grads:
                if name.startswith("ref."):
                    batch_grads[name][...] = 0.0
        adam_step(params, batch_grads, state, config.learning_rate)
        loss_curve.append(batch_loss)
        step_no = len(loss_curve)
        if config.eval_every > 0 and step_no % config.eval_every == 0:
            snapshot = Checkpoint(
                params=params,
                schedule=schedule,
                norm_lo=dataset.norm_lo,
                norm_hi=dataset.norm_hi,
                config=config,
            )
            metrics = evaluate(snapshot, dataset, config.eval_steps, seed=config.seed)
            evals.append({"step": step_no, "metrics": metrics.to_json()})
    ckpt = Checkpoint(
        params=params,
        schedule=schedule,
        norm_lo=dataset.norm_lo,
        norm_hi=dataset.norm_hi,
        config=config,
    )
    return ckpt, TrainHistory(loss_curve=loss_curve, evals=evals)


def make_predictor(ckpt: Checkpoint, prepared: PreparedSample):
    """Denoiser callable for the sampler; reference features computed once."""
    if ckpt.config.reference:
        hiddens = dn.reference_forward(ckpt.params, prepared.ref_norm, prepared.cond)
    else:
        hiddens = None

    def predict(x_t: np.ndarray, t: int, bundle: ConditionBundle) -> np.ndarray:
        eps_hat, _ = dn.denoiser_forward(ckpt.params, x_t, t, prepared.cond, hiddens)
        return eps_hat

    return predict


def evaluate(
    ckpt: Checkpoint,
    dataset: SynthDataset,
    steps: int,
    seed: int = 0,
    tcfg: TransitionConfig = TransitionConfig(),
) -> Metrics:
    """Sample every item and accumulate region / non-region squared error.

    Works on held-out datasets too: ground truths carry their own
    dataset's normalization, so they are remapped into the checkpoint's
    normalization before comparison (references are prepared with the
    checkpoint's stats to begin with).
    """
    if steps > ckpt.schedule.T:
        raise ValueError(f"steps {steps} exceeds schedule length {ckpt.schedule.T}")
    sq_region = 0.0
    sq_nonregion = 0.0
    n_region = 0
    n_nonregion = 0
    for i, sample_ in enumerate(dataset):
        prepared = prepare_sample(sample_, ckpt.config, ckpt.norm_lo, ckpt.norm_hi, tcfg)
        gt = prepared.gt
        if (dataset.norm_lo, dataset.norm_hi) != (ckpt.norm_lo, ckpt.norm_hi):
            gt_log = denormalize_log_mel(sample_.gt_mel, dataset.norm_lo, dataset.norm_hi)
            gt = normalize_log_mel(gt_log, ckpt.norm_lo, ckpt.norm_hi).data
        bundle = ConditionBundle(cond=prepared.cond, ref_mel=prepared.ref_norm)
        predictor = make_predictor(ckpt, prepared)
        x0_hat = sample(predictor, bundle, ckpt.schedule, steps, seed=seed + i)
        sq = (x0_hat - gt) ** 2
        mask = sample_.true_regions.covers()
        sq_region += float(sq[:, mask].sum())
        sq_nonregion += float(sq[:, ~mask].sum())
        n_region += int(mask.sum()) * sq.shape[0]
        n_nonregion += int((~mask).sum()) * sq.shape[0]
    total = n_region + n_nonregion
    return Metrics(
        global_mse=(sq_region + sq_nonregion) / total,
        region_mse=sq_region / n_region if n_region else 0.0,
        nonregion_mse=sq_nonregion / n_nonregion if n_nonregion else 0.0,
        n_region=n_region,
        n_nonregion=n_nonregion,
    )


ABLATION_VARIANTS = {
    "full": {"blur": True, "weighting": True, "reference": True},
    "no_blur": {"blur": False, "weighting": True, "reference": True},
    "no_weighting": {"blur": True, "weighting": False, "reference": True},
    "no_blur_no_weighting": {"blur": False, "weighting": False, "reference": True},
    "no_reference": {"blur": True, "weighting": True, "reference": False},
}


def ablation_suite(
    base_config: TrainConfig,
    dataset: SynthDataset,
    steps_grid: tuple[int, ...] = (24, 54, 100),
    eval_seed: int = 0,
    eval_dataset: SynthDataset | None = None,
) -> dict:
    """Train the component ablation grid and sweep sampling steps.

    Every variant trains with the same seed so comparisons share their
    random draws; the step sweep evaluates the full model's checkpoint.
    Pass ``eval_dataset`` to measure on held-out samples instead of the
    training set.
    """
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    out = {
        "eval": {"steps": base_config.eval_steps, "seed": eval_seed},
        "variants": {},
        "steps": {},
    }
    full_ckpt = None
    for name, flags in ABLATION_VARIANTS.items():
        cfg = replace(base_config, **flags)
        ckpt, history = train(cfg, dataset)
        metrics = evaluate(ckpt, eval_ds, base_config.eval_steps, seed=eval_seed)
        out["variants"][name] = {
            "flags": flags,
            "final_loss": history.loss_curve[-1],
            "metrics": metrics.to_json(),
        }
        if name == "full":
            full_ckpt = ckpt
    for steps in steps_grid:
        metrics = evaluate(full_ckpt, eval_ds, steps, seed=eval_seed)
        out["steps"][str(steps)] = metrics.to_json()
    return out

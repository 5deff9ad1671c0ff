"""Optimization loop: masked-condition pretraining, task-condition finetuning,
learning-rate scheduling, Adam updates, checkpointing, and loss logging.

Batches are assembled by cropping cached waveforms into fixed-length segments
totalling `batch_seconds` of audio per step, so every item in a batch shares
one feature shape and no padding-aware loss masking is needed. All randomness
flows through the TrainState generator; a fixed seed gives an identical
parameter trajectory, and save/resume continues bit-exactly.

Gradient accumulation is explicit: `pretrain_gradients` / `finetune_gradients`
return (loss, grads) for a micro-batch, and `apply_gradients` performs one
clipped Adam update, so callers may sum several micro-batches before applying.
"""

import dataclasses
import enum
import json
import math

import numpy as np

from .audio import AudioSignal
from .flowpath import FlowPathConfig, sample_training_tuple
from .masking import apply_mask, maybe_drop_condition, sample_mask
from .spectral import (CompressionParams, FeatureGrid, StftParams,
                       features_from_audio)
from .tasks import TaskKind, TsePromptSpec, build_condition, prepend_tse_prompt
from .vectorfield import (ModelConfig, VectorFieldModel, backward,
                          forward_batch, segment_shapes)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CACHE_LIMIT_BYTES = 6 * 1024 ** 3  # waveform cache budget
TRAIN_CHECKPOINT_FORMAT = "flowsr-train-v1"


class TrainMode(enum.Enum):
    PRETRAIN = "pretrain"
    FINETUNE = "finetune"
    SCRATCH = "scratch"


class LossSupport(enum.Enum):
    ALL_FRAMES = "all_frames"
    MASKED_ONLY = "masked_only"


@dataclasses.dataclass
class TrainConfig:
    """Hyperparameters for one training run.

    Loss support selects whether the pretraining objective averages over all
    frames or only masked ones; finetuning always uses all frames (there is
    no mask). Scratch mode trains with task conditions from a random
    initialization and otherwise behaves like finetuning.
    """

    mode: TrainMode = TrainMode.PRETRAIN
    peak_lr: float = 5e-5
    final_lr: float = 1e-5
    warmup_steps: int = 5000
    total_steps: int = 100000
    batch_seconds: float = 16.0
    crop_seconds: float = 1.0
    seed: int = 0
    mask_ratio: float = 0.7
    mask_min_span: int = 10
    dropout_prob: float = 0.1
    task: TaskKind | None = None
    loss_support: LossSupport = LossSupport.ALL_FRAMES
    clip_norm: float | None = 1.0

    def __post_init__(self):
        if not 0.0 < self.final_lr <= self.peak_lr:
            raise ValueError(f"need 0 < final_lr <= peak_lr, got "
                             f"{self.final_lr} / {self.peak_lr}")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError(f"need 0 <= warmup_steps < total_steps, got "
                             f"{self.warmup_steps} / {self.total_steps}")
        if self.crop_seconds <= 0 or self.batch_seconds < self.crop_seconds:
            raise ValueError("need batch_seconds >= crop_seconds > 0")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError(f"mask_ratio must lie in [0, 1], got {self.mask_ratio}")
        if self.mask_min_span < 1:
            raise ValueError("mask_min_span must be >= 1")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None to disable)")
        if self.mode in (TrainMode.FINETUNE, TrainMode.SCRATCH) and self.task is None:
            raise ValueError(f"{self.mode.value} mode requires a task")

    @property
    def batch_items(self) -> int:
        return max(1, int(round(self.batch_seconds / self.crop_seconds)))

    @classmethod
    def for_mode(cls, mode: TrainMode, task: TaskKind | None = None, **kwargs):
        """Mode-appropriate learning-rate defaults."""
        rates = {
            TrainMode.PRETRAIN: dict(peak_lr=5e-5, final_lr=1e-5),
            TrainMode.FINETUNE: dict(peak_lr=2e-5, final_lr=1e-8),
            TrainMode.SCRATCH: dict(peak_lr=1e-4, final_lr=1e-8),
        }[mode]
        rates.update(kwargs)
        return cls(mode=mode, task=task, **rates)


@dataclasses.dataclass
class TrainPair:
    """One corpus item: clean target plus optional degraded input and,
    for target-speaker extraction, a reference utterance."""

    clean: AudioSignal
    degraded: AudioSignal | None = None
    reference: AudioSignal | None = None


@dataclasses.dataclass
class WaveformDataset:
    """In-memory waveform cache with a hard size budget."""

    pairs: list

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("dataset is empty")
        total = 0
        for i, p in enumerate(self.pairs):
            total += p.clean.samples.nbytes
            if p.degraded is not None:
                if len(p.degraded) != len(p.clean):
                    raise ValueError(f"pair {i}: degraded length {len(p.degraded)} "
                                     f"!= clean length {len(p.clean)}")
                total += p.degraded.samples.nbytes
            if p.reference is not None:
                total += p.reference.samples.nbytes
        if total > CACHE_LIMIT_BYTES:
            raise ValueError(f"waveform cache of {total} bytes exceeds the "
                             f"{CACHE_LIMIT_BYTES}-byte budget")

    def __len__(self):
        return len(self.pairs)


@dataclasses.dataclass
class TrainState:
    """Everything needed to continue a run: model, optimizer moments, rng."""

    model: VectorFieldModel
    config: TrainConfig
    step: int
    adam_m: dict
    adam_v: dict
    rng: np.random.Generator
    loss_count: int = 0
    loss_sum: float = 0.0
    last_loss: float = math.nan

    @property
    def mean_loss(self) -> float:
        return self.loss_sum / self.loss_count if self.loss_count else math.nan


def init_train_state(model: VectorFieldModel, config: TrainConfig) -> TrainState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in model.params.items()}
    return TrainState(model=model, config=config, step=0,
                      adam_m=zeros(), adam_v=zeros(),
                      rng=np.random.default_rng(config.seed))


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay peak -> final."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_global_norm(grads: dict, max_norm: float | None):
    """Scale all gradients so the joint L2 norm is at most max_norm."""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def adam_update(params: dict, grads: dict, m: dict, v: dict,
                lr: float, t: int) -> None:
    """One bias-corrected Adam step, in place. t counts updates from 1."""
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for k, g in grads.items():
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * (g * g)
        params[k] -= lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + ADAM_EPS)


@dataclasses.dataclass
class _Item:
    x_t: np.ndarray
    cond: np.ndarray
    t: float
    target: np.ndarray
    frame_mask: np.ndarray | None


def _forward_backward(model: VectorFieldModel, items: list,
                      support: LossSupport) -> tuple[float, dict]:
    """Mean per-item loss and its parameter gradients over a micro-batch.

    Items are grouped by feature shape; each group runs as one batched pass.
    """
    grads = {k: np.zeros_like(p) for k, p in model.params.items()}
    total = len(items)
    loss = 0.0
    groups = {}
    for it in items:
        groups.setdefault(it.x_t.shape, []).append(it)
    for group in groups.values():
        x_t = np.stack([it.x_t for it in group])
        cond = np.stack([it.cond for it in group])
        t = np.array([it.t for it in group])
        target = np.stack([it.target for it in group])
        pred, tape = forward_batch(model, x_t, cond, t, record=True)
        diff = pred - target
        if support is LossSupport.MASKED_ONLY and group[0].frame_mask is not None:
            fm = np.stack([it.frame_mask for it in group]).astype(np.float64)
            denom = fm.sum(axis=1) * x_t.shape[1]  # per-item element count
            denom = np.maximum(denom, 1.0)
            weighted = diff * fm[:, None, :]
            loss += float(((weighted * diff).sum(axis=(1, 2)) / denom).sum()) / total
            dpred = 2.0 * weighted / denom[:, None, None] / total
        else:
            per_item = x_t.shape[1] * x_t.shape[2]
            loss += float((diff * diff).sum()) / per_item / total
            dpred = 2.0 * diff / per_item / total
        g = backward(model, tape, dpred)
        for k in grads:
            grads[k] += g[k]
    return loss, grads


def pretrain_gradients(state: TrainState, batch: list,
                       flow: FlowPathConfig | None = None) -> tuple[float, dict]:
    """Masked-condition objective on a batch of clean FeatureGrids.

    Per item: sample a span mask, zero the masked frames to form the
    condition, drop the condition entirely with the configured probability,
    then draw (t, x0) and regress the field at the interpolated state.
    """
    if not batch:
        raise ValueError("empty batch")
    cfg = state.config
    flow = flow or FlowPathConfig()
    items = []
    for grid in batch:
        mask = sample_mask(grid.num_frames, cfg.mask_ratio, cfg.mask_min_span,
                           state.rng)
        cond = apply_mask(grid, mask)
        cond = maybe_drop_condition(cond, cfg.dropout_prob, state.rng)
        tup = sample_training_tuple(grid.values, flow, state.rng)
        items.append(_Item(x_t=tup.x_t, cond=cond.features.values, t=tup.t,
                           target=tup.target, frame_mask=mask.frame_flags))
    return _forward_backward(state.model, items, cfg.loss_support)


def finetune_gradients(state: TrainState, batch: list,
                       stft_params: StftParams | None = None,
                       compression: CompressionParams | None = None,
                       flow: FlowPathConfig | None = None) -> tuple[float, dict]:
    """Task-condition objective on a batch of TrainPairs; no condition dropout."""
    if not batch:
        raise ValueError("empty batch")
    cfg = state.config
    if cfg.task is None:
        raise ValueError("finetuning requires a task in the config")
    stft_params = stft_params or StftParams()
    compression = compression or CompressionParams()
    flow = flow or FlowPathConfig()
    items = []
    for pair in batch:
        if pair.degraded is None:
            raise ValueError("finetuning requires degraded/clean pairs")
        cond = build_condition(cfg.task, pair.degraded, stft_params, compression,
                               reference=pair.reference)
        if cfg.task is TaskKind.TARGET_SPEAKER_EXTRACT:
            prompt = TsePromptSpec(sample_rate=pair.clean.sample_rate)
            target_audio = prepend_tse_prompt(pair.clean, pair.reference, prompt)
        else:
            target_audio = pair.clean
        x1 = features_from_audio(target_audio, stft_params, compression)
        if x1.values.shape != cond.features.values.shape:
            raise ValueError(f"target features {x1.values.shape} != condition "
                             f"features {cond.features.values.shape}")
        tup = sample_training_tuple(x1.values, flow, state.rng)
        items.append(_Item(x_t=tup.x_t, cond=cond.features.values, t=tup.t,
                           target=tup.target, frame_mask=None))
    return _forward_backward(state.model, items, LossSupport.ALL_FRAMES)


def apply_gradients(state: TrainState, loss: float, grads: dict) -> float:
    """Clip, Adam-update, and advance the step counter. Returns the loss."""
    if not math.isfinite(loss):
        raise RuntimeError(f"non-finite loss {loss!r} at step {state.step}; "
                           "aborting before the parameters are poisoned")
    lr = lr_schedule(state.step, state.config)
    grads, _ = clip_global_norm(grads, state.config.clip_norm)
    adam_update(state.model.params, grads, state.adam_m, state.adam_v,
                lr, state.step + 1)
    state.step += 1
    state.loss_count += 1
    state.loss_sum += loss
    state.last_loss = loss
    return loss


def pretrain_step(state: TrainState, batch: list,
                  flow: FlowPathConfig | None = None) -> tuple[TrainState, float]:
    """One full pretraining update on clean FeatureGrids."""
    loss, grads = pretrain_gradients(state, batch, flow=flow)
    apply_gradients(state, loss, grads)
    return state, loss


def finetune_step(state: TrainState, batch: list,
                  stft_params: StftParams | None = None,
                  compression: CompressionParams | None = None,
                  flow: FlowPathConfig | None = None) -> tuple[TrainState, float]:
    """One full finetuning update on TrainPairs."""
    loss, grads = finetune_gradients(state, batch, stft_params=stft_params,
                                     compression=compression, flow=flow)
    apply_gradients(state, loss, grads)
    return state, loss


def _crop_signal(signal: AudioSignal, start: int, n: int) -> AudioSignal:
    chunk = signal.samples[start:start + n]
    if len(chunk) < n:
        chunk = np.concatenate([chunk, np.zeros(n - len(chunk))])
    return AudioSignal(chunk, signal.sample_rate)


def sample_crop(pair: TrainPair, crop_samples: int, hop: int,
                rng: np.random.Generator) -> TrainPair:
    """Random hop-aligned fixed-length crop, applied jointly to clean and
    degraded; the reference (if any) is kept whole for prompt trimming."""
    max_start = max(0, len(pair.clean) - crop_samples)
    start = int(rng.integers(max_start // hop + 1)) * hop
    return TrainPair(
        clean=_crop_signal(pair.clean, start, crop_samples),
        degraded=None if pair.degraded is None
        else _crop_signal(pair.degraded, start, crop_samples),
        reference=pair.reference)


def make_batch(dataset: WaveformDataset, cfg: TrainConfig,
               stft_params: StftParams, compression: CompressionParams,
               rng: np.random.Generator):
    """Draw one training batch from the cache.

    Pretrain mode returns clean FeatureGrids; finetune/scratch modes return
    cropped TrainPairs.
    """
    rate = dataset.pairs[0].clean.sample_rate
    crop_samples = int(round(cfg.crop_seconds * rate))
    idx = rng.integers(len(dataset), size=cfg.batch_items)
    crops = [sample_crop(dataset.pairs[int(i)], crop_samples,
                         stft_params.hop_size, rng) for i in idx]
    if cfg.mode is TrainMode.PRETRAIN:
        return [features_from_audio(c.clean, stft_params, compression)
                for c in crops]
    return crops


def run_training(state: TrainState, dataset: WaveformDataset,
                 stft_params: StftParams | None = None,
                 compression: CompressionParams | None = None,
                 log_path=None, log_append: bool = False,
                 checkpoint_path=None, checkpoint_every: int = 0) -> TrainState:
    """Drive training to total_steps, logging one record per step.

    The loss log is line-delimited JSON objects {"step", "lr", "loss"}.
    Checkpoints are written every `checkpoint_every` steps (0 = only at the
    end, when checkpoint_path is set).
    """
    stft_params = stft_params or StftParams()
    compression = compression or CompressionParams()
    cfg = state.config
    log_file = open(log_path, "a" if log_append else "w") if log_path else None
    try:
        while state.step < cfg.total_steps:
            k = state.step
            batch = make_batch(dataset, cfg, stft_params, compression, state.rng)
            if cfg.mode is TrainMode.PRETRAIN:
                _, loss = pretrain_step(state, batch)
            else:
                _, loss = finetune_step(state, batch, stft_params, compression)
            if log_file is not None:
                record = {"step": k, "lr": lr_schedule(k, cfg), "loss": loss}
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if checkpoint_path and checkpoint_every \
                    and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["mode"] = cfg.mode.value
    d["task"] = cfg.task.value if cfg.task else None
    d["loss_support"] = cfg.loss_support.value
    return d


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["mode"] = TrainMode(d["mode"])
    d["task"] = TaskKind(d["task"]) if d.get("task") else None
    d["loss_support"] = LossSupport(d["loss_support"])
    return TrainConfig(**d)


def save_checkpoint(state: TrainState, path) -> None:
    """Serialize the full TrainState (params, moments, rng, counters)."""
    payload = {
        "__format__": np.array(TRAIN_CHECKPOINT_FORMAT),
        "__model_config__": np.array(
            json.dumps(dataclasses.asdict(state.model.config))),
        "__train_config__": np.array(json.dumps(_train_config_dict(state.config))),
        "__step__": np.array(state.step, dtype=np.int64),
        "__rng__": np.array(json.dumps(state.rng.bit_generator.state)),
        "__loss_stats__": np.array(json.dumps(
            [state.loss_count, state.loss_sum, state.last_loss])),
    }
    for name, arr in state.model.params.items():
        payload[f"param.{name}"] = arr
        payload[f"adam_m.{name}"] = state.adam_m[name]
        payload[f"adam_v.{name}"] = state.adam_v[name]
    np.savez(path, **payload)


def load_checkpoint(path, expected: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState; optionally insist it matches an expected config."""
    with np.load(path, allow_pickle=False) as data:
        if "__format__" not in data or str(data["__format__"]) != TRAIN_CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a recognized training checkpoint")
        model_config = ModelConfig(**json.loads(str(data["__model_config__"])))
        train_config = _train_config_from_dict(
            json.loads(str(data["__train_config__"])))
        if expected is not None and _train_config_dict(expected) != \
                _train_config_dict(train_config):
            raise ValueError(f"{path}: checkpoint config does not match the "
                             "requested run config")
        params, m, v = {}, {}, {}
        for name, shape in segment_shapes(model_config).items():
            for prefix, dest in (("param.", params), ("adam_m.", m), ("adam_v.", v)):
                key = prefix + name
                if key not in data:
                    raise ValueError(f"{path}: missing array '{key}'")
                if data[key].shape != shape:
                    raise ValueError(f"{path}: '{key}' has shape {data[key].shape}, "
                                     f"expected {shape}")
                dest[name] = data[key].astype(np.float64)
        rng = np.random.default_rng(0)
        rng.bit_generator.state = json.loads(str(data["__rng__"]))
        loss_count, loss_sum, last_loss = json.loads(str(data["__loss_stats__"]))
        return TrainState(
            model=VectorFieldModel(config=model_config, params=params),
            config=train_config, step=int(data["__step__"]),
            adam_m=m, adam_v=v, rng=rng,
            loss_count=int(loss_count), loss_sum=float(loss_sum),
            last_loss=float(last_loss))

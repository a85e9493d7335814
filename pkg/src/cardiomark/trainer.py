"""Optimization recipe: KL + soft-Dice loss, Adam with bias correction,
plateau-halved learning rate, patient-level splitting, pooled multi-view
minibatches with per-sample augmentation, and best-validation model selection.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import heatmap
from .errors import ConfigError, NumericError
from .preprocess import AugmentConfig, Image, bias_correct, normalize_intensity, preprocess_pipeline, augment
from .unet import Checkpoint, config_digest, save_checkpoint

LAX_GROUP = heatmap.LAX_VIEWS
SAX_GROUP = ("SAX",)


@dataclass
class TrainConfig:
    lr0: float = 0.001
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 50
    plateau_patience: int = 3
    plateau_min_rel: float = 1e-4
    plateau_factor: float = 0.5
    batch_size: int = 8
    seed: int = 0
    mode: str = "fresh"  # "fresh" | "finetune"
    sigma_px: float = 5.0
    frame: tuple = (400, 400)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0,1), got {self.plateau_factor}")
        if self.mode not in ("fresh", "finetune"):
            raise ConfigError(f"mode must be fresh|finetune, got {self.mode!r}")
        min_epochs = 0 if self.mode == "finetune" else 1
        if self.epochs < min_epochs:
            raise ConfigError(f"epochs must be >= {min_epochs}, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    def digest_dict(self):
        d = {
            "lr0": self.lr0, "betas": list(self.betas), "eps": self.eps,
            "epochs": self.epochs, "plateau": [self.plateau_patience,
                                               self.plateau_min_rel,
                                               self.plateau_factor],
            "batch_size": self.batch_size, "seed": self.seed, "mode": self.mode,
            "sigma_px": self.sigma_px, "frame": list(self.frame),
        }
        return d


def finetune_config(**overrides):
    """Fine-tuning defaults: lr 0.0005 for 10 epochs, everything trainable."""
    cfg = dict(lr0=0.0005, epochs=10, mode="finetune")
    cfg.update(overrides)
    return TrainConfig(**cfg)


@dataclass
class OptimizerState:
    """Adam first/second moments per parameter plus the shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def new(cls, named_params):
        return cls(
            m={k: np.zeros_like(p) for k, p in named_params.items()},
            v={k: np.zeros_like(p) for k, p in named_params.items()},
        )


def adam_step(named_params, named_grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Standard bias-corrected Adam update, in place on the parameter arrays."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params.items():
        g = named_grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class PlateauState:
    best: float = math.inf
    bad_epochs: int = 0


def plateau_lr(state, val_loss, lr, patience=3, min_rel=1e-4, factor=0.5):
    """Halve `lr` after `patience` epochs without a qualifying improvement."""
    if val_loss < state.best * (1.0 - min_rel) or math.isinf(state.best):
        state.best = val_loss
        state.bad_epochs = 0
        return lr
    state.bad_epochs += 1
    if state.bad_epochs >= patience:
        state.bad_epochs = 0
        return lr * factor
    return lr


@dataclass
class TrainHistory:
    """Per-epoch train loss, validation loss and learning rate."""

    epochs: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_loss, lr):
        self.epochs.append(
            {"epoch": epoch, "train_loss": float(train_loss),
             "val_loss": float(val_loss), "lr": float(lr)}
        )

    @property
    def best_epoch(self):
        if not self.epochs:
            return 0
        vals = [e["val_loss"] for e in self.epochs]
        return int(np.argmin(vals)) + 1

    def write_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_loss,lr\n")
            for e in self.epochs:
                f.write(f"{e['epoch']},{e['train_loss']!r},{e['val_loss']!r},{e['lr']!r}\n")


def split_patients(manifest, frac=0.9, seed=0):
    """Patient-granularity split; no patient id appears on both sides."""
    patients = manifest.patients()
    if len(patients) < 2:
        raise ConfigError(f"patient split needs >= 2 patients, got {len(patients)}")
    rng = np.random.default_rng(seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    n_train = int(round(frac * len(patients)))
    n_train = min(max(n_train, 1), len(patients) - 1)
    train_ids = set(order[:n_train])
    train = [s for s in manifest.samples if s.patient in train_ids]
    val = [s for s in manifest.samples if s.patient not in train_ids]
    return train, val


@dataclass
class TrainSample:
    """Manifest sample after geometric preprocessing and target encoding."""

    view: str
    patient: str
    sequence: str
    image: Image  # framed, un-normalized
    corrected: Image  # bias-corrected variant of `image`
    target: np.ndarray  # (4, H, W) heat-map stack
    record: object
    truth: heatmap.LandmarkSet  # original-frame coordinates


def prepare_samples(manifest, samples, frame, sigma_px=heatmap.DEFAULT_SIGMA_PX):
    """Load, frame, and encode targets for a list of manifest samples."""
    out = []
    H, W = frame
    for s in samples:
        img = manifest.load_image(s)
        framed, record = preprocess_pipeline(img, out_size=frame, normalize=False)
        truth = s.landmark_set(img.pixels.shape)
        proc = heatmap.to_processed_frame(truth, record)
        target = heatmap.encode(proc, H, W, sigma_px).probs
        out.append(
            TrainSample(
                view=s.view,
                patient=s.patient,
                sequence=s.sequence,
                image=framed,
                corrected=bias_correct(framed),
                target=target,
                record=record,
                truth=truth,
            )
        )
    return out


def _net_input(sample, aug_cfg, seed):
    if aug_cfg is None:
        px = sample.image.pixels
    else:
        px = augment(sample.image, aug_cfg, seed, corrected=sample.corrected).pixels
    px, _ = normalize_intensity(px)
    return px


def assemble_batch(samples, aug_cfg, rng):
    """Stack images (augmented when a config is given) and targets."""
    xs = []
    ts = []
    for s in samples:
        seed = int(rng.integers(2 ** 63)) if aug_cfg is not None else 0
        xs.append(_net_input(s, aug_cfg, seed))
        ts.append(s.target)
    x = np.stack(xs)[:, None, :, :].astype(np.float32)
    t = np.stack(ts).astype(np.float32)
    return x, t


def sample_minibatch(train_set, views, batch, rng, aug_cfg=None):
    """Uniform-over-samples draw across the pooled views.

    Returns (images [B,1,H,W], targets [B,4,H,W], views per item).
    """
    pool = [s for s in train_set if s.view in views]
    if not pool:
        raise ConfigError(f"no training samples for views {tuple(views)}")
    idx = rng.integers(0, len(pool), size=batch)
    chosen = [pool[i] for i in idx]
    x, t = assemble_batch(chosen, aug_cfg, rng)
    return x, t, [s.view for s in chosen]


def composite_loss(model, x, t, mode):
    """forward -> softmax -> kl + dice; returns (loss node, kl value, dice value)."""
    scores = model.forward(ad.Tensor(x, dtype=model.dtype), mode=mode)
    probs = ad.softmax_channels(scores)
    kl = ad.kl_loss(t, probs)
    dice = ad.soft_dice_loss(probs, t)
    return ad.add(kl, dice), float(kl.data), float(dice.data)


def evaluate_loss(model, samples, config):
    """Mean composite loss over `samples` in eval mode, no augmentation."""
    total = 0.0
    count = 0
    bs = config.batch_size
    for start in range(0, len(samples), bs):
        chunk = samples[start : start + bs]
        x, t = assemble_batch(chunk, None, None)
        loss, _, _ = composite_loss(model, x, t, "eval")
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def _check_view_group(samples, what):
    views = {s.view for s in samples}
    if views <= set(LAX_GROUP) or views <= set(SAX_GROUP):
        return
    raise ConfigError(
        f"{what} mixes view groups {sorted(views)}; train either the LAX "
        f"group {LAX_GROUP} or SAX"
    )


def train(model, train_samples, val_samples, config, checkpoint_every=0,
          checkpoint_dir=None):
    """Run the full loop; returns (best-epoch Checkpoint, TrainHistory)."""
    if not train_samples or not val_samples:
        raise ConfigError("both train and validation sets must be nonempty")
    _check_view_group(train_samples, "training set")
    _check_view_group(val_samples, "validation set")

    rng = np.random.default_rng(config.seed)
    opt = OptimizerState.new({k: p.data for k, p in model.params.items()})
    plateau = PlateauState()
    lr = config.lr0
    history = TrainHistory()
    best_val = math.inf
    best_snapshot = model.clone_weights()
    best_epoch = 0
    n = len(train_samples)
    step = 0

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        total = 0.0
        count = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            chunk = [train_samples[i] for i in idx]
            x, t = assemble_batch(chunk, config.augment, rng)
            step += 1
            loss, klv, dicev = composite_loss(model, x, t, "train")
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise NumericError(
                    f"non-finite loss at step {step} "
                    f"(lr={lr:g}, kl={klv:g}, dice={dicev:g})"
                )
            model.zero_grads()
            ad.backward(loss)
            adam_step(
                {k: p.data for k, p in model.params.items()},
                {k: p.grad for k, p in model.params.items()},
                opt, lr, config.betas, config.eps,
            )
            total += lv * len(chunk)
            count += len(chunk)
        train_loss = total / count
        val_loss = evaluate_loss(model, val_samples, config)
        history.append(epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_snapshot = model.clone_weights()
        lr = plateau_lr(plateau, val_loss, lr, config.plateau_patience,
                        config.plateau_min_rel, config.plateau_factor)
        if checkpoint_every and checkpoint_dir and epoch % checkpoint_every == 0:
            ck = Checkpoint(model.arch, *model.clone_weights(),
                            _provenance(config, epoch, val_loss, train_samples))
            save_checkpoint(ck, f"{checkpoint_dir}/epoch_{epoch:03d}.cmlk")

    params, state = best_snapshot
    ckpt = Checkpoint(model.arch, params, state,
                      _provenance(config, best_epoch, best_val, train_samples))
    return ckpt, history


def _provenance(config, epoch, val_loss, samples):
    views = sorted({s.view for s in samples})
    return {
        "config_digest": config_digest(config.digest_dict()),
        "epoch": int(epoch),
        "val_loss": float(val_loss),
        "frame": list(config.frame),
        "sigma_px": config.sigma_px,
        "views": views,
        "seed": config.seed,
        "mode": config.mode,
    }


def fine_tune(base, train_samples, val_samples, config):
    """Continue training from `base` with fine-tuning hyperparameters."""
    if config.mode != "finetune":
        raise ConfigError("fine_tune requires a finetune-mode config")
    needed = len(heatmap.VIEWS[train_samples[0].view]) + 1 if train_samples else 4
    if base.arch.out_channels != needed:
        raise ConfigError(
            f"base model has {base.arch.out_channels} output channels, "
            f"task needs {needed}"
        )
    if config.epochs == 0:
        return base, TrainHistory()
    model = base.to_model()
    return train(model, train_samples, val_samples, config)

"""Three-stage training: autoencoder pretraining, GAN training on frozen
textures, then joint finetuning with the identity loss. Also owns the
loss log and the binary checkpoint format."""

import csv
import dataclasses
import io
import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F

from . import data as data_mod
from . import gan as gan_mod
from . import identity as identity_mod
from .dae import Dae, DaeConfig, LossWeights, dae_objective

STAGE_DAE = "dae_only"
STAGE_GAN = "gan_frozen_dae"
STAGE_JOINT = "joint"
STAGES = (STAGE_DAE, STAGE_GAN, STAGE_JOINT)

CHECKPOINT_MAGIC = b"TEXWRPCK"
CHECKPOINT_VERSION = 1


@dataclasses.dataclass
class TrainConfig:
    stage: str
    epochs_constant: int = 1
    epochs_decay: int = 0
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 100
    n_critic: int = 5
    flip_prob: float = 0.5
    weights: LossWeights = dataclasses.field(default_factory=LossWeights)
    seed: int = 0
    use_dae: bool = True
    use_identity_loss: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.n_critic < 1:
            raise ValueError("n_critic must be >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("Adam betas must be in (0, 1)")
        if self.stage == STAGE_DAE and not self.use_dae:
            raise ValueError("dae_only stage is meaningless with use_dae=False")

    @property
    def total_epochs(self):
        return self.epochs_constant + self.epochs_decay


def default_plan(weights=None, seed=0, **overrides):
    """Paper-style three-stage schedule; epoch counts are config values."""
    weights = weights or LossWeights()
    common = dict(weights=weights, seed=seed, **overrides)
    return [
        TrainConfig(STAGE_DAE, epochs_constant=5, epochs_decay=0, lr=2e-4, **common),
        TrainConfig(STAGE_GAN, epochs_constant=100, epochs_decay=100, lr=1e-4, **common),
        TrainConfig(STAGE_JOINT, epochs_constant=29, epochs_decay=29, lr=1e-4, **common),
    ]


def lr_at_epoch(config: TrainConfig, epoch):
    """Constant lr, then linear decay hitting exactly 0 at the end of the
    final epoch. `epoch` may equal total_epochs to query the endpoint."""
    if epoch < 0 or epoch > config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs}]")
    if epoch < config.epochs_constant or config.epochs_decay == 0:
        return config.lr if epoch < config.total_epochs else 0.0
    return config.lr * (1.0 - (epoch - config.epochs_constant) / config.epochs_decay)


class LossLog:
    """Per-step loss records: (global_step, stage, term, value)."""

    def __init__(self):
        self.records = []
        self._epochs = []

    def add(self, step, stage, term, value, epoch=0):
        if self.records and step < self.records[-1][0]:
            raise ValueError("steps must be non-decreasing")
        self.records.append((step, stage, term, float(value)))
        self._epochs.append(epoch)

    def values(self, term):
        return np.array([r[3] for r in self.records if r[2] == term])

    def epoch_means(self, term):
        buckets = {}
        for (step, stage, t, value), epoch in zip(self.records, self._epochs):
            if t == term:
                buckets.setdefault(epoch, []).append(value)
        epochs = np.array(sorted(buckets))
        means = np.array([np.mean(buckets[e]) for e in epochs])
        return epochs, means

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "stage", "term", "value"])
            for step, stage, term, value in self.records:
                writer.writerow([step, stage, term, f"{value:.10g}"])

    @classmethod
    def load_csv(cls, path):
        log = cls()
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if not rows or rows[0] != ["step", "stage", "term", "value"]:
            raise ValueError(f"{path}: not a loss log CSV")
        for step, stage, term, value in rows[1:]:
            # the CSV carries no epoch column; bucket per step instead
            log.add(int(step), stage, term, float(value), epoch=int(step))
        return log


@dataclasses.dataclass
class ModelConfig:
    image_size: int = 32
    n_labels: int = 2
    label_mode: str = "multi_binary"
    dae: DaeConfig = None
    gan: gan_mod.GanConfig = None
    extractor: identity_mod.ExtractorConfig = None

    def __post_init__(self):
        self.dae = self.dae or DaeConfig(image_size=self.image_size)
        self.gan = self.gan or gan_mod.GanConfig(
            image_size=self.image_size,
            n_labels=self.n_labels,
            label_mode=self.label_mode,
        )
        self.extractor = self.extractor or identity_mod.ExtractorConfig(
            kind="trained_classifier_backbone", image_size=self.image_size
        )

    @classmethod
    def for_manifest(cls, manifest, **kwargs):
        size = manifest.records[0].load_image().shape[0]
        return cls(
            image_size=size,
            n_labels=len(manifest.vocabulary),
            label_mode=manifest.label_mode,
            **kwargs,
        )


@dataclasses.dataclass
class TrainState:
    model: gan_mod.TdbModel
    extractor: object
    optimizers: dict
    model_cfg: ModelConfig
    plan: list
    vocabulary: list
    label_mode: str
    progress: dict
    log: LossLog


def _epoch_seed(seed, stage_index, epoch):
    return (seed * 1_000_003 + stage_index * 10_007 + epoch) % 2**31


def _step_generator(seed, global_step):
    gen = torch.Generator()
    gen.manual_seed((seed * 2_000_003 + global_step) % 2**63)
    return gen


class Trainer:
    def __init__(self, state: TrainState, manifest):
        self.state = state
        self.manifest = manifest.subset("train") if any(
            r.split == "test" for r in manifest.records
        ) else manifest
        self.config = None
        self.stage_index = -1
        self._d_calls = 0

    # -- stage management ---------------------------------------------------

    def start_stage(self, stage_index, reset_optimizers=True):
        config = self.state.plan[stage_index]
        self.stage_index = stage_index
        self.config = config
        self._d_calls = self.state.progress.get("d_calls", 0)
        model = self.state.model
        betas = (config.adam_beta1, config.adam_beta2)

        if config.stage == STAGE_JOINT and config.use_identity_loss and \
                config.weights.lam_ip > 0 and self.state.extractor is None \
                and len(self.manifest.records) > 0:
            self.state.extractor = identity_mod.build_extractor(
                self.state.model_cfg.extractor, self.manifest, seed=config.seed
            )

        def set_trainable(module, flag):
            if module is not None:
                for p in module.parameters():
                    p.requires_grad_(flag)

        dae_trainable = config.stage in (STAGE_DAE, STAGE_JOINT) and config.use_dae
        gan_trainable = config.stage in (STAGE_GAN, STAGE_JOINT)
        set_trainable(model.dae, dae_trainable)
        set_trainable(model.generator, gan_trainable)
        set_trainable(model.discriminator, gan_trainable)

        if reset_optimizers:
            opts = {}
            if dae_trainable:
                opts["dae"] = torch.optim.Adam(
                    model.dae.parameters(), lr=config.lr, betas=betas
                )
            if gan_trainable:
                opts["generator"] = torch.optim.Adam(
                    model.generator.parameters(), lr=config.lr, betas=betas
                )
                opts["discriminator"] = torch.optim.Adam(
                    model.discriminator.parameters(), lr=config.lr, betas=betas
                )
            self.state.optimizers = opts

    def set_lr(self, epoch):
        lr = lr_at_epoch(self.config, epoch)
        for opt in self.state.optimizers.values():
            for group in opt.param_groups:
                group["lr"] = lr
        return lr

    # -- steps --------------------------------------------------------------

    def _check_finite(self, terms):
        for name, value in terms.items():
            if not torch.isfinite(torch.as_tensor(value)).all():
                raise RuntimeError(f"non-finite loss term {name!r} at step "
                                   f"{self.state.progress['global_step']}")

    def _log(self, terms, epoch):
        p = self.state.progress
        for name, value in terms.items():
            self.state.log.add(
                p["global_step"], self.config.stage, name, float(value), epoch
            )

    def training_step(self, batch, epoch=0):
        """One optimization call: a DAE step, or one D update plus a G
        update after every n_critic D updates."""
        if self.config.stage == STAGE_DAE:
            terms = self._dae_step(batch)
        else:
            terms = self._gan_step(batch)
        terms = {
            k: v.detach() if torch.is_tensor(v) else v for k, v in terms.items()
        }
        self._check_finite(terms)
        self._log(terms, epoch)
        self.state.progress["global_step"] += 1
        return terms

    def _dae_step(self, batch):
        images, _ = batch
        opt = self.state.optimizers["dae"]
        opt.zero_grad()
        output = self.state.model.dae(images)
        total, terms = dae_objective(output, images, self.config.weights)
        total.backward()
        opt.step()
        return {**terms, "dae/total": total}

    def _gan_step(self, batch):
        images, labels = batch
        model = self.state.model
        weights = self.config.weights
        joint = self.config.stage == STAGE_JOINT
        gen = _step_generator(self.config.seed, self.state.progress["global_step"])
        targets = labels[torch.randperm(len(labels), generator=gen)]

        # discriminator update
        opt_d = self.state.optimizers["discriminator"]
        opt_d.zero_grad()
        with torch.no_grad():
            texture, grid = model.factorize(images)
            fake_images = gan_mod.warp.warp_image(
                model.generator(texture, targets), grid
            )
        out_real = model.discriminator(gan_mod.image_batch(images))
        out_fake = model.discriminator(gan_mod.image_batch(fake_images))
        d_adv, _ = gan_mod.adversarial_losses(out_real.src_logits, out_fake.src_logits)
        cls_real = gan_mod.cls_loss(out_real.cls_logits, labels, self.state.label_mode)
        d_total = gan_mod.objective_d(d_adv, cls_real, weights.lam_cls)
        d_total.backward()
        opt_d.step()
        terms = {"gan/d_adv": d_adv, "gan/cls_real": cls_real, "gan/d_total": d_total}

        self._d_calls += 1
        self.state.progress["d_calls"] = self._d_calls
        if self._d_calls % self.config.n_critic == 0:
            terms.update(self._generator_update(images, labels, targets, joint))
        return terms

    def _generator_update(self, images, labels, targets, joint):
        model = self.state.model
        weights = self.config.weights
        opt_g = self.state.optimizers["generator"]
        opt_dae = self.state.optimizers.get("dae")
        opt_g.zero_grad()
        if opt_dae is not None:
            opt_dae.zero_grad()

        dae_terms = {}
        if joint and model.use_dae:
            output = model.dae(images)
            texture, grid = output.texture, output.grid
            dae_total, dae_terms = dae_objective(output, images, weights)
        else:
            with torch.no_grad():
                texture, grid = model.factorize(images)
            dae_total = 0.0

        fake_texture = model.generator(texture, targets)
        fake_images = gan_mod.warp.warp_image(fake_texture, grid)
        out_fake = model.discriminator(gan_mod.image_batch(fake_images))
        _, g_adv = gan_mod.adversarial_losses(
            out_fake.src_logits.detach(), out_fake.src_logits
        )
        cls_fake = gan_mod.cls_loss(out_fake.cls_logits, targets, self.state.label_mode)
        cycled = model.generator(fake_texture, labels)
        reconstructed = gan_mod.warp.warp_image(model.generator(texture, labels), grid)
        rec_t, rec_i, rec = gan_mod.reconstruction_losses(
            texture, cycled, images, reconstructed
        )

        use_ip = joint and self.config.use_identity_loss and weights.lam_ip > 0
        if use_ip:
            ip = identity_mod.identity_loss(texture, fake_texture, self.state.extractor)
            eff_weights = weights
        else:
            ip = torch.zeros(())
            eff_weights = dataclasses.replace(weights, lam_ip=0.0)
        g_total = gan_mod.objective_g(g_adv, cls_fake, rec, ip, eff_weights)

        (g_total + dae_total).backward()
        opt_g.step()
        if joint and opt_dae is not None:
            opt_dae.step()
        return {
            "gan/g_adv": g_adv,
            "gan/cls_fake": cls_fake,
            "gan/rec_texture": rec_t,
            "gan/rec_image": rec_i,
            "gan/identity": ip,
            "gan/g_total": g_total,
            **dae_terms,
        }

    # -- epoch / stage loops ------------------------------------------------

    def run(self, verbose=False):
        p = self.state.progress
        while p["stage_index"] < len(self.state.plan):
            resumed = p.get("resumed", False)
            self.start_stage(p["stage_index"], reset_optimizers=not resumed)
            p["resumed"] = False
            config = self.config
            while p["epoch"] < config.total_epochs:
                self.set_lr(p["epoch"])
                seed = _epoch_seed(config.seed, p["stage_index"], p["epoch"])
                batches = data_mod.batch_iterator(
                    self.manifest, config.batch_size, seed, config.flip_prob
                )
                epoch_terms = {}
                for i, batch in enumerate(batches):
                    if i < p["step_in_epoch"]:
                        continue
                    terms = self.training_step(batch, epoch=p["epoch"])
                    p["step_in_epoch"] = i + 1
                    for k, v in terms.items():
                        epoch_terms.setdefault(k, []).append(float(v))
                if verbose:
                    means = "  ".join(
                        f"{k}={np.mean(v):.4g}" for k, v in sorted(epoch_terms.items())
                    )
                    print(f"[{config.stage}] epoch {p['epoch']}: {means}", flush=True)
                p["epoch"] += 1
                p["step_in_epoch"] = 0
            p["stage_index"] += 1
            p["epoch"] = 0
            p["d_calls"] = 0
            self._d_calls = 0
        return self.state


def build_state(plan, manifest, model_cfg=None, extractor=None):
    if not plan:
        raise ValueError("training plan must contain at least one stage")
    order = [STAGES.index(c.stage) for c in plan]
    if order != sorted(order) or len(set(order)) != len(order):
        raise ValueError("stages must be an ordered prefix-like sequence "
                         "dae_only -> gan_frozen_dae -> joint")
    model_cfg = model_cfg or ModelConfig.for_manifest(manifest)
    torch.manual_seed(plan[0].seed)
    model = gan_mod.TdbModel(
        dae=Dae(model_cfg.dae),
        generator=gan_mod.Generator(model_cfg.gan),
        discriminator=gan_mod.Discriminator(model_cfg.gan),
        use_dae=plan[0].use_dae,
    )
    return TrainState(
        model=model,
        extractor=extractor,
        optimizers={},
        model_cfg=model_cfg,
        plan=list(plan),
        vocabulary=list(manifest.vocabulary),
        label_mode=manifest.label_mode,
        progress={"stage_index": 0, "epoch": 0, "step_in_epoch": 0,
                  "global_step": 0, "d_calls": 0},
        log=LossLog(),
    )


def run_training(plan, manifest, model_cfg=None, extractor=None, state=None,
                 verbose=False):
    """Execute the staged plan, carrying weights forward between stages.

    Pass a `state` from load_checkpoint to resume where it left off.
    Returns the final TrainState (its .log is the full loss log).
    """
    if state is None:
        state = build_state(plan, manifest, model_cfg, extractor)
    trainer = Trainer(state, manifest)
    return trainer.run(verbose=verbose)


# -- checkpoint format -------------------------------------------------------
# magic (8 bytes) | u32 version | u32 blob count | per blob:
#   u32 name length | name utf-8 | u64 payload length | payload


class CheckpointError(ValueError):
    pass


def _torch_bytes(obj):
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _torch_load(blob):
    return torch.load(io.BytesIO(blob), weights_only=False)


def save_checkpoint(state: TrainState, path):
    """Atomic single-file dump of weights, optimizer states, RNG state
    and a config echo."""
    blobs = {
        "meta": json.dumps({
            "model_cfg": _cfg_dict(state.model_cfg),
            "plan": [_cfg_dict(c) for c in state.plan],
            "vocabulary": state.vocabulary,
            "label_mode": state.label_mode,
            "progress": {k: v for k, v in state.progress.items()},
            "use_dae": state.model.use_dae,
            "has_extractor": state.extractor is not None,
            "extractor_n_classes": getattr(
                getattr(state.extractor, "cfg", None), "n_classes", 0
            ),
        }).encode(),
        "dae": _torch_bytes(state.model.dae.state_dict()),
        "generator": _torch_bytes(state.model.generator.state_dict()),
        "discriminator": _torch_bytes(state.model.discriminator.state_dict()),
        "rng": _torch_bytes(torch.get_rng_state()),
    }
    if state.extractor is not None:
        blobs["extractor"] = _torch_bytes(state.extractor.state_dict())
    for name, opt in state.optimizers.items():
        blobs[f"opt_{name}"] = _torch_bytes(opt.state_dict())

    payload = io.BytesIO()
    payload.write(CHECKPOINT_MAGIC)
    payload.write(struct.pack("<II", CHECKPOINT_VERSION, len(blobs)))
    for name, blob in blobs.items():
        encoded = name.encode()
        payload.write(struct.pack("<I", len(encoded)))
        payload.write(encoded)
        payload.write(struct.pack("<Q", len(blob)))
        payload.write(blob)

    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload.getvalue())
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def _cfg_dict(cfg):
    out = {}
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        out[field.name] = _cfg_dict(value) if dataclasses.is_dataclass(value) else value
    return out


def read_checkpoint_blobs(path):
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    if len(raw) < 16 or view[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a texwarp checkpoint")
    version, count = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
        )
    blobs, offset = {}, 16
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = bytes(view[offset : offset + name_len]).decode()
            offset += name_len
            (blob_len,) = struct.unpack_from("<Q", raw, offset)
            offset += 8
            if offset + blob_len > len(raw):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            blobs[name] = bytes(view[offset : offset + blob_len])
            offset += blob_len
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint") from None
    return blobs


def load_checkpoint(path) -> TrainState:
    blobs = read_checkpoint_blobs(path)
    meta = json.loads(blobs["meta"].decode())
    model_cfg = ModelConfig(
        image_size=meta["model_cfg"]["image_size"],
        n_labels=meta["model_cfg"]["n_labels"],
        label_mode=meta["model_cfg"]["label_mode"],
        dae=DaeConfig(**meta["model_cfg"]["dae"]),
        gan=gan_mod.GanConfig(**meta["model_cfg"]["gan"]),
        extractor=identity_mod.ExtractorConfig(**meta["model_cfg"]["extractor"]),
    )
    plan = []
    for c in meta["plan"]:
        c = dict(c)
        c["weights"] = LossWeights(**c["weights"])
        plan.append(TrainConfig(**c))

    model = gan_mod.TdbModel(
        dae=Dae(model_cfg.dae),
        generator=gan_mod.Generator(model_cfg.gan),
        discriminator=gan_mod.Discriminator(model_cfg.gan),
        use_dae=meta["use_dae"],
    )
    model.dae.load_state_dict(_torch_load(blobs["dae"]))
    model.generator.load_state_dict(_torch_load(blobs["generator"]))
    model.discriminator.load_state_dict(_torch_load(blobs["discriminator"]))
    torch.set_rng_state(_torch_load(blobs["rng"]))

    extractor = None
    if meta["has_extractor"]:
        ext_cfg = dataclasses.replace(
            model_cfg.extractor, n_classes=meta["extractor_n_classes"]
        )
        extractor = identity_mod.IdentityExtractor(ext_cfg)
        extractor.load_state_dict(_torch_load(blobs["extractor"]))
        if ext_cfg.frozen:
            extractor.freeze()

    progress = dict(meta["progress"])
    state = TrainState(
        model=model,
        extractor=extractor,
        optimizers={},
        model_cfg=model_cfg,
        plan=plan,
        vocabulary=meta["vocabulary"],
        label_mode=meta["label_mode"],
        progress=progress,
        log=LossLog(),
    )
    # rebuild the stage's optimizers and restore their moments
    if progress["stage_index"] < len(plan):
        trainer = Trainer(state, _DummyManifest())
        trainer.start_stage(progress["stage_index"])
        for name, opt in state.optimizers.items():
            key = f"opt_{name}"
            if key in blobs:
                opt.load_state_dict(_torch_load(blobs[key]))
        progress["resumed"] = True
    return state


class _DummyManifest:
    """Placeholder for optimizer reconstruction; never iterated."""
    records = ()

    def subset(self, split):
        return self

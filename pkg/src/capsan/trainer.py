"""Alternating adversarial training with post-hoc minority oversampling.

One iteration = one (or ``disc_steps``) discriminator Adam updates followed
by one generator update, both fed latents from the class-conditional
mixture. Per-class latent Gaussians are re-fitted at every epoch boundary
from discriminator features pushed through a fixed random projector (the
projector is stored as a parameter but no objective ever produces a
gradient for it, so it stays at its seeded initialization). After the loop
the generator runs as an oversampler and emits the minority-sample budget.

Determinism: all randomness flows from ``TrainConfig.seed`` through named
SeedSequence streams, and the default clock records 0.0 ms so logs are
byte-reproducible; pass a real ``clock`` (milliseconds) to time runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import LabeledDataset
from .diffcore import AdamState, adam_step
from .errors import (
    BadCheckpoint,
    ConfigInvalid,
    NonFiniteLoss,
    NonFiniteValue,
    UnknownClass,
)
from .losses import (
    discriminator_loss,
    feature_matching,
    generator_loss,
    margin_loss,
    one_hot,
    pull_away,
)
from .mixture import (
    ClassGaussian,
    DatasetStats,
    MixtureConfig,
    class_stats,
    mixture_sample,
    num_to_generate,
    sample_latent,
)
from .models import (
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_conv_discriminator,
    build_discriminator,
    build_generator,
    discriminator_forward,
)

LOG_HEADER = (
    "iteration,disc_loss,gen_loss,margin_real,margin_fake,pt_term,fm_term,wall_time_ms"
)
CHECKPOINT_NAME = "checkpoint.capsan"
LOG_NAME = "train_log.csv"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    batch_size: int = 32
    iterations: int = 2000
    latent_dim: int = 64
    phi: float = 1.0
    pi: float = 0.5
    dist_plus: float = 1.0
    routing_iters: int = 3
    seed: int = 0
    checkpoint_interval: int = 0  # 0 = final checkpoint only
    disc_steps: int = 1  # discriminator updates per generator update
    gen_margin_term: bool = True
    early_stop: bool = False
    early_stop_window: int = 50
    early_stop_tol: float = 0.01
    minority_class: int | None = None  # None = rarest class
    disc_kind: str = "capsule"  # "capsule" | "conv"
    class_embed_dim: int = 8
    fractional_layers: int = 5
    base_channels: int = 16
    primary_caps: int = 32
    conv_channels: int = 32
    feature_channels: int = 64
    clock: Callable[[], float] | None = field(default=None, repr=False)

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigInvalid(f"lr must be positive, got {self.lr}")
        if not 0 < self.beta1 < 1:
            raise ConfigInvalid(f"beta1 must lie in (0,1), got {self.beta1}")
        if self.batch_size < 2:
            raise ConfigInvalid(
                f"batch_size must be >= 2 (pull-away needs pairs), got {self.batch_size}"
            )
        if self.iterations < 0 or self.disc_steps < 1 or self.early_stop_window < 1:
            raise ConfigInvalid("iteration counts must be nonnegative, steps >= 1")
        if not 0 <= self.phi <= 1:
            raise ConfigInvalid(f"phi must lie in [0,1], got {self.phi}")
        if not 0 <= self.pi <= 1:
            raise ConfigInvalid(f"pi must lie in [0,1], got {self.pi}")
        if self.dist_plus <= 0:
            raise ConfigInvalid(f"dist_plus must be positive, got {self.dist_plus}")
        if self.disc_kind not in ("capsule", "conv"):
            raise ConfigInvalid(f"unknown discriminator kind {self.disc_kind!r}")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "clock":
                continue
            out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls) if f.name != "clock"}
        unknown = set(d) - known
        if unknown:
            raise ConfigInvalid(f"unknown train config keys: {sorted(unknown)}")
        return cls(**{k: d[k] for k in d})


@dataclass
class TrainRecord:
    iteration: int
    disc_loss: float
    gen_loss: float
    margin_real: float
    margin_fake: float
    pt_term: float
    fm_term: float
    wall_time_ms: float = 0.0

    def csv_row(self) -> str:
        return ",".join(
            [
                str(self.iteration),
                repr(self.disc_loss),
                repr(self.gen_loss),
                repr(self.margin_real),
                repr(self.margin_fake),
                repr(self.pt_term),
                repr(self.fm_term),
                repr(self.wall_time_ms),
            ]
        )


@dataclass
class MixtureState:
    """Everything a step needs to draw labeled latents."""

    config: MixtureConfig
    gaussians: list[ClassGaussian]
    priors: dict[int, float]
    rng: np.random.Generator

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return mixture_sample(self.config, self.gaussians, self.priors, n, self.rng)


@dataclass
class TrainResult:
    records: list[TrainRecord]
    generator: Generator
    discriminator: object
    projector: np.ndarray
    gaussians: list[ClassGaussian]
    priors: dict[int, float]
    stats: DatasetStats
    minority_class: int
    generated: LabeledDataset
    stopped_early: bool
    config: TrainConfig


def train_discriminator_step(D, G, images, labels, mix: MixtureState,
                             opt: AdamState, cfg: TrainConfig) -> dict:
    """One Adam update of the discriminator; generator weights untouched."""
    z, fake_labels = mix.draw(len(labels))
    with dc.no_grad():
        fake_images = G.forward(z, fake_labels)
    real_out = discriminator_forward(D, images, update_spectral=True)
    fake_out = discriminator_forward(D, fake_images.data)
    loss = discriminator_loss(real_out, fake_out, labels)

    num_slots = real_out.lengths.shape[-1]
    t_fake = np.zeros(num_slots)
    t_fake[-1] = 1.0
    with dc.no_grad():
        m_real = margin_loss(real_out.lengths, one_hot(labels, num_slots)).item()
        m_fake = margin_loss(fake_out.lengths, t_fake).item()
        pt = pull_away(real_out.features).item()

    params = D.parameters()
    dc.zero_grads(params)
    dc.backward(loss)
    adam_step(params, [p.grad for p in params], opt)
    return {
        "disc_loss": loss.item(),
        "margin_real": m_real,
        "margin_fake": m_fake,
        "pt_term": pt,
    }


def train_generator_step(D, G, real_images, mix: MixtureState,
                         opt: AdamState, cfg: TrainConfig) -> dict:
    """One Adam update of the generator (class embeddings included);
    discriminator weights untouched. The real batch only supplies the
    feature-matching target means."""
    real_images = np.asarray(real_images, dtype=np.float64)
    with dc.no_grad():
        f_real = discriminator_forward(D, real_images).features
    z, fake_labels = mix.draw(real_images.shape[0])
    fake_images = G.forward(z, fake_labels)
    fake_out = discriminator_forward(D, fake_images)
    loss = generator_loss(
        f_real, fake_out.features, fake_out.lengths, fake_labels,
        include_margin=cfg.gen_margin_term,
    )
    with dc.no_grad():
        fm = feature_matching(f_real, fake_out.features).item()

    params = G.parameters()
    dc.zero_grads(params)
    dc.backward(loss)
    adam_step(params, [p.grad for p in params], opt)
    return {"gen_loss": loss.item(), "fm_term": fm}


def estimate_gaussians(D, dataset: LabeledDataset, projector: np.ndarray,
                       batch_size: int) -> list[ClassGaussian]:
    """Fit per-class latent Gaussians from discriminator features."""
    feats = []
    with dc.no_grad():
        for start in range(0, len(dataset), batch_size):
            out = discriminator_forward(D, dataset.images[start:start + batch_size])
            feats.append(out.features.data)
    return class_stats(np.concatenate(feats, axis=0), dataset.labels, projector)


def generate_class_samples(G, gaussian: ClassGaussian, class_id: int, n: int,
                           rng: np.random.Generator, batch_size: int,
                           num_classes: int) -> LabeledDataset:
    """Run the generator as an oversampler: n samples of one class.

    Emission is chunked at a fixed batch size because conditional batch
    norm uses batch statistics; a fixed chunking keeps outputs a pure
    function of (weights, seed, n).
    """
    images = []
    with dc.no_grad():
        for start in range(0, n, batch_size):
            count = min(batch_size, n - start)
            z = sample_latent(gaussian, count, rng)
            labels = np.full(count, class_id, dtype=np.int64)
            images.append(G.forward(z, labels).data)
    stacked = (
        np.concatenate(images, axis=0)
        if images
        else np.zeros((0, *G.cfg.image_shape))
    )
    return LabeledDataset(
        images=stacked,
        labels=np.full(stacked.shape[0], class_id, dtype=np.int64),
        num_classes=num_classes,
        provenance="generated",
    )


def _feature_width(dcfg: DiscriminatorConfig) -> int:
    h2, w2 = dcfg.conv_extents()[2:]
    return dcfg.feature_channels * h2 * w2


def build_models(cfg: TrainConfig, num_classes: int,
                 image_shape: tuple[int, int, int],
                 gen_seed: int, disc_seed: int):
    gcfg = GeneratorConfig(
        latent_dim=cfg.latent_dim,
        num_classes=num_classes,
        class_embed_dim=cfg.class_embed_dim,
        fractional_layers=cfg.fractional_layers,
        base_channels=cfg.base_channels,
        image_shape=tuple(image_shape),
    )
    dcfg = DiscriminatorConfig(
        num_classes=num_classes,
        primary_caps=cfg.primary_caps,
        conv_channels=cfg.conv_channels,
        feature_channels=cfg.feature_channels,
        routing_iters=cfg.routing_iters,
        image_shape=tuple(image_shape),
    )
    G = build_generator(gcfg, gen_seed)
    if cfg.disc_kind == "conv":
        D = build_conv_discriminator(dcfg, disc_seed)
    else:
        D = build_discriminator(dcfg, disc_seed)
    return G, D, dcfg


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def save_run(path, G, D, projector, gaussians, stats: DatasetStats,
             cfg: TrainConfig, minority_class: int, num_classes: int,
             image_shape, iteration: int) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, p in G.named_parameters().items():
        tensors[f"G.{name}"] = p.data
    for name, p in D.named_parameters().items():
        tensors[f"D.{name}"] = p.data
    for name, state in D.spectral.items():
        tensors[f"D.spectral.{name}"] = state.u
    tensors["projector"] = projector
    for g in gaussians:
        tensors[f"mixture.mu.{g.class_id}"] = g.mu
        tensors[f"mixture.sigma.{g.class_id}"] = g.sigma_diag
    config = {
        "format": 1,
        "train": cfg.to_dict(),
        "num_classes": int(num_classes),
        "image_shape": [int(v) for v in image_shape],
        "minority_class": int(minority_class),
        "class_counts": {str(k): int(v) for k, v in stats.class_counts.items()},
        "s_plus": int(stats.s_plus),
        "s_minus": int(stats.s_minus),
        "iteration": int(iteration),
    }
    save_checkpoint(path, tensors, config)


@dataclass
class RunState:
    """A reloaded training run: models plus the sampling state."""

    generator: Generator
    discriminator: object
    projector: np.ndarray
    gaussians: list[ClassGaussian]
    priors: dict[int, float]
    stats: DatasetStats
    minority_class: int
    train_config: TrainConfig
    num_classes: int
    image_shape: tuple[int, int, int]
    iteration: int

    def minority_gaussian(self) -> ClassGaussian:
        return self.gaussian_for(self.minority_class)

    def gaussian_for(self, class_id: int) -> ClassGaussian:
        for g in self.gaussians:
            if g.class_id == class_id:
                return g
        raise UnknownClass(f"no latent Gaussian for class {class_id}")


def load_run(path) -> RunState:
    tensors, config = load_checkpoint(path)
    if config.get("format") != 1:
        raise BadCheckpoint(f"unsupported run checkpoint format {config.get('format')!r}")
    cfg = TrainConfig.from_dict(config["train"])
    num_classes = int(config["num_classes"])
    image_shape = tuple(int(v) for v in config["image_shape"])
    G, D, _ = build_models(cfg, num_classes, image_shape, gen_seed=0, disc_seed=0)

    def restore(prefix: str, model) -> None:
        for name, p in model.named_parameters().items():
            key = f"{prefix}.{name}"
            if key not in tensors:
                raise BadCheckpoint(f"checkpoint is missing tensor {key!r}")
            if tensors[key].shape != p.data.shape:
                raise BadCheckpoint(
                    f"tensor {key!r} has shape {tensors[key].shape}, "
                    f"model expects {p.data.shape}"
                )
            p.data = tensors[key].copy()

    restore("G", G)
    restore("D", D)
    for name, state in D.spectral.items():
        key = f"D.spectral.{name}"
        if key not in tensors:
            raise BadCheckpoint(f"checkpoint is missing tensor {key!r}")
        state.u = tensors[key].copy()

    gaussians = []
    for cid in range(num_classes):
        mu_key, sig_key = f"mixture.mu.{cid}", f"mixture.sigma.{cid}"
        if mu_key in tensors:
            gaussians.append(
                ClassGaussian(class_id=cid, mu=tensors[mu_key],
                              sigma_diag=tensors[sig_key])
            )
    counts = {int(k): int(v) for k, v in config["class_counts"].items()}
    total = sum(counts.values())
    stats = DatasetStats(
        class_counts=counts, s_plus=int(config["s_plus"]), s_minus=int(config["s_minus"])
    )
    return RunState(
        generator=G,
        discriminator=D,
        projector=tensors["projector"],
        gaussians=gaussians,
        priors={c: n / total for c, n in counts.items()},
        stats=stats,
        minority_class=int(config["minority_class"]),
        train_config=cfg,
        num_classes=num_classes,
        image_shape=image_shape,
        iteration=int(config["iteration"]),
    )


def write_log(path, records: list[TrainRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(LOG_HEADER + "\n")
        for rec in records:
            fh.write(rec.csv_row() + "\n")


def _finite_or_raise(rec: TrainRecord) -> None:
    vals = [rec.disc_loss, rec.gen_loss, rec.margin_real, rec.margin_fake,
            rec.pt_term, rec.fm_term]
    if not np.all(np.isfinite(vals)):
        raise NonFiniteLoss(f"non-finite loss at iteration {rec.iteration}: {vals}")


def train(dataset: LabeledDataset, cfg: TrainConfig, out_dir=None,
          on_iteration: Callable | None = None) -> TrainResult:
    """Run the full alternating loop on ``dataset``.

    With ``out_dir`` set, writes ``checkpoint.capsan`` and ``train_log.csv``
    there (also on abort, so a diverged run can be inspected).
    ``on_iteration(record, D, G)`` fires after each iteration.
    """
    cfg.validate()
    if dataset.num_classes < 2:
        raise ConfigInvalid("training needs at least 2 classes")
    n = len(dataset)
    counts = dataset.class_counts()
    minority = (
        int(np.argmin(counts)) if cfg.minority_class is None else cfg.minority_class
    )
    if not 0 <= minority < dataset.num_classes or counts[minority] == 0:
        raise UnknownClass(f"minority class {minority} not present in the dataset")
    stats = DatasetStats.from_labels(dataset.labels, minority)
    priors = {c: counts[c] / n for c in range(dataset.num_classes)}

    ss = np.random.SeedSequence(cfg.seed)
    s_gen, s_disc, s_proj, s_shuffle, s_mix, s_emit = ss.spawn(6)
    image_shape = dataset.images.shape[1:]
    G, D, dcfg = build_models(
        cfg, dataset.num_classes, image_shape, _seed_int(s_gen), _seed_int(s_disc)
    )
    proj_rng = np.random.default_rng(s_proj)
    width = _feature_width(dcfg)
    projector = proj_rng.standard_normal((width, cfg.latent_dim)) / np.sqrt(width)

    opt_d = AdamState.for_params(D.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    opt_g = AdamState.for_params(G.parameters(), lr=cfg.lr, beta1=cfg.beta1)
    mix = MixtureState(
        config=MixtureConfig(pi=cfg.pi, minority_class_ids=frozenset({minority})),
        gaussians=[],
        priors=priors,
        rng=np.random.default_rng(s_mix),
    )
    shuffle_rng = np.random.default_rng(s_shuffle)
    clock = cfg.clock if cfg.clock is not None else (lambda: 0.0)

    out_path = Path(out_dir) if out_dir is not None else None

    def checkpoint_now(iteration: int) -> None:
        if out_path is not None:
            save_run(
                out_path / CHECKPOINT_NAME, G, D, projector, mix.gaussians, stats,
                cfg, minority, dataset.num_classes, image_shape, iteration,
            )

    # Per-iteration batches draw evenly across classes, the way Algorithm 1
    # samples i minority plus i majority rows per step; a plain shuffle of an
    # imbalanced set would let the majority dominate both the margin signal
    # and the feature-matching reference.
    present = [c for c in range(dataset.num_classes) if counts[c] > 0]
    pools = [np.flatnonzero(dataset.labels == c) for c in present]

    def balanced_batch() -> np.ndarray:
        per = np.full(len(pools), cfg.batch_size // len(pools))
        extra = shuffle_rng.permutation(len(pools))[: cfg.batch_size % len(pools)]
        per[extra] += 1
        idx = np.concatenate([
            shuffle_rng.choice(pool, size=k, replace=len(pool) < k)
            for pool, k in zip(pools, per)
        ])
        return shuffle_rng.permutation(idx)

    iters_per_epoch = max(1, n // cfg.batch_size)
    records: list[TrainRecord] = []
    stopped_early = False
    iteration = 0
    try:
        while iteration < cfg.iterations and not stopped_early:
            mix.gaussians = estimate_gaussians(D, dataset, projector, cfg.batch_size)
            for _ in range(iters_per_epoch):
                if iteration >= cfg.iterations or stopped_early:
                    break
                idx = balanced_batch()
                images, labels = dataset.images[idx], dataset.labels[idx]
                t0 = clock()
                for _ in range(cfg.disc_steps):
                    d_frag = train_discriminator_step(D, G, images, labels, mix, opt_d, cfg)
                ref = balanced_batch()  # fresh real rows for the fm reference
                g_frag = train_generator_step(D, G, dataset.images[ref], mix, opt_g, cfg)
                rec = TrainRecord(
                    iteration=iteration, wall_time_ms=clock() - t0, **d_frag, **g_frag
                )
                _finite_or_raise(rec)
                records.append(rec)
                iteration += 1
                if on_iteration is not None:
                    on_iteration(rec, D, G)
                if cfg.checkpoint_interval and iteration % cfg.checkpoint_interval == 0:
                    checkpoint_now(iteration)
                if cfg.early_stop and len(records) >= 2 * cfg.early_stop_window:
                    w = cfg.early_stop_window
                    recent = float(np.mean([r.gen_loss for r in records[-w:]]))
                    prev = float(np.mean([r.gen_loss for r in records[-2 * w:-w]]))
                    if abs(recent - prev) <= cfg.early_stop_tol * max(abs(prev), 1e-12):
                        stopped_early = True
    except (NonFiniteValue, NonFiniteLoss) as err:
        checkpoint_now(iteration)
        if out_path is not None:
            write_log(out_path / LOG_NAME, records)
        raise NonFiniteLoss(
            f"aborted at iteration {iteration}: {err}"
        ) from err

    # final statistics on the trained discriminator, then oversample
    mix.gaussians = estimate_gaussians(D, dataset, projector, cfg.batch_size)
    n_plus = num_to_generate(stats, dist_plus=cfg.dist_plus, phi=cfg.phi)
    minority_gaussian = next(g for g in mix.gaussians if g.class_id == minority)
    generated = generate_class_samples(
        G, minority_gaussian, minority, n_plus, np.random.default_rng(s_emit),
        cfg.batch_size, dataset.num_classes,
    )
    checkpoint_now(iteration)
    if out_path is not None:
        write_log(out_path / LOG_NAME, records)
    return TrainResult(
        records=records,
        generator=G,
        discriminator=D,
        projector=projector,
        gaussians=mix.gaussians,
        priors=priors,
        stats=stats,
        minority_class=minority,
        generated=generated,
        stopped_early=stopped_early,
        config=cfg,
    )


def as_predictor(model, batch_size: int = 64) -> Callable[[np.ndarray], np.ndarray]:
    """Adapter: images -> predicted slot indices (for battles and reports)."""

    def predict(images: np.ndarray) -> np.ndarray:
        out = []
        with dc.no_grad():
            for start in range(0, images.shape[0], batch_size):
                res = discriminator_forward(model, images[start:start + batch_size])
                out.append(res.predictions())
        return (
            np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        )

    return predict


def as_sampler(G, class_id: int, batch_size: int = 64) -> Callable[[np.ndarray], np.ndarray]:
    """Adapter: latent batch -> generated images of one class."""

    def generate(z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        out = []
        with dc.no_grad():
            for start in range(0, z.shape[0], batch_size):
                chunk = z[start:start + batch_size]
                labels = np.full(chunk.shape[0], class_id, dtype=np.int64)
                out.append(G.forward(chunk, labels).data)
        return (
            np.concatenate(out, axis=0)
            if out
            else np.zeros((0, *G.cfg.image_shape))
        )

    return generate

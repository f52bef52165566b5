"""capsan: capsule-discriminator adversarial oversampling for imbalanced
image classification, with the full evaluation protocol around it.

The package is self-contained on top of numpy: a small reverse-mode
autodiff engine (``capsan.diffcore``), capsule routing, the generator and
the two discriminator heads, the mixture-driven trainer, dataset plumbing,
and the metrics/reporting stack used by the ``capsan`` command.
"""

__version__ = "0.1.0"

from . import (  # noqa: F401
    capsule,
    checkpoint,
    datasets,
    diffcore,
    errors,
    fidlite,
    losses,
    metrics,
    mixture,
    models,
    svgplot,
    trainer,
)
from .datasets import (  # noqa: F401
    ImbalanceSpec,
    LabeledDataset,
    induce_imbalance,
    load_idx,
    make_synthetic,
    split,
    write_idx,
)
from .losses import (  # noqa: F401
    MarginParams,
    TargetVector,
    discriminator_loss,
    feature_matching,
    generator_loss,
    margin_loss,
    pull_away,
)
from .metrics import (  # noqa: F401
    MetricsReport,
    battle_ratio,
    classification_report,
    confusion_matrix,
    fid,
    roc_auc,
    sample_set_variability,
    ssim,
)
from .mixture import (  # noqa: F401
    ClassGaussian,
    DatasetStats,
    MixtureConfig,
    class_stats,
    mixture_sample,
    num_to_generate,
    sample_latent,
)
from .models import (  # noqa: F401
    CapsuleDiscriminator,
    ConvDiscriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    build_conv_discriminator,
    build_discriminator,
    build_generator,
)
from .trainer import (  # noqa: F401
    TrainConfig,
    TrainRecord,
    TrainResult,
    load_run,
    train,
    train_discriminator_step,
    train_generator_step,
)

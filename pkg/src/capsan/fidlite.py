"""Small fixed feature extractor behind the FID-lite score.

A tiny conv classifier is trained once on balanced synthetic data, frozen,
and committed at ``src/capsan/assets/fidlite.capsan``. Its 32-dim
penultimate activations embed real and generated images for the Frechet
distance. Reports computed with it are labeled "FID-lite": values are not
comparable to Inception-based FIDs from the literature.

Rebuild (deterministic given the seed) with:

    python -m capsan.fidlite --rebuild
"""

from __future__ import annotations

import argparse
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .datasets import make_synthetic
from .diffcore import AdamState, Tensor, adam_step
from .errors import ShapeMismatch
from .losses import one_hot
from .models import he_scale

LEAKY_SLOPE = 0.2

# frozen architecture; changing it orphans the committed asset
ARCH = {
    "kernel": 3,
    "stride": 2,
    "conv1": 12,
    "conv2": 24,
    "feature_dim": 32,
    "num_classes": 10,
    "input_hw": 16,
}


def default_asset_path() -> Path:
    return Path(__file__).parent / "assets" / "fidlite.capsan"


def resize_nearest(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbor resample of [n x c x h x w] images to size x size."""
    n, c, h, w = images.shape
    if (h, w) == (size, size):
        return images
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return images[:, :, rows[:, None], cols[None, :]]


def _as_batch(images) -> np.ndarray:
    """Accept HxW, n x H x W, or n x C x H x W; emit [n x 1 x 16 x 16]."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim != 4:
        raise ShapeMismatch(f"expected 2-4 dims of image data, got {arr.shape}")
    if arr.shape[1] > 1:
        arr = arr.mean(axis=1, keepdims=True)
    return resize_nearest(arr, ARCH["input_hw"])


def _forward(x: Tensor, w) -> tuple[Tensor, Tensor]:
    """Shared trunk: (features, logits) from a [n x 1 x 16 x 16] batch."""
    h = dc.conv2d(x, w["conv1.k"], stride=ARCH["stride"]) + w["conv1.b"]
    h = dc.leaky_relu(h, LEAKY_SLOPE)
    h = dc.conv2d(h, w["conv2.k"], stride=ARCH["stride"]) + w["conv2.b"]
    h = dc.leaky_relu(h, LEAKY_SLOPE)
    h = dc.reshape(h, (x.shape[0], -1))
    feat = dc.leaky_relu(dc.matmul(h, w["fc1.w"]) + w["fc1.b"], LEAKY_SLOPE)
    logits = dc.matmul(feat, w["fc2.w"]) + w["fc2.b"]
    return feat, logits


@dataclass
class Extractor:
    """Frozen weights; forward passes run inside no_grad."""

    weights: dict[str, np.ndarray]

    def _trunk(self, images) -> tuple[Tensor, Tensor]:
        w = {k: Tensor(v) for k, v in self.weights.items()}
        return _forward(Tensor(_as_batch(images)), w)

    def features(self, images) -> np.ndarray:
        with dc.no_grad():
            return self._trunk(images)[0].data

    def logits(self, images) -> np.ndarray:
        with dc.no_grad():
            return self._trunk(images)[1].data

    def predict(self, images) -> np.ndarray:
        return np.argmax(self.logits(images), axis=1)


def load_extractor(path=None) -> Extractor:
    weights, _ = load_checkpoint(path or default_asset_path())
    return Extractor(weights=weights)


def _init_weights(rng: np.random.Generator) -> dict[str, Tensor]:
    k, c1, c2 = ARCH["kernel"], ARCH["conv1"], ARCH["conv2"]
    hw = ARCH["input_hw"]
    e1 = (hw - k) // ARCH["stride"] + 1
    e2 = (e1 - k) // ARCH["stride"] + 1
    flat = c2 * e2 * e2
    fd, nc = ARCH["feature_dim"], ARCH["num_classes"]
    p = {
        "conv1.k": rng.standard_normal((c1, 1, k, k)) * he_scale(k * k),
        "conv1.b": np.zeros((c1, 1, 1)),
        "conv2.k": rng.standard_normal((c2, c1, k, k)) * he_scale(c1 * k * k),
        "conv2.b": np.zeros((c2, 1, 1)),
        "fc1.w": rng.standard_normal((flat, fd)) * he_scale(flat),
        "fc1.b": np.zeros(fd),
        "fc2.w": rng.standard_normal((fd, nc)) * he_scale(fd),
        "fc2.b": np.zeros(nc),
    }
    return {name: dc.parameter(arr, name) for name, arr in p.items()}


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - shift
    lse = dc.log(dc.sum(dc.exp(z), axis=1))
    picked = dc.sum(z * one_hot(labels, z.shape[1]), axis=1)
    return dc.mean(lse - picked)


def train_extractor(
    seed: int = 7,
    iterations: int = 400,
    per_class: int = 64,
    batch_size: int = 64,
    lr: float = 1e-3,
) -> tuple[dict[str, np.ndarray], dict]:
    """Train the extractor on balanced synthetic data; returns (weights, config)."""
    ds = make_synthetic(ARCH["num_classes"], per_class, ARCH["input_hw"], seed=seed)
    rng = np.random.default_rng(seed)
    params = _init_weights(rng)
    names = sorted(params)
    plist = [params[n] for n in names]
    opt = AdamState.for_params(plist, lr=lr, beta1=0.9)
    ext = Extractor(weights={n: params[n].data for n in names})

    n = len(ds)
    order = np.array([], dtype=np.int64)
    for _ in range(iterations):
        if len(order) < batch_size:
            order = np.concatenate([order, rng.permutation(n)])
        idx, order = order[:batch_size], order[batch_size:]
        _, logits = _forward(Tensor(ds.images[idx]), params)
        loss = _cross_entropy(logits, ds.labels[idx])
        dc.zero_grads(plist)
        dc.backward(loss)
        adam_step(plist, [p.grad for p in plist], opt)

    train_acc = float(np.mean(ext.predict(ds.images) == ds.labels))
    held = make_synthetic(ARCH["num_classes"], 16, ARCH["input_hw"], seed=seed + 1)
    held_acc = float(np.mean(ext.predict(held.images) == held.labels))
    config = dict(
        ARCH,
        seed=seed,
        iterations=iterations,
        per_class=per_class,
        lr=lr,
        train_accuracy=train_acc,
        holdout_accuracy=held_acc,
    )
    return {n: params[n].data for n in names}, config


def rebuild_asset(path=None, seed: int = 7, iterations: int = 400) -> dict:
    path = Path(path or default_asset_path())
    weights, config = train_extractor(seed=seed, iterations=iterations)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, weights, config)
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="python -m capsan.fidlite",
        description="Inspect or rebuild the frozen FID-lite feature extractor.",
    )
    parser.add_argument("--rebuild", action="store_true", help="retrain and overwrite the asset")
    parser.add_argument("--out", default=None, help="asset path (default: packaged)")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--iterations", type=int, default=400)
    args = parser.parse_args(argv)

    path = Path(args.out or default_asset_path())
    if args.rebuild:
        config = rebuild_asset(path, seed=args.seed, iterations=args.iterations)
        print(f"wrote {path}")
        print(
            f"train accuracy {config['train_accuracy']:.4f}, "
            f"holdout accuracy {config['holdout_accuracy']:.4f}"
        )
        return 0
    if not path.exists():
        print(f"no asset at {path}; run with --rebuild")
        return 2
    _, config = load_checkpoint(path)
    for key in sorted(config):
        print(f"{key}: {config[key]}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

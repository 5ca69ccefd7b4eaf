"""CIFAR-10 binary ingestion and a synthetic stand-in generator.

The loader reads the standard binary layout (record = 1 label byte followed
by 3072 pixel bytes: the R, G, B planes of a 32x32 row-major image) from
``data_batch_*.bin`` / ``test_batch.bin``. No downloading: point `path` or
``DUALNORM_DATA_ROOT`` at an existing copy.

`make_synthetic_cifar` writes a deterministic 10-class dataset in the same
binary layout, so the whole pipeline (loader included) can run where the
real dataset is unavailable. Each class combines a smooth high-amplitude
pattern (survives bounded perturbations) with a faint pixel-level pattern
that an eps=8/255 adversary can overwrite exactly, which is what makes
undefended models on it attackable while adversarially trained ones are not.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ROOT_ENV = "DUALNORM_DATA_ROOT"
RECORD_BYTES = 3073
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def subsample_test(self, n, seed):
        if n is None or n >= len(self.test_y):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(
            len(self.test_y), size=n, replace=False))
        return Dataset(self.train_x, self.train_y,
                       self.test_x[idx], self.test_y[idx])


def _read_records(path: Path, dtype):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES:
        raise ValueError(
            f"{path}: malformed record length ({raw.size} bytes is not a "
            f"multiple of {RECORD_BYTES})"
        )
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0]
    if labels.max() > 9:
        raise ValueError(f"{path}: label byte > 9 encountered")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(dtype) / dtype(255)
    return images, labels.astype(np.int64)


def _resolve_root(path):
    root = Path(path) if path else Path(os.environ.get(DATA_ROOT_ENV, ""))
    if not str(root):
        raise FileNotFoundError(
            f"no dataset path given and {DATA_ROOT_ENV} is unset"
        )
    # accept either the directory itself or its standard subdirectory
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    return root


def load_cifar10(path=None, subset=None, seed=0, *, test_subset=None,
                 dtype=np.float32) -> Dataset:
    """Load the binary CIFAR-10 layout; pixels scaled to [0,1] by /255.

    `subset` draws that many training records uniformly without replacement,
    deterministically for a given `seed` (indices sorted, split order kept).
    """
    dtype = np.dtype(dtype).type
    root = _resolve_root(path)
    train_parts = [p for p in (root / f for f in TRAIN_FILES) if p.exists()]
    if not train_parts:
        raise FileNotFoundError(f"no data_batch_*.bin under {root}")
    test_path = root / TEST_FILE
    if not test_path.exists():
        raise FileNotFoundError(f"missing {test_path}")

    xs, ys = zip(*(_read_records(p, dtype) for p in train_parts))
    train_x = np.concatenate(xs)
    train_y = np.concatenate(ys)
    test_x, test_y = _read_records(test_path, dtype)

    if subset is not None and subset < len(train_y):
        idx = subset_indices(len(train_y), subset, seed)
        train_x, train_y = train_x[idx], train_y[idx]
    ds = Dataset(train_x, train_y, test_x, test_y)
    if test_subset is not None:
        ds = ds.subsample_test(test_subset, seed)
    return ds


def subset_indices(n, k, seed):
    """Deterministic sorted sample of k indices out of n."""
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))


# ---------------------------------------------------------------------------
# synthetic stand-in


def _interp_matrix(coarse, fine):
    """Linear interpolation weights mapping a coarse grid onto a fine one."""
    pos = np.linspace(0, coarse - 1, fine)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, coarse - 1)
    w = np.zeros((fine, coarse))
    frac = pos - lo
    w[np.arange(fine), lo] += 1 - frac
    w[np.arange(fine), hi] += frac
    return w


def _smooth_field(rng, grid=5, size=32):
    """Unit-std low-frequency random field, [3, size, size]."""
    coarse = rng.normal(size=(3, grid, grid))
    w = _interp_matrix(grid, size)
    field = np.einsum("ya,cab,xb->cyx", w, coarse, w)
    return field / field.std()


def _tiled_texture(rng, tile=8, block=2, size=32):
    """Class texture: a +-1 tile of `block`-sized cells repeated across the
    image. Tiling makes the cue translation-invariant and the blocks give it
    local contrast, so convolutional models pick it up readily.
    """
    cells = rng.choice([-1.0, 1.0], size=(3, tile // block, tile // block))
    t = np.repeat(np.repeat(cells, block, axis=1), block, axis=2)
    reps = size // tile
    return np.tile(t, (1, reps, reps))


def synthesize(n, seed, part=0, *, classes=10, template_amp=0.12,
               texture_amp=6 / 255, background_amp=0.06, noise_std=0.04,
               distractor_lo=0.6, distractor_hi=1.2):
    """Deterministic labeled uint8 images, [n,3,32,32] plus labels.

    Class identity is carried twice. A smooth template at `template_amp`
    survives bounded perturbations, but every image also carries a
    distractor template of another class (mixing factor in
    [distractor_lo, distractor_hi]), so template margins vary from
    comfortable to thin. A tiled +-texture at `texture_amp` is near-perfectly
    predictive on clean data yet erasable within an 8/255 budget (and
    largely replaceable by another class's texture). Standard training
    latches onto the texture and collapses under attack; adversarial
    training is forced onto the templates.

    Class definitions depend only on `seed`; `part` varies the sample draws
    so that train/test splits share one task.
    """
    tmpl_rng = np.random.default_rng(np.random.SeedSequence([0xD0A7A, seed]))
    templates = np.stack([_smooth_field(tmpl_rng) for _ in range(classes)])
    textures = np.stack([_tiled_texture(tmpl_rng) for _ in range(classes)])
    rng = np.random.default_rng(np.random.SeedSequence([0xD0A7A, seed, part]))
    labels = rng.integers(0, classes, size=n)
    images = np.empty((n, 3, 32, 32), dtype=np.uint8)
    for i, y in enumerate(labels):
        gain = rng.uniform(0.8, 1.2)
        other = (y + rng.integers(1, classes)) % classes
        mix = rng.uniform(distractor_lo, distractor_hi)
        img = (
            0.5
            + background_amp * _smooth_field(rng)
            + template_amp * (gain * templates[y] + mix * templates[other])
            + texture_amp * textures[y]
            + noise_std * rng.normal(size=(3, 32, 32))
        )
        images[i] = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return images, labels.astype(np.int64)


def write_cifar_batches(root, train_images, train_labels, test_images,
                        test_labels):
    """Write uint8 image/label arrays in the standard binary layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)

    def write(path, imgs, labs):
        rec = np.empty((len(labs), RECORD_BYTES), dtype=np.uint8)
        rec[:, 0] = labs
        rec[:, 1:] = imgs.reshape(len(labs), -1)
        rec.tofile(path)

    per = 10000
    n = len(train_labels)
    for bi, start in enumerate(range(0, n, per)):
        if bi >= len(TRAIN_FILES):
            raise ValueError("synthetic training split exceeds 50k records")
        sl = slice(start, min(start + per, n))
        write(root / TRAIN_FILES[bi], train_images[sl], train_labels[sl])
    write(root / TEST_FILE, test_images, test_labels)
    return root


def make_synthetic_cifar(root, n_train=10000, n_test=2000, seed=7, **kwargs):
    """Generate and write the synthetic dataset; returns the directory."""
    tx, ty = synthesize(n_train, seed, part=1, **kwargs)
    vx, vy = synthesize(n_test, seed, part=2, **kwargs)
    return write_cifar_batches(root, tx, ty, vx, vy)

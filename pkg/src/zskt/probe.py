"""Decision-boundary belief probe: transition curves, the mean transition
error, and the uniform-noise prediction audit.

A transition curve tracks two networks' class-j probabilities while an image
is pushed across network A's decision boundary: starting from a test image
both nets classify as i, take K gradient steps on x minimizing network A's
cross-entropy against target class j (raw gradient, not its sign), recording
both nets' full output vectors before each update. The mean transition error
averages |p_j^A - p_j^B| over steps, then target classes, then images.

All (image, target) pairs march in one batch: the cross-entropy is summed
over rows, which keeps per-row input gradients independent, so one backward
pass per step drives every curve at once.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .errors import ConfigError, DataError


@dataclass
class ProbeConfig:
    """Adversarial stepping parameters; defaults follow the reference probe."""

    k_steps: int = 100
    xi: float = 1.0
    n_test: int = 1000
    seed: int = 0
    clamp: tuple = None     # optional (lo, hi) pixel clamp per step, off by default
    chunk: int = 256        # rows per forward/backward chunk

    def __post_init__(self):
        if self.k_steps < 1:
            raise ConfigError(f"probe: k_steps must be >= 1, got {self.k_steps}")
        if self.xi <= 0:
            raise ConfigError(f"probe: xi must be > 0, got {self.xi}")
        if self.n_test < 1:
            raise ConfigError(f"probe: n_test must be >= 1, got {self.n_test}")


@dataclass
class TransitionCurve:
    """K-step record of both networks' outputs for one (image, target) pair."""

    image_id: int
    source_class: int
    target_class: int
    p_a: np.ndarray      # (K,) network A's target-class probability per step
    p_b: np.ndarray      # (K,)
    y_a: np.ndarray      # (K, C) full saved output vectors
    y_b: np.ndarray      # (K, C)


@dataclass
class ProbeResult:
    """All curves plus the agreement bookkeeping for the report."""

    curves: list
    agreeing: int
    skipped: int
    k_steps: int
    xi: float


def transition_curves(net_a, net_b, test_data, cfg):
    """Compute every transition curve of net_a/net_b over the test images.

    Images where the two networks' argmax predictions disagree are skipped
    and counted. Each qualifying image yields (C - 1) curves, one per target
    class j != i, each restarted from the original image.
    """
    if net_a.spec.classes != net_b.spec.classes:
        raise ConfigError(f"probe: class counts differ, {net_a.spec.classes} "
                          f"vs {net_b.spec.classes}")
    if net_a.mode != "eval" or net_b.mode != "eval":
        raise ConfigError("probe: both networks must be in eval mode")
    classes = net_a.spec.classes

    n = min(cfg.n_test, len(test_data))
    if n < len(test_data):
        rng = np.random.default_rng(cfg.seed)
        pick = np.sort(rng.choice(len(test_data), size=n, replace=False))
    else:
        pick = np.arange(n)
    images = test_data.inputs[pick]

    with ad.no_grad():
        pred_a = _predict(net_a, images, cfg.chunk)
        pred_b = _predict(net_b, images, cfg.chunk)
    agree = pred_a == pred_b
    skipped = int((~agree).sum())
    if not agree.any():
        warnings.warn("probe: no test images where both networks agree; no curves")
        return ProbeResult([], 0, skipped, cfg.k_steps, cfg.xi)

    # one row per (agreeing image, target class)
    img_ids, sources, targets, rows = [], [], [], []
    for local_idx in np.flatnonzero(agree):
        i = int(pred_a[local_idx])
        for j in range(classes):
            if j == i:
                continue
            img_ids.append(int(pick[local_idx]))
            sources.append(i)
            targets.append(j)
            rows.append(images[local_idx])
    rows = np.stack(rows)
    targets_arr = np.asarray(targets)
    n_rows = len(rows)
    y_a = np.zeros((n_rows, cfg.k_steps, classes))
    y_b = np.zeros((n_rows, cfg.k_steps, classes))

    for start in range(0, n_rows, cfg.chunk):
        stop = min(start + cfg.chunk, n_rows)
        x_adv = rows[start:stop].copy()
        tgt = targets_arr[start:stop]
        for k in range(cfg.k_steps):
            leaf = ad.Tensor(x_adv, requires_grad=True)
            logits_a = net_a.forward(leaf)
            loss = losses.cross_entropy(logits_a, tgt, reduction="sum")
            grad = ad.backward(loss)[leaf.tid]
            with ad.no_grad():
                y_a[start:stop, k] = ad.softmax(ad.Tensor(logits_a.data)).data
                y_b[start:stop, k] = ad.softmax(net_b.forward(ad.Tensor(x_adv))).data
            x_adv -= cfg.xi * grad
            if cfg.clamp is not None:
                np.clip(x_adv, cfg.clamp[0], cfg.clamp[1], out=x_adv)

    curves = []
    for r in range(n_rows):
        curves.append(TransitionCurve(
            image_id=img_ids[r], source_class=sources[r], target_class=targets[r],
            p_a=y_a[r, :, targets[r]].copy(), p_b=y_b[r, :, targets[r]].copy(),
            y_a=y_a[r], y_b=y_b[r]))
    return ProbeResult(curves, int(agree.sum()), skipped, cfg.k_steps, cfg.xi)


def _predict(net, images, chunk):
    preds = []
    for start in range(0, len(images), chunk):
        logits = net.forward(ad.Tensor(images[start:start + chunk]))
        preds.append(logits.data.argmax(axis=1))
    return np.concatenate(preds)


def mte(curves):
    """Mean transition error: |p_j^A - p_j^B| averaged over steps, then
    target classes, then images."""
    if not curves:
        raise DataError("mte: empty curve list")
    by_image = {}
    for c in curves:
        by_image.setdefault(c.image_id, []).append(c)
    per_image = []
    for image_id in sorted(by_image):
        per_curve = [np.abs(c.p_a - c.p_b).mean() for c in by_image[image_id]]
        per_image.append(float(np.mean(per_curve)))
    return float(np.mean(per_image))


def noise_audit(net, n_images, pixel_range=(0, 255), norm_stats=None, seed=0,
                batch=512):
    """Histogram of argmax predictions on discrete uniform pixel noise.

    Pixels are drawn uniformly from the integer grid [lo, hi], scaled to
    [0, 1] and normalized with norm_stats when given. Returns a dict with
    the class histogram, per-class fractions, and the empirical entropy.
    """
    if n_images < 0:
        raise ConfigError(f"noise_audit: n_images must be >= 0, got {n_images}")
    classes = net.spec.classes
    hist = np.zeros(classes, dtype=np.int64)
    rng = np.random.default_rng(seed)
    lo, hi = pixel_range
    mode = net.mode
    net.eval()
    with ad.no_grad():
        for start in range(0, n_images, batch):
            m = min(batch, n_images - start)
            x = rng.integers(lo, hi + 1, size=(m, *net.spec.in_shape)).astype(np.float64)
            x = x / 255.0
            if norm_stats is not None:
                mean, std = norm_stats
                x = (x - mean) / std
            pred = net.forward(ad.Tensor(x)).data.argmax(axis=1)
            hist += np.bincount(pred, minlength=classes)
    net.mode = mode
    frac = hist / n_images if n_images else np.zeros(classes)
    nz = frac[frac > 0]
    ent = float(-(nz * np.log(nz)).sum()) if n_images else 0.0
    return {"hist": hist, "fraction": frac, "entropy": ent}


def save_curves_csv(result, path):
    """Curve records as (image_id, i, j, step, p_j_A, p_j_B) rows."""
    with open(path, "w") as fh:
        fh.write("image_id,i,j,step,p_j_A,p_j_B\n")
        for c in result.curves:
            for k in range(len(c.p_a)):
                fh.write(f"{c.image_id},{c.source_class},{c.target_class},{k},"
                         f"{c.p_a[k]!r},{c.p_b[k]!r}\n")


def format_mte_report(result, value):
    """MTE summary as diff-friendly key=value lines; K and xi always included."""
    lines = [f"mte={value!r}",
             f"k_steps={result.k_steps}",
             f"xi={result.xi!r}",
             f"images_agreeing={result.agreeing}",
             f"images_skipped={result.skipped}",
             f"curves={len(result.curves)}"]
    return "\n".join(lines) + "\n"

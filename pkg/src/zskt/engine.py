"""Zero-shot knowledge transfer: the adversarial generator/student loop,
the direct-pseudo-point toy mode, and teacher matching on random noise.

One outer iteration of the main loop:

1. sample one noise batch z,
2. n_G generator steps, each recomputing x_p = G(z) and minimizing
   L_G = -KL(T(x_p) || S(x_p)) (plus optional extra terms),
3. n_S student steps on the x_p produced by the final generator forward
   (held fixed, teacher outputs cached) minimizing
   L_S = KL + beta * attention distance,
4. cosine learning-rate decay, stepped once per outer iteration.

The teacher stays in eval mode and its parameters are never touched. Every
iteration appends a telemetry record (losses, mean max-probabilities, the
teacher-argmax class histogram on pseudo data, learning rate).
"""

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from . import optim
from .errors import ConfigError, NaNLossError
from .nets import build_classifier, build_generator

NOISE_KINDS = ("uniform-pixel", "gaussian")


@dataclass
class ZeroShotConfig:
    """Hyperparameters of the transfer loop; defaults follow the image runs."""

    n_outer: int = 1000
    n_g: int = 1
    n_s: int = 10
    lr: float = 2e-3
    beta: float = 250.0
    z_dim: int = 100
    batch: int = 128
    extras: tuple = ()
    seed: int = 0
    divergence: str = "forward-kl"
    resample_z: bool = False       # resample z inside the generator loop
    schedule_per_step: bool = False  # decay per gradient step instead

    def __post_init__(self):
        for name in ("n_outer", "n_g", "n_s", "z_dim", "batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"zero-shot config: {name} must be >= 1, got {getattr(self, name)}")
        if self.beta < 0:
            raise ConfigError(f"zero-shot config: beta must be >= 0, got {self.beta}")
        if self.lr <= 0:
            raise ConfigError(f"zero-shot config: lr must be > 0, got {self.lr}")


@dataclass
class PseudoBatch:
    """A generator output batch and the noise that produced it."""

    x_p: np.ndarray
    z: np.ndarray


@dataclass
class Telemetry:
    """Per-outer-iteration training records plus run-level wall time."""

    classes: int
    records: list = field(default_factory=list)
    wall_time: float = 0.0
    last_pseudo: PseudoBatch = None

    def append(self, it, l_g, l_s, t_maxprob, s_maxprob, lr, hist):
        self.records.append({"iter": it, "L_G": l_g, "L_S": l_s,
                             "t_maxprob": t_maxprob, "s_maxprob": s_maxprob,
                             "lr": lr, "hist": np.asarray(hist, dtype=np.int64)})

    def to_csv(self, path):
        cols = ["iter", "L_G", "L_S", "t_maxprob", "s_maxprob", "lr"]
        cols += [f"class_{c}" for c in range(self.classes)]
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for r in self.records:
                row = [str(r["iter"])] + [repr(float(r[k])) for k in
                                          ("L_G", "L_S", "t_maxprob", "s_maxprob", "lr")]
                row += [str(int(v)) for v in r["hist"]]
                fh.write(",".join(row) + "\n")


@dataclass
class PseudoPointSet:
    """Directly optimized toy pseudo points with trajectory snapshots."""

    points: np.ndarray
    snapshots: list = field(default_factory=list)   # (iteration, P x 2 array)
    wall_time: float = 0.0

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("snapshot,point_id,x,y\n")
            for it, pts in self.snapshots:
                for pid, (x, y) in enumerate(pts):
                    fh.write(f"{it},{pid},{x!r},{y!r}\n")


def state_digest(net):
    """SHA-1 over all parameter and buffer bytes; order-stable."""
    h = hashlib.sha1()
    for name, arr in net.state():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def evaluate_accuracy(net, ds, batch=512):
    """Argmax accuracy of an eval-mode forward pass over a dataset."""
    mode = net.mode
    net.eval()
    hits = 0
    with ad.no_grad():
        for start in range(0, len(ds), batch):
            xb = ad.Tensor(ds.inputs[start:start + batch])
            pred = net.forward(xb).data.argmax(axis=1)
            hits += int((pred == ds.labels[start:start + batch]).sum())
    net.mode = mode
    return hits / max(1, len(ds))


def _grad_list(loss, params, what, it):
    if not np.isfinite(loss.data):
        raise NaNLossError(f"{what}: loss became non-finite at iteration {it}")
    gmap = ad.backward(loss)
    grads = []
    for p in params:
        grads.append(gmap.get(p.tid, np.zeros_like(p.data)))
        p.grad = None
    return grads


def _freeze(net):
    for _, p in net.parameters():
        p.requires_grad = False


def _constant_acts(acts):
    """Deep-copy an ActivationSet into graph-free constant tensors."""
    from .nets import ActivationSet
    blocks = [(name, ad.Tensor(t.data.copy())) for name, t in acts.blocks]
    return ActivationSet(blocks=blocks, penultimate=ad.Tensor(acts.penultimate.data.copy()))


def _augment(x_p, aug, rng):
    """Differentiable input augmentation for the consistency extra."""
    kind, amount = aug
    if kind == "gaussian-noise":
        eps = rng.normal(scale=amount, size=x_p.shape)
        return ad.add(x_p, ad.Tensor(eps))
    # gaussian-blur: fixed separable kernel applied per channel
    k = int(amount)
    if k % 2 == 0 or k < 1:
        raise ConfigError(f"gaussian-blur kernel size must be odd and >= 1, got {k}")
    ax = np.arange(k) - (k - 1) / 2.0
    g1 = np.exp(-0.5 * (ax / max(1.0, k / 3.0)) ** 2)
    g2 = np.outer(g1, g1)
    g2 /= g2.sum()
    c = x_p.shape[1]
    kernel = np.zeros((c, c, k, k))
    for i in range(c):
        kernel[i, i] = g2
    return ad.conv2d(x_p, ad.Tensor(kernel), stride=1, pad=(k - 1) // 2)


def _check_teacher(teacher, classes):
    if teacher.mode != "eval":
        raise ConfigError("teacher must be in eval mode")
    if teacher.spec.classes != classes:
        raise ConfigError(f"class-count mismatch: teacher has {teacher.spec.classes}, "
                          f"student spec has {classes}")


def run_zero_shot(teacher, student_spec, gen_spec, cfg):
    """Adversarial zero-shot transfer; returns (eval-mode student, Telemetry).

    gen_spec may be a generator NetSpec or None to use the defaults for the
    teacher's input shape.
    """
    _check_teacher(teacher, student_spec.classes)
    t0 = time.time()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    student = build_classifier(student_spec, seeds[0])
    if gen_spec is None:
        generator = build_generator(cfg.z_dim, teacher.spec.in_shape, seeds[1])
    else:
        if gen_spec.in_shape[0] != cfg.z_dim:
            raise ConfigError(f"generator z_dim {gen_spec.in_shape[0]} != config z_dim {cfg.z_dim}")
        generator = build_generator(cfg.z_dim, gen_spec.out_shape, seeds[1],
                                    gen_channels=gen_spec.gen_channels,
                                    bounded=gen_spec.bounded, out_scale=gen_spec.out_scale)
    rng = np.random.default_rng(seeds[2])
    _freeze(teacher)

    telemetry = _alternating_loop(teacher, student, generator, None, cfg, rng,
                                  classes=student_spec.classes)
    telemetry.wall_time = time.time() - t0
    return student.eval(), telemetry


def run_toy_direct(teacher, student_spec, n_points, cfg, ring=(1.5, 2.5),
                   snapshot_every=None):
    """Toy-mode transfer: optimize pseudo-point coordinates, no generator.

    Points start uniformly in a ring outside the data region (radii in
    `ring`). Returns (eval-mode student, PseudoPointSet with snapshots).
    """
    _check_teacher(teacher, student_spec.classes)
    if len(teacher.spec.in_shape) != 1 or teacher.spec.in_shape[0] != 2:
        raise ConfigError(f"toy mode needs a 2-d input teacher, got {teacher.spec.in_shape}")
    if n_points < 1:
        raise ConfigError(f"toy mode needs >= 1 pseudo points, got {n_points}")
    t0 = time.time()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    student = build_classifier(student_spec, seeds[0])
    rng = np.random.default_rng(seeds[1])
    radius = rng.uniform(ring[0], ring[1], size=n_points)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=n_points)
    points = ad.Tensor(np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1),
                       requires_grad=True)
    _freeze(teacher)

    if snapshot_every is None:
        snapshot_every = max(1, cfg.n_outer // 20)
    trajectory = PseudoPointSet(points=points.data, snapshots=[(0, points.data.copy())])

    def on_iteration(it):
        if (it + 1) % snapshot_every == 0 or it + 1 == cfg.n_outer:
            trajectory.snapshots.append((it + 1, points.data.copy()))

    _alternating_loop(teacher, student, None, points, cfg, rng,
                      classes=student_spec.classes, on_iteration=on_iteration)
    trajectory.points = points.data
    if not np.all(np.isfinite(trajectory.points)):
        raise NaNLossError("toy mode: pseudo points became non-finite")
    trajectory.wall_time = time.time() - t0
    return student.eval(), trajectory


def _alternating_loop(teacher, student, generator, points, cfg, rng, classes,
                      on_iteration=None):
    """Shared Algorithm-1 alternation; adversary is a generator or raw points."""
    student.train()
    s_params = [p for _, p in student.parameters()]
    s_state = optim.adam_state(s_params)
    if generator is not None:
        generator.train()
        g_params = [p for _, p in generator.parameters()]
    else:
        g_params = [points]
    g_state = optim.adam_state(g_params)

    has_consistency = any(e.kind == "consistency" for e in cfg.extras)
    telemetry = Telemetry(classes=classes)
    steps_per_outer = cfg.n_g + cfg.n_s
    global_step = 0

    for it in range(cfg.n_outer):
        lr_t = optim.cosine_lr(it, cfg.n_outer, cfg.lr)
        z = rng.normal(size=(cfg.batch, cfg.z_dim)) if generator is not None else None

        x_p_data = None
        t_logits_c = t_acts_c = None
        l_g_value = None
        for g_i in range(cfg.n_g):
            if cfg.schedule_per_step:
                lr_t = optim.cosine_lr(global_step, cfg.n_outer * steps_per_outer, cfg.lr)
            if generator is not None:
                if cfg.resample_z and g_i > 0:
                    z = rng.normal(size=(cfg.batch, cfg.z_dim))
                x_p = generator(ad.Tensor(z))
            else:
                x_p = points
            t_logits, t_acts = teacher.forward_with_activations(x_p)
            s_logits, s_acts = student.forward_with_activations(x_p)
            t_aug_logits = None
            if has_consistency:
                aug = next(e.augmentation for e in cfg.extras if e.kind == "consistency")
                t_aug_logits = teacher.forward(_augment(x_p, aug, rng))
            l_g = losses.generator_loss(t_logits, s_logits, extras=cfg.extras,
                                        t_acts=t_acts, t_aug_logits=t_aug_logits,
                                        divergence_kind=cfg.divergence)
            # cache the pre-update forward: the student phase trains on it
            x_p_data = x_p.data.copy()
            t_logits_c = ad.Tensor(t_logits.data.copy())
            t_acts_c = _constant_acts(t_acts)
            l_g_value = float(l_g.data)
            grads = _grad_list(l_g, g_params, "generator step", it)
            optim.adam_step(g_params, grads, g_state, lr_t)
            global_step += 1

        x_p_fixed = ad.Tensor(x_p_data)
        l_s_value = None
        s_maxprob = None
        for s_i in range(cfg.n_s):
            if cfg.schedule_per_step:
                lr_t = optim.cosine_lr(global_step, cfg.n_outer * steps_per_outer, cfg.lr)
            s_logits, s_acts = student.forward_with_activations(x_p_fixed)
            l_s = losses.student_loss(t_logits_c, s_logits, t_acts_c, s_acts,
                                      beta=cfg.beta, divergence_kind=cfg.divergence)
            if s_i == 0:
                l_s_value = float(l_s.data)
                with ad.no_grad():
                    s_maxprob = float(ad.softmax(ad.Tensor(s_logits.data)).data.max(axis=1).mean())
            grads = _grad_list(l_s, s_params, "student step", it)
            optim.adam_step(s_params, grads, s_state, lr_t)
            global_step += 1

        with ad.no_grad():
            t_probs = ad.softmax(t_logits_c).data
        hist = np.bincount(t_probs.argmax(axis=1), minlength=classes)
        telemetry.append(it, l_g_value, l_s_value,
                         float(t_probs.max(axis=1).mean()), s_maxprob, lr_t, hist)
        if on_iteration is not None:
            on_iteration(it)

    if generator is not None:
        telemetry.last_pseudo = PseudoBatch(x_p=x_p_data, z=z.copy())
    return telemetry


def match_on_noise(teacher, student_spec, steps, noise_kind, batch=128,
                   lr=2e-3, seed=0, norm_stats=None):
    """Train a student to match the teacher on fresh random-noise batches.

    No generator, no adversary: each step draws a new noise batch, computes
    L_S with beta=0 (plain forward KL on softmaxed logits) and takes one Adam
    step. uniform-pixel noise draws each pixel from the discrete U(0, 255)
    grid, scales to [0,1] and applies norm_stats when given; gaussian noise
    is standard normal. Returns the eval-mode student.
    """
    _check_teacher(teacher, student_spec.classes)
    if noise_kind not in NOISE_KINDS:
        raise ConfigError(f"noise kind must be one of {NOISE_KINDS}, got '{noise_kind}'")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    seeds = np.random.SeedSequence(seed).spawn(2)
    student = build_classifier(student_spec, seeds[0])
    if steps == 0:
        return student.eval()
    rng = np.random.default_rng(seeds[1])
    student.train()
    s_params = [p for _, p in student.parameters()]
    s_state = optim.adam_state(s_params)
    _freeze(teacher)
    shape = (batch, *teacher.spec.in_shape)

    for step in range(steps):
        if noise_kind == "uniform-pixel":
            x = rng.integers(0, 256, size=shape).astype(np.float64) / 255.0
            if norm_stats is not None:
                mean, std = norm_stats
                x = (x - mean) / std
        else:
            x = rng.standard_normal(shape)
        xb = ad.Tensor(x)
        with ad.no_grad():
            t_logits = ad.Tensor(teacher.forward(xb).data)
        s_logits = student.forward(xb)
        l_s = losses.student_loss(t_logits, s_logits, None, None, beta=0.0)
        grads = _grad_list(l_s, s_params, "noise-matching step", step)
        optim.adam_step(s_params, grads, s_state, optim.cosine_lr(step, steps, lr))
    return student.eval()

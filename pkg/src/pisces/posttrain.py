"""Toy reward-driven post-training of a small conditional denoiser.

The world is deliberately tiny: data points are 2-D, the latent space is
the data space (identity encoder/decoder), and a "video" is the sequence of
four intermediate states of a four-step probability-flow sampler, one frame
per step. Fixed random linear featurizers lift frames to patch tokens; a
frozen per-class token table plays the role of text tokens; a frozen match
head and a frozen trained text-to-video map supply the two rewards.

Two fine-tuning routes share this machinery:

* direct: scalar loss  cd - r_quality - r_semantic  with hand-written
  gradients flowing into the denoiser through the consistency branch and
  through the reward pipeline (featurizers, attention, fusion, pooling,
  cosine). The transport plan inside the semantic reward is a detached
  structural prior: derivatives treat it as a constant.
* grpo: groups of stochastic (SDE) rollouts per prompt, group-standardized
  rewards as advantages, and the clipped importance-ratio objective, plus
  the same consistency term.

Everything is seeded and single-threaded; identical seeds give identical
reports byte for byte.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .costmatrix import CostWeights, PatchGrid, build_cost
from .fusion import DEFAULT_EPS_SMOOTH, fuse, fuse_vjp
from .neural_ot import FeedForwardNet, NotTrainConfig, OtMapArtifact, train_not
from .rewards import VtmHead
from .sinkhorn import PartialOTConfig, solve_partial_ot
from .synth import EmbeddingSet

__all__ = [
    "NoiseSchedule",
    "ToyDenoiser",
    "WorldConfig",
    "ToyWorld",
    "GrpoConfig",
    "RolloutRecord",
    "DirectBatch",
    "TrainReport",
    "build_world",
    "ode_step",
    "single_step_to_zero",
    "consistency_output",
    "cd_loss",
    "ema_update",
    "sample_batch",
    "direct_loss",
    "grpo_advantages",
    "clipped_objective",
    "rollout_group",
    "grpo_loss",
    "run_posttrain",
    "evaluate_heldout",
    "sample_generated",
    "energy_distance",
]

FRAMES = 4  # sampler steps == video frames
N_TOKENS = 4  # text tokens per prompt class


# ---------------------------------------------------------------------------
# noise schedule and samplers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized signal/noise coefficients on an increasing time grid.

    The probability-flow drift is gamma(t) * z + 0.5 * sigma2(t) * eps_hat,
    stored per grid point alongside alpha/beta of the forward marginal
    z_t = alpha(t) z_0 + beta(t) eps.
    """

    times: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    gammas: np.ndarray
    sigma2s: np.ndarray
    k: int = 1

    def __post_init__(self):
        for name in ("times", "alphas", "betas", "gammas", "sigma2s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.times.shape[0]
        if n < 2 or any(
            getattr(self, f).shape != (n,) for f in ("alphas", "betas", "gammas", "sigma2s")
        ):
            raise ValueError("schedule arrays must share one length >= 2")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(np.diff(self.alphas) >= 0) or np.any(self.alphas <= 0):
            raise ValueError("alphas must be positive and strictly decreasing")
        if np.any(np.diff(self.betas) <= 0) or np.any(self.betas <= 0):
            raise ValueError("betas must be positive and strictly increasing")
        if self.alphas[0] < 0.9:
            raise ValueError(f"alpha at the left endpoint should be ~1, got {self.alphas[0]}")
        if not 1 <= self.k < n:
            raise ValueError(f"skipping interval k must lie in [1, {n}), got {self.k}")

    @property
    def n(self) -> int:
        return self.times.shape[0]

    def index_of(self, t: float) -> int:
        hits = np.nonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12))[0]
        if hits.size == 0:
            raise ValueError(f"off-grid: t={t} is not a schedule grid point")
        return int(hits[0])

    @classmethod
    def linear(cls, n: int = 40, k: int = 1, t_min: float = 0.02, t_max: float = 0.90) -> "NoiseSchedule":
        """alpha = 1 - t, beta = t on [t_min, t_max]; the drift coefficients
        follow from differentiating the forward marginal along a trajectory."""
        t = np.linspace(t_min, t_max, n)
        return cls(
            times=t,
            alphas=1.0 - t,
            betas=t,
            gammas=-1.0 / (1.0 - t),
            sigma2s=2.0 / (1.0 - t),
            k=k,
        )


@dataclass
class ToyDenoiser:
    """Noise-prediction net with an EMA copy used as the distillation target."""

    net: FeedForwardNet
    ema: FeedForwardNet
    ema_rate: float = 0.95

    def __post_init__(self):
        if not 0.0 < self.ema_rate <= 1.0:
            raise ValueError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")

    def stack_input(self, z: np.ndarray, prompt_emb, t) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        p = np.asarray(prompt_emb, dtype=np.float64)
        if p.ndim == 1:
            p = np.broadcast_to(p, (z.shape[0], p.shape[0]))
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        return np.column_stack([z, p, tcol])

    def predict(self, z, prompt_emb, t, use_ema: bool = False) -> np.ndarray:
        """Predicted noise; shape follows z (single vector or batch)."""
        z_arr = np.asarray(z, dtype=np.float64)
        net = self.ema if use_ema else self.net
        out, _ = net.forward_tape(self.stack_input(z_arr, prompt_emb, t))
        return out[0] if z_arr.ndim == 1 else out


def _drift(schedule: NoiseSchedule, idx: int, z: np.ndarray, eps_hat: np.ndarray) -> np.ndarray:
    return schedule.gammas[idx] * z + 0.5 * schedule.sigma2s[idx] * eps_hat


def ode_step(z, t_from: float, t_to: float, denoiser: ToyDenoiser, prompt_emb, schedule: NoiseSchedule):
    """One Euler step of the probability-flow dynamics between grid times."""
    i_from = schedule.index_of(t_from)
    schedule.index_of(t_to)  # validates t_to is on the grid
    if t_to > t_from:
        raise ValueError(f"t_to={t_to} must not exceed t_from={t_from}")
    z = np.asarray(z, dtype=np.float64)
    if t_to == t_from:
        return z.copy()
    eps_hat = denoiser.predict(z, prompt_emb, t_from)
    return z + (t_to - t_from) * _drift(schedule, i_from, z, eps_hat)


def single_step_to_zero(z, t: float, denoiser: ToyDenoiser, prompt_emb, schedule: NoiseSchedule):
    """One-jump clean-sample estimate from grid time t. The decoder is the
    identity at this scale, so the returned state is already "pixel space"."""
    i = schedule.index_of(t)
    z = np.asarray(z, dtype=np.float64)
    if t == 0.0:
        return z.copy()
    eps_hat = denoiser.predict(z, prompt_emb, t)
    return z + (0.0 - t) * _drift(schedule, i, z, eps_hat)


def consistency_output(denoiser: ToyDenoiser, z, prompt_emb, t: float, schedule: NoiseSchedule, use_ema: bool = False):
    """Clean-data parameterization built from the noise prediction."""
    i = schedule.index_of(t)
    z = np.asarray(z, dtype=np.float64)
    eps_hat = denoiser.predict(z, prompt_emb, t, use_ema=use_ema)
    return (z - schedule.betas[i] * eps_hat) / schedule.alphas[i]


def cd_loss(denoiser: ToyDenoiser, z_high, z_low_hat, t_high: float, t_low: float, prompt_emb, schedule: NoiseSchedule) -> float:
    """Squared distance between the live net's consistency output at the high
    time and the EMA target's output at the low time (target detached)."""
    g_student = consistency_output(denoiser, z_high, prompt_emb, t_high, schedule, use_ema=False)
    g_target = consistency_output(denoiser, z_low_hat, prompt_emb, t_low, schedule, use_ema=True)
    diff = np.atleast_2d(g_student - g_target)
    return float(np.mean((diff**2).sum(axis=1)))


def ema_update(source: FeedForwardNet, target: FeedForwardNet, rate: float) -> FeedForwardNet:
    """target <- rate * source + (1 - rate) * target, by value (no aliasing)."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"rate must lie in (0, 1], got {rate}")
    for key in target.params:
        target.params[key] = rate * source.params[key] + (1.0 - rate) * target.params[key]
    return target


# ---------------------------------------------------------------------------
# world construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldConfig:
    """Everything needed to rebuild the toy environment deterministically."""

    classes: int = 3
    embed_dim: int = 8
    denoiser_hidden: int = 32
    data_noise: float = 0.45
    center_radius: float = 2.0
    spatial_cells: int = 1  # patch grid is spatial_cells x spatial_cells per frame
    schedule_n: int = 40
    skip: int = 1
    ema_rate: float = 0.95
    seed: int = 0
    pretrain_steps: int = 600
    pretrain_lr: float = 0.02
    pretrain_batch: int = 64
    map_steps: int = 400
    map_inner: int = 5
    map_batch: int = 64
    map_lr: float = 1e-3
    map_hidden: int = 32
    vtm_episodes: int = 300
    vtm_epochs: int = 400
    vtm_lr: float = 0.5

    @classmethod
    def from_json(cls, path) -> "WorldConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


@dataclass
class ToyWorld:
    """Frozen featurizers, token tables, match head, map, and the live denoiser."""

    config: WorldConfig
    schedule: NoiseSchedule
    class_means: np.ndarray  # (C, 2)
    denoiser: ToyDenoiser
    feat_weight: np.ndarray  # (cells, e, 2)
    feat_bias: np.ndarray  # (cells, e)
    text_tokens: np.ndarray  # (C, N_TOKENS, e)
    text_cls: np.ndarray  # (C, e)
    mapped_cls: np.ndarray  # (C, e), text_cls through the frozen map
    vtm: VtmHead
    ot_map: OtMapArtifact | None
    grid: PatchGrid
    cost_weights: CostWeights
    pot_cfg: PartialOTConfig
    step_from_idx: np.ndarray  # (FRAMES,) grid indices where each sampler step starts
    step_to_time: np.ndarray  # (FRAMES,) target time of each step (last one is 0)

    @property
    def classes(self) -> int:
        return self.class_means.shape[0]

    @property
    def cells(self) -> int:
        return self.feat_weight.shape[0]

    @property
    def num_patches(self) -> int:
        return FRAMES * self.cells

    def sample_data(self, n: int, rng: np.random.Generator, cls=None) -> tuple[np.ndarray, np.ndarray]:
        """Draw n points of the class-conditional data distribution."""
        if cls is None:
            cls_arr = rng.integers(0, self.classes, size=n)
        else:
            cls_arr = np.broadcast_to(np.asarray(cls, dtype=np.int64), (n,)).copy()
        x0 = self.class_means[cls_arr] + rng.normal(0.0, self.config.data_noise, size=(n, 2))
        return x0, cls_arr

    def patch_tokens(self, frames: np.ndarray) -> np.ndarray:
        """Lift (b, FRAMES, 2) trajectories to (b, M, e) patch tokens, ordered
        frame-major then cell-major to match the patch grid."""
        b = frames.shape[0]
        toks = np.empty((b, self.num_patches, self.config.embed_dim))
        for f in range(FRAMES):
            for q in range(self.cells):
                toks[:, f * self.cells + q, :] = (
                    frames[:, f, :] @ self.feat_weight[q].T + self.feat_bias[q]
                )
        return toks


def _knot_plan(schedule: NoiseSchedule, steps: int = FRAMES) -> tuple[np.ndarray, np.ndarray]:
    starts = np.unique(np.round(np.linspace(schedule.n - 1, 0, steps)).astype(int))[::-1]
    if starts.shape[0] != steps:
        raise ValueError(f"grid too coarse for {steps} distinct sampler steps")
    to_time = np.append(schedule.times[starts[1:]], 0.0)
    return starts, to_time


def _vanilla_attention(y: np.ndarray, x: np.ndarray) -> np.ndarray:
    logits = y @ x.T / math.sqrt(y.shape[1])
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def _real_frames(world: ToyWorld, x0: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Real-data stand-in for a sampled trajectory: forward-noised copies of
    x0 at the sampler's knot times, cleanest last."""
    b = x0.shape[0]
    frames = np.empty((b, FRAMES, 2))
    sched = world.schedule
    for s, t in enumerate(world.step_to_time[:-1]):
        i = sched.index_of(t)
        frames[:, s, :] = sched.alphas[i] * x0 + sched.betas[i] * rng.normal(size=(b, 2))
    frames[:, FRAMES - 1, :] = x0
    return frames


def build_world(cfg: WorldConfig | None = None) -> ToyWorld:
    """Set up the frozen environment and pre-train the denoiser.

    Order: data geometry and featurizers, misaligned text tokens, denoiser
    pre-training (plain noise-prediction regression), text-to-video map
    training on real-data embeddings, then match-head training on matched
    vs. shuffled (class-swapped) pairs. Featurizers, tokens, map and head
    are frozen afterwards; only the denoiser trains during post-training.
    """
    if cfg is None:
        cfg = WorldConfig()
    rng = np.random.default_rng(cfg.seed)
    schedule = NoiseSchedule.linear(cfg.schedule_n, cfg.skip)
    c = cfg.classes
    e = cfg.embed_dim

    angles = 2.0 * np.pi * np.arange(c) / c
    class_means = cfg.center_radius * np.column_stack([np.cos(angles), np.sin(angles)])

    cells = cfg.spatial_cells * cfg.spatial_cells
    feat_weight = rng.normal(0.0, 1.0 / math.sqrt(2.0), size=(cells, e, 2))
    feat_bias = rng.normal(0.0, 0.1, size=(cells, e))

    # per-class text tokens: video-feature prototypes pushed through a fixed
    # random rotation plus offset, i.e. structurally related but misaligned
    jitter = rng.normal(0.0, cfg.data_noise, size=(c, N_TOKENS, 2))
    proto = np.empty((c, N_TOKENS, e))
    for ci in range(c):
        pts = class_means[ci][None, :] + jitter[ci]
        proto[ci] = np.mean(
            [pts @ feat_weight[q].T + feat_bias[q] for q in range(cells)], axis=0
        )
    rot_q, rot_r = np.linalg.qr(rng.normal(size=(e, e)))
    rot = rot_q * np.sign(np.diag(rot_r))[None, :]
    offset = rng.normal(0.0, 1.0, size=e)
    offset *= 3.0 / np.linalg.norm(offset)
    text_tokens = proto @ rot.T + offset
    text_cls = text_tokens.mean(axis=1)

    net = FeedForwardNet.create(2 + e + 1, cfg.denoiser_hidden, 2, rng)
    denoiser = ToyDenoiser(net=net, ema=net.copy(), ema_rate=cfg.ema_rate)

    step_from_idx, step_to_time = _knot_plan(schedule)
    world = ToyWorld(
        config=cfg,
        schedule=schedule,
        class_means=class_means,
        denoiser=denoiser,
        feat_weight=feat_weight,
        feat_bias=feat_bias,
        text_tokens=text_tokens,
        text_cls=text_cls,
        mapped_cls=np.zeros_like(text_cls),
        vtm=VtmHead(np.zeros((2, e)), np.zeros(2)),
        ot_map=None,
        grid=PatchGrid.regular(FRAMES, cfg.spatial_cells, cfg.spatial_cells),
        cost_weights=CostWeights(),
        pot_cfg=PartialOTConfig(),
        step_from_idx=step_from_idx,
        step_to_time=step_to_time,
    )

    _pretrain_denoiser(world, rng)
    _train_world_map(world, rng)
    _train_world_vtm(world, rng)
    return world


def _pretrain_denoiser(world: ToyWorld, rng: np.random.Generator):
    """Standard noise-prediction regression so post-training starts from a
    roughly usable sampler rather than random weights."""
    cfg = world.config
    sched = world.schedule
    net = world.denoiser.net
    for _ in range(cfg.pretrain_steps):
        x0, cls = world.sample_data(cfg.pretrain_batch, rng)
        idx = rng.integers(0, sched.n, size=cfg.pretrain_batch)
        eps = rng.normal(size=(cfg.pretrain_batch, 2))
        z_t = sched.alphas[idx, None] * x0 + sched.betas[idx, None] * eps
        x_in = np.column_stack([z_t, world.text_cls[cls], sched.times[idx]])
        pred, tape = net.forward_tape(x_in)
        net.zero_grads()
        net.backward_tape(tape, 2.0 * (pred - eps) / cfg.pretrain_batch)
        net.sgd_step(cfg.pretrain_lr)
    world.denoiser.ema = net.copy()


def _train_world_map(world: ToyWorld, rng: np.random.Generator):
    cfg = world.config
    x0, _ = world.sample_data(256, rng)
    real = world.patch_tokens(_real_frames(world, x0, rng))
    video_pop = real.mean(axis=1)  # per-trajectory summary embeddings
    text_pop = np.vstack([world.text_tokens.reshape(-1, cfg.embed_dim), world.text_cls])
    not_cfg = NotTrainConfig(
        inner_iters=cfg.map_inner,
        steps=cfg.map_steps,
        batch=cfg.map_batch,
        lr_map=cfg.map_lr,
        lr_potential=cfg.map_lr,
        hidden=cfg.map_hidden,
        seed=int(rng.integers(0, 2**31 - 1)),
    )
    world.ot_map = train_not(
        EmbeddingSet("text", text_pop), EmbeddingSet("video", video_pop), not_cfg
    )
    world.mapped_cls = world.ot_map.apply(world.text_cls)


def _train_world_vtm(world: ToyWorld, rng: np.random.Generator):
    """Logistic head on pipeline features of matched vs class-shuffled pairs."""
    cfg = world.config
    feats = []
    labels = []
    for _ in range(cfg.vtm_episodes):
        cls = int(rng.integers(0, world.classes))
        x0, _ = world.sample_data(1, rng, cls=cls)
        toks = world.patch_tokens(_real_frames(world, x0, rng))[0]
        wrong = int((cls + 1 + rng.integers(0, world.classes - 1)) % world.classes)
        for text_idx, label in ((cls, 1), (wrong, 0)):
            y = world.text_tokens[text_idx]
            a = _vanilla_attention(y, toks)
            cost = build_cost(y, toks, a, world.grid, world.cost_weights)
            plan = solve_partial_ot(cost, world.pot_cfg)
            fused = fuse(a, plan, DEFAULT_EPS_SMOOTH)
            feats.append((fused.A_tilde @ toks).mean(axis=0))
            labels.append(label)
    f = np.asarray(feats)
    onehot = np.eye(2)[np.asarray(labels)]
    w = np.zeros((2, f.shape[1]))
    b = np.zeros(2)
    n = f.shape[0]
    for _ in range(cfg.vtm_epochs):
        logits = f @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= cfg.vtm_lr * delta.T @ f
        b -= cfg.vtm_lr * delta.sum(axis=0)
    world.vtm = VtmHead(w, b)


# ---------------------------------------------------------------------------
# differentiable trajectory + reward pipeline
# ---------------------------------------------------------------------------


def _trajectory_forward(world: ToyWorld, z0: np.ndarray, prompt_embs: np.ndarray, step_noise=None, want_tapes: bool = False):
    """Run the fixed sampler from initial noise; optionally Gaussian-perturb
    each Euler mean (SDE rollouts) and/or keep tapes for backprop.

    Returns (frames (b, FRAMES, 2), tapes, means (b, FRAMES, 2)).
    """
    sched = world.schedule
    net = world.denoiser.net
    b = z0.shape[0]
    frames = np.empty((b, FRAMES, 2))
    means = np.empty((b, FRAMES, 2))
    tapes = []
    z = z0
    for s in range(FRAMES):
        i = int(world.step_from_idx[s])
        dt = float(world.step_to_time[s] - sched.times[i])
        x_in = np.column_stack([z, prompt_embs, np.full(b, sched.times[i])])
        eps_hat, tape = net.forward_tape(x_in)
        if want_tapes:
            tapes.append((tape, i, dt))
        mean = z + dt * (sched.gammas[i] * z + 0.5 * sched.sigma2s[i] * eps_hat)
        means[:, s, :] = mean
        z = mean if step_noise is None else mean + step_noise[:, s, :]
        frames[:, s, :] = z
    return frames, tapes, means


def _trajectory_backward(world: ToyWorld, tapes, dframes: np.ndarray):
    """Chain reward gradients on the frames back through the Euler steps into
    the denoiser's gradient buffers (accumulating)."""
    sched = world.schedule
    net = world.denoiser.net
    dz = np.zeros_like(dframes[:, 0, :])
    for s in reversed(range(FRAMES)):
        tape, i, dt = tapes[s]
        dz_total = dframes[:, s, :] + dz
        dinput = net.backward_tape(tape, dz_total * (0.5 * sched.sigma2s[i] * dt))
        dz = dz_total * (1.0 + dt * sched.gammas[i]) + dinput[:, :2]


def _reward_forward(world: ToyWorld, frames: np.ndarray, cls: np.ndarray, plans=None):
    """Dual rewards for a batch of trajectories.

    Returns (r_quality (b,), r_semantic (b,), cache); the cache carries the
    per-sample intermediates `_reward_backward` needs, including the
    transport plans actually used (so callers can pin them).
    """
    toks = world.patch_tokens(frames)
    b = frames.shape[0]
    rq = np.empty(b)
    rs = np.empty(b)
    cache = []
    for i in range(b):
        x = toks[i]
        y = world.text_tokens[cls[i]]
        a = _vanilla_attention(y, x)
        if plans is None:
            cost = build_cost(y, x, a, world.grid, world.cost_weights)
            plan = solve_partial_ot(cost, world.pot_cfg).plan
        else:
            plan = plans[i]
        fused = fuse(a, plan, DEFAULT_EPS_SMOOTH).A_tilde
        feat = (fused @ x).mean(axis=0)
        logits = world.vtm.logits(feat)
        logits = logits - logits.max()
        p = np.exp(logits)
        p /= p.sum()
        rs[i] = p[1]

        xcls = x.mean(axis=0)
        target = world.mapped_cls[cls[i]]
        nx = float(np.linalg.norm(xcls))
        nt = float(np.linalg.norm(target))
        rq[i] = float(target @ xcls / (nt * nx))
        cache.append(
            {
                "x": x,
                "y": y,
                "a": a,
                "plan": plan,
                "fused": fused,
                "p": p,
                "xcls": xcls,
                "target": target,
                "nx": nx,
                "nt": nt,
            }
        )
    return rq, rs, cache


def _reward_backward(world: ToyWorld, cache, drq: np.ndarray, drs: np.ndarray) -> np.ndarray:
    """Gradient of sum_i (drq_i * rq_i + drs_i * rs_i) w.r.t. the frames.

    The transport plan is held fixed (detached prior); attention, fusion,
    pooling, the match head and the cosine are differentiated exactly.
    """
    b = len(cache)
    e = world.config.embed_dim
    scale = 1.0 / math.sqrt(e)
    dframes = np.zeros((b, FRAMES, 2))
    for i, cc in enumerate(cache):
        x, y, a, plan, fused, p = cc["x"], cc["y"], cc["a"], cc["plan"], cc["fused"], cc["p"]
        dx = np.zeros_like(x)

        # semantic: softmax head -> mean pool -> fused pooling -> fusion -> attention
        dlogits = drs[i] * p[1] * (np.array([0.0, 1.0]) - p)
        dfeat = world.vtm.weight.T @ dlogits
        dpooled = np.broadcast_to(dfeat / N_TOKENS, (N_TOKENS, e))
        d_fused = dpooled @ x.T
        dx += fused.T @ dpooled
        da = fuse_vjp(a, plan, DEFAULT_EPS_SMOOTH, d_fused)
        datt_logits = a * (da - (da * a).sum(axis=1, keepdims=True))
        dx += datt_logits.T @ y * scale

        # quality: cosine against the fixed mapped text summary
        xcls, target, nx, nt = cc["xcls"], cc["target"], cc["nx"], cc["nt"]
        cos_val = float(target @ xcls / (nt * nx))
        dxcls = drq[i] * (target / (nt * nx) - cos_val * xcls / (nx * nx))
        dx += dxcls[None, :] / x.shape[0]

        for f in range(FRAMES):
            for q in range(world.cells):
                dframes[i, f, :] += world.feat_weight[q].T @ dx[f * world.cells + q]
    return dframes


# ---------------------------------------------------------------------------
# direct route
# ---------------------------------------------------------------------------


@dataclass
class DirectBatch:
    """All randomness a direct-loss evaluation consumes, drawn up front."""

    cls: np.ndarray  # (b,)
    x0: np.ndarray  # (b, 2)
    n_idx: np.ndarray  # (b,) low grid index of the consistency pair
    noise: np.ndarray  # (b, 2) forward-noising draw
    gen_noise: np.ndarray  # (b, 2) initial noise of the reward trajectory


def sample_batch(world: ToyWorld, rng: np.random.Generator, size: int) -> DirectBatch:
    x0, cls = world.sample_data(size, rng)
    return DirectBatch(
        cls=cls,
        x0=x0,
        n_idx=rng.integers(0, world.schedule.n - world.schedule.k, size=size),
        noise=rng.normal(size=(size, 2)),
        gen_noise=rng.normal(size=(size, 2)),
    )


def _cd_branch(world: ToyWorld, batch: DirectBatch, want_grads: bool = False) -> float:
    """Consistency term on the noised data latent; optionally accumulates its
    gradient (live branch only; the EMA target contributes none)."""
    sched = world.schedule
    net = world.denoiser.net
    b = batch.x0.shape[0]
    prompt = world.text_cls[batch.cls]
    hi = batch.n_idx + sched.k
    lo = batch.n_idx
    z_hi = sched.alphas[hi, None] * batch.x0 + sched.betas[hi, None] * batch.noise
    x_in = np.column_stack([z_hi, prompt, sched.times[hi]])
    eps_hi, tape_hi = net.forward_tape(x_in)
    drift = sched.gammas[hi, None] * z_hi + 0.5 * sched.sigma2s[hi, None] * eps_hi
    z_lo_hat = z_hi + (sched.times[lo] - sched.times[hi])[:, None] * drift  # teacher, detached
    g_student = (z_hi - sched.betas[hi, None] * eps_hi) / sched.alphas[hi, None]
    eps_lo = world.denoiser.predict(z_lo_hat, prompt, sched.times[lo], use_ema=True)
    g_target = (z_lo_hat - sched.betas[lo, None] * eps_lo) / sched.alphas[lo, None]
    cd_vec = ((g_student - g_target) ** 2).sum(axis=1)
    if want_grads:
        dg = 2.0 * (g_student - g_target) / b
        net.backward_tape(tape_hi, dg * (-sched.betas[hi, None] / sched.alphas[hi, None]))
    return float(cd_vec.mean())


def _group_normalize(values: np.ndarray, groups: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standardize values within equal-group slices; returns (normalized,
    per-element 1/std weights, zero where a group is degenerate)."""
    normed = np.zeros_like(values)
    weights = np.zeros_like(values)
    for g in np.unique(groups):
        sel = groups == g
        if sel.sum() < 2:
            continue
        std = float(values[sel].std())
        if std < 1e-12:
            continue
        normed[sel] = (values[sel] - values[sel].mean()) / std
        weights[sel] = 1.0 / std
    return normed, weights


def _direct_parts(world: ToyWorld, batch: DirectBatch, use_cd: bool = True, adaptive: bool = False, want_grads: bool = False, plans=None):
    """Shared forward (and optional backward) pass of the direct objective.

    With want_grads the denoiser's gradient buffers are zeroed and filled
    with d(loss)/d(theta). `plans` pins the transport plans so that finite
    differences probe exactly the objective the analytic gradient
    differentiates (the plan is a detached prior by construction).
    """
    net = world.denoiser.net
    b = batch.x0.shape[0]
    if want_grads:
        net.zero_grads()

    cd = _cd_branch(world, batch, want_grads=want_grads and use_cd)

    prompt = world.text_cls[batch.cls]
    frames, tapes, _ = _trajectory_forward(world, batch.gen_noise, prompt, want_tapes=want_grads)
    rq, rs, cache = _reward_forward(world, frames, batch.cls, plans=plans)

    if adaptive:
        rq_term, wq = _group_normalize(rq, batch.cls)
        rs_term, ws = _group_normalize(rs, batch.cls)
    else:
        rq_term, wq = rq, np.ones(b)
        rs_term, ws = rs, np.ones(b)

    loss = float(((cd if use_cd else 0.0) - rq_term.mean() - rs_term.mean()))

    if want_grads:
        dframes = _reward_backward(world, cache, -wq / b, -ws / b)
        _trajectory_backward(world, tapes, dframes)

    plans_used = [cc["plan"] for cc in cache]
    return loss, cd, float(rq.mean()), float(rs.mean()), plans_used


def direct_loss(world: ToyWorld, batch: DirectBatch, use_cd: bool = True, plans=None) -> float:
    """Scalar objective: consistency term minus the two rewards (batch mean)."""
    loss, _, _, _, _ = _direct_parts(world, batch, use_cd=use_cd, plans=plans)
    return loss


# ---------------------------------------------------------------------------
# grpo route
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GrpoConfig:
    """Group rollout settings for the clipped-ratio objective."""

    group: int = 8
    clip: float = 0.2
    timesteps: int = FRAMES
    sde_scale: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.group < 2:
            raise ValueError(f"group size must be >= 2, got {self.group}")
        if not 0.0 < self.clip < 1.0:
            raise ValueError(f"clip must lie in (0, 1), got {self.clip}")
        if self.timesteps != FRAMES:
            raise ValueError(f"timesteps must equal the sampler's {FRAMES} steps")
        if not self.sde_scale > 0:
            raise ValueError(f"sde_scale must be > 0, got {self.sde_scale}")


@dataclass
class RolloutRecord:
    """One prompt's group of SDE rollouts with everything the loss needs."""

    cls: int
    prompt_emb: np.ndarray  # (e,)
    states: np.ndarray  # (G, T, 2) state entering each transition
    actions: np.ndarray  # (G, T, 2) state after each transition
    old_logp: np.ndarray | None  # (G, T)
    rewards: np.ndarray  # (G,)
    advantages: np.ndarray  # (G,)
    reward_parts: np.ndarray  # (G, 2) quality/semantic split, for reporting
    from_idx: np.ndarray  # (T,)
    to_times: np.ndarray  # (T,)
    sde_scale: float


def grpo_advantages(rewards) -> np.ndarray:
    """Group-standardized rewards: subtract the mean, divide by the
    population std; all zeros when the group is (numerically) constant."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError(f"need a group of at least 2 rewards, got shape {r.shape}")
    std = float(r.std())
    if std < 1e-12:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def clipped_objective(rho, adv, clip: float):
    """Elementwise max(-rho * A, -clip(rho, 1-eps, 1+eps) * A)."""
    rho = np.asarray(rho, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.maximum(-rho * adv, -np.clip(rho, 1.0 - clip, 1.0 + clip) * adv)


def _gaussian_logp(action: np.ndarray, mean: np.ndarray, scale: float) -> np.ndarray:
    d = action.shape[-1]
    return -((action - mean) ** 2).sum(axis=-1) / (2.0 * scale**2) - 0.5 * d * math.log(
        2.0 * math.pi * scale**2
    )


def rollout_group(world: ToyWorld, cls: int, cfg: GrpoConfig, rng: np.random.Generator) -> RolloutRecord:
    """Sample a group of SDE trajectories for one prompt under the current
    policy, recording states, actions, transition log-densities, rewards and
    group-relative advantages."""
    g = cfg.group
    prompt = world.text_cls[cls]
    prompts = np.broadcast_to(prompt, (g, prompt.shape[0]))
    z0 = rng.normal(size=(g, 2))
    step_noise = cfg.sde_scale * rng.normal(size=(g, FRAMES, 2))
    frames, _, means = _trajectory_forward(world, z0, prompts, step_noise=step_noise)

    states = np.empty((g, FRAMES, 2))
    states[:, 0, :] = z0
    states[:, 1:, :] = frames[:, :-1, :]
    actions = frames.copy()
    old_logp = np.stack(
        [_gaussian_logp(actions[:, s, :], means[:, s, :], cfg.sde_scale) for s in range(FRAMES)],
        axis=1,
    )
    cls_arr = np.full(g, cls, dtype=np.int64)
    rq, rs, _ = _reward_forward(world, frames, cls_arr)
    rewards = rq + rs
    return RolloutRecord(
        cls=cls,
        prompt_emb=prompt.copy(),
        states=states,
        actions=actions,
        old_logp=old_logp,
        rewards=rewards,
        advantages=grpo_advantages(rewards),
        reward_parts=np.column_stack([rq, rs]),
        from_idx=world.step_from_idx.copy(),
        to_times=world.step_to_time.copy(),
        sde_scale=cfg.sde_scale,
    )


def grpo_loss(rollouts: RolloutRecord, world: ToyWorld, cfg: GrpoConfig, want_grads: bool = False) -> float:
    """Clipped importance-ratio objective averaged over group and timesteps.

    Per-step transition densities are Gaussians around the current policy's
    Euler mean with the rollout's fixed scale. With want_grads, gradients
    are accumulated into the denoiser's buffers (advantages are constants).
    """
    if rollouts.old_logp is None:
        raise ValueError("rollout record is missing old-policy log-densities")
    sched = world.schedule
    net = world.denoiser.net
    g, t_steps = rollouts.old_logp.shape
    adv = rollouts.advantages
    total = 0.0
    for s in range(t_steps):
        i = int(rollouts.from_idx[s])
        dt = float(rollouts.to_times[s] - sched.times[i])
        z = rollouts.states[:, s, :]
        prompts = np.broadcast_to(rollouts.prompt_emb, (g, rollouts.prompt_emb.shape[0]))
        x_in = np.column_stack([z, prompts, np.full(g, sched.times[i])])
        eps_hat, tape = net.forward_tape(x_in)
        mean = z + dt * (sched.gammas[i] * z + 0.5 * sched.sigma2s[i] * eps_hat)

        logp = _gaussian_logp(rollouts.actions[:, s, :], mean, rollouts.sde_scale)
        rho = np.exp(logp - rollouts.old_logp[:, s])
        unclipped = -rho * adv
        clipped = -np.clip(rho, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
        total += float(np.maximum(unclipped, clipped).mean())
        if want_grads:
            in_window = (rho > 1.0 - cfg.clip) & (rho < 1.0 + cfg.clip)
            drho = np.where(unclipped >= clipped, -adv, -adv * in_window)
            dlogp = drho * rho / (g * t_steps)
            dmean = dlogp[:, None] * (rollouts.actions[:, s, :] - mean) / rollouts.sde_scale**2
            net.backward_tape(tape, dmean * (0.5 * sched.sigma2s[i] * dt))
    return total / t_steps


# ---------------------------------------------------------------------------
# training loop, evaluation, reports
# ---------------------------------------------------------------------------


@dataclass
class TrainReport:
    """Per-step records plus the run's identifying settings."""

    mode: str
    steps: int
    seed: int
    records: list[dict] = field(default_factory=list)

    def save_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True))
                fh.write("\n")

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "seed": self.seed,
            "initial_heldout": self.records[0]["heldout_reward"],
            "final_heldout": self.records[-1]["heldout_reward"],
        }


def evaluate_heldout(world: ToyWorld, z0: np.ndarray, cls: np.ndarray) -> tuple[float, float]:
    """Mean rewards of deterministic generations from the given noise draws."""
    prompts = world.text_cls[cls]
    frames, _, _ = _trajectory_forward(world, z0, prompts)
    rq, rs, _ = _reward_forward(world, frames, cls)
    return float(rq.mean()), float(rs.mean())


def sample_generated(world: ToyWorld, n: int, rng: np.random.Generator) -> np.ndarray:
    """Final sampler states for n generations, classes cycled evenly."""
    cls = np.arange(n) % world.classes
    prompts = world.text_cls[cls]
    frames, _, _ = _trajectory_forward(world, rng.normal(size=(n, 2)), prompts)
    return frames[:, -1, :]


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    """Empirical energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic)."""

    def mean_cross(a, b):
        d = a[:, None, :] - b[None, :, :]
        return float(np.sqrt((d**2).sum(axis=2)).mean())

    return 2.0 * mean_cross(x, y) - mean_cross(x, x) - mean_cross(y, y)


def run_posttrain(
    world: ToyWorld,
    mode: str,
    steps: int,
    seed: int,
    *,
    lr: float = 0.02,
    batch: int = 8,
    use_cd: bool = True,
    adaptive: bool = False,
    grpo_cfg: GrpoConfig | None = None,
    heldout_episodes: int = 24,
) -> TrainReport:
    """Fine-tune the world's denoiser for `steps` updates, recording per-step
    losses and held-out rewards.

    The held-out probe (noise draws and classes) is fixed up front so its
    reward changes reflect parameter changes only. Record 0 is the initial
    evaluation; steps=0 returns just that.
    """
    if mode not in ("direct", "grpo"):
        raise ValueError(f"mode must be 'direct' or 'grpo', got {mode!r}")
    rng = np.random.default_rng([seed, 1])
    eval_rng = np.random.default_rng([seed, 2])
    eval_z0 = eval_rng.normal(size=(heldout_episodes, 2))
    eval_cls = np.arange(heldout_episodes) % world.classes
    if grpo_cfg is None:
        grpo_cfg = GrpoConfig(seed=seed)

    report = TrainReport(mode=mode, steps=steps, seed=seed)
    hq, hs = evaluate_heldout(world, eval_z0, eval_cls)
    report.records.append(
        {
            "step": 0,
            "loss": None,
            "cd": None,
            "r_quality": None,
            "r_semantic": None,
            "heldout_reward": (hq + hs) / 2.0,
        }
    )

    net = world.denoiser.net
    for step in range(1, steps + 1):
        if mode == "direct":
            b = sample_batch(world, rng, batch)
            loss, cd, rq, rs, _ = _direct_parts(
                world, b, use_cd=use_cd, adaptive=adaptive, want_grads=True
            )
        else:
            cls = int(rng.integers(0, world.classes))
            rollouts = rollout_group(world, cls, grpo_cfg, rng)
            net.zero_grads()
            loss = grpo_loss(rollouts, world, grpo_cfg, want_grads=True)
            cd = 0.0
            if use_cd:
                cd = _cd_branch(world, sample_batch(world, rng, batch), want_grads=True)
                loss += cd
            rq = float(rollouts.reward_parts[:, 0].mean())
            rs = float(rollouts.reward_parts[:, 1].mean())
        net.sgd_step(lr)
        ema_update(net, world.denoiser.ema, world.denoiser.ema_rate)
        hq, hs = evaluate_heldout(world, eval_z0, eval_cls)
        report.records.append(
            {
                "step": step,
                "loss": loss,
                "cd": cd,
                "r_quality": rq,
                "r_semantic": rs,
                "heldout_reward": (hq + hs) / 2.0,
            }
        )
    return report

"""Distribution alignment via a learned transport map and dual potential.

A 3-layer feed-forward network (affine -> layer norm -> ReLU on the two
hidden layers, plain affine output) with explicit parameter and gradient
buffers and hand-written reverse-mode derivatives. Training alternates
several map-descent steps on

    L_map = mean[ ||y - T(y)||^2 - f(T(y)) ]

with one potential-ascent step on

    L_pot = mean_Y f(T(y)) - mean_X f(x),

map and potential frozen in turn. Plain fixed-step gradient descent keeps
the whole run deterministic for a given seed.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FeedForwardNet",
    "NotTrainConfig",
    "OtMapArtifact",
    "map_loss",
    "potential_loss",
    "train_not",
    "save_ot_map",
    "load_ot_map",
]

PARAM_ORDER = ("w1", "b1", "g1", "s1", "w2", "b2", "g2", "s2", "w3", "b3")
VAR_FLOOR = 1e-5
OTMAP_MAGIC = b"OTMAP1"


@dataclass
class _Tape:
    """Values recorded by a forward pass, consumed once by backward."""

    x: np.ndarray
    xn1: np.ndarray
    inv1: np.ndarray
    n1: np.ndarray
    h1: np.ndarray
    xn2: np.ndarray
    inv2: np.ndarray
    n2: np.ndarray
    h2: np.ndarray


def _ln_forward(a: np.ndarray, gain: np.ndarray, shift: np.ndarray):
    mean = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + VAR_FLOOR)
    xn = (a - mean) * inv
    return xn, inv, gain * xn + shift


def _ln_backward(dn: np.ndarray, xn: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    dgain = (dn * xn).sum(axis=0)
    dshift = dn.sum(axis=0)
    dxn = dn * gain
    da = inv * (
        dxn
        - dxn.mean(axis=1, keepdims=True)
        - xn * (dxn * xn).mean(axis=1, keepdims=True)
    )
    return da, dgain, dshift


class FeedForwardNet:
    """Three affine layers with layer normalization and ReLU between them.

    Parameters and their gradient buffers live in shape-congruent dicts;
    backward() accumulates, so call zero_grads() between unrelated passes.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        missing = set(PARAM_ORDER) - set(params)
        if missing:
            raise ValueError(f"missing parameters: {sorted(missing)}")
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in PARAM_ORDER}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._tape: _Tape | None = None

    @classmethod
    def create(cls, d_in: int, hidden: int, d_out: int, rng: np.random.Generator) -> "FeedForwardNet":
        def he(rows, cols):
            return rng.normal(0.0, np.sqrt(2.0 / cols), size=(rows, cols))

        return cls(
            {
                "w1": he(hidden, d_in),
                "b1": np.zeros(hidden),
                "g1": np.ones(hidden),
                "s1": np.zeros(hidden),
                "w2": he(hidden, hidden),
                "b2": np.zeros(hidden),
                "g2": np.ones(hidden),
                "s2": np.zeros(hidden),
                "w3": rng.normal(0.0, np.sqrt(1.0 / hidden), size=(d_out, hidden)),
                "b3": np.zeros(d_out),
            }
        )

    @property
    def d_in(self) -> int:
        return self.params["w1"].shape[1]

    @property
    def hidden(self) -> int:
        return self.params["w1"].shape[0]

    @property
    def d_out(self) -> int:
        return self.params["w3"].shape[0]

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet({k: v.copy() for k, v in self.params.items()})

    def zero_grads(self):
        for g in self.grads.values():
            g[...] = 0.0

    def forward_tape(self, x) -> tuple[np.ndarray, _Tape]:
        """Forward pass returning an explicit tape for later backward_tape()."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected input of shape (b, {self.d_in}), got {x.shape}")
        p = self.params
        a1 = x @ p["w1"].T + p["b1"]
        xn1, inv1, n1 = _ln_forward(a1, p["g1"], p["s1"])
        h1 = np.maximum(n1, 0.0)
        a2 = h1 @ p["w2"].T + p["b2"]
        xn2, inv2, n2 = _ln_forward(a2, p["g2"], p["s2"])
        h2 = np.maximum(n2, 0.0)
        out = h2 @ p["w3"].T + p["b3"]
        return out, _Tape(x, xn1, inv1, n1, h1, xn2, inv2, n2, h2)

    def forward(self, x) -> np.ndarray:
        out, tape = self.forward_tape(x)
        self._tape = tape
        return out

    def backward_tape(self, tape: _Tape, upstream) -> np.ndarray:
        """Accumulate parameter gradients for a recorded pass; returns dL/dx."""
        u = np.asarray(upstream, dtype=np.float64)
        if u.shape != (tape.x.shape[0], self.d_out):
            raise ValueError(f"upstream shape {u.shape} does not match output")
        p, g = self.params, self.grads

        g["w3"] += u.T @ tape.h2
        g["b3"] += u.sum(axis=0)
        dh2 = u @ p["w3"]
        dn2 = dh2 * (tape.n2 > 0)
        da2, dg2, ds2 = _ln_backward(dn2, tape.xn2, tape.inv2, p["g2"])
        g["g2"] += dg2
        g["s2"] += ds2
        g["w2"] += da2.T @ tape.h1
        g["b2"] += da2.sum(axis=0)
        dh1 = da2 @ p["w2"]
        dn1 = dh1 * (tape.n1 > 0)
        da1, dg1, ds1 = _ln_backward(dn1, tape.xn1, tape.inv1, p["g1"])
        g["g1"] += dg1
        g["s1"] += ds1
        g["w1"] += da1.T @ tape.x
        g["b1"] += da1.sum(axis=0)
        return da1 @ p["w1"]

    def backward(self, upstream) -> np.ndarray:
        if self._tape is None:
            raise ValueError("no-tape: call forward() before backward()")
        tape, self._tape = self._tape, None
        return self.backward_tape(tape, upstream)

    def sgd_step(self, lr: float):
        for k in PARAM_ORDER:
            self.params[k] -= lr * self.grads[k]


def forward_map(net: FeedForwardNet, y) -> np.ndarray:
    """Deterministic forward pass of the map network on a batch."""
    return net.forward(y)


@dataclass(frozen=True)
class NotTrainConfig:
    """Alternating-step training schedule for map and potential."""

    inner_iters: int = 10
    steps: int = 1000
    batch: int = 128
    lr_map: float = 1e-3
    lr_potential: float = 1e-3
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValueError(f"inner_iters must be >= 1, got {self.inner_iters}")
        if self.batch < 2:
            raise ValueError(f"batch must be >= 2, got {self.batch}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class OtMapArtifact:
    """Trained map with its training curves and the config that produced it."""

    net: FeedForwardNet
    d_in: int
    d_out: int
    hidden: int
    curve_map: list[float] = field(default_factory=list)
    curve_potential: list[float] = field(default_factory=list)
    config: NotTrainConfig = field(default_factory=NotTrainConfig)

    def apply(self, y) -> np.ndarray:
        """Map one vector or a batch of row vectors through the trained net."""
        y = np.asarray(y, dtype=np.float64)
        if y.ndim == 1:
            out, _ = self.net.forward_tape(y[None, :])
            return out[0]
        out, _ = self.net.forward_tape(y)
        return out


def _vectors(obj) -> np.ndarray:
    v = np.asarray(getattr(obj, "vectors", obj), dtype=np.float64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise ValueError(f"expected a nonempty (n, d) sample matrix, got shape {v.shape}")
    return v


def map_loss(map_net: FeedForwardNet, potential: FeedForwardNet, y) -> float:
    """mean over the batch of ||y - T(y)||^2 - f(T(y))."""
    y = _vectors(y)
    ty, _ = map_net.forward_tape(y)
    fy, _ = potential.forward_tape(ty)
    return float(np.mean(((y - ty) ** 2).sum(axis=1) - fy[:, 0]))


def potential_loss(map_net: FeedForwardNet, potential: FeedForwardNet, x, y) -> float:
    """mean_Y f(T(y)) - mean_X f(x)."""
    x = _vectors(x)
    y = _vectors(y)
    ty, _ = map_net.forward_tape(y)
    f_ty, _ = potential.forward_tape(ty)
    f_x, _ = potential.forward_tape(x)
    return float(np.mean(f_ty[:, 0]) - np.mean(f_x[:, 0]))


def train_not(text, video, cfg: NotTrainConfig | None = None) -> OtMapArtifact:
    """Train the transport map text -> video by alternating gradient steps.

    Each outer step runs cfg.inner_iters descent updates of the map with the
    potential frozen, then one ascent update of the potential with the map
    frozen. Fully deterministic given cfg.seed.
    """
    if cfg is None:
        cfg = NotTrainConfig()
    y_all = _vectors(text)
    x_all = _vectors(video)
    if y_all.shape[1] != x_all.shape[1]:
        raise ValueError(
            f"ambient dims differ: text {y_all.shape[1]} vs video {x_all.shape[1]}; "
            "the quadratic transport cost needs a shared space"
        )
    d = y_all.shape[1]
    rng = np.random.default_rng(cfg.seed)
    map_net = FeedForwardNet.create(d, cfg.hidden, d, rng)
    pot_net = FeedForwardNet.create(d, cfg.hidden, 1, rng)

    curve_map: list[float] = []
    curve_pot: list[float] = []
    for _ in range(cfg.steps):
        # map phase: potential frozen (its accumulated grads are discarded)
        last_map_loss = 0.0
        for _ in range(cfg.inner_iters):
            idx = rng.integers(0, y_all.shape[0], size=cfg.batch)
            y = y_all[idx]
            ty, tape_t = map_net.forward_tape(y)
            fy, tape_f = pot_net.forward_tape(ty)
            b = y.shape[0]
            last_map_loss = float(np.mean(((y - ty) ** 2).sum(axis=1) - fy[:, 0]))
            pot_net.zero_grads()
            d_ty = 2.0 * (ty - y) / b - pot_net.backward_tape(tape_f, np.full((b, 1), 1.0 / b))
            map_net.zero_grads()
            map_net.backward_tape(tape_t, d_ty)
            map_net.sgd_step(cfg.lr_map)
        curve_map.append(last_map_loss)

        # potential phase: map frozen, single ascent step
        idx_y = rng.integers(0, y_all.shape[0], size=cfg.batch)
        idx_x = rng.integers(0, x_all.shape[0], size=cfg.batch)
        ty, _ = map_net.forward_tape(y_all[idx_y])
        x = x_all[idx_x]
        z = np.vstack([ty, x])
        fz, tape_f = pot_net.forward_tape(z)
        by, bx = ty.shape[0], x.shape[0]
        curve_pot.append(float(np.mean(fz[:by, 0]) - np.mean(fz[by:, 0])))
        # Descending L_pot raises f on real samples and lowers it at mapped
        # points, which is the potential's sup role in the dual objective.
        upstream = np.vstack([np.full((by, 1), 1.0 / by), np.full((bx, 1), -1.0 / bx)])
        pot_net.zero_grads()
        pot_net.backward_tape(tape_f, upstream)
        pot_net.sgd_step(cfg.lr_potential)

    return OtMapArtifact(
        net=map_net,
        d_in=d,
        d_out=d,
        hidden=cfg.hidden,
        curve_map=curve_map,
        curve_potential=curve_pot,
        config=cfg,
    )


def save_ot_map(artifact: OtMapArtifact, path):
    """Write the versioned binary artifact: magic, dims, params, JSON trailer."""
    buf = io.BytesIO()
    buf.write(OTMAP_MAGIC)
    buf.write(struct.pack("<III", artifact.d_in, artifact.hidden, artifact.d_out))
    for key in PARAM_ORDER:
        buf.write(np.ascontiguousarray(artifact.net.params[key], dtype="<f8").tobytes())
    trailer = json.dumps(
        {
            "config": {
                "inner_iters": artifact.config.inner_iters,
                "steps": artifact.config.steps,
                "batch": artifact.config.batch,
                "lr_map": artifact.config.lr_map,
                "lr_potential": artifact.config.lr_potential,
                "hidden": artifact.config.hidden,
                "seed": artifact.config.seed,
            },
            "curve_map": artifact.curve_map,
            "curve_potential": artifact.curve_potential,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf.write(struct.pack("<I", len(trailer)))
    buf.write(trailer)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _param_shapes(d_in: int, hidden: int, d_out: int) -> dict[str, tuple[int, ...]]:
    return {
        "w1": (hidden, d_in),
        "b1": (hidden,),
        "g1": (hidden,),
        "s1": (hidden,),
        "w2": (hidden, hidden),
        "b2": (hidden,),
        "g2": (hidden,),
        "s2": (hidden,),
        "w3": (d_out, hidden),
        "b3": (d_out,),
    }


def load_ot_map(path) -> OtMapArtifact:
    """Read an artifact written by save_ot_map; raises on bad magic/truncation."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(OTMAP_MAGIC)] != OTMAP_MAGIC:
        raise ValueError(f"bad-magic: not a map artifact: {path}")
    off = len(OTMAP_MAGIC)
    try:
        d_in, hidden, d_out = struct.unpack_from("<III", data, off)
    except struct.error as exc:
        raise ValueError(f"truncated: map artifact too short: {path}") from exc
    off += 12
    params = {}
    for key, shape in _param_shapes(d_in, hidden, d_out).items():
        nbytes = 8 * int(np.prod(shape))
        blob = data[off : off + nbytes]
        if len(blob) != nbytes:
            raise ValueError(f"truncated: map artifact too short: {path}")
        params[key] = np.frombuffer(blob, dtype="<f8").reshape(shape).copy()
        off += nbytes
    try:
        (tlen,) = struct.unpack_from("<I", data, off)
    except struct.error as exc:
        raise ValueError(f"truncated: map artifact too short: {path}") from exc
    off += 4
    trailer_bytes = data[off : off + tlen]
    if len(trailer_bytes) != tlen:
        raise ValueError(f"truncated: map artifact too short: {path}")
    trailer = json.loads(trailer_bytes.decode("utf-8"))
    cfg = NotTrainConfig(**trailer["config"])
    return OtMapArtifact(
        net=FeedForwardNet(params),
        d_in=d_in,
        d_out=d_out,
        hidden=hidden,
        curve_map=list(trailer.get("curve_map", [])),
        curve_potential=list(trailer.get("curve_potential", [])),
        config=cfg,
    )

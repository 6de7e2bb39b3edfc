"""Toy differentiable splat renderer and the fixed latent→pixel decoder.

Splats live on a 2-D canvas in pixel-index coordinates (``x`` = column,
``y`` = row).  A pose rotates the whole scene about the canvas centre, so
different poses play the role of camera views.  Each splat is an anisotropic
Gaussian footprint composited front to back in a fixed depth order::

    α_i = sigmoid(o_i) · exp(−½ (d₁²/s₁² + d₂²/s₂²))
    x   = Σ_i T_i α_i c_i,      T_i = Π_{j<i} (1 − α_j)

Gradients are derived by hand (see :func:`render_grad`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

SCALE_MIN = 1e-3
DEFAULT_CANVAS = (16, 16, 4)


@dataclass(frozen=True)
class View:
    pose_angle: float
    pose_id: int


def make_views(n: int) -> list[View]:
    """``n`` evenly spaced pose buckets covering the full circle."""
    if n < 1:
        raise ValueError("need at least one view")
    return [View(2.0 * math.pi * k / n, k) for k in range(n)]


@dataclass(frozen=True, eq=False)
class SplatScene:
    """Struct-of-arrays splat parameters.

    positions (N,2), log_scales (N,2), rotations (N,), colors (N,C),
    opacity_logits (N,), depth_rank (N,) with 0 the front-most splat.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    depth_rank: np.ndarray
    canvas: tuple[int, int, int] = DEFAULT_CANVAS

    def __post_init__(self):
        h, w, c = (int(v) for v in self.canvas)
        if min(h, w, c) < 1:
            raise ValueError(f"invalid canvas {self.canvas}")
        n = len(np.atleast_1d(self.rotations))
        pos = np.asarray(self.positions, dtype=np.float64).reshape(n, 2)
        ls = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 2)
        rot = np.asarray(self.rotations, dtype=np.float64).reshape(n)
        col = np.asarray(self.colors, dtype=np.float64).reshape(n, c)
        op = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        rank = np.asarray(self.depth_rank, dtype=np.int64).reshape(n)
        if sorted(rank.tolist()) != list(range(n)):
            raise ValueError("depth_rank must be a permutation of 0..N-1")
        hi = math.log(max(h, w))
        if np.any(ls < math.log(SCALE_MIN) - 1e-12) or np.any(ls > hi + 1e-12):
            raise ValueError(f"scales must lie in [{SCALE_MIN}, {max(h, w)}]")
        for name, arr in (("positions", pos), ("log_scales", ls), ("rotations", rot),
                          ("colors", col), ("opacity_logits", op)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "log_scales", ls)
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "colors", col)
        object.__setattr__(self, "opacity_logits", op)
        object.__setattr__(self, "depth_rank", rank)
        object.__setattr__(self, "canvas", (h, w, c))

    @property
    def n_splats(self) -> int:
        return int(self.rotations.shape[0])

    @property
    def opacity(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def params(self) -> dict[str, np.ndarray]:
        return {"positions": self.positions, "log_scales": self.log_scales,
                "rotations": self.rotations, "colors": self.colors,
                "opacity_logits": self.opacity_logits}

    def with_params(self, **params) -> "SplatScene":
        return replace(self, **params)


def empty_scene(canvas=DEFAULT_CANVAS) -> SplatScene:
    c = canvas[2]
    return SplatScene(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, c)),
                      np.zeros(0), np.zeros(0, dtype=np.int64), canvas)


def clamp_log_scales(log_scales: np.ndarray, canvas) -> np.ndarray:
    return np.clip(log_scales, math.log(SCALE_MIN), math.log(max(canvas[0], canvas[1])))


def _rot(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[c, -s], [s, c]])


def _footprints(scene: SplatScene, view: View):
    """Per-splat quantities in front-to-back order."""
    h, w, _ = scene.canvas
    order = np.argsort(scene.depth_rank, kind="stable")
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    R = _rot(view.pose_angle)
    pos = (scene.positions[order] - centre) @ R.T + centre
    theta = scene.rotations[order] + view.pose_angle
    s = np.exp(scene.log_scales[order])                           # (N,2)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx[None] - pos[:, 0, None, None]                         # (N,H,W)
    dy = yy[None] - pos[:, 1, None, None]
    cos, sin = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
    d1 = cos * dx + sin * dy
    d2 = -sin * dx + cos * dy
    s1, s2 = s[:, 0, None, None], s[:, 1, None, None]
    g = np.exp(-0.5 * (d1 ** 2 / s1 ** 2 + d2 ** 2 / s2 ** 2))
    o = expit(scene.opacity_logits[order])
    alpha = o[:, None, None] * g
    # exclusive transmittance
    T = np.cumprod(np.concatenate([np.ones((1, h, w)), 1.0 - alpha[:-1]]), axis=0) \
        if len(order) else np.ones((0, h, w))
    return dict(order=order, R=R, d1=d1, d2=d2, s1=s1, s2=s2, cos=cos, sin=sin,
                g=g, o=o, alpha=alpha, T=T)


def render(scene: SplatScene, view: View) -> np.ndarray:
    """Latent image (H, W, C) of ``scene`` seen from ``view``; background is zero."""
    h, w, c = scene.canvas
    if scene.n_splats == 0:
        return np.zeros((h, w, c))
    fp = _footprints(scene, view)
    weights = fp["T"] * fp["alpha"]                               # (N,H,W)
    return np.einsum("nhw,nc->hwc", weights, scene.colors[fp["order"]])


def render_grad(scene: SplatScene, view: View, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Pull a latent-image cotangent back to every splat parameter."""
    h, w, c = scene.canvas
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (h, w, c):
        raise ValueError(f"upstream shape {u.shape} does not match canvas {(h, w, c)}")
    n = scene.n_splats
    grads = {k: np.zeros_like(v) for k, v in scene.params().items()}
    if n == 0:
        return grads
    fp = _footprints(scene, view)
    order, T, alpha, g, o = fp["order"], fp["T"], fp["alpha"], fp["g"], fp["o"]
    col = scene.colors[order]
    cu = np.einsum("hwc,nc->nhw", u, col)                          # c_i · u per pixel

    d_col = np.einsum("nhw,hwc->nc", T * alpha, u)
    # Q_i = Σ_{j>i} (T_j / T_{i+1}) α_j (c_j·u), built back to front
    Q = np.zeros_like(alpha)
    for i in range(n - 2, -1, -1):
        Q[i] = alpha[i + 1] * cu[i + 1] + (1.0 - alpha[i + 1]) * Q[i + 1]
    d_alpha = T * (cu - Q)

    d_logit = np.einsum("nhw,nhw->n", d_alpha, g) * o * (1.0 - o)
    d_qf = d_alpha * o[:, None, None] * (-0.5 * g)                 # qf = d₁²/s₁² + d₂²/s₂²
    d1, d2, s1, s2 = fp["d1"], fp["d2"], fp["s1"], fp["s2"]
    cos, sin = fp["cos"], fp["sin"]
    inv1, inv2 = 1.0 / s1 ** 2, 1.0 / s2 ** 2
    d_ls = np.stack([np.sum(d_qf * (-2.0 * d1 ** 2 * inv1), axis=(1, 2)),
                     np.sum(d_qf * (-2.0 * d2 ** 2 * inv2), axis=(1, 2))], axis=1)
    d_theta = np.sum(d_qf * 2.0 * d1 * d2 * (inv1 - inv2), axis=(1, 2))
    dqf_ddx = 2.0 * d1 * cos * inv1 - 2.0 * d2 * sin * inv2
    dqf_ddy = 2.0 * d1 * sin * inv1 + 2.0 * d2 * cos * inv2
    # d = pixel − p′, so ∂/∂p′ = −∂/∂d
    d_pos_rot = -np.stack([np.sum(d_qf * dqf_ddx, axis=(1, 2)),
                           np.sum(d_qf * dqf_ddy, axis=(1, 2))], axis=1)
    d_pos = d_pos_rot @ fp["R"]                                    # Rᵀ applied row-wise

    inv = np.empty_like(order)
    inv[order] = np.arange(n)
    grads["positions"] = d_pos[inv]
    grads["log_scales"] = d_ls[inv]
    grads["rotations"] = d_theta[inv]
    grads["colors"] = d_col[inv]
    grads["opacity_logits"] = d_logit[inv]
    return grads


# -- decoder ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Decoder:
    """Per-pixel channel mixing, nearest upsample, optional sigmoid."""

    mixing: np.ndarray             # (C_out, C_in)
    upsample: int = 2
    sigmoid: bool = True

    def __post_init__(self):
        m = np.array(self.mixing, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("mixing must be a matrix")
        if int(self.upsample) != self.upsample or self.upsample < 1:
            raise ValueError("upsample must be a positive integer")
        m.setflags(write=False)
        object.__setattr__(self, "mixing", m)

    @property
    def in_channels(self) -> int:
        return int(self.mixing.shape[1])

    def _check(self, latent):
        latent = np.asarray(latent, dtype=np.float64)
        if latent.ndim != 3 or latent.shape[2] != self.in_channels:
            raise ValueError(f"latent shape {latent.shape} does not match decoder input "
                             f"channels {self.in_channels}")
        return latent

    def _linear(self, latent):
        z = latent @ self.mixing.T
        k = self.upsample
        return z.repeat(k, axis=0).repeat(k, axis=1) if k > 1 else z

    def decode(self, latent) -> np.ndarray:
        z = self._linear(self._check(latent))
        return expit(z) if self.sigmoid else z

    def __call__(self, latent):
        return self.decode(latent)

    def jvp(self, latent, v) -> np.ndarray:
        dz = self._linear(self._check(v))
        if not self.sigmoid:
            return dz
        p = expit(self._linear(self._check(latent)))
        return p * (1.0 - p) * dz

    def vjp(self, latent, g) -> np.ndarray:
        latent = self._check(latent)
        g = np.asarray(g, dtype=np.float64)
        if self.sigmoid:
            p = expit(self._linear(latent))
            g = g * p * (1.0 - p)
        k = self.upsample
        if k > 1:
            h, w, c = g.shape
            g = g.reshape(h // k, k, w // k, k, c).sum(axis=(1, 3))
        return g @ self.mixing


def make_decoder(channels: int = 4, seed: int = 0, upsample: int = 2, out_channels: int = 3) -> Decoder:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC0]))
    return Decoder(rng.uniform(-1.0, 1.0, size=(out_channels, channels)), upsample, True)


def identity_decoder(channels: int = 4) -> Decoder:
    return Decoder(np.eye(channels), 1, False)


# -- serialisation ----------------------------------------------------------------

def format_scene(scene: SplatScene) -> str:
    h, w, c = scene.canvas
    lines = [f"{h} {w} {c} {scene.n_splats}"]
    for i in range(scene.n_splats):
        vals = [*scene.positions[i], *scene.log_scales[i], scene.rotations[i],
                *scene.colors[i], scene.opacity_logits[i]]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {int(scene.depth_rank[i])}")
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> SplatScene:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty scene file")
    try:
        h, w, c, n = (int(v) for v in lines[0].split())
    except ValueError:
        raise ValueError(f"bad scene header {lines[0]!r}") from None
    if len(lines) != n + 1:
        raise ValueError(f"expected {n} splat lines, found {len(lines) - 1}")
    width = 6 + c + 1
    rows = []
    for i, line in enumerate(lines[1:]):
        parts = line.split()
        if len(parts) != width:
            raise ValueError(f"splat line {i} has {len(parts)} fields, expected {width}")
        rows.append(parts)
    if n == 0:
        return empty_scene((h, w, c))
    num = np.array([[float(v) for v in r[:-1]] for r in rows])
    return SplatScene(num[:, 0:2], num[:, 2:4], num[:, 4], num[:, 5:5 + c], num[:, 5 + c],
                      np.array([int(r[-1]) for r in rows]), (h, w, c))


def save_scene(scene: SplatScene, path) -> None:
    Path(path).write_text(format_scene(scene), encoding="utf-8")


def load_scene(path) -> SplatScene:
    return parse_scene(Path(path).read_text(encoding="utf-8"))


def _to_bytes(v: np.ndarray) -> np.ndarray:
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    """Binary P6 of an (H, W, 3) image; values clipped to [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"PPM export needs an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + _to_bytes(np.clip(image, 0.0, 1.0)).tobytes()


def pgm_bytes(channel: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> bytes:
    """Binary P5 of one latent channel mapped linearly from [lo, hi]."""
    channel = np.asarray(channel, dtype=np.float64)
    if channel.ndim != 2:
        raise ValueError("PGM export needs a 2-D channel")
    h, w = channel.shape
    scaled = (np.clip(channel, lo, hi) - lo) / (hi - lo)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + _to_bytes(scaled).tobytes()


def write_ppm(path, image) -> None:
    Path(path).write_bytes(ppm_bytes(image))


def write_latent_pgms(prefix, latent) -> list[Path]:
    """One PGM per latent channel: ``<prefix>_c<k>.pgm``."""
    latent = np.asarray(latent)
    paths = []
    for k in range(latent.shape[2]):
        p = Path(f"{prefix}_c{k}.pgm")
        p.write_bytes(pgm_bytes(latent[:, :, k]))
        paths.append(p)
    return paths


def latent_preview(latent: np.ndarray) -> np.ndarray:
    """First three latent channels as an RGB image (zero-padded if fewer)."""
    h, w, c = latent.shape
    out = np.zeros((h, w, 3))
    out[:, :, :min(c, 3)] = latent[:, :, :3]
    return out

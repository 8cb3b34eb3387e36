"""Query-decoder math and iterative masked-refinement inference.

The decoder stack is: F_a = T^T S_p (channel-wise alignment), F_r =
Refiner([F; F_a]), P = sigmoid(T F_r). The backbone and refiner are
pluggable contracts; the bundled toy pair is analytic, seeded, and
channel-separable: class n's prediction depends only on feature slot
(class_id-1) mod 24, which makes parallel multi-class decoding bitwise
equal to looping classes one at a time (used by the benchmark).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from io import BytesIO
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage
from scipy.special import expit

from .errors import DimensionMismatchError, InvalidArgumentError
from .promptgen import upsample_block_mask
from .volume import ProbabilityMap


@dataclass
class QueryEmbeddings:
    t: np.ndarray  # (N, C)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        if self.t.ndim != 2 or self.t.shape[0] < 1 or not np.all(np.isfinite(self.t)):
            raise InvalidArgumentError("query embeddings must be a finite (N, C) matrix")


@dataclass
class VoxelFeatures:
    f: np.ndarray  # (C, H, W, D)

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64)
        if self.f.ndim != 4 or not np.all(np.isfinite(self.f)):
            raise InvalidArgumentError("voxel features must be a finite (C, H, W, D) grid")


class Backbone(Protocol):
    feature_channels: int

    def features(self, patch: np.ndarray, s_f: np.ndarray) -> tuple[VoxelFeatures, np.ndarray]:
        """(image patch, foreground prompt) -> (F, multi-scale summary V)."""

    def adapt_queries(self, v: np.ndarray, z: np.ndarray) -> QueryEmbeddings:
        """T = adapt(V, Z): raw text embeddings to image-adapted queries."""


class Refiner(Protocol):
    def refine(self, stacked: np.ndarray) -> np.ndarray:
        """(2C, H, W, D) -> (C, H, W, D)."""


def aligned_features(t: QueryEmbeddings, s_p: np.ndarray) -> np.ndarray:
    """F_a[c] = sum_n T[n, c] * S_p[n]."""
    s_p = np.asarray(s_p, dtype=np.float64)
    if s_p.ndim != 4 or s_p.shape[0] != t.t.shape[0]:
        raise DimensionMismatchError(f"prompt channels {s_p.shape} do not match queries {t.t.shape}")
    return np.einsum("nc,nhwd->chwd", t.t, s_p)


def predict(t: QueryEmbeddings, f_r: np.ndarray, channel_meta=None) -> ProbabilityMap:
    """P[n] = sigmoid(sum_c T[n, c] * F_r[c]); outputs kept strictly inside (0,1)."""
    f_r = np.asarray(f_r, dtype=np.float64)
    if f_r.ndim != 4 or f_r.shape[0] != t.t.shape[1]:
        raise DimensionMismatchError(f"refined features {f_r.shape} do not match queries {t.t.shape}")
    logits = np.einsum("nc,chwd->nhwd", t.t, f_r)
    p = np.clip(expit(logits), np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))
    return ProbabilityMap(data=p, channel_meta=channel_meta or list(range(t.t.shape[0])))


def decoder_forward(f: VoxelFeatures, t: QueryEmbeddings, s_p: np.ndarray, refiner: Refiner) -> np.ndarray:
    """One pass of the full decoder stack; returns raw (N,H,W,D) probabilities."""
    f_a = aligned_features(t, s_p)
    f_r = refiner.refine(np.concatenate([f.f, f_a], axis=0))
    return predict(t, f_r).data


def random_block_mask(dims, block: int, rng: np.random.Generator):
    """Complementary mask pair from selecting half the block-grid cells.

    Exactly max(1, floor(cells/2)) cells are chosen uniformly without
    replacement; blocks are cubic of edge `block`, edge-truncated.
    """
    if block < 1:
        raise InvalidArgumentError("block edge must be >= 1")
    b3 = (block, block, block)
    grid = tuple(-(-d // block) for d in dims)
    cells = int(np.prod(grid))
    n_selected = max(1, cells // 2)
    chosen = rng.choice(cells, size=n_selected, replace=False)
    cell_mask = np.zeros(cells, dtype=np.uint8)
    cell_mask[chosen] = 1
    m = upsample_block_mask(cell_mask.reshape(grid), b3, dims)
    return m, (1 - m).astype(np.uint8)


def masked_forward(f: VoxelFeatures, t: QueryEmbeddings, prompt: np.ndarray, mask: np.ndarray,
                   refiner: Refiner) -> np.ndarray:
    """Decoder pass with the spatial prompt hidden outside the mask."""
    return decoder_forward(f, t, prompt * mask, refiner)


def iterative_infer(f: VoxelFeatures, t: QueryEmbeddings, s_p_init: np.ndarray, refiner: Refiner,
                    rng: np.random.Generator, t_iter: int = 2, rounds: int = 1,
                    blocks: Sequence[int] = (4, 8)) -> np.ndarray:
    """Iterative masked refinement.

    Each iteration: full-prompt forward, then `rounds` complementary-mask
    forward pairs composed as P_1*M_c + P_2*M (each prediction trusted
    where its prompt was hidden), averaged; the averaged map becomes the
    next iteration's soft prompt. Draw order per round: block edge, then
    the cell subset.
    """
    if t_iter < 1 or rounds < 1:
        raise InvalidArgumentError("need at least one iteration and one round")
    dims = f.f.shape[1:]
    s_p = np.asarray(s_p_init, dtype=np.float64)
    p = None
    for _ in range(t_iter):
        p_full = decoder_forward(f, t, s_p, refiner)
        p_sum = np.zeros_like(p_full)
        for _ in range(rounds):
            block = int(rng.choice(np.asarray(blocks)))
            m, m_c = random_block_mask(dims, block, rng)
            p_1 = masked_forward(f, t, p_full, m, refiner)
            p_2 = masked_forward(f, t, p_full, m_c, refiner)
            p_sum += p_1 * m_c + p_2 * m
        p = p_sum / rounds
        s_p = p
    return p


def _box3(channel: np.ndarray) -> np.ndarray:
    return ndimage.uniform_filter(channel, size=3, mode="nearest")


class ToyBackbone:
    """Analytic prompt-aware backbone.

    Feature channels 0..slots-1 are intensity-bump detectors tuned to the
    calibrated per-slot gray levels (255*(k+1)/(slots+1)); the remaining
    channels are smoothed intensity, gradient magnitude, normalized
    coordinates, the smoothed foreground prompt, a center-distance feature,
    and a constant bias. Deterministic given (patch, s_f).
    """

    def __init__(self, channels: int = 32, slots: int = 24, seed: int = 0):
        if channels < slots + 8:
            raise InvalidArgumentError("toy backbone needs slots + 8 channels")
        self.feature_channels = channels
        self.slots = slots
        self.seed = seed
        self.sigma_b = 0.35 / (slots + 1)
        self.gain_base = 2.0
        self.gain_mod = 0.25
        self.feature_calls = 0
        self.adapt_calls = 0

    def features(self, patch: np.ndarray, s_f: np.ndarray):
        self.feature_calls += 1
        x = np.asarray(patch, dtype=np.float64) / 255.0
        if x.shape != tuple(np.asarray(s_f).shape):
            raise DimensionMismatchError("patch and foreground prompt dims differ")
        c = self.feature_channels
        f = np.zeros((c,) + x.shape)
        mus = (np.arange(self.slots) + 1.0) / (self.slots + 1.0)
        for k in range(self.slots):
            f[k] = np.exp(-(((x - mus[k]) / self.sigma_b) ** 2))
        f[self.slots + 0] = _box3(x)
        gx, gy, gz = np.gradient(x)
        f[self.slots + 1] = np.sqrt(gx * gx + gy * gy + gz * gz)
        for ax in range(3):
            shape = [1, 1, 1]
            shape[ax] = x.shape[ax]
            ramp = np.linspace(0.0, 1.0, x.shape[ax]).reshape(shape)
            f[self.slots + 2 + ax] = np.broadcast_to(ramp, x.shape)
        f[self.slots + 5] = _box3(np.asarray(s_f, dtype=np.float64))
        center = [(n - 1) / 2.0 for n in x.shape]
        grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in x.shape], indexing="ij")
        d2 = sum(((g - c0) / max(n, 1)) ** 2 for g, c0, n in zip(grids, center, x.shape))
        f[self.slots + 6] = np.sqrt(d2)
        f[self.slots + 7] = 1.0
        v = np.array([x.mean(), x.std(), float(np.asarray(s_f, dtype=np.float64).mean())])
        return VoxelFeatures(f=f), v

    def adapt_queries(self, v: np.ndarray, z: np.ndarray) -> QueryEmbeddings:
        self.adapt_calls += 1
        z = np.asarray(z, dtype=np.float64)
        gain = self.gain_base + self.gain_mod * np.tanh(float(v[0]))
        # renormalize the slot head so prompt strength does not depend on
        # how much of the embedding norm the encoder's noise dims consume
        head = z[:, : self.slots]
        norm = np.linalg.norm(head, axis=1, keepdims=True)
        head = np.divide(head, norm, out=np.zeros_like(head), where=norm > 0)
        t = np.zeros((z.shape[0], self.feature_channels))
        t[:, : self.slots] = head * gain
        return QueryEmbeddings(t=t)


class ToyRefiner:
    """Fixed linear mix of box-filtered [F; F_a] channels.

    Slot rows pass their own evidence (weight 8) and their own aligned
    prompt channel (weight 4) plus the smoothed-S_f channel and a negative
    bias; off-diagonal aligned-prompt weights are exactly zero, which keeps
    classes independent. Small seeded weights on the auxiliary feature
    columns only.
    """

    def __init__(self, channels: int = 32, slots: int = 24, seed: int = 0,
                 w_self: float = 8.0, w_prompt: float = 4.0, w_sf: float = 0.5, bias: float = -4.0):
        self.channels = channels
        self.slots = slots
        self.seed = seed
        self.calls = 0
        a = np.zeros((channels, 2 * channels))
        rng = np.random.default_rng(seed)
        noise_cols = [slots + j for j in (0, 1, 2, 3, 4, 6)]  # aux F channels, not S_f/bias
        a[:slots, noise_cols] = 0.05 * rng.standard_normal((slots, len(noise_cols)))
        for k in range(slots):
            a[k, k] = w_self
            a[k, channels + k] = w_prompt
            a[k, slots + 5] = w_sf       # smoothed foreground prompt channel
            a[k, slots + 7] = bias       # constant-one channel
        self.a = a

    def refine(self, stacked: np.ndarray) -> np.ndarray:
        self.calls += 1
        stacked = np.asarray(stacked, dtype=np.float64)
        if stacked.shape[0] != 2 * self.channels:
            raise DimensionMismatchError(
                f"refiner expects {2 * self.channels} channels, got {stacked.shape[0]}")
        smoothed = np.stack([_box3(ch) for ch in stacked])
        return np.einsum("kc,chwd->khwd", self.a, smoothed)


def toy_contracts(channels: int = 32, slots: int = 24, seed: int = 0):
    return ToyBackbone(channels=channels, slots=slots, seed=seed), ToyRefiner(channels=channels, slots=slots, seed=seed)


def save_toy_refiner(path, refiner: ToyRefiner) -> None:
    """Binary sidecar: one JSON header line, then the npy weight matrix."""
    header = {"channels": refiner.channels, "slots": refiner.slots, "seed": refiner.seed}
    buf = BytesIO()
    np.save(buf, refiner.a)
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(buf.getvalue())


def load_toy_refiner(path) -> ToyRefiner:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        a = np.load(BytesIO(fh.read()))
    refiner = ToyRefiner(channels=header["channels"], slots=header["slots"], seed=header["seed"])
    refiner.a = a
    return refiner

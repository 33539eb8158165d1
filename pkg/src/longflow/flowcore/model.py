"""Velocity-field network over a window of frames.

A window holds F slots (condition frames first, then noisy frames). Every
slot gets a per-frame condition vector (timestamp, temporal offset, fps tag,
waypoint, scene, view descriptors) that is Fourier-embedded and passed
through an MLP, then added to the frame embedding.

A temporal mixing block lets each slot read a context frame from the whole
window: attention whose queries and keys come from (timestamp, offset,
presence) features and whose values are the raw frames. The backbone predicts
a correction on top of that context to estimate the clean frame x1_hat, and
the velocity is

    v = gamma(t) * (x1_hat - x) / (1 - t + delta)

with ``gamma`` zero-initialised, so a fresh model outputs v = 0.

Backbones:
  mlp  -- the frame and its context are flattened and go through a dense stack
  attn -- one spatial attention block over all V*H*W tokens of a frame
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace

import numpy as np

from ..nncore import (Dense, LayerNorm, ParamStore, SelfAttention, attention_backward,
                      attention_forward, fourier_embed, silu, silu_backward)

OFFSET_SCALE = 144.0
FPS_SCALE = math.log(24.0)
BACKBONES = ("mlp", "attn")


@dataclass(frozen=True)
class FieldConfig:
    frame_dim: int
    backbone: str = "mlp"
    num_views: int = 0
    frame_size: int = 0
    hidden: int = 256
    cond_hidden: int = 128
    num_frequencies: int = 8
    mix_dim: int = 16
    channels: int = 8
    num_scenes: int = 4
    delta: float = 0.02

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; valid: {', '.join(BACKBONES)}")
        if self.backbone == "attn" and self.num_views * self.frame_size**2 != self.frame_dim:
            raise ValueError("attn backbone needs frame_dim == num_views * frame_size**2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConditioningBundle:
    """Per-slot conditions for a batch of windows (B windows, F slots)."""

    waypoints: np.ndarray                 # (B, F, 2), arena-normalised
    fps_tag: np.ndarray                   # (B, F)
    offsets: np.ndarray                   # (B, F) high-fps frames after the last condition slot
    is_cond: np.ndarray                   # (B, F) bool, held fixed
    valid: np.ndarray                     # (B, F) bool, slot present
    scene_id: np.ndarray                  # (B,) int
    drop_waypoints: np.ndarray            # (B,) bool
    drop_scene: np.ndarray                # (B,) bool
    view_params: np.ndarray | None = None # (V, 3)

    def __post_init__(self):
        b, f = self.is_cond.shape
        if self.waypoints.shape != (b, f, 2):
            raise ValueError("need one waypoint per slot")

    def dropped(self) -> "ConditioningBundle":
        b = len(self.scene_id)
        return replace(self, drop_waypoints=np.ones(b, bool), drop_scene=np.ones(b, bool))

    def take(self, idx) -> "ConditioningBundle":
        return replace(self, waypoints=self.waypoints[idx], fps_tag=self.fps_tag[idx],
                       offsets=self.offsets[idx], is_cond=self.is_cond[idx], valid=self.valid[idx],
                       scene_id=self.scene_id[idx], drop_waypoints=self.drop_waypoints[idx],
                       drop_scene=self.drop_scene[idx])


class VelocityField:
    def __init__(self, config: FieldConfig, rng: np.random.Generator | None = None,
                 store: ParamStore | None = None):
        self.config = config
        given = store
        self.store = store = ParamStore()
        init_rng = rng if rng is not None else np.random.default_rng(0)
        c = config
        K = c.num_frequencies
        d = c.frame_dim
        self.n_scalar = 3 * 2 * K
        self.n_wp = 2 * 2 * K
        self.n_view = c.num_views * 3 * 2 * K
        n_cond = self.n_scalar + 2 * self.n_wp + 2 + c.num_scenes + self.n_view
        n_mix = 2 * 2 * K + 1

        self.mix_q = Dense(store, "mix.q", n_mix, c.mix_dim, init_rng)
        self.mix_k = Dense(store, "mix.k", n_mix, c.mix_dim, init_rng, bias=False)
        self.cond1 = Dense(store, "cond.1", n_cond, c.cond_hidden, init_rng)
        width = c.hidden if c.backbone == "mlp" else c.channels
        self.cond2 = Dense(store, "cond.2", c.cond_hidden, width, init_rng)
        if c.backbone == "mlp":
            self.frame_in = Dense(store, "frame.in", 2 * d, c.hidden, init_rng)
            self.norm = LayerNorm(store, "frame.norm", c.hidden)
            self.hid = Dense(store, "frame.hid", c.hidden, c.hidden, init_rng)
            self.out = Dense(store, "frame.out", c.hidden, d, init_rng)
        else:
            self.pos = self._token_positions()
            self.frame_in = Dense(store, "tok.in", 2 + self.pos.shape[1], c.channels, init_rng)
            self.norm = LayerNorm(store, "tok.norm", c.channels)
            self.spatial = SelfAttention(store, "tok.attn", c.channels, init_rng)
            self.hid = Dense(store, "tok.hid", c.channels, c.channels, init_rng)
            self.out = Dense(store, "tok.out", c.channels, 1, init_rng)
        self.gate = Dense(store, "gate", 2 * K, 1, init="zeros")
        # per-timestamp gain on the slot's own input, so nearly clean slots pass through
        self.skip = Dense(store, "skip", 2 * K, 1, init="zeros")
        if given is not None:
            self.load_params(given)

    # -- parameters -----------------------------------------------------------

    def load_params(self, other: ParamStore) -> None:
        if set(other.params) != set(self.store.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        for name, p in other.params.items():
            if p.shape != self.store.params[name].shape:
                raise ValueError(f"shape mismatch for {name}")
        for name in self.store.params:
            self.store.params[name][...] = other.params[name]
            self.store.m[name][...] = other.m[name]
            self.store.v[name][...] = other.v[name]
        self.store.step = other.step

    def _token_positions(self) -> np.ndarray:
        c = self.config
        n = c.frame_size
        rows, cols = np.mgrid[0:n, 0:n]
        rc = np.stack([rows.ravel(), cols.ravel()], axis=-1) / n
        pe = fourier_embed(rc, 4)
        per_view = []
        for v in range(c.num_views):
            onehot = np.zeros((n * n, c.num_views))
            onehot[:, v] = 1.0
            per_view.append(np.concatenate([pe, onehot], axis=1))
        return np.concatenate(per_view, axis=0)

    # -- feature construction -------------------------------------------------

    def _features(self, t: np.ndarray, cond: ConditioningBundle):
        K = self.config.num_frequencies
        b, f = t.shape
        off = cond.offsets / OFFSET_SCALE
        fps = np.log(np.maximum(cond.fps_tag, 1.0)) / FPS_SCALE
        valid = cond.valid.astype(np.float64)
        t_emb = fourier_embed(t[..., None], K)
        off_emb = fourier_embed(off[..., None], K)
        # a slot is clean exactly when its timestamp is 1; no separate role flag
        scalars = np.concatenate([t_emb, off_emb, fourier_embed(fps[..., None], K)], axis=-1)
        keep_wp = (~np.asarray(cond.drop_waypoints, bool)).astype(np.float64)[:, None, None]
        wp = fourier_embed(cond.waypoints, K) * keep_wp
        keep_sc = (~np.asarray(cond.drop_scene, bool)).astype(np.float64)[:, None]
        scene = np.zeros((b, self.config.num_scenes))
        scene[np.arange(b), np.asarray(cond.scene_id) % self.config.num_scenes] = 1.0
        scene = np.broadcast_to((scene * keep_sc)[:, None, :], (b, f, self.config.num_scenes))
        drops = np.broadcast_to(
            np.stack([np.asarray(cond.drop_waypoints, np.float64), np.asarray(cond.drop_scene, np.float64)],
                     axis=-1)[:, None, :], (b, f, 2))
        if self.n_view:
            vp = np.asarray(cond.view_params, dtype=np.float64)
            vp = vp / np.array([2 * math.pi, max(self.config.frame_size, 1), max(self.config.frame_size, 1)])
            view = np.broadcast_to(fourier_embed(vp.reshape(-1), K).reshape(1, 1, -1), (b, f, self.n_view))
        else:
            view = np.zeros((b, f, 0))
        mix = np.concatenate([t_emb, off_emb, valid[..., None]], axis=-1)
        return scalars, wp, scene, drops, view, mix, t_emb

    # -- forward / backward -------------------------------------------------------

    def forward(self, x: np.ndarray, t: np.ndarray, cond: ConditioningBundle):
        """x: (B, F, D), t: (B, F). Returns v (B, F, D) and a cache for ``backward``."""
        c = self.config
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        b, f, d = x.shape
        if d != c.frame_dim or t.shape != (b, f):
            raise ValueError("input shape does not match the field configuration")
        scalars, wp, scene, drops, view, mix, t_emb = self._features(t, cond)

        q, cq = self.mix_q.forward(mix)
        k, ck = self.mix_k.forward(mix)
        values = np.concatenate([x, wp], axis=-1)
        ctx, ca = attention_forward(q, k, values, cond.valid)
        ctx_x, ctx_wp = ctx[..., :d], ctx[..., d:]

        cvec = np.concatenate([scalars, wp, ctx_wp, drops, scene, view], axis=-1)
        hc1, cc1 = self.cond1.forward(cvec)
        ac1, cs1 = silu(hc1)
        h_c, cc2 = self.cond2.forward(ac1)

        if c.backbone == "mlp":
            corr, bcache = self._mlp_forward(x, ctx_x, h_c)
        else:
            corr, bcache = self._attn_forward(x, ctx_x, h_c)

        s, cs = self.skip.forward(t_emb)
        base = x - t[..., None] * ctx_x
        x1_hat = ctx_x + s * base + corr
        gamma, cg = self.gate.forward(t_emb)
        den = (1.0 - t + c.delta)[..., None]
        resid = (x1_hat - x) / den
        v = gamma * resid
        cache = (cq, ck, ca, cc1, cs1, cc2, bcache, cg, gamma, resid, den, d, cs, s, base, t)
        return v, cache

    def __call__(self, x, t, cond):
        return self.forward(x, t, cond)[0]

    def backward(self, dv: np.ndarray, cache) -> None:
        if cache is None:
            raise RuntimeError("backward needs the cache returned by forward")
        cq, ck, ca, cc1, cs1, cc2, bcache, cg, gamma, resid, den, d, cs, s, base, t = cache
        dgamma = (dv * resid).sum(axis=-1, keepdims=True)
        self.gate.backward(dgamma, cg)
        dx1 = dv * gamma / den
        self.skip.backward((dx1 * base).sum(axis=-1, keepdims=True), cs)
        if self.config.backbone == "mlp":
            dctx_x, dh_c = self._mlp_backward(dx1, bcache)
        else:
            dctx_x, dh_c = self._attn_backward(dx1, bcache)
        dctx_x = dctx_x + dx1 * (1.0 - s * t[..., None])

        dac1 = self.cond2.backward(dh_c, cc2)
        dcvec = self.cond1.backward(silu_backward(dac1, cs1), cc1)
        n_wp = self.n_wp
        lo = self.n_scalar + n_wp
        dctx_wp = dcvec[..., lo:lo + n_wp]

        dctx = np.concatenate([dctx_x, dctx_wp], axis=-1)
        dq, dk, _ = attention_backward(dctx, ca)
        self.mix_q.backward(dq, cq)
        self.mix_k.backward(dk, ck)

    # mlp backbone

    def _mlp_forward(self, x, ctx_x, h_c):
        u = np.concatenate([x, ctx_x], axis=-1)
        h_f, c_in = self.frame_in.forward(u)
        z, c_norm = self.norm.forward(h_f + h_c)
        a1, s1 = silu(z)
        h2, c_hid = self.hid.forward(a1)
        a2, s2 = silu(h2)
        corr, c_out = self.out.forward(a2)
        return corr, (c_in, c_norm, s1, c_hid, s2, c_out)

    def _mlp_backward(self, dcorr, cache):
        c_in, c_norm, s1, c_hid, s2, c_out = cache
        da2 = self.out.backward(dcorr, c_out)
        da1 = self.hid.backward(silu_backward(da2, s2), c_hid)
        dsum = self.norm.backward(silu_backward(da1, s1), c_norm)
        du = self.frame_in.backward(dsum, c_in)
        d = self.config.frame_dim
        return du[..., d:], dsum

    # attn backbone

    def _attn_forward(self, x, ctx_x, h_c):
        b, f, p = x.shape
        pos = np.broadcast_to(self.pos, (b, f) + self.pos.shape)
        tok = np.concatenate([x[..., None], ctx_x[..., None], pos], axis=-1)
        h_f, c_in = self.frame_in.forward(tok)
        z, c_norm = self.norm.forward(h_f + h_c[:, :, None, :])
        att, c_att = self.spatial.forward(z)
        h = z + att
        a1, s1 = silu(h)
        h2, c_hid = self.hid.forward(a1)
        a2, s2 = silu(h2)
        corr, c_out = self.out.forward(a2)
        return corr[..., 0], (c_in, c_norm, c_att, s1, c_hid, s2, c_out)

    def _attn_backward(self, dcorr, cache):
        c_in, c_norm, c_att, s1, c_hid, s2, c_out = cache
        da2 = self.out.backward(dcorr[..., None], c_out)
        da1 = self.hid.backward(silu_backward(da2, s2), c_hid)
        dh = silu_backward(da1, s1)
        dz = dh + self.spatial.backward(dh, c_att)
        dsum = self.norm.backward(dz, c_norm)
        dtok = self.frame_in.backward(dsum, c_in)
        return dtok[..., 1], dsum.sum(axis=2)

"""The pretrained transform pair plus its hyper path.

Analysis: feature embedding (stride-2 conv), four window-attention stages
with stride-2 convs between them, and a final latent projection.
Synthesis mirrors it with transposed convs and feature unembedding.  The
hyper encoder/decoder shrink the latent by another factor of four and
emit per-element Gaussian mean and scale for the conditional model; the
hyperlatent itself is modeled by a learned factorized density.

All parameters live in a flat name -> tensor map so checkpoints, freezing,
and checksums stay trivial.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionParams, swin_attention
from .entropy import SIGMA_MIN, FactorizedDensity

HEAD_CHANNELS = 16
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; every shape in the system follows."""

    stages: int = 4
    widths: tuple = (48, 64, 80, 96)
    depths: tuple = (1, 1, 2, 1)
    window: int = 4
    latent_channels: int = 96
    hyper_channels: int = 64
    hyper_depth: int = 1
    pad_multiple: int = 64

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if self.window < 2 or self.window % 2:
            raise ValueError(f"window must be even and >= 2, got {self.window}")
        if len(self.widths) != self.stages or len(self.depths) != self.stages:
            raise ValueError("widths and depths must list one entry per stage")
        for w in self.widths:
            if w % HEAD_CHANNELS:
                raise ValueError(f"stage width {w} not divisible by head size {HEAD_CHANNELS}")
        if self.latent_channels % HEAD_CHANNELS:
            raise ValueError("latent channels must be divisible by the head size")
        needed = 1 << (self.stages + 2)
        if self.pad_multiple % needed:
            raise ValueError(f"pad multiple must be a multiple of {needed}")
        if self.hyper_depth < 1:
            raise ValueError("hyper_depth must be >= 1")

    @property
    def decoder_depths(self):
        return tuple(reversed(self.depths))

    def heads(self, width):
        return width // HEAD_CHANNELS

    def canonical(self):
        """Deterministic config string; the source of the model id."""
        items = [
            ("depths", ",".join(map(str, self.depths))),
            ("hyper_channels", str(self.hyper_channels)),
            ("hyper_depth", str(self.hyper_depth)),
            ("latent_channels", str(self.latent_channels)),
            ("pad_multiple", str(self.pad_multiple)),
            ("stages", str(self.stages)),
            ("widths", ",".join(map(str, self.widths))),
            ("window", str(self.window)),
        ]
        return ";".join(f"{k}={v}" for k, v in items)


def fnv1a32(data):
    if isinstance(data, str):
        data = data.encode()
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def model_id(config):
    return fnv1a32(config.canonical())


class ParamDict:
    """Ordered name -> Tensor map plus non-trainable numpy buffers."""

    def __init__(self):
        self.tensors = {}
        self.buffers = {}

    def add(self, name, array, rng=None, std=None, dtype=np.float32):
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(array, dtype=dtype), requires_grad=True)
        self.tensors[name] = t
        return t

    def add_tensor(self, name, tensor):
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name}")
        self.tensors[name] = tensor
        return tensor

    def add_buffer(self, name, array):
        self.buffers[name] = np.asarray(array)
        return self.buffers[name]

    def scalar_count(self, prefix=None, include_buffers=True):
        n = sum(t.data.size for k, t in self.tensors.items()
                if prefix is None or k.startswith(prefix))
        if include_buffers:
            n += sum(b.size for k, b in self.buffers.items()
                     if prefix is None or k.startswith(prefix))
        return n

    def set_trainable(self, flag):
        for t in self.tensors.values():
            t.requires_grad = flag

    def zero_grads(self):
        for t in self.tensors.values():
            t.grad = None

    def state_items(self):
        """(name, array) pairs for serialization; buffers carry a '!' marker."""
        for k, t in self.tensors.items():
            yield k, t.data
        for k, b in self.buffers.items():
            yield "!" + k, b

    def load_state(self, items):
        got = dict(items)
        want = set(self.tensors) | {"!" + k for k in self.buffers}
        if set(got) != want:
            missing = sorted(want - set(got))[:4]
            extra = sorted(set(got) - want)[:4]
            raise ValueError(f"parameter names do not match: missing {missing}, unexpected {extra}")
        for k, t in self.tensors.items():
            arr = np.asarray(got[k], dtype=t.data.dtype)
            if arr.shape != t.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()
        for k in self.buffers:
            arr = np.asarray(got["!" + k], dtype=self.buffers[k].dtype)
            self.buffers[k][...] = arr

    def checksum(self):
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        for k in sorted(self.buffers):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.buffers[k]).tobytes())
        return h.hexdigest()


def _conv_init(rng, out_ch, in_ch, k, dtype, std=None):
    if std is None:
        std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k)).astype(dtype)


def _deconv_init(rng, in_ch, out_ch, k, dtype):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return rng.normal(0.0, std, size=(in_ch, out_ch, k, k)).astype(dtype)


def _linear_init(rng, rows, cols, dtype, std=0.02):
    return rng.normal(0.0, std, size=(rows, cols)).astype(dtype)


class Backbone:
    """Analysis/synthesis/hyper transforms over one shared parameter map."""

    def __init__(self, config, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.frozen = False
        self.params = ParamDict()
        rng = rng or np.random.default_rng(0)
        p, cfg = self.params, config
        c1 = cfg.widths[0]

        p.add("enc.fe.w", _conv_init(rng, c1, 3, 3, dtype), dtype=dtype)
        p.add("enc.fe.b", np.zeros(c1), dtype=dtype)
        for i in range(cfg.stages):
            self._add_stage(rng, f"enc.stage{i + 1}", cfg.widths[i], cfg.depths[i])
            if i < cfg.stages - 1:
                ci, co = cfg.widths[i], cfg.widths[i + 1]
                p.add(f"enc.down{i + 1}.w", _conv_init(rng, co, ci, 3, dtype), dtype=dtype)
                p.add(f"enc.down{i + 1}.b", np.zeros(co), dtype=dtype)
        m = cfg.latent_channels
        p.add("enc.latent.w", _conv_init(rng, m, cfg.widths[-1], 3, dtype), dtype=dtype)
        p.add("enc.latent.b", np.zeros(m), dtype=dtype)

        nh = cfg.hyper_channels
        for j in range(cfg.hyper_depth):
            ci = m if j == 0 else nh
            p.add(f"hyp_enc.c{j}.w", _conv_init(rng, nh, ci, 3, dtype), dtype=dtype)
            p.add(f"hyp_enc.c{j}.b", np.zeros(nh), dtype=dtype)
        for j in (1, 2):
            p.add(f"hyp_enc.d{j}.w", _conv_init(rng, nh, nh, 3, dtype), dtype=dtype)
            p.add(f"hyp_enc.d{j}.b", np.zeros(nh), dtype=dtype)

        self.density = FactorizedDensity(nh, rng, dtype=dtype)
        for name, t in self.density.named_tensors().items():
            p.add_tensor(name, t)

        for j in (1, 2):
            p.add(f"hyp_dec.u{j}.w", _deconv_init(rng, nh, nh, 4, dtype), dtype=dtype)
            p.add(f"hyp_dec.u{j}.b", np.zeros(nh), dtype=dtype)
        p.add("hyp_dec.out.w", _conv_init(rng, 2 * m, nh, 3, dtype), dtype=dtype)
        p.add("hyp_dec.out.b", np.zeros(2 * m), dtype=dtype)

        dec_widths = tuple(reversed(cfg.widths))
        p.add("dec.embed.w", _conv_init(rng, dec_widths[0], m, 3, dtype), dtype=dtype)
        p.add("dec.embed.b", np.zeros(dec_widths[0]), dtype=dtype)
        for i in range(cfg.stages):
            self._add_stage(rng, f"dec.stage{i + 1}", dec_widths[i], cfg.decoder_depths[i])
            if i < cfg.stages - 1:
                ci, co = dec_widths[i], dec_widths[i + 1]
                p.add(f"dec.up{i + 1}.w", _deconv_init(rng, ci, co, 4, dtype), dtype=dtype)
                p.add(f"dec.up{i + 1}.b", np.zeros(co), dtype=dtype)
        p.add("dec.fu.w", _deconv_init(rng, dec_widths[-1], 3, 4, dtype), dtype=dtype)
        p.add("dec.fu.b", np.zeros(3), dtype=dtype)

        self._attn = {}
        for prefix, width, depth in self._stage_specs():
            for l in range(depth):
                base = f"{prefix}.stl{l}"
                self._attn[base] = AttentionParams(
                    wq=p.tensors[f"{base}.attn.wq"],
                    wk=p.tensors[f"{base}.attn.wk"],
                    wv=p.tensors[f"{base}.attn.wv"],
                    wo=p.tensors[f"{base}.attn.wo"],
                    rel_bias=p.tensors[f"{base}.attn.bias"],
                    heads=cfg.heads(width),
                    window=cfg.window,
                )

    def _stage_specs(self):
        cfg = self.config
        dec_widths = tuple(reversed(cfg.widths))
        for i in range(cfg.stages):
            yield f"enc.stage{i + 1}", cfg.widths[i], cfg.depths[i]
        for i in range(cfg.stages):
            yield f"dec.stage{i + 1}", dec_widths[i], cfg.decoder_depths[i]

    def _add_stage(self, rng, prefix, width, depth):
        p, cfg = self.params, self.config
        d2 = cfg.window * cfg.window
        heads = cfg.heads(width)
        dt = self.dtype
        for l in range(depth):
            base = f"{prefix}.stl{l}"
            p.add(f"{base}.ln1.g", np.ones(width), dtype=dt)
            p.add(f"{base}.ln1.b", np.zeros(width), dtype=dt)
            for w in ("wq", "wk", "wv", "wo"):
                p.add(f"{base}.attn.{w}", _linear_init(rng, width, width, dt), dtype=dt)
            p.add(f"{base}.attn.bias", rng.normal(0.0, 0.02, size=(heads, d2, d2)), dtype=dt)
            p.add(f"{base}.ln2.g", np.ones(width), dtype=dt)
            p.add(f"{base}.ln2.b", np.zeros(width), dtype=dt)
            p.add(f"{base}.mlp.w1", _linear_init(rng, width, 2 * width, dt), dtype=dt)
            p.add(f"{base}.mlp.b1", np.zeros(2 * width), dtype=dt)
            p.add(f"{base}.mlp.w2", _linear_init(rng, 2 * width, width, dt), dtype=dt)
            p.add(f"{base}.mlp.b2", np.zeros(width), dtype=dt)

    # -- plumbing ---------------------------------------------------------------

    def freeze(self):
        self.frozen = True
        self.params.set_trainable(False)
        self.params.zero_grads()

    def unfreeze(self):
        self.frozen = False
        self.params.set_trainable(True)

    def checksum(self):
        return self.params.checksum()

    def group_counts(self):
        """Scalar counts for the analysis / hyper / synthesis parameter groups."""
        p = self.params
        return {
            "analysis": p.scalar_count("enc."),
            "hyper_encoder": p.scalar_count("hyp_enc.") + p.scalar_count("density."),
            "hyper_decoder": p.scalar_count("hyp_dec."),
            "synthesis": p.scalar_count("dec."),
        }

    def _conv(self, x, name, stride, padding=1):
        return ad.conv2d(x, self.params.tensors[f"{name}.w"], self.params.tensors[f"{name}.b"],
                         stride=stride, padding=padding)

    def _deconv(self, x, name, stride=2, padding=1):
        return ad.deconv2d(x, self.params.tensors[f"{name}.w"], self.params.tensors[f"{name}.b"],
                           stride=stride, padding=padding)

    def _stl(self, tokens, prompt, base, shifted, mask_prompts, recorder, tag):
        p = self.params.tensors
        h = ad.layer_norm(tokens, p[f"{base}.ln1.g"], p[f"{base}.ln1.b"])
        attn = swin_attention(h, prompt, self._attn[base], shifted,
                              mask_prompts=mask_prompts, recorder=recorder, tag=tag)
        tokens = ad.add(tokens, attn)
        h2 = ad.layer_norm(tokens, p[f"{base}.ln2.g"], p[f"{base}.ln2.b"])
        m = ad.gelu(ad.add(h2 @ p[f"{base}.mlp.w1"], p[f"{base}.mlp.b1"]))
        m = ad.add(m @ p[f"{base}.mlp.w2"], p[f"{base}.mlp.b2"])
        return ad.add(tokens, m)

    def _stb(self, x, prefix, depth, stage_prompts, mask_prompts, recorder, side, stage_idx):
        t = ad.transpose(x, (0, 2, 3, 1))
        for l in range(depth):
            prompt = None
            if stage_prompts is not None:
                prompt = ad.transpose(stage_prompts[l], (0, 2, 3, 1))
            t = self._stl(t, prompt, f"{prefix}.stl{l}", shifted=(l % 2 == 1),
                          mask_prompts=mask_prompts, recorder=recorder,
                          tag=(side, stage_idx, l))
        return ad.transpose(t, (0, 3, 1, 2))

    def _check_prompts(self, prompts, depths, side):
        if prompts is None:
            return
        if len(prompts) != len(depths):
            raise ValueError(f"{side} prompts cover {len(prompts)} stages, want {len(depths)}")
        for i, (stage, depth) in enumerate(zip(prompts, depths)):
            if len(stage) != depth:
                raise ValueError(f"{side} stage {i + 1} has {len(stage)} prompts, want {depth}")

    # -- transforms ----------------------------------------------------------------

    def analysis(self, x, prompts=None, mask_prompts=False, recorder=None):
        """Image (B, 3, H, W), H and W padded, -> latent (B, M, H/16, W/16).

        ``prompts`` supplies one (B, C_i, h/2, w/2) grid per attention layer
        per stage; None runs the plain (prompt-free) reference path.
        """
        cfg = self.config
        B, C, H, W = x.shape
        if H % cfg.pad_multiple or W % cfg.pad_multiple:
            raise ValueError(f"input {H}x{W} not padded to multiple of {cfg.pad_multiple}")
        self._check_prompts(prompts, cfg.depths, "encoder")
        t = self._conv(x, "enc.fe", stride=2)
        for i in range(cfg.stages):
            stage_prompts = prompts[i] if prompts is not None else None
            t = self._stb(t, f"enc.stage{i + 1}", cfg.depths[i], stage_prompts,
                          mask_prompts, recorder, "enc", i + 1)
            if i < cfg.stages - 1:
                t = self._conv(t, f"enc.down{i + 1}", stride=2)
        return self._conv(t, "enc.latent", stride=1)

    def hyper_encode(self, y):
        cfg = self.config
        t = y
        for j in range(cfg.hyper_depth):
            t = ad.leaky_relu(self._conv(t, f"hyp_enc.c{j}", stride=1), LEAKY_SLOPE)
        t = ad.leaky_relu(self._conv(t, "hyp_enc.d1", stride=2), LEAKY_SLOPE)
        return self._conv(t, "hyp_enc.d2", stride=2)

    def hyper_decode(self, zhat):
        """Hyperlatent -> (mean, scale), scale softplus-mapped and floored."""
        t = ad.leaky_relu(self._deconv(zhat, "hyp_dec.u1"), LEAKY_SLOPE)
        t = ad.leaky_relu(self._deconv(t, "hyp_dec.u2"), LEAKY_SLOPE)
        t = self._conv(t, "hyp_dec.out", stride=1)
        mean, raw = ad.split(t, 2, axis=1)
        sigma = ad.add(ad.softplus(raw), SIGMA_MIN)
        return mean, sigma

    def synthesis(self, yhat, prompts=None, mask_prompts=False, recorder=None):
        """Latent (B, M, h, w) -> image (B, 3, 16h, 16w), unclamped."""
        cfg = self.config
        self._check_prompts(prompts, cfg.decoder_depths, "decoder")
        t = self._conv(yhat, "dec.embed", stride=1)
        for i in range(cfg.stages):
            stage_prompts = prompts[i] if prompts is not None else None
            t = self._stb(t, f"dec.stage{i + 1}", cfg.decoder_depths[i], stage_prompts,
                          mask_prompts, recorder, "dec", i + 1)
            if i < cfg.stages - 1:
                t = self._deconv(t, f"dec.up{i + 1}")
        return self._deconv(t, "dec.fu")

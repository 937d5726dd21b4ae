"""Per-rate prompt networks: the only trainable pieces after stage 1.

An image-side generator distills the input into a single-channel map at
half resolution; a latent-side generator (one 3x3 conv) does the same for
the decoded latent.  A small stride-2 conv per stage re-channels the
running prompt to that stage's width at half the stage's token resolution,
and parameter-free shape-preserving max-pool chains give every attention
layer within a stage its own variant.

One PromptSet per target rate; serialized independently of the backbone.
"""

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import LEAKY_SLOPE, ParamDict, _conv_init, _deconv_init

EPG_CHANNELS = 16


class PromptSet:
    """Trainable prompt parameters for one rate point (one lambda)."""

    def __init__(self, config, lambda_id, lambda_value, rng=None, dtype=np.float32):
        self.config = config
        self.lambda_id = int(lambda_id)
        self.lambda_value = float(lambda_value)
        self.dtype = dtype
        self.params = ParamDict()
        rng = rng or np.random.default_rng(0)
        p, cfg = self.params, config
        ch = EPG_CHANNELS

        p.add("epg.b1.w", _conv_init(rng, ch, 3, 3, dtype), dtype=dtype)
        p.add("epg.b1.b", np.zeros(ch), dtype=dtype)
        self._add_bn(p, "epg.bn1", ch, dtype)
        p.add("epg.b2.w", _conv_init(rng, ch, ch, 3, dtype), dtype=dtype)
        p.add("epg.b2.b", np.zeros(ch), dtype=dtype)
        self._add_bn(p, "epg.bn2", ch, dtype)
        p.add("epg.up.w", _deconv_init(rng, ch, ch, 4, dtype), dtype=dtype)
        p.add("epg.up.b", np.zeros(ch), dtype=dtype)
        # final projections start at zero so fresh prompts are all-zero maps
        p.add("epg.out.w", np.zeros((1, ch, 1, 1)), dtype=dtype)
        p.add("epg.out.b", np.zeros(1), dtype=dtype)

        m = cfg.latent_channels
        p.add("dpg.conv.w", np.zeros((m, m, 3, 3)), dtype=dtype)
        p.add("dpg.conv.b", np.zeros(m), dtype=dtype)

        enc_in = (1,) + cfg.widths[:-1]
        for i in range(cfg.stages):
            p.add(f"enc_adapt.stage{i + 1}.w",
                  _conv_init(rng, cfg.widths[i], enc_in[i], 2, dtype), dtype=dtype)
            p.add(f"enc_adapt.stage{i + 1}.b", np.zeros(cfg.widths[i]), dtype=dtype)

        dec_widths = tuple(reversed(cfg.widths))
        p.add("dec_adapt.stage1.w", _conv_init(rng, dec_widths[0], m, 2, dtype), dtype=dtype)
        p.add("dec_adapt.stage1.b", np.zeros(dec_widths[0]), dtype=dtype)
        for i in range(1, cfg.stages):
            p.add(f"dec_adapt.stage{i + 1}.w",
                  _deconv_init(rng, dec_widths[i - 1], dec_widths[i], 2, dtype), dtype=dtype)
            p.add(f"dec_adapt.stage{i + 1}.b", np.zeros(dec_widths[i]), dtype=dtype)

    @staticmethod
    def _add_bn(p, name, ch, dtype):
        p.add(f"{name}.g", np.ones(ch), dtype=dtype)
        p.add(f"{name}.b", np.zeros(ch), dtype=dtype)
        p.add_buffer(f"{name}.mean", np.zeros(ch, dtype=dtype))
        p.add_buffer(f"{name}.var", np.ones(ch, dtype=dtype))

    def _bn(self, x, name, training):
        p = self.params
        return ad.batchnorm2d(x, p.tensors[f"{name}.g"], p.tensors[f"{name}.b"],
                              p.buffers[f"{name}.mean"], p.buffers[f"{name}.var"],
                              training=training)

    # -- generators --------------------------------------------------------------

    def image_prompt(self, x, training=False):
        """Image (B, 3, H, W) -> seed prompt (B, 1, H/2, W/2)."""
        p = self.params.tensors
        t = ad.conv2d(x, p["epg.b1.w"], p["epg.b1.b"], stride=1, padding=1)
        t = ad.leaky_relu(self._bn(t, "epg.bn1", training), LEAKY_SLOPE)
        t = ad.maxpool2d(t, 2, 2)
        t = ad.conv2d(t, p["epg.b2.w"], p["epg.b2.b"], stride=1, padding=1)
        t = ad.leaky_relu(self._bn(t, "epg.bn2", training), LEAKY_SLOPE)
        t = ad.maxpool2d(t, 2, 2)
        t = ad.deconv2d(t, p["epg.up.w"], p["epg.up.b"], stride=2, padding=1)
        return ad.conv2d(t, p["epg.out.w"], p["epg.out.b"], stride=1, padding=0)

    def latent_prompt(self, yhat):
        """Decoded latent (B, M, h, w) -> seed prompt of the same shape."""
        p = self.params.tensors
        return ad.conv2d(yhat, p["dpg.conv.w"], p["dpg.conv.b"], stride=1, padding=1)

    # -- layer-adaptive transforms ---------------------------------------------------

    def _chain(self, seed, prefix, depths, kinds):
        """Per-stage re-channeling convs plus per-layer max-pool variants.

        The stage conv consumes the previous stage's pre-pool prompt; each
        attention layer then receives the next link of a shape-preserving
        max-pool chain, so depth adds no parameters.
        """
        p = self.params.tensors
        prompts = []
        prev = seed
        for i, (depth, kind) in enumerate(zip(depths, kinds)):
            name = f"{prefix}.stage{i + 1}"
            if kind == "conv":
                cur = ad.conv2d(prev, p[f"{name}.w"], p[f"{name}.b"], stride=2, padding=0)
            else:
                cur = ad.deconv2d(prev, p[f"{name}.w"], p[f"{name}.b"], stride=2, padding=0)
            prev = cur
            layers = []
            pooled = cur
            for _ in range(depth):
                pooled = ad.maxpool2d(pooled, 3, 1, 1)
                layers.append(pooled)
            prompts.append(layers)
        return prompts

    def encoder_prompts(self, x, training=False):
        """One prompt grid per encoder attention layer, grouped by stage."""
        seed = self.image_prompt(x, training=training)
        kinds = ["conv"] * self.config.stages
        return self._chain(seed, "enc_adapt", self.config.depths, kinds)

    def decoder_prompts(self, yhat):
        """One prompt grid per decoder attention layer, grouped by stage."""
        seed = self.latent_prompt(yhat)
        kinds = ["conv"] + ["deconv"] * (self.config.stages - 1)
        return self._chain(seed, "dec_adapt", self.config.decoder_depths, kinds)

    def build_prompt_sets(self, x, yhat, training=False):
        """Complete prompt assignment for one encode/decode pass."""
        return self.encoder_prompts(x, training=training), self.decoder_prompts(yhat)

    # -- bookkeeping -------------------------------------------------------------------

    def scalar_count(self, include_buffers=True):
        return self.params.scalar_count(include_buffers=include_buffers)

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.float64(self.lambda_value).tobytes())
        h.update(bytes([self.lambda_id & 0xFF]))
        h.update(self.params.checksum().encode())
        return h.hexdigest()

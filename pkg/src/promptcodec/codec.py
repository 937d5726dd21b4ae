"""End-to-end encode/decode through the real bitstream.

The hyperlatent is rounded and coded with the learned per-channel tables;
the latent is coded as the rounded residual against the hyper-predicted
mean, with tables picked per element from the shared scale buckets.
Decoding replays the identical synthesis path, so file round trips are
bit-exact against the in-process forward on quantized latents.
"""

import numpy as np

from . import entropy as ent
from . import rangecoder as rc
from .autodiff import Tensor
from .backbone import model_id
from .dataio import crop_to, pad_to_multiple
from .formats import LAMBDA_BARE, BitstreamContainer, ContainerError, ModelIdError


class CoderTables:
    """Integer CDF tables for one backbone: per-channel factorized tables
    for the hyperlatent plus the shared Gaussian scale-bucket bank."""

    _gaussian_cache = None

    def __init__(self, backbone):
        self.factorized = ent.factorized_cdf_tables(backbone.density)
        if CoderTables._gaussian_cache is None:
            CoderTables._gaussian_cache = ent.gaussian_cdf_tables()
        self.gaussian = CoderTables._gaussian_cache


def quantize_latent(y, mean):
    """Round-mode latent quantization used on the coding path.

    Returns (yhat, residual_symbols): yhat = clamp(round(y - mean)) + mean.
    """
    r = np.clip(np.sign(y - mean) * np.floor(np.abs(y - mean) + 0.5),
                ent.SUPPORT_MIN, ent.SUPPORT_MAX).astype(np.int64)
    return r.astype(y.dtype) + mean, r


def quantize_hyper(z):
    zi = np.clip(np.sign(z) * np.floor(np.abs(z) + 0.5), ent.SUPPORT_MIN, ent.SUPPORT_MAX)
    return zi.astype(z.dtype)


def latent_stats(image, backbone, promptset=None, recorder=None):
    """Run the encode side only; returns the quantities the coder needs.

    image: (3, H, W) floats in [0, 1].  Output dict holds numpy arrays for
    yhat / residual symbols / mean / sigma / zhat plus the padding info.
    """
    cfg = backbone.config
    padded, size = pad_to_multiple(np.asarray(image, dtype=backbone.dtype), cfg.pad_multiple)
    xt = Tensor(padded[None])
    prompts = promptset.encoder_prompts(xt) if promptset is not None else None
    y = backbone.analysis(xt, prompts=prompts, recorder=recorder).data
    z = backbone.hyper_encode(Tensor(y)).data
    zhat = quantize_hyper(z)
    mean_t, sigma_t = backbone.hyper_decode(Tensor(zhat))
    mean, sigma = mean_t.data, sigma_t.data
    yhat, residual = quantize_latent(y, mean)
    return {
        "padded": padded,
        "size": size,
        "y": y,
        "yhat": yhat,
        "residual": residual,
        "mean": mean,
        "sigma": sigma,
        "zhat": zhat,
    }


def encode_image(image, backbone, promptset=None, tables=None):
    """Compress one image to a :class:`BitstreamContainer`."""
    tables = tables or CoderTables(backbone)
    stats = latent_stats(image, backbone, promptset)
    zhat, sigma, residual = stats["zhat"], stats["sigma"], stats["residual"]

    C = zhat.shape[1]
    z_syms = ent.symbols_from_values(zhat.astype(np.int64)).reshape(C, -1)
    z_idx = np.repeat(np.arange(C), z_syms.shape[1])
    z_payload = rc.encode_symbols(z_syms.reshape(-1), tables.factorized, table_idx=z_idx)

    buckets = ent.scale_to_bucket(sigma).reshape(-1)
    y_syms = ent.symbols_from_values(residual).reshape(-1)
    y_payload = rc.encode_symbols(y_syms, tables.gaussian, table_idx=buckets)

    h, w = stats["size"]
    ph, pw = stats["padded"].shape[1:]
    lam_id = promptset.lambda_id if promptset is not None else LAMBDA_BARE
    return BitstreamContainer(
        model_id=model_id(backbone.config), lambda_id=lam_id,
        width=w, height=h, padded_width=pw, padded_height=ph,
        z_payload=z_payload, y_payload=y_payload,
    )


def reconstruct(yhat, backbone, promptset=None):
    """Synthesis on a quantized latent; shared by decode and eval paths."""
    yt = Tensor(np.asarray(yhat, dtype=backbone.dtype))
    prompts = promptset.decoder_prompts(yt) if promptset is not None else None
    xhat = backbone.synthesis(yt, prompts=prompts)
    return np.clip(xhat.data[0], 0.0, 1.0)


def decode_image(container, backbone, promptsets=None, tables=None):
    """Decompress a container; ``promptsets`` maps lambda_id -> PromptSet."""
    if container.model_id != model_id(backbone.config):
        raise ModelIdError(
            f"container model id 0x{container.model_id:08x} does not match backbone"
        )
    promptset = None
    if container.lambda_id != LAMBDA_BARE:
        promptset = (promptsets or {}).get(container.lambda_id)
        if promptset is None:
            raise ContainerError(f"no prompt parameters for lambda id {container.lambda_id}")
    tables = tables or CoderTables(backbone)
    cfg = backbone.config
    ph, pw = container.padded_height, container.padded_width
    div_y = 1 << cfg.stages
    div_z = 1 << (cfg.stages + 2)
    zs = (1, cfg.hyper_channels, ph // div_z, pw // div_z)
    ys = (1, cfg.latent_channels, ph // div_y, pw // div_y)

    C = cfg.hyper_channels
    n_z = int(np.prod(zs))
    z_idx = np.repeat(np.arange(C), n_z // C)
    z_syms = rc.decode_symbols(container.z_payload, tables.factorized, n_z, table_idx=z_idx)
    zhat = ent.values_from_symbols(z_syms).reshape(zs).astype(backbone.dtype)

    mean_t, sigma_t = backbone.hyper_decode(Tensor(zhat))
    mean, sigma = mean_t.data, sigma_t.data
    buckets = ent.scale_to_bucket(sigma).reshape(-1)
    n_y = int(np.prod(ys))
    y_syms = rc.decode_symbols(container.y_payload, tables.gaussian, n_y, table_idx=buckets)
    residual = ent.values_from_symbols(y_syms).reshape(ys)
    yhat = residual.astype(backbone.dtype) + mean

    xhat = reconstruct(yhat, backbone, promptset)
    return crop_to(xhat, (container.height, container.width))


def estimated_rate_bits(stats, backbone, tables):
    """Code length implied by the quantized tables for one image's symbols."""
    C = stats["zhat"].shape[1]
    z_syms = ent.symbols_from_values(stats["zhat"].astype(np.int64)).reshape(C, -1)
    z_idx = np.repeat(np.arange(C), z_syms.shape[1])
    z_bits = ent.table_rate_bits(z_syms.reshape(-1), tables.factorized, z_idx)
    buckets = ent.scale_to_bucket(stats["sigma"]).reshape(-1)
    y_syms = ent.symbols_from_values(stats["residual"]).reshape(-1)
    y_bits = ent.table_rate_bits(y_syms, tables.gaussian, buckets)
    return z_bits, y_bits

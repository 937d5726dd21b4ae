"""Windowed multi-head self-attention with auxiliary prompt tokens.

Image tokens attend to themselves plus a half-resolution grid of prompt
tokens: queries come from image tokens only, keys and values from the
concatenation of both.  The pretrained relative-position bias covers the
image-image block; prompt key columns receive exactly zero bias.  Prompt
token outputs are never computed, so with prompt logits masked the layer
reduces to plain window attention.

Shifted layers cyclically shift image tokens by half a window and prompt
tokens by a quarter (the prompt grid lives at half resolution), and apply
the usual cross-boundary mask extended to prompt key columns by window
provenance.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e9


@dataclass
class AttentionParams:
    """Projection weights and positional bias for one attention layer.

    ``rel_bias`` has shape (heads, window^2, window^2) and covers image
    tokens only; :func:`expand_bias` appends the zero prompt columns.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    rel_bias: Tensor
    heads: int
    window: int

    def tensors(self):
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                "rel_bias": self.rel_bias}


class AttentionRecorder:
    """Collects, per layer, how much softmax mass queries spend on prompts.

    Each record is (tag, grid) where grid is a (B, h, w) numpy array of
    per-token prompt attention mass averaged over heads.
    """

    def __init__(self):
        self.records = []

    def add(self, tag, grid):
        self.records.append((tag, grid))


def window_partition(tokens, size):
    """(B, h, w, C) -> (B * nh * nw, size*size, C), row-major inside windows."""
    B, h, w, C = tokens.shape
    if h % size or w % size:
        raise ValueError(f"grid {h}x{w} not divisible by window {size}")
    nh, nw = h // size, w // size
    t = ad.reshape(tokens, (B, nh, size, nw, size, C))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (B * nh * nw, size * size, C))


def window_reverse(windows, size, h, w):
    """Inverse of :func:`window_partition`."""
    nh, nw = h // size, w // size
    B = windows.shape[0] // (nh * nw)
    t = ad.reshape(windows, (B, nh, nw, size, size, windows.shape[-1]))
    t = ad.transpose(t, (0, 1, 3, 2, 4, 5))
    return ad.reshape(t, (B, h, w, windows.shape[-1]))


def expand_bias(bias):
    """Append d^2/4 zero columns: (heads, d^2, d^2) -> (heads, d^2, d^2 + d^2/4)."""
    heads, q, k = bias.shape
    if q % 4:
        raise ValueError("window token count must be divisible by 4")
    zeros = Tensor(np.zeros((heads, q, q // 4), dtype=bias.data.dtype))
    return ad.concat([bias, zeros], axis=2)


def _subwindow_bias(params, size):
    """Bias block for a degenerate window of ``size`` < the trained window."""
    d = params.window
    sel = np.array([y * d + x for y in range(size) for x in range(size)])
    data = params.rel_bias.data[:, sel[:, None], sel[None, :]]
    return ad.Tensor._from_op(
        np.ascontiguousarray(data), (params.rel_bias,), _make_subwindow_bw(params.rel_bias, sel), "bias_subset"
    )


def _make_subwindow_bw(bias, sel):
    def bw(g):
        full = np.zeros_like(bias.data)
        full[:, sel[:, None], sel[None, :]] = g
        return (full,)

    return bw


def _region_ids(h, w, window, shift):
    ids = np.zeros((h, w), dtype=np.int64)
    region = 0
    cuts = (slice(0, h - window), slice(h - window, h - shift), slice(h - shift, h))
    cuts_w = (slice(0, w - window), slice(w - window, w - shift), slice(w - shift, w))
    for hs in cuts:
        for ws in cuts_w:
            ids[hs, ws] = region
            region += 1
    return ids


def _partition_ids(ids, size):
    h, w = ids.shape
    nh, nw = h // size, w // size
    return ids.reshape(nh, size, nw, size).transpose(0, 2, 1, 3).reshape(nh * nw, size * size)


def shifted_window_mask(h, w, size, with_prompt):
    """Additive cross-boundary mask (N, q, k): 0 within a region, -1e9 across.

    Prompt key columns are masked by the provenance of the half-resolution
    prompt grid, whose region boundaries align with the image grid's.
    """
    img_ids = _partition_ids(_region_ids(h, w, size, size // 2), size)
    key_ids = img_ids
    if with_prompt:
        p_ids = _partition_ids(_region_ids(h // 2, w // 2, size // 2, size // 4), size // 2)
        key_ids = np.concatenate([img_ids, p_ids], axis=1)
    mask = np.where(img_ids[:, :, None] == key_ids[:, None, :], 0.0, NEG_INF)
    return mask


def prompt_window_attention(img_win, prompt_win, params, mask=None, mask_prompts=False,
                            record_out=None):
    """Multi-head attention over window batches.

    img_win: (N, q, C) image tokens; prompt_win: (N, q/4, C) prompt tokens or
    None for the plain reference path.  Returns image-token outputs (N, q, C);
    prompt tokens contribute keys and values only.  ``mask`` is an additive
    (N_win, q, k) array applied per window position (broadcast over batch),
    ``mask_prompts`` drives prompt-column logits to -1e9, and ``record_out``
    (a dict) receives the per-query prompt attention mass under key "mass".
    """
    N, q, C = img_win.shape
    heads = params.heads
    if C % heads:
        raise ValueError(f"channels {C} not divisible by heads {heads}")
    ch = C // heads
    size = int(round(np.sqrt(q)))
    if size == params.window:
        bias = params.rel_bias
    else:
        bias = _subwindow_bias(params, size)

    if prompt_win is None:
        kv_src = img_win
    else:
        if prompt_win.shape[0] != N:
            raise ValueError(f"prompt windows {prompt_win.shape[0]} != image windows {N}")
        if prompt_win.shape[1] * 4 != q:
            raise ValueError(f"prompt window holds {prompt_win.shape[1]} tokens, want {q // 4}")
        kv_src = ad.concat([img_win, prompt_win], axis=1)
        bias = expand_bias(bias)
    kk = kv_src.shape[1]

    def heads_split(t):
        n, tokens, _ = t.shape
        t = ad.reshape(t, (n, tokens, heads, ch))
        return ad.transpose(t, (0, 2, 1, 3))

    qh = heads_split(img_win @ params.wq)
    kh = heads_split(kv_src @ params.wk)
    vh = heads_split(kv_src @ params.wv)

    logits = ad.mul(qh @ ad.transpose(kh, (0, 1, 3, 2)), 1.0 / np.sqrt(ch))
    logits = ad.add(logits, ad.reshape(bias, (1, heads, q, kk)))
    extra = np.zeros((N, 1, q, kk), dtype=img_win.data.dtype)
    if mask is not None:
        if mask.shape != (N, q, kk):
            raise ValueError(f"mask shape {mask.shape} incompatible with ({N}, {q}, {kk})")
        extra = extra + mask.astype(extra.dtype)[:, None, :, :]
    if mask_prompts and prompt_win is not None:
        extra[:, :, :, q:] += NEG_INF
    if mask is not None or (mask_prompts and prompt_win is not None):
        logits = ad.add(logits, Tensor(extra))

    weights = ad.softmax(logits)
    if record_out is not None:
        if prompt_win is None:
            record_out["mass"] = np.zeros((N, q), dtype=img_win.data.dtype)
        else:
            record_out["mass"] = weights.data[:, :, :, q:].sum(axis=-1).mean(axis=1)

    out = weights @ vh
    out = ad.transpose(out, (0, 2, 1, 3))
    out = ad.reshape(out, (N, q, C))
    return out @ params.wo


def swin_attention(tokens, prompt, params, shifted, mask_prompts=False, recorder=None, tag=None):
    """One (shifted-)window attention pass over a full token grid.

    tokens: (B, h, w, C); prompt: (B, ceil(h/2), ceil(w/2), C) or None.
    Handles degenerate grids smaller than the window (window = grid size,
    shift disabled when a single window covers the grid).
    """
    B, h, w, C = tokens.shape
    size = params.window
    if h < size or w < size:
        if h != w or h % 2:
            raise ValueError(f"degenerate grid {h}x{w} must be square and even")
        size = h
    single = (h == size and w == size)
    do_shift = shifted and not single
    if do_shift and size % 4:
        raise ValueError(f"shifted attention needs window divisible by 4, got {size}")

    if prompt is not None:
        hp, wp = prompt.shape[1], prompt.shape[2]
        if hp != (h + 1) // 2 or wp != (w + 1) // 2:
            raise ValueError(f"prompt grid {hp}x{wp} does not halve token grid {h}x{w}")

    if do_shift:
        tokens = ad.roll2d(tokens, -size // 2, -size // 2, axes=(1, 2))
        if prompt is not None:
            prompt = ad.roll2d(prompt, -size // 4, -size // 4, axes=(1, 2))
        mask = shifted_window_mask(h, w, size, with_prompt=prompt is not None)
    else:
        mask = None

    img_win = window_partition(tokens, size)
    prompt_win = window_partition(prompt, size // 2) if prompt is not None else None

    if mask is not None and B > 1:
        mask = np.tile(mask, (B, 1, 1))
    record_out = {} if recorder is not None else None
    out_win = prompt_window_attention(img_win, prompt_win, params, mask=mask,
                                      mask_prompts=mask_prompts, record_out=record_out)
    out = window_reverse(out_win, size, h, w)
    if do_shift:
        out = ad.roll2d(out, size // 2, size // 2, axes=(1, 2))

    if recorder is not None:
        nh, nw = h // size, w // size
        mass = record_out["mass"].reshape(B, nh, nw, size, size)
        mass = mass.transpose(0, 1, 3, 2, 4).reshape(B, h, w)
        if do_shift:
            mass = np.roll(mass, (size // 2, size // 2), axis=(1, 2))
        recorder.add(tag, mass)
    return out

"""Two-stage progressive optimization.

Stage 1 trains the whole backbone at the base lambda on the plain
(prompt-free) path.  Stage 2 freezes every backbone scalar and trains one
PromptSet per target lambda through the frozen transforms.

Loss convention (used identically in both stages): per-pixel rate plus
weighted per-pixel distortion,

    total = bpp + lambda * 255^2 * mean((x - xhat)^2)

with pixels in [0, 1] and the rate term covering both the latent and the
hyperlatent under noise-mode quantization.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import codec
from .autodiff import Tensor
from .backbone import model_id
from .dataio import batch_iter, to_uint8, worker_count
from .entropy import gaussian_likelihood, quantize, rate_bits
from .metrics import RDPoint, ms_ssim, psnr


@dataclass
class LossReport:
    """One training step's accounting; ``total == bpp + lam * distortion``."""

    total: float
    bpp: float
    distortion: float
    rate_y_bits: float
    rate_z_bits: float
    lam: float
    stage: int
    step: int


class Adam:
    """Standard Adam over a fixed, ordered name -> Tensor map."""

    def __init__(self, tensors, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.tensors = dict(tensors)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.tensors.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.tensors.items()}

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad.astype(t.data.dtype)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def rd_loss(batch, backbone, lam, rng, promptset=None, stage=1, step=0):
    """Noise-quantized rate-distortion loss; returns (loss Tensor, LossReport)."""
    xt = Tensor(np.asarray(batch, dtype=backbone.dtype))
    prompts_e = promptset.encoder_prompts(xt, training=True) if promptset is not None else None
    y = backbone.analysis(xt, prompts=prompts_e)
    z = backbone.hyper_encode(y)
    z_t = quantize(z, "noise", rng)
    mean, sigma = backbone.hyper_decode(z_t)
    y_t = quantize(y, "noise", rng)
    prompts_d = promptset.decoder_prompts(y_t) if promptset is not None else None
    xhat = backbone.synthesis(y_t, prompts=prompts_d)

    rate_y = rate_bits(gaussian_likelihood(y_t, mean, sigma))
    rate_z = rate_bits(backbone.density.likelihood(z_t))
    n_pixels = batch.shape[0] * batch.shape[2] * batch.shape[3]
    bpp = ad.mul(ad.add(rate_y, rate_z), 1.0 / n_pixels)
    mse = ad.tmean(ad.square(ad.sub(xt, xhat)))
    distortion = ad.mul(mse, 255.0**2)
    loss = ad.add(bpp, ad.mul(distortion, lam))

    if not np.isfinite(loss.item()):
        raise RuntimeError(
            f"non-finite loss at stage {stage} step {step}: "
            f"bpp={bpp.item()}, distortion={distortion.item()}"
        )
    bpp_f, dist_f = float(bpp.item()), float(distortion.item())
    report = LossReport(
        total=bpp_f + lam * dist_f, bpp=bpp_f, distortion=dist_f,
        rate_y_bits=float(rate_y.item()), rate_z_bits=float(rate_z.item()),
        lam=lam, stage=stage, step=step,
    )
    return loss, report


def loss_stage1(batch, backbone, lam0, rng, step=0):
    """Base-rate loss on the plain path (no prompts engaged)."""
    return rd_loss(batch, backbone, lam0, rng, promptset=None, stage=1, step=step)


def loss_stage2(batch, backbone, promptset, rng, step=0):
    """Per-lambda loss; gradients may reach only the PromptSet."""
    if not backbone.frozen:
        raise RuntimeError("stage 2 requires a frozen backbone")
    return rd_loss(batch, backbone, promptset.lambda_value, rng,
                   promptset=promptset, stage=2, step=step)


def _assert_no_backbone_grads(backbone):
    leaked = [k for k, t in backbone.params.tensors.items() if t.grad is not None]
    if leaked:
        raise RuntimeError(f"gradients routed to frozen backbone parameters: {leaked[:4]}")


class MetricsLog:
    """Append-only CSV: step, stage, lambda_id, loss, bpp, distortion."""

    HEADER = "step,stage,lambda_id,loss,bpp,distortion\n"

    def __init__(self, path):
        self.path = path
        if path and not os.path.exists(path):
            with open(path, "w") as f:
                f.write(self.HEADER)

    def append(self, report, lambda_id):
        if not self.path:
            return
        with open(self.path, "a") as f:
            f.write(f"{report.step},{report.stage},{lambda_id},"
                    f"{report.total:.6f},{report.bpp:.6f},{report.distortion:.6f}\n")


def train_stage1(backbone, train_cfg, images, metrics_path=None, checkpoint_cb=None):
    """Adam over shuffled random crops; deterministic given the seed."""
    backbone.unfreeze()
    rng = np.random.default_rng(train_cfg.seed)
    batches = batch_iter(images, train_cfg.crop, train_cfg.batch_size, rng)
    opt = Adam(backbone.params.tensors, lr=train_cfg.lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.eps)
    log = MetricsLog(metrics_path)
    reports = []
    for step in range(1, train_cfg.stage1_steps + 1):
        batch = next(batches).astype(backbone.dtype)
        opt.zero_grad()
        loss, report = loss_stage1(batch, backbone, train_cfg.lambda0, rng, step=step)
        loss.backward()
        opt.step()
        reports.append(report)
        log.append(report, 0xFF)
        if checkpoint_cb is not None and step % train_cfg.checkpoint_every == 0:
            checkpoint_cb(step)
    return reports


def train_stage2(backbone, promptset, train_cfg, images, metrics_path=None,
                 checkpoint_cb=None, steps=None):
    """Prompt tuning against a frozen backbone; backbone scalars are
    checksum-verified unchanged."""
    backbone.freeze()
    before = backbone.checksum()
    seed = train_cfg.seed + 1000 * (promptset.lambda_id + 1)
    rng = np.random.default_rng(seed)
    batches = batch_iter(images, train_cfg.crop, train_cfg.batch_size, rng)
    opt = Adam(promptset.params.tensors, lr=train_cfg.stage2_lr, beta1=train_cfg.beta1,
               beta2=train_cfg.beta2, eps=train_cfg.eps)
    log = MetricsLog(metrics_path)
    reports = []
    total = steps if steps is not None else train_cfg.stage2_steps
    for step in range(1, total + 1):
        batch = next(batches).astype(backbone.dtype)
        opt.zero_grad()
        loss, report = loss_stage2(batch, backbone, promptset, rng, step=step)
        loss.backward()
        _assert_no_backbone_grads(backbone)
        opt.step()
        reports.append(report)
        log.append(report, promptset.lambda_id)
        if checkpoint_cb is not None and step % train_cfg.checkpoint_every == 0:
            checkpoint_cb(step)
    if backbone.checksum() != before:
        raise RuntimeError("backbone scalars changed during stage-2 training")
    return reports


def rd_sweep(backbone, promptsets, images, lambda0, csv_path=None, threads=None):
    """Real-bitstream rate points for every (image, lambda) pair.

    ``images`` is a list of (name, array); ``promptsets`` a list of
    PromptSets sharing the backbone's architecture.  Rows come back sorted
    by image order then ascending lambda (the bare backbone serves
    lambda0).  Writes the pinned rd_points.csv schema when ``csv_path``.
    """
    mid = model_id(backbone.config)
    for ps in promptsets:
        if model_id(ps.config) != mid:
            raise ValueError(f"promptset lambda_id={ps.lambda_id} was built for a different model")
    entries = [(lambda0, 0xFF, None)] + [(ps.lambda_value, ps.lambda_id, ps) for ps in promptsets]
    entries.sort(key=lambda e: e[0])
    tables = codec.CoderTables(backbone)
    lookup = {ps.lambda_id: ps for ps in promptsets}

    def eval_one(item):
        name, image = item
        rows = []
        for lam, lam_id, ps in entries:
            container = codec.encode_image(image, backbone, ps, tables)
            xhat = codec.decode_image(container, backbone, lookup, tables)
            rows.append(RDPoint(image=name, lambda_id=lam_id, lambda_value=lam,
                                bpp=container.bpp(), psnr=psnr(image, xhat),
                                msssim=ms_ssim(image, xhat)))
        return rows

    n_workers = threads if threads is not None else worker_count()
    if n_workers > 1 and len(images) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_workers) as ex:
            grouped = list(ex.map(eval_one, images))
    else:
        grouped = [eval_one(item) for item in images]
    points = [p for rows in grouped for p in rows]
    if csv_path:
        from .dataio import write_csv

        write_csv(csv_path, ["image", "lambda_id", "bpp", "psnr", "msssim"],
                  [[p.image, p.lambda_id, f"{p.bpp:.6f}", f"{p.psnr:.6f}", f"{p.msssim:.6f}"]
                   for p in points])
    return points

"""CQ-AE and CQ-VAE networks, their objectives, and the training loops."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import greedy_assign, distance_matrix, sample_simplex
from .metrics import bias
from .quantize import (
    EPS,
    TemperatureSchedule,
    coordinate_map,
    coordinates,
    gumbel_max_sample,
    gumbel_noise,
    gumbel_softmax_sample,
)

log = logging.getLogger(__name__)


class TrainingDivergence(FloatingPointError):
    """A loss term went non-finite; ``term`` names it."""

    def __init__(self, term, value, step=None):
        self.term, self.value, self.step = term, value, step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"loss term {term!r} is {value}{where}")


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    alpha_cqae: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "alpha_cqae"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


def stream(seed, name):
    """Named RNG sub-stream of a root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def _dtype(config):
    return np.float64 if config.dtype == "float64" else np.float32


# -- networks ---------------------------------------------------------------

class ImageEncoder(ad.Module):
    """Stride-2 conv blocks, then a linear map to M x N logits."""

    def __init__(self, H, W, M, N, channels, rng, dtype=np.float32, in_channels=1):
        self.M, self.N = M, N
        self.convs = []
        c_in, h, w = in_channels, H, W
        for c in channels:
            self.convs.append(ad.Conv2d(c_in, c, 3, rng, stride=2, padding=1, dtype=dtype))
            c_in, h, w = c, (h - 1) // 2 + 1, (w - 1) // 2 + 1
        self.fc = ad.Linear(c_in * h * w, M * N, rng, dtype, init_scale=0.1)

    def forward(self, x):
        x = ad.as_tensor(x, dtype=self.fc.weight.dtype)
        if x.ndim == 3:
            x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
        for conv in self.convs:
            x = ad.relu(conv(x))
        x = x.reshape(x.shape[0], -1)
        return self.fc(x).reshape(-1, self.M, self.N)


class ShapeDecoder(ad.Module):
    """MLP from an M-vector to J points, added to a fixed offset shape."""

    def __init__(self, M, J, widths, rng, dtype=np.float32, offset=None):
        self.J = J
        self.mlp = ad.MLP([M, *widths, 2 * J], rng, dtype, last_init_scale=0.1)
        self.offset = np.full(2 * J, 0.5) if offset is None else np.asarray(offset, dtype=np.float64).reshape(2 * J)

    def forward(self, zprime):
        out = self.mlp(zprime) + self.offset.astype(self.mlp.layers[0].weight.dtype)
        return out.reshape(-1, self.J, 2)


class ShapeEncoder(ad.Module):
    """MLP from J points to M x N logits; inputs are centered on the decoder offset."""

    input_scale = 10.0

    def __init__(self, J, M, N, widths, rng, dtype=np.float32, offset=None):
        self.M, self.N = M, N
        self.mlp = ad.MLP([2 * J, *widths, M * N], rng, dtype)
        self.offset = np.full(2 * J, 0.5) if offset is None else np.asarray(offset, dtype=np.float64).reshape(2 * J)

    def forward(self, shapes):
        shapes = ad.as_tensor(shapes, dtype=self.mlp.layers[0].weight.dtype)
        x = (shapes.reshape(shapes.shape[0], -1) - self.offset.astype(shapes.dtype)) * self.input_scale
        return self.mlp(x).reshape(-1, self.M, self.N)


class ImageDecoder(ad.Module):
    """Linear map to a small feature map, then stride-2 transposed convs up to H x W."""

    def __init__(self, M, H, W, channels, rng, dtype=np.float32):
        ups = len(channels)
        if H % (2 ** ups) or W % (2 ** ups):
            raise ValueError(f"image size {H}x{W} is not divisible by 2**{ups}")
        self.h0, self.w0 = H // 2 ** ups, W // 2 ** ups
        widths = list(channels)[::-1]
        self.c0 = widths[0]
        self.fc = ad.Linear(M, self.c0 * self.h0 * self.w0, rng, dtype)
        self.deconvs = []
        c_in = self.c0
        for i, c in enumerate(widths[1:] + [1]):
            self.deconvs.append(ad.ConvTranspose2d(c_in, c, 4, rng, stride=2, padding=1, dtype=dtype))
            c_in = c

    def forward(self, zprime):
        x = ad.relu(self.fc(zprime)).reshape(-1, self.c0, self.h0, self.w0)
        for i, deconv in enumerate(self.deconvs):
            x = deconv(x)
            if i < len(self.deconvs) - 1:
                x = ad.relu(x)
        x = ad.sigmoid(x)
        return x.reshape(x.shape[0], x.shape[2], x.shape[3])


# -- objective terms --------------------------------------------------------

def _t(x):
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x)
    return Tensor(a, dtype=a.dtype if a.dtype.kind == "f" else np.float64)


def _log_probs(p, log_p):
    if log_p is not None:
        return _t(log_p)
    return ad.log(ad.add(_t(p), EPS))


def cqae_loss(x, xhat, z, alpha_cqae, log_z=None):
    """Squared reconstruction error plus ``alpha_cqae`` times the entropy of z."""
    x, xhat = _t(x), _t(xhat)
    if x.shape != xhat.shape:
        raise ad.ShapeError(f"cqae_loss: image shapes differ, {x.shape} vs {xhat.shape}")
    z = _t(z)
    log_z = _log_probs(z, log_z)
    rec = ad.sum_(ad.square(ad.sub(xhat, x)))
    ent = -ad.sum_(ad.mul(z, log_z))
    return rec + ent * alpha_cqae


def kl_to_uniform_tensor(p, log_p=None):
    """Sum over rows of KL(row || uniform), differentiable."""
    p = _t(p)
    log_p = _log_probs(p, log_p)
    n = p.shape[-1]
    rows = int(np.prod(p.shape[:-1]))
    return ad.sum_(ad.mul(p, log_p)) + rows * math.log(n)


def vae_term(pi, shapes=None, targets=None, shape_scale=1.0, log_pi=None):
    """Expected shape log-likelihood minus KL(q(z|x) || uniform prior).

    The likelihood is a unit-variance Gaussian on ``shape_scale``-scaled
    coordinates with the constant dropped; without (shapes, targets) it is
    zero, which is what a deterministic decoder gives.
    """
    kl = kl_to_uniform_tensor(pi, log_pi)
    if shapes is None:
        return -kl
    diff = ad.mul(ad.sub(_t(shapes), _t(targets)), shape_scale)
    return -ad.sum_(ad.square(diff)) - kl


def ae_term(q, z, log_q=None):
    """log q(z|s): the shape encoder's log-probability of the sampled code, summed over rows."""
    z = _t(z)
    log_q = _log_probs(q, log_q)
    if z.shape != log_q.shape:
        raise ad.ShapeError(f"ae_term: code shape {z.shape} vs encoder output {log_q.shape}")
    return ad.sum_(ad.mul(z, log_q))


def shape_log_likelihood(shapes, targets, shape_scale=1.0):
    """-||scale * (s - t)||^2 summed over everything."""
    diff = ad.mul(ad.sub(_t(shapes), _t(targets)), shape_scale)
    return -ad.sum_(ad.square(diff))


def total_objective(u_vae, u_ae, u_reg, u_best, weights, step=None):
    """Loss to minimize: -(U_VAE + alpha U_AE + U_reg + beta U_best)."""
    for name, term in (("U_VAE", u_vae), ("U_AE", u_ae), ("U_reg", u_reg), ("U_best", u_best)):
        value = term.item() if isinstance(term, Tensor) else float(term)
        if not math.isfinite(value):
            raise TrainingDivergence(name, value, step)
    u_vae, u_ae, u_reg, u_best = (_t(u) for u in (u_vae, u_ae, u_reg, u_best))
    total = u_vae + u_ae * weights.alpha + u_reg + u_best * weights.beta
    return -total


# -- models -----------------------------------------------------------------

class CQVAE(ad.Module):
    """Image encoder to q(z|x), shape decoder p(s|z) and shape encoder q(z|s)."""

    kind = "cqvae"

    def __init__(self, config, rng=None, shape_offset=None):
        self.config = config
        dtype = _dtype(config)
        rng = rng if rng is not None else stream(config.seed, "init")
        self.c = coordinates(config.N, *config.c_range)
        M, N, J = config.M, config.N, config.J
        self.image_encoder = ImageEncoder(config.H, config.W, M, N, config.encoder_channels, rng, dtype)
        self.shape_decoder = ShapeDecoder(M, J, config.decoder_widths, rng, dtype, offset=shape_offset)
        self.shape_encoder = ShapeEncoder(J, M, N, config.shape_encoder_widths, rng, dtype, offset=shape_offset)

    @property
    def dtype(self):
        return self.image_encoder.fc.weight.dtype

    def buffers(self):
        return {"c": self.c, "shape_offset": self.shape_decoder.offset}

    def load_buffers(self, buffers):
        self.c = np.asarray(buffers["c"], dtype=np.float64)
        self.shape_decoder.offset = np.asarray(buffers["shape_offset"], dtype=np.float64)
        self.shape_encoder.offset = self.shape_decoder.offset

    # differentiable pieces
    def encode(self, images):
        return self.image_encoder(images)

    def decode(self, zprime):
        return self.shape_decoder(zprime)

    def best_shape_tensor(self, log_pi):
        pi = ad.exp(log_pi)
        return self.decode(coordinate_map(pi, self.c))

    # inference helpers on a single image; all return numpy arrays
    def _batch(self, image):
        image = np.asarray(image)
        return image[None] if image.ndim == 2 else image

    def probabilities(self, image):
        with ad.no_grad():
            log_pi = ad.log_softmax(self.encode(self._batch(image)))
        p = np.exp(log_pi.data.astype(np.float64))
        p /= p.sum(axis=-1, keepdims=True)
        return p[0] if np.asarray(image).ndim == 2 else p

    def best_shape(self, image):
        """Decoded expected coordinates; no sampling."""
        with ad.no_grad():
            log_pi = ad.log_softmax(self.encode(self._batch(image)))
            s = self.best_shape_tensor(log_pi).data.astype(np.float64)
        return s[0] if np.asarray(image).ndim == 2 else s

    def decode_codes(self, codes):
        codes = np.asarray(codes, dtype=np.float64)
        with ad.no_grad():
            zprime = coordinate_map(codes, self.c).astype(self.dtype)
            return self.decode(Tensor(zprime)).data.astype(np.float64)

    def sample_codes(self, pi, count, rng):
        return np.stack([gumbel_max_sample(pi, rng) for _ in range(count)])

    def sample_shapes(self, image, l_max, rng):
        """l_max shapes, each decoded from an independent hard code drawn from q(z|x)."""
        if l_max < 1:
            raise ValueError("l_max must be >= 1")
        pi = self.probabilities(image)
        return self.decode_codes(self.sample_codes(pi, l_max, rng))

    def encode_shape_codes(self, shapes):
        """Argmax code recovered by the shape encoder, (K, M) column indices."""
        with ad.no_grad():
            logits = self.shape_encoder(np.asarray(shapes))
        return np.argmax(logits.data, axis=-1)


def draw_noise(batch_size, config, experts_count, rng_gumbel, rng_gt):
    return {
        "gumbel": gumbel_noise((batch_size, config.l_max, config.M, config.N), rng_gumbel),
        "gt_weights": np.stack([sample_simplex(config.k_max, experts_count, rng_gt) for _ in range(batch_size)]),
    }


def cqvae_objective(model, images, experts, consensus, tau, weights, noise, shape_scale=None,
                    straight_through=None, step=None):
    """Batch loss and its per-image term values.

    images (B, H, W); experts (B, E, J, 2); consensus (B, J, 2).  ``noise``
    carries the Gumbel draws (B, l_max, M, N) and the simplex weights for
    ground-truth sampling (B, k_max, E), so the loss is a deterministic
    function of the parameters.
    """
    cfg = model.config
    shape_scale = cfg.shape_scale if shape_scale is None else shape_scale
    straight_through = cfg.straight_through if straight_through is None else straight_through
    dtype = model.dtype
    B = len(images)
    L, K = noise["gumbel"].shape[1], noise["gt_weights"].shape[1]
    M, N, J = cfg.M, cfg.N, cfg.J

    log_pi = ad.log_softmax(model.encode(np.asarray(images, dtype=dtype)))  # (B, M, N)
    pi = ad.exp(log_pi)
    lp = log_pi.reshape(B, 1, M, N)
    y = gumbel_softmax_sample(None, tau, noise=np.asarray(noise["gumbel"], dtype=dtype),
                              straight_through=straight_through, log_pi=lp + np.zeros((1, L, 1, 1), dtype=dtype))
    codes = y.reshape(B * L, M, N)
    shapes = model.decode(coordinate_map(codes, model.c))  # (B*L, J, 2)

    # ground-truth samples and greedy matching happen outside the graph
    gt = np.einsum("bke,bejd->bkjd", noise["gt_weights"], np.asarray(experts, dtype=np.float64))
    model_np = shapes.data.reshape(B, L, J, 2)
    index = np.empty(B * K, dtype=np.int64)
    for b in range(B):
        match = greedy_assign(distance_matrix(gt[b], model_np[b]))
        index[b * K:(b + 1) * K] = b * L + match.assignment
    matched = ad.take(shapes, index)
    u_reg = shape_log_likelihood(matched, gt.reshape(B * K, J, 2).astype(dtype), shape_scale)

    u_vae = vae_term(pi, log_pi=log_pi)
    log_q = ad.log_softmax(model.shape_encoder(shapes))
    u_ae = ae_term(None, codes, log_q=log_q)

    s_best = model.best_shape_tensor(log_pi)
    u_best = shape_log_likelihood(s_best, np.asarray(consensus, dtype=dtype), shape_scale)

    terms = {"U_VAE": u_vae, "U_AE": u_ae, "U_reg": u_reg, "U_best": u_best}
    loss = total_objective(u_vae, u_ae, u_reg, u_best, weights, step) * (1.0 / B)
    info = {k: v.item() / B for k, v in terms.items()}
    info["loss"] = loss.item()
    info["entropy"] = float(-(pi.data * log_pi.data).sum() / B)
    return loss, info


class CQAE(ad.Module):
    """Conv encoder to a softmax code, transposed-conv decoder back to the image."""

    kind = "cqae"

    def __init__(self, config, rng=None):
        self.config = config
        dtype = _dtype(config)
        rng = rng if rng is not None else stream(config.seed, "init")
        S = config.cqae_size
        self.c = coordinates(config.cqae_N, *config.c_range)
        self.encoder = ImageEncoder(S, S, config.cqae_M, config.cqae_N, config.cqae_channels, rng, dtype)
        self.decoder = ImageDecoder(config.cqae_M, S, S, config.cqae_channels, rng, dtype)

    @property
    def dtype(self):
        return self.encoder.fc.weight.dtype

    def buffers(self):
        return {"c": self.c}

    def load_buffers(self, buffers):
        self.c = np.asarray(buffers["c"], dtype=np.float64)

    def forward(self, images):
        log_z = ad.log_softmax(self.encoder(np.asarray(images, dtype=self.dtype)))
        z = ad.exp(log_z)
        xhat = self.decoder(coordinate_map(z, self.c))
        return z, log_z, xhat

    def generate(self, codes):
        with ad.no_grad():
            zprime = coordinate_map(np.asarray(codes, dtype=np.float64), self.c).astype(self.dtype)
            return self.decoder(Tensor(zprime)).data.astype(np.float64)

    def codes(self, images):
        with ad.no_grad():
            log_z = ad.log_softmax(self.encoder(np.asarray(images, dtype=self.dtype)))
        return np.exp(log_z.data.astype(np.float64))


# -- training ---------------------------------------------------------------

def _row_max(z):
    return float(np.asarray(z).max(axis=-1).mean())


def learning_rate(config, step, total):
    """Linear warmup over ``warmup_steps``, then cosine decay to ``lr * lr_floor`` at ``total``."""
    lr = config.lr
    if config.warmup_steps:
        lr *= min(1.0, (step + 1) / config.warmup_steps)
    if config.lr_floor < 1 and total > config.warmup_steps:
        t = min(max(step - config.warmup_steps, 0) / (total - config.warmup_steps), 1.0)
        lr *= config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * t))
    return lr


class Trainer:
    """Optimizer, RNG streams and step counter for one model.

    The RNG streams are named ``data``, ``gumbel`` and ``gt``; the ``init``
    stream is consumed by model construction.
    """

    def __init__(self, model, config):
        self.model = model
        self.config = config
        self.opt = ad.Adam(model.parameters(), lr=config.lr, grad_clip=config.grad_clip or None)
        self.rngs = {name: stream(config.seed, name) for name in ("data", "gumbel", "gt")}
        self.epoch = 0
        self.step = 0
        self.history = []

    def rng_state(self):
        return {k: r.bit_generator.state for k, r in self.rngs.items()}

    def load_rng_state(self, state):
        for k, s in state.items():
            self.rngs[k].bit_generator.state = s

    def total_steps(self, n_records):
        return self.config.epochs * math.ceil(n_records / self.config.batch)

    def _batches(self, n):
        order = self.rngs["data"].permutation(n)
        bs = self.config.batch
        return [order[i:i + bs] for i in range(0, n, bs)]

    def _snapshot(self):
        return self.model.state_dict(), self.opt.state()

    def _restore(self, snap):
        self.model.load_state_dict(snap[0])
        self.opt.load_state(snap[1])


class CQVAETrainer(Trainer):
    def __init__(self, model, config, weights=None):
        super().__init__(model, config)
        self.weights = weights or LossWeights(config.alpha, config.beta, config.alpha_cqae)

    def fit(self, records, epochs=None, val_records=None, on_epoch=None, total_steps=None):
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        total = total_steps or self.total_steps(len(records))
        schedule = TemperatureSchedule(cfg.tau_start, cfg.tau_end, cfg.tau_steps or total)
        images = np.stack([r.image for r in records])
        experts = [np.asarray(r.experts) for r in records]
        consensus = np.stack([r.consensus for r in records])
        n_experts = experts[0].shape[0]
        experts = np.stack(experts)
        for _ in range(epochs):
            snap = self._snapshot()
            sums, count = {}, 0
            for idx in self._batches(len(records)):
                tau = schedule(self.step)
                noise = draw_noise(len(idx), cfg, n_experts, self.rngs["gumbel"], self.rngs["gt"])
                try:
                    loss, info = cqvae_objective(self.model, images[idx], experts[idx], consensus[idx], tau,
                                                 self.weights, noise, step=self.step)
                except TrainingDivergence:
                    self._restore(snap)
                    raise
                self.opt.zero_grad()
                loss.backward()
                self.opt.lr = learning_rate(cfg, self.step, total)
                self.opt.step()
                self.step += 1
                for k, v in info.items():
                    sums[k] = sums.get(k, 0.0) + v * len(idx)
                count += len(idx)
                if not math.isfinite(info["loss"]):
                    self._restore(snap)
                    raise TrainingDivergence("loss", info["loss"], self.step)
            self.epoch += 1
            row = {"epoch": self.epoch, "step": self.step, "tau": schedule(self.step)}
            row.update({k: v / count for k, v in sums.items()})
            if val_records:
                row["val_bias"] = float(np.mean([bias(self.model.best_shape(r.image), r.consensus)
                                                 for r in val_records]))
            self.history.append(row)
            log.info("epoch %d loss %.4f entropy %.3f", self.epoch, row["loss"], row["entropy"])
            if on_epoch:
                on_epoch(row)
        return self.history


class CQAETrainer(Trainer):
    def fit(self, images, epochs=None, on_epoch=None):
        cfg = self.config
        epochs = cfg.epochs if epochs is None else epochs
        images = np.asarray(images)
        for _ in range(epochs):
            snap = self._snapshot()
            sums = {"loss": 0.0, "reconstruction": 0.0, "entropy": 0.0, "row_max": 0.0}
            for idx in self._batches(len(images)):
                z, log_z, xhat = self.model(images[idx])
                loss = cqae_loss(images[idx].astype(self.model.dtype), xhat, z, cfg.alpha_cqae,
                                 log_z=log_z) * (1.0 / len(idx))
                if not math.isfinite(loss.item()):
                    self._restore(snap)
                    raise TrainingDivergence("L_CQAE", loss.item(), self.step)
                self.opt.zero_grad()
                loss.backward()
                self.opt.step()
                self.step += 1
                zd = z.data.astype(np.float64)
                ent = float(-(zd * log_z.data).sum())
                sums["loss"] += loss.item() * len(idx)
                sums["reconstruction"] += float(((xhat.data - images[idx]) ** 2).sum())
                sums["entropy"] += ent
                sums["row_max"] += _row_max(zd) * len(idx)
            self.epoch += 1
            row = {"epoch": self.epoch, "step": self.step}
            row.update({k: v / len(images) for k, v in sums.items()})
            self.history.append(row)
            if on_epoch:
                on_epoch(row)
        return self.history


def shape_offset(records):
    return np.mean([r.consensus for r in records], axis=0).reshape(-1)


def train(records, config, val_records=None, on_epoch=None):
    """Build a CQ-VAE for ``records`` and train it; returns (model, trainer)."""
    config.validate()
    if not records:
        raise ValueError("training set is empty")
    model = CQVAE(config, shape_offset=shape_offset(records))
    trainer = CQVAETrainer(model, config)
    trainer.fit(records, val_records=val_records, on_epoch=on_epoch)
    return model, trainer


def train_cqae(images, config, on_epoch=None):
    config.validate()
    model = CQAE(config)
    trainer = CQAETrainer(model, config)
    trainer.fit(images, on_epoch=on_epoch)
    return model, trainer

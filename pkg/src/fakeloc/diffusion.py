"""DDPM sampling, forward diffusion, RePaint-style mask-guided inpainting in
pixel space and in an autoencoder's latent space.

Tensors are (N, C, H, W) (or unbatched (C, H, W)) in diffusion value space
[-1, 1]. Every sampling function takes an explicit ``rng``: either a single
``torch.Generator`` shared by the batch, or a list with one generator per
batch item so that results do not depend on how samples are batched.
"""
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_state_into, save_checkpoint
from .errors import ConfigurationError, DomainError, ShapeError


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: tuple

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ConfigurationError("schedule needs at least one step")
        if not np.all((betas > 0) & (betas < 1)):
            raise ConfigurationError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", tuple(float(b) for b in betas))
        alphas = 1.0 - betas
        # index t = 0..T, with alpha_bar(0) = 1
        alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
        object.__setattr__(self, "_alphas", np.concatenate([[1.0], alphas]))
        object.__setattr__(self, "_alpha_bars", alpha_bars)
        object.__setattr__(self, "_betas", np.concatenate([[0.0], betas]))

    @property
    def T(self):
        return len(self.betas)

    def beta(self, t):
        return float(self._betas[t])

    def alpha(self, t):
        return float(self._alphas[t])

    def alpha_bar(self, t):
        return float(self._alpha_bars[t])

    def posterior_variance(self, t):
        """Variance of q(x_{t-1} | x_t, x_0); zero at t = 1."""
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))

    def to_dict(self):
        return {"betas": list(self.betas)}


def linear_schedule(T=50, beta_start=1e-4, beta_end=0.02):
    if T < 1:
        raise ConfigurationError("T must be >= 1")
    if T == 1:
        return DiffusionSchedule((beta_end,))
    return DiffusionSchedule(tuple(np.linspace(beta_start, beta_end, T)))


@dataclass
class NoisePredictorOutput:
    mean: torch.Tensor
    variance: torch.Tensor  # broadcastable to mean, nonnegative


@dataclass
class DiffusionState:
    x: torch.Tensor
    t: int


def randn_like(x, rng):
    if isinstance(rng, (list, tuple)):
        if x.dim() < 1 or len(rng) != x.shape[0]:
            raise ShapeError("need one generator per batch item")
        return torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in rng])
    return torch.randn(x.shape, generator=rng, dtype=x.dtype)


def _mask_like(mask, x):
    m = torch.as_tensor(mask)
    while m.dim() < x.dim():
        m = m.unsqueeze(-3) if m.dim() == x.dim() - 1 else m.unsqueeze(0)
    try:
        torch.broadcast_shapes(m.shape, x.shape)
    except RuntimeError as exc:
        raise ShapeError(f"mask {tuple(m.shape)} does not match image {tuple(x.shape)}") from exc
    if m.shape[-2:] != x.shape[-2:]:
        raise ShapeError(f"mask {tuple(m.shape)} does not match image {tuple(x.shape)}")
    return m > 0.5


def forward_diffuse(x0, t, schedule, rng):
    """Sample x_t ~ q(x_t | x_0); t = 0 returns x_0 itself without drawing noise."""
    if not 0 <= t <= schedule.T:
        raise DomainError(f"t must be in 0..{schedule.T}, got {t}")
    if t == 0:
        return DiffusionState(x0.clone(), 0)
    ab = schedule.alpha_bar(t)
    z = randn_like(x0, rng)
    return DiffusionState(math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * z, t)


def ddpm_reverse_step(state, predictor, schedule, rng):
    """Draw x_{t-1} ~ N(mu(x_t, t), Sigma(x_t, t))."""
    if state.t < 1:
        raise DomainError("cannot take a reverse step from t = 0")
    out = predictor(state.x, state.t)
    if out.mean.shape != state.x.shape:
        raise ShapeError("predictor mean does not match x_t")
    z = randn_like(state.x, rng)
    var = torch.as_tensor(out.variance, dtype=state.x.dtype)
    return DiffusionState(out.mean + torch.sqrt(var) * z, state.t - 1)


def ddpm_sample(predictor, schedule, shape, rng, clip=True, dtype=torch.float32):
    x = randn_like(torch.empty(shape, dtype=dtype), rng)
    state = DiffusionState(x, schedule.T)
    while state.t > 0:
        state = ddpm_reverse_step(state, predictor, schedule, rng)
    return state.x.clamp(-1, 1) if clip else state.x


def repaint_step(state, x0, mask, predictor, schedule, rng):
    """One reverse step; pixels outside the mask are replaced by x_0 diffused to t-1."""
    if x0.shape != state.x.shape:
        raise ShapeError(f"x0 {tuple(x0.shape)} does not match x_t {tuple(state.x.shape)}")
    m = _mask_like(mask, x0)
    generated = ddpm_reverse_step(state, predictor, schedule, rng)
    known = forward_diffuse(x0, state.t - 1, schedule, rng)
    return DiffusionState(torch.where(m, generated.x, known.x), state.t - 1)


def repaint_inpaint(x0, mask, predictor, schedule, rng, resample=1, clip=True, trace=None):
    """Full RePaint trajectory from x_T ~ N(0, I).

    ``resample`` > 1 re-noises x_{t-1} back to x_t and repeats the step.
    ``trace``, if given, receives every intermediate state.
    """
    if resample < 1:
        raise ConfigurationError("resample must be >= 1")
    _mask_like(mask, x0)
    state = DiffusionState(randn_like(x0, rng), schedule.T)
    while state.t > 0:
        t = state.t
        for r in range(resample):
            nxt = repaint_step(state, x0, mask, predictor, schedule, rng)
            if trace is not None:
                trace.append(nxt)
            if r < resample - 1:
                beta = schedule.beta(t)
                state = DiffusionState(math.sqrt(1 - beta) * nxt.x
                                       + math.sqrt(beta) * randn_like(nxt.x, rng), t)
        state = nxt
    return state.x.clamp(-1, 1) if clip else state.x


def downsize_mask_for_latent(mask, f):
    """Max-pool a binary mask by an integer factor: a cell is 1 iff any pixel in it is."""
    m = torch.as_tensor(mask)
    if f < 1:
        raise ConfigurationError("downsampling factor must be >= 1")
    h, w = m.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"mask {h}x{w} is not divisible by {f}")
    if f == 1:
        return m.clone()
    lead = m.shape[:-2]
    pooled = F.max_pool2d(m.reshape(-1, 1, h, w).float(), f)[:, 0]
    return pooled.reshape(*lead, h // f, w // f).to(m.dtype)


class IdentityCodec:
    f = 1
    clip_latent = True

    def encode(self, x):
        return x

    def decode(self, z):
        return z


def repaint_ldm_inpaint(x0, mask, codec, latent_predictor, schedule, rng, resample=1):
    """RePaint run on ``codec.encode(x0)`` with a max-pooled mask, then decoded."""
    h, w = x0.shape[-2:]
    if h % codec.f or w % codec.f:
        raise ShapeError(f"image {h}x{w} is not divisible by the codec factor {codec.f}")
    z0 = codec.encode(x0)
    m = downsize_mask_for_latent(mask, codec.f)
    z = repaint_inpaint(z0, m, latent_predictor, schedule, rng, resample=resample,
                        clip=codec.clip_latent)
    return codec.decode(z).clamp(-1, 1)


# ------------------------------------------------------------------ networks

def timestep_embedding(t, dim, T):
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t / T * 1000.0)[:, None] * freqs[None] / 10.0
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(8, ch), ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, ch)
        self.norm2 = nn.GroupNorm(min(8, ch), ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class ConvNoiseNet(nn.Module):
    """Small two-level U-Net predicting the added noise."""

    def __init__(self, channels=3, width=16, T=50, emb_dim=32):
        super().__init__()
        self.hparams = {"channels": channels, "width": width, "T": T, "emb_dim": emb_dim}
        self.T = T
        self.emb_dim = emb_dim
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1)
        self.down = nn.Conv2d(width, 2 * width, 3, stride=2, padding=1)
        self.mid1 = ResBlock(2 * width, emb_dim)
        self.mid2 = ResBlock(2 * width, emb_dim)
        self.up = nn.Conv2d(2 * width, width, 3, padding=1)
        self.out_block = ResBlock(width, emb_dim)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t):
        emb = self.emb_mlp(timestep_embedding(t, self.emb_dim, self.T).to(x.dtype))
        if emb.shape[0] == 1 and x.shape[0] != 1:
            emb = emb.expand(x.shape[0], -1)
        h0 = self.conv_in(x)
        h = F.silu(self.down(F.silu(h0)))
        h = self.mid2(self.mid1(h, emb), emb)
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest")) + h0
        h = self.out_block(h, emb)
        return self.conv_out(F.silu(h))


class MLPNoiseNet(nn.Module):
    """Fully-connected noise predictor for tiny rasters."""

    def __init__(self, channels=1, size=8, hidden=256, T=50, emb_dim=32):
        super().__init__()
        self.hparams = {"channels": channels, "size": size, "hidden": hidden, "T": T, "emb_dim": emb_dim}
        self.T = T
        self.emb_dim = emb_dim
        d = channels * size * size
        self.inp = nn.Linear(d + emb_dim, hidden)
        self.body = nn.Sequential(nn.SiLU(), nn.Linear(hidden, hidden), nn.SiLU(),
                                  nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, d))

    def forward(self, x, t):
        emb = timestep_embedding(t, self.emb_dim, self.T).to(x.dtype)
        emb = emb.expand(x.shape[0], -1)
        h = self.inp(torch.cat([x.flatten(1), emb], dim=1))
        return self.body(h).reshape(x.shape)


class EpsilonPredictor:
    """Turns a noise-prediction network into the (mean, variance) of the reverse step.

    The variance is the schedule's posterior variance. With ``clip_denoised``
    the implied x_0 estimate is clipped to [-1, 1] before forming the mean.
    """

    def __init__(self, net, schedule, clip_denoised=True):
        self.net = net
        self.schedule = schedule
        self.clip_denoised = clip_denoised

    @torch.no_grad()
    def __call__(self, x_t, t):
        s = self.schedule
        batched = x_t.dim() == 4
        xb = x_t if batched else x_t.unsqueeze(0)
        dtype = next(self.net.parameters()).dtype
        eps = self.net(xb.to(dtype), torch.full((xb.shape[0],), t, dtype=torch.long)).to(x_t.dtype)
        eps = eps if batched else eps[0]
        ab, ab_prev, beta = s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t)
        if self.clip_denoised:
            x0 = ((x_t - math.sqrt(1 - ab) * eps) / math.sqrt(ab)).clamp(-1, 1)
            c0 = math.sqrt(ab_prev) * beta / (1 - ab)
            ct = math.sqrt(s.alpha(t)) * (1 - ab_prev) / (1 - ab)
            mean = c0 * x0 + ct * x_t
        else:
            mean = (x_t - beta / math.sqrt(1 - ab) * eps) / math.sqrt(s.alpha(t))
        var = torch.tensor(s.posterior_variance(t), dtype=x_t.dtype)
        return NoisePredictorOutput(mean, var)


class ConvAutoencoder(nn.Module):
    """Deterministic convolutional autoencoder with spatial factor ``f`` (a power of 2)."""

    def __init__(self, channels=3, latent_channels=4, width=32, f=2):
        super().__init__()
        if f < 2 or f & (f - 1):
            raise ConfigurationError("autoencoder factor must be a power of 2 >= 2")
        self.hparams = {"channels": channels, "latent_channels": latent_channels, "width": width, "f": f}
        levels = int(math.log2(f))
        enc = [nn.Conv2d(channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            enc += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.SiLU()]
        enc.append(nn.Conv2d(width, latent_channels, 1))
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(levels):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        dec.append(nn.Conv2d(width, channels, 3, padding=1))
        self.decoder = nn.Sequential(*dec)

    def forward(self, x):
        return self.decoder(self.encoder(x))


class AutoencoderCodec:
    """Latent codec around a trained autoencoder; latents are scaled to unit spread."""

    clip_latent = False

    def __init__(self, autoencoder, scale=1.0):
        self.autoencoder = autoencoder.eval()
        self.f = autoencoder.hparams["f"]
        self.scale = float(scale)

    @torch.no_grad()
    def encode(self, x):
        batched = x.dim() == 4
        z = self.autoencoder.encoder(x if batched else x[None]) / self.scale
        return z if batched else z[0]

    @torch.no_grad()
    def decode(self, z):
        batched = z.dim() == 4
        x = self.autoencoder.decoder((z if batched else z[None]) * self.scale)
        return x if batched else x[0]


# ------------------------------------------------------------------ training

def _batches(n, batch_size, steps, gen):
    perm = torch.randperm(n, generator=gen)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = torch.randperm(n, generator=gen)
            pos = 0
        yield perm[pos:pos + batch_size]
        pos += batch_size


def train_noise_predictor(net, data, schedule, steps=1000, batch_size=16, lr=2e-3, seed=0):
    """Standard noise-prediction objective; ``data`` is (N, C, H, W) in [-1, 1]."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    net.train()
    losses = []
    ab = torch.tensor(schedule._alpha_bars, dtype=data.dtype)
    for idx in _batches(len(data), min(batch_size, len(data)), steps, gen):
        x0 = data[idx]
        t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
        z = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
        a = ab[t][:, None, None, None]
        xt = a.sqrt() * x0 + (1 - a).sqrt() * z
        loss = F.mse_loss(net(xt, t), z)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    net.eval()
    return losses


def train_autoencoder(ae, data, steps=500, batch_size=16, lr=2e-3, seed=0):
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    ae.train()
    losses = []
    for idx in _batches(len(data), min(batch_size, len(data)), steps, gen):
        x = data[idx]
        loss = F.mse_loss(ae(x), x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    ae.eval()
    return losses


@torch.no_grad()
def latent_scale(ae, data):
    return float(ae.encoder(data).std())


# --------------------------------------------------------------- checkpoints

_NETS = {"conv-noise-net": ConvNoiseNet, "mlp-noise-net": MLPNoiseNet, "autoencoder": ConvAutoencoder}


def save_network(path, kind, net, **extra):
    if kind not in _NETS:
        raise ConfigurationError(f"unknown network kind {kind!r}")
    return save_checkpoint(path, kind, {"hparams": net.hparams, **extra}, net.state_dict())


def load_network(path, kind=None):
    kind, config, arrays = load_checkpoint(path, kind)
    if kind not in _NETS:
        raise ConfigurationError(f"checkpoint {path} does not hold a diffusion network")
    net = _NETS[kind](**config["hparams"])
    load_state_into(net, arrays)
    extra = {k: v for k, v in config.items() if k != "hparams"}
    return net.eval(), extra


def save_predictor(path, net, schedule, clip_denoised=True):
    kind = "mlp-noise-net" if isinstance(net, MLPNoiseNet) else "conv-noise-net"
    return save_network(path, kind, net, schedule=schedule.to_dict(), clip_denoised=clip_denoised)


def load_predictor(path):
    net, extra = load_network(path)
    if "schedule" not in extra:
        raise ConfigurationError(f"{path} is not a noise-predictor checkpoint")
    schedule = DiffusionSchedule(tuple(extra["schedule"]["betas"]))
    return EpsilonPredictor(net, schedule, extra.get("clip_denoised", True)), schedule


def save_codec(path, codec):
    return save_network(path, "autoencoder", codec.autoencoder, scale=codec.scale)


def load_codec(path):
    net, extra = load_network(path, "autoencoder")
    return AutoencoderCodec(net, extra["scale"])

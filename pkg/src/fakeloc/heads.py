"""Localization heads on the shared backbone: GradCam, Patches, Attention, and
the fully-supervised FCN localizer, plus their losses."""
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, BackboneConfig, init_parameters
from .errors import ConfigurationError, DomainError, ShapeError

EPS = 1e-7
HEADS = ("gradcam", "patches", "attention", "fcn")


@dataclass
class LocalizationMap:
    values: torch.Tensor  # (h, w) or (N, h, w), entries in [0, 1]
    source_head: str
    native_size: tuple

    def __post_init__(self):
        if self.source_head not in HEADS:
            raise ConfigurationError(f"unknown head {self.source_head!r}")
        if self.native_size is None:
            self.native_size = tuple(self.values.shape[-2:])


@dataclass
class DetectionScore:
    probability: torch.Tensor  # scalar or (N,)


@dataclass(frozen=True)
class AttentionLossConfig:
    lam: float = 1.0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ConfigurationError("lambda must be nonnegative")


def bce(target, prob, eps=EPS):
    """Elementwise binary cross-entropy with the probability clamped to [eps, 1 - eps]."""
    prob = prob.clamp(eps, 1 - eps)
    return -(target * torch.log(prob) + (1 - target) * torch.log1p(-prob))


# --------------------------------------------------------------------- GradCam

def grad_cam(activation, score):
    """Grad-CAM map for an activation that ``score`` depends on.

    ``activation`` is (N, C, h, w) and ``score`` is (N,) with samples
    independent of each other. Returns ``(maps, weights)`` with maps (N, h, w)
    max-normalized to [0, 1] and weights (N, C).
    """
    grads, = torch.autograd.grad(score.sum(), activation, retain_graph=True, allow_unused=True)
    if grads is None:
        grads = torch.zeros_like(activation)
    weights = grads.mean(dim=(2, 3))
    cam = F.relu((weights[:, :, None, None] * activation).sum(1))
    peak = cam.amax(dim=(1, 2), keepdim=True)
    cam = torch.where(peak > 0, cam / torch.where(peak > 0, peak, torch.ones_like(peak)), cam)
    return cam.detach(), weights.detach()


def gradcam_map(model, image, target_block):
    if not isinstance(model, Backbone) or model.fc is None:
        raise ConfigurationError("GradCam needs a backbone with a classification top")
    if not 1 <= target_block <= model.num_blocks:
        raise ConfigurationError(f"target_block must be in 1..{model.num_blocks}")
    with torch.enable_grad():
        feats = model.forward_features(image, target_block)
        act = feats.activations[target_block]
        if not act.requires_grad:
            act.requires_grad_(True)
        logit = model.forward_from(act, target_block)
        cam, _ = grad_cam(act, logit)
    return LocalizationMap(cam, "gradcam", tuple(cam.shape[-2:]))


# --------------------------------------------------------------------- Patches

class PatchesModel(nn.Module):
    """Backbone truncated after ``truncation`` blocks with a 1x1 projection to 2 patch classes."""

    kind = "patches"

    def __init__(self, backbone_config, truncation=2):
        super().__init__()
        self.truncation = truncation
        # configs need two blocks; a cut after block 1 drops the second one
        self.trunk = Backbone(backbone_config.truncated(max(truncation, 2), classifier=False))
        del self.trunk.blocks[truncation:]
        self.project = nn.Conv2d(self.trunk.config.channel_widths[truncation - 1], 2, 1)

    def spec(self):
        return {"backbone": self.trunk.config.to_dict(), "truncation": self.truncation}

    def forward(self, image):
        feats = self.trunk.forward_features(image, self.truncation).activations[self.truncation]
        return self.project(F.relu(feats))


def patches_forward(model, image):
    if not isinstance(model, PatchesModel):
        raise ConfigurationError("patches_forward needs a truncated PatchesModel")
    logits = model(image)
    probs = torch.softmax(logits, dim=1)[:, 1]
    return LocalizationMap(probs, "patches", tuple(probs.shape[-2:])), logits


def patches_aggregate(per_patch_probs):
    values = per_patch_probs.values if isinstance(per_patch_probs, LocalizationMap) else per_patch_probs
    values = torch.as_tensor(values)
    if values.numel() == 0 or values.shape[-1] == 0 or values.shape[-2] == 0:
        raise ShapeError("cannot aggregate an empty patch map")
    return DetectionScore(values.mean(dim=(-2, -1)))


# ------------------------------------------------------------------- Attention

class AttentionModel(nn.Module):
    """Trunk -> sigmoid mask -> feature modulation -> remaining blocks -> score."""

    kind = "attention"

    def __init__(self, backbone_config, insertion=3):
        super().__init__()
        if not 1 <= insertion < backbone_config.num_blocks:
            raise ConfigurationError("attention insertion must leave at least one head block")
        self.insertion = insertion
        self.net = Backbone(backbone_config.truncated(backbone_config.num_blocks, classifier=True))
        self.mask_conv = nn.Conv2d(backbone_config.channel_widths[insertion - 1], 1, 3, padding=1)

    def spec(self):
        return {"backbone": self.net.config.to_dict(), "insertion": self.insertion}

    def forward(self, image, mask_override=None):
        feats = self.net.forward_features(image, self.insertion).activations[self.insertion]
        mask = torch.sigmoid(self.mask_conv(F.relu(feats)))[:, 0]
        if mask_override is not None:
            mask = torch.as_tensor(mask_override, dtype=feats.dtype).expand_as(mask)
        head_input = feats * mask[:, None]
        logit = self.net.forward_from(head_input, self.insertion)
        return {"mask": mask, "logit": logit, "score": torch.sigmoid(logit), "head_input": head_input}


def attention_forward(model, image, mask_override=None):
    if not isinstance(model, AttentionModel):
        raise ConfigurationError("attention_forward needs an AttentionModel")
    out = model(image, mask_override)
    return LocalizationMap(out["mask"], "attention", tuple(out["mask"].shape[-2:])), DetectionScore(out["score"])


def attention_loss(y, y_hat, m_hat, cfg=AttentionLossConfig()):
    """CE(y, y_hat) + lambda * CE(y, max m_hat), averaged over the batch.

    The max routes its gradient to the first maximal element (row-major).
    """
    y_hat = y_hat.probability if isinstance(y_hat, DetectionScore) else y_hat
    m_hat = m_hat.values if isinstance(m_hat, LocalizationMap) else m_hat
    if not torch.is_tensor(y_hat):
        y_hat = torch.as_tensor(y_hat, dtype=torch.float64)
    m_hat = torch.as_tensor(m_hat, dtype=y_hat.dtype)
    y = torch.as_tensor(y, dtype=y_hat.dtype)
    if not torch.all((y == 0) | (y == 1)):
        raise DomainError("labels must be 0 or 1")
    flat = m_hat.reshape(*y_hat.shape, -1) if y_hat.dim() else m_hat.reshape(-1)
    idx = flat.argmax(dim=-1, keepdim=True)  # first maximum
    m_max = flat.gather(-1, idx).squeeze(-1)
    loss = bce(y, y_hat) + cfg.lam * bce(y, m_max)
    return loss.mean()


# ------------------------------------------------------------ FCN localizer

class FCNLocalizer(nn.Module):
    """Backbone truncated at the GradCam block with a 1x1 convolution + sigmoid."""

    kind = "fcn"

    def __init__(self, backbone_config, truncation=3):
        super().__init__()
        self.truncation = truncation
        self.trunk = Backbone(backbone_config.truncated(truncation, classifier=False))
        self.project = nn.Conv2d(self.trunk.config.channel_widths[-1], 1, 1)

    def spec(self):
        return {"backbone": self.trunk.config.to_dict(), "truncation": self.truncation}

    def forward(self, image):
        feats = self.trunk.forward_features(image, self.truncation).activations[self.truncation]
        return self.project(F.relu(feats))[:, 0]


def fcn_localizer_forward(model, image):
    if not isinstance(model, FCNLocalizer):
        raise ConfigurationError("fcn_localizer_forward needs an FCNLocalizer")
    probs = torch.sigmoid(model(image))
    return LocalizationMap(probs, "fcn", tuple(probs.shape[-2:]))


# ----------------------------------------------------------- supervised loss

def downsize_mask(mask, size):
    """Area-average a binary mask (H, W) or (N, H, W) to ``size``; values stay in [0, 1]."""
    mask = torch.as_tensor(mask)
    squeeze = mask.dim() == 2
    m = mask.reshape(-1, 1, *mask.shape[-2:]).to(torch.float64 if mask.dtype == torch.float64
                                                  else torch.float32)
    out = F.adaptive_avg_pool2d(m, tuple(size))[:, 0]
    return out[0] if squeeze else out


def supervised_loss(head, prediction, ground_truth_mask):
    """Mean per-cell BCE between a prediction map and the mask downsized to its raster."""
    if head not in HEADS:
        raise ConfigurationError(f"unknown head {head!r}")
    pred = prediction.values if isinstance(prediction, LocalizationMap) else prediction
    target = downsize_mask(ground_truth_mask, pred.shape[-2:]).to(pred.dtype)
    if target.shape != pred.shape:
        raise ShapeError(f"mask {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
    return bce(target, pred).mean()


def build_head_model(kind, backbone_config, seed=0, **kwargs):
    cls = {"patches": PatchesModel, "attention": AttentionModel, "fcn": FCNLocalizer}.get(kind)
    if kind == "gradcam":
        model = Backbone(backbone_config)
    elif cls is None:
        raise ConfigurationError(f"unknown head {kind!r}")
    else:
        model = cls(backbone_config, **kwargs)
    init_parameters(model, seed)
    return model.eval()


def model_spec(model):
    if isinstance(model, Backbone):
        return "gradcam", {"backbone": model.config.to_dict()}
    return model.kind, model.spec()


def model_from_spec(kind, spec):
    cfg = BackboneConfig.from_dict(spec["backbone"])
    if kind == "gradcam":
        return Backbone(cfg)
    if kind == "patches":
        return PatchesModel(cfg, spec["truncation"])
    if kind == "fcn":
        return FCNLocalizer(cfg, spec["truncation"])
    if kind == "attention":
        return AttentionModel(cfg, spec["insertion"])
    raise ConfigurationError(f"unknown model kind {kind!r}")

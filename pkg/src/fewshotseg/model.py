"""Encoder / relation / decoder network for few-shot binary segmentation.

Support images enter the shared encoder with their binary mask stacked as a
fourth channel; queries get an all-zero fourth channel. Per-stage support
features are averaged over the K shots, the deepest fused support map is
concatenated with the deepest query map and passed through two pointwise
convolutions, and a U-Net style decoder restores full resolution using both
support and query encoder maps as skip connections.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LOGIT_CLAMP = 15.0


@dataclass(frozen=True)
class ModelConfig:
    n_stages: int = 4
    base_channels: int = 16
    channel_growth: int = 2
    convs_per_stage: int = 2
    relation_hidden: Optional[int] = None  # defaults to deepest encoder width
    relation_channels: Optional[int] = None
    input_size: int = 224
    max_channels: Optional[int] = None  # cap on stage width

    def validate(self):
        for name in ("n_stages", "base_channels", "channel_growth", "convs_per_stage", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("relation_hidden", "relation_channels", "max_channels"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        if self.input_size % (2 ** self.n_stages):
            raise ValueError(
                f"input size {self.input_size} is not divisible by 2^{self.n_stages}")
        return self

    def stage_channels(self, stage):
        """Width of encoder stage ``stage`` (1-based)."""
        width = self.base_channels * self.channel_growth ** (stage - 1)
        return min(width, self.max_channels) if self.max_channels else width

    @property
    def deep_channels(self):
        return self.stage_channels(self.n_stages)

    @property
    def hidden(self):
        return self.relation_hidden or self.deep_channels

    @property
    def relation_width(self):
        return self.relation_channels or self.deep_channels

    def decoder_channels(self, block):
        """Output width of decoder block ``block`` (1-based), halving back to base."""
        return self.stage_channels(max(self.n_stages - block, 1))

    def side(self, stage):
        return self.input_size // 2 ** stage

    def to_dict(self):
        return dataclasses.asdict(self)


PRESETS = {
    "tiny": ModelConfig(n_stages=2, base_channels=4, convs_per_stage=1),
    "small": ModelConfig(n_stages=4, base_channels=8, convs_per_stage=1),
    "desk": ModelConfig(n_stages=4, base_channels=16, convs_per_stage=2),
    # VGG-16 depth: five pooling stages, widths 64, 128, 256, 512, 512
    "vgg16": ModelConfig(n_stages=5, base_channels=64, channel_growth=2, convs_per_stage=2,
                         max_channels=512),
}


class Encoder(nn.Module):
    def __init__(self, config: ModelConfig, in_channels: int = 4):
        super().__init__()
        self.stages = nn.ModuleList()
        c_in = in_channels
        for stage in range(1, config.n_stages + 1):
            layers = []
            c_out = config.stage_channels(stage)
            for _ in range(config.convs_per_stage):
                layers += [nn.Conv2d(c_in, c_out, 3, padding=1), nn.ReLU()]
                c_in = c_out
            layers.append(nn.MaxPool2d(2))
            self.stages.append(nn.Sequential(*layers))

    def forward(self, x):
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


class Relation(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.deep_channels
        self.conv1 = nn.Conv2d(2 * c, config.hidden, 1)
        self.conv2 = nn.Conv2d(config.hidden, config.relation_width, 1)

    def forward(self, support, query):
        x = torch.cat([support, query], dim=1)
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class Decoder(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.n_stages = config.n_stages
        self.blocks = nn.ModuleList()
        c_in = config.relation_width
        for block in range(1, config.n_stages + 1):
            skip_stage = config.n_stages - block
            skip = 2 * config.stage_channels(skip_stage) if skip_stage >= 1 else 0
            c_out = config.decoder_channels(block)
            self.blocks.append(nn.Conv2d(c_in + skip, c_out, 3, padding=1))
            c_in = c_out
        self.head = nn.Conv2d(c_in, 1, 1)

    def forward(self, relation_map, support_skips, query_skips):
        """Return clamped logits of shape (Q, H, W).

        ``support_skips``/``query_skips`` hold the encoder maps of stages
        1..n-1 (shallow first); the deepest stage feeds the relation module.
        """
        if len(support_skips) < self.n_stages - 1 or len(query_skips) < self.n_stages - 1:
            raise ValueError(
                f"decoder needs skips for {self.n_stages - 1} stages, got "
                f"{len(support_skips)} support / {len(query_skips)} query")
        x = relation_map
        for block, conv in enumerate(self.blocks, start=1):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            stage = self.n_stages - block
            if stage >= 1:
                s, q = support_skips[stage - 1], query_skips[stage - 1]
                if s.shape[-2:] != x.shape[-2:] or q.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"skip for stage {stage} has wrong spatial size")
                x = torch.cat([x, s.expand(x.shape[0], -1, -1, -1), q], dim=1)
            x = F.relu(conv(x))
        return self.head(x)[:, 0].clamp(-LOGIT_CLAMP, LOGIT_CLAMP)


class FewShotSegNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config.validate()
        self.encoder = Encoder(config)
        self.relation = Relation(config)
        self.decoder = Decoder(config)

    def logits(self, support_images, support_masks, query_images):
        """Support images (K,3,H,W), masks (K,H,W), queries (Q,3,H,W) -> (Q,H,W) logits."""
        _check_inputs(self.config, support_images, support_masks, query_images)
        support_maps = [encode(self, im[None], m[None])
                        for im, m in zip(support_images, support_masks)]
        fused = fuse_supports(support_maps)
        query_maps = encode(self, query_images)
        rel = relate(self, fused[-1], query_maps[-1])
        return self.decoder(rel, fused[:-1], query_maps[:-1])

    def forward(self, support_images, support_masks, query_images):
        return torch.sigmoid(self.logits(support_images, support_masks, query_images))


def _check_inputs(config, support_images, support_masks, query_images):
    size = config.input_size
    if support_images.ndim != 4 or support_images.shape[1:] != (3, size, size):
        raise ValueError(f"support images must be (K,3,{size},{size}), got {tuple(support_images.shape)}")
    if support_masks.shape != (support_images.shape[0], size, size):
        raise ValueError(f"support masks must be (K,{size},{size}), got {tuple(support_masks.shape)}")
    if query_images.ndim != 4 or query_images.shape[1:] != (3, size, size):
        raise ValueError(f"query images must be (Q,3,{size},{size}), got {tuple(query_images.shape)}")
    if support_images.shape[0] < 1:
        raise ValueError("at least one support pair is required")


def init_params(config: ModelConfig, seed: int) -> FewShotSegNet:
    """Build a network with fan-in scaled normal weights and zero biases."""
    config.validate()
    model = FewShotSegNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            else:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) * (2.0 / fan_in) ** 0.5)
    return model


def encode(model: FewShotSegNet, images, masks=None):
    """Encode (N,3,H,W) images; ``masks`` (N,H,W) fills the fourth channel (zeros if absent)."""
    if masks is None:
        extra = images.new_zeros(images.shape[0], 1, *images.shape[-2:])
    else:
        extra = masks.to(images.dtype)[:, None]
    return model.encoder(torch.cat([images, extra], dim=1))


def fuse_supports(support_maps: Sequence[Sequence[torch.Tensor]]):
    """Average K per-stage feature lists into one list.

    Uses a running mean in fixed order, so K copies of one support reproduce
    that support bit-for-bit.
    """
    if len(support_maps) == 0:
        raise ValueError("at least one support is required")
    fused = list(support_maps[0])
    for k, maps in enumerate(support_maps[1:], start=2):
        if len(maps) != len(fused) or any(a.shape != b.shape for a, b in zip(maps, fused)):
            raise ValueError("support feature maps differ in shape")
        fused = [m + (x - m) / k for m, x in zip(fused, maps)]
    return fused


def relate(model: FewShotSegNet, fused_support_deep, query_deep):
    if fused_support_deep.shape[1:] != query_deep.shape[1:]:
        raise ValueError(
            f"support {tuple(fused_support_deep.shape)} and query "
            f"{tuple(query_deep.shape)} deep maps differ")
    return model.relation(fused_support_deep.expand(query_deep.shape[0], -1, -1, -1), query_deep)


def decode(model: FewShotSegNet, relation_map, support_skips, query_skips):
    return torch.sigmoid(model.decoder(relation_map, support_skips, query_skips))


def forward(model: FewShotSegNet, support_images, support_masks, query_images):
    return model(support_images, support_masks, query_images)


def to_tensor_image(image: np.ndarray, dtype=torch.float32):
    """HxWx3 float image -> 3xHxW tensor."""
    return torch.as_tensor(np.ascontiguousarray(image.transpose(2, 0, 1)), dtype=dtype)


def predict(model: FewShotSegNet, support_pairs, query_images) -> np.ndarray:
    """Numpy convenience wrapper: returns (Q,H,W) probabilities."""
    dtype = next(model.parameters()).dtype
    s_img = torch.stack([to_tensor_image(p.image, dtype) for p in support_pairs])
    s_mask = torch.stack([torch.as_tensor(p.mask, dtype=dtype) for p in support_pairs])
    q_img = torch.stack([to_tensor_image(im, dtype) for im in query_images])
    with torch.no_grad():
        return model(s_img, s_mask, q_img).numpy()


def multiway_segment(model: FewShotSegNet, per_class_supports, query_image, threshold=0.5):
    """Label map for a C-way task: 0 is background, class c (1-based) wins by argmax."""
    if len(per_class_supports) < 1:
        raise ValueError("need at least one class support set")
    probs = np.stack([predict(model, pairs, [query_image])[0] for pairs in per_class_supports])
    return combine_class_probs(probs, threshold)


def combine_class_probs(probs: np.ndarray, threshold=0.5) -> np.ndarray:
    """(C,H,W) per-class foreground probabilities -> label map in 0..C."""
    best = np.argmax(probs, axis=0)  # first maximum wins ties
    top = np.take_along_axis(probs, best[None], axis=0)[0]
    return np.where(top >= threshold, best + 1, 0).astype(np.int64)


# -- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: FewShotSegNet, *, seed=0, episode=0, optimizer=None,
                    train_config=None, extra=None):
    state = {
        "config": model.config.to_dict(),
        "seed": seed,
        "episode": episode,
        "weights": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "train_config": train_config,
        "extra": extra or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    return path


def load_checkpoint(path):
    """Return (model, state dict with seed/episode/optimizer/train_config)."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    config = ModelConfig(**state["config"])
    model = FewShotSegNet(config)
    model.load_state_dict(state["weights"])
    if any(v.dtype == torch.float64 for v in state["weights"].values()):
        model.double()
        model.load_state_dict(state["weights"])
    return model, state


def params_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, v in sorted(model.state_dict().items()):
        h.update(name.encode())
        buf = io.BytesIO()
        np.save(buf, v.detach().cpu().numpy())
        h.update(buf.getvalue())
    return h.hexdigest()

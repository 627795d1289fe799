"""A deliberately small single-stage detector.

Four strided conv blocks produce one 16x-downsampled feature map; on top sit
a per-class sigmoid classifier (one row per class, so heads can be fused
row-wise) and a class-agnostic box regressor predicting center-to-edge
distances in stride units.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ..errors import CheckpointError, DetectorError, FreezePolicyError

STRIDE = 16
DEFAULT_WIDTHS = (16, 32, 48, 64)
HEAD_INIT_STD = 0.01
CLASSIFIER_PRIOR = 0.01   # initial positive probability of every class row


@dataclass(frozen=True)
class Predictions:
    logits: torch.Tensor      # [B, L, C]
    deltas: torch.Tensor      # [B, L, 4] distances (l, t, r, b) / stride
    locations: torch.Tensor   # [L, 2] pixel centers (x, y)


class RowLinear(nn.Module):
    """Per-row linear head applied location-wise.

    The reduction runs over the feature axis of one row at a time, so a row's
    output is bit-identical no matter how many other rows the head carries
    (matmul blocking could otherwise reorder the summation when heads of
    different widths are compared).
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features))

    def forward(self, feats: torch.Tensor) -> torch.Tensor:  # [B, L, F] -> [B, L, R]
        return (feats.unsqueeze(-2) * self.weight).sum(-1) + self.bias


class DetectionHead(nn.Module):
    def __init__(self, feature_dim: int, num_classes: int):
        super().__init__()
        self.classifier = RowLinear(feature_dim, num_classes)
        self.regressor = RowLinear(feature_dim, 4)


def _block(cin: int, cout: int) -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, stride=1, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    ]


class DetectorModel(nn.Module):
    stride = STRIDE

    def __init__(self, num_classes: int, class_ids: tuple[int, ...],
                 widths: tuple[int, ...] = DEFAULT_WIDTHS):
        super().__init__()
        if num_classes < 1:
            raise DetectorError("need at least one class")
        if len(class_ids) != num_classes:
            raise DetectorError(
                f"{len(class_ids)} class ids for {num_classes} classifier rows")
        if list(class_ids) != sorted(class_ids):
            raise DetectorError("class_ids must be sorted ascending")
        layers: list[nn.Module] = []
        cin = 3
        for cout in widths:
            layers.extend(_block(cin, cout))
            cin = cout
        self.representation = nn.Sequential(*layers)
        self.detector = DetectionHead(widths[-1], num_classes)
        self.num_classes = num_classes
        self.class_ids = tuple(int(c) for c in class_ids)
        self.widths = tuple(widths)

    def forward(self, images: torch.Tensor) -> Predictions:
        if images.ndim != 4 or images.shape[1] != 3:
            raise DetectorError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
        feats = self.representation(images)          # [B, F, H', W']
        b, f, fh, fw = feats.shape
        flat = feats.permute(0, 2, 3, 1).reshape(b, fh * fw, f)
        logits = self.detector.classifier(flat)
        deltas = self.detector.regressor(flat)
        ys, xs = torch.meshgrid(
            torch.arange(fh, dtype=images.dtype, device=images.device),
            torch.arange(fw, dtype=images.dtype, device=images.device),
            indexing="ij")
        locations = torch.stack(
            [(xs + 0.5) * self.stride, (ys + 0.5) * self.stride], dim=-1
        ).reshape(-1, 2)
        return Predictions(logits=logits, deltas=deltas, locations=locations)


def classifier_prior_bias(prior: float = CLASSIFIER_PRIOR) -> float:
    return -float(np.log((1.0 - prior) / prior))


def _init_head(head: DetectionHead, generator: torch.Generator) -> None:
    head.classifier.weight.data.normal_(0.0, HEAD_INIT_STD, generator=generator)
    head.classifier.bias.data.fill_(classifier_prior_bias())
    head.regressor.weight.data.normal_(0.0, HEAD_INIT_STD, generator=generator)
    head.regressor.bias.data.zero_()


def build_detector(num_classes: int, class_ids: tuple[int, ...], seed: int,
                   widths: tuple[int, ...] = DEFAULT_WIDTHS) -> DetectorModel:
    """Deterministically initialized detector (He-init conv, prior-bias head)."""
    model = DetectorModel(num_classes, class_ids, widths)
    g = torch.Generator().manual_seed(seed)
    for module in model.representation.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            module.weight.data.normal_(0.0, float(np.sqrt(2.0 / fan_in)), generator=g)
            module.bias.data.zero_()
        elif isinstance(module, nn.GroupNorm):
            module.weight.data.fill_(1.0)
            module.bias.data.zero_()
    _init_head(model.detector, g)
    return model


def reinit_head(model: DetectorModel, new_num_classes: int,
                new_class_ids: tuple[int, ...], seed: int) -> DetectorModel:
    """Copy the representation bit-exactly; draw a fresh head for the new classes."""
    if new_num_classes < 1:
        raise DetectorError("new_num_classes must be >= 1")
    out = DetectorModel(new_num_classes, new_class_ids, model.widths)
    out.representation.load_state_dict(
        copy.deepcopy(model.representation.state_dict()))
    _init_head(out.detector, torch.Generator().manual_seed(seed))
    return out


# --- freeze policy -------------------------------------------------------------


@dataclass(frozen=True)
class FreezePolicy:
    trainable: frozenset[str]   # parameter-name prefixes that stay trainable


HEAD_ONLY = FreezePolicy(trainable=frozenset({"detector.classifier", "detector.regressor"}))
ALL_TRAINABLE = FreezePolicy(trainable=frozenset({"representation", "detector"}))


def apply_freeze_policy(model: DetectorModel,
                        policy: FreezePolicy) -> tuple[list[str], list[str]]:
    """Partition parameters into trainable/frozen by name prefix.

    Frozen parameters get requires_grad=False so no optimizer or backward pass
    can touch them. Every prefix must match at least one parameter.
    """
    names = [n for n, _ in model.named_parameters()]
    for prefix in policy.trainable:
        if not any(n.startswith(prefix) for n in names):
            raise FreezePolicyError(f"freeze prefix {prefix!r} matches no parameter")
    trainable, frozen = [], []
    for name, param in model.named_parameters():
        if any(name.startswith(p) for p in policy.trainable):
            param.requires_grad_(True)
            trainable.append(name)
        else:
            param.requires_grad_(False)
            frozen.append(name)
    return trainable, frozen


# --- checkpoints ----------------------------------------------------------------


def checkpoint_from_model(model: DetectorModel, stage: str) -> dict:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "meta": {
            "num_classes": model.num_classes,
            "stage": stage,
            "class_ids": list(model.class_ids),
            "widths": list(model.widths),
        },
        "state_dict": state,
    }


def save_checkpoint(model: DetectorModel, path, stage: str) -> dict:
    ckpt = checkpoint_from_model(model, stage)
    torch.save(ckpt, path)
    return ckpt


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    validate_checkpoint(ckpt)
    return ckpt


def validate_checkpoint(ckpt: dict) -> None:
    if not isinstance(ckpt, dict) or "meta" not in ckpt or "state_dict" not in ckpt:
        raise CheckpointError("checkpoint must carry 'meta' and 'state_dict'")
    meta = ckpt["meta"]
    for key in ("num_classes", "class_ids", "widths"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta missing {key!r}")
    state = ckpt["state_dict"]
    weight = state.get("detector.classifier.weight")
    if weight is None:
        raise CheckpointError("checkpoint missing detector.classifier.weight")
    if weight.shape[0] != meta["num_classes"]:
        raise CheckpointError(
            f"classifier has {weight.shape[0]} rows but meta declares "
            f"{meta['num_classes']} classes")
    if len(meta["class_ids"]) != meta["num_classes"]:
        raise CheckpointError("class_ids length disagrees with num_classes")


def model_from_checkpoint(ckpt: dict) -> DetectorModel:
    validate_checkpoint(ckpt)
    meta = ckpt["meta"]
    model = DetectorModel(meta["num_classes"], tuple(meta["class_ids"]),
                          tuple(meta["widths"]))
    model.load_state_dict(ckpt["state_dict"])
    return model


def state_digest(state_dict: dict, prefix: str = "") -> str:
    """sha256 over the named float32 arrays (stable across save/load)."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        if not name.startswith(prefix):
            continue
        h.update(name.encode())
        tensor = state_dict[name]
        arr = tensor.detach().cpu().contiguous().numpy() if torch.is_tensor(tensor) else np.asarray(tensor)
        h.update(arr.tobytes())
    return h.hexdigest()


def representation_digest(model_or_ckpt) -> str:
    state = (model_or_ckpt["state_dict"] if isinstance(model_or_ckpt, dict)
             else model_or_ckpt.state_dict())
    return state_digest(state, prefix="representation.")

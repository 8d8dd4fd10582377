"""Frozen ResNet-50 feature extractor with a trainable fully connected head."""
from __future__ import annotations

import hashlib
import io
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torchvision.models.resnet import Bottleneck, ResNet

from .errors import ConfigError, ModelLoadError, ShapeError

log = logging.getLogger(__name__)

FEATURE_DIM = 2048
INPUT_SIZE = (224, 224)

# Reference layout of the 50-layer network.
RESNET50_STAGE_BLOCKS = (3, 4, 6, 3)
RESNET50_CONV1 = {"filters": 64, "kernel": (7, 7), "stride": (2, 2)}


@dataclass(frozen=True)
class BackboneSpec:
    weights_path: str | None = None
    weights_sha256: str | None = None
    depth: int = 50
    conv1_filters: int = 64
    conv1_kernel: int = 7
    conv1_stride: int = 2
    stage_blocks: tuple[int, ...] = RESNET50_STAGE_BLOCKS
    include_classifier_top: bool = False

    def to_json(self) -> dict:
        d = asdict(self)
        d["stage_blocks"] = list(self.stage_blocks)
        return d

    @classmethod
    def from_json(cls, data: dict) -> "BackboneSpec":
        data = dict(data)
        if "stage_blocks" in data:
            data["stage_blocks"] = tuple(data["stage_blocks"])
        return cls(**data)


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int = 3
    hidden_units: int = 512
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.hidden_units < 1:
            raise ConfigError("hidden_units must be >= 1")

    def to_json(self) -> dict:
        return asdict(self)


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tensor_checksum(named: Sequence[tuple[str, torch.Tensor]]) -> str:
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_backbone(spec: BackboneSpec = BackboneSpec()) -> ResNet:
    """Architecture only, randomly initialised, classifier top removed."""
    if spec.include_classifier_top:
        raise ConfigError("include_classifier_top must be false: the classifier head is always replaced")
    with torch.random.fork_rng():  # random init must not disturb the caller's RNG
        net = ResNet(Bottleneck, list(spec.stage_blocks))
    if (spec.conv1_filters, spec.conv1_kernel, spec.conv1_stride) != (64, 7, 2):
        if spec.conv1_filters != 64:
            raise ConfigError("conv1 filter count other than 64 is not buildable")
        with torch.random.fork_rng():
            net.conv1 = nn.Conv2d(
                3, 64, kernel_size=spec.conv1_kernel, stride=spec.conv1_stride,
                padding=spec.conv1_kernel // 2, bias=False,
            )
    net.fc = nn.Identity()
    return net.eval()


def load_backbone(spec: BackboneSpec) -> ResNet:
    """Build the backbone and populate it from a local weight file.

    The file is a ``state_dict`` (``torch.save``); ``fc.*`` entries from a full
    ImageNet checkpoint are discarded.  Nothing is downloaded.
    """
    if spec.include_classifier_top:
        raise ConfigError("include_classifier_top must be false: the classifier head is always replaced")
    if not spec.weights_path:
        raise ModelLoadError("no pretrained weight file configured")
    path = Path(spec.weights_path)
    if not path.is_file():
        raise ModelLoadError(f"pretrained weight file not found: {path}")
    digest = file_sha256(path)
    if spec.weights_sha256 and digest != spec.weights_sha256:
        raise ModelLoadError(
            f"checksum mismatch for {path}: expected {spec.weights_sha256}, got {digest}"
        )
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelLoadError(f"cannot read weight file {path} (sha256 {digest}): {exc}") from exc
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ModelLoadError(f"{path} does not hold a state_dict")
    state = {k: v for k, v in state.items() if not k.startswith("fc.")}
    net = build_backbone(spec)
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ModelLoadError(f"weights in {path} do not fit the backbone: {exc}") from exc
    net.weights_sha256 = digest
    return net.eval()


def make_surrogate_weights(
    path: str | os.PathLike, seed: int = 0, calibration_images: int = 16, input_scale: float = 1.0
) -> str:
    """Write a deterministic stand-in for ImageNet weights and return its sha256.

    Seeded He initialisation, then batch-norm running statistics are
    accumulated over seeded colour/noise images so that inference-mode
    activations stay O(1).  Intended for offline desk-scale runs only.
    """
    path = Path(path)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = ResNet(Bottleneck, list(RESNET50_STAGE_BLOCKS))
        net.fc = nn.Identity()
        for m in net.modules():
            if isinstance(m, nn.BatchNorm2d):
                m.momentum = None
                m.reset_running_stats()
        rng = np.random.default_rng(seed)
        net.train()
        with torch.no_grad():
            for start in range(0, calibration_images, 8):
                n = min(8, calibration_images - start)
                base = rng.uniform(0, 255, (n, 1, 1, 3))
                noise = rng.normal(0, 40, (n, 224, 224, 3))
                imgs = np.clip(base + noise, 0, 255) - np.array([123.675, 116.28, 103.53])
                x = torch.from_numpy((imgs * input_scale).astype(np.float32)).permute(0, 3, 1, 2)
                net(x)
    state = {k: v for k, v in net.state_dict().items()}
    # via a buffer so the archive name, and thus the digest, is independent of the file name
    buf = io.BytesIO()
    torch.save(state, buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return file_sha256(path)


class ClassifierModel(nn.Module):
    """Backbone features -> dense -> ReLU -> dropout -> dense -> softmax.

    The backbone is always kept in inference mode, so its batch-norm
    statistics never move even while the head trains.
    """

    def __init__(self, backbone: nn.Module, head_spec: HeadSpec, backbone_spec: BackboneSpec | None = None):
        super().__init__()
        self.backbone = backbone
        self.head_spec = head_spec
        self.backbone_spec = backbone_spec or BackboneSpec()
        with torch.random.fork_rng():
            torch.manual_seed(head_spec.seed)
            self.head = nn.Sequential(
                nn.Linear(FEATURE_DIM, head_spec.hidden_units),
                nn.ReLU(),
                nn.Dropout(head_spec.dropout_rate),
                nn.Linear(head_spec.hidden_units, head_spec.num_classes),
            )
        self.freeze_state: dict[str, bool] = {name: False for name in _layer_ids(self)}
        # Set when the model is trained or restored from an artifact.
        self.class_order = None
        self.preprocess = None
        self.backbone.eval()

    @property
    def num_classes(self) -> int:
        return self.head_spec.num_classes

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def head_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.head(feats)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.head_logits(self.features(x)), dim=1)

    @property
    def backbone_weights_sha256(self) -> str | None:
        return getattr(self.backbone, "weights_sha256", None)


def _layer_ids(model: nn.Module) -> list[str]:
    return [name for name, m in model.named_modules() if any(True for _ in m.parameters(recurse=False))]


def attach_head(backbone: nn.Module, head: HeadSpec, backbone_spec: BackboneSpec | None = None) -> ClassifierModel:
    return ClassifierModel(backbone, head, backbone_spec)


def freeze_backbone(model: ClassifierModel) -> ClassifierModel:
    for p in model.backbone.parameters():
        p.requires_grad_(False)
    for name, m in model.named_modules():
        if name in model.freeze_state:
            model.freeze_state[name] = name.startswith("backbone")
    model.backbone.eval()
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_parameters(params) -> int:
    return sum(p.numel() for p in params)


def backbone_checksum(model: ClassifierModel) -> str:
    """Digest of every backbone parameter and buffer (batch-norm stats included)."""
    return tensor_checksum(list(model.backbone.state_dict().items()))


def head_checksum(model: ClassifierModel) -> str:
    return tensor_checksum(list(model.head.state_dict().items()))


def to_input_tensor(batch) -> torch.Tensor:
    """Bx224x224x3 array (channels last) -> NCHW float32 tensor."""
    x = torch.as_tensor(np.asarray(batch, dtype=np.float32))
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or tuple(x.shape[1:3]) != INPUT_SIZE or x.shape[3] != 3:
        raise ShapeError(
            f"expected a batch of shape (B, 224, 224, 3), got {tuple(x.shape)}"
        )
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: ClassifierModel, batch, batch_size: int = 32) -> np.ndarray:
    """Inference-mode class probabilities, shape (B, num_classes)."""
    x = to_input_tensor(batch)
    was_training = model.training
    model.eval()
    outs = []
    try:
        with torch.no_grad():
            for start in range(0, x.shape[0], batch_size):
                outs.append(model(x[start : start + batch_size]).double().numpy())
    finally:
        model.train(was_training)
    if not outs:
        return np.zeros((0, model.num_classes))
    return np.concatenate(outs)


def extract_features(model: ClassifierModel, batch, batch_size: int = 32) -> torch.Tensor:
    x = to_input_tensor(batch)
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(model.features(x[start : start + batch_size]))
    if not outs:
        return torch.zeros((0, FEATURE_DIM))
    return torch.cat(outs)


@dataclass
class TopologyCheck:
    name: str
    expected: object
    actual: object

    @property
    def passed(self) -> bool:
        return self.expected == self.actual


@dataclass
class TopologyReport:
    checks: list[TopologyCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[TopologyCheck]:
        return [c for c in self.checks if not c.passed]

    def __str__(self) -> str:
        lines = []
        for c in self.checks:
            mark = "ok  " if c.passed else "FAIL"
            lines.append(f"{mark} {c.name}: expected {c.expected}, found {c.actual}")
        return "\n".join(lines)


def verify_topology(model: ClassifierModel) -> TopologyReport:
    """Compare the assembled network against the reference 50-layer layout."""
    bb = model.backbone
    report = TopologyReport()
    add = report.checks.append

    conv1 = getattr(bb, "conv1", None)
    add(TopologyCheck("conv1 filters", RESNET50_CONV1["filters"], getattr(conv1, "out_channels", None)))
    add(TopologyCheck("conv1 kernel", RESNET50_CONV1["kernel"], tuple(getattr(conv1, "kernel_size", ()))))
    add(TopologyCheck("conv1 stride", RESNET50_CONV1["stride"], tuple(getattr(conv1, "stride", ()))))
    add(TopologyCheck("max pool after conv1", True, isinstance(getattr(bb, "maxpool", None), nn.MaxPool2d)))

    stages = [getattr(bb, f"layer{i}", None) for i in range(1, 5)]
    present = [s for s in stages if s is not None]
    add(TopologyCheck("bottleneck stage groups", 4, len(present)))
    all_bottleneck = all(isinstance(b, Bottleneck) for s in present for b in s)
    add(TopologyCheck("stages built from bottleneck blocks", True, all_bottleneck))
    add(TopologyCheck("blocks per stage", RESNET50_STAGE_BLOCKS, tuple(len(s) for s in present)))
    # conv1 + three convolutions per bottleneck + the classifier layer
    weighted = 1 + 3 * sum(len(s) for s in present) + 1
    add(TopologyCheck("weighted layers", 50, weighted))
    add(TopologyCheck("classifier top removed", True, isinstance(getattr(bb, "fc", None), nn.Identity)))

    pool = getattr(bb, "avgpool", None)
    gap = isinstance(pool, nn.AdaptiveAvgPool2d) and pool.output_size in (1, (1, 1))
    add(TopologyCheck("global average pool", True, gap))
    last = present[-1][-1] if present else None
    feat = last.conv3.out_channels if isinstance(last, Bottleneck) else None
    add(TopologyCheck("feature length", FEATURE_DIM, feat))

    linears = [m for m in model.head if isinstance(m, nn.Linear)]
    add(TopologyCheck("head width", model.head_spec.num_classes, linears[-1].out_features if linears else None))
    return report

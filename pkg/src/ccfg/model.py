"""Network assembly: shared encoder, Euclidean and angular branches, checkpoints."""
from dataclasses import dataclass
import logging
from typing import Callable, NamedTuple

import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

HEADS = ("e", "a")


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    output_dim: int
    input_size: tuple  # (height, width, channels)


class TinyCNN(nn.Module):
    """Three conv blocks and global average pooling, ~94k parameters."""

    def __init__(self, in_channels=3, widths=(32, 64, 128)):
        super().__init__()
        layers = []
        prev = in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            prev = w
        self.features = nn.Sequential(*layers)
        self.output_dim = prev

    def forward(self, x):
        x = self.features(x * 2 - 1)
        return x.mean(dim=(2, 3))


def _tiny_cnn(pretrained=False):
    if pretrained:
        log.warning("tiny_cnn has no pretrained weights; using random initialization")
    net = TinyCNN()
    return net, EncoderSpec("tiny_cnn", net.output_dim, (32, 32, 3))


def _resnet18(pretrained=False):
    from torchvision.models import resnet18

    net = resnet18(weights="IMAGENET1K_V1" if pretrained else None)
    net.fc = nn.Identity()
    return net, EncoderSpec("resnet18", 512, (64, 64, 3))


ENCODERS: dict[str, Callable] = {"tiny_cnn": _tiny_cnn, "resnet18": _resnet18}


def build_encoder(name, pretrained=False):
    """Return ``(module, EncoderSpec)`` for a registered encoder name."""
    try:
        factory = ENCODERS[name]
    except KeyError:
        raise ValueError(f"unknown encoder {name!r}; known: {sorted(ENCODERS)}") from None
    return factory(pretrained=pretrained)


def check_images(images, spec):
    if images.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) batch, got {images.dim()} dims")
    if images.shape[0] == 0:
        raise ValueError("empty batch")
    h, w, c = spec.input_size
    for dim, got, want in (("channels", images.shape[1], c), ("height", images.shape[2], h),
                           ("width", images.shape[3], w)):
        if got != want:
            raise ValueError(f"image {dim} is {got}, encoder {spec.name} expects {want}")


def projection(in_dim, z_dim):
    return nn.Sequential(nn.Linear(in_dim, z_dim), nn.GELU())


def unit_normalize(x):
    norms = x.norm(dim=1, keepdim=True)
    if (norms.detach() == 0).any():
        raise ValueError("zero-norm feature vector cannot be normalized")
    return x / norms


def forward_stage1(encoder, proj, images):
    """Unit-normalized projected embeddings for the supervised contrastive stage."""
    return unit_normalize(proj(encoder(images)))


class CosineHead(nn.Module):
    """Cosines between input vectors and per-class weight rows."""

    def __init__(self, in_dim, num_classes):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_classes, in_dim))
        nn.init.xavier_uniform_(self.weight)

    def forward(self, x):
        return (F.normalize(x, dim=1) @ F.normalize(self.weight, dim=1).T).clamp(-1.0, 1.0)


class DualHeadOutput(NamedTuple):
    z_e: torch.Tensor       # unit-normalized Euclidean-branch projection
    z_a_raw: torch.Tensor   # angular-branch projection, unnormalized
    r: torch.Tensor         # standard logits
    r_prime: torch.Tensor   # cosine logits in [-1, 1]
    t: torch.Tensor         # softmax(r)
    b: torch.Tensor         # softmax(s * r_prime), no margin


class CcfgModel(nn.Module):
    """Shared encoder feeding a softmax branch and a cosine-margin branch.

    ``heads`` lists the branches whose probabilities are averaged at inference;
    an ablated model trained without one classification loss drops that head.
    """

    def __init__(self, encoder, spec, num_classes, z_dim=128, s=30.0, heads=HEADS):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.encoder = encoder
        self.spec = spec
        self.num_classes = num_classes
        self.z_dim = z_dim
        self.s = s
        self.heads = tuple(heads)
        if not self.heads or set(self.heads) - set(HEADS):
            raise ValueError(f"heads must be a nonempty subset of {HEADS}, got {heads}")
        self.proj_e = projection(spec.output_dim, z_dim)
        self.head_e = nn.Linear(z_dim, num_classes)
        self.proj_a = projection(spec.output_dim, z_dim)
        self.head_a = CosineHead(z_dim, num_classes)

    def forward(self, images):
        check_images(images, self.spec)
        h = self.encoder(images)
        pe = self.proj_e(h)
        z_e = unit_normalize(pe)
        r = self.head_e(pe)
        z_a = self.proj_a(h)
        cos = self.head_a(z_a)
        return DualHeadOutput(z_e, z_a, r, cos, r.softmax(dim=1), (self.s * cos).softmax(dim=1))

    def embed(self, images):
        check_images(images, self.spec)
        return forward_stage1(self.encoder, self.proj_e, images)

    def combine(self, out):
        if self.heads == HEADS:
            return (out.t + out.b) / 2
        return out.t if self.heads == ("e",) else out.b

    @torch.no_grad()
    def predict(self, images):
        """Averaged head probabilities and argmax class (lowest index wins ties)."""
        if images.shape[0] == 0:
            raise ValueError("empty batch")
        probs = self.combine(self(images))
        return probs, probs.argmax(dim=1)

    def branch_parameters(self):
        return {
            "encoder": list(self.encoder.parameters()),
            "e": list(self.proj_e.parameters()) + list(self.head_e.parameters()),
            "a": list(self.proj_a.parameters()) + list(self.head_a.parameters()),
        }


class CEClassifier(nn.Module):
    """Encoder plus a single linear decision layer, trained with cross-entropy."""

    def __init__(self, encoder, spec, num_classes):
        super().__init__()
        self.encoder = encoder
        self.spec = spec
        self.num_classes = num_classes
        self.fc = nn.Linear(spec.output_dim, num_classes)

    def forward(self, images):
        check_images(images, self.spec)
        return self.fc(self.encoder(images))

    @torch.no_grad()
    def predict(self, images):
        if images.shape[0] == 0:
            raise ValueError("empty batch")
        probs = self(images).softmax(dim=1)
        return probs, probs.argmax(dim=1)


def build_model(encoder_name, num_classes, z_dim=128, s=30.0, heads=HEADS, pretrained=False):
    encoder, spec = build_encoder(encoder_name, pretrained=pretrained)
    return CcfgModel(encoder, spec, num_classes, z_dim=z_dim, s=s, heads=heads)


def build_ce_model(encoder_name, num_classes, pretrained=False):
    encoder, spec = build_encoder(encoder_name, pretrained=pretrained)
    return CEClassifier(encoder, spec, num_classes)


# ---------------------------------------------------------------- checkpoints


def checkpoint_manifest(model, stage, config_hash="", class_names=None, extra=None):
    manifest = {
        "arch": "ce" if isinstance(model, CEClassifier) else "ccfg",
        "encoder": model.spec.name,
        "num_classes": model.num_classes,
        "stage": str(stage),
        "config_hash": config_hash,
        "class_names": list(class_names) if class_names is not None else None,
    }
    if isinstance(model, CcfgModel):
        manifest.update(z_dim=model.z_dim, s=model.s, heads=list(model.heads))
    if extra:
        manifest.update(extra)
    return manifest


def save_checkpoint(path, model, stage, config_hash="", class_names=None, extra=None):
    """Write weights keyed by module path plus a manifest into one archive."""
    manifest = checkpoint_manifest(model, stage, config_hash, class_names, extra)
    state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    torch.save({"manifest": manifest, "state_dict": state}, path)


def read_checkpoint(path):
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if set(blob) != {"manifest", "state_dict"}:
        raise ValueError(f"{path} is not a checkpoint archive")
    return blob["manifest"], blob["state_dict"]


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns ``(model, manifest)``."""
    manifest, state = read_checkpoint(path)
    if manifest["arch"] == "ce":
        model = build_ce_model(manifest["encoder"], manifest["num_classes"])
    else:
        model = build_model(manifest["encoder"], manifest["num_classes"], z_dim=manifest["z_dim"],
                            s=manifest["s"], heads=tuple(manifest["heads"]))
    model.load_state_dict(state)
    model.eval()
    return model, manifest

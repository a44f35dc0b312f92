"""Pluggable identity-embedding extractor, the identity-preservation
loss, and cosine similarity scoring."""

import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn


@dataclasses.dataclass
class ExtractorConfig:
    kind: str = "seeded_random_convnet"  # or trained_classifier_backbone / external_weights
    weight_source: str | None = None
    frozen: bool = True
    embed_dim: int = 512
    image_size: int = 32
    base_width: int = 32
    n_classes: int = 0  # classifier head size; needed only for training


class IdentityExtractor(nn.Module):
    """Small convnet whose penultimate fully connected layer is the
    embedding. The classifier head exists only for pretraining."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        layers = []
        cin, w = 3, cfg.base_width
        for _ in range(int(math.log2(cfg.image_size // 4))):
            layers += [nn.Conv2d(cin, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin, w = w, min(w * 2, 256)
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(cin * 16, cfg.embed_dim)
        self.head = nn.Linear(cfg.embed_dim, max(cfg.n_classes, 1))

    def embed(self, x):
        if x.shape[-1] != self.cfg.image_size:
            raise ValueError(
                f"extractor expects {self.cfg.image_size}px input, got {x.shape[-1]}"
            )
        return self.fc(self.trunk(x).flatten(1))

    def forward(self, x):
        return self.head(torch.relu(self.embed(x)))

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self


def build_extractor(cfg: ExtractorConfig, manifest=None, seed=0,
                    epochs=10, batch_size=64, lr=1e-3):
    """Construct an extractor per config.

    seeded_random_convnet: fixed random weights, for plumbing tests.
    trained_classifier_backbone: fit an identity classifier on `manifest`
    and keep the backbone. external_weights: load a saved state dict.
    """
    if cfg.kind == "seeded_random_convnet":
        torch.manual_seed(seed)
        model = IdentityExtractor(cfg)
    elif cfg.kind == "trained_classifier_backbone":
        if manifest is None:
            raise ValueError("trained_classifier_backbone needs a manifest")
        n_ids = max(r.identity for r in manifest.records) + 1
        cfg = dataclasses.replace(cfg, n_classes=n_ids)
        torch.manual_seed(seed)
        model = IdentityExtractor(cfg)
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        ce = nn.CrossEntropyLoss()
        images = torch.from_numpy(
            np.stack([r.load_image() for r in manifest.records])
        ).permute(0, 3, 1, 2).float()
        ids = torch.tensor([r.identity for r in manifest.records], dtype=torch.long)
        rng = np.random.default_rng(seed)
        for _ in range(epochs):
            order = rng.permutation(len(ids))
            for start in range(0, len(order), batch_size):
                idx = order[start : start + batch_size]
                opt.zero_grad()
                loss = ce(model(images[idx]), ids[idx])
                loss.backward()
                opt.step()
    elif cfg.kind == "external_weights":
        if cfg.weight_source is None:
            raise ValueError("external_weights needs a weight_source path")
        model = IdentityExtractor(cfg)
        model.load_state_dict(torch.load(cfg.weight_source, weights_only=True))
    else:
        raise ValueError(f"unknown extractor kind {cfg.kind!r}")
    if cfg.frozen:
        model.freeze()
    return model


def identity_loss(t, t_hat, extractor: IdentityExtractor):
    """Squared L2 distance between frozen embeddings of the source
    texture and the generated texture; gradients reach t_hat only."""
    if any(p.requires_grad for p in extractor.parameters()):
        raise ValueError("identity_loss requires a frozen extractor")
    e_ref = extractor.embed(t.detach())
    e_hat = extractor.embed(t_hat)
    return ((e_ref - e_hat) ** 2).sum(dim=1).mean()


def cosine_similarity(a, b):
    """a.b / (|a||b|) for 1-D vectors; raises on zero vectors."""
    a = torch.as_tensor(a, dtype=torch.float64).flatten()
    b = torch.as_tensor(b, dtype=torch.float64).flatten()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity of a zero vector is undefined")
    return float((a @ b) / (na * nb))

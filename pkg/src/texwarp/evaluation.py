"""Verification metrics (ROC / EER / TPR@FPR / AP / AUC), pair building,
a label-classifier harness, and training-curve comparison."""

import csv
import dataclasses
import math

import numpy as np
import torch
import torch.nn as nn


@dataclasses.dataclass
class ScoreSet:
    scores: np.ndarray
    labels: np.ndarray  # True = client (same identity), False = impostor

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.scores.shape != self.labels.shape:
            raise ValueError("scores and labels must be parallel lists")
        if self.labels.all() or not self.labels.any():
            raise ValueError("need at least one client and one impostor score")


@dataclasses.dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # aligned with interior points

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["fpr", "tpr"])
            for x, y in zip(self.fpr, self.tpr):
                writer.writerow([f"{x:.10g}", f"{y:.10g}"])


@dataclasses.dataclass
class VerificationReport:
    tpr_at_fpr_1pct: float
    tpr_at_fpr_01pct: float
    tpr_at_fpr_0pct: float
    eer: float
    ap: float
    auc: float
    roc: RocCurve

    def save_summary(self, path):
        with open(path, "w") as f:
            for field in dataclasses.fields(self):
                if field.name != "roc":
                    f.write(f"{field.name}={getattr(self, field.name):.6f}\n")


def roc_curve(score_set: ScoreSet) -> RocCurve:
    """Threshold sweep over distinct scores, (0,0) and (1,1) endpoints.

    Ties are grouped so tied clients/impostors move the curve diagonally,
    making trapezoid AUC equal the ranking probability with ties at 0.5.
    """
    order = np.argsort(-score_set.scores, kind="stable")
    scores = score_set.scores[order]
    labels = score_set.labels[order]
    n_pos = labels.sum()
    n_neg = (~labels).sum()
    distinct = np.nonzero(np.diff(scores))[0]  # last index of each tie group
    ends = np.concatenate([distinct, [len(scores) - 1]])
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(~labels)[ends]
    fpr = np.concatenate([[0.0], fp / n_neg])
    tpr = np.concatenate([[0.0], tp / n_pos])
    if fpr[-1] != 1.0 or tpr[-1] != 1.0:  # defensive; sweep always ends at (1,1)
        fpr = np.concatenate([fpr, [1.0]])
        tpr = np.concatenate([tpr, [1.0]])
    return RocCurve(fpr, tpr, scores[ends])


def _tpr_at_fpr(fpr, tpr, alpha):
    if alpha == 0.0:
        return float(tpr[fpr == 0.0].max())
    i = int(np.searchsorted(fpr, alpha, side="right")) - 1
    if fpr[i] == alpha:
        # top of any vertical run at exactly alpha
        return float(tpr[fpr == alpha].max())
    frac = (alpha - fpr[i]) / (fpr[i + 1] - fpr[i])
    return float(tpr[i] + frac * (tpr[i + 1] - tpr[i]))


def _eer(fpr, tpr):
    """FPR at the interpolated crossing of TPR = 1 - FPR along the curve."""
    gap = fpr - (1.0 - tpr)  # non-decreasing along the sweep
    i = int(np.searchsorted(gap, 0.0, side="left"))
    if gap[i] == 0.0:
        return float(fpr[i])
    # solve fpr(s) + tpr(s) = 1 on the segment [i-1, i]
    df = fpr[i] - fpr[i - 1]
    dt = tpr[i] - tpr[i - 1]
    s = (1.0 - fpr[i - 1] - tpr[i - 1]) / (df + dt)
    return float(fpr[i - 1] + s * df)


def _average_precision(score_set: ScoreSet):
    """Step-sum AP over the threshold sweep: sum (dRecall * precision)."""
    order = np.argsort(-score_set.scores, kind="stable")
    scores = score_set.scores[order]
    labels = score_set.labels[order]
    n_pos = labels.sum()
    distinct = np.nonzero(np.diff(scores))[0]
    ends = np.concatenate([distinct, [len(scores) - 1]])
    tp = np.cumsum(labels)[ends]
    fp = np.cumsum(~labels)[ends]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev) * precision).sum())


def verification_metrics(score_set: ScoreSet) -> VerificationReport:
    roc = roc_curve(score_set)
    auc = float(np.trapezoid(roc.tpr, roc.fpr))
    return VerificationReport(
        tpr_at_fpr_1pct=_tpr_at_fpr(roc.fpr, roc.tpr, 0.01),
        tpr_at_fpr_01pct=_tpr_at_fpr(roc.fpr, roc.tpr, 0.001),
        tpr_at_fpr_0pct=_tpr_at_fpr(roc.fpr, roc.tpr, 0.0),
        eer=_eer(roc.fpr, roc.tpr),
        ap=_average_precision(score_set),
        auc=auc,
        roc=roc,
    )


def accept_reject_report(score_set: ScoreSet, threshold=0.5):
    """Convenience counts at a fixed decision threshold."""
    accept = score_set.scores >= threshold
    return {
        "true_accept": int((accept & score_set.labels).sum()),
        "false_accept": int((accept & ~score_set.labels).sum()),
        "true_reject": int((~accept & ~score_set.labels).sum()),
        "false_reject": int((~accept & score_set.labels).sum()),
    }


@dataclasses.dataclass
class Pair:
    index_a: int
    index_b: int
    path_a: str
    path_b: str
    is_client: bool


def build_pairs(gallery, generated, n_client, n_impostor, seed,
                require_generated=True):
    """Seeded client/impostor pair sampling without replacement.

    Client pairs share an identity; when `generated` is non-empty and
    require_generated is set, every client pair includes at least one
    generated image. Impostor pairs mix identities freely across both
    manifests. Indices below len(gallery) refer to gallery records.
    """
    records = list(gallery.records) + list(generated.records if generated else [])
    n_gal = len(gallery.records)
    ids = np.array([r.identity for r in records])

    client_cands, impostor_cands = [], []
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            if ids[i] == ids[j]:
                if require_generated and len(records) > n_gal and j < n_gal:
                    continue  # both real; require one generated member
                client_cands.append((i, j))
            else:
                impostor_cands.append((i, j))
    if len(client_cands) < n_client:
        raise ValueError(
            f"only {len(client_cands)} client pairs available, need {n_client}"
        )
    if len(impostor_cands) < n_impostor:
        raise ValueError(
            f"only {len(impostor_cands)} impostor pairs available, need {n_impostor}"
        )
    rng = np.random.default_rng(seed)
    chosen_c = rng.choice(len(client_cands), size=n_client, replace=False)
    chosen_i = rng.choice(len(impostor_cands), size=n_impostor, replace=False)
    pairs = []
    for k in chosen_c:
        i, j = client_cands[k]
        pairs.append(Pair(i, j, records[i].image_path, records[j].image_path, True))
    for k in chosen_i:
        i, j = impostor_cands[k]
        pairs.append(Pair(i, j, records[i].image_path, records[j].image_path, False))
    return pairs


def save_pairs_csv(pairs, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path_a", "path_b", "label"])
        for p in pairs:
            writer.writerow([p.path_a, p.path_b, "client" if p.is_client else "impostor"])


class LabelClassifier(nn.Module):
    """Small convnet for expression (one-hot) or attribute (multi-binary)
    classification of generated images."""

    def __init__(self, n_labels, label_mode, image_size=32, base_width=32):
        super().__init__()
        self.label_mode = label_mode
        self.image_size = image_size
        layers = []
        cin, w = 3, base_width
        for _ in range(int(math.log2(image_size // 4))):
            layers += [nn.Conv2d(cin, w, 4, 2, 1), nn.LeakyReLU(0.2)]
            cin, w = w, min(w * 2, 256)
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(cin * 16, n_labels)

    def forward(self, x):
        return self.fc(self.trunk(x).flatten(1))

    def predict(self, x):
        logits = self(x)
        if self.label_mode == "one_hot":
            out = torch.zeros_like(logits)
            out[torch.arange(len(logits)), logits.argmax(dim=1)] = 1.0
            return out
        return (logits > 0).float()


def train_label_classifier(manifest, epochs=20, batch_size=64, lr=1e-3, seed=0,
                           image_size=None):
    from . import data as data_mod

    image_size = image_size or manifest.records[0].load_image().shape[0]
    torch.manual_seed(seed)
    model = LabelClassifier(len(manifest.vocabulary), manifest.label_mode, image_size)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        for images, labels in data_mod.batch_iterator(
            manifest, batch_size, seed=seed * 1000 + epoch, flip_prob=0.0
        ):
            opt.zero_grad()
            logits = model(images)
            if manifest.label_mode == "one_hot":
                loss = nn.functional.cross_entropy(logits, labels.argmax(dim=1))
            else:
                loss = nn.functional.binary_cross_entropy_with_logits(logits, labels)
            loss.backward()
            opt.step()
    model.eval()
    return model


def expression_accuracy(classifier, images, target_labels):
    """Fraction of images whose argmax class equals the transfer target."""
    if classifier.label_mode != "one_hot":
        raise ValueError("expression_accuracy requires a one_hot classifier")
    with torch.no_grad():
        pred = classifier(images).argmax(dim=1)
    return float((pred == target_labels.argmax(dim=1)).float().mean())


def attribute_bit_accuracy(classifier, images, targets, attribute_index):
    """Fraction of images whose predicted bit matches the target bit for
    one attribute (multi-binary mode)."""
    if classifier.label_mode != "multi_binary":
        raise ValueError("attribute_bit_accuracy requires a multi_binary classifier")
    with torch.no_grad():
        pred = classifier.predict(images)
    return float(
        (pred[:, attribute_index] == targets[:, attribute_index]).float().mean()
    )


def confusion_matrix(classifier, images, target_labels):
    with torch.no_grad():
        pred = classifier(images).argmax(dim=1)
    true = target_labels.argmax(dim=1)
    k = target_labels.shape[1]
    mat = np.zeros((k, k), dtype=np.int64)
    for t, p in zip(true.tolist(), pred.tolist()):
        mat[t, p] += 1
    return mat


@dataclasses.dataclass
class CurveComparison:
    epochs: np.ndarray
    means_a: np.ndarray
    means_b: np.ndarray
    final_mean_a: float
    final_mean_b: float
    gap: float  # final_mean_a - final_mean_b; negative favors a

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "mean_a", "mean_b"])
            for e, a, b in zip(self.epochs, self.means_a, self.means_b):
                writer.writerow([int(e), f"{a:.10g}", f"{b:.10g}"])


def compare_ablation_curves(log_a, log_b, term) -> CurveComparison:
    """Per-epoch means of `term` in both logs plus the final-window
    (last 10% of epochs, at least one) mean gap."""
    ea, ma = log_a.epoch_means(term)
    eb, mb = log_b.epoch_means(term)
    if len(ea) == 0 or len(eb) == 0:
        raise ValueError(f"term {term!r} missing from one of the logs")
    n = min(len(ma), len(mb))
    window = max(1, n // 10)
    fa = float(np.mean(ma[len(ma) - window :]))
    fb = float(np.mean(mb[len(mb) - window :]))
    return CurveComparison(
        epochs=ea[:n], means_a=ma[:n], means_b=mb[:n],
        final_mean_a=fa, final_mean_b=fb, gap=fa - fb,
    )

"""Transfer heads on frozen study embeddings: multi-label diagnosis and 3-class priority."""

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import rankdata
from torch import nn

from .contrastive import embed_studies

LOSS_KINDS = ("cross_entropy", "binary_ordinal", "ordinal_metric")
N_PRIORITY = 3


def parameter_hash(module):
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def extract_frozen_features(studies, model):
    """One embedding per study id; asserts the backbone weights are unchanged by extraction."""
    if model is None:
        raise ValueError("a trained checkpoint is required for feature extraction")
    before = parameter_hash(model)
    emb = embed_studies(model, studies)
    if parameter_hash(model) != before:
        raise RuntimeError("backbone weights changed during feature extraction")
    return {st.study_id: emb[i] for i, st in enumerate(studies)}


def auroc(scores, labels):
    """Mann-Whitney rank statistic; tied scores earn half credit. None without both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class HeadConfig:
    hidden: int = 256
    steps: int = 500
    lr: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    max_pos_weight: float = 20.0
    metric_dim: int = 16
    margin: float = 0.5
    # rows drawn per step for the triplet loss, which is cubic in the batch size
    metric_batch: int = 96


def _mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class DiagnosisHead(nn.Module):
    def __init__(self, in_dim, n_diagnoses, hidden=256):
        super().__init__()
        self.net = _mlp(in_dim, hidden, n_diagnoses)

    def forward(self, x):
        return self.net(x)

    def probabilities(self, x):
        return torch.sigmoid(self(x))


def _tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def _fit(module, loss_fn, steps, lr, weight_decay, seed):
    torch.manual_seed(seed)
    opt = torch.optim.Adam(module.parameters(), lr=lr, weight_decay=weight_decay)
    trace = []
    module.train()
    for _ in range(steps):
        loss = loss_fn()
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    module.eval()
    return trace


def train_multilabel_head(train_x, train_y, eval_x=None, eval_y=None, config=HeadConfig()):
    """Per-diagnosis weighted BCE; returns (head, per-diagnosis eval AUROC with None where undefined)."""
    x, y = _tensor(train_x), _tensor(train_y)
    torch.manual_seed(config.seed)
    head = DiagnosisHead(x.shape[1], y.shape[1], config.hidden)
    pos = y.sum(0)
    pos_weight = torch.where(pos > 0, (len(y) - pos) / pos.clamp(min=1), torch.ones_like(pos))
    pos_weight = pos_weight.clamp(max=config.max_pos_weight)
    trace = _fit(head, lambda: F.binary_cross_entropy_with_logits(head(x), y, pos_weight=pos_weight),
                 config.steps, config.lr, config.weight_decay, config.seed)
    head.trace = trace
    aucs = None
    if eval_x is not None:
        with torch.no_grad():
            logits = head(_tensor(eval_x)).numpy()
        aucs = [auroc(logits[:, d], np.asarray(eval_y)[:, d]) for d in range(logits.shape[1])]
    return head, aucs


def binary_ordinal_loss(logits, y):
    """Summed BCE of the two cumulative tasks y > normal and y > medium."""
    y = torch.as_tensor(y)
    targets = torch.stack([(y > 0), (y > 1)], 1).to(logits.dtype)
    return F.binary_cross_entropy_with_logits(logits, targets, reduction="none").sum(1).mean()


def decode_binary_ordinal(cum_probs):
    """Class = number of cumulative probabilities above 0.5; monotone in each of them."""
    p = np.asarray(cum_probs, dtype=np.float64)
    return ((p[..., 0] > 0.5).astype(int) + (p[..., 1] > 0.5).astype(int))


def ordinal_triplet_loss(emb, y, margin):
    """Batch-all triplet loss whose margin grows with the ordinal gap between anchor and negative."""
    y = torch.as_tensor(y)
    d = torch.cdist(emb, emb)
    same = y[:, None] == y[None, :]
    gap = (y[:, None] - y[None, :]).abs().to(emb.dtype)
    eye = torch.eye(len(y), dtype=torch.bool)
    # t[a, p, n] = d(a,p) - d(a,n) + margin * |y_a - y_n|
    t = d[:, :, None] - d[:, None, :] + margin * gap[:, None, :]
    valid = (same & ~eye)[:, :, None] & (~same)[:, None, :]
    t = F.relu(t)[valid]
    return t.mean() if t.numel() else emb.sum() * 0.0


class PriorityHead(nn.Module):
    def __init__(self, in_dim, loss_kind, hidden=256, metric_dim=16):
        super().__init__()
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown priority loss {loss_kind!r}; expected one of {LOSS_KINDS}")
        self.loss_kind = loss_kind
        out = {"cross_entropy": N_PRIORITY, "binary_ordinal": 2, "ordinal_metric": metric_dim}[loss_kind]
        self.net = _mlp(in_dim, hidden, out)
        self.register_buffer("centroids", torch.zeros(N_PRIORITY, out))

    def forward(self, x):
        return self.net(x)

    def loss(self, x, y, margin, metric_batch=None):
        if self.loss_kind == "ordinal_metric" and metric_batch and len(x) > metric_batch:
            pick = torch.randperm(len(x))[:metric_batch]
            x, y = x[pick], torch.as_tensor(y)[pick]
        out = self(x)
        if self.loss_kind == "cross_entropy":
            return F.cross_entropy(out, torch.as_tensor(y))
        if self.loss_kind == "binary_ordinal":
            return binary_ordinal_loss(out, y)
        return ordinal_triplet_loss(out, y, margin)

    @torch.no_grad()
    def scores(self, x):
        """Class probabilities (cross entropy), cumulative probabilities (binary ordinal),
        or softmax of negative centroid distances (ordinal metric)."""
        out = self(_tensor(x))
        if self.loss_kind == "cross_entropy":
            return torch.softmax(out, 1).numpy()
        if self.loss_kind == "binary_ordinal":
            return torch.sigmoid(out).numpy()
        return torch.softmax(-torch.cdist(out, self.centroids), 1).numpy()

    def predict(self, x):
        s = self.scores(x)
        if self.loss_kind == "binary_ordinal":
            return decode_binary_ordinal(s)
        return s.argmax(1)


def confusion_matrix(truth, pred, n=N_PRIORITY):
    """Rows are true classes, columns predicted classes."""
    cm = np.zeros((n, n), dtype=int)
    np.add.at(cm, (np.asarray(truth, dtype=int), np.asarray(pred, dtype=int)), 1)
    return cm


def train_priority_head(train_x, train_y, loss_kind, eval_x=None, eval_y=None, config=HeadConfig()):
    """Returns (head, confusion matrix on the eval set, eval accuracy)."""
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown priority loss {loss_kind!r}; expected one of {LOSS_KINDS}")
    x, y = _tensor(train_x), torch.as_tensor(np.asarray(train_y, dtype=np.int64))
    torch.manual_seed(config.seed)
    head = PriorityHead(x.shape[1], loss_kind, config.hidden, config.metric_dim)
    head.trace = _fit(head, lambda: head.loss(x, y, config.margin, config.metric_batch), config.steps, config.lr,
                      config.weight_decay, config.seed)
    if loss_kind == "ordinal_metric":
        with torch.no_grad():
            emb = head(x)
            for c in range(N_PRIORITY):
                if (y == c).any():
                    head.centroids[c] = emb[y == c].mean(0)
                else:
                    head.centroids[c] = float("inf")
    ex, ey = (train_x, train_y) if eval_x is None else (eval_x, eval_y)
    pred = head.predict(ex)
    cm = confusion_matrix(ey, pred)
    return head, cm, float(np.trace(cm) / cm.sum())


def normal_high_confusion(cm):
    return int(cm[0, 2] + cm[2, 0])


def normal_medium_confusion(cm):
    return int(cm[0, 1] + cm[1, 0])


def compare_priority_losses(train_x, train_y, eval_x, eval_y, config=HeadConfig()):
    """Train all three priority heads; flag the loss with the least normal/high confusion
    (ties go to higher accuracy, then to the listed loss order)."""
    rows = {}
    for kind in LOSS_KINDS:
        head, cm, acc = train_priority_head(train_x, train_y, kind, eval_x, eval_y, config)
        rows[kind] = {"head": head, "confusion": cm, "accuracy": acc,
                      "normal_high": normal_high_confusion(cm), "normal_medium": normal_medium_confusion(cm)}
    best = min(LOSS_KINDS, key=lambda k: (rows[k]["normal_high"], -rows[k]["accuracy"], LOSS_KINDS.index(k)))
    return rows, best


@dataclass
class PredictionRecord:
    study_id: str
    probabilities: list
    priority_scores: list
    split: str

    def as_dict(self):
        return asdict(self)


@torch.no_grad()
def predict(diagnosis_head, features, study_ids, splits, priority_head=None):
    """Pure function of the frozen heads: one PredictionRecord per row of ``features``."""
    x = _tensor(features)
    diagnosis_head.eval()
    probs = diagnosis_head.probabilities(x).numpy()
    pri = priority_head.scores(features) if priority_head is not None else np.zeros((len(x), 0))
    return [PredictionRecord(sid, probs[i].tolist(), pri[i].tolist(), sp)
            for i, (sid, sp) in enumerate(zip(study_ids, splits))]


def save_heads(path, diagnosis_head=None, priority_head=None, config=HeadConfig()):
    payload = {"version": 1, "kind": "heads", "config": asdict(config)}
    if diagnosis_head is not None:
        lin = diagnosis_head.net[0], diagnosis_head.net[2]
        payload["diagnosis"] = {"in_dim": lin[0].in_features, "n": lin[1].out_features,
                                "state_dict": diagnosis_head.state_dict()}
    if priority_head is not None:
        payload["priority"] = {"in_dim": priority_head.net[0].in_features, "loss_kind": priority_head.loss_kind,
                               "state_dict": priority_head.state_dict()}
    torch.save(payload, path)


def load_heads(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "heads":
        raise ValueError(f"{path} is not a heads checkpoint")
    config = HeadConfig(**payload["config"])
    dh = ph = None
    if "diagnosis" in payload:
        d = payload["diagnosis"]
        dh = DiagnosisHead(d["in_dim"], d["n"], config.hidden)
        dh.load_state_dict(d["state_dict"])
        dh.eval()
    if "priority" in payload:
        p = payload["priority"]
        ph = PriorityHead(p["in_dim"], p["loss_kind"], config.hidden, config.metric_dim)
        ph.load_state_dict(p["state_dict"])
        ph.eval()
    return dh, ph

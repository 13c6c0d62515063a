"""CLIP and patient-discrimination objectives, the joint training loop, and retrieval evaluation."""

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .hierarchical import EncoderConfig, HierarchicalEncoder
from .text_encoders import LMConfig, ReportLM, SequenceNameEncoder, StudyNameEncoder
from .vocab import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOGIT_SCALE_MAX = 100.0


class NonFiniteLoss(FloatingPointError):
    pass


def clip_loss(S, R, tau):
    """Symmetric softmax cross-entropy over S @ R.T * exp(tau); matching pairs on the diagonal."""
    if S.ndim != 2 or S.shape != R.shape:
        raise ValueError(f"feature shapes {tuple(S.shape)} and {tuple(R.shape)} do not match")
    if S.shape[0] < 2:
        raise ValueError("clip loss needs at least 2 pairs")
    tau = torch.as_tensor(tau, dtype=S.dtype)
    logits = S @ R.t() * torch.exp(tau).clamp(max=LOGIT_SCALE_MAX)
    target = torch.arange(S.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def patient_discrimination_loss(E, seq_map, tau_p):
    """Same-study contrast over projected sequence embeddings.

    logits = E E^T / tau_p with the diagonal set to -10; q = row softmax; the positive mask
    marks same-study pairs (diagonal included); loss = -sum_i log(sum_j mask_ij q_ij) / masksum_i.
    """
    n = E.shape[0]
    if n < 2:
        raise ValueError("patient discrimination loss needs at least 2 sequences")
    if tau_p <= 0:
        raise ValueError("tau_p must be positive")
    seq_map = torch.as_tensor(seq_map)
    logits = E @ E.t() / tau_p
    logits = logits.masked_fill(torch.eye(n, dtype=torch.bool), -10.0)
    q = torch.softmax(logits, dim=1)
    mask = (seq_map[:, None] == seq_map[None, :]).to(E.dtype)
    masksum = mask.sum(1)
    aggscore = (mask * q).sum(1)
    return -(torch.log(aggscore) / masksum).sum()


@dataclass
class ClipConfig:
    tau_init: float = 0.0
    tau_p: float = 0.1
    lambda_patdis: float = 0.03
    batch_size: int = 32
    steps: int = 2000
    seed: int = 0
    lr: float = 1e-3
    tau_lr: float = 1e-2
    weight_decay: float = 0.05
    freeze_language_model: bool = False
    eval_every: int = 250
    retrieval_k: int = 5

    def __post_init__(self):
        if self.tau_p <= 0:
            raise ValueError("tau_p must be positive")
        if self.lambda_patdis < 0:
            raise ValueError("lambda_patdis must be non-negative")


@dataclass
class BatchAssembly:
    studies: list
    reports: list
    seq_map: list

    def __post_init__(self):
        if len(self.studies) != len(self.reports):
            raise ValueError("every study needs exactly one report")
        if any(not 0 <= i < len(self.studies) for i in self.seq_map):
            raise ValueError("seq_map points outside the batch")


def assemble_batch(studies):
    """Batch whole studies so every study contributes all of its sequences."""
    seq_map = [i for i, st in enumerate(studies) for _ in st.series]
    return BatchAssembly(list(studies), [st.report for st in studies], seq_map)


@dataclass
class LossBreakdown:
    loss_clip: float
    loss_patdis: float
    total: float

    def as_dict(self):
        return asdict(self)


class ClipModel(nn.Module):
    """Everything trained in the contrastive stage (the VQ tokenizer lives outside, frozen)."""

    def __init__(self, encoder, lm, tau_init=0.0):
        super().__init__()
        self.encoder = encoder
        self.lm = lm
        self.tau = nn.Parameter(torch.tensor(float(tau_init)))

    @classmethod
    def build(cls, report_vocab, name_vocab, enc_config=EncoderConfig(), lm_config=None, tau_init=0.0, lm=None):
        lm_config = lm_config or LMConfig(out_dim=enc_config.embed_dim)
        encoder = HierarchicalEncoder(
            SequenceNameEncoder(name_vocab, enc_config.width),
            StudyNameEncoder(name_vocab, enc_config.width),
            enc_config,
        )
        return cls(encoder, lm or ReportLM(report_vocab, lm_config), tau_init)

    def report_features(self, texts):
        return self.lm.embed_texts(texts)


def _losses(model, batch, config):
    S, regs, seq_map = model.encoder(batch.studies)
    R = model.report_features(batch.reports)
    l_clip = clip_loss(S, R, model.tau)
    l_pat = patient_discrimination_loss(model.encoder.patdis(regs), seq_map, config.tau_p)
    return l_clip, l_pat, l_clip + config.lambda_patdis * l_pat


def training_step(batch, model, optimizer, config):
    """One gradient update; raises NonFiniteLoss before touching the weights if the loss is bad."""
    model.train()
    l_clip, l_pat, total = _losses(model, batch, config)
    if not torch.isfinite(total):
        raise NonFiniteLoss(f"non-finite loss (clip={l_clip.item()}, patdis={l_pat.item()})")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    return LossBreakdown(l_clip.item(), l_pat.item(), total.item())


@torch.no_grad()
def embed_studies(model, studies, batch_size=64):
    model.eval()
    out = [model.encoder(studies[i : i + batch_size])[0] for i in range(0, len(studies), batch_size)]
    return torch.cat(out).numpy()


@torch.no_grad()
def embed_reports(model, texts, batch_size=64):
    model.eval()
    out = [model.report_features(texts[i : i + batch_size]) for i in range(0, len(texts), batch_size)]
    return torch.cat(out).numpy()


def evaluate_retrieval(S, R, k):
    """Top-k accuracy in both directions by cosine similarity; row i of S matches row i of R.

    A query's rank is one plus the number of candidates scoring strictly higher than its
    partner, so candidates with identical embeddings (identical report texts) tie.
    """
    S, R = np.asarray(S, dtype=np.float64), np.asarray(R, dtype=np.float64)
    n = len(S)
    if n == 0 or S.shape != R.shape:
        raise ValueError("retrieval needs two non-empty, index-matched embedding sets")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    S = S / np.linalg.norm(S, axis=1, keepdims=True)
    R = R / np.linalg.norm(R, axis=1, keepdims=True)
    sim = S @ R.T

    def topk(m):
        true = np.diag(m)[:, None]
        rank = 1 + (m > true + 1e-9).sum(1)
        return float((rank <= k).mean())

    return {"image_to_text": topk(sim), "text_to_image": topk(sim.T), "k": k, "n": n}


def _params_snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


@dataclass
class ClipResult:
    model: ClipModel
    log: list = field(default_factory=list)
    aborted: bool = False

    def losses(self):
        return [r for r in self.log if "total" in r]

    def evaluations(self):
        return [r for r in self.log if "retrieval" in r]


def train_clip(train_studies, val_studies, model, config, log_path=None, ckpt_dir=None):
    """Joint CLIP + patient-discrimination training over prepared studies.

    Every ``eval_every`` steps the validation slice is embedded, top-1 and top-k retrieval
    are logged, and a checkpoint is kept; a non-finite loss stops training and restores the
    last good weights.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model.lm.requires_grad_(not config.freeze_language_model)
    params = [p for n, p in model.named_parameters() if p.requires_grad and n != "tau"]
    groups = [{"params": params}, {"params": [model.tau], "lr": config.tau_lr, "weight_decay": 0.0}]
    optimizer = torch.optim.AdamW(groups, lr=config.lr, weight_decay=config.weight_decay)
    result = ClipResult(model)
    last_good = _params_snapshot(model)
    fh = open(log_path, "w") if log_path else None

    def emit(row):
        result.log.append(row)
        if fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    order, cursor = rng.permutation(len(train_studies)), 0
    bs = min(config.batch_size, len(train_studies))
    try:
        for step in range(1, config.steps + 1):
            if cursor + bs > len(order):
                order, cursor = rng.permutation(len(train_studies)), 0
            batch = assemble_batch([train_studies[i] for i in order[cursor : cursor + bs]])
            cursor += bs
            try:
                losses = training_step(batch, model, optimizer, config)
            except NonFiniteLoss as exc:
                model.load_state_dict(last_good)
                result.aborted = True
                emit({"step": step, "event": "abort", "message": str(exc)})
                log.error("training aborted at step %d: %s", step, exc)
                break
            emit({"step": step, **losses.as_dict(), "tau": model.tau.item()})
            if val_studies and (step % config.eval_every == 0 or step == config.steps):
                S = embed_studies(model, val_studies)
                R = embed_reports(model, [st.report for st in val_studies])
                top1 = evaluate_retrieval(S, R, 1)
                topk = evaluate_retrieval(S, R, min(config.retrieval_k, len(val_studies)))
                emit({"step": step, "retrieval": {"top1": top1, "topk": topk}})
                last_good = _params_snapshot(model)
                if ckpt_dir:
                    save_clip_checkpoint(model, f"{ckpt_dir}/clip_step{step:06d}.pt", config)
    finally:
        if fh:
            fh.close()
    model.eval()
    return result


def save_clip_checkpoint(model, path, config=None, enc_config=None):
    enc = model.encoder
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": "clip",
        "clip_config": asdict(config) if config else None,
        "encoder_config": asdict(enc.config),
        "lm_config": asdict(model.lm.config),
        "report_vocab": model.lm.vocab.to_json(),
        "name_vocab": enc.seq_names.vocab.to_json(),
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def load_clip_checkpoint(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "clip" or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} CLIP checkpoint")
    model = ClipModel.build(
        Vocabulary.from_json(payload["report_vocab"]),
        Vocabulary.from_json(payload["name_vocab"]),
        EncoderConfig(**payload["encoder_config"]),
        LMConfig(**payload["lm_config"]),
    )
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def clone_model(model):
    return copy.deepcopy(model)


def steps_to_threshold(evaluations, threshold, key="top1", direction="image_to_text"):
    """First logged step whose retrieval metric reaches ``threshold`` (None if never)."""
    for row in evaluations:
        if row["retrieval"][key][direction] >= threshold:
            return row["step"]
    return None


def chance_topk(k, n):
    return k / n if n else math.nan

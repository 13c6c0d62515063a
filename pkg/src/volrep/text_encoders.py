"""Text-side models: sequence-name encoder, study-name encoder, and the report language model."""

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .cohort.generator import PLANE_ABBR, SEQUENCE_TYPES, STUDY_NAMES
from .vocab import UNKNOWN_SEQUENCE, UNKNOWN_STUDY, Vocabulary, split_words


def name_vocabulary(extra_names=()):
    """Vocabulary over the words of every synthetic sequence and study name."""
    names = [f"{a} {t}" for a in PLANE_ABBR.values() for t in SEQUENCE_TYPES]
    return Vocabulary.from_texts(names + list(STUDY_NAMES) + list(extra_names))


def name_ids(vocab, name, unknown):
    """Word ids of a name; an empty name maps to the dedicated unknown token."""
    ids = vocab.encode(name or "")
    return ids or [vocab.stoi[unknown]]


def _pad(seqs, pad_id):
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), pad_id, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return out, torch.as_tensor([len(s) for s in seqs])


def _encoder_stack(width, depth, heads, dropout=0.0):
    layer = nn.TransformerEncoderLayer(
        width, heads, dim_feedforward=4 * width, dropout=dropout, batch_first=True, norm_first=True
    )
    return nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)


class SequenceNameEncoder(nn.Module):
    """E_sn: a small transformer over name words, mean-pooled and projected to unit norm."""

    def __init__(self, vocab, width=128, depth=1, heads=4, max_len=8):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(len(vocab), width, padding_idx=vocab.pad_id)
        self.pos = nn.Parameter(torch.randn(max_len, width) * 0.02)
        self.body = _encoder_stack(width, depth, heads)
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, width)
        self.max_len = max_len

    def forward(self, names):
        ids, lengths = _pad([name_ids(self.vocab, n, UNKNOWN_SEQUENCE)[: self.max_len] for n in names],
                            self.vocab.pad_id)
        pad = ids == self.vocab.pad_id
        h = self.body(self.embed(ids) + self.pos[: ids.shape[1]], src_key_padding_mask=pad)
        h = self.norm(h).masked_fill(pad.unsqueeze(-1), 0.0)
        pooled = h.sum(1) / lengths.unsqueeze(1)
        return F.normalize(self.out(pooled), dim=-1)


class StudyNameEncoder(nn.Module):
    """E_stn: an LSTM over name words; the final hidden state is projected to unit norm."""

    def __init__(self, vocab, width=128, hidden=64):
        super().__init__()
        self.vocab = vocab
        self.embed = nn.Embedding(len(vocab), hidden, padding_idx=vocab.pad_id)
        self.rnn = nn.LSTM(hidden, hidden, batch_first=True)
        self.out = nn.Linear(hidden, width)

    def forward(self, names):
        ids, lengths = _pad([name_ids(self.vocab, n, UNKNOWN_STUDY) for n in names], self.vocab.pad_id)
        packed = nn.utils.rnn.pack_padded_sequence(self.embed(ids), lengths, batch_first=True, enforce_sorted=False)
        _, (h, _) = self.rnn(packed)
        return F.normalize(self.out(h[-1]), dim=-1)


@torch.no_grad()
def encode_sequence_name(encoder, name):
    was = encoder.training
    encoder.eval()
    out = encoder([name])[0]
    encoder.train(was)
    return out


@torch.no_grad()
def encode_study_name(encoder, name):
    was = encoder.training
    encoder.eval()
    out = encoder([name])[0]
    encoder.train(was)
    return out


@dataclass
class NamePretrainConfig:
    steps: int = 300
    lr: float = 1e-3
    tau: float = 0.1
    seed: int = 0


def pretrain_name_encoder(encoder, names, views, config=NamePretrainConfig()):
    """Symmetric InfoNCE between sequence-name embeddings and per-series image views.

    ``views`` is an (n, v) array aligned with ``names``. Each step draws one series per
    distinct name, so a batch never holds two copies of the same name. Returns the loss trace.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    views = torch.as_tensor(np.asarray(views, dtype=np.float32))
    width = encoder.out.out_features
    proj = nn.Linear(views.shape[1], width)
    groups = {}
    for i, n in enumerate(names):
        groups.setdefault(" ".join(split_words(n)), []).append(i)
    if len(groups) < 2:
        raise ValueError("name pretraining needs at least two distinct names")
    keys = sorted(groups)
    opt = torch.optim.Adam(list(encoder.parameters()) + list(proj.parameters()), lr=config.lr)
    trace = []
    for _ in range(config.steps):
        pick = [groups[k][int(rng.integers(len(groups[k])))] for k in keys]
        e = encoder([names[i] for i in pick])
        v = F.normalize(proj(views[pick]), dim=-1)
        logits = e @ v.t() / config.tau
        target = torch.arange(len(pick))
        loss = 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
    encoder.eval()
    return trace


def plane_similarity(encoder, names_by_plane):
    """Mean cosine of name embeddings within the same plane vs across planes."""
    names, planes = [], []
    for plane, ns in names_by_plane.items():
        names.extend(ns)
        planes.extend([plane] * len(ns))
    with torch.no_grad():
        encoder.eval()
        e = encoder(names)
    sim = (e @ e.t()).numpy()
    planes = np.asarray(planes)
    same = planes[:, None] == planes[None, :]
    off = ~np.eye(len(names), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())


@dataclass
class LMConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    context: int = 64
    out_dim: int = 128
    steps: int = 1500
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100


class ReportLM(nn.Module):
    """G: a decoder-only transformer with a last-token pooling head into the shared space."""

    def __init__(self, vocab, config=LMConfig()):
        super().__init__()
        self.vocab = vocab
        self.config = config
        w = config.width
        self.embed = nn.Embedding(len(vocab), w)
        self.pos = nn.Parameter(torch.randn(config.context, w) * 0.02)
        self.body = _encoder_stack(w, config.depth, config.heads)
        self.norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, len(vocab))
        self.pool = nn.Linear(w, config.out_dim)

    def uniform_init(self):
        """Zero the output head so every next-token distribution is uniform."""
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()
        return self

    def ids(self, text):
        """bos + words + eos, truncated to the context length."""
        ids = [self.vocab.bos_id] + self.vocab.encode(text) + [self.vocab.eos_id]
        return ids[: self.config.context]

    def hidden(self, ids):
        n = ids.shape[1]
        causal = nn.Transformer.generate_square_subsequent_mask(n)
        h = self.body(self.embed(ids) + self.pos[:n], mask=causal, is_causal=True)
        return self.norm(h)

    def forward(self, ids):
        """Next-token logits, (batch, length, vocab)."""
        return self.head(self.hidden(ids))

    def embed_ids(self, seqs):
        ids, lengths = _pad(seqs, self.vocab.pad_id)
        h = self.hidden(ids)
        last = h[torch.arange(len(seqs)), lengths - 1]
        return F.normalize(self.pool(last), dim=-1)

    def embed_texts(self, texts):
        return self.embed_ids([self.ids(t) for t in texts])


@torch.no_grad()
def encode_report(lm, report):
    was = lm.training
    lm.eval()
    text = getattr(report, "text", report)
    out = lm.embed_texts([text])[0]
    lm.train(was)
    return out


def _nll(lm, seqs):
    """Summed next-token NLL and predicted-token count over a batch of id lists."""
    ids, _ = _pad(seqs, lm.vocab.pad_id)
    logits = lm(ids[:, :-1])
    target = ids[:, 1:]
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), target.reshape(-1),
                          ignore_index=lm.vocab.pad_id, reduction="sum")
    return nll, int((target != lm.vocab.pad_id).sum())


@torch.no_grad()
def perplexity(lm, texts, batch_size=64):
    """exp(mean token-level negative log likelihood) of ``texts`` under ``lm``."""
    was = lm.training
    lm.eval()
    total, count = 0.0, 0
    seqs = [lm.ids(t) for t in texts]
    for i in range(0, len(seqs), batch_size):
        nll, n = _nll(lm, seqs[i : i + batch_size])
        total += float(nll)
        count += n
    lm.train(was)
    return math.exp(total / count), total / count


def pretrain_report_lm(train_texts, val_texts, vocab, data_fraction=1.0, config=LMConfig()):
    """Next-word-prediction pretraining on a seeded subset of the training reports.

    Returns (lm, curve) where curve rows hold step, train_nll, val_nll and val_perplexity.
    """
    if not 0 < data_fraction <= 1:
        raise ValueError("data_fraction must lie in (0, 1]")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    n = max(1, int(round(len(train_texts) * data_fraction)))
    subset = [train_texts[i] for i in sorted(rng.permutation(len(train_texts))[:n])]
    lm = ReportLM(vocab, config)
    seqs = [lm.ids(t) for t in subset]
    opt = torch.optim.Adam(lm.parameters(), lr=config.lr)
    curve = []
    for step in range(1, config.steps + 1):
        batch = [seqs[i] for i in rng.integers(len(seqs), size=min(config.batch_size, len(seqs)))]
        nll, count = _nll(lm, batch)
        loss = nll / count
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % config.eval_every == 0 or step == config.steps:
            ppl, val_nll = perplexity(lm, val_texts)
            curve.append({"step": step, "data_fraction": data_fraction, "train_nll": loss.item(),
                          "val_nll": val_nll, "val_perplexity": ppl})
    lm.eval()
    return lm, curve


def data_fraction_sweep(train_texts, val_texts, vocab, fractions=(0.1, 0.5, 1.0), config=LMConfig()):
    """Pretrain once per data fraction; returns {fraction: (lm, curve)}."""
    return {f: pretrain_report_lm(train_texts, val_texts, vocab, f, config) for f in fractions}


def write_curve_csv(rows, path):
    cols = ["data_fraction", "step", "train_nll", "val_nll", "val_perplexity"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({c: r[c] for c in cols})


def save_lm(lm, path):
    torch.save({"version": 1, "kind": "report_lm", "config": asdict(lm.config),
                "vocab": lm.vocab.to_json(), "state_dict": lm.state_dict()}, path)


def load_lm(path):
    payload = torch.load(path, weights_only=False)
    if payload.get("kind") != "report_lm" or payload.get("version") != 1:
        raise ValueError(f"{path} is not a version-1 report language model checkpoint")
    lm = ReportLM(Vocabulary.from_json(payload["vocab"]), LMConfig(**payload["config"]))
    lm.load_state_dict(payload["state_dict"])
    lm.eval()
    return lm

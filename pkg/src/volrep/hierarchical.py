"""Sequence and study transformers with register-token readout.

A series enters ViT_seq as its foreground VQ latents (each concatenated with the token's
positional encoding), one prepended sequence-name position and a learnable register. The
series registers, a study-name position and a study register make up the ViT_st input;
the study level has no positional encoding, so series order does not matter.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .text_encoders import _encoder_stack
from .tokenizer import (
    BackgroundFilter,
    PatchSpec,
    PositionalEncoding,
    anatomical_position,
    positional_encode,
    tokenize_sequence,
)


@dataclass
class SeriesInput:
    """Frozen per-series inputs: one row per foreground token."""

    latents: np.ndarray  # (m, code_dim)
    positions: np.ndarray  # (m, pos_dims)
    grid_pos: tuple  # m grid coordinates in the series' native layout
    name: str
    plane: str


@dataclass
class StudyInput:
    study_id: str
    patient_id: str
    study_name: str
    series: list
    report: str
    report_full: str
    labels: np.ndarray
    priority: int
    split: str
    subgroup: dict

    @property
    def n_tokens(self):
        return sum(len(s.latents) for s in self.series)


@torch.no_grad()
def prepare_study(record, vq, spec=PatchSpec(), filt=BackgroundFilter(), enc=PositionalEncoding(), frame="anatomical"):
    """Tokenize, filter and VQ-encode every series of a StudyRecord (VQ stays frozen).

    With ``frame="anatomical"`` positions are encoded after mapping each token's grid cell
    through the series orientation code, so the same anatomy gets the same encoding in every
    plane; ``frame="native"`` encodes the raw grid position.
    """
    if frame not in ("anatomical", "native"):
        raise ValueError(f"unknown position frame {frame!r}")
    series = []
    for seq in record.sequences:
        grid, fg = tokenize_sequence(seq.volume, seq.meta, spec, filt)
        if not fg:
            raise ValueError(f"{record.study_id}: series {seq.meta.sequence_name!r} has no foreground tokens")
        x = torch.from_numpy(np.stack([t.voxels for t in fg]))
        latents = vq.token_latents(x).numpy()
        cells = [(t.grid_pos, grid.grid_shape) for t in fg]
        if frame == "anatomical":
            cells = [anatomical_position(g, grid.grid_shape, seq.meta.orientation_code) for g, _ in cells]
        pos = np.stack([positional_encode(g, e, enc) for g, e in cells])
        series.append(SeriesInput(latents, pos, tuple(t.grid_pos for t in fg), seq.meta.sequence_name, seq.meta.plane))
    return StudyInput(
        record.study_id, record.patient_id, record.study_name, series, record.report.text, record.report_full,
        np.asarray(record.labels.bits, dtype=np.float32), int(record.labels.priority), record.split,
        record.subgroup.as_dict(),
    )


@torch.no_grad()
def zero_token_latent(vq, shape=None):
    """Latent of the all-zero (background) token, used as the ablation baseline."""
    shape = shape or tuple(sorted(vq.config.patch_dims, reverse=True))
    return vq.token_latents(torch.zeros(1, *shape))[0].numpy()


@dataclass
class EncoderConfig:
    code_dim: int = 16
    pos_dims: int = 24
    width: int = 64
    depth: int = 2
    heads: int = 4
    embed_dim: int = 128
    patdis_dim: int = 64
    dropout: float = 0.1
    # fraction of a series' tokens hidden at random during training (at least one survives)
    token_dropout: float = 0.0


class SequenceTransformer(nn.Module):
    """ViT_seq: [register, name, tokens...] -> register hidden state."""

    def __init__(self, config=EncoderConfig()):
        super().__init__()
        self.token_in = nn.Linear(config.code_dim + config.pos_dims, config.width)
        self.register = nn.Parameter(torch.randn(config.width) * 0.02)
        self.body = _encoder_stack(config.width, config.depth, config.heads, config.dropout)
        self.norm = nn.LayerNorm(config.width)

    def forward(self, tokens, pad_mask, name_emb):
        """tokens (b, m, code+pos), pad_mask (b, m) True on padding, name_emb (b, width)."""
        b = tokens.shape[0]
        x = torch.cat([self.register.expand(b, 1, -1), name_emb.unsqueeze(1), self.token_in(tokens)], 1)
        mask = torch.cat([torch.zeros(b, 2, dtype=torch.bool), pad_mask], 1)
        return self.norm(self.body(x, src_key_padding_mask=mask)[:, 0])


class StudyTransformer(nn.Module):
    """ViT_st: [register, study name, series registers...] -> unit-norm study embedding."""

    def __init__(self, config=EncoderConfig()):
        super().__init__()
        self.register = nn.Parameter(torch.randn(config.width) * 0.02)
        self.body = _encoder_stack(config.width, config.depth, config.heads, config.dropout)
        self.norm = nn.LayerNorm(config.width)
        self.out = nn.Linear(config.width, config.embed_dim)

    def forward(self, series, pad_mask, name_emb):
        b = series.shape[0]
        x = torch.cat([self.register.expand(b, 1, -1), name_emb.unsqueeze(1), series], 1)
        mask = torch.cat([torch.zeros(b, 2, dtype=torch.bool), pad_mask], 1)
        h = self.norm(self.body(x, src_key_padding_mask=mask)[:, 0])
        return F.normalize(self.out(h), dim=-1)


class PatientProjection(nn.Module):
    """P_patdis: bias-free linear map followed by unit normalization."""

    def __init__(self, width=128, out_dim=64):
        super().__init__()
        self.linear = nn.Linear(width, out_dim, bias=False)

    def forward(self, x):
        return F.normalize(self.linear(x), dim=-1)


def _stack_series(series_list, override=None):
    """Pad a flat list of SeriesInput into (n, m, code+pos) plus a padding mask.

    ``override`` optionally maps a flat series index to replacement latents (for ablations).
    """
    m = max(len(s.latents) for s in series_list)
    width = series_list[0].latents.shape[1] + series_list[0].positions.shape[1]
    out = np.zeros((len(series_list), m, width), dtype=np.float32)
    pad = np.ones((len(series_list), m), dtype=bool)
    for i, s in enumerate(series_list):
        if not len(s.latents):
            raise ValueError("series has no foreground tokens")
        lat = s.latents if override is None or i not in override else override[i]
        out[i, : len(lat)] = np.concatenate([lat, s.positions], 1)
        pad[i, : len(lat)] = False
    return torch.from_numpy(out), torch.from_numpy(pad)


class HierarchicalEncoder(nn.Module):
    """E_sn + E_stn + ViT_seq + ViT_st + P_patdis over prepared studies."""

    def __init__(self, seq_name_encoder, study_name_encoder, config=EncoderConfig()):
        super().__init__()
        self.config = config
        self.seq_names = seq_name_encoder
        self.study_names = study_name_encoder
        self.vit_seq = SequenceTransformer(config)
        self.vit_st = StudyTransformer(config)
        self.patdis = PatientProjection(config.width, config.patdis_dim)

    def encode_series(self, series_list, override=None):
        """Register hidden states for a flat list of series, (n, width)."""
        tokens, pad = _stack_series(series_list, override)
        if self.training and self.config.token_dropout > 0:
            drop = (torch.rand(pad.shape) < self.config.token_dropout) & ~pad
            lengths = (~pad).sum(1)
            keep_one = torch.zeros_like(pad)
            keep_one[torch.arange(len(pad)), (torch.rand(len(pad)) * lengths).long()] = True
            pad = pad | (drop & ~keep_one)
        names = self.seq_names([s.name for s in series_list])
        return self.vit_seq(tokens, pad, names)

    def forward(self, studies, overrides=None):
        """Returns (study embeddings (b, d), series registers (n, width), seq_map (n,)).

        ``overrides`` optionally maps (study index, series index) to replacement latents.
        """
        if any(len(st.series) < 1 for st in studies):
            raise ValueError("a study needs at least one sequence")
        flat, seq_map, flat_override = [], [], {}
        for i, st in enumerate(studies):
            for j, s in enumerate(st.series):
                if overrides and (i, j) in overrides:
                    flat_override[len(flat)] = overrides[(i, j)]
                flat.append(s)
                seq_map.append(i)
        regs = self.encode_series(flat, flat_override or None)
        seq_map = torch.as_tensor(seq_map)
        n_max = max(len(st.series) for st in studies)
        grouped = regs.new_zeros(len(studies), n_max, regs.shape[1])
        pad = torch.ones(len(studies), n_max, dtype=torch.bool)
        offset = 0
        for i, st in enumerate(studies):
            n = len(st.series)
            grouped[i, :n] = regs[offset : offset + n]
            pad[i, :n] = False
            offset += n
        names = self.study_names([st.study_name for st in studies])
        return self.vit_st(grouped, pad, names), regs, seq_map


@torch.no_grad()
def encode_sequence(model, series):
    """Unit-norm SequenceEmbedding of one series (eval mode)."""
    was = model.training
    model.eval()
    out = F.normalize(model.encode_series([series]), dim=-1)[0]
    model.train(was)
    return out


@torch.no_grad()
def encode_study(model, study):
    was = model.training
    model.eval()
    if len(study.series) < 1:
        raise ValueError(f"{study.study_id}: a study needs at least one sequence")
    out = model([study])[0][0]
    model.train(was)
    return out


@torch.no_grad()
def patient_projection(model, seq_embedding):
    return model.patdis(torch.as_tensor(seq_embedding))

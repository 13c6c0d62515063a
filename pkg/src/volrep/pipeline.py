"""Stage wiring shared by the CLI and the end-to-end checks."""

from dataclasses import dataclass, field

import numpy as np
import torch

from .cohort import template_table
from .contrastive import ClipConfig, ClipModel, train_clip
from .hierarchical import EncoderConfig, prepare_study
from .text_encoders import (
    LMConfig,
    NamePretrainConfig,
    name_vocabulary,
    pretrain_name_encoder,
    pretrain_report_lm,
)
from .tokenizer import BackgroundFilter, PatchSpec, PositionalEncoding, tokenize_sequence
from .vq import VQConfig, train_vqvae


def split_records(records):
    retro = [r for r in records if r.split == "retrospective"]
    pro = [r for r in records if r.split == "prospective"]
    return retro, pro


def foreground_tokens(records, spec=PatchSpec(), filt=BackgroundFilter()):
    tokens = []
    for r in records:
        for seq in r.sequences:
            tokens.extend(tokenize_sequence(seq.volume, seq.meta, spec, filt)[1])
    return tokens


def train_tokenizer(records, config=VQConfig(), spec=PatchSpec(), filt=BackgroundFilter()):
    """VQ-VAE on retrospective tokens, validated on prospective tokens."""
    retro, pro = split_records(records)
    return train_vqvae(foreground_tokens(retro, spec, filt), foreground_tokens(pro, spec, filt), config)


def series_views(studies):
    """Per-series image view for name pretraining: mean of [latent, positional encoding] rows."""
    names, views = [], []
    for st in studies:
        for s in st.series:
            names.append(s.name)
            views.append(np.concatenate([s.latents, s.positions], 1).mean(0))
    return names, np.stack(views)


def lm_split(texts, val_fraction=0.2, seed=0):
    """Hold out a seeded slice of the (retrospective) report corpus for perplexity."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(texts))
    n_val = max(1, int(round(len(texts) * val_fraction)))
    return [texts[i] for i in sorted(idx[n_val:])], [texts[i] for i in sorted(idx[:n_val])]


@dataclass
class BackboneConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    lm: LMConfig = field(default_factory=LMConfig)
    names: NamePretrainConfig = field(default_factory=NamePretrainConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    position_frame: str = "anatomical"


def prepare_all(records, vq, spec=PatchSpec(), filt=BackgroundFilter(), frame="anatomical"):
    return [prepare_study(r, vq, spec, filt, PositionalEncoding(), frame) for r in records]


def train_backbone(studies, cohort_config, config=BackboneConfig(), log_path=None, ckpt_dir=None):
    """Pretrain G and E_sn, then run CLIP + patient discrimination on retrospective studies,
    evaluating retrieval on the prospective ones. Returns (ClipResult, lm curve, name trace)."""
    torch.manual_seed(config.clip.seed)
    retro = [s for s in studies if s.split == "retrospective"]
    pro = [s for s in studies if s.split == "prospective"]
    vocab = template_table(cohort_config).vocabulary()
    lm_train, lm_val = lm_split([s.report for s in retro], seed=config.lm.seed)
    lm_cfg = LMConfig(**{**config.lm.__dict__, "out_dim": config.encoder.embed_dim})
    lm, lm_curve = pretrain_report_lm(lm_train, lm_val, vocab, 1.0, lm_cfg)
    model = ClipModel.build(vocab, name_vocabulary(), config.encoder, lm_cfg, config.clip.tau_init, lm=lm)
    names, views = series_views(retro)
    name_trace = pretrain_name_encoder(model.encoder.seq_names, names, views, config.names)
    result = train_clip(retro, pro, model, config.clip, log_path, ckpt_dir)
    return result, lm_curve, name_trace

"""Explainability, retrieval structure, clustering, fairness and descriptive statistics."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy.cluster.hierarchy import leaves_list, linkage
from scipy.spatial.distance import squareform
from scipy.stats import false_discovery_control, skew
from sklearn.metrics import silhouette_samples

from .heads import auroc
from .tokenizer import PatchSpec, patch_volume

# ---------------------------------------------------------------- LIME


def sample_masks(m, n_samples, rng):
    """Binary presence masks (1 = token kept); the first row is the unablated study."""
    masks = rng.integers(0, 2, size=(n_samples, m)).astype(np.int8)
    masks[0] = 1
    return masks


def all_masks(m):
    return ((np.arange(2**m)[:, None] >> np.arange(m)) & 1).astype(np.int8)


def fit_surrogate(masks, scores, sigma):
    """Weighted least squares of scores on masks (with intercept), kernel exp(-hamming/sigma).

    Hamming distance is measured to the all-present mask. Returns (coefficients, intercept).
    """
    masks = np.asarray(masks, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    hamming = masks.shape[1] - masks.sum(1)
    w = np.sqrt(np.exp(-hamming / sigma))
    design = np.hstack([np.ones((len(masks), 1)), masks])
    coef, *_ = np.linalg.lstsq(design * w[:, None], scores * w, rcond=None)
    return coef[1:], coef[0]


def lime_weights(score_fn, m, n_samples=512, seed=0, sigma=None, exhaustive=False):
    """Token importances of a black-box ``score_fn(masks) -> scores`` over ``m`` tokens."""
    if m < 2:
        raise ValueError("LIME needs at least 2 tokens")
    sigma = sigma if sigma is not None else m / 4
    masks = all_masks(m) if exhaustive else sample_masks(m, n_samples, np.random.default_rng(seed))
    scores = np.asarray(score_fn(masks), dtype=np.float64)
    coef, intercept = fit_surrogate(masks, scores, sigma)
    return coef, intercept, {"n_samples": int(len(masks)), "sigma": float(sigma), "seed": seed,
                             "exhaustive": bool(exhaustive), "kernel": "exp(-hamming/sigma)"}


@dataclass
class LimeExplanation:
    study_id: str
    target: int
    weights: list
    token_refs: list  # (series index, grid position) per token
    top_k: list  # [{"token", "series", "grid_pos", "weight"}], descending weight
    metadata: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def _top_k(weights, refs, k):
    order = np.argsort(-np.asarray(weights), kind="stable")[:k]
    return [{"token": int(i), "series": int(refs[i][0]), "grid_pos": list(refs[i][1]), "weight": float(weights[i])}
            for i in order]


def study_score_fn(model, head, study, target, baseline_latent, batch_size=64):
    """score_fn for LIME: target logit of ``head`` on the study with masked tokens swapped
    for the background-token latent."""
    refs = [(j, g) for j, s in enumerate(study.series) for g in s.grid_pos]
    bounds = np.cumsum([0] + [len(s.latents) for s in study.series])

    @torch.no_grad()
    def score(masks):
        model.eval()
        out = []
        for lo in range(0, len(masks), batch_size):
            chunk = masks[lo : lo + batch_size]
            overrides = {}
            for i, mask in enumerate(chunk):
                for j, s in enumerate(study.series):
                    keep = mask[bounds[j] : bounds[j + 1]].astype(bool)
                    if not keep.all():
                        lat = s.latents.copy()
                        lat[~keep] = baseline_latent
                        overrides[(i, j)] = lat
            emb = model.encoder([study] * len(chunk), overrides)[0]
            out.append(head(emb)[:, target].numpy())
        return np.concatenate(out)

    return score, refs


def lime_token_importance(model, head, study, target, baseline_latent, n_samples=512, seed=0, k=5):
    score, refs = study_score_fn(model, head, study, target, baseline_latent)
    if len(refs) < 2:
        raise ValueError(f"{study.study_id}: LIME needs at least 2 foreground tokens")
    w, intercept, meta = lime_weights(score, len(refs), n_samples, seed)
    meta.update({"baseline": "zero_token", "intercept": float(intercept)})
    return LimeExplanation(study.study_id, int(target), w.tolist(), refs, _top_k(w, refs, k), meta)


def lesion_token_refs(record, diagnosis, spec=PatchSpec()):
    """(series index, grid position) of every token whose patch touches the lesion mask."""
    refs = set()
    for j, seq in enumerate(record.sequences):
        mask = seq.lesion_masks.get(diagnosis)
        if mask is None or not mask.any():
            continue
        grid = patch_volume(mask.astype(np.float32), spec.for_plane(seq.meta.plane))
        refs.update((j, t.grid_pos) for t in grid.tokens if t.voxels.any())
    return refs


def localization_accuracy(explanations, lesion_refs, k=3):
    """Fraction of explanations with any top-k token inside the lesion; empty masks excluded."""
    hits, excluded = [], 0
    for exp, refs in zip(explanations, lesion_refs):
        if not refs:
            excluded += 1
            continue
        top = [(t["series"], tuple(t["grid_pos"])) for t in exp.top_k[:k]]
        hits.append(any(r in refs for r in top))
    rate = float(np.mean(hits)) if hits else math.nan
    return {"rate": rate, "k": k, "n_explained": len(hits), "n_excluded": excluded}


def random_hit_rate(rho, k=3):
    """Chance that at least one of k independently drawn tokens hits a region of token fraction rho."""
    return 1.0 - (1.0 - rho) ** k


# ---------------------------------------------------------------- NPR


def npr_value(mean_neighbor_positives, k, n_positive, n_total):
    """Neighbor positive rate divided by the global positive rate."""
    return (mean_neighbor_positives / k) / (n_positive / n_total)


def nearest_neighbors(query, reference, k):
    q = np.asarray(query, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    r = r / np.linalg.norm(r, axis=1, keepdims=True)
    return np.argsort(-(q @ r.T), axis=1, kind="stable")[:, :k]


def compute_npr(pro_emb, pro_labels, retro_emb, retro_labels, k=20):
    """Per diagnosis: mean NPR over all and over positive prospective studies (cosine k-NN)."""
    pro_labels, retro_labels = np.asarray(pro_labels), np.asarray(retro_labels)
    if not len(pro_labels) or not len(retro_labels):
        raise ValueError("both splits must be non-empty")
    if k > len(retro_labels):
        raise ValueError(f"k={k} exceeds the {len(retro_labels)} retrospective studies")
    nbrs = nearest_neighbors(pro_emb, retro_emb, k)
    out = {}
    for d in range(retro_labels.shape[1]):
        rate = float(retro_labels[:, d].mean())
        pos = pro_labels[:, d].astype(bool)
        if rate == 0:
            out[d] = {"positive_rate": 0.0, "mean_all": None, "mean_positive": None, "n_positive": int(pos.sum())}
            continue
        per_study = retro_labels[nbrs, d].mean(1) / rate
        out[d] = {"positive_rate": rate, "mean_all": float(per_study.mean()),
                  "mean_positive": float(per_study[pos].mean()) if pos.any() else None,
                  "n_positive": int(pos.sum())}
    return out


# ---------------------------------------------------------------- AUC matrix


def logit_label_auc_matrix(logits, labels):
    """AUROC of every logit against every label, plus label correlations and an
    average-linkage ordering of the labels. Undefined cells are NaN."""
    logits, labels = np.asarray(logits, dtype=np.float64), np.asarray(labels)
    D = labels.shape[1]
    if D < 2:
        raise ValueError("need at least 2 labels")
    mat = np.full((logits.shape[1], D), np.nan)
    for i in range(logits.shape[1]):
        for j in range(D):
            a = auroc(logits[:, i], labels[:, j])
            if a is not None:
                mat[i, j] = a
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(labels.T.astype(np.float64))
    corr = np.where(np.isfinite(corr), corr, 0.0)
    np.fill_diagonal(corr, 1.0)
    dist = np.clip(1.0 - corr, 0.0, 2.0)
    np.fill_diagonal(dist, 0.0)
    order = leaves_list(linkage(squareform(dist, checks=False), method="average")).tolist()
    return {"auc": mat, "correlation": corr, "order": order}


# ---------------------------------------------------------------- silhouette


def silhouette_report(embeddings, labels):
    """Per-point silhouette (Euclidean) and its mean; singleton clusters score 0."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    levels = np.unique(labels)
    if len(levels) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    if len(levels) == len(labels):
        values = np.zeros(len(labels))
    else:
        values = silhouette_samples(x, labels, metric="euclidean")
    return {"values": values, "mean": float(values.mean()), "n_clusters": int(len(levels))}


# ---------------------------------------------------------------- fairness


def youden_threshold(scores, labels):
    """Threshold maximizing TPR - FPR for the rule score >= threshold."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("Youden threshold needs both classes")
    cand = np.unique(scores)
    pred = scores[None, :] >= cand[:, None]
    tpr = (pred & labels).sum(1) / labels.sum()
    fpr = (pred & ~labels).sum(1) / (~labels).sum()
    return float(cand[int(np.argmax(tpr - fpr))])


def _disparity(hit, group_codes, n_levels):
    counts = np.bincount(group_codes, minlength=n_levels)
    tpr = np.bincount(group_codes, weights=hit, minlength=n_levels) / counts
    return tpr.max() - tpr.min(), tpr


def tpr_disparity(scores, labels, groups, threshold, n_boot=1000, seed=0):
    """Max-minus-min subgroup TPR and its permutation p-value (subgroup labels shuffled among positives)."""
    scores, labels, groups = np.asarray(scores), np.asarray(labels).astype(bool), np.asarray(groups)
    levels = sorted(set(groups.tolist()))
    with_pos = [g for g in levels if (labels & (groups == g)).any()]
    excluded = [g for g in levels if g not in with_pos]
    if len(with_pos) < 2:
        raise ValueError("TPR disparity needs at least 2 subgroups with positives")
    keep = labels & np.isin(groups, with_pos)
    hit = (scores[keep] >= threshold).astype(np.float64)
    codes = np.searchsorted(np.asarray(with_pos), groups[keep])
    observed, tpr = _disparity(hit, codes, len(with_pos))
    rng = np.random.default_rng(seed)
    null = np.array([_disparity(hit, rng.permutation(codes), len(with_pos))[0] for _ in range(n_boot)])
    p = (1 + int((null >= observed - 1e-12).sum())) / (1 + n_boot)
    return {"disparity": float(observed), "p_value": float(p),
            "tpr": {str(g): float(t) for g, t in zip(with_pos, tpr)},
            "excluded": [str(g) for g in excluded], "n_boot": n_boot, "seed": seed}


def benjamini_hochberg(p_values):
    p = np.asarray(p_values, dtype=np.float64)
    if not len(p):
        return p
    return np.maximum(false_discovery_control(p, method="bh"), p)


def fairness_report(tests, threshold_by_task, n_boot=1000, seed=0):
    """Run tpr_disparity for every (task, attribute) test and BH-correct across all of them.

    ``tests`` maps (task, attribute) -> (scores, labels, groups).
    """
    rows = []
    for i, ((task, attr), (scores, labels, groups)) in enumerate(sorted(tests.items())):
        r = tpr_disparity(scores, labels, groups, threshold_by_task[task], n_boot, seed + i)
        rows.append({"task": task, "attribute": attr, **r})
    corrected = benjamini_hochberg([r["p_value"] for r in rows])
    for r, c in zip(rows, corrected):
        r["p_corrected"] = float(min(c, 1.0))
    return {"tests": rows, "correction": "benjamini_hochberg", "n_boot": n_boot, "seed": seed}


# ---------------------------------------------------------------- descriptive


def fisher_pearson_skewness(samples):
    """g1 = m3 / m2**1.5 with central moments averaged over n."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 3:
        raise ValueError("skewness needs at least 3 samples")
    if np.ptp(x) == 0:
        raise ValueError("skewness is undefined for zero variance")
    return float(skew(x, bias=True))

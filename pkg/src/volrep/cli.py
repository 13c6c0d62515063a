"""volrep command line: cohort generation, training stages, embedding, explanation and analysis."""

import argparse
import json
import logging
import os
import sys

import numpy as np
import torch

from . import analysis, heads
from .cohort import CohortConfig, generate_cohort, load_cohort, load_manifest, template_table
from .contrastive import ClipConfig, embed_reports, load_clip_checkpoint, save_clip_checkpoint
from .hierarchical import EncoderConfig, zero_token_latent
from .pipeline import BackboneConfig, foreground_tokens, lm_split, prepare_all, split_records, train_backbone
from .report import curve_figure, emit_report, to_jsonable
from .text_encoders import LMConfig, NamePretrainConfig, data_fraction_sweep, save_lm, write_curve_csv
from .tokenizer import BackgroundFilter, PatchSpec, tokenize_sequence
from .vq import VQConfig, load_checkpoint, orientation_invariance_report, save_checkpoint, train_vqvae, write_loss_csv

log = logging.getLogger("volrep")

LOSS_ALIASES = {"ce": "cross_entropy", "binord": "binary_ordinal", "ordmetric": "ordinal_metric"}


def _onoff(value):
    if value.lower() in ("on", "true", "1", "yes"):
        return True
    if value.lower() in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {value!r}")


def _triple(value):
    parts = tuple(int(p) for p in value.split(","))
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated integers")
    return parts


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(to_jsonable(obj), fh, indent=1, sort_keys=True)


def _cohort_config(cohort_dir):
    manifest = load_manifest(cohort_dir)
    return CohortConfig.from_dict(manifest["config"]) if manifest.get("config") else CohortConfig()


def cmd_generate(args):
    config = CohortConfig.from_toml(args.config) if args.config else CohortConfig()
    os.makedirs(args.out, exist_ok=True)
    manifest = generate_cohort(config, args.seed, args.out)
    print(f"wrote {len(manifest['studies'])} studies to {args.out}")


def cmd_tokenize(args):
    records = load_cohort(args.input)
    spec, filt = PatchSpec(args.patch), BackgroundFilter(args.bg_threshold)
    os.makedirs(args.out, exist_ok=True)
    buckets, index = {}, []
    for r in records:
        for j, seq in enumerate(r.sequences):
            _, fg = tokenize_sequence(seq.volume, seq.meta, spec, filt)
            for t in fg:
                rows = buckets.setdefault(t.shape_bucket, [])
                index.append({"study_id": r.study_id, "series": j, "grid_pos": list(t.grid_pos),
                              "orientation_code": t.orientation_code, "bucket": list(t.shape_bucket), "row": len(rows)})
                rows.append(t.voxels)
    files = {}
    for shape, rows in sorted(buckets.items()):
        name = "tokens_{}x{}x{}.f32".format(*shape)
        np.stack(rows).astype("<f4").tofile(os.path.join(args.out, name))
        files["x".join(map(str, shape))] = {"path": name, "count": len(rows)}
    _dump({"version": 1, "patch_dims": spec.patch_dims, "bg_threshold": filt.threshold, "files": files, "tokens": index},
          os.path.join(args.out, "index.json"))
    print(f"wrote {len(index)} foreground tokens in {len(files)} shape buckets")


def _column(rows, key):
    picked = [r for r in rows if r.get(key) is not None]
    return [r["step"] for r in picked], [r[key] for r in picked]


def cmd_train_vq(args):
    records = load_cohort(args.cohort)
    retro, pro = split_records(records)
    config = VQConfig(codebook_size=args.codebook_size, permute=args.permute, steps=args.steps, seed=args.seed,
                      batch_size=args.batch_size, eval_every=args.eval_every)
    val = foreground_tokens(pro)
    result = train_vqvae(foreground_tokens(retro), val, config)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(result, os.path.join(args.out, "vq.pt"))
    write_loss_csv(result.history, os.path.join(args.out, "vq_loss.csv"))
    curve_figure(os.path.join(args.out, "vq_loss.png"),
            {k: _column(result.history, k) for k in ("train_loss", "val_recon", "val_quant")}, "loss", logy=True)
    with open(os.path.join(args.out, "vq_events.jsonl"), "w") as fh:
        for e in result.events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    rep = orientation_invariance_report(result.model, val[:256])
    _dump({"mean_pairwise_cosine": rep["mean_pairwise_cosine"], "final": result.curves()[-1]},
          os.path.join(args.out, "invariance.json"))
    print(json.dumps(to_jsonable(result.curves()[-1])))


def cmd_train_lm(args):
    records = load_cohort(args.cohort)
    vocab = template_table(_cohort_config(args.cohort)).vocabulary()
    retro, _ = split_records(records)
    train, val = lm_split([r.report.text for r in retro], seed=args.seed)
    fractions = (0.1, 0.5, 1.0) if args.sweep else (args.fraction,)
    sweep = data_fraction_sweep(train, val, vocab, fractions, LMConfig(steps=args.steps, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    rows = [r for f in fractions for r in sweep[f][1]]
    write_curve_csv(rows, os.path.join(args.out, "perplexity.csv"))
    curve_figure(os.path.join(args.out, "perplexity.png"),
            {f"fraction {f}": _column(sweep[f][1], "val_perplexity") for f in fractions}, "val perplexity", logy=True)
    with open(os.path.join(args.out, "vocab.json"), "w") as fh:
        fh.write(vocab.to_json())
    save_lm(sweep[fractions[-1]][0], os.path.join(args.out, "lm.pt"))
    print(json.dumps({str(f): sweep[f][1][-1]["val_perplexity"] for f in fractions}))


def _studies(cohort_dir, vq_path):
    records = load_cohort(cohort_dir)
    return records, prepare_all(records, load_checkpoint(vq_path))


def cmd_train_clip(args):
    _, studies = _studies(args.cohort, args.ckpt_vq)
    clip = ClipConfig(lambda_patdis=args.lambda_patdis, freeze_language_model=args.freeze_lm, steps=args.steps,
                      seed=args.seed, eval_every=args.eval_every, lr=args.lr, batch_size=args.batch_size)
    config = BackboneConfig(encoder=EncoderConfig(width=args.width, depth=args.depth), clip=clip,
                            lm=LMConfig(seed=args.seed, steps=args.lm_steps),
                            names=NamePretrainConfig(steps=args.name_steps, seed=args.seed))
    os.makedirs(args.out, exist_ok=True)
    result, lm_curve, _ = train_backbone(studies, _cohort_config(args.cohort), config,
                                         os.path.join(args.out, "train_log.jsonl"), args.out)
    save_clip_checkpoint(result.model, os.path.join(args.out, "clip.pt"), clip)
    write_curve_csv(lm_curve, os.path.join(args.out, "lm_perplexity.csv"))
    curve_figure(os.path.join(args.out, "clip_loss.png"),
            {k: _column(result.losses(), k) for k in ("loss_clip", "loss_patdis", "total")}, "loss", logy=True)
    evals = result.evaluations()
    curve_figure(os.path.join(args.out, "retrieval.png"),
            {f"{m} {d}": ([e["step"] for e in evals], [e["retrieval"][m][d] for e in evals])
             for m in ("top1", "topk") for d in ("image_to_text", "text_to_image")}, "prospective retrieval")
    last = result.evaluations()[-1] if result.evaluations() else {}
    print(json.dumps(to_jsonable(last)))
    return 1 if result.aborted else 0


def _write_embeddings(path, ids, splits, emb):
    emb.astype("<f4").tofile(path)
    _dump({"version": 1, "dim": int(emb.shape[1]), "study_ids": ids, "splits": splits}, os.path.splitext(path)[0] + ".json")


def _read_embeddings(path):
    with open(os.path.splitext(path)[0] + ".json") as fh:
        meta = json.load(fh)
    emb = np.fromfile(path, dtype="<f4").reshape(-1, meta["dim"])
    return meta["study_ids"], meta["splits"], emb


def cmd_embed(args):
    if not os.path.exists(args.ckpt):
        raise SystemExit(f"checkpoint {args.ckpt} not found")
    _, studies = _studies(args.cohort, args.ckpt_vq)
    model = load_clip_checkpoint(args.ckpt)
    table = heads.extract_frozen_features(studies, model)
    ids = [s.study_id for s in studies]
    _write_embeddings(args.out, ids, [s.split for s in studies], np.stack([table[i] for i in ids]))
    print(f"wrote {len(ids)} study embeddings to {args.out}")


def cmd_train_heads(args):
    ids, splits, emb = _read_embeddings(args.features)
    by_id = {r.study_id: r for r in load_cohort(args.cohort)}
    splits = np.asarray(splits)
    tr, ev = splits == "retrospective", splits == "prospective"
    cfg = heads.HeadConfig(seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.task == "diagnosis":
        y = np.stack([by_id[i].labels.bits for i in ids]).astype(np.float32)
        head, aucs = heads.train_multilabel_head(emb[tr], y[tr], emb[ev], y[ev], cfg)
        heads.save_heads(os.path.join(args.out, "diagnosis_head.pt"), diagnosis_head=head, config=cfg)
        records = heads.predict(head, emb, ids, splits.tolist())
        metrics = {"auroc": aucs}
    else:
        kind = LOSS_ALIASES.get(args.loss, args.loss)
        y = np.asarray([int(by_id[i].labels.priority) for i in ids])
        head, cm, acc = heads.train_priority_head(emb[tr], y[tr], kind, emb[ev], y[ev], cfg)
        heads.save_heads(os.path.join(args.out, "priority_head.pt"), priority_head=head, config=cfg)
        with torch.no_grad():
            records = [heads.PredictionRecord(i, [], s.tolist(), sp) for i, s, sp in zip(ids, head.scores(emb), splits)]
        metrics = {"loss_kind": kind, "confusion": cm, "accuracy": acc}
    with open(os.path.join(args.out, "predictions.jsonl"), "w") as fh:
        for r in records:
            fh.write(json.dumps(to_jsonable(r.as_dict()), sort_keys=True) + "\n")
    _dump(metrics, os.path.join(args.out, "metrics.json"))
    print(json.dumps(to_jsonable(metrics)))


def cmd_explain(args):
    records, studies = _studies(args.cohort, args.ckpt_vq)
    idx = next((i for i, s in enumerate(studies) if s.study_id == args.study), None)
    if idx is None:
        raise SystemExit(f"study {args.study} not in cohort")
    model = load_clip_checkpoint(args.ckpt)
    dhead, _ = heads.load_heads(args.heads)
    baseline = zero_token_latent(load_checkpoint(args.ckpt_vq))
    exp = analysis.lime_token_importance(model, dhead, studies[idx], args.label, baseline, args.samples, args.seed)
    refs = analysis.lesion_token_refs(records[idx], args.label)
    os.makedirs(args.out, exist_ok=True)
    out = exp.as_dict()
    out["lesion_tokens"] = sorted([j, list(g)] for j, g in refs)
    out["top3_hit"] = analysis.localization_accuracy([exp], [refs], 3)["rate"] if refs else None
    _dump(out, os.path.join(args.out, f"lime_{args.study}_d{args.label}.json"))
    emit_report({"lime": out}, args.out, overlays=lime_overlays(records[idx], exp, args.label))
    print(json.dumps(to_jsonable(exp.top_k)))


def lime_overlays(record, exp, label, spec=PatchSpec()):
    """Mid-slice view of each series with positive token weights painted over their patches."""
    panels = []
    for j, seq in enumerate(record.sequences):
        dims = spec.for_plane(seq.meta.plane).patch_dims
        vol = seq.volume.data
        ax = int(np.argmin(vol.shape))
        weights = np.zeros(vol.shape, dtype=np.float32)
        for w, (s, g) in zip(exp.weights, exp.token_refs):
            if s == j:
                sl = tuple(slice(gi * p, (gi + 1) * p) for gi, p in zip(g, dims))
                weights[sl] = max(w, 0.0)
        mask = seq.lesion_masks.get(label)
        # slice through the voxel with the largest token weight (or the middle)
        pos = np.unravel_index(int(np.argmax(weights)), vol.shape)[ax] if weights.any() else vol.shape[ax] // 2
        take = lambda a: np.take(a, pos, axis=ax)
        panels.append({"title": f"{record.study_id} s{j} {seq.meta.sequence_name}", "image": take(vol),
                       "weights": take(weights), "mask": take(mask).astype(float) if mask is not None else None})
    return panels


def cmd_analyze(args):
    records = load_cohort(args.cohort)
    by_id = {r.study_id: r for r in records}
    sections = {}
    what = {"npr", "auc", "fairness", "silhouette", "skew"} if args.what == "all" else {args.what}
    if what & {"npr", "auc", "fairness"}:
        ids, splits, emb = _read_embeddings(args.embeddings)
        splits = np.asarray(splits)
        labels = np.stack([by_id[i].labels.bits for i in ids])
        retro, pro = splits == "retrospective", splits == "prospective"
    if "npr" in what:
        sections["npr"] = analysis.compute_npr(emb[pro], labels[pro], emb[retro], labels[retro], args.k)
    if what & {"auc", "fairness"}:
        if not args.heads:
            raise SystemExit("--heads is required for auc and fairness analyses")
        dhead, _ = heads.load_heads(args.heads)
        with torch.no_grad():
            logits = dhead(torch.as_tensor(emb)).numpy()
    if "auc" in what:
        sections["auc_matrix"] = analysis.logit_label_auc_matrix(logits[pro], labels[pro])
    if "fairness" in what:
        tests, thresholds = {}, {}
        attrs = ("sex", "age_band", "race_code", "insurance_code", "scanner_code")
        for d in range(labels.shape[1]):
            if labels[retro, d].all() or not labels[retro, d].any():
                continue
            thresholds[d] = analysis.youden_threshold(logits[retro, d], labels[retro, d])
            for a in attrs:
                groups = np.asarray([by_id[i].subgroup.as_dict()[a] for i in np.asarray(ids)[pro]])
                pos_groups = set(groups[labels[pro, d].astype(bool)])
                if len(pos_groups) >= 2:
                    tests[(d, a)] = (logits[pro, d], labels[pro, d], groups)
        sections["fairness"] = analysis.fairness_report(tests, thresholds, args.n_boot, args.seed)
    if "silhouette" in what:
        if not args.ckpt:
            raise SystemExit("--ckpt is required for the silhouette analysis")
        model = load_clip_checkpoint(args.ckpt)
        keys = [" ".join(map(str, r.labels.bits)) for r in records]
        item = embed_reports(model, [r.report.text for r in records])
        full = embed_reports(model, [r.report_full for r in records])
        sections["silhouette"] = {"itemized": analysis.silhouette_report(item, keys)["mean"],
                                  "full": analysis.silhouette_report(full, keys)["mean"]}
    if "skew" in what:
        counts = [sum(r.labels.bits) for r in records]
        sections["skewness"] = {"positives_per_study": analysis.fisher_pearson_skewness(counts)}
    summary = emit_report(sections, args.out)
    print(json.dumps(summary["figures"]))


def build_parser():
    p = argparse.ArgumentParser(prog="volrep", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic cohort")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("tokenize", help="dump foreground tokens")
    t.add_argument("--in", dest="input", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--patch", type=_triple, default=(32, 32, 4))
    t.add_argument("--bg-threshold", type=float, default=0.05)
    t.set_defaults(func=cmd_tokenize)

    v = sub.add_parser("train-vq", help="train the VQ-VAE tokenizer")
    v.add_argument("--cohort", required=True)
    v.add_argument("--codebook-size", type=int, default=1024)
    v.add_argument("--permute", type=_onoff, default=True)
    v.add_argument("--steps", type=int, default=20000)
    v.add_argument("--batch-size", type=int, default=256)
    v.add_argument("--eval-every", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", required=True)
    v.set_defaults(func=cmd_train_vq)

    lm = sub.add_parser("train-lm", help="pretrain the report language model")
    lm.add_argument("--cohort", required=True)
    lm.add_argument("--fraction", type=float, default=1.0)
    lm.add_argument("--sweep", action="store_true", help="run fractions 0.1, 0.5 and 1.0")
    lm.add_argument("--steps", type=int, default=1500)
    lm.add_argument("--seed", type=int, default=0)
    lm.add_argument("--out", required=True)
    lm.set_defaults(func=cmd_train_lm)

    c = sub.add_parser("train-clip", help="contrastive training of the hierarchical encoder")
    c.add_argument("--ckpt-vq", required=True)
    c.add_argument("--cohort", required=True)
    c.add_argument("--lambda-patdis", type=float, default=ClipConfig.lambda_patdis)
    c.add_argument("--freeze-lm", type=_onoff, default=False)
    c.add_argument("--steps", type=int, default=ClipConfig.steps)
    c.add_argument("--eval-every", type=int, default=ClipConfig.eval_every)
    c.add_argument("--lr", type=float, default=ClipConfig.lr)
    c.add_argument("--batch-size", type=int, default=ClipConfig.batch_size)
    c.add_argument("--width", type=int, default=EncoderConfig.width)
    c.add_argument("--depth", type=int, default=EncoderConfig.depth)
    c.add_argument("--lm-steps", type=int, default=LMConfig.steps, help="report LM pretraining steps")
    c.add_argument("--name-steps", type=int, default=NamePretrainConfig.steps, help="sequence-name pretraining steps")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_train_clip)

    e = sub.add_parser("embed", help="write frozen study embeddings")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--ckpt-vq", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_embed)

    h = sub.add_parser("train-heads", help="train a transfer head on frozen embeddings")
    h.add_argument("--features", required=True)
    h.add_argument("--cohort", required=True)
    h.add_argument("--task", choices=("diagnosis", "priority"), default="diagnosis")
    h.add_argument("--loss", choices=tuple(LOSS_ALIASES) + heads.LOSS_KINDS, default="ce")
    h.add_argument("--seed", type=int, default=0)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_train_heads)

    x = sub.add_parser("explain", help="LIME token importances for one study and label")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--ckpt-vq", required=True)
    x.add_argument("--heads", required=True)
    x.add_argument("--cohort", required=True)
    x.add_argument("--study", required=True)
    x.add_argument("--label", type=int, required=True)
    x.add_argument("--samples", type=int, default=512)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_explain)

    a = sub.add_parser("analyze", help="retrieval structure, AUC matrix, fairness, clustering, skewness")
    a.add_argument("--what", choices=("npr", "auc", "fairness", "silhouette", "skew", "all"), required=True)
    a.add_argument("--cohort", required=True)
    a.add_argument("--embeddings")
    a.add_argument("--heads")
    a.add_argument("--ckpt")
    a.add_argument("--k", type=int, default=20)
    a.add_argument("--n-boot", type=int, default=1000)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())

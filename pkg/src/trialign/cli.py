"""Command-line surface.

Exit codes: 0 success, 1 usage/config error, 2 runtime numerical failure.
Errors print a single ``error: <message>`` line to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from .checkpoint import load_checkpoint
from .config import ConfigError, load_run_config, write_resolved
from .encoders import ModelConfig, init_model
from .evaluation import (
    dual_encoder_scores,
    efficiency_probe,
    retrieval_metrics,
    similarity_diagnostics,
    similarity_matrix,
)
from .losses import (
    LossHyper,
    exclusive_nce_anchor,
    focal_mlm,
    oracle_exclusive_nce,
    oracle_focal,
    oracle_rank,
    oracle_reverse,
    ranking_loss,
    reverse_alignment,
)
from .masking import MaskingError
from .substrate import Rng, grad_check, l2_normalize
from .training import (
    NonFiniteLossError,
    TrainConfig,
    embed_split,
    eval_vqa,
    finetune_retrieval,
    finetune_vqa,
    pretrain,
)


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, qa = data_mod.generate_corpus(
        args.n, args.seed, frames=args.frames, height=args.size, width=args.size
    )
    data_mod.save_manifest(records, out / "manifest.jsonl")
    data_mod.save_qa(qa, out / "qa.jsonl")
    if args.store_clips:
        clips = np.stack([data_mod.render(r.scene) for r in records])
        data_mod.save_clips(clips, out / "clips.f32")
    print(f"wrote {len(records)} records and {len(qa)} QA rows to {out}")
    return 0


def _load_configs(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key] = yaml_value(value)
    return load_run_config(args.config, overrides)


def yaml_value(text: str):
    import yaml

    return yaml.safe_load(text)


def _manifest_from(data_cfg, args):
    manifest = getattr(args, "data", None) or data_cfg.get("manifest")
    if not manifest:
        raise ConfigError("no manifest path given (data.manifest or --data)")
    return data_mod.load_manifest(manifest)


def cmd_pretrain(args) -> int:
    model_cfg, train_cfg, data_cfg, resolved = _load_configs(args)
    records = _manifest_from(data_cfg, args)
    vocab = data_mod.Vocab()
    model_cfg.vocab_size = len(vocab)
    write_resolved(resolved, args.out)
    ckpt = pretrain(records, vocab, model_cfg, train_cfg, args.out)
    print(f"checkpoint: {ckpt}")
    return 0


def _restore_model(ckpt_path):
    meta = load_checkpoint(ckpt_path)
    model_cfg = ModelConfig(**meta["config"]["model"])
    model = init_model(model_cfg, seed=0)
    load_checkpoint(ckpt_path, model)
    return model, model_cfg, meta


def cmd_finetune_retrieval(args) -> int:
    _, train_cfg, data_cfg, resolved = _load_configs(args)
    records = _manifest_from(data_cfg, args)
    model, model_cfg, _ = _restore_model(args.init)
    vocab = data_mod.Vocab()
    write_resolved(resolved, args.out)
    ckpt = finetune_retrieval(
        model, records, vocab, model_cfg, train_cfg, args.out
    )
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_finetune_vqa(args) -> int:
    _, train_cfg, data_cfg, resolved = _load_configs(args)
    records = _manifest_from(data_cfg, args)
    qa = data_mod.load_qa(data_cfg.get("qa") or args.qa)
    model, model_cfg, _ = _restore_model(args.init)
    vocab = data_mod.Vocab()
    scenes = {r.id: r for r in records}
    write_resolved(resolved, args.out)
    head = finetune_vqa(
        model, qa, scenes, vocab, model_cfg, train_cfg, args.mode
    )
    acc = eval_vqa(
        model, head, qa, scenes, vocab, model_cfg, args.mode, split="test",
        dtype=train_cfg.dtype,
    )
    print(json.dumps({"mode": args.mode, "test_accuracy": acc}))
    return 0


def cmd_eval_retrieval(args) -> int:
    model, model_cfg, _ = _restore_model(args.ckpt)
    records = data_mod.load_manifest(args.data)
    vocab = data_mod.Vocab()
    t_emb, v_emb = embed_split(model, records, vocab, model_cfg, split=args.split)
    scores = similarity_matrix(t_emb, v_emb).numpy()
    gt = np.arange(scores.shape[0])
    metrics = retrieval_metrics(scores, gt)
    pos, margin = similarity_diagnostics(scores, gt)
    report = {
        **metrics.as_dict(),
        "mean_positive_similarity": pos,
        "mean_margin": margin,
        "split": args.split,
        "n": int(scores.shape[0]),
    }
    print(json.dumps(report))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        with open(Path(args.out) / "retrieval.jsonl", "w") as f:
            f.write(json.dumps(report) + "\n")
    return 0


def cmd_eval_vqa(args) -> int:
    model, model_cfg, _ = _restore_model(args.ckpt)
    records = data_mod.load_manifest(args.data)
    qa = data_mod.load_qa(args.qa)
    vocab = data_mod.Vocab()
    scenes = {r.id: r for r in records}
    from .training import OpenEndedHead, ChoiceHead

    if args.mode == "open":
        head = OpenEndedHead(model_cfg.dim, len(data_mod.answer_classes()))
    else:
        head = ChoiceHead(model_cfg.dim)
    if args.head:
        load_checkpoint(args.head, head)
    acc = eval_vqa(model, head, qa, scenes, vocab, model_cfg, args.mode, args.split)
    print(json.dumps({"mode": args.mode, "split": args.split, "accuracy": acc}))
    return 0


def _random_unit(rng: Rng, b: int, d: int) -> torch.Tensor:
    x = torch.tensor(rng.normal((b, d)), dtype=torch.float64)
    return l2_normalize(x)


def cmd_grad_check(args) -> int:
    hyper = LossHyper()
    rows = []
    rng = Rng(123)
    b, d = 4, 8
    fields = [_random_unit(rng, b, d) for _ in range(4)]

    if args.component in ("losses", "all"):
        anchor = fields[0]

        def f_nce(x):
            return exclusive_nce_anchor(
                l2_normalize(x.reshape(b, d)), [fields[1], fields[2], fields[3]],
                hyper.tau,
            )

        rows.append(("exclusive_nce/anchor", grad_check(f_nce, anchor.clone())))

        def f_rev(x):
            return reverse_alignment(
                l2_normalize(x.reshape(b, d)), [fields[1], fields[2], fields[3]],
                hyper.tau,
            )

        rows.append(("reverse_alignment/target", grad_check(f_rev, anchor.clone())))

        s = torch.tensor(rng.random(3 * b) * 1.6 - 0.8, dtype=torch.float64)

        def f_rank(x):
            p = x.reshape(3, b)
            return ranking_loss(p[0], p[1], p[2], hyper.tau, hyper.margin)

        rows.append(("ranking_loss/similarities", grad_check(f_rank, s)))

        logits = torch.tensor(rng.normal((5, 7)), dtype=torch.float64)
        targets = torch.tensor(rng.integers(0, 7, 5), dtype=torch.long)

        def f_focal(x):
            return focal_mlm(x.reshape(5, 7), targets, hyper.gamma)

        rows.append(("focal_mlm/logits", grad_check(f_focal, logits)))

    if args.component in ("encoders", "all"):
        from .encoders import ModelConfig

        cfg = ModelConfig(
            dim=8, heads=2, video_layers=1, text_layers=1, fusion_layers=1,
            frames=2, image_size=8, patch=4, vocab_size=12, max_text_len=4,
        )
        model = init_model(cfg, seed=1).to(torch.float64)
        clip = torch.tensor(rng.random((1, 2, 8, 8, 3)), dtype=torch.float64)

        def f_video(x):
            _, pooled = model.video(x.reshape(1, 2, 8, 8, 3))
            return pooled.sum()

        rows.append(("video_encoder/pixels", grad_check(f_video, clip, h=1e-5)))

    print(f"{'component':40s} {'max rel err':>12s}")
    ok = True
    for name, err in rows:
        status = "ok" if err <= 1e-4 else "FAIL"
        ok = ok and err <= 1e-4
        print(f"{name:40s} {err:12.3e} {status}")
    return 0 if ok else 2


def cmd_oracle_check(args) -> int:
    rng = Rng(7)
    worst = {"exclusive_nce": 0.0, "reverse": 0.0, "rank": 0.0, "focal": 0.0}
    hyper = LossHyper()
    for _ in range(args.trials):
        b, d = int(rng.integers(2, 9)), 8
        anchor = _random_unit(rng, b, d)
        fams = [_random_unit(rng, b, d) for _ in range(3)]
        fast = float(exclusive_nce_anchor(anchor, fams, hyper.tau))
        worst["exclusive_nce"] = max(
            worst["exclusive_nce"],
            abs(fast - oracle_exclusive_nce(anchor, fams, hyper.tau)),
        )
        fast = float(reverse_alignment(anchor, fams, hyper.tau))
        worst["reverse"] = max(
            worst["reverse"], abs(fast - oracle_reverse(anchor, fams, hyper.tau))
        )
        s = [torch.tensor(rng.random(b) * 2 - 1) for _ in range(3)]
        fast = float(ranking_loss(s[0], s[1], s[2], hyper.tau, hyper.margin))
        worst["rank"] = max(
            worst["rank"],
            abs(fast - oracle_rank(s[0], s[1], s[2], hyper.tau, hyper.margin)),
        )
        logits = torch.tensor(rng.normal((b, 11)), dtype=torch.float64)
        targets = torch.tensor(rng.integers(0, 11, b), dtype=torch.long)
        fast = float(focal_mlm(logits, targets, hyper.gamma))
        worst["focal"] = max(
            worst["focal"], abs(fast - oracle_focal(logits, targets, hyper.gamma))
        )
    ok = True
    print(f"{'loss':20s} {'max abs diff':>14s}")
    for name, diff in worst.items():
        status = "ok" if diff <= 1e-6 else "FAIL"
        ok = ok and diff <= 1e-6
        print(f"{name:20s} {diff:14.3e} {status}")
    return 0 if ok else 2


def cmd_efficiency(args) -> int:
    cfg = ModelConfig(
        dim=8, heads=2, video_layers=1, text_layers=1, fusion_layers=1,
        frames=2, image_size=8, patch=4, vocab_size=8, max_text_len=4,
    )
    model = init_model(cfg, seed=0)
    rng = Rng(0)
    clips = torch.tensor(
        rng.random((args.m, cfg.frames, 8, 8, 3)), dtype=torch.float32
    )
    ids = torch.ones(args.n, 4, dtype=torch.long)
    reports = efficiency_probe(model, clips, ids, args.k)
    out = {
        name: {
            "uni_forwards": r.uni_forwards,
            "fusion_forwards": r.fusion_forwards,
            "dot_products": r.dot_products,
        }
        for name, r in reports.items()
    }
    print(json.dumps(out))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trialign")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--frames", type=int, default=4)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--store-clips", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def add_config(sp):
        sp.add_argument("--config", default=None)
        sp.add_argument("--out", required=True)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
        sp.add_argument("--data", default=None, help="manifest path override")

    t = sub.add_parser("pretrain", help="run pre-training")
    add_config(t)
    t.set_defaults(func=cmd_pretrain)

    fr = sub.add_parser("finetune-retrieval")
    add_config(fr)
    fr.add_argument("--init", required=True)
    fr.set_defaults(func=cmd_finetune_retrieval)

    fv = sub.add_parser("finetune-vqa")
    add_config(fv)
    fv.add_argument("--init", required=True)
    fv.add_argument("--mode", choices=("open", "mc"), default="open")
    fv.add_argument("--qa", default=None)
    fv.set_defaults(func=cmd_finetune_vqa)

    er = sub.add_parser("eval-retrieval")
    er.add_argument("--ckpt", required=True)
    er.add_argument("--data", required=True)
    er.add_argument("--split", default="test")
    er.add_argument("--out", default=None)
    er.set_defaults(func=cmd_eval_retrieval)

    ev = sub.add_parser("eval-vqa")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--qa", required=True)
    ev.add_argument("--split", default="test")
    ev.add_argument("--mode", choices=("open", "mc"), default="open")
    ev.add_argument("--head", default=None)
    ev.set_defaults(func=cmd_eval_vqa)

    gc = sub.add_parser("grad-check")
    gc.add_argument("--component", choices=("losses", "encoders", "all"), default="all")
    gc.set_defaults(func=cmd_grad_check)

    oc = sub.add_parser("oracle-check")
    oc.add_argument("--trials", type=int, default=20)
    oc.set_defaults(func=cmd_oracle_check)

    ef = sub.add_parser("efficiency")
    ef.add_argument("--n", type=int, required=True)
    ef.add_argument("--m", type=int, required=True)
    ef.add_argument("--k", type=int, default=5)
    ef.set_defaults(func=cmd_efficiency)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; 1 is the usage/config code here.
        return 0 if not exc.code else 1
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError, MaskingError) as exc:
        return _fail(str(exc), 1)
    except (NonFiniteLossError, FloatingPointError) as exc:
        return _fail(str(exc), 2)


if __name__ == "__main__":
    sys.exit(main())

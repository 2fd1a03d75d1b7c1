"""Pre-training loop over the synthetic corpus, plus the two fine-tuning
protocols: retrieval (uni-modal encoders only, InfoNCE) and VQA
(classification head on the fused [CLS] embedding).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    QaRecord,
    RawBatch,
    Record,
    Vocab,
    answer_classes,
    make_batch,
    render,
)
from .encoders import ModelConfig, TriModalModel, init_model
from .losses import (
    EmbeddingBatch,
    LossBreakdown,
    LossHyper,
    focal_mlm,
    ranking_loss,
    reverse_alignment,
    tma_total,
    total_loss,
)
from .substrate import Rng, set_single_thread_determinism


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 3
    warmup_epochs: int = 1
    peak_lr: float = 3e-4
    weight_decay: float = 0.005
    betas: tuple[float, float] = (0.9, 0.98)
    hyper: LossHyper = field(default_factory=LossHyper)
    video_mask_ratio: float = 0.2
    text_mask_ratio: float = 0.3
    seed: int = 0
    precision: str = "float32"
    objective: str = "full"  # "full", "baseline" (InfoNCE + plain MLM),
    # or "tma" (tri-modal alignment + plain MLM, no ranking)
    focal_form: str = "focal"

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup epochs must be < total epochs")
        if self.batch_size < 2:
            raise ValueError("contrastive training needs batch size >= 2")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        if self.objective not in ("full", "baseline", "tma"):
            raise ValueError("objective must be 'full', 'baseline', or 'tma'")

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == "float64" else torch.float32


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup to peak, then cosine decay to ~0."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(step - warmup_steps, span)
    return peak * 0.5 * (1.0 + math.cos(math.pi * t / span))


def infonce(v_e: torch.Tensor, t_e: torch.Tensor, tau: float) -> torch.Tensor:
    """Symmetric InfoNCE; each direction is standard NCE over the batch."""
    return reverse_alignment(v_e, [t_e], tau) + reverse_alignment(t_e, [v_e], tau)


def encode_views(model: TriModalModel, batch: RawBatch) -> tuple[EmbeddingBatch, dict]:
    """Run all four encoder views and both fusions for one batch."""
    v_tokens, v_e = model.encode_video(batch.clips)
    t_tokens, t_e, t_pad = model.encode_text(batch.token_ids)
    vm_tokens, v_m = model.encode_video(batch.clips, batch.video_specs)
    tm_tokens, t_m, tm_pad = model.encode_text(batch.masked_token_ids)
    _, m_vmf = model.fuse(vm_tokens, t_tokens, t_pad)
    fused_tm, m_tmf = model.fuse(v_tokens, tm_tokens, tm_pad)
    emb = EmbeddingBatch(
        v_e=v_e,
        t_e=t_e,
        v_m=v_m,
        t_m=t_m,
        m_vmf=m_vmf,
        m_tmf=m_tmf,
        tm_valid=batch.tm_valid,
    )
    return emb, {"fused_tm": fused_tm, "t_tokens": t_tokens, "t_pad": t_pad}


def compute_losses(
    model: TriModalModel, batch: RawBatch, cfg: TrainConfig
) -> tuple[torch.Tensor, LossBreakdown]:
    hyper = cfg.hyper
    if cfg.objective == "baseline":
        # InfoNCE + plain cross-entropy MLM, no alignment/ranking extras.
        _, v_e = model.encode_video(batch.clips)
        t_tokens_b, t_e, _ = model.encode_text(batch.token_ids)
        tm_tokens, _, tm_pad = model.encode_text(batch.masked_token_ids)
        v_tokens, _ = model.encode_video(batch.clips)
        fused_tm, _ = model.fuse(v_tokens, tm_tokens, tm_pad)
        nce = infonce(v_e, t_e, hyper.tau)
        logits = model.mlm_logits(fused_tm, batch.mask_positions)
        mlm = focal_mlm(logits, batch.mask_targets, gamma=0.0)
        loss = nce + mlm
        parts = LossBreakdown(
            float(nce.detach()), 0.0, 0.0, 0.0, 0.0, float(mlm.detach())
        )
        return loss, parts

    emb, extra = encode_views(model, batch)
    l_v, l_vp, l_t, l_tp, l_tma = tma_total(emb, hyper.tau)
    if cfg.objective == "tma":
        # Alignment ablation: tri-modal alignment plus plain MLM, no ranking.
        logits = model.mlm_logits(extra["fused_tm"], batch.mask_positions)
        l_mlm = focal_mlm(logits, batch.mask_targets, gamma=0.0)
        loss = l_tma + l_mlm
        parts = LossBreakdown(
            float(l_v.detach()), float(l_vp.detach()), float(l_t.detach()),
            float(l_tp.detach()), 0.0, float(l_mlm.detach()),
        )
        return loss, parts

    s_pos = (emb.v_e * emb.t_e).sum(-1)
    s_tm = (emb.v_e * emb.t_m).sum(-1)
    s_vm = (emb.v_m * emb.t_e).sum(-1)
    l_rank = ranking_loss(
        s_pos, s_tm, s_vm, hyper.tau, hyper.margin, tm_valid=batch.tm_valid
    )
    logits = model.mlm_logits(extra["fused_tm"], batch.mask_positions)
    l_mlm = focal_mlm(logits, batch.mask_targets, hyper.gamma, form=cfg.focal_form)
    loss = total_loss(l_tma, l_rank, l_mlm)
    parts = LossBreakdown(
        float(l_v.detach()), float(l_vp.detach()), float(l_t.detach()),
        float(l_tp.detach()), float(l_rank.detach()), float(l_mlm.detach()),
    )
    return loss, parts


def make_optimizer(params, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params,
        lr=cfg.peak_lr,
        betas=tuple(cfg.betas),
        weight_decay=cfg.weight_decay,
    )


def _epoch_batches(records: list[Record], cfg: TrainConfig, epoch: int):
    perm = Rng(cfg.seed, stream=(4, epoch)).permutation(len(records))
    ordered = [records[int(i)] for i in perm]
    for start in range(0, len(ordered), cfg.batch_size):
        chunk = ordered[start : start + cfg.batch_size]
        if len(chunk) >= 2:
            yield chunk


def _steps_per_epoch(n: int, batch_size: int) -> int:
    return sum(1 for s in range(0, n, batch_size) if min(batch_size, n - s) >= 2)


def pretrain(
    records: list[Record],
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    resume_from: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> Path:
    """Full pre-training run; returns the final checkpoint path.

    Writes ``metrics.jsonl`` (one record per step) and a checkpoint per
    epoch under ``out_dir``.  With ``resume_from`` the run continues after
    the checkpoint's epoch and reproduces an uninterrupted run exactly
    (mask and shuffle streams are pure functions of (seed, epoch, step)).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [r for r in records if r.split == "train"]
    if not train:
        raise ValueError("no training records")
    if cfg.precision == "float64":
        set_single_thread_determinism()

    model = init_model(model_cfg, seed=cfg.seed).to(cfg.dtype)
    optimizer = make_optimizer(model.parameters(), cfg)
    start_epoch = 0
    if resume_from is not None:
        meta = load_checkpoint(resume_from, model, optimizer)
        start_epoch = meta["epoch"] + 1
        model = model.to(cfg.dtype)

    config_dict = {"model": asdict(model_cfg), "train": _train_dict(cfg)}
    steps_per_epoch = _steps_per_epoch(len(train), cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs

    log_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    last_ckpt = out_dir / "ckpt_final.zip"
    with open(log_path, mode, encoding="utf-8") as log:
        global_step = start_epoch * steps_per_epoch
        for epoch in range(start_epoch, cfg.epochs):
            for step_in_epoch, chunk in enumerate(_epoch_batches(train, cfg, epoch)):
                batch = make_batch(
                    chunk,
                    vocab,
                    model_cfg.max_text_len,
                    model_cfg.spatial_size,
                    cfg.video_mask_ratio,
                    cfg.text_mask_ratio,
                    cfg.seed,
                    epoch=epoch,
                    step=step_in_epoch,
                    dtype=cfg.dtype,
                )
                lr = lr_at(global_step, total_steps, warmup_steps, cfg.peak_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                loss, parts = compute_losses(model, batch, cfg)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(
                        f"non-finite loss at step {global_step}; "
                        f"last checkpoint retained under {out_dir}"
                    )
                loss.backward()
                optimizer.step()
                row = {"step": global_step, "lr": lr, **parts.as_dict()}
                log.write(json.dumps(row) + "\n")
                global_step += 1
            save_checkpoint(
                out_dir / f"ckpt_epoch{epoch}.zip",
                model,
                config_dict,
                step=global_step,
                epoch=epoch,
                rng_info={"seed": cfg.seed},
                optimizer=optimizer,
            )
            if stop_after_epoch is not None and epoch >= stop_after_epoch:
                return out_dir / f"ckpt_epoch{epoch}.zip"
    save_checkpoint(
        last_ckpt,
        model,
        config_dict,
        step=total_steps,
        epoch=cfg.epochs - 1,
        rng_info={"seed": cfg.seed},
        optimizer=optimizer,
    )
    return last_ckpt


def _train_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(d["betas"])
    return d


# ----------------------------------------------------------------------
# Fine-tuning: retrieval
# ----------------------------------------------------------------------


def finetune_retrieval(
    model: TriModalModel,
    records: list[Record],
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> Path:
    """Optimizes only the uni-modal encoders with symmetric InfoNCE; the
    fusion encoder and MLM head are untouched."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = [r for r in records if r.split == "train"]
    model = model.to(cfg.dtype)
    params = list(model.video.parameters()) + list(model.text.parameters())
    optimizer = make_optimizer(params, cfg)
    steps_per_epoch = _steps_per_epoch(len(train), cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    warmup_steps = steps_per_epoch * cfg.warmup_epochs
    global_step = 0
    with open(out_dir / "metrics.jsonl", "w", encoding="utf-8") as log:
        for epoch in range(cfg.epochs):
            for chunk in _epoch_batches(train, cfg, epoch):
                clips = torch.stack(
                    [torch.from_numpy(render(r.scene)) for r in chunk]
                ).to(cfg.dtype)
                ids = torch.tensor(
                    [vocab.encode(list(r.caption), model_cfg.max_text_len)[0] for r in chunk],
                    dtype=torch.long,
                )
                lr = lr_at(global_step, total_steps, warmup_steps, cfg.peak_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad()
                _, v_e = model.encode_video(clips)
                _, t_e, _ = model.encode_text(ids)
                loss = infonce(v_e, t_e, cfg.hyper.tau)
                if not torch.isfinite(loss):
                    raise NonFiniteLossError(f"non-finite loss at step {global_step}")
                loss.backward()
                optimizer.step()
                log.write(
                    json.dumps(
                        {"step": global_step, "lr": lr, "loss": float(loss.detach())}
                    )
                    + "\n"
                )
                global_step += 1
    ckpt = Path(out_dir) / "ckpt_final.zip"
    save_checkpoint(
        ckpt,
        model,
        {"model": asdict(model_cfg), "train": _train_dict(cfg)},
        step=global_step,
        epoch=cfg.epochs - 1,
        rng_info={"seed": cfg.seed},
        optimizer=optimizer,
    )
    return ckpt


# ----------------------------------------------------------------------
# Fine-tuning: VQA
# ----------------------------------------------------------------------


class OpenEndedHead(nn.Module):
    """MLP over the fused [CLS] embedding -> answer vocabulary logits."""

    def __init__(self, dim: int, n_answers: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, n_answers)
        )

    def forward(self, pooled):
        return self.net(pooled)


class ChoiceHead(nn.Module):
    """MLP scoring one fused (video, question+candidate) embedding."""

    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 1))

    def forward(self, pooled):
        return self.net(pooled).squeeze(-1)


def _question_ids(vocab: Vocab, words, max_len: int) -> list[int]:
    return vocab.encode(list(words), max_len)[0]


def _qa_fused(model, scene, q_ids_rows, dtype):
    clip = torch.from_numpy(render(scene)).to(dtype).unsqueeze(0)
    v_tokens, _ = model.encode_video(clip)
    ids = torch.tensor(q_ids_rows, dtype=torch.long)
    t_tokens, _, t_pad = model.encode_text(ids)
    v_rep = v_tokens.expand(ids.shape[0], -1, -1)
    _, pooled = model.fuse(v_rep, t_tokens, t_pad)
    return pooled


def finetune_vqa(
    model: TriModalModel,
    qa: list[QaRecord],
    scenes: dict[int, Record],
    vocab: Vocab,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    mode: str,
    epochs: int | None = None,
) -> nn.Module:
    """End-to-end fine-tuning with cross-entropy; returns the trained head.

    mode="open": answer-vocabulary classifier on the fused [CLS] embedding.
    mode="mc": scalar score per fused (video, question+candidate) pair,
    cross-entropy over the candidate set.
    """
    if mode not in ("open", "mc"):
        raise ValueError("mode must be 'open' or 'mc'")
    answers = answer_classes()
    ans_id = {a: i for i, a in enumerate(answers)}
    model = model.to(cfg.dtype)
    if mode == "open":
        head = OpenEndedHead(model_cfg.dim, len(answers)).to(cfg.dtype)
    else:
        head = ChoiceHead(model_cfg.dim).to(cfg.dtype)
    optimizer = make_optimizer(
        list(model.parameters()) + list(head.parameters()), cfg
    )
    wanted = [
        q
        for q in qa
        if q.split == "train" and ((q.candidates is None) == (mode == "open"))
    ]
    n_epochs = cfg.epochs if epochs is None else epochs
    ce = nn.CrossEntropyLoss()
    for epoch in range(n_epochs):
        perm = Rng(cfg.seed, stream=(5, epoch)).permutation(len(wanted))
        for i in perm:
            q = wanted[int(i)]
            rec = scenes[q.scene_id]
            if q.answer not in ans_id:
                raise ValueError(f"unknown answer class {q.answer!r}")
            optimizer.zero_grad()
            if mode == "open":
                rows = [_question_ids(vocab, q.question, model_cfg.max_text_len)]
                pooled = _qa_fused(model, rec.scene, rows, cfg.dtype)
                logits = head(pooled)
                target = torch.tensor([ans_id[q.answer]])
            else:
                rows = [
                    _question_ids(
                        vocab, tuple(q.question) + (c,), model_cfg.max_text_len
                    )
                    for c in q.candidates
                ]
                pooled = _qa_fused(model, rec.scene, rows, cfg.dtype)
                logits = head(pooled).unsqueeze(0)
                target = torch.tensor([q.candidates.index(q.answer)])
            loss = ce(logits, target)
            loss.backward()
            optimizer.step()
    return head


@torch.no_grad()
def eval_vqa(
    model: TriModalModel,
    head: nn.Module,
    qa: list[QaRecord],
    scenes: dict[int, Record],
    vocab: Vocab,
    model_cfg: ModelConfig,
    mode: str,
    split: str = "test",
    dtype: torch.dtype = torch.float32,
) -> float:
    answers = answer_classes()
    wanted = [
        q
        for q in qa
        if q.split == split and ((q.candidates is None) == (mode == "open"))
    ]
    preds, gold = [], []
    for q in wanted:
        rec = scenes[q.scene_id]
        if mode == "open":
            rows = [_question_ids(vocab, q.question, model_cfg.max_text_len)]
            logits = head(_qa_fused(model, rec.scene, rows, dtype))
            preds.append(answers[int(logits.argmax())])
        else:
            rows = [
                _question_ids(vocab, tuple(q.question) + (c,), model_cfg.max_text_len)
                for c in q.candidates
            ]
            scores = head(_qa_fused(model, rec.scene, rows, dtype))
            preds.append(q.candidates[int(scores.argmax())])
        gold.append(q.answer)
    from .evaluation import vqa_accuracy

    return vqa_accuracy(preds, gold)


@torch.no_grad()
def embed_split(
    model: TriModalModel,
    records: list[Record],
    vocab: Vocab,
    model_cfg: ModelConfig,
    split: str = "test",
    batch_size: int = 32,
    dtype: torch.dtype = torch.float32,
):
    """Pooled text and video embeddings for one split, row-aligned."""
    wanted = [r for r in records if r.split == split]
    t_parts, v_parts = [], []
    for start in range(0, len(wanted), batch_size):
        chunk = wanted[start : start + batch_size]
        clips = torch.stack([torch.from_numpy(render(r.scene)) for r in chunk]).to(
            dtype
        )
        ids = torch.tensor(
            [vocab.encode(list(r.caption), model_cfg.max_text_len)[0] for r in chunk],
            dtype=torch.long,
        )
        _, v_pool = model.encode_video(clips)
        _, t_pool, _ = model.encode_text(ids)
        t_parts.append(t_pool)
        v_parts.append(v_pool)
    return torch.cat(t_parts), torch.cat(v_parts)

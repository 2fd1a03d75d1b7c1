"""Retrieval metrics, similarity diagnostics, VQA accuracy, and the
encoder-call efficiency probe contrasting dual-encoder with cross-encoder
retrieval.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import TriModalModel


@dataclass(frozen=True)
class RetrievalMetrics:
    r1: float
    r5: float
    r10: float
    medr: float

    def as_dict(self):
        return {"R@1": self.r1, "R@5": self.r5, "R@10": self.r10, "MedR": self.medr}


@dataclass(frozen=True)
class EfficiencyReport:
    uni_forwards: int
    fusion_forwards: int
    dot_products: int


def similarity_matrix(text_emb: torch.Tensor, video_emb: torch.Tensor) -> torch.Tensor:
    """Pairwise dot products; rows are text queries, columns videos."""
    if text_emb.shape[-1] != video_emb.shape[-1]:
        raise ValueError("embedding dims differ")
    return text_emb @ video_emb.T


def ranks(scores: np.ndarray, gt_cols: np.ndarray) -> np.ndarray:
    """1-based rank of the ground-truth column per row under descending
    scores; ties broken by ascending column index."""
    scores = np.asarray(scores, dtype=np.float64)
    n, m = scores.shape
    gt_cols = np.asarray(gt_cols)
    if gt_cols.shape != (n,):
        raise ValueError("one ground-truth column per row required")
    if gt_cols.min() < 0 or gt_cols.max() >= m:
        raise ValueError("ground-truth index out of range")
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        g = gt_cols[i]
        s = scores[i]
        better = int((s > s[g]).sum())
        tied_before = int(((s == s[g]) & (np.arange(m) < g)).sum())
        out[i] = 1 + better + tied_before
    return out


def retrieval_metrics(scores, gt_cols) -> RetrievalMetrics:
    r = ranks(np.asarray(scores), np.asarray(gt_cols))
    return RetrievalMetrics(
        r1=float((r <= 1).mean()),
        r5=float((r <= 5).mean()),
        r10=float((r <= 10).mean()),
        medr=float(np.median(r)),
    )


def similarity_diagnostics(scores, gt_cols) -> tuple[float, float]:
    """(mean positive similarity, mean positive-vs-mean-negative margin)."""
    scores = np.asarray(scores, dtype=np.float64)
    gt_cols = np.asarray(gt_cols)
    n, m = scores.shape
    pos = scores[np.arange(n), gt_cols]
    if m == 1:
        return float(pos.mean()), float(pos.mean())
    total = scores.sum(axis=1)
    neg_mean = (total - pos) / (m - 1)
    return float(pos.mean()), float((pos - neg_mean).mean())


def vqa_accuracy(predictions, answers) -> float:
    if len(predictions) != len(answers):
        raise ValueError("predictions and answers differ in length")
    if not predictions:
        raise ValueError("empty prediction list")
    return sum(p == a for p, a in zip(predictions, answers)) / len(predictions)


# ----------------------------------------------------------------------
# Efficiency probe
# ----------------------------------------------------------------------


def _counted_similarity(model, text_emb, video_emb):
    model.counters.dot_products += text_emb.shape[0] * video_emb.shape[0]
    return similarity_matrix(text_emb, video_emb)


@torch.no_grad()
def dual_encoder_scores(model: TriModalModel, clips, token_ids) -> torch.Tensor:
    """N x M cosine scores via one encoder forward per item."""
    _, t_pool, _ = model.encode_text(token_ids)
    _, v_pool = model.encode_video(clips)
    return _counted_similarity(model, t_pool, v_pool)


@torch.no_grad()
def cross_encoder_scores(model: TriModalModel, clips, token_ids) -> torch.Tensor:
    """N x M scores via an exhaustive fusion forward per (text, video) pair.

    Pair score is the fused-[CLS] projection dotted with the text pooled
    embedding; the probe only contracts the call counts, not the scoring
    head choice.
    """
    n, m = token_ids.shape[0], clips.shape[0]
    t_tokens, t_pool, t_pad = model.text(token_ids)
    v_tokens, _ = model.video(clips)
    scores = torch.empty(n, m, dtype=t_pool.dtype)
    for i in range(n):
        for j in range(m):
            _, fused = model.fuse(
                v_tokens[j : j + 1], t_tokens[i : i + 1], t_pad[i : i + 1]
            )
            scores[i, j] = (fused[0] * t_pool[i]).sum()
    return scores


@torch.no_grad()
def rescore_topk(model: TriModalModel, clips, token_ids, base_scores, k: int):
    """Re-score each query's top-k candidates with the fusion encoder."""
    n = token_ids.shape[0]
    t_tokens, t_pool, t_pad = model.text(token_ids)
    v_tokens, _ = model.video(clips)
    out = base_scores.clone()
    for i in range(n):
        top = torch.argsort(base_scores[i], descending=True)[:k]
        for j in top.tolist():
            _, fused = model.fuse(
                v_tokens[j : j + 1], t_tokens[i : i + 1], t_pad[i : i + 1]
            )
            out[i, j] = (fused[0] * t_pool[i]).sum()
    return out


def efficiency_probe(model: TriModalModel, clips, token_ids, k: int) -> dict:
    """Exact call counts for the dual, cross, and rescoring strategies."""
    reports = {}
    model.counters.reset()
    base = dual_encoder_scores(model, clips, token_ids)
    reports["dual"] = EfficiencyReport(
        model.counters.uni_forwards,
        model.counters.fusion_forwards,
        model.counters.dot_products,
    )
    model.counters.reset()
    cross_encoder_scores(model, clips, token_ids)
    reports["cross"] = EfficiencyReport(
        model.counters.uni_forwards,
        model.counters.fusion_forwards,
        model.counters.dot_products,
    )
    model.counters.reset()
    rescore_topk(model, clips, token_ids, base, k)
    reports["rescore"] = EfficiencyReport(
        model.counters.uni_forwards,
        model.counters.fusion_forwards,
        model.counters.dot_products,
    )
    return reports

"""Training objectives: exclusive-NCE tri-modal alignment, pair-wise
ranking over masked pairs, focal masked-token reconstruction, and their
unweighted sum.

Every fast path has a nested-loop float64 oracle next to it; the test
suite holds them to 1e-6 agreement.

Conventions (recorded in config so runs are comparable): the NCE terms are
summed over the batch as written; ranking and MLM are batch-averaged.
Similarities are dot products of unit-norm rows, i.e. cosines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .substrate import check_unit_rows

NEG_INF = float("-inf")


@dataclass(frozen=True)
class LossHyper:
    """Temperature, ranking margin, focal exponent."""

    tau: float = 0.05
    margin: float = 5.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass
class EmbeddingBatch:
    """Pooled unit-norm embeddings for one batch; row i of every field is
    the same underlying video-text pair.

    ``tm_valid`` marks rows whose text had a maskable content word; rows
    with False skip every term that depends on the masked text or its
    fusion.
    """

    v_e: torch.Tensor
    t_e: torch.Tensor
    v_m: torch.Tensor
    t_m: torch.Tensor
    m_vmf: torch.Tensor
    m_tmf: torch.Tensor
    tm_valid: torch.Tensor | None = None

    def validate(self, tol: float = 1e-4) -> None:
        b = self.v_e.shape[0]
        for name in ("v_e", "t_e", "v_m", "t_m", "m_vmf", "m_tmf"):
            x = getattr(self, name)
            if x.shape != self.v_e.shape:
                raise ValueError(f"{name}: shape mismatch")
            check_unit_rows(x, tol=tol, name=name)
        if self.tm_valid is not None and self.tm_valid.shape != (b,):
            raise ValueError("tm_valid must be a length-B boolean vector")


@dataclass(frozen=True)
class LossBreakdown:
    l_v: float
    l_v_prime: float
    l_t: float
    l_t_prime: float
    l_rank: float
    l_mlm: float

    @property
    def l_tma(self) -> float:
        return self.l_v + self.l_v_prime + self.l_t + self.l_t_prime

    @property
    def total(self) -> float:
        return self.l_tma + self.l_rank + self.l_mlm

    def as_dict(self) -> dict[str, float]:
        return {
            "L_v": self.l_v,
            "L_vp": self.l_v_prime,
            "L_t": self.l_t,
            "L_tp": self.l_t_prime,
            "L_rank": self.l_rank,
            "L_mlm": self.l_mlm,
            "total": self.total,
        }


def _family_logits(anchor, positives, tau):
    # (n_fam, B, B); [f, i, j] = s(anchor_i, pos_f_j) / tau
    return torch.stack([anchor @ p.T for p in positives]) / tau


def _valid_masks(positives, valids, b, device):
    if valids is None:
        valids = [None] * len(positives)
    out = []
    for v in valids:
        if v is None:
            out.append(torch.ones(b, dtype=torch.bool, device=device))
        else:
            out.append(v.to(device=device, dtype=torch.bool))
    return out


def exclusive_nce_terms(
    anchor: torch.Tensor,
    positives: list[torch.Tensor],
    tau: float,
    valids: list[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Per-(family, row) exclusive-NCE terms, shape (n_fam, B).

    Term (f, i) is ``-log( e^{s_f(i,i)} / (e^{s_f(i,i)} + Z_i) )`` with
    ``Z_i = sum over families and j != i of e^{s(i,j)}``; the same-index
    positives of the *other* families never enter the denominator, so
    attracting one positive cannot suppress the others.  Rows marked
    invalid contribute zero and are excluded from every Z.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    check_unit_rows(anchor, name="anchor")
    for k, p in enumerate(positives):
        check_unit_rows(p, name=f"positive family {k}")
    b = anchor.shape[0]
    logits = _family_logits(anchor, positives, tau)
    valid = _valid_masks(positives, valids, b, anchor.device)

    # Negatives: all (family, j != i) entries whose column is valid.
    neg = logits.clone()
    eye = torch.eye(b, dtype=torch.bool, device=anchor.device)
    neg = neg.masked_fill(eye.unsqueeze(0), NEG_INF)
    for f, v in enumerate(valid):
        neg[f] = neg[f].masked_fill(~v.unsqueeze(0), NEG_INF)
    neg_lse = torch.logsumexp(neg.permute(1, 0, 2).reshape(b, -1), dim=1)  # (B,)

    rows = []
    for f, v in enumerate(valid):
        diag = logits[f].diagonal()
        denom = torch.logaddexp(diag, neg_lse)
        rows.append(torch.where(v, denom - diag, torch.zeros_like(diag)))
    return torch.stack(rows)


def exclusive_nce_anchor(
    anchor: torch.Tensor,
    positives: list[torch.Tensor],
    tau: float,
    valids: list[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Sum of the exclusive-NCE terms over rows and positive families."""
    return exclusive_nce_terms(anchor, positives, tau, valids).sum()


def reverse_alignment(
    target: torch.Tensor,
    queries: list[torch.Tensor],
    tau: float,
    valids: list[torch.Tensor | None] | None = None,
) -> torch.Tensor:
    """Standard NCE per query family against the target rows.

    For query family q and row i: ``-log( e^{s(q_i, target_i)} /
    sum_j e^{s(q_i, target_j)} )``; the denominator ranges over target
    rows only.  Summed over rows and families.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    check_unit_rows(target, name="target")
    b = target.shape[0]
    valid = _valid_masks(queries, valids, b, target.device)
    loss = target.new_zeros(())
    for q, v in zip(queries, valid):
        check_unit_rows(q, name="query family")
        logits = (q @ target.T) / tau  # (B, B); row i = query i vs all targets
        terms = torch.logsumexp(logits, dim=1) - logits.diagonal()
        loss = loss + terms[v].sum()
    return loss


def tma_total(batch: EmbeddingBatch, tau: float):
    """All four tri-modal alignment components and their sum.

    Video side anchors on V_e against {T_e, T_m, M_Vmf}; the text side
    mirrors it, anchoring on T_e against {V_e, V_m, M_Tmf}.
    """
    batch.validate()
    tm = batch.tm_valid
    video_valids = [None, tm, None]  # T_e, T_m, M_Vmf
    text_valids = [None, None, tm]  # V_e, V_m, M_Tmf
    l_v = exclusive_nce_anchor(
        batch.v_e, [batch.t_e, batch.t_m, batch.m_vmf], tau, video_valids
    )
    l_v_prime = reverse_alignment(
        batch.v_e, [batch.t_e, batch.t_m, batch.m_vmf], tau, video_valids
    )
    l_t = exclusive_nce_anchor(
        batch.t_e, [batch.v_e, batch.v_m, batch.m_tmf], tau, text_valids
    )
    l_t_prime = reverse_alignment(
        batch.t_e, [batch.v_e, batch.v_m, batch.m_tmf], tau, text_valids
    )
    return l_v, l_v_prime, l_t, l_t_prime, l_v + l_v_prime + l_t + l_t_prime


def ranking_loss(
    s_pos: torch.Tensor,
    s_tm: torch.Tensor,
    s_vm: torch.Tensor,
    tau: float,
    margin: float,
    tm_valid: torch.Tensor | None = None,
) -> torch.Tensor:
    """Hinge ranking: complete pairs must beat both masked pairs by
    ``margin`` in temperature-scaled similarity units.  Batch-averaged."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    term_tm = torch.relu(-(s_pos - s_tm) / tau + margin)
    term_vm = torch.relu(-(s_pos - s_vm) / tau + margin)
    if tm_valid is not None:
        n_tm = int(tm_valid.sum())
        tm_part = term_tm[tm_valid].sum() / max(n_tm, 1)
    else:
        tm_part = term_tm.mean()
    return tm_part + term_vm.mean()


def focal_mlm(
    logits: torch.Tensor,
    targets: torch.Tensor,
    gamma: float,
    form: str = "focal",
) -> torch.Tensor:
    """Masked-token reconstruction loss over all masked positions.

    ``form="focal"``: mean of (1-p)^gamma * (-log p) with p the probability
    of the correct token; gamma=0 recovers plain cross-entropy.
    ``form="as_printed"`` keeps -(1-p)^gamma * p for fidelity experiments;
    it is not a sensible training objective.
    """
    if logits.numel() == 0 or logits.shape[0] == 0:
        return logits.new_zeros(())
    logp = torch.log_softmax(logits, dim=-1)
    logp_t = logp.gather(1, targets.view(-1, 1)).squeeze(1)
    p_t = logp_t.exp()
    if form == "focal":
        per_pos = (1.0 - p_t) ** gamma * (-logp_t)
    elif form == "as_printed":
        per_pos = -((1.0 - p_t) ** gamma) * p_t
    else:
        raise ValueError(f"unknown focal form {form!r}")
    return per_pos.mean()


def total_loss(l_tma, l_rank, l_mlm):
    """Unweighted sum of the three objectives."""
    parts = {"L_TmA": l_tma, "L_rank": l_rank, "L_mlm": l_mlm}
    for name, p in parts.items():
        t = p if isinstance(p, torch.Tensor) else torch.as_tensor(p)
        if not torch.isfinite(t).all():
            raise FloatingPointError(f"{name} is not finite")
    return l_tma + l_rank + l_mlm


# ----------------------------------------------------------------------
# Scalar oracles: plain python loops, float64, no vectorization.
# ----------------------------------------------------------------------


def _dot(a, b):
    return sum(float(x) * float(y) for x, y in zip(a, b))


def _aslists(x):
    return [[float(v) for v in row] for row in x.detach().to(torch.float64)]


def oracle_exclusive_nce(anchor, positives, tau, valids=None) -> float:
    a = _aslists(anchor)
    ps = [_aslists(p) for p in positives]
    b = len(a)
    if valids is None:
        valids = [[True] * b for _ in ps]
    else:
        valids = [
            [True] * b if v is None else [bool(x) for x in v] for v in valids
        ]
    loss = 0.0
    for i in range(b):
        z = 0.0
        for f in range(len(ps)):
            for j in range(b):
                if j != i and valids[f][j]:
                    z += math.exp(_dot(a[i], ps[f][j]) / tau)
        for f in range(len(ps)):
            if not valids[f][i]:
                continue
            pos = math.exp(_dot(a[i], ps[f][i]) / tau)
            loss += -math.log(pos / (pos + z))
    return loss


def oracle_reverse(target, queries, tau, valids=None) -> float:
    t = _aslists(target)
    qs = [_aslists(q) for q in queries]
    b = len(t)
    if valids is None:
        valids = [[True] * b for _ in qs]
    else:
        valids = [
            [True] * b if v is None else [bool(x) for x in v] for v in valids
        ]
    loss = 0.0
    for f in range(len(qs)):
        for i in range(b):
            if not valids[f][i]:
                continue
            num = math.exp(_dot(qs[f][i], t[i]) / tau)
            den = sum(math.exp(_dot(qs[f][i], t[j]) / tau) for j in range(b))
            loss += -math.log(num / den)
    return loss


def oracle_rank(s_pos, s_tm, s_vm, tau, margin, tm_valid=None) -> float:
    sp = [float(x) for x in s_pos]
    st = [float(x) for x in s_tm]
    sv = [float(x) for x in s_vm]
    b = len(sp)
    tm_ok = [True] * b if tm_valid is None else [bool(x) for x in tm_valid]
    tm_terms = [
        max(0.0, -(sp[i] - st[i]) / tau + margin) for i in range(b) if tm_ok[i]
    ]
    vm_terms = [max(0.0, -(sp[i] - sv[i]) / tau + margin) for i in range(b)]
    tm_part = sum(tm_terms) / max(len(tm_terms), 1)
    return tm_part + sum(vm_terms) / b


def oracle_focal(logits, targets, gamma, form="focal") -> float:
    rows = _aslists(logits)
    tgt = [int(x) for x in targets]
    if not rows:
        return 0.0
    total = 0.0
    for row, t in zip(rows, tgt):
        m = max(row)
        exps = [math.exp(v - m) for v in row]
        p = exps[t] / sum(exps)
        if form == "focal":
            total += (1.0 - p) ** gamma * (-math.log(p))
        else:
            total += -((1.0 - p) ** gamma) * p
    return total / len(rows)

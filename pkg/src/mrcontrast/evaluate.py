"""Retrieval, probing and error-decomposition metrics.

The gallery holds one canonical text embedding per unique label, so retrieval
is over label prototypes, not over every prompt string. All tie-breaks are
deterministic (ascending label id) to keep reports reproducible bit for bit.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    EmptyGallery,
    EmptyImageSet,
    EmptyPredictionList,
    LabelDecodeFailure,
    SingleClassTrainingSet,
)
from .labels import GridSpec, LabelSpace, coarsened_space
from .model import DualEncoder
from .prompts import tokenize

DEFAULT_KS = (1, 5, 10)


@dataclass
class Gallery:
    label_ids: np.ndarray  # (G,), ascending
    embeddings: np.ndarray  # (G, d_emb), unit rows


def encode_features(model: DualEncoder, features: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Image embeddings without keeping the autodiff graphs around."""
    parts = []
    for start in range(0, features.shape[0], chunk):
        parts.append(model.encode_images(features[start : start + chunk]).data)
    return np.concatenate(parts, axis=0) if parts else np.empty((0, model.config.d_emb))


def build_gallery(
    model: DualEncoder, space: LabelSpace, present_ids: Sequence[int]
) -> Gallery:
    """One canonical text embedding per unique label id in present_ids."""
    ids = np.unique(np.asarray(present_ids, dtype=np.int64))
    if ids.size == 0:
        raise EmptyGallery("no labels to build a gallery from")
    token_lists = [
        tokenize(space.labels[int(i)].canonical_text) for i in ids
    ]
    emb = model.encode_texts(token_lists).data
    return Gallery(label_ids=ids, embeddings=emb)


def rank_gallery(queries: np.ndarray, gallery: Gallery) -> np.ndarray:
    """(N, G) ranked gallery label ids per query, best first.

    Cosine similarity (inputs are unit rows); ties break by ascending label
    id.
    """
    if queries.shape[0] == 0:
        raise EmptyImageSet("no queries to rank")
    sims = queries @ gallery.embeddings.T
    ranked = np.empty_like(sims, dtype=np.int64)
    for i in range(sims.shape[0]):
        order = np.lexsort((gallery.label_ids, -sims[i]))
        ranked[i] = gallery.label_ids[order]
    return ranked


def recall_at_k(
    queries: np.ndarray,
    gallery: Gallery,
    true_ids: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[int, float]:
    """Fraction of queries whose true label appears in the top k."""
    if any(k < 1 for k in ks):
        raise ValueError("k must be >= 1")
    ranked = rank_gallery(queries, gallery)
    out = {}
    for k in ks:
        hits = (ranked[:, :k] == np.asarray(true_ids)[:, None]).any(axis=1)
        out[k] = float(hits.mean())
    return out


def text_to_image_recall(
    gallery: Gallery,
    image_embeddings: np.ndarray,
    image_label_ids: np.ndarray,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[int, float]:
    """Per unique label, does any top-k image carry the query's label?

    Image ties break by ascending label id, then ascending image index.
    """
    if image_embeddings.shape[0] == 0:
        raise EmptyImageSet("no images to rank")
    sims = gallery.embeddings @ image_embeddings.T  # (G, N)
    idx = np.arange(image_embeddings.shape[0])
    out = {k: 0 for k in ks}
    for q in range(gallery.label_ids.size):
        order = np.lexsort((idx, image_label_ids, -sims[q]))
        ranked_labels = image_label_ids[order]
        for k in ks:
            if (ranked_labels[:k] == gallery.label_ids[q]).any():
                out[k] += 1
    return {k: out[k] / gallery.label_ids.size for k in ks}


def scan_majority_vote(
    slice_predictions: Sequence[int], slice_scores: Sequence[float]
) -> int:
    """Mode of the slice-level predictions.

    Vote ties resolve to the label whose voting slices have the highest mean
    similarity, then to the lowest label id.
    """
    if len(slice_predictions) == 0:
        raise EmptyPredictionList("scan has no slice predictions")
    votes = Counter(slice_predictions)
    top = max(votes.values())
    tied = [lab for lab, v in votes.items() if v == top]
    if len(tied) == 1:
        return int(tied[0])
    scores = np.asarray(slice_scores, dtype=np.float64)
    preds = np.asarray(slice_predictions)
    means = {lab: float(scores[preds == lab].mean()) for lab in tied}
    best = max(means.values())
    winners = sorted(lab for lab, m in means.items() if m == best)
    return int(winners[0])


def scan_ranking(
    slice_predictions: np.ndarray,
    slice_scores: np.ndarray,
    mean_sims: np.ndarray,
    gallery: Gallery,
) -> np.ndarray:
    """Gallery labels ranked for one scan.

    Rank 1 is the majority-vote winner; the remainder orders by vote count
    descending, then mean scan-to-gallery similarity, then ascending id.
    """
    winner = scan_majority_vote(list(slice_predictions), list(slice_scores))
    votes = Counter(int(p) for p in slice_predictions)
    counts = np.array(
        [votes.get(int(lab), 0) for lab in gallery.label_ids], dtype=np.int64
    )
    order = np.lexsort((gallery.label_ids, -mean_sims, -counts))
    ranked = [int(winner)]
    for pos in order:
        lab = int(gallery.label_ids[pos])
        if lab != winner:
            ranked.append(lab)
    return np.asarray(ranked, dtype=np.int64)


def scan_to_text_recall(
    image_embeddings: np.ndarray,
    image_label_ids: np.ndarray,
    scan_ids: np.ndarray,
    gallery: Gallery,
    ks: Sequence[int] = DEFAULT_KS,
) -> dict[int, float]:
    """Majority-vote retrieval per scan (all slices of a scan share a label)."""
    sims = image_embeddings @ gallery.embeddings.T  # (N, G)
    top1_pos = np.empty(sims.shape[0], dtype=np.int64)
    for i in range(sims.shape[0]):
        order = np.lexsort((gallery.label_ids, -sims[i]))
        top1_pos[i] = order[0]
    top1_labels = gallery.label_ids[top1_pos]
    top1_scores = sims[np.arange(sims.shape[0]), top1_pos]

    out = {k: 0 for k in ks}
    unique_scans = np.unique(scan_ids)
    for scan in unique_scans:
        rows = np.flatnonzero(scan_ids == scan)
        truth = int(image_label_ids[rows[0]])
        ranked = scan_ranking(
            top1_labels[rows],
            top1_scores[rows],
            sims[rows].mean(axis=0),
            gallery,
        )
        for k in ks:
            if (ranked[:k] == truth).any():
                out[k] += 1
    return {k: out[k] / unique_scans.size for k in ks}


@dataclass
class ProbeResult:
    accuracy: float
    losses: list[float]
    predicted_ids: np.ndarray
    n_iterations: int


def linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    eval_x: np.ndarray,
    eval_y: np.ndarray,
    l2: float = 1e-5,
    max_iter: int = 500,
    grad_tol: float = 1e-6,
) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings.

    Full-batch gradient descent. The step size warm-starts from the spectral
    (Barzilai-Borwein) estimate and is then backtracked until the Armijo
    sufficient-decrease test holds, so the training loss is non-increasing by
    construction; stops at max_iter iterations or when the gradient norm
    falls below grad_tol. Deterministic (zero init, no sampling).
    """
    classes = np.unique(train_y)
    if classes.size < 2:
        raise SingleClassTrainingSet("probe needs at least two classes")
    class_index = {int(c): i for i, c in enumerate(classes)}
    y = np.array([class_index[int(v)] for v in train_y], dtype=np.int64)

    def augment(x: np.ndarray) -> np.ndarray:
        return np.concatenate([x, np.ones((x.shape[0], 1))], axis=1)

    xa = augment(np.asarray(train_x, dtype=np.float64))
    n, d = xa.shape
    c = classes.size
    w = np.zeros((c, d), dtype=np.float64)
    onehot = np.zeros((n, c), dtype=np.float64)
    onehot[np.arange(n), y] = 1.0

    rows = np.arange(n)

    def softmax_nll(logit_rows: np.ndarray) -> tuple[float, np.ndarray]:
        shifted = logit_rows - logit_rows.max(axis=1, keepdims=True)
        expl = np.exp(shifted)
        norm = expl.sum(axis=1)
        nll = float((np.log(norm) - shifted[rows, y]).mean())
        return nll, expl / norm[:, None]

    # Along the ray w - s*grad the logits move linearly (logits - s*dlogits),
    # so each trial step costs one softmax rather than a fresh matmul. The
    # accepted candidate's logits are reused for the next iteration, which
    # makes the recorded losses non-increasing by construction rather than up
    # to rounding.
    losses: list[float] = []
    iterations = 0
    step = 1.0
    prev_grad: Optional[np.ndarray] = None
    prev_dw: Optional[np.ndarray] = None
    logits = xa @ w.T
    for _ in range(max_iter):
        nll, probs = softmax_nll(logits)
        ww = float((w * w).sum())
        losses.append(nll + 0.5 * l2 * ww)
        grad = (probs - onehot).T @ xa / n + l2 * w
        iterations += 1
        gg = float((grad * grad).sum())
        if np.sqrt(gg) < grad_tol:
            break
        if prev_grad is not None and prev_dw is not None:
            # spectral (Barzilai-Borwein) step estimate from the last
            # accepted move; positive for a convex objective, otherwise the
            # previous step is kept
            dgrad = grad - prev_grad
            num = float((prev_dw * prev_dw).sum())
            den = float((prev_dw * dgrad).sum())
            if np.isfinite(den) and den > 0.0 and num > 0.0:
                step = num / den
        wg = float((w * grad).sum())
        dlogits = xa @ grad.T
        while step > 1e-18:
            nll_c, _ = softmax_nll(logits - step * dlogits)
            ridge_c = 0.5 * l2 * (ww - 2.0 * step * wg + step * step * gg)
            if nll_c + ridge_c <= losses[-1] - 1e-4 * step * gg:
                prev_dw = -step * grad
                prev_grad = grad
                w = w + prev_dw
                logits = logits - step * dlogits
                break
            step *= 0.5
        else:
            break

    eval_logits = augment(np.asarray(eval_x, dtype=np.float64)) @ w.T
    pred = classes[np.argmax(eval_logits, axis=1)]
    accuracy = float((pred == np.asarray(eval_y)).mean())
    return ProbeResult(
        accuracy=accuracy,
        losses=losses,
        predicted_ids=pred.astype(np.int64),
        n_iterations=iterations,
    )


@dataclass
class PerTagError:
    rates: dict[str, float]
    te_bin_mae: float
    tr_bin_mae: float
    te_mae_ms: float
    tr_mae_ms: float


def per_tag_error(
    predicted_ids: np.ndarray, true_ids: np.ndarray, space: LabelSpace
) -> PerTagError:
    """Per-field mismatch rates plus TE/TR bin distances.

    Bin MAE is reported in bins and converted to milliseconds exactly as
    bins * bin width.
    """
    if len(predicted_ids) != len(true_ids):
        raise LabelDecodeFailure("prediction/truth length mismatch")
    fields = space.key_fields
    mismatches = {f: 0 for f in fields}
    te_dist: list[float] = []
    tr_dist: list[float] = []
    for p, t in zip(predicted_ids, true_ids):
        pk = space.decode(int(p))
        tk = space.decode(int(t))
        for f in fields:
            if pk[f] != tk[f]:
                mismatches[f] += 1
        if "te_bin" in pk:
            te_dist.append(abs(pk["te_bin"] - tk["te_bin"]))
            tr_dist.append(abs(pk["tr_bin"] - tk["tr_bin"]))
    n = len(true_ids)
    rates = {f: mismatches[f] / n for f in fields}
    te_bin_mae = float(np.mean(te_dist)) if te_dist else 0.0
    tr_bin_mae = float(np.mean(tr_dist)) if tr_dist else 0.0
    grid = space.config.grid
    return PerTagError(
        rates=rates,
        te_bin_mae=te_bin_mae,
        tr_bin_mae=tr_bin_mae,
        te_mae_ms=te_bin_mae * grid.te_width,
        tr_mae_ms=tr_bin_mae * grid.tr_width,
    )


@dataclass
class EvalReport:
    recalls: dict[str, dict[str, float]]
    probe_accuracy: Optional[float]
    per_tag_error: dict[str, float]
    te_bin_mae: float
    tr_bin_mae: float
    te_mae_ms: float
    tr_mae_ms: float
    config_hash: str
    counts: dict[str, int] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "recalls": self.recalls,
            "probe_accuracy": self.probe_accuracy,
            "per_tag_error": self.per_tag_error,
            "te_bin_mae": self.te_bin_mae,
            "tr_bin_mae": self.tr_bin_mae,
            "te_mae_ms": self.te_mae_ms,
            "tr_mae_ms": self.tr_mae_ms,
            "config_hash": self.config_hash,
            "counts": self.counts,
        }


def _recall_dict(r: dict[int, float]) -> dict[str, float]:
    return {f"r{k}": v for k, v in sorted(r.items())}


def run_evaluation(
    model: DualEncoder,
    space: LabelSpace,
    train_features: Optional[np.ndarray],
    train_ids: Optional[np.ndarray],
    eval_features: np.ndarray,
    eval_ids: np.ndarray,
    eval_scan_ids: np.ndarray,
    config_hash: str,
    ks: Sequence[int] = DEFAULT_KS,
    probe_l2: float = 1e-5,
    transfer_grid: Optional[GridSpec] = None,
) -> EvalReport:
    """Full evaluation; pass transfer_grid to relabel under a coarser grid."""
    if transfer_grid is not None:
        coarse, coarse_ids, _ = coarsened_space(space, eval_ids, transfer_grid)
        space, eval_ids = coarse, coarse_ids
        train_features = train_ids = None  # probe is not part of transfer eval

    eval_emb = encode_features(model, eval_features)
    gallery = build_gallery(model, space, eval_ids)

    i2t = recall_at_k(eval_emb, gallery, eval_ids, ks)
    s2t = scan_to_text_recall(eval_emb, eval_ids, eval_scan_ids, gallery, ks)
    t2i = text_to_image_recall(gallery, eval_emb, eval_ids, ks)

    probe_accuracy = None
    tag_rates: dict[str, float] = {}
    te_bin_mae = tr_bin_mae = te_mae_ms = tr_mae_ms = 0.0
    if train_features is not None and train_ids is not None:
        train_emb = encode_features(model, train_features)
        probe = linear_probe(train_emb, train_ids, eval_emb, eval_ids, l2=probe_l2)
        probe_accuracy = probe.accuracy
        tags = per_tag_error(probe.predicted_ids, eval_ids, space)
        tag_rates = tags.rates
        te_bin_mae, tr_bin_mae = tags.te_bin_mae, tags.tr_bin_mae
        te_mae_ms, tr_mae_ms = tags.te_mae_ms, tags.tr_mae_ms

    return EvalReport(
        recalls={
            "image_to_text": _recall_dict(i2t),
            "scan_to_text": _recall_dict(s2t),
            "text_to_image": _recall_dict(t2i),
        },
        probe_accuracy=probe_accuracy,
        per_tag_error=tag_rates,
        te_bin_mae=te_bin_mae,
        tr_bin_mae=tr_bin_mae,
        te_mae_ms=te_mae_ms,
        tr_mae_ms=tr_mae_ms,
        config_hash=config_hash,
        counts={
            "n_eval_slices": int(eval_features.shape[0]),
            "n_eval_scans": int(np.unique(eval_scan_ids).size),
            "n_labels": len(space),
            "n_gallery": int(gallery.label_ids.size),
        },
    )


def render_table(report: EvalReport) -> str:
    """Plain-text table of the report's headline numbers."""
    lines = []
    lines.append("task            " + "".join(f"{'R@' + str(k):>8}" for k in (1, 5, 10)))
    for task in ("image_to_text", "scan_to_text", "text_to_image"):
        r = report.recalls[task]
        row = f"{task:<16}"
        for k in (1, 5, 10):
            row += f"{r.get('r' + str(k), float('nan')):>8.3f}"
        lines.append(row)
    if report.probe_accuracy is not None:
        lines.append(f"linear probe accuracy: {report.probe_accuracy:.3f}")
        lines.append(
            f"TE bin MAE: {report.te_bin_mae:.3f} bins "
            f"({report.te_mae_ms:.1f} ms); "
            f"TR bin MAE: {report.tr_bin_mae:.3f} bins "
            f"({report.tr_mae_ms:.1f} ms)"
        )
        if report.per_tag_error:
            lines.append("per-tag error rates:")
            for name, rate in report.per_tag_error.items():
                lines.append(f"  {name:<18} {rate:.4f}")
    lines.append(f"labels: {report.counts.get('n_labels', 0)}  config: {report.config_hash}")
    return "\n".join(lines)

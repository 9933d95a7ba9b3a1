"""Grounding, captioning, QA and spatio-temporal mask metrics."""

from __future__ import annotations

import csv
import io
import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

THRESHOLDS = (0.25, 0.5)
CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0


# --- boxes --------------------------------------------------------------------


def _box(b):
    lo, hi = (np.asarray(x, dtype=np.float64).reshape(3) for x in b)
    if np.any(lo > hi):
        raise ValueError(f"invalid box: min {lo} exceeds max {hi}")
    return lo, hi


def aabb_iou(a, b) -> float:
    """IoU of two axis-aligned boxes given as ``(min_corner, max_corner)``.

    Zero-volume boxes score 0, even against themselves.
    """
    alo, ahi = _box(a)
    blo, bhi = _box(b)
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0, None)))
    va = float(np.prod(ahi - alo))
    vb = float(np.prod(bhi - blo))
    union = va + vb - inter
    if inter <= 0 or union <= 0:
        return 0.0
    return inter / union


def grounding_accuracy(preds: dict, gts: dict, thresholds=THRESHOLDS) -> dict:
    """Fraction of records whose predicted box reaches each IoU threshold.

    ``preds`` maps record_id to a box or None (unparseable, counted as a miss).
    """
    if set(preds) != set(gts):
        raise KeyError("prediction and ground-truth record ids differ")
    if not gts:
        return {t: 0.0 for t in thresholds}
    ious = [0.0 if preds[k] is None else aabb_iou(preds[k], gts[k]) for k in sorted(gts)]
    return {t: sum(i >= t for i in ious) / len(ious) for t in thresholds}


def iou_matrix(pred_boxes, gt_boxes) -> np.ndarray:
    m = np.zeros((len(pred_boxes), len(gt_boxes)))
    for i, p in enumerate(pred_boxes):
        for j, g in enumerate(gt_boxes):
            m[i, j] = aabb_iou(p, g)
    return m


def optimal_matching(ious: np.ndarray) -> list:
    """One-to-one pairs ``(pred, gt)`` maximizing the summed IoU."""
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        return []
    rows, cols = linear_sum_assignment(ious, maximize=True)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match_counts(pred_boxes, gt_boxes, threshold) -> tuple:
    """``(tp, fp, fn)`` for one record. Empty prediction on an empty target counts as one TP."""
    if not pred_boxes and not gt_boxes:
        return 1, 0, 0
    ious = iou_matrix(pred_boxes, gt_boxes)
    tp = sum(1 for i, j in optimal_matching(ious) if ious[i, j] >= threshold)
    return tp, len(pred_boxes) - tp, len(gt_boxes) - tp


def f1_from_counts(tp, fp, fn) -> float:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def multi_object_f1(preds: dict, gts: dict, threshold: float) -> float:
    """F1 over TP/FP/FN pooled across records; values are lists of boxes."""
    tp = fp = fn = 0
    for k in sorted(gts):
        a, b, c = match_counts(preds.get(k) or [], gts[k], threshold)
        tp, fp, fn = tp + a, fp + b, fn + c
    return f1_from_counts(tp, fp, fn)


# --- spatio-temporal masks ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class MaskVolume:
    frames: np.ndarray  # (L, H, W) bool

    def __post_init__(self):
        f = np.asarray(self.frames).astype(bool)
        if f.ndim != 3 or f.shape[0] < 1:
            raise ValueError("mask volume needs shape (L>=1, H, W)")
        object.__setattr__(self, "frames", f)


def st_iou(pred: MaskVolume, gt: MaskVolume) -> float:
    """Summed per-frame intersection over summed per-frame union; 0/0 is 0."""
    if pred.frames.shape != gt.frames.shape:
        raise ValueError(f"volume shapes differ: {pred.frames.shape} vs {gt.frames.shape}")
    inter = int(np.logical_and(pred.frames, gt.frames).sum())
    union = int(np.logical_or(pred.frames, gt.frames).sum())
    return inter / union if union else 0.0


def rle_encode(mask) -> list:
    """Row-major run lengths, starting with a (possibly empty) run of zeros."""
    flat = np.asarray(mask, dtype=bool).ravel()
    counts, current, run = [], False, 0
    for px in flat:
        if px == current:
            run += 1
        else:
            counts.append(run)
            current, run = px, 1
    counts.append(run)
    return counts


def rle_decode(counts, height, width) -> np.ndarray:
    if sum(counts) != height * width:
        raise ValueError(f"run lengths sum to {sum(counts)}, expected {height * width}")
    flat = np.zeros(height * width, dtype=bool)
    pos, val = 0, False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(height, width)


def save_masks(volume: MaskVolume, path) -> None:
    """JSON container: ``{"height", "width", "frames": [{"counts": [...]}, ...]}``."""
    L, H, W = volume.frames.shape
    doc = {"height": H, "width": W, "frames": [{"counts": rle_encode(f)} for f in volume.frames]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_masks(path) -> MaskVolume:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    H, W = int(doc["height"]), int(doc["width"])
    return MaskVolume(np.stack([rle_decode(f["counts"], H, W) for f in doc["frames"]]))


# --- text ---------------------------------------------------------------------

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}]")
_ARTICLES = {"a", "an", "the"}


def tokenize(text: str) -> list:
    """Lowercase, replace punctuation with spaces, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def normalize_answer(text: str) -> str:
    words = _PUNCT.sub("", text.lower()).split()
    while words and words[0] in _ARTICLES:
        words = words[1:]
    return " ".join(words)


def _contains(hay: list, needle: list) -> bool:
    n = len(needle)
    return any(hay[i:i + n] == needle for i in range(len(hay) - n + 1))


def exact_match(pred: str, refs, refined: bool = False) -> int:
    """1 when the normalized prediction equals a normalized reference.

    The refined variant also accepts either side appearing as a contiguous
    word sequence inside the other.
    """
    refs = list(refs)
    if not refs:
        raise ValueError("need at least one reference")
    p = normalize_answer(pred)
    normed = [normalize_answer(r) for r in refs]
    if any(p == r for r in normed):
        return 1
    if not refined or not p:
        return 0
    pw = p.split()
    for r in normed:
        rw = r.split()
        if rw and (_contains(pw, rw) or _contains(rw, pw)):
            return 1
    return 0


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(pred_tokens, refs_tokens, max_n=4):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        pc = _ngrams(pred_tokens, n)
        best = Counter()
        for r in refs_tokens:
            for g, c in _ngrams(r, n).items():
                best[g] = max(best[g], c)
        matches.append(sum(min(c, best[g]) for g, c in pc.items()))
        totals.append(max(len(pred_tokens) - n + 1, 0))
    c = len(pred_tokens)
    r = min((abs(len(t) - c), len(t)) for t in refs_tokens)[1]
    return matches, totals, c, r


def _bleu_from_stats(matches, totals, c, r, max_n=4) -> float:
    if c == 0 or matches[0] == 0:
        return 0.0
    logp = 0.0
    for n in range(max_n):
        m, t = matches[n], totals[n]
        if n > 0 and m == 0:
            m, t = m + 1, t + 1
        logp += math.log(m / t) / max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(logp)


def bleu4(pred: str, refs) -> float:
    """Sentence BLEU-4 with uniform weights and brevity penalty.

    Smoothing: a zero match count for n >= 2 becomes (0 + 1) / (total + 1).
    No unigram overlap scores 0.
    """
    refs = [tokenize(r) for r in refs]
    if not refs:
        raise ValueError("need at least one reference")
    return _bleu_from_stats(*_bleu_stats(tokenize(pred), refs))


def corpus_bleu4(pairs) -> float:
    """Corpus BLEU-4 from pooled clipped counts, same smoothing as :func:`bleu4`."""
    M, T, C, R = [0] * 4, [0] * 4, 0, 0
    for pred, refs in pairs:
        m, t, c, r = _bleu_stats(tokenize(pred), [tokenize(x) for x in refs])
        M = [a + b for a, b in zip(M, m)]
        T = [a + b for a, b in zip(T, t)]
        C, R = C + c, R + r
    return _bleu_from_stats(M, T, C, R)


def cider(corpus, n: int = 4, sigma: float = CIDER_SIGMA, scale: float = CIDER_SCALE):
    """CIDEr-D over ``corpus`` = list of ``(pred, refs)``.

    Document frequencies come from the references of the whole corpus, so a
    single-sample corpus has zero idf everywhere and scores 0.
    Returns ``(mean, per_sample_scores)``.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    preds = [tokenize(p) for p, _ in corpus]
    refs = [[tokenize(r) for r in rs] for _, rs in corpus]
    df = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for k in range(1, n + 1):
                seen.update(_ngrams(r, k))
        df.update(seen)
    log_n = math.log(float(len(corpus)))

    def vec(tokens):
        out, norms = [], []
        for k in range(1, n + 1):
            v = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in _ngrams(tokens, k).items()}
            out.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        # length is the bigram count, as in the reference CIDEr-D scorer
        return out, norms, max(len(tokens) - 1, 0)

    scores = []
    for p, rs in zip(preds, refs):
        vp, np_, lp = vec(p)
        total = 0.0
        for r in rs:
            vr, nr, lr = vec(r)
            delta = lp - lr
            acc = 0.0
            for k in range(n):
                val = sum(min(x, vr[k][g]) * vr[k][g] for g, x in vp[k].items() if g in vr[k])
                if np_[k] != 0 and nr[k] != 0:
                    val /= np_[k] * nr[k]
                acc += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
            total += acc / n
        scores.append(total / len(rs) * scale)
    return float(np.mean(scores)), scores


def caption_at_iou(samples, threshold: float, metric="cider", **kw) -> float:
    """Mean caption score where samples below the IoU threshold score 0.

    ``samples`` = list of ``(pred, refs, iou)``; ``metric`` is ``"cider"``,
    ``"bleu4"``, or a callable ``(pred, refs) -> score``.
    """
    samples = list(samples)
    if not samples:
        return 0.0
    per = caption_scores([(p, r) for p, r, _ in samples], metric, **kw)
    return float(np.mean([s if iou >= threshold else 0.0 for s, (_, _, iou) in zip(per, samples)]))


def caption_scores(pairs, metric="cider", **kw) -> list:
    if metric == "cider":
        return cider(pairs, **kw)[1]
    if metric == "bleu4":
        return [bleu4(p, r) for p, r in pairs]
    return [metric(p, r) for p, r in pairs]


# --- reports ------------------------------------------------------------------


@dataclass
class EvalReport:
    benchmark: str
    aggregates: dict
    rows: list
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"benchmark": self.benchmark, "aggregates": self.aggregates, "config": self.config, "rows": self.rows},
            indent=1, sort_keys=True,
        ) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        if not self.rows:
            return ""
        cols = list(self.rows[0])
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

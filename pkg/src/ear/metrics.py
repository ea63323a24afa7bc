"""Segment-level and event-level F-score evaluation for parsed videos.

Per video, F-scores are computed for the audio plane, the visual plane and
the derived audio-visual plane (elementwise AND), plus a Type average of the
three and a modality-pooled Event score. Corpus numbers are macro averages
over videos. Degenerate empty-vs-empty comparisons score 1.0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigError, ShapeError

DEFAULT_IOU = 0.5
DEFAULT_TAU = 0.5


def binarize(probs: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Indicator of probs >= tau (boundary inclusive)."""
    if not 0.0 < tau < 1.0:
        raise ConfigError(f"binarize threshold must lie in (0, 1), got {tau}")
    return (np.asarray(probs) >= tau).astype(np.float64)


def _f_from_counts(tp: float, fp: float, fn: float) -> float:
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    denom = 2.0 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def segment_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    """F-score over (segment, category) cells of one binary plane."""
    if pred.shape != gt.shape:
        raise ShapeError(f"segment_f1: pred {pred.shape} vs gt {gt.shape}")
    p = pred > 0.5
    g = gt > 0.5
    tp = float(np.sum(p & g))
    fp = float(np.sum(p & ~g))
    fn = float(np.sum(~p & g))
    return _f_from_counts(tp, fp, fn)


@dataclass(frozen=True)
class EventSpan:
    """Maximal run of consecutive positive segments for one category."""

    category: int
    start: int  # inclusive
    end: int    # exclusive


def extract_events(plane: np.ndarray) -> list[EventSpan]:
    """Maximal runs of consecutive 1s per category."""
    spans: list[EventSpan] = []
    t, c = plane.shape
    for cat in range(c):
        col = plane[:, cat] > 0.5
        start = None
        for i in range(t):
            if col[i] and start is None:
                start = i
            elif not col[i] and start is not None:
                spans.append(EventSpan(cat, start, i))
                start = None
        if start is not None:
            spans.append(EventSpan(cat, start, t))
    return spans


def spans_to_plane(spans: list[EventSpan], t: int, c: int) -> np.ndarray:
    plane = np.zeros((t, c))
    for s in spans:
        plane[s.start : s.end, s.category] = 1.0
    return plane


def temporal_iou(a: EventSpan, b: EventSpan) -> float:
    inter = max(0, min(a.end, b.end) - max(a.start, b.start))
    union = max(a.end, b.end) - min(a.start, b.start)
    return inter / union if union > 0 else 0.0


def match_events(
    pred: list[EventSpan], gt: list[EventSpan], iou_min: float = DEFAULT_IOU
) -> tuple[int, int, int]:
    """Greedy one-to-one matching per category in descending IoU order.

    A pair matches iff same category and IoU >= iou_min. Returns (tp, fp, fn).
    """
    if not 0.0 < iou_min <= 1.0:
        raise ConfigError(f"iou threshold must lie in (0, 1], got {iou_min}")
    candidates = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if p.category != g.category:
                continue
            iou = temporal_iou(p, g)
            if iou >= iou_min:
                candidates.append((-iou, i, j))
    candidates.sort()
    used_p: set[int] = set()
    used_g: set[int] = set()
    tp = 0
    for _, i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp += 1
    return tp, len(pred) - tp, len(gt) - tp


def event_f1(pred: list[EventSpan], gt: list[EventSpan], iou_min: float = DEFAULT_IOU) -> float:
    tp, fp, fn = match_events(pred, gt, iou_min)
    return _f_from_counts(tp, fp, fn)


@dataclass
class VideoScores:
    """Ten per-video numbers: five segment-level, five event-level."""

    seg_audio: float
    seg_visual: float
    seg_av: float
    seg_type: float
    seg_event: float
    evt_audio: float
    evt_visual: float
    evt_av: float
    evt_type: float
    evt_event: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                self.seg_audio, self.seg_visual, self.seg_av, self.seg_type, self.seg_event,
                self.evt_audio, self.evt_visual, self.evt_av, self.evt_type, self.evt_event,
            ]
        )


def score_video(
    pred_a: np.ndarray,
    pred_v: np.ndarray,
    gt_a: np.ndarray,
    gt_v: np.ndarray,
    iou_min: float = DEFAULT_IOU,
) -> VideoScores:
    if pred_a.shape != gt_a.shape or pred_v.shape != gt_v.shape or pred_a.shape != pred_v.shape:
        raise ShapeError(
            f"score_video: pred {pred_a.shape}/{pred_v.shape} vs gt {gt_a.shape}/{gt_v.shape}"
        )
    pred_av = np.minimum(pred_a, pred_v)
    gt_av = np.minimum(gt_a, gt_v)

    fa = segment_f1(pred_a, gt_a)
    fv = segment_f1(pred_v, gt_v)
    fav = segment_f1(pred_av, gt_av)
    # modality-agnostic segment score over the pooled planes
    fpool = segment_f1(np.concatenate([pred_a, pred_v], axis=0), np.concatenate([gt_a, gt_v], axis=0))

    ea, ev_, eav = (extract_events(p) for p in (pred_a, pred_v, pred_av))
    ga, gv, gav = (extract_events(g) for g in (gt_a, gt_v, gt_av))
    efa = event_f1(ea, ga, iou_min)
    efv = event_f1(ev_, gv, iou_min)
    efav = event_f1(eav, gav, iou_min)
    # disjoint union of audio and visual events: counts pooled across planes
    tp_a, fp_a, fn_a = match_events(ea, ga, iou_min)
    tp_v, fp_v, fn_v = match_events(ev_, gv, iou_min)
    efpool = _f_from_counts(tp_a + tp_v, fp_a + fp_v, fn_a + fn_v)

    return VideoScores(
        fa, fv, fav, (fa + fv + fav) / 3.0, fpool,
        efa, efv, efav, (efa + efv + efav) / 3.0, efpool,
    )


@dataclass
class MetricsReport:
    """Corpus-level report: macro-averaged F-scores and their grand average."""

    segment: dict[str, float] = field(default_factory=dict)
    event: dict[str, float] = field(default_factory=dict)
    average: float = 0.0
    num_videos: int = 0

    def to_dict(self) -> dict:
        return {
            "segment": {k: round(v, 12) for k, v in self.segment.items()},
            "event": {k: round(v, 12) for k, v in self.event.items()},
            "average": round(self.average, 12),
            "num_videos": self.num_videos,
        }

    def table(self) -> str:
        cols = ["audio", "visual", "av", "type", "event"]
        header = f"{'level':<10}" + "".join(f"{c:>9}" for c in cols)
        seg = f"{'segment':<10}" + "".join(f"{self.segment[c]:>9.4f}" for c in cols)
        evt = f"{'event':<10}" + "".join(f"{self.event[c]:>9.4f}" for c in cols)
        return "\n".join([header, seg, evt, f"{'average':<10}{self.average:>9.4f}"])


def evaluate_corpus(
    preds: dict[str, tuple[np.ndarray, np.ndarray]],
    gts: dict[str, tuple[np.ndarray, np.ndarray]],
    iou_min: float = DEFAULT_IOU,
) -> MetricsReport:
    """Macro-average per-video scores over an aligned corpus.

    ``preds`` and ``gts`` map video id to binary (audio, visual) planes.
    """
    missing = sorted(set(gts) - set(preds))
    extra = sorted(set(preds) - set(gts))
    if missing or extra:
        raise AlignmentError(
            f"prediction/ground-truth mismatch; missing predictions: {missing}, unmatched predictions: {extra}"
        )
    if not gts:
        raise AlignmentError("empty corpus")
    rows = []
    for vid in sorted(gts):
        pa, pv = preds[vid]
        ga, gv = gts[vid]
        rows.append(score_video(pa, pv, ga, gv, iou_min).as_array())
    mean = np.stack(rows).mean(axis=0)
    keys = ["audio", "visual", "av", "type", "event"]
    segment = dict(zip(keys, mean[:5].tolist()))
    event = dict(zip(keys, mean[5:].tolist()))
    return MetricsReport(segment, event, float(mean.mean()), len(rows))


def per_class_segment_f1(
    preds: dict[str, tuple[np.ndarray, np.ndarray]],
    gts: dict[str, tuple[np.ndarray, np.ndarray]],
) -> dict[str, list[float]]:
    """Debug breakdown: per-category segment F per modality, macro over videos."""
    first = next(iter(gts.values()))
    c = first[0].shape[1]
    out = {"audio": [], "visual": []}
    for cat in range(c):
        fa = [segment_f1(preds[v][0][:, [cat]], gts[v][0][:, [cat]]) for v in sorted(gts)]
        fv = [segment_f1(preds[v][1][:, [cat]], gts[v][1][:, [cat]]) for v in sorted(gts)]
        out["audio"].append(float(np.mean(fa)))
        out["visual"].append(float(np.mean(fv)))
    return out

"""Similarity-based uni-modal label migration.

Audio-visual segment labels are transferred to soft uni-modal labels across
highly similar segments in a pooled batch, then duplicate annotations are
averaged and the original ground truth is restored via an elementwise max.
Pure numpy; nothing here is differentiated.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, IngestionError

ROW_NORM_MIN = 1e-9

# Similarity thresholds: audio features are more discriminative, so the
# audio threshold sits higher.
DEFAULT_MU_AUDIO = 0.98
DEFAULT_MU_VISUAL = 0.95


@dataclass
class MigrationResult:
    similarity: np.ndarray        # (T', T') cosine similarity
    mask: np.ndarray              # (T', T') binary high-similarity mask
    masked_similarity: np.ndarray  # mask * similarity
    raw_labels: np.ndarray        # (T', C') migrated labels, may exceed 1
    duplicate_counts: np.ndarray  # (T', C') donor counts per entry
    labels: np.ndarray            # (T', C') final soft labels in [0, 1]
    threshold: float


def cosine_similarity(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity between segment feature rows."""
    norms = np.linalg.norm(features, axis=1)
    bad = np.nonzero(norms <= ROW_NORM_MIN)[0]
    if bad.size:
        raise IngestionError(f"zero-norm feature rows at segment indices {bad.tolist()}")
    unit = features / norms[:, None]
    sim = unit @ unit.T
    # guard tiny excursions above 1 from rounding so the diagonal is exact
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


def threshold_mask(similarity: np.ndarray, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """Keep only entries with similarity >= mu; returns (mask, masked similarity)."""
    if not 0.0 < mu <= 1.0 or mu != mu:
        raise ConfigError(f"similarity threshold must lie in (0, 1], got {mu}")
    mask = (similarity >= mu).astype(np.float64)
    return mask, mask * similarity


def migrate(masked_similarity: np.ndarray, av_labels: np.ndarray) -> np.ndarray:
    """Raw migrated labels: masked similarity times the audio-visual labels."""
    return masked_similarity @ av_labels


def postprocess(raw_labels: np.ndarray, mask: np.ndarray, av_labels: np.ndarray):
    """Average duplicate annotations and restore the original ground truth.

    Entries with no donors (0/0) are defined as 0; entries annotated 1 in the
    audio-visual ground truth stay exactly 1.
    """
    counts = mask @ av_labels
    averaged = np.divide(raw_labels, counts, out=np.zeros_like(raw_labels), where=counts > 0)
    final = np.maximum(averaged, av_labels)
    return counts, final


def migrate_batch(features: np.ndarray, av_labels: np.ndarray, mu: float) -> MigrationResult:
    """Run the full migration pipeline on one pooled segment batch."""
    if features.shape[0] != av_labels.shape[0]:
        raise IngestionError(
            f"segment count mismatch: {features.shape[0]} feature rows vs {av_labels.shape[0]} label rows"
        )
    sim = cosine_similarity(features)
    mask, masked = threshold_mask(sim, mu)
    raw = migrate(masked, av_labels)
    counts, final = postprocess(raw, mask, av_labels)
    return MigrationResult(sim, mask, masked, raw, counts, final, mu)


def migrate_grouped(
    features: np.ndarray, av_labels: np.ndarray, mu: float, video_ids: list | None
) -> np.ndarray:
    """Final soft labels, optionally restricting the donor pool per video.

    With ``video_ids=None`` the whole batch is one pool (cross-video
    migration, the default); otherwise segments only migrate within their
    own video.
    """
    if video_ids is None:
        return migrate_batch(features, av_labels, mu).labels
    out = np.zeros_like(av_labels, dtype=np.float64)
    ids = np.asarray(video_ids)
    for vid in dict.fromkeys(video_ids):  # preserve order, unique
        sel = np.nonzero(ids == vid)[0]
        out[sel] = migrate_batch(features[sel], av_labels[sel], mu).labels
    return out

"""Triplet curation: generation strategies, pseudo-label filtering, coverage statistics."""

from .filtering import (
    FilterConfig,
    FilterResult,
    HttpScorer,
    KeywordScorer,
    Rejection,
    ScorerError,
    ScorerUnavailable,
    SimilarityScorer,
    filter_pseudo_labels,
)
from .triplets import (
    CATEGORY_TEMPLATE,
    ONE_TO_MANY,
    ONE_TO_ONE,
    ONE_TO_ZERO,
    STRATEGIES,
    VLM_ATTRIBUTE,
    IngestError,
    Triplet,
    category_expression,
    crop_mask_region,
    ingest_one_to_one,
    make_one_to_many,
    make_one_to_zero,
)
from .vocab import DEFAULT_ATTRIBUTE_TAGS, CoverageReport, Vocab, VocabError, coverage_stats

__all__ = [
    "CATEGORY_TEMPLATE",
    "DEFAULT_ATTRIBUTE_TAGS",
    "ONE_TO_MANY",
    "ONE_TO_ONE",
    "ONE_TO_ZERO",
    "STRATEGIES",
    "VLM_ATTRIBUTE",
    "CoverageReport",
    "FilterConfig",
    "FilterResult",
    "HttpScorer",
    "IngestError",
    "KeywordScorer",
    "Rejection",
    "ScorerError",
    "ScorerUnavailable",
    "SimilarityScorer",
    "Triplet",
    "Vocab",
    "VocabError",
    "category_expression",
    "coverage_stats",
    "crop_mask_region",
    "filter_pseudo_labels",
    "ingest_one_to_one",
    "make_one_to_many",
    "make_one_to_zero",
]

"""Duplicate question detection with refined sentence embeddings."""

__version__ = "0.1.0"

from .corpus import (Corpus, CensusReport, DuplicatePair, Post, SplitSpec, census, filter_by_tag, ingest,
                     load_corpus, save_corpus, split, strip_annotations, strip_bulky_artifacts)
from .embedding import (EmbeddingStore, ProviderConfig, build_input, embed_corpus, embed_offline, embed_remote,
                        load_store, save_store)
from .evalharness import (MetricsReport, auc, batch_size_sweep, compare_settings, pairwise_auc_eval, top_n_accuracy,
                          topic_study)
from .rank import LatentIndex, RankedList, load_index, project, save_index, top_k, top_k_text
from .refine import (ProjectionHead, TrainingConfig, cosine_distance, cosine_similarity, gradients, load_head,
                     mnr_loss, save_head, train, triplet_loss)

__all__ = [
    "__version__",
    "Corpus",
    "CensusReport",
    "DuplicatePair",
    "Post",
    "SplitSpec",
    "census",
    "filter_by_tag",
    "ingest",
    "load_corpus",
    "save_corpus",
    "split",
    "strip_annotations",
    "strip_bulky_artifacts",
    "EmbeddingStore",
    "ProviderConfig",
    "build_input",
    "embed_corpus",
    "embed_offline",
    "embed_remote",
    "load_store",
    "save_store",
    "MetricsReport",
    "auc",
    "batch_size_sweep",
    "compare_settings",
    "pairwise_auc_eval",
    "top_n_accuracy",
    "topic_study",
    "LatentIndex",
    "RankedList",
    "load_index",
    "project",
    "save_index",
    "top_k",
    "top_k_text",
    "ProjectionHead",
    "TrainingConfig",
    "cosine_distance",
    "cosine_similarity",
    "gradients",
    "load_head",
    "mnr_loss",
    "save_head",
    "train",
    "triplet_loss",
]

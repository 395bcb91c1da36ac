"""Lifelong knowledge-graph embedding over growing snapshot sequences."""

from .builder import BuilderConfig, build_from_file, build_growth_dataset
from .evaluation import Query, TransferMatrix, fwt_bwt, link_prediction, rank, union_eval
from .kg import Fact, GrowthDataset, Snapshot, Vocabulary, delta_stats, load_triples
from .lkge import FactLedger, LkgeConfig
from .runner import RunConfig, RunRecord, evaluate_future, run_lifelong
from .transe import EmbeddingState, SparseAdam, dissimilarity

__version__ = "0.1.0"

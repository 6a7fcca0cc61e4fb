"""Streaming multi-vector retrieval with compressed, hierarchically sharded indexes."""

from .config import EngineConfig, LifecycleConfig
from .embed import FileEmbedder, QueryEmbedding, SyntheticEmbedder
from .errors import DataError, InvariantViolation, ShardStreamError
from .lifecycle import Lifecycle, check_partition, reindex_count, shard_count
from .model import ModelConfig, ShardModel, build_shard_model
from .search import MergedResult, merge_rankings, search_all
from .shard import SearchParams, ShardIndex, search_shard
from .stream import DocumentRecord, PassageRecord, SyntheticStreamSpec, generate_drift_stream

__version__ = "0.1.0"

__all__ = [
    "DataError", "DocumentRecord", "EngineConfig", "FileEmbedder", "InvariantViolation", "Lifecycle",
    "LifecycleConfig", "MergedResult", "ModelConfig", "PassageRecord", "QueryEmbedding", "SearchParams",
    "ShardIndex", "ShardModel", "ShardStreamError", "SyntheticEmbedder", "SyntheticStreamSpec",
    "build_shard_model", "check_partition", "generate_drift_stream", "merge_rankings", "reindex_count",
    "search_all", "search_shard", "shard_count",
]

"""PropGraph-QA: multi-hop question answering over a proposition graph."""

from .version import __version__

from .config import RunConfig, get_config
from .graph_store import GraphIndex, load, persist
from .indexer import IndexBuilder
from .pipeline import Pipeline, PipelineResult
from .retrieval import Retriever

__all__ = [
    "GraphIndex",
    "IndexBuilder",
    "Pipeline",
    "PipelineResult",
    "Retriever",
    "RunConfig",
    "__version__",
    "get_config",
    "load",
    "persist",
]

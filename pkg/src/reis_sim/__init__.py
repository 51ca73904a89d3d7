"""Desk-scale simulator of in-storage retrieval for RAG pipelines."""

from .api import FlashCommand, Opcode, ReisDevice
from .engine import ReisRetriever, SearchParams, SearchResult, calibrate_filter_threshold, search, search_batch
from .host import GroundTruth, HostCostModel, exact_ground_truth, host_search, recall_at_k
from .ivf import IVFKMeans, IvfIndex, KmeansParams, build_index
from .layout import DeployedDatabase, deploy_flat, deploy_ivf, load_image, save_image
from .ssd import SsdConfig, SsdGeometry, TimingParams, load_config, preset
from .vectors import BinaryQuantizer, QuantizerModel, train_quantizer

__version__ = "0.1.0"

__all__ = [
    "BinaryQuantizer",
    "DeployedDatabase",
    "FlashCommand",
    "GroundTruth",
    "HostCostModel",
    "IVFKMeans",
    "IvfIndex",
    "KmeansParams",
    "Opcode",
    "QuantizerModel",
    "ReisDevice",
    "ReisRetriever",
    "SearchParams",
    "SearchResult",
    "SsdConfig",
    "SsdGeometry",
    "TimingParams",
    "build_index",
    "calibrate_filter_threshold",
    "deploy_flat",
    "deploy_ivf",
    "exact_ground_truth",
    "host_search",
    "load_config",
    "load_image",
    "preset",
    "recall_at_k",
    "save_image",
    "search",
    "search_batch",
    "train_quantizer",
]

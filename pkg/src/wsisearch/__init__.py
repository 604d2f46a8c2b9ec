"""Content-based retrieval over whole-slide image archives: four search pipelines and a benchmark harness."""
from .archive import ArchiveManifest, SynthSpec, generate_synthetic_archive, load_manifest
from .bench import build_report, macro_f1, overall_rating, run_leave_one_out
from .search import ENGINE_NAMES, Engine, EngineConfig, engine_config
from .veb import VebTree

__version__ = "0.1.0"

__all__ = [
    "ArchiveManifest",
    "SynthSpec",
    "generate_synthetic_archive",
    "load_manifest",
    "build_report",
    "macro_f1",
    "overall_rating",
    "run_leave_one_out",
    "ENGINE_NAMES",
    "Engine",
    "EngineConfig",
    "engine_config",
    "VebTree",
]

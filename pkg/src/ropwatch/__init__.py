"""ROP detection lab on a toy instruction set."""

from .estimators import GapDetector, IpFeatureExtractor, ParityDetector
from .gadgets import (
    RopChain,
    base_chain,
    count_variants,
    enumerate_variants,
    generate_attacks,
    scan_gadgets,
)
from .harness import ConfusionMatrix, ExperimentPlan, accuracy, build_corpus, error_rate, run_experiment
from .indicators import gap_analyze, ip_features, parity_analyze, replay_batch
from .isa import assemble, disassemble
from .vm import exploit_run, run

__version__ = "0.1.0"

__all__ = [
    "ConfusionMatrix", "ExperimentPlan", "GapDetector", "IpFeatureExtractor", "ParityDetector",
    "RopChain", "accuracy", "assemble", "base_chain", "build_corpus", "count_variants",
    "disassemble", "enumerate_variants", "error_rate", "exploit_run", "gap_analyze",
    "generate_attacks", "ip_features", "parity_analyze", "replay_batch", "run",
    "run_experiment", "scan_gadgets",
]

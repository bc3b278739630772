from .cep_quality import (CepQualityConfig, ShiftDetectionConfig,
                          run_cep_quality, run_shift_detection)
from .reliability import ReliabilityConfig, run_reliability
from .scalability import ScalabilityConfig, run_scalability

EXPERIMENTS = {
    "cep": (CepQualityConfig, run_cep_quality),
    "shift-detection": (ShiftDetectionConfig, run_shift_detection),
    "scalability": (ScalabilityConfig, run_scalability),
    "reliability": (ReliabilityConfig, run_reliability),
}

__all__ = [
    "EXPERIMENTS",
    "CepQualityConfig", "run_cep_quality",
    "ShiftDetectionConfig", "run_shift_detection",
    "ReliabilityConfig", "run_reliability",
    "ScalabilityConfig", "run_scalability",
]

"""Near-field OCDM integrated sensing and communication simulator."""
from .waveform import DssPlan, WaveformConfig, chirp_eval, dfnt_matrix, select_dss
from .scene import ArrayGeometry, CommScene, GainModel, Scene, Target
from .fmcw import MeasurementCube, pair_truth, synthesize_measurements
from .pair_estimation import PairEstimate, PairParameterEstimator, estimate_pair
from .vibs import TargetEstimate, VirtualBistaticSensing, vibs_pipeline
from .comm_ce import SensingEnhancedChannelEstimator, build_polar_dictionary, domp
from .harness import ExperimentConfig, load_config, run_experiment

__all__ = [
    "DssPlan", "WaveformConfig", "chirp_eval", "dfnt_matrix", "select_dss",
    "ArrayGeometry", "CommScene", "GainModel", "Scene", "Target",
    "MeasurementCube", "pair_truth", "synthesize_measurements",
    "PairEstimate", "PairParameterEstimator", "estimate_pair",
    "TargetEstimate", "VirtualBistaticSensing", "vibs_pipeline",
    "SensingEnhancedChannelEstimator", "build_polar_dictionary", "domp",
    "ExperimentConfig", "load_config", "run_experiment",
]

__version__ = "0.1.0"

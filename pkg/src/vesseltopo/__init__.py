"""Vessel-topology toolkit: binary mask to repaired particle forest,
artery/vein probability refinement, and labeled volume reconstruction."""

from .volume import (
    Volume3D,
    distance_transform,
    gaussian_smooth,
    load_volume,
    save_volume,
    validate_mask,
    vesselness_enhance,
)
from .msfm import (
    GeodesicPath,
    backtrace,
    solve_eikonal,
    speed_from_distance,
    trace_skeleton_tree,
)
from .topology import (
    Branch,
    Particle,
    Subtree,
    TopologyForest,
    build_graph,
    detect_false_terminals,
    extract_branches,
    extract_subtrees,
    extract_terminal_branches,
    load_forest,
    repair,
    root_forest,
    sample_particles,
    save_forest,
)
from .bridge import (
    OrientedPatch,
    export_dataset,
    extract_patches,
    ingest_probabilities,
    mutual_correct,
    oracle_classifier,
)
from .optimizer import ConfidenceReport, refine, score, threshold_labels
from .synth_eval import (
    Metrics,
    SynthCase,
    SynthSpec,
    evaluate,
    fuse_hilum,
    generate,
    match_truth,
    reconstruct_labels,
)
from .tables import LabelTable, ProbabilityTable, read_labels, write_labels, write_probabilities
from .pipeline import TopoSettings, extract_topology

__version__ = "0.1.0"

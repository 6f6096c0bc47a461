"""Query-based perception: instance banks, sparse decoder, occupancy and losses."""
from .assignment import CapacityError, chamfer, chamfer_matrix, hungarian
from .banks import build_instance_banks, load_banks, save_banks
from .decoder import (
    AlignmentError, FeaturePyramid, FirstPass, PerceptionConfig, PerceptionOutputs, PerceptionParams,
    SparseQueryBank, TaskDisabledError, decoder_block, deformable_aggregate, first_pass, init_bank,
    lift_to_expert, occupancy_branch, project_back_and_refine, query_interaction, task_refine,
)
from .kmeans import InsufficientSamplesError, KMeansResult, kmeans_init
from .loss import PerceptionLoss, PerceptionTargets, perception_loss

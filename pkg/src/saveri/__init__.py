"""saveri: learned probabilistic safety assessment for closed-loop
trajectory tracking systems, with online sim-to-real adaptation."""

__version__ = "0.1.0"

from .dynamics import (ClosedLoopSystem, Episode, SafeSet, is_safe,
                       make_system, plan_trajectory, rollout_episode,
                       step_closed_loop)
from .dataset import (FeedbackDatum, Segment, TrainingDatum,
                      build_feedback_set, build_training_set, load_dataset,
                      save_dataset, segment_episode, unsafety_score)
from .metric import DistanceMatrix, distance_matrix, dtw
from .embedding import (EmbeddedSet, EmbeddingConfig, MappingNetwork,
                        NetworkConfig, map_input, train_mapping, tsne_embed)
from .belief import (BBA, EMPTY_BBA, Assessment, GridModel, GridSpec, assess,
                     bba_from_feedback, bba_from_training, build_grid_model,
                     combine, fuse_F, fuse_G, locate, prior_estimate)
from .adapt import (AdaptConfig, DiscrepancyGP, adaptation_step, gpr_fit,
                    gpr_predict, update_training_uncertainty)
from .bundle import ModelBundle, load_bundle, save_bundle

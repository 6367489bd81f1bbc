"""Multi-facet metric-learning recommenders (CML / MAR / MARS variants)."""

from .dataset import (InteractionDataset, SplitDataset, Triplets, compute_adaptive_margins,
                      generate_conflict_dataset, leave_one_out_split, load_interactions,
                      sample_batch, user_sampling_distribution)
from .evaluator import EvalProtocol, EvalReport, evaluate, rank_test_item
from .model import (Geometry, ModelParams, Variant, cross_facet_similarity, facet_similarity,
                    facet_weights, init_params, project_facets, score_items)
from .objective import (Gradients, LossBreakdown, LossConfig, loss_facet, loss_pull, loss_push,
                        total_loss, total_loss_gradients)
from .optim import (OptimConfig, calibrated_rsgd_step, finite_difference_gradient,
                    projected_sgd_step, retract, spherical_sgd_step, tangent_project)
from .trainer import TrainConfig, TrainLog, sweep, train

__version__ = "0.1.0"

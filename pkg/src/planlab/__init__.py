"""planlab: a self-contained trajectory-planning lab.

A small imitation-learning planner over a from-scratch autodiff core,
with attention-guided token pruning in the encoder, cross-scenario
feature mixing against long-tail training sets, and a closed-loop
simulation harness with driving metrics.
"""

from . import autodiff
from .benchmark import (AblationConfig, EvalConfig, evaluate_model,
                        run_ablation, run_benchmark)
from .encoder import EncoderConfig, EncoderOutput, forward_encoder
from .encoding import FourierEmbedding, SceneTokens, TokenLayout
from .interpolation import (PiOSchedule, ScenarioClassifier, contribution,
                            decompose, interpolate, pi_o_value,
                            plan_batch_interpolation, quantile_threshold)
from .losses import LossWeights, compute_loss, reorder_agent_targets
from .metrics import (MetricsReport, MetricThresholds, ScenarioMetrics,
                      aggregate_score, collision_check, compute_metrics,
                      time_to_collision)
from .model import DecoderOutput, ModelConfig, PlannerModel
from .scene import (DatasetManifest, GenConfig, ScenarioRecord,
                    dominant_types, generate_dataset, load_dataset,
                    load_manifest, save_dataset, save_manifest)
from .simulation import (PlannerPolicy, ReplayPolicy, SimulationConfig,
                         StopPolicy, rollout)
from .training import (AdamW, TrainConfig, Trainer, TrainingLog, lr_at,
                       train)

__version__ = "0.1.0"
